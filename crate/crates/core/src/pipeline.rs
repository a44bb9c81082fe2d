//! Stage orchestration: analysis, segmentation and removal, then an optional
//! simulate/examine/correct pass. A prompt-chained analysis replaces the
//! single analyzer prompt in the local modes.

use std::cell::RefCell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSet, Endpoint, Locality};
use crate::parse::{
    format_label_list, normalize_labels, parse_analyzer_response, parse_examiner_response,
    parse_list_after, parse_target_line, CorrectionList, ParseError, RemovalPlan, ELEMENTS_MARKER,
    KEEP_MARKER, TARGET_MARKER,
};
use crate::prompts::{
    render_analyzer, render_chain_step, render_examiner, render_simulator, ChainStep, PromptBundle,
    PromptError,
};
use crate::raster::{mask_dilate, mask_union, Image, Mask, RasterError};

/// Context labels handed to the consolidation step.
pub const CONSOLIDATE_TARGETS: &str = "Target objects:";
pub const CONSOLIDATE_ELEMENTS: &str = "Associated elements:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Single analyzer prompt on the vision reasoner, with self-correction.
    CloudFull,
    CloudNoCorrection,
    /// Four chained steps; only element enumeration sees the image.
    LocalChain,
    /// Single analyzer prompt on the vision reasoner, no correction.
    AblationA,
    /// Four chained steps, all on the vision reasoner, no correction.
    AblationB,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::CloudFull,
        Mode::CloudNoCorrection,
        Mode::LocalChain,
        Mode::AblationA,
        Mode::AblationB,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::CloudFull => "cloud_full",
            Mode::CloudNoCorrection => "cloud_no_correction",
            Mode::LocalChain => "local_chain",
            Mode::AblationA => "ablation_a",
            Mode::AblationB => "ablation_b",
        }
    }

    pub fn is_chained(self) -> bool {
        matches!(self, Mode::LocalChain | Mode::AblationB)
    }

    pub fn allows_correction(self) -> bool {
        self == Mode::CloudFull
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown mode {s:?} (expected one of {})", names.join(", "))
            })
    }
}

/// How stage durations are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Measured elapsed time; remote calls are timed individually and the
    /// rest of each stage counts as local.
    #[default]
    Wall,
    /// Sum of each backend's declared latency. Reproducible.
    Virtual,
}

impl fmt::Display for ClockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClockMode::Wall => "wall",
            ClockMode::Virtual => "virtual",
        })
    }
}

impl FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wall" => Ok(ClockMode::Wall),
            "virtual" => Ok(ClockMode::Virtual),
            other => Err(format!(
                "unknown clock {other:?} (expected wall or virtual)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub retries_on_malformed: u32,
    pub mask_dilate_radius: usize,
    /// Instances scoring at or above this are kept.
    pub segmenter_score_threshold: f64,
    pub max_parallel_requests: usize,
    pub self_correction: bool,
    /// Restrict corrective masks to the first-pass mask dilated by
    /// `conservative_margin`.
    pub conservative_correction: bool,
    pub conservative_margin: usize,
    pub clock: ClockMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CloudFull,
            retries_on_malformed: 2,
            mask_dilate_radius: 8,
            segmenter_score_threshold: 0.3,
            max_parallel_requests: 4,
            self_correction: true,
            conservative_correction: false,
            conservative_margin: 16,
            clock: ClockMode::Wall,
        }
    }
}

impl PipelineConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
        .normalized()
    }

    /// Applies the mode's forced settings: only the full cloud mode corrects.
    pub fn normalized(mut self) -> Self {
        if !self.mode.allows_correction() {
            self.self_correction = false;
        }
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.segmenter_score_threshold) {
            return Err(PipelineError::Config(format!(
                "segmenter_score_threshold {} outside [0, 1]",
                self.segmenter_score_threshold
            )));
        }
        if self.max_parallel_requests == 0 {
            return Err(PipelineError::Config(
                "max_parallel_requests must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn attempts(&self) -> u32 {
        self.retries_on_malformed + 1
    }
}

/// The simulator's account of the expected post-removal scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub text: String,
}

impl SceneDescription {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Analysis,
    Removal,
    Simulation,
    Examination,
    Correction,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Analysis => "analysis",
            Stage::Removal => "removal",
            Stage::Simulation => "simulation",
            Stage::Examination => "examination",
            Stage::Correction => "correction",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("analysis failed after {attempts} attempts: {last}")]
    AnalysisFailed { attempts: u32, last: String },
    #[error("self-correction response malformed after {attempts} attempts: {last}")]
    CorrectionFailed { attempts: u32, last: String },
    #[error("segmenter found no instance for any of {labels:?}")]
    NoMaskFound { labels: Vec<String> },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{stage} stage: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    fn at(self, stage: Stage) -> Self {
        match self {
            e @ PipelineError::Stage { .. } => e,
            e => PipelineError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub remote_s: f64,
    pub local_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub clock: ClockMode,
    pub stages: Vec<StageTiming>,
}

impl Timing {
    pub fn remote_s(&self) -> f64 {
        self.stages.iter().map(|s| s.remote_s).sum()
    }

    pub fn local_s(&self) -> f64 {
        self.stages.iter().map(|s| s.local_s).sum()
    }
}

/// Attributes time to stages and localities.
struct Meter {
    clock: ClockMode,
    stages: RefCell<Vec<StageTiming>>,
    current: RefCell<Option<(Stage, Instant, f64, f64)>>,
}

impl Meter {
    fn new(clock: ClockMode) -> Self {
        Self {
            clock,
            stages: RefCell::new(Vec::new()),
            current: RefCell::new(None),
        }
    }

    fn stage<T>(
        &self,
        stage: Stage,
        f: impl FnOnce() -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        *self.current.borrow_mut() = Some((stage, Instant::now(), 0.0, 0.0));
        let out = f();
        let (stage, start, remote, local) = self.current.borrow_mut().take().expect("stage open");
        let local = match self.clock {
            ClockMode::Wall => (start.elapsed().as_secs_f64() - remote).max(0.0),
            ClockMode::Virtual => local,
        };
        self.stages.borrow_mut().push(StageTiming {
            stage,
            remote_s: remote,
            local_s: local,
        });
        out.map_err(|e| e.at(stage))
    }

    fn call<E: Endpoint + ?Sized, T>(&self, ep: &E, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        let secs = match self.clock {
            ClockMode::Wall => start.elapsed().as_secs_f64(),
            ClockMode::Virtual => ep.simulated_latency().as_secs_f64(),
        };
        if let Some((_, _, remote, local)) = self.current.borrow_mut().as_mut() {
            match ep.locality() {
                Locality::Remote => *remote += secs,
                Locality::Local => *local += secs,
            }
        }
        out
    }

    fn finish(self) -> Timing {
        Timing {
            clock: self.clock,
            stages: self.stages.into_inner(),
        }
    }
}

/// Everything one run produced. Images are written next to the JSON.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub input_digest: String,
    pub instruction: String,
    pub mode: Mode,
    pub plan: RemovalPlan,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<SceneDescription>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correction: Option<CorrectionList>,
    /// Whether a corrective removal call was made.
    pub corrective_pass: bool,
    pub first_pass_digest: String,
    pub final_digest: String,
    pub timing: Timing,
    #[serde(skip)]
    pub first_pass: Image,
    #[serde(skip)]
    pub final_image: Image,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("records serialize")
    }

    /// Writes `<stem>.png`, `<stem>.first_pass.png` and `<stem>.json` into `dir`.
    pub fn write_to(&self, dir: &Path, stem: &str) -> Result<(), RasterError> {
        std::fs::create_dir_all(dir).map_err(RasterError::Io)?;
        self.final_image.save_png(dir.join(format!("{stem}.png")))?;
        self.first_pass
            .save_png(dir.join(format!("{stem}.first_pass.png")))?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json() + "\n")
            .map_err(RasterError::Io)
    }
}

fn parse_err(e: ParseError) -> String {
    e.to_string()
}

enum RetryError {
    Backend(BackendError),
    Exhausted { attempts: u32, last: String },
}

/// Calls `ask` until `parse` accepts the answer or attempts run out.
/// Backend errors are not retried here; the transport already retries.
fn with_retries<T>(
    attempts: u32,
    mut ask: impl FnMut() -> Result<String, BackendError>,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, RetryError> {
    let mut last = String::new();
    for _ in 0..attempts {
        let text = ask().map_err(RetryError::Backend)?;
        match parse(&text) {
            Ok(v) => return Ok(v),
            Err(e) => last = e,
        }
    }
    Err(RetryError::Exhausted { attempts, last })
}

fn analysis_failed(err: RetryError) -> PipelineError {
    match err {
        RetryError::Backend(e) => e.into(),
        RetryError::Exhausted { attempts, last } => {
            PipelineError::AnalysisFailed { attempts, last }
        }
    }
}

fn correction_failed(err: RetryError) -> PipelineError {
    match err {
        RetryError::Backend(e) => e.into(),
        RetryError::Exhausted { attempts, last } => {
            PipelineError::CorrectionFailed { attempts, last }
        }
    }
}

fn nonempty_plan(plan: RemovalPlan) -> Result<RemovalPlan, String> {
    if plan.labels.is_empty() {
        Err("removal plan is empty".into())
    } else {
        Ok(plan)
    }
}

/// Single-prompt analysis on the vision reasoner.
pub fn run_analysis(
    image: &Image,
    instruction: &str,
    backends: &BackendSet,
    cfg: &PipelineConfig,
) -> Result<RemovalPlan, PipelineError> {
    analysis(image, instruction, backends, cfg, &Meter::new(cfg.clock))
}

fn analysis(
    image: &Image,
    instruction: &str,
    backends: &BackendSet,
    cfg: &PipelineConfig,
    meter: &Meter,
) -> Result<RemovalPlan, PipelineError> {
    let bundle = render_analyzer(instruction)?;
    let vision = backends.vision.as_ref();
    with_retries(
        cfg.attempts(),
        || meter.call(vision, || vision.vision_reason(&bundle, image)),
        |text| {
            parse_analyzer_response(text)
                .map_err(parse_err)
                .and_then(nonempty_plan)
        },
    )
    .map_err(analysis_failed)
}

/// Segments every label, keeps instances at or above the threshold, dilates
/// each and unions them. `None` when nothing survives.
fn labels_mask(
    image: &Image,
    labels: &[String],
    backends: &BackendSet,
    cfg: &PipelineConfig,
    meter: &Meter,
) -> Result<Option<Mask>, PipelineError> {
    let seg = backends.segmenter.as_ref();
    let result = meter.call(seg, || seg.segment(image, labels))?;
    result.validate(image.dims())?;
    let masks: Vec<Mask> = result
        .per_label
        .iter()
        .flat_map(|(_, inst)| inst)
        .filter(|i| i.score >= cfg.segmenter_score_threshold)
        .map(|i| mask_dilate(&i.mask, cfg.mask_dilate_radius))
        .collect();
    if masks.is_empty() {
        return Ok(None);
    }
    Ok(Some(mask_union(&masks, Some(image.dims()))?))
}

fn checked_remove(
    remover: &dyn crate::backends::Remover,
    image: &Image,
    mask: &Mask,
    meter: &Meter,
) -> Result<Image, PipelineError> {
    let out = meter.call(remover, || remover.remove(image, mask))?;
    if out.dims() != image.dims() {
        return Err(BackendError::InvalidResponse(format!(
            "remover returned {:?} for a {:?} input",
            out.dims(),
            image.dims()
        ))
        .into());
    }
    Ok(out)
}

/// Segment, dilate, union, then one remover call on the union.
pub fn run_removal(
    image: &Image,
    plan: &RemovalPlan,
    backends: &BackendSet,
    cfg: &PipelineConfig,
) -> Result<Image, PipelineError> {
    removal(image, plan, backends, cfg, &Meter::new(cfg.clock)).map(|(img, _)| img)
}

fn removal(
    image: &Image,
    plan: &RemovalPlan,
    backends: &BackendSet,
    cfg: &PipelineConfig,
    meter: &Meter,
) -> Result<(Image, Mask), PipelineError> {
    if plan.labels.is_empty() {
        return Err(PromptError::EmptyPlan.into());
    }
    let mask = labels_mask(image, &plan.labels, backends, cfg, meter)?.ok_or_else(|| {
        PipelineError::NoMaskFound {
            labels: plan.labels.clone(),
        }
    })?;
    let out = checked_remove(backends.remover.as_ref(), image, &mask, meter)?;
    Ok((out, mask))
}

/// Result of the verify-and-refine pass.
#[derive(Debug, Clone)]
pub struct CorrectionOutcome {
    pub image: Image,
    pub description: SceneDescription,
    pub correction: CorrectionList,
    pub corrective_pass: bool,
}

/// Simulator, examiner, and at most one corrective removal.
///
/// With `conservative_correction` the first-pass mask is recomputed from the
/// plan on `original`.
pub fn run_self_correction(
    original: &Image,
    edited: &Image,
    plan: &RemovalPlan,
    backends: &BackendSet,
    cfg: &PipelineConfig,
) -> Result<CorrectionOutcome, PipelineError> {
    if !cfg.self_correction {
        return Err(PipelineError::Config("self_correction is disabled".into()));
    }
    let meter = Meter::new(cfg.clock);
    let first = if cfg.conservative_correction {
        labels_mask(original, &plan.labels, backends, cfg, &meter)?
    } else {
        None
    };
    let description = simulate(original, plan, backends, cfg, &meter)?;
    let correction = examine(edited, &description, backends, cfg, &meter)?;
    let (image, corrective_pass) =
        correct(edited, &correction, first.as_ref(), backends, cfg, &meter)?;
    Ok(CorrectionOutcome {
        image,
        description,
        correction,
        corrective_pass,
    })
}

fn simulate(
    original: &Image,
    plan: &RemovalPlan,
    backends: &BackendSet,
    cfg: &PipelineConfig,
    meter: &Meter,
) -> Result<SceneDescription, PipelineError> {
    let bundle = render_simulator(plan)?;
    let vision = backends.vision.as_ref();
    with_retries(
        cfg.attempts(),
        || meter.call(vision, || vision.vision_reason(&bundle, original)),
        |text| {
            let text = text.trim();
            if text.is_empty() {
                Err("empty scene description".to_string())
            } else {
                Ok(SceneDescription::new(text))
            }
        },
    )
    .map_err(correction_failed)
}

fn examine(
    edited: &Image,
    description: &SceneDescription,
    backends: &BackendSet,
    cfg: &PipelineConfig,
    meter: &Meter,
) -> Result<CorrectionList, PipelineError> {
    let bundle = render_examiner(description)?;
    let vision = backends.vision.as_ref();
    with_retries(
        cfg.attempts(),
        || meter.call(vision, || vision.vision_reason(&bundle, edited)),
        |text| parse_examiner_response(text).map_err(parse_err),
    )
    .map_err(correction_failed)
}

fn correct(
    edited: &Image,
    correction: &CorrectionList,
    first_pass_mask: Option<&Mask>,
    backends: &BackendSet,
    cfg: &PipelineConfig,
    meter: &Meter,
) -> Result<(Image, bool), PipelineError> {
    if correction.is_empty() {
        return Ok((edited.clone(), false));
    }
    let Some(mut mask) = labels_mask(edited, &correction.labels, backends, cfg, meter)? else {
        return Ok((edited.clone(), false));
    };
    if cfg.conservative_correction {
        let allowed = match first_pass_mask {
            Some(m) => mask_dilate(m, cfg.conservative_margin),
            None => Mask::empty(edited.width(), edited.height())?,
        };
        mask = mask.intersect(&allowed)?;
    }
    if mask.is_empty() {
        return Ok((edited.clone(), false));
    }
    let out = checked_remove(backends.correction_remover().as_ref(), edited, &mask, meter)?;
    Ok((out, true))
}

/// Context for the element-reasoning step.
pub fn reason_context(target: &str, elements: &[String]) -> String {
    format!(
        "Target: {target}\n{ELEMENTS_MARKER} {}",
        format_label_list(elements)
    )
}

/// Context for the consolidation step.
pub fn consolidate_context(target: &str, keep: &[String]) -> String {
    format!(
        "{CONSOLIDATE_TARGETS} {}\n{CONSOLIDATE_ELEMENTS} {}",
        format_label_list(&[target.to_string()]),
        format_label_list(keep)
    )
}

/// Four-step prompt-chained analysis.
pub fn run_local_chain(
    image: &Image,
    instruction: &str,
    backends: &BackendSet,
    cfg: &PipelineConfig,
) -> Result<RemovalPlan, PipelineError> {
    chain(image, instruction, backends, cfg, &Meter::new(cfg.clock))
}

fn chain(
    image: &Image,
    instruction: &str,
    backends: &BackendSet,
    cfg: &PipelineConfig,
    meter: &Meter,
) -> Result<RemovalPlan, PipelineError> {
    if !cfg.mode.is_chained() {
        return Err(PipelineError::Config(format!(
            "mode {} does not use prompt chaining",
            cfg.mode
        )));
    }
    let all_vision = cfg.mode == Mode::AblationB;
    let ask = |step: ChainStep, context: &str| -> Result<PromptBundle, PipelineError> {
        let mut bundle = render_chain_step(step, context)?;
        if all_vision {
            bundle.attach_image = true;
        }
        Ok(bundle)
    };
    let send = |bundle: &PromptBundle| -> Result<String, BackendError> {
        if bundle.attach_image {
            let v = backends.vision.as_ref();
            meter.call(v, || v.vision_reason(bundle, image))
        } else {
            let t = backends.text.as_ref();
            meter.call(t, || t.text_reason(bundle))
        }
    };
    let attempts = cfg.attempts();

    let b = ask(ChainStep::IdentifyTarget, instruction)?;
    let target = with_retries(
        attempts,
        || send(&b),
        |t| parse_target_line(t).map_err(parse_err),
    )
    .map_err(analysis_failed)?;

    let b = ask(ChainStep::EnumerateElements, &format!("Target: {target}"))?;
    let elements = with_retries(
        attempts,
        || send(&b),
        |t| parse_list_after(t, ELEMENTS_MARKER).map_err(parse_err),
    )
    .map_err(analysis_failed)?;

    let b = ask(
        ChainStep::ReasonConsistency,
        &reason_context(&target, &elements),
    )?;
    let (reasoning, keep) = with_retries(
        attempts,
        || send(&b),
        |t| {
            let keep = parse_list_after(t, KEEP_MARKER).map_err(parse_err)?;
            Ok((t.trim().to_string(), normalize_labels(&keep)))
        },
    )
    .map_err(analysis_failed)?;

    let b = ask(
        ChainStep::ConsolidateList,
        &consolidate_context(&target, &keep),
    )?;
    let labels = with_retries(
        attempts,
        || send(&b),
        |t| {
            let labels = normalize_labels(&parse_list_after(t, TARGET_MARKER).map_err(parse_err)?);
            if labels.is_empty() {
                Err("consolidated list is empty".into())
            } else {
                Ok(labels)
            }
        },
    )
    .map_err(analysis_failed)?;
    Ok(RemovalPlan::new(reasoning, labels))
}

/// Runs every stage the mode calls for and records the result.
pub fn run_pipeline(
    image: &Image,
    instruction: &str,
    backends: &BackendSet,
    cfg: &PipelineConfig,
) -> Result<RunRecord, PipelineError> {
    let cfg = cfg.clone().normalized();
    cfg.validate()?;
    let meter = Meter::new(cfg.clock);
    let plan = meter.stage(Stage::Analysis, || {
        if cfg.mode.is_chained() {
            chain(image, instruction, backends, &cfg, &meter)
        } else {
            analysis(image, instruction, backends, &cfg, &meter)
        }
    })?;
    let (first_pass, first_mask) = meter.stage(Stage::Removal, || {
        removal(image, &plan, backends, &cfg, &meter)
    })?;

    let (mut description, mut correction, mut corrective_pass) = (None, None, false);
    let mut final_image = first_pass.clone();
    if cfg.self_correction {
        let d = meter.stage(Stage::Simulation, || {
            simulate(image, &plan, backends, &cfg, &meter)
        })?;
        let c = meter.stage(Stage::Examination, || {
            examine(&first_pass, &d, backends, &cfg, &meter)
        })?;
        let (img, pass) = meter.stage(Stage::Correction, || {
            correct(&first_pass, &c, Some(&first_mask), backends, &cfg, &meter)
        })?;
        final_image = img;
        corrective_pass = pass;
        description = Some(d);
        correction = Some(c);
    }

    Ok(RunRecord {
        input_digest: image.digest(),
        instruction: instruction.to_string(),
        mode: cfg.mode,
        plan,
        description,
        correction,
        corrective_pass,
        first_pass_digest: first_pass.digest(),
        final_digest: final_image.digest(),
        timing: meter.finish(),
        first_pass,
        final_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{
        Remover, SegmentInstance, SegmentResult, Segmenter, TextReasoner, VisionReasoner,
    };
    use crate::oracle::{
        closure, oracle_backends, oracle_backends_with, person_with_shadow,
        person_with_watering_can, render, OracleOptions,
    };
    use std::collections::BTreeSet;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};

    /// Reasoner answering from a fixed script, one reply per call.
    struct Script {
        replies: Mutex<Vec<String>>,
        calls: AtomicUsize,
    }

    impl Script {
        fn new(replies: &[&str]) -> Arc<Self> {
            Arc::new(Self {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                calls: AtomicUsize::new(0),
            })
        }
        fn next(&self) -> Result<String, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| BackendError::InvalidResponse("script exhausted".into()))
        }
    }

    impl Endpoint for Script {}
    impl VisionReasoner for Script {
        fn vision_reason(&self, _: &PromptBundle, _: &Image) -> Result<String, BackendError> {
            self.next()
        }
    }
    impl TextReasoner for Script {
        fn text_reason(&self, _: &PromptBundle) -> Result<String, BackendError> {
            self.next()
        }
    }

    struct CountingRemover(AtomicUsize, Arc<dyn Remover>);
    impl Endpoint for CountingRemover {}
    impl Remover for CountingRemover {
        fn remove(&self, image: &Image, mask: &Mask) -> Result<Image, BackendError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            self.1.remove(image, mask)
        }
    }

    fn full(scene: &crate::oracle::SceneGraph) -> Image {
        render(scene, &BTreeSet::new())
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("cloud-full".parse::<Mode>().unwrap(), Mode::CloudFull);
        assert_eq!("LOCAL_CHAIN".parse::<Mode>().unwrap(), Mode::LocalChain);
        assert!("nope".parse::<Mode>().is_err());
        assert!(!PipelineConfig::for_mode(Mode::LocalChain).self_correction);
        assert!(PipelineConfig::for_mode(Mode::CloudFull).self_correction);
    }

    #[test]
    fn analysis_on_oracle_world() {
        let scene = person_with_shadow();
        let plan = run_analysis(
            &full(&scene),
            "Remove the person.",
            &oracle_backends(scene),
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(plan.labels, vec!["person", "person's shadow"]);
    }

    #[test]
    fn analysis_retries_then_fails() {
        let scene = person_with_shadow();
        let mut set = oracle_backends(scene.clone());
        let script = Script::new(&["garbage", "more garbage"]);
        set.vision = script.clone();
        let cfg = PipelineConfig {
            retries_on_malformed: 1,
            ..Default::default()
        };
        let err = run_analysis(&full(&scene), "Remove the person.", &set, &cfg).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::AnalysisFailed { attempts: 2, .. }
        ));
        assert_eq!(script.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn analysis_recovers_on_retry() {
        let scene = person_with_shadow();
        let mut set = oracle_backends(scene.clone());
        set.vision = Script::new(&["no markers", "Reasoning: ok\nTarget Objects: [\"tree\"]"]);
        let plan = run_analysis(
            &full(&scene),
            "Remove the tree.",
            &set,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(plan.labels, vec!["tree"]);
    }

    #[test]
    fn removal_matches_ground_truth() {
        let scene = person_with_shadow();
        let set = oracle_backends(scene.clone());
        let plan = RemovalPlan::new("", vec!["person".into(), "person's shadow".into()]);
        let out = run_removal(&full(&scene), &plan, &set, &PipelineConfig::default()).unwrap();
        assert_eq!(out, render(&scene, &BTreeSet::from([0, 1])));
    }

    #[test]
    fn removal_without_masks_aborts() {
        let scene = person_with_shadow();
        let set = oracle_backends(scene.clone());
        let plan = RemovalPlan::new("", vec!["unicorn".into()]);
        let err = run_removal(&full(&scene), &plan, &set, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, PipelineError::NoMaskFound { .. }));
        let strict = PipelineConfig {
            segmenter_score_threshold: 1.0,
            ..Default::default()
        };
        let plan = RemovalPlan::new("", vec!["person".into()]);
        let err = run_removal(&full(&scene), &plan, &set, &strict).unwrap_err();
        assert!(matches!(err, PipelineError::NoMaskFound { .. }));
    }

    struct FixedSeg(SegmentResult);
    impl Endpoint for FixedSeg {}
    impl Segmenter for FixedSeg {
        fn segment(&self, _: &Image, _: &[String]) -> Result<SegmentResult, BackendError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn union_contains_every_kept_instance() {
        let scene = person_with_shadow();
        let mut set = oracle_backends(scene.clone());
        let a = Mask::from_fn(192, 96, |x, y| x < 5 && y < 5).unwrap();
        let b = Mask::from_fn(192, 96, |x, y| x > 180 && y > 90).unwrap();
        let low = Mask::from_fn(192, 96, |x, _| x == 80).unwrap();
        set.segmenter = Arc::new(FixedSeg(SegmentResult {
            per_label: vec![
                (
                    "x".into(),
                    vec![SegmentInstance {
                        mask: a.clone(),
                        score: 0.5,
                    }],
                ),
                (
                    "y".into(),
                    vec![
                        SegmentInstance {
                            mask: b.clone(),
                            score: 0.3,
                        },
                        SegmentInstance {
                            mask: low.clone(),
                            score: 0.29,
                        },
                    ],
                ),
            ],
        }));
        let cfg = PipelineConfig {
            mask_dilate_radius: 2,
            ..Default::default()
        };
        let m = labels_mask(
            &full(&scene),
            &["x".into(), "y".into()],
            &set,
            &cfg,
            &Meter::new(ClockMode::Virtual),
        )
        .unwrap()
        .unwrap();
        assert!(a.is_subset_of(&m) && b.is_subset_of(&m));
        assert!(mask_dilate(&a, 2).is_subset_of(&m));
        assert!(!m.get(80, 50));
    }

    #[test]
    fn self_correction_noop_on_perfect_edit() {
        let scene = person_with_shadow();
        let set = oracle_backends(scene.clone());
        let plan = RemovalPlan::new("", vec!["person".into(), "person's shadow".into()]);
        let edited = render(&scene, &BTreeSet::from([0, 1]));
        let out = run_self_correction(
            &full(&scene),
            &edited,
            &plan,
            &set,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert!(out.correction.is_empty());
        assert!(!out.corrective_pass);
        assert_eq!(out.image, edited);
    }

    #[test]
    fn faulty_remover_is_corrected_in_one_pass() {
        let scene = person_with_shadow();
        let mut set = oracle_backends_with(
            scene.clone(),
            OracleOptions {
                faulty_object: Some(1),
                ..Default::default()
            },
        );
        let counter = Arc::new(CountingRemover(
            AtomicUsize::new(0),
            set.correction_remover().clone(),
        ));
        set.correction_remover = Some(counter.clone());
        let rec = run_pipeline(
            &full(&scene),
            "Remove the person.",
            &set,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(rec.first_pass, render(&scene, &BTreeSet::from([0])));
        assert_eq!(
            rec.correction.as_ref().unwrap().labels,
            vec!["person's shadow"]
        );
        assert!(rec.corrective_pass);
        assert_eq!(rec.final_image, render(&scene, &BTreeSet::from([0, 1])));
        assert_eq!(counter.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn over_editing_and_conservative_knob() {
        let scene = person_with_shadow();
        let opts = OracleOptions {
            simulator_omits: BTreeSet::from([2]),
            ..Default::default()
        };
        let set = oracle_backends_with(scene.clone(), opts);
        let rec = run_pipeline(
            &full(&scene),
            "Remove the person.",
            &set,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(rec.correction.as_ref().unwrap().labels, vec!["tree"]);
        assert_eq!(rec.final_image, render(&scene, &scene.ids()));
        let cautious = PipelineConfig {
            conservative_correction: true,
            ..Default::default()
        };
        let rec = run_pipeline(&full(&scene), "Remove the person.", &set, &cautious).unwrap();
        assert!(!rec.corrective_pass);
        assert_eq!(rec.final_image, render(&scene, &BTreeSet::from([0, 1])));
    }

    #[test]
    fn local_chain_on_held_object_scene() {
        let scene = person_with_watering_can();
        let set = oracle_backends(scene.clone());
        let cfg = PipelineConfig::for_mode(Mode::LocalChain);
        let plan = run_local_chain(&full(&scene), "Remove the person.", &set, &cfg).unwrap();
        assert_eq!(plan.labels, vec!["person", "watering can", "water stream"]);
        let rec = run_pipeline(&full(&scene), "Remove the person.", &set, &cfg).unwrap();
        assert!(rec.description.is_none() && rec.correction.is_none());
        let c = closure(&scene, &BTreeSet::from([0])).unwrap();
        assert_eq!(rec.final_image, render(&scene, &c));
    }

    #[test]
    fn chain_composes_scripted_steps() {
        let scene = person_with_shadow();
        let mut set = oracle_backends(scene.clone());
        let text = Script::new(&[
            "Target: dog",
            "The leash makes no sense alone.\nRemove: [\"leash\"]",
            "Target Objects: [\"dog\", \"leash\"]",
        ]);
        let vision = Script::new(&["Elements: [\"leash\", \"bench\"]"]);
        set.text = text.clone();
        set.vision = vision.clone();
        let cfg = PipelineConfig::for_mode(Mode::LocalChain);
        let plan = run_local_chain(&full(&scene), "Remove the dog", &set, &cfg).unwrap();
        assert_eq!(plan.labels, vec!["dog", "leash"]);
        assert_eq!(text.calls.load(Ordering::SeqCst), 3);
        assert_eq!(vision.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn ablation_b_routes_everything_to_vision() {
        let scene = person_with_watering_can();
        let mut set = oracle_backends(scene.clone());
        let text = Script::new(&[]);
        set.text = text.clone();
        let cfg = PipelineConfig::for_mode(Mode::AblationB);
        let plan = run_local_chain(&full(&scene), "Remove the person.", &set, &cfg).unwrap();
        assert_eq!(plan.labels, vec!["person", "watering can", "water stream"]);
        assert_eq!(text.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn malformed_consolidation_fails() {
        let scene = person_with_shadow();
        let mut set = oracle_backends(scene.clone());
        set.text = Script::new(&[
            "Target: dog",
            "Remove: []",
            "nothing",
            "still nothing",
            "nope",
        ]);
        set.vision = Script::new(&["Elements: []"]);
        let cfg = PipelineConfig::for_mode(Mode::LocalChain);
        let err = run_local_chain(&full(&scene), "Remove the dog", &set, &cfg).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::AnalysisFailed { attempts: 3, .. }
        ));
    }

    #[test]
    fn pipeline_errors_carry_stage() {
        let scene = person_with_shadow();
        let set = oracle_backends(scene.clone());
        let err = run_pipeline(
            &full(&scene),
            "Remove the unicorn.",
            &set,
            &PipelineConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Analysis));
    }

    #[test]
    fn record_json_shape_and_timing() {
        let scene = person_with_shadow();
        let set = oracle_backends(scene.clone());
        let rec = run_pipeline(
            &full(&scene),
            "Remove the tree.",
            &set,
            &PipelineConfig::default(),
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&rec.to_json()).unwrap();
        assert_eq!(v["plan"]["labels"][0], "tree");
        assert!(v["correction"]["labels"].as_array().unwrap().is_empty());
        assert_eq!(v["timing"]["stages"].as_array().unwrap().len(), 5);
        assert_eq!(rec.timing.remote_s(), 0.0);
        assert!(rec.timing.local_s() > 0.0);
        assert_eq!(rec.final_image.dims(), (192, 96));

        let cfg = PipelineConfig::for_mode(Mode::CloudNoCorrection);
        let rec = run_pipeline(&full(&scene), "Remove the tree.", &set, &cfg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rec.to_json()).unwrap();
        assert!(v.get("description").is_none() && v.get("correction").is_none());
    }
}
