//! Benchmark manifests, batch evaluation and report emission.
//!
//! A manifest is JSON lines, one entry per line:
//!
//! ```text
//! {"id": "p01", "input_image": "img/p01.png", "instruction": "Remove the person.",
//!  "ground_truth": "gt/p01.png", "categories": ["lighting_dependent"], "source": "synthetic"}
//! ```
//!
//! Paths are relative to the manifest file. `scene` optionally names a scene
//! JSON for oracle-backed runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::BackendSet;
use crate::metrics::{compute_metrics, MetricSet, PSNR_CAP_DB};
use crate::oracle::InteractionKind;
use crate::pipeline::{run_pipeline, Mode, PipelineConfig, Stage};
use crate::raster::Image;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Report(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    PublicDataset,
    Synthetic,
    CopyPaste,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::PublicDataset, Source::Synthetic, Source::CopyPaste];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::PublicDataset => "public_dataset",
            Source::Synthetic => "synthetic",
            Source::CopyPaste => "copy_paste",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub input_image: PathBuf,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default)]
    pub categories: Vec<InteractionKind>,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
}

/// Reads and validates a manifest. Relative paths are resolved against the
/// manifest's directory and must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, BenchError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Manifest {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| BenchError::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut entries = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry =
            serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
        if e.id.trim().is_empty() {
            return Err(err(line, "empty id".into()));
        }
        if !ids.insert(e.id.clone()) {
            return Err(err(line, format!("duplicate id {:?}", e.id)));
        }
        if e.instruction.trim().is_empty() {
            return Err(err(line, "empty instruction".into()));
        }
        e.categories.sort();
        e.categories.dedup();
        e.input_image = base.join(&e.input_image);
        e.ground_truth = e.ground_truth.map(|p| base.join(p));
        e.scene = e.scene.map(|p| base.join(p));
        for p in [
            Some(&e.input_image),
            e.ground_truth.as_ref(),
            e.scene.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                return Err(err(line, format!("missing file {}", p.display())));
            }
        }
        entries.push(e);
    }
    Ok(entries)
}

/// Writes entries as JSON lines with paths relative to `dir` where possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), BenchError> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| {
        p.strip_prefix(dir)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.to_path_buf())
    };
    let mut out = String::new();
    for e in entries {
        let mut e = e.clone();
        e.input_image = rel(&e.input_image);
        e.ground_truth = e.ground_truth.as_deref().map(rel);
        e.scene = e.scene.as_deref().map(rel);
        out.push_str(&serde_json::to_string(&e).expect("entries serialize"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub entries: usize,
    pub by_category: BTreeMap<InteractionKind, usize>,
    pub by_source: BTreeMap<Source, usize>,
}

/// Entry counts per interaction kind (multi-label entries count once per
/// kind) and per source. Every key is present, zeros included.
pub fn category_stats(entries: &[ManifestEntry]) -> CategoryStats {
    let mut by_category: BTreeMap<InteractionKind, usize> =
        InteractionKind::ALL.iter().map(|k| (*k, 0)).collect();
    let mut by_source: BTreeMap<Source, usize> = Source::ALL.iter().map(|s| (*s, 0)).collect();
    for e in entries {
        for c in &e.categories {
            *by_category.get_mut(c).expect("all kinds present") += 1;
        }
        *by_source.get_mut(&e.source).expect("all sources present") += 1;
    }
    CategoryStats {
        entries: entries.len(),
        by_category,
        by_source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub id: String,
    pub instruction: String,
    pub source: Source,
    pub categories: Vec<InteractionKind>,
    pub status: EntryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<String>>,
    #[serde(default)]
    pub corrective_pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_remote_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_local_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_digest: Option<String>,
}

impl EntryReport {
    fn scored(&self) -> Option<&MetricSet> {
        match self.status {
            EntryStatus::Ok => self.metrics.as_ref(),
            EntryStatus::Failed => None,
        }
    }
}

/// Arithmetic means over a group of entries. Metric means use succeeded
/// entries with ground truth; runtime means use every succeeded entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Means {
    pub scored: usize,
    pub timed: usize,
    pub dino: Option<f64>,
    pub lpips: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub runtime_remote_s: Option<f64>,
    pub runtime_local_s: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Means {
    pub fn over<'a>(entries: impl Iterator<Item = &'a EntryReport> + Clone) -> Means {
        let scored = entries.clone().filter_map(EntryReport::scored);
        let timed = entries.filter(|e| e.status == EntryStatus::Ok);
        Means {
            scored: scored.clone().count(),
            timed: timed.clone().count(),
            dino: mean(scored.clone().filter_map(|m| m.dino)),
            lpips: mean(scored.clone().filter_map(|m| m.lpips)),
            psnr: mean(scored.clone().map(|m| m.psnr)),
            ssim: mean(scored.map(|m| m.ssim)),
            runtime_remote_s: mean(timed.clone().filter_map(|e| e.runtime_remote_s)),
            runtime_local_s: mean(timed.filter_map(|e| e.runtime_local_s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub with_ground_truth: usize,
    pub scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub psnr_cap_db: f64,
    pub ssim: String,
    pub provider_preprocessing: String,
    pub runtime_split: String,
    pub version: String,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            psnr_cap_db: PSNR_CAP_DB,
            ssim: "BT.601 luma, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=255, mean over valid windows".into(),
            provider_preprocessing: "DINO and LPIPS inputs are passed unmodified; any resize or crop is up to the provider".into(),
            runtime_split: "seconds per image; remote = calls to remote-locality endpoints, local = the rest".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub label: String,
    pub config: Value,
    pub metadata: ReportMetadata,
    pub counts: Counts,
    pub means: Means,
    pub by_category: BTreeMap<InteractionKind, Means>,
    pub by_source: BTreeMap<Source, Means>,
    pub entries: Vec<EntryReport>,
    /// Seconds since the Unix epoch. The only field that varies between
    /// identical replayed runs.
    pub generated_at: u64,
}

impl Report {
    pub fn from_entries(
        label: &str,
        config: Value,
        entries: Vec<EntryReport>,
        with_gt: usize,
    ) -> Report {
        let by_category = InteractionKind::ALL
            .iter()
            .map(|k| {
                (
                    *k,
                    Means::over(entries.iter().filter(|e| e.categories.contains(k))),
                )
            })
            .collect();
        let by_source = Source::ALL
            .iter()
            .map(|s| (*s, Means::over(entries.iter().filter(|e| e.source == *s))))
            .collect();
        let means = Means::over(entries.iter());
        let succeeded = entries
            .iter()
            .filter(|e| e.status == EntryStatus::Ok)
            .count();
        Report {
            label: label.to_string(),
            config,
            metadata: ReportMetadata::default(),
            counts: Counts {
                total: entries.len(),
                succeeded,
                failed: entries.len() - succeeded,
                with_ground_truth: with_gt,
                scored: means.scored,
            },
            means,
            by_category,
            by_source,
            entries,
            generated_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn to_markdown(&self) -> String {
        let mut md = format!("# Benchmark report: {}\n\n", self.label);
        md.push_str(&render_summary_table(&[(self.label.as_str(), self)]));
        let c = &self.counts;
        let _ = writeln!(
            md,
            "\nEntries: {} total, {} succeeded, {} failed, {} with ground truth, {} scored.",
            c.total, c.succeeded, c.failed, c.with_ground_truth, c.scored
        );
        md.push_str("\n## By category\n\n");
        md.push_str(&breakdown_table(
            self.by_category.iter().map(|(k, m)| (k.as_str(), m)),
        ));
        md.push_str("\n## By source\n\n");
        md.push_str(&breakdown_table(
            self.by_source.iter().map(|(s, m)| (s.as_str(), m)),
        ));
        let failed: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.status == EntryStatus::Failed)
            .collect();
        if !failed.is_empty() {
            md.push_str("\n## Failures\n\n");
            for e in failed {
                let stage = e
                    .failed_stage
                    .map(|s| format!(" ({s})"))
                    .unwrap_or_default();
                let _ = writeln!(
                    md,
                    "- `{}`{stage}: {}",
                    e.id,
                    e.error.as_deref().unwrap_or("")
                );
            }
        }
        md
    }

    /// Writes `report.json` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), BenchError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json() + "\n")?;
        std::fs::write(dir.join("report.md"), self.to_markdown())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Report, BenchError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| BenchError::Report(e.to_string()))
    }

    /// The pipeline mode recorded in the config echo, if any.
    pub fn mode(&self) -> Option<Mode> {
        let v = self
            .config
            .get("pipeline")
            .unwrap_or(&self.config)
            .get("mode")?;
        serde_json::from_value(v.clone()).ok()
    }
}

const ABSENT: &str = "–";

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}"))
        .unwrap_or_else(|| ABSENT.to_string())
}

/// `R(API) + L`, seconds per image.
pub fn runtime_cell(m: &Means) -> String {
    match (m.runtime_remote_s, m.runtime_local_s) {
        (Some(r), Some(l)) => format!("{r:.2}(API) + {l:.2}"),
        _ => ABSENT.to_string(),
    }
}

/// Method comparison table: DINO, LPIPS, PSNR, SSIM and runtime.
pub fn render_summary_table(rows: &[(&str, &Report)]) -> String {
    let mut md = String::from(
        "| Method | DINO ↑ | LPIPS ↓ | PSNR ↑ | SSIM ↑ | Runtime (s/img) |\n|---|---|---|---|---|---|\n",
    );
    for (label, r) in rows {
        let m = &r.means;
        let _ = writeln!(
            md,
            "| {label} | {} | {} | {} | {} | {} |",
            cell(m.dino, 3),
            cell(m.lpips, 3),
            cell(m.psnr, 3),
            cell(m.ssim, 3),
            runtime_cell(m)
        );
    }
    md
}

fn breakdown_table<'a>(groups: impl Iterator<Item = (&'a str, &'a Means)>) -> String {
    let mut md = String::from(
        "| Group | Scored | DINO ↑ | LPIPS ↓ | PSNR ↑ | SSIM ↑ | Runtime (s/img) |\n|---|---|---|---|---|---|---|\n",
    );
    for (name, m) in groups {
        let _ = writeln!(
            md,
            "| {name} | {} | {} | {} | {} | {} | {} |",
            m.scored,
            cell(m.dino, 3),
            cell(m.lpips, 3),
            cell(m.psnr, 3),
            cell(m.ssim, 3),
            runtime_cell(m)
        );
    }
    md
}

/// Row letter and component columns of the local-deployment ablation.
pub fn ablation_row(mode: Mode) -> Option<(&'static str, bool, bool, bool)> {
    match mode {
        Mode::AblationA => Some(("(a)", true, false, false)),
        Mode::AblationB => Some(("(b)", true, true, false)),
        Mode::LocalChain => Some(("(c)", true, true, true)),
        _ => None,
    }
}

/// Local-deployment ablation table, rows ordered (a), (b), (c).
pub fn render_ablation_table(reports: &[&Report]) -> Result<String, BenchError> {
    let mut rows = Vec::new();
    for r in reports {
        let mode = r
            .mode()
            .ok_or_else(|| BenchError::Report(format!("report {:?} has no mode", r.label)))?;
        let row = ablation_row(mode)
            .ok_or_else(|| BenchError::Report(format!("mode {mode} is not an ablation row")))?;
        rows.push((row, *r));
    }
    rows.sort_by_key(|((letter, ..), _)| *letter);
    let tick = |b: bool| if b { "✓" } else { "" };
    let mut md = String::from(
        "| Exp. | MLLM | Prompt Chaining | LLM | DINO ↑ | LPIPS ↓ | PSNR ↑ | SSIM ↑ |\n|---|---|---|---|---|---|---|---|\n",
    );
    for ((letter, mllm, chain, llm), r) in rows {
        let m = &r.means;
        let _ = writeln!(
            md,
            "| {letter} | {} | {} | {} | {} | {} | {} | {} |",
            tick(mllm),
            tick(chain),
            tick(llm),
            cell(m.dino, 3),
            cell(m.lpips, 3),
            cell(m.psnr, 3),
            cell(m.ssim, 3)
        );
    }
    Ok(md)
}

/// Builds the backends for one manifest entry.
pub type EntryBackendFn = Box<dyn Fn(&ManifestEntry) -> Result<BackendSet, String> + Send + Sync>;

/// Backends for a batch: one shared set, or one built per entry (oracle
/// scenes differ per entry).
pub enum BenchBackends {
    Shared(BackendSet),
    PerEntry(EntryBackendFn),
}

impl From<BackendSet> for BenchBackends {
    fn from(set: BackendSet) -> Self {
        BenchBackends::Shared(set)
    }
}

impl BenchBackends {
    fn for_entry(&self, e: &ManifestEntry) -> Result<BackendSet, String> {
        match self {
            BenchBackends::Shared(s) => Ok(s.clone()),
            BenchBackends::PerEntry(f) => f(e),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    pub label: Option<String>,
    /// Where per-entry images and run records go.
    pub out_dir: Option<PathBuf>,
    /// Config echoed into the report; the pipeline config when absent.
    pub config_echo: Option<Value>,
}

fn failed(e: &ManifestEntry, msg: String, stage: Option<Stage>) -> EntryReport {
    EntryReport {
        id: e.id.clone(),
        instruction: e.instruction.clone(),
        source: e.source,
        categories: e.categories.clone(),
        status: EntryStatus::Failed,
        error: Some(msg),
        failed_stage: stage,
        plan: None,
        corrective_pass: false,
        metrics: None,
        runtime_remote_s: None,
        runtime_local_s: None,
        final_digest: None,
    }
}

fn run_entry(
    e: &ManifestEntry,
    backends: &BenchBackends,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> EntryReport {
    let set = match backends.for_entry(e) {
        Ok(s) => s,
        Err(msg) => return failed(e, format!("backends: {msg}"), None),
    };
    let image = match Image::load_png(&e.input_image) {
        Ok(i) => i,
        Err(err) => return failed(e, format!("input image: {err}"), None),
    };
    let record = match run_pipeline(&image, &e.instruction, &set, cfg) {
        Ok(r) => r,
        Err(err) => return failed(e, err.to_string(), err.stage()),
    };
    if let Some(dir) = out {
        if let Err(err) = record.write_to(dir, &e.id) {
            return failed(e, format!("writing outputs: {err}"), None);
        }
    }
    let metrics = match &e.ground_truth {
        None => None,
        Some(p) => {
            let gt = match Image::load_png(p) {
                Ok(g) => g,
                Err(err) => return failed(e, format!("ground truth: {err}"), None),
            };
            match compute_metrics(
                &record.final_image,
                &gt,
                set.embedder.as_deref(),
                set.scorer.as_deref(),
            ) {
                Ok(m) => Some(m),
                Err(err) => return failed(e, format!("metrics: {err}"), None),
            }
        }
    };
    EntryReport {
        id: e.id.clone(),
        instruction: e.instruction.clone(),
        source: e.source,
        categories: e.categories.clone(),
        status: EntryStatus::Ok,
        error: None,
        failed_stage: None,
        plan: Some(record.plan.labels.clone()),
        corrective_pass: record.corrective_pass,
        metrics,
        runtime_remote_s: Some(record.timing.remote_s()),
        runtime_local_s: Some(record.timing.local_s()),
        final_digest: Some(record.final_digest.clone()),
    }
}

/// Runs every entry through the pipeline with at most
/// `cfg.max_parallel_requests` entries in flight. Entry failures are
/// recorded, never fatal.
pub fn run_bench(
    entries: &[ManifestEntry],
    backends: &BenchBackends,
    cfg: &PipelineConfig,
    opts: &BenchOptions,
) -> Result<Report, BenchError> {
    let cfg = cfg.clone().normalized();
    cfg.validate()
        .map_err(|e| BenchError::Report(e.to_string()))?;
    let entries_dir = opts.out_dir.as_ref().map(|d| d.join("entries"));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_parallel_requests)
        .build()
        .map_err(|e| BenchError::Report(e.to_string()))?;
    let reports: Vec<EntryReport> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| run_entry(e, backends, &cfg, entries_dir.as_deref()))
            .collect()
    });
    let config = opts
        .config_echo
        .clone()
        .unwrap_or_else(|| serde_json::json!({ "pipeline": cfg }));
    let label = opts.label.clone().unwrap_or_else(|| cfg.mode.to_string());
    let with_gt = entries.iter().filter(|e| e.ground_truth.is_some()).count();
    let report = Report::from_entries(&label, config, reports, with_gt);
    if let Some(dir) = &opts.out_dir {
        report.write(dir)?;
    }
    Ok(report)
}
