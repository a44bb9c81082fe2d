//! Command-line front end: `run`, `bench`, `oracle`, `diversity` and
//! `record`.
//!
//! Exit codes: 0 on success, 1 when the pipeline or any batch entry fails,
//! 2 on invocation or configuration errors.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::backends::fixtures::{recording_backends, FixtureStore};
use crate::backends::BackendSet;
use crate::bench::{
    load_manifest, run_bench, write_manifest, BenchBackends, BenchOptions, ManifestEntry, Report,
    Source,
};
use crate::config::{BackendKind, Config};
use crate::diversity::{analyze_pair, load_embeddings};
use crate::oracle::{closure_order, gen_scene, render, ObjectId};
use crate::pipeline::{run_pipeline, ClockMode, Mode};
use crate::raster::Image;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable inputs or an invalid config.
    #[error("{0}")]
    Usage(String),
    /// The pipeline or a batch entry failed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn io_failed(what: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("{what}: {e}"))
}

#[derive(Debug, Parser)]
#[command(
    name = "removal",
    version,
    about = "Interaction-consistent object removal"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Remove an object, and what depends on it, from one image.
    Run(RunArgs),
    /// Run a manifest of entries and write an aggregate report.
    Bench(BenchArgs),
    /// Generate a synthetic scene with ground-truth removals.
    Oracle(OracleArgs),
    /// Compare the spread of two embedding sets.
    Diversity(DiversityArgs),
    /// Run a manifest against live backends and save every exchange.
    Record(RecordArgs),
}

/// Config file plus pipeline overrides. Flags win over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineFlags {
    /// Declarative TOML config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// cloud_full, cloud_no_correction, local_chain, ablation_a or ablation_b.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Skip simulation, examination and correction.
    #[arg(long)]
    pub no_self_correction: bool,
    /// Extra attempts when a reasoner response does not parse.
    #[arg(long, value_name = "N")]
    pub retries: Option<u32>,
    /// Mask dilation radius in pixels.
    #[arg(long, value_name = "PX")]
    pub dilate: Option<usize>,
    /// Minimum segmenter score for an instance to be kept.
    #[arg(long, value_name = "SCORE")]
    pub threshold: Option<f64>,
    /// Upper bound on concurrent entries and requests.
    #[arg(long, value_name = "N")]
    pub max_parallel: Option<usize>,
    /// Restrict corrective masks to the neighbourhood of the first-pass mask.
    #[arg(long)]
    pub conservative: bool,
    /// Neighbourhood size for --conservative, in pixels.
    #[arg(long, value_name = "PX")]
    pub conservative_margin: Option<usize>,
    /// wall or virtual runtime accounting.
    #[arg(long)]
    pub clock: Option<ClockMode>,
}

impl PipelineFlags {
    /// Loads the config file, if any, and applies the flags on top.
    pub fn resolve(&self) -> Result<Config, CliError> {
        let mut cfg = load_config(self.config.as_deref())?;
        let p = &mut cfg.pipeline;
        if let Some(m) = self.mode {
            p.mode = m;
        }
        if self.no_self_correction {
            p.self_correction = false;
        }
        if let Some(r) = self.retries {
            p.retries_on_malformed = r;
        }
        if let Some(d) = self.dilate {
            p.mask_dilate_radius = d;
        }
        if let Some(t) = self.threshold {
            p.segmenter_score_threshold = t;
        }
        if let Some(n) = self.max_parallel {
            p.max_parallel_requests = n;
        }
        if self.conservative {
            p.conservative_correction = true;
        }
        if let Some(m) = self.conservative_margin {
            p.conservative_margin = m;
        }
        if let Some(c) = self.clock {
            p.clock = c;
            cfg.clock_explicit = true;
        }
        cfg.pipeline = cfg.pipeline.clone().normalized();
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => Config::load(p).map_err(usage),
        None => Ok(Config::default()),
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Input PNG.
    #[arg(long, value_name = "PNG")]
    pub image: PathBuf,
    /// Removal instruction, e.g. "Remove the person."
    #[arg(long)]
    pub instruction: String,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Answer every backend call from this fixture file.
    #[arg(long, value_name = "FILE")]
    pub fixtures: Option<PathBuf>,
    /// Scene JSON for oracle backends; overrides the config.
    #[arg(long, value_name = "FILE")]
    pub scene: Option<PathBuf>,
    #[command(flatten)]
    pub flags: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON-lines manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Output directory for the report and per-entry outputs.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Answer every backend call from this fixture file.
    #[arg(long, value_name = "FILE")]
    pub fixtures: Option<PathBuf>,
    /// Row label in the report; the mode name by default.
    #[arg(long)]
    pub label: Option<String>,
    #[command(flatten)]
    pub flags: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    /// JSON-lines manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Output directory; fixtures go to DIR/fixtures.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of objects, 1 to 48.
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    /// Probability of each candidate dependency edge, 0 to 1.
    #[arg(long, default_value_t = 0.3)]
    pub density: f64,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Declarative TOML config file, echoed into the output.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    /// Two embedding files (JSON lines or binary).
    #[arg(long, num_args = 2, required = true, value_names = ["A", "B"])]
    pub embeddings: Vec<PathBuf>,
    /// Seed for subsampling and t-SNE; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// t-SNE perplexity; overrides the config.
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// t-SNE iterations; overrides the config.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Declarative TOML config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Diversity(a) => cmd_diversity(a),
        Command::Record(a) => cmd_record(a),
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("creating {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize") + "\n";
    std::fs::write(path, text).map_err(|e| io_failed(&format!("writing {}", path.display()), e))
}

/// Live backends for one entry: oracle backends over its scene, or the
/// shared HTTP set.
fn live_backends(cfg: &Config) -> Result<BenchBackends, CliError> {
    match cfg.backends.kind {
        BackendKind::Http => Ok(BenchBackends::Shared(cfg.http_backends().map_err(usage)?)),
        BackendKind::Oracle => {
            let cfg = cfg.clone();
            Ok(BenchBackends::PerEntry(Box::new(
                move |e: &ManifestEntry| {
                    let scene = e
                        .scene
                        .as_deref()
                        .or(cfg.backends.scene.as_deref())
                        .ok_or_else(|| {
                            format!("entry {} has no scene for the oracle backends", e.id)
                        })?;
                    cfg.oracle_backends_for(scene).map_err(|e| e.to_string())
                },
            )))
        }
    }
}

fn single_backends(cfg: &Config, fixtures: Option<&Path>) -> Result<BackendSet, CliError> {
    if let Some(f) = fixtures {
        return cfg.replay_backends(f).map_err(usage);
    }
    match cfg.backends.kind {
        BackendKind::Http => cfg.http_backends().map_err(usage),
        BackendKind::Oracle => {
            let scene =
                cfg.backends.scene.as_deref().ok_or_else(|| {
                    usage("oracle backends need a scene (--scene or backends.scene)")
                })?;
            cfg.oracle_backends_for(scene).map_err(usage)
        }
    }
}

fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let mut cfg = a.flags.resolve()?;
    if let Some(s) = &a.scene {
        cfg.backends.scene = Some(s.clone());
    }
    if a.fixtures.is_some() {
        cfg.prefer_virtual_clock();
    }
    let image = Image::load_png(&a.image)
        .map_err(|e| usage(format!("reading {}: {e}", a.image.display())))?;
    let backends = single_backends(&cfg, a.fixtures.as_deref())?;
    prepare_out(&a.out)?;
    let record =
        run_pipeline(&image, &a.instruction, &backends, &cfg.pipeline).map_err(|e| {
            match e.stage() {
                Some(s) => CliError::Failed(format!("{s} stage failed: {e}")),
                None => CliError::Failed(e.to_string()),
            }
        })?;
    record
        .write_to(&a.out, "result")
        .map_err(|e| io_failed("writing outputs", e))?;
    write_json(&a.out.join("config.json"), &cfg.echo())?;
    println!("plan: {}", record.plan.labels.join(", "));
    if let Some(c) = &record.correction {
        println!(
            "residuals: {}",
            if c.labels.is_empty() {
                "none".to_string()
            } else {
                c.labels.join(", ")
            }
        );
    }
    println!(
        "timing: {:.3} s remote + {:.3} s local ({} clock)",
        record.timing.remote_s(),
        record.timing.local_s(),
        record.timing.clock
    );
    Ok(())
}

fn summarize(report: &Report) -> Result<(), CliError> {
    let c = &report.counts;
    println!(
        "{}: {} entries, {} succeeded, {} failed, {} scored",
        report.label, c.total, c.succeeded, c.failed, c.scored
    );
    if c.failed > 0 {
        return Err(CliError::Failed(format!(
            "{} of {} entries failed",
            c.failed, c.total
        )));
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let mut cfg = a.flags.resolve()?;
    let entries = load_manifest(&a.manifest).map_err(usage)?;
    let backends = match &a.fixtures {
        Some(f) => {
            cfg.prefer_virtual_clock();
            BenchBackends::Shared(cfg.replay_backends(f).map_err(usage)?)
        }
        None => live_backends(&cfg)?,
    };
    prepare_out(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg.echo())?;
    let opts = BenchOptions {
        label: a.label.clone(),
        out_dir: Some(a.out.clone()),
        config_echo: Some(cfg.echo()),
    };
    let report =
        run_bench(&entries, &backends, &cfg.pipeline, &opts).map_err(|e| io_failed("bench", e))?;
    summarize(&report)
}

fn cmd_record(a: &RecordArgs) -> Result<(), CliError> {
    let cfg = a.flags.resolve()?;
    let entries = load_manifest(&a.manifest).map_err(usage)?;
    let live = live_backends(&cfg)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg.echo())?;
    let store = Arc::new(FixtureStore::recording());
    let recording = {
        let store = store.clone();
        BenchBackends::PerEntry(Box::new(move |e: &ManifestEntry| {
            let set = match &live {
                BenchBackends::Shared(s) => s.clone(),
                BenchBackends::PerEntry(f) => f(e)?,
            };
            Ok(recording_backends(&set, store.clone()))
        }))
    };
    let opts = BenchOptions {
        label: Some("record".into()),
        out_dir: Some(a.out.clone()),
        config_echo: Some(cfg.echo()),
    };
    let report = run_bench(&entries, &recording, &cfg.pipeline, &opts)
        .map_err(|e| io_failed("record", e))?;
    let path = a.out.join("fixtures.jsonl");
    store
        .save(&path)
        .map_err(|e| io_failed("saving fixtures", e))?;
    println!("recorded {} exchanges to {}", store.len(), path.display());
    summarize(&report)
}

fn cmd_oracle(a: &OracleArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let scene = gen_scene(a.seed, a.n, a.density).map_err(usage)?;
    let gt_dir = a.out.join("gt");
    prepare_out(&gt_dir)?;
    let scene_path = a.out.join("scene.json");
    std::fs::write(&scene_path, scene.to_json() + "\n")
        .map_err(|e| io_failed("writing scene", e))?;
    let full_path = a.out.join("scene.png");
    render(&scene, &BTreeSet::new())
        .save_png(&full_path)
        .map_err(|e| io_failed("writing render", e))?;

    let mut closures = BTreeMap::new();
    let mut entries = Vec::new();
    for obj in &scene.objects {
        let order = closure_order(&scene, &BTreeSet::from([obj.id])).map_err(usage)?;
        let members: BTreeSet<ObjectId> = order.iter().copied().collect();
        let gt_path = gt_dir.join(format!("{}.png", obj.id));
        render(&scene, &members)
            .save_png(&gt_path)
            .map_err(|e| io_failed("writing ground truth", e))?;
        let mut categories: Vec<_> = scene
            .edges
            .iter()
            .filter(|e| members.contains(&e.from) && members.contains(&e.to))
            .map(|e| e.kind)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        categories.sort();
        closures.insert(
            obj.id.to_string(),
            json!({ "name": obj.name, "closure": order }),
        );
        entries.push(ManifestEntry {
            id: format!("s{}-o{}", a.seed, obj.id),
            input_image: full_path.clone(),
            instruction: format!("Remove the {}.", obj.name),
            ground_truth: Some(gt_path),
            categories,
            source: Source::Synthetic,
            scene: Some(scene_path.clone()),
        });
    }
    write_json(&a.out.join("closures.json"), &json!(closures))?;
    write_manifest(a.out.join("manifest.jsonl"), &entries)
        .map_err(|e| io_failed("writing manifest", e))?;
    let mut echo = cfg.echo();
    echo["oracle"] = json!({ "seed": a.seed, "n": a.n, "density": a.density });
    write_json(&a.out.join("config.json"), &echo)?;
    println!(
        "scene with {} objects and {} edges written to {}",
        scene.objects.len(),
        scene.edges.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_diversity(a: &DiversityArgs) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    let p = &mut cfg.diversity;
    if let Some(s) = a.seed {
        p.seed = s;
    }
    if let Some(x) = a.perplexity {
        p.perplexity = x;
    }
    if let Some(n) = a.iterations {
        p.iterations = n;
    }
    let label = |path: &Path| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    };
    let [pa, pb] = [&a.embeddings[0], &a.embeddings[1]];
    let sa = load_embeddings(pa, &label(pa)).map_err(usage)?;
    let sb = load_embeddings(pb, &label(pb)).map_err(usage)?;
    let report = analyze_pair(&sa, &sb, cfg.diversity.seed, &cfg.diversity).map_err(usage)?;
    prepare_out(&a.out)?;
    report
        .write(&a.out)
        .map_err(|e| io_failed("writing diversity outputs", e))?;
    write_json(&a.out.join("config.json"), &cfg.echo())?;
    println!("matched size: {}", report.matched_size);
    for (l, t, k) in &report.crossings {
        println!("{l}: {k} components reach {:.0}% variance", t * 100.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "[pipeline]\nmode = \"cloud_full\"\nmask_dilate_radius = 3\n",
        )
        .unwrap();
        let cli = Cli::try_parse_from([
            "removal",
            "bench",
            "--manifest",
            "m.jsonl",
            "--out",
            "o",
            "--config",
            path.to_str().unwrap(),
            "--mode",
            "local-chain",
            "--dilate",
            "5",
        ])
        .unwrap();
        let Command::Bench(b) = cli.command else {
            panic!()
        };
        let cfg = b.flags.resolve().unwrap();
        assert_eq!(cfg.pipeline.mode, Mode::LocalChain);
        assert_eq!(cfg.pipeline.mask_dilate_radius, 5);
        assert!(!cfg.pipeline.self_correction);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["removal", "bogus"]), 2);
        assert_eq!(main_with_args(["removal", "--version"]), 0);
        assert_eq!(
            main_with_args(["removal", "oracle", "--n", "0", "--out", "/nonexistent/x"]),
            2
        );
        assert_eq!(
            main_with_args([
                "removal",
                "run",
                "--image",
                "/no/such.png",
                "--instruction",
                "x",
                "--out",
                "/tmp/x"
            ]),
            2
        );
    }
}
