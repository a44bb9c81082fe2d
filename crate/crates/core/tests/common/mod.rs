#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use removal_engine::backends::fixtures::{recording_backends, FixtureStore};
use removal_engine::backends::{
    BackendError, BackendSet, Embedder, Endpoint, Locality, PairScorer, Remover, SegmentInstance,
    SegmentResult, Segmenter, TextReasoner, VisionReasoner,
};
use removal_engine::bench::{
    run_bench, write_manifest, BenchBackends, BenchOptions, ManifestEntry, Source,
};
use removal_engine::oracle::InteractionKind;
use removal_engine::parse::{format_analyzer_response, RemovalPlan};
use removal_engine::pipeline::PipelineConfig;
use removal_engine::prompts::PromptBundle;
use removal_engine::raster::{Image, Mask};

/// 64-bit LCG bytes, `w * h * 3` of them. Shared with the numpy reference.
pub fn lcg_image(w: usize, h: usize, seed: u64) -> Image {
    let mut s = seed;
    let data = (0..w * h * 3)
        .map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 33) % 256) as u8
        })
        .collect();
    Image::new(w, h, data).unwrap()
}

pub fn flat(w: usize, h: usize, v: u8) -> Image {
    Image::filled(w, h, [v, v, v]).unwrap()
}

/// Reasoner that always plans to remove "the thing".
pub struct FixedPlan;

impl Endpoint for FixedPlan {
    fn locality(&self) -> Locality {
        Locality::Remote
    }
}

impl VisionReasoner for FixedPlan {
    fn vision_reason(&self, _: &PromptBundle, _: &Image) -> Result<String, BackendError> {
        Ok(format_analyzer_response(&RemovalPlan::new(
            "The thing goes.",
            vec!["the thing".into()],
        )))
    }
}

impl TextReasoner for FixedPlan {
    fn text_reason(&self, _: &PromptBundle) -> Result<String, BackendError> {
        Err(BackendError::Unavailable("text reasoner"))
    }
}

/// One full-frame instance per label.
pub struct FullFrame;

impl Endpoint for FullFrame {}

impl Segmenter for FullFrame {
    fn segment(&self, image: &Image, labels: &[String]) -> Result<SegmentResult, BackendError> {
        let (w, h) = image.dims();
        Ok(SegmentResult {
            per_label: labels
                .iter()
                .map(|l| {
                    (
                        l.clone(),
                        vec![SegmentInstance {
                            mask: Mask::full(w, h).unwrap(),
                            score: 0.9,
                        }],
                    )
                })
                .collect(),
        })
    }
}

/// Maps a flat gray input level to a flat gray output level.
pub struct LevelMap(pub Vec<(u8, u8)>);

impl Endpoint for LevelMap {}

impl Remover for LevelMap {
    fn remove(&self, image: &Image, _: &Mask) -> Result<Image, BackendError> {
        let v = image.data()[0];
        let out = self
            .0
            .iter()
            .find(|(i, _)| *i == v)
            .map(|(_, o)| *o)
            .ok_or_else(|| BackendError::Precondition(format!("no mapping for level {v}")))?;
        let (w, h) = image.dims();
        Ok(flat(w, h, out))
    }
}

pub fn mean_level(image: &Image) -> f64 {
    image.data().iter().map(|&b| b as f64).sum::<f64>() / image.data().len() as f64
}

/// `[mean / 255, 1]`.
pub struct MeanEmbedder;

impl Endpoint for MeanEmbedder {}

impl Embedder for MeanEmbedder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>, BackendError> {
        Ok(vec![mean_level(image) / 255.0, 1.0])
    }
}

/// `|mean(a) - mean(b)| / 255`.
pub struct MeanGap;

impl Endpoint for MeanGap {}

impl PairScorer for MeanGap {
    fn score_pair(&self, a: &Image, b: &Image) -> Result<f64, BackendError> {
        Ok((mean_level(a) - mean_level(b)).abs() / 255.0)
    }
}

pub fn scripted_backends(levels: Vec<(u8, u8)>) -> BackendSet {
    let plan = Arc::new(FixedPlan);
    BackendSet {
        vision: plan.clone(),
        text: plan,
        segmenter: Arc::new(FullFrame),
        remover: Arc::new(LevelMap(levels)),
        correction_remover: None,
        embedder: Some(Arc::new(MeanEmbedder)),
        scorer: Some(Arc::new(MeanGap)),
    }
}

/// One entry of the three-entry batch: input level, remover output level,
/// ground-truth level.
pub const THREE_ENTRIES: [(u8, u8, u8); 3] = [(10, 100, 116), (20, 50, 50), (30, 0, 255)];
pub const THREE_SIDE: usize = 16;

/// Writes the three-entry batch (images and manifest) into `dir`.
pub fn write_three_entry_batch(dir: &Path) -> PathBuf {
    let mut entries = Vec::new();
    for (k, (input, _, gt)) in THREE_ENTRIES.iter().enumerate() {
        let ip = dir.join(format!("in{k}.png"));
        let gp = dir.join(format!("gt{k}.png"));
        flat(THREE_SIDE, THREE_SIDE, *input).save_png(&ip).unwrap();
        flat(THREE_SIDE, THREE_SIDE, *gt).save_png(&gp).unwrap();
        entries.push(ManifestEntry {
            id: format!("e{k}"),
            input_image: ip,
            instruction: "Remove the thing.".into(),
            ground_truth: Some(gp),
            categories: vec![InteractionKind::ALL[k]],
            source: Source::ALL[k],
            scene: None,
        });
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &entries).unwrap();
    path
}

pub fn three_entry_levels() -> Vec<(u8, u8)> {
    THREE_ENTRIES.iter().map(|(i, o, _)| (*i, *o)).collect()
}

/// Runs `entries` against `live` while recording, and saves the fixtures.
pub fn record_batch(
    entries: &[ManifestEntry],
    live: BenchBackends,
    cfg: &PipelineConfig,
    fixtures: &Path,
) -> usize {
    let store = Arc::new(FixtureStore::recording());
    let rec = {
        let store = store.clone();
        BenchBackends::PerEntry(Box::new(move |e: &ManifestEntry| {
            let set = match &live {
                BenchBackends::Shared(s) => s.clone(),
                BenchBackends::PerEntry(f) => f(e)?,
            };
            Ok(recording_backends(&set, store.clone()))
        }))
    };
    let report = run_bench(entries, &rec, cfg, &BenchOptions::default()).unwrap();
    assert_eq!(report.counts.failed, 0, "{}", report.to_markdown());
    store.save(fixtures).unwrap();
    store.len()
}

/// Every file under `dir` keyed by relative path, with the report
/// timestamp blanked.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            let mut bytes = std::fs::read(&path).unwrap();
            if rel.ends_with("report.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v["generated_at"] = serde_json::Value::Null;
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs the command-line entry point in-process.
pub fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["removal"];
    full.extend_from_slice(args);
    removal_engine::cli::main_with_args(full)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
