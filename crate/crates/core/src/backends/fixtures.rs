//! Record/replay of backend traffic.
//!
//! Each request is reduced to a stable key: SHA-256 over the endpoint kind
//! and a canonical JSON body in which images are replaced by their digests.
//! A fixture file is JSON lines, one `{key_hash, kind, response_payload}`
//! object per distinct request, in first-seen order.
//!
//! In record mode a wrapper answers from the store when the key is already
//! present and otherwise calls the live backend and appends the answer, so a
//! recorded batch and its replay see exactly the same responses.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::wire::{self, EmbedResponse, ImagePayload, ScoreResponse, SegmentResponse, TextPayload};
use super::{
    BackendError, BackendSet, Embedder, Endpoint, Locality, PairScorer, Remover, SegmentResult,
    Segmenter, TextReasoner, VisionReasoner,
};
use crate::prompts::PromptBundle;
use crate::raster::{hex, Image, Mask};

/// Endpoint kinds as written to fixture files.
pub mod kind {
    pub const VISION: &str = "vision";
    pub const TEXT: &str = "text";
    pub const SEGMENT: &str = "segment";
    pub const REMOVE: &str = "remove";
    pub const CORRECTION_REMOVE: &str = "correction_remove";
    pub const EMBED: &str = "embed";
    pub const SCORE_PAIR: &str = "score_pair";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub key_hash: String,
    pub kind: String,
    pub response_payload: Value,
}

pub fn request_key(kind: &str, canonical: &Value) -> String {
    let body = json!({ "kind": kind, "request": canonical });
    hex(&Sha256::digest(body.to_string().as_bytes()))
}

pub fn chat_key(kind: &str, bundle: &PromptBundle, image: Option<&Image>) -> String {
    request_key(
        kind,
        &json!({
            "system": bundle.system_text,
            "user": bundle.user_text,
            "attach_image": bundle.attach_image,
            "image": image.map(Image::digest),
        }),
    )
}

pub fn segment_key(image: &Image, labels: &[String]) -> String {
    request_key(
        kind::SEGMENT,
        &json!({ "image": image.digest(), "labels": labels }),
    )
}

pub fn remove_key(kind: &str, image: &Image, mask: &Mask) -> String {
    request_key(
        kind,
        &json!({ "image": image.digest(), "mask": mask.digest() }),
    )
}

pub fn embed_key(image: &Image) -> String {
    request_key(kind::EMBED, &json!({ "image": image.digest() }))
}

pub fn score_pair_key(a: &Image, b: &Image) -> String {
    request_key(
        kind::SCORE_PAIR,
        &json!({ "a": a.digest(), "b": b.digest() }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureMode {
    Record,
    Replay,
}

struct StoreInner {
    index: HashMap<String, usize>,
    entries: Vec<FixtureEntry>,
    sink: Option<File>,
}

/// Fixture entries keyed by request hash. Appends are serialized through a
/// mutex; readers share the store freely.
pub struct FixtureStore {
    mode: FixtureMode,
    path: Option<PathBuf>,
    inner: Mutex<StoreInner>,
}

impl FixtureStore {
    fn with_entries(
        mode: FixtureMode,
        path: Option<PathBuf>,
        entries: Vec<FixtureEntry>,
        sink: Option<File>,
    ) -> Self {
        let mut inner = StoreInner {
            index: HashMap::new(),
            entries: Vec::new(),
            sink,
        };
        for e in entries {
            if !inner.index.contains_key(&e.key_hash) {
                inner.index.insert(e.key_hash.clone(), inner.entries.len());
                inner.entries.push(e);
            }
        }
        Self {
            mode,
            path,
            inner: Mutex::new(inner),
        }
    }

    /// Read-only store for replay.
    pub fn replay(entries: Vec<FixtureEntry>) -> Self {
        Self::with_entries(FixtureMode::Replay, None, entries, None)
    }

    pub fn replay_from(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let entries = read_entries(path.as_ref())?;
        Ok(Self::with_entries(
            FixtureMode::Replay,
            Some(path.as_ref().to_path_buf()),
            entries,
            None,
        ))
    }

    /// In-memory recording store; use [`FixtureStore::save`] to persist.
    pub fn recording() -> Self {
        Self::with_entries(FixtureMode::Record, None, Vec::new(), None)
    }

    /// Recording store that appends new entries to `path` as they arrive.
    /// Existing entries in the file are kept and reused.
    pub fn record_to(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let existing = if path.exists() {
            read_entries(path)?
        } else {
            Vec::new()
        };
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::with_entries(
            FixtureMode::Record,
            Some(path.to_path_buf()),
            existing,
            Some(sink),
        ))
    }

    pub fn mode(&self) -> FixtureMode {
        self.mode
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<FixtureEntry> {
        self.lock().entries.clone()
    }

    pub fn get(&self, key: &str) -> Option<FixtureEntry> {
        let inner = self.lock();
        inner.index.get(key).map(|&i| inner.entries[i].clone())
    }

    /// Adds an entry unless its key is present. Returns whether it was new.
    pub fn insert(&self, entry: FixtureEntry) -> Result<bool, BackendError> {
        let mut inner = self.lock();
        if inner.index.contains_key(&entry.key_hash) {
            return Ok(false);
        }
        if let Some(sink) = inner.sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("fixture entries serialize");
            writeln!(sink, "{line}")?;
            sink.flush()?;
        }
        let at = inner.entries.len();
        inner.index.insert(entry.key_hash.clone(), at);
        inner.entries.push(entry);
        Ok(true)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BackendError> {
        let mut out = String::new();
        for e in self.lock().entries.iter() {
            out.push_str(&serde_json::to_string(e).expect("fixture entries serialize"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, StoreInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Replay lookup, or record-through when a live call is available.
    fn resolve<T: Serialize + DeserializeOwned>(
        &self,
        kind: &str,
        key: String,
        live: Option<&dyn Fn() -> Result<T, BackendError>>,
    ) -> Result<T, BackendError> {
        if let Some(hit) = self.get(&key) {
            return serde_json::from_value(hit.response_payload).map_err(|e| {
                BackendError::InvalidResponse(format!(
                    "fixture {key} does not decode as {kind}: {e}"
                ))
            });
        }
        match (self.mode, live) {
            (FixtureMode::Record, Some(call)) => {
                let value = call()?;
                self.insert(FixtureEntry {
                    key_hash: key,
                    kind: kind.to_string(),
                    response_payload: serde_json::to_value(&value)
                        .expect("wire payloads serialize"),
                })?;
                Ok(value)
            }
            _ => Err(BackendError::MissingFixture {
                kind: kind.to_string(),
                key,
            }),
        }
    }
}

fn read_entries(path: &Path) -> Result<Vec<FixtureEntry>, BackendError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: FixtureEntry = serde_json::from_str(&line).map_err(|e| {
            BackendError::InvalidResponse(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// A capability answered from a fixture store, optionally recording through
/// a live backend.
pub struct Fixtured<B: ?Sized> {
    inner: Option<Arc<B>>,
    store: Arc<FixtureStore>,
    kind: &'static str,
    locality: Locality,
    latency: Duration,
}

impl<B: ?Sized + Endpoint> Fixtured<B> {
    pub fn replay(store: Arc<FixtureStore>, kind: &'static str, locality: Locality) -> Self {
        Self {
            inner: None,
            store,
            kind,
            locality,
            latency: Duration::ZERO,
        }
    }

    pub fn record(inner: Arc<B>, store: Arc<FixtureStore>, kind: &'static str) -> Self {
        let locality = inner.locality();
        Self {
            inner: Some(inner),
            store,
            kind,
            locality,
            latency: Duration::ZERO,
        }
    }

    /// Sleeps this long on every replayed answer and reports it as the
    /// simulated latency.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    fn pause(&self) {
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
    }
}

impl<B: ?Sized + Endpoint> Endpoint for Fixtured<B> {
    fn locality(&self) -> Locality {
        self.locality
    }

    fn simulated_latency(&self) -> Duration {
        self.latency
            + self
                .inner
                .as_ref()
                .map_or(Duration::ZERO, |i| i.simulated_latency())
    }
}

impl VisionReasoner for Fixtured<dyn VisionReasoner> {
    fn vision_reason(&self, bundle: &PromptBundle, image: &Image) -> Result<String, BackendError> {
        self.pause();
        let key = chat_key(self.kind, bundle, Some(image));
        let live = self.inner.as_ref().map(|i| {
            move || {
                i.vision_reason(bundle, image)
                    .map(|content| TextPayload { content })
            }
        });
        let live_ref = live
            .as_ref()
            .map(|f| f as &dyn Fn() -> Result<TextPayload, BackendError>);
        Ok(self.store.resolve(self.kind, key, live_ref)?.content)
    }
}

impl TextReasoner for Fixtured<dyn TextReasoner> {
    fn text_reason(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        self.pause();
        let key = chat_key(self.kind, bundle, None);
        let live = self
            .inner
            .as_ref()
            .map(|i| move || i.text_reason(bundle).map(|content| TextPayload { content }));
        let live_ref = live
            .as_ref()
            .map(|f| f as &dyn Fn() -> Result<TextPayload, BackendError>);
        Ok(self.store.resolve(self.kind, key, live_ref)?.content)
    }
}

impl Segmenter for Fixtured<dyn Segmenter> {
    fn segment(&self, image: &Image, labels: &[String]) -> Result<SegmentResult, BackendError> {
        self.pause();
        let key = segment_key(image, labels);
        let live = self
            .inner
            .as_ref()
            .map(|i| move || SegmentResponse::from_result(&i.segment(image, labels)?));
        let live_ref = live
            .as_ref()
            .map(|f| f as &dyn Fn() -> Result<SegmentResponse, BackendError>);
        let result = self
            .store
            .resolve(self.kind, key, live_ref)?
            .into_result(labels)?;
        result.validate(image.dims())?;
        Ok(result)
    }
}

impl Remover for Fixtured<dyn Remover> {
    fn remove(&self, image: &Image, mask: &Mask) -> Result<Image, BackendError> {
        self.pause();
        let key = remove_key(self.kind, image, mask);
        let live = self.inner.as_ref().map(|i| {
            move || {
                Ok(ImagePayload {
                    image_b64: wire::encode_image(&i.remove(image, mask)?)?,
                })
            }
        });
        let live_ref = live
            .as_ref()
            .map(|f| f as &dyn Fn() -> Result<ImagePayload, BackendError>);
        wire::decode_image(&self.store.resolve(self.kind, key, live_ref)?.image_b64)
    }
}

impl Embedder for Fixtured<dyn Embedder> {
    fn embed(&self, image: &Image) -> Result<Vec<f64>, BackendError> {
        self.pause();
        let key = embed_key(image);
        let live = self
            .inner
            .as_ref()
            .map(|i| move || i.embed(image).map(|vector| EmbedResponse { vector }));
        let live_ref = live
            .as_ref()
            .map(|f| f as &dyn Fn() -> Result<EmbedResponse, BackendError>);
        Ok(self.store.resolve(self.kind, key, live_ref)?.vector)
    }
}

impl PairScorer for Fixtured<dyn PairScorer> {
    fn score_pair(&self, a: &Image, b: &Image) -> Result<f64, BackendError> {
        self.pause();
        let key = score_pair_key(a, b);
        let live = self
            .inner
            .as_ref()
            .map(|i| move || i.score_pair(a, b).map(|score| ScoreResponse { score }));
        let live_ref = live
            .as_ref()
            .map(|f| f as &dyn Fn() -> Result<ScoreResponse, BackendError>);
        Ok(self.store.resolve(self.kind, key, live_ref)?.score)
    }
}

/// Which optional capabilities a replay set should expose.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayOptions {
    pub correction_remover: bool,
    pub embedder: bool,
    pub scorer: bool,
    pub latency: Duration,
    pub reasoner_locality: Locality,
}

/// A backend set answered entirely from `store`.
pub fn replay_backends(store: Arc<FixtureStore>, opts: ReplayOptions) -> BackendSet {
    let lat = opts.latency;
    let loc = opts.reasoner_locality;
    BackendSet {
        vision: Arc::new(
            Fixtured::<dyn VisionReasoner>::replay(store.clone(), kind::VISION, loc)
                .with_latency(lat),
        ),
        text: Arc::new(
            Fixtured::<dyn TextReasoner>::replay(store.clone(), kind::TEXT, loc).with_latency(lat),
        ),
        segmenter: Arc::new(
            Fixtured::<dyn Segmenter>::replay(store.clone(), kind::SEGMENT, Locality::Local)
                .with_latency(lat),
        ),
        remover: Arc::new(
            Fixtured::<dyn Remover>::replay(store.clone(), kind::REMOVE, Locality::Local)
                .with_latency(lat),
        ),
        correction_remover: opts.correction_remover.then(|| {
            Arc::new(
                Fixtured::<dyn Remover>::replay(
                    store.clone(),
                    kind::CORRECTION_REMOVE,
                    Locality::Local,
                )
                .with_latency(lat),
            ) as Arc<dyn Remover>
        }),
        embedder: opts.embedder.then(|| {
            Arc::new(Fixtured::<dyn Embedder>::replay(
                store.clone(),
                kind::EMBED,
                Locality::Local,
            )) as Arc<dyn Embedder>
        }),
        scorer: opts.scorer.then(|| {
            Arc::new(Fixtured::<dyn PairScorer>::replay(
                store.clone(),
                kind::SCORE_PAIR,
                Locality::Local,
            )) as Arc<dyn PairScorer>
        }),
    }
}

/// Wraps every handle of `live` so its traffic is recorded into `store`.
pub fn recording_backends(live: &BackendSet, store: Arc<FixtureStore>) -> BackendSet {
    BackendSet {
        vision: Arc::new(Fixtured::record(
            live.vision.clone(),
            store.clone(),
            kind::VISION,
        )),
        text: Arc::new(Fixtured::record(
            live.text.clone(),
            store.clone(),
            kind::TEXT,
        )),
        segmenter: Arc::new(Fixtured::record(
            live.segmenter.clone(),
            store.clone(),
            kind::SEGMENT,
        )),
        remover: Arc::new(Fixtured::record(
            live.remover.clone(),
            store.clone(),
            kind::REMOVE,
        )),
        correction_remover: live.correction_remover.clone().map(|r| {
            Arc::new(Fixtured::record(r, store.clone(), kind::CORRECTION_REMOVE))
                as Arc<dyn Remover>
        }),
        embedder: live.embedder.clone().map(|e| {
            Arc::new(Fixtured::record(e, store.clone(), kind::EMBED)) as Arc<dyn Embedder>
        }),
        scorer: live.scorer.clone().map(|s| {
            Arc::new(Fixtured::record(s, store.clone(), kind::SCORE_PAIR)) as Arc<dyn PairScorer>
        }),
    }
}

/// Options matching the capabilities a live set exposes.
pub fn replay_options_for(live: &BackendSet) -> ReplayOptions {
    ReplayOptions {
        correction_remover: live.correction_remover.is_some(),
        embedder: live.embedder.is_some(),
        scorer: live.scorer.is_some(),
        latency: Duration::ZERO,
        reasoner_locality: live.vision.locality(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Echo(AtomicUsize);
    impl Endpoint for Echo {}
    impl TextReasoner for Echo {
        fn text_reason(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(format!("echo: {}", bundle.user_text))
        }
    }

    fn bundle(user: &str) -> PromptBundle {
        PromptBundle {
            system_text: "sys".into(),
            user_text: user.into(),
            attach_image: false,
        }
    }

    #[test]
    fn keys_are_stable_and_discriminating() {
        let img = Image::filled(3, 3, [9, 9, 9]).unwrap();
        let a = chat_key(kind::VISION, &bundle("x"), Some(&img));
        assert_eq!(a, chat_key(kind::VISION, &bundle("x"), Some(&img)));
        assert_ne!(a, chat_key(kind::TEXT, &bundle("x"), Some(&img)));
        assert_ne!(a, chat_key(kind::VISION, &bundle("y"), Some(&img)));
        let other = Image::filled(3, 3, [9, 9, 8]).unwrap();
        assert_ne!(a, chat_key(kind::VISION, &bundle("x"), Some(&other)));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn record_dedups_and_replays() {
        let store = Arc::new(FixtureStore::recording());
        let live = Arc::new(Echo(AtomicUsize::new(0)));
        let rec = Fixtured::<dyn TextReasoner>::record(live.clone(), store.clone(), kind::TEXT);
        assert_eq!(rec.text_reason(&bundle("hi")).unwrap(), "echo: hi");
        assert_eq!(rec.text_reason(&bundle("hi")).unwrap(), "echo: hi");
        assert_eq!(store.len(), 1);
        assert_eq!(live.0.load(Ordering::SeqCst), 1);

        let replay_store = Arc::new(FixtureStore::replay(store.entries()));
        let rep = Fixtured::<dyn TextReasoner>::replay(replay_store, kind::TEXT, Locality::Remote);
        assert_eq!(rep.text_reason(&bundle("hi")).unwrap(), "echo: hi");
        assert!(matches!(
            rep.text_reason(&bundle("other")),
            Err(BackendError::MissingFixture { .. })
        ));
    }

    #[test]
    fn fixture_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let store = FixtureStore::record_to(&path).unwrap();
        for i in 0..3 {
            store
                .insert(FixtureEntry {
                    key_hash: format!("k{i}"),
                    kind: kind::TEXT.into(),
                    response_payload: json!({ "content": format!("r{i}") }),
                })
                .unwrap();
        }
        assert!(!store
            .insert(FixtureEntry {
                key_hash: "k1".into(),
                kind: kind::TEXT.into(),
                response_payload: json!({ "content": "dup" }),
            })
            .unwrap());
        let loaded = FixtureStore::replay_from(&path).unwrap();
        assert_eq!(loaded.entries(), store.entries());
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
        let copy = dir.path().join("copy.jsonl");
        loaded.save(&copy).unwrap();
        assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
    }
}
