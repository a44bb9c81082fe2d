//! Model capabilities the pipeline consumes, behind object-safe traits.
//!
//! Three families of implementations exist:
//! - [`http`]: wire clients for chat-completions reasoners and the segmenter,
//!   remover, embedder and pair-scorer endpoints,
//! - [`fixtures`]: record/replay wrappers keyed by a stable request hash,
//! - [`crate::oracle`]: a synthetic world answering from ground truth.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::PromptBundle;
use crate::raster::{Image, Mask, RasterError};

pub mod fixtures;
pub mod http;
pub mod wire;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no fixture recorded for {kind} request {key}")]
    MissingFixture { kind: String, key: String },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("capability not configured: {0}")]
    Unavailable(&'static str),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a backend's compute happens. Drives the remote/local runtime split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    Remote,
    #[default]
    Local,
}

/// Shared by every capability handle.
pub trait Endpoint: Send + Sync {
    fn locality(&self) -> Locality {
        Locality::Local
    }

    /// Latency charged to this call under the virtual clock.
    fn simulated_latency(&self) -> Duration {
        Duration::ZERO
    }
}

/// Image-conditioned reasoner (the multimodal model).
pub trait VisionReasoner: Endpoint {
    fn vision_reason(&self, bundle: &PromptBundle, image: &Image) -> Result<String, BackendError>;
}

/// Text-only reasoner.
pub trait TextReasoner: Endpoint {
    fn text_reason(&self, bundle: &PromptBundle) -> Result<String, BackendError>;
}

pub trait Segmenter: Endpoint {
    fn segment(&self, image: &Image, labels: &[String]) -> Result<SegmentResult, BackendError>;
}

pub trait Remover: Endpoint {
    fn remove(&self, image: &Image, mask: &Mask) -> Result<Image, BackendError>;
}

/// Global image embedding provider (DINO-style similarity).
pub trait Embedder: Endpoint {
    fn embed(&self, image: &Image) -> Result<Vec<f64>, BackendError>;
}

/// Learned pairwise distance provider (LPIPS-style).
pub trait PairScorer: Endpoint {
    fn score_pair(&self, a: &Image, b: &Image) -> Result<f64, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInstance {
    pub mask: Mask,
    pub score: f64,
}

/// Instances per requested label, in request order. A label with no
/// instances was not found.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentResult {
    pub per_label: Vec<(String, Vec<SegmentInstance>)>,
}

impl SegmentResult {
    pub fn instances(&self, label: &str) -> &[SegmentInstance] {
        self.per_label
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn total_instances(&self) -> usize {
        self.per_label.iter().map(|(_, v)| v.len()).sum()
    }

    /// Checks masks against the image size and scores against [0, 1].
    pub fn validate(&self, dims: (usize, usize)) -> Result<(), BackendError> {
        for (label, instances) in &self.per_label {
            for inst in instances {
                if inst.mask.dims() != dims {
                    return Err(BackendError::InvalidResponse(format!(
                        "mask for {label:?} is {:?}, image is {dims:?}",
                        inst.mask.dims()
                    )));
                }
                if !(0.0..=1.0).contains(&inst.score) {
                    return Err(BackendError::InvalidResponse(format!(
                        "score {} for {label:?} outside [0, 1]",
                        inst.score
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Every handle the pipeline and benchmark need.
#[derive(Clone)]
pub struct BackendSet {
    pub vision: Arc<dyn VisionReasoner>,
    pub text: Arc<dyn TextReasoner>,
    pub segmenter: Arc<dyn Segmenter>,
    pub remover: Arc<dyn Remover>,
    /// Remover for the corrective pass; the primary remover when absent.
    pub correction_remover: Option<Arc<dyn Remover>>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub scorer: Option<Arc<dyn PairScorer>>,
}

impl BackendSet {
    pub fn correction_remover(&self) -> &Arc<dyn Remover> {
        self.correction_remover.as_ref().unwrap_or(&self.remover)
    }
}
