//! Image-pair quality metrics: PSNR and SSIM natively, embedding similarity
//! and learned distance through provider backends.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Embedder, PairScorer};
use crate::raster::Image;

/// PSNR reported for identical images, and the ceiling for all others.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DATA_RANGE: f64 = 255.0;
/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image sizes differ: {a:?} vs {b:?}")]
    DimensionMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("image {w}x{h} is smaller than the {min}x{min} window")]
    TooSmall { w: usize, h: usize, min: usize },
    #[error("vector lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("embedding is empty or all zero")]
    ZeroVector,
    #[error("provider returned invalid distance {0}")]
    InvalidScore(f64),
    #[error("provider: {0}")]
    Provider(String),
}

fn same_dims(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` over all samples, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let sse: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.abs_diff(y) as u64;
            d * d
        })
        .sum();
    if sse == 0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = sse as f64 / a.data().len() as f64;
    Ok((10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()).min(PSNR_CAP_DB))
}

/// Per-pixel BT.601 luma, unrounded.
pub fn luma(img: &Image) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| {
            LUMA_WEIGHTS[0] * p[0] as f64
                + LUMA_WEIGHTS[1] * p[1] as f64
                + LUMA_WEIGHTS[2] * p[2] as f64
        })
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable filtering keeping only windows fully inside the image.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11x11 Gaussian windows (sigma 1.5) on luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            w,
            h,
            min: SSIM_WINDOW,
        });
    }
    let x = luma(a);
    let y = luma(b);
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let mxx = filter_valid(&prod(&x, &x), w, h, &k);
    let myy = filter_valid(&prod(&y, &y), w, h, &k);
    let mxy = filter_valid(&prod(&x, &y), w, h, &k);
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let vxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Cosine similarity of two embeddings.
pub fn embed_cosine(e1: &[f64], e2: &[f64]) -> Result<f64, MetricError> {
    if e1.len() != e2.len() {
        return Err(MetricError::LengthMismatch {
            a: e1.len(),
            b: e2.len(),
        });
    }
    let n1 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if e1.is_empty() || n1 == 0.0 || n2 == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Distance from a pair-scoring provider, checked to be a finite value >= 0.
pub fn pair_score(a: &Image, b: &Image, provider: &dyn PairScorer) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let d = provider
        .score_pair(a, b)
        .map_err(|e| MetricError::Provider(e.to_string()))?;
    if !d.is_finite() || d < 0.0 {
        return Err(MetricError::InvalidScore(d));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dino: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lpips: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    /// Provider failures that left a metric absent.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

/// All metrics of `edited` against `truth`. Provider metrics are absent when
/// the provider is missing or fails; pixel metrics always run.
pub fn compute_metrics(
    edited: &Image,
    truth: &Image,
    embedder: Option<&dyn Embedder>,
    scorer: Option<&dyn PairScorer>,
) -> Result<MetricSet, MetricError> {
    let mut notes = Vec::new();
    let dino = embedder.and_then(|e| {
        let r = e
            .embed(edited)
            .and_then(|a| Ok((a, e.embed(truth)?)))
            .map_err(|err| MetricError::Provider(err.to_string()))
            .and_then(|(a, b)| embed_cosine(&a, &b));
        r.map_err(|err| notes.push(format!("dino: {err}"))).ok()
    });
    let lpips = scorer.and_then(|s| {
        pair_score(edited, truth, s)
            .map_err(|err| notes.push(format!("lpips: {err}")))
            .ok()
    });
    Ok(MetricSet {
        dino,
        lpips,
        psnr: psnr(edited, truth)?,
        ssim: ssim(edited, truth)?,
        notes,
    })
}
