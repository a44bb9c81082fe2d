//! Dataset diversity analysis over precomputed image embeddings: L2
//! normalization, size-matched subsampling, PCA explained variance and an
//! exact 2-D t-SNE.
//!
//! Two embedding file formats are read:
//! - JSON lines `{"id": "...", "vector": [..]}`, with an optional
//!   `<file>.sha256` sidecar holding the hex SHA-256 of the file,
//! - binary: `EMB1`, `u32` rows, `u32` cols (little endian), `rows * cols`
//!   little-endian `f32` values, then the 32-byte SHA-256 of everything
//!   before it.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::hex;

pub const BINARY_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiversityError {
    #[error("embedding set is empty")]
    Empty,
    #[error("row {row} has {actual} values, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        actual: usize,
    },
    #[error("row {row} column {col} is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("row {0} has zero norm")]
    ZeroNorm(usize),
    #[error("need at least {needed} rows, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("rows are identical: zero total variance")]
    ZeroVariance,
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("perplexity {perplexity} infeasible for {n} points (needs < (n - 1) / 3)")]
    Perplexity { perplexity: f64, n: usize },
    #[error("embedding file: {0}")]
    Format(String),
    #[error("checksum mismatch: expected {expected}, found {actual}")]
    Checksum { expected: String, actual: String },
    #[error("io: {0}")]
    Io(String),
}

fn io(e: std::io::Error) -> DiversityError {
    DiversityError::Io(e.to_string())
}

/// N labelled rows of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub label: String,
    pub ids: Vec<String>,
    vectors: DMatrix<f64>,
}

impl EmbeddingSet {
    pub fn new(label: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self, DiversityError> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::with_ids(label, ids, rows)
    }

    pub fn with_ids(
        label: impl Into<String>,
        ids: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, DiversityError> {
        let d = rows.first().ok_or(DiversityError::Empty)?.len();
        if d == 0 {
            return Err(DiversityError::Empty);
        }
        if ids.len() != rows.len() {
            return Err(DiversityError::Format(
                "ids and rows differ in count".into(),
            ));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(DiversityError::Ragged {
                    row: r,
                    expected: d,
                    actual: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(DiversityError::NonFinite { row: r, col: c });
            }
        }
        let n = rows.len();
        let vectors = DMatrix::from_row_iterator(n, d, rows.into_iter().flatten());
        Ok(Self {
            label: label.into(),
            ids,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.vectors.row(i).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    fn select(&self, idx: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            label: self.label.clone(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            vectors: self.vectors.select_rows(idx),
        }
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet, DiversityError> {
    let mut out = set.clone();
    for (i, mut row) in out.vectors.row_iter_mut().enumerate() {
        let n = row.norm();
        if n == 0.0 {
            return Err(DiversityError::ZeroNorm(i));
        }
        row /= n;
    }
    Ok(out)
}

/// `k` distinct indices from `0..n` chosen by a seeded partial shuffle,
/// returned ascending.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, _) = idx.partial_shuffle(&mut rng, k.min(n));
    let mut picked = picked.to_vec();
    picked.sort_unstable();
    picked
}

/// Subsamples the larger set down to the smaller set's size.
pub fn subsample_match(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    seed: u64,
) -> (EmbeddingSet, EmbeddingSet) {
    let n = a.len().min(b.len());
    let shrink = |s: &EmbeddingSet| {
        if s.len() == n {
            s.clone()
        } else {
            s.select(&subsample_indices(s.len(), n, seed))
        }
    };
    (shrink(a), shrink(b))
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c
}

/// Eigenvalues of the sample covariance (divisor N - 1), descending,
/// `min(N - 1, D)` of them.
pub fn covariance_spectrum(set: &EmbeddingSet) -> Result<Vec<f64>, DiversityError> {
    let n = set.len();
    if n < 2 {
        return Err(DiversityError::TooFew { needed: 2, got: n });
    }
    let c = centered(set.matrix());
    let scale = 1.0 / (n - 1) as f64;
    // The Gram matrix shares the nonzero spectrum and is smaller when D > N.
    let m = if set.dim() <= n {
        c.transpose() * &c * scale
    } else {
        &c * c.transpose() * scale
    };
    let mut ev: Vec<f64> = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev.truncate((n - 1).min(set.dim()));
    Ok(ev)
}

/// Cumulative explained variance ratios.
pub fn pca_explained_variance(set: &EmbeddingSet) -> Result<Vec<f64>, DiversityError> {
    let ev = covariance_spectrum(set)?;
    let total: f64 = ev.iter().sum();
    if total <= 0.0 {
        return Err(DiversityError::ZeroVariance);
    }
    let mut acc = 0.0;
    Ok(ev
        .iter()
        .map(|v| {
            acc += v / total;
            acc.min(1.0)
        })
        .collect())
}

/// Smallest number of components whose cumulative ratio reaches `threshold`.
pub fn components_for(cumulative: &[f64], threshold: f64) -> Result<usize, DiversityError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(DiversityError::InvalidThreshold(threshold));
    }
    Ok(cumulative
        .iter()
        .position(|&c| c >= threshold - 1e-12)
        .map(|i| i + 1)
        .unwrap_or(cumulative.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    /// `max(N / 12, 50)` when absent.
    pub learning_rate: Option<f64>,
    pub seed: u64,
    /// KL divergence is logged every this many iterations.
    pub log_every: usize,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: None,
            seed: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    /// `(iteration, KL(P || Q))` checkpoints against the unexaggerated P.
    pub kl_trace: Vec<(usize, f64)>,
}

impl TsneResult {
    /// Checkpoints taken once early exaggeration has ended.
    pub fn post_exaggeration_trace(&self, params: &TsneParams) -> Vec<(usize, f64)> {
        self.kl_trace
            .iter()
            .copied()
            .filter(|(it, _)| *it >= params.exaggeration_iters)
            .collect()
    }
}

fn squared_distances(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = (x.row(i) - x.row(j)).norm_squared();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row-conditional affinities with per-point bandwidths matching the
/// perplexity, symmetrized and normalized to sum to one.
fn joint_probabilities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        let dmin = d
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            let mut sum = 0.0;
            for (j, (r, dj)) in row.iter_mut().zip(d.iter()).enumerate() {
                *r = if j == i {
                    0.0
                } else {
                    (-(dj - dmin) * beta).exp()
                };
                sum += *r;
            }
            let mut h = 0.0;
            for r in row.iter_mut() {
                *r /= sum;
                if *r > 0.0 {
                    h -= *r * r.ln();
                }
            }
            let diff = h - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = if lo.is_finite() {
                    (beta + lo) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        joint[i * n + i] = 0.0;
    }
    joint
}

/// First two principal components, sign-fixed so each loading vector's
/// largest-magnitude entry is positive, scaled to standard deviation 1e-4
/// along the first axis.
fn pca_init(x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = x.nrows();
    let c = centered(x);
    let gram = &c * c.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    // Gram eigenvectors are the principal scores up to scale.
    let mut cols: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k);
            let s = eig.eigenvalues[k].max(0.0).sqrt();
            let mut col: Vec<f64> = v.iter().map(|e| e * s).collect();
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
            if pivot < 0.0 {
                col.iter_mut().for_each(|e| *e = -*e);
            }
            col
        })
        .collect();
    let std = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|e| (e - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let s0 = std(&cols[0]);
    let scale = if s0 > 0.0 { 1e-4 / s0 } else { 0.0 };
    for col in &mut cols {
        col.iter_mut().for_each(|e| *e *= scale);
    }
    (0..n)
        .map(|i| {
            // tiny seeded jitter separates points with identical projections
            let j0 = rng.gen_range(-1e-8..1e-8);
            let j1 = rng.gen_range(-1e-8..1e-8);
            [cols[0][i] + j0, cols[1][i] + j1]
        })
        .collect()
}

fn student_q(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, sum) = student_q(y);
    p.iter()
        .zip(&num)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, nv)| pv * (pv / (nv / sum).max(1e-12)).ln())
        .sum()
}

/// Exact t-SNE to two dimensions with PCA initialization.
pub fn tsne(set: &EmbeddingSet, params: &TsneParams) -> Result<TsneResult, DiversityError> {
    let n = set.len();
    if n < 4 {
        return Err(DiversityError::TooFew { needed: 4, got: n });
    }
    if !(params.perplexity > 0.0 && params.perplexity < (n - 1) as f64 / 3.0) {
        return Err(DiversityError::Perplexity {
            perplexity: params.perplexity,
            n,
        });
    }
    let p = joint_probabilities(&squared_distances(set.matrix()), n, params.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut y = pca_init(set.matrix(), &mut rng);
    let lr = params
        .learning_rate
        .unwrap_or_else(|| (n as f64 / 12.0).max(50.0));
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut trace = Vec::new();
    let log_every = params.log_every.max(1);

    for it in 0..params.iterations {
        if it % log_every == 0 || it == params.exaggeration_iters {
            trace.push((it, kl_divergence(&p, &y)));
        }
        // Second phase starts from rest.
        if it == params.exaggeration_iters {
            update.iter_mut().for_each(|u| *u = [0.0; 2]);
            gains.iter_mut().for_each(|g| *g = [1.0; 2]);
        }
        let (exag, momentum) = if it < params.exaggeration_iters {
            (params.early_exaggeration, 0.5)
        } else {
            (1.0, 0.8)
        };
        let (num, sum) = student_q(&y);
        for i in 0..n {
            let mut g = [0.0, 0.0];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j] / sum;
                let m = (exag * p[i * n + j] - q) * num[i * n + j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (update[i][d] > 0.0) == (grad[i][d] > 0.0);
                gains[i][d] = if same_sign {
                    gains[i][d] * 0.8
                } else {
                    gains[i][d] + 0.2
                };
                gains[i][d] = gains[i][d].max(0.01);
                update[i][d] = momentum * update[i][d] - lr * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
    }
    trace.push((params.iterations, kl_divergence(&p, &y)));
    Ok(TsneResult {
        points: y,
        kl_trace: trace,
    })
}

/// Fraction of points whose nearest other point carries the same label.
pub fn nearest_neighbor_purity(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let hits = (0..n)
        .filter(|&i| {
            let nn = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (points[a][0] - points[i][0]).powi(2)
                        + (points[a][1] - points[i][1]).powi(2);
                    let db = (points[b][0] - points[i][0]).powi(2)
                        + (points[b][1] - points[i][1]).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least two points");
            labels[nn] == labels[i]
        })
        .count();
    hits as f64 / n as f64
}

#[derive(Deserialize, Serialize)]
struct JsonRow {
    id: String,
    vector: Vec<f64>,
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    s.into()
}

fn check_digest(bytes: &[u8], expected: &str) -> Result<(), DiversityError> {
    let actual = hex(&Sha256::digest(bytes));
    let expected = expected
        .split_whitespace()
        .next()
        .unwrap_or("")
        .to_ascii_lowercase();
    if actual != expected {
        return Err(DiversityError::Checksum { expected, actual });
    }
    Ok(())
}

/// Reads either format; the binary one is recognised by its magic bytes.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    label: &str,
) -> Result<EmbeddingSet, DiversityError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io)?;
    if bytes.starts_with(BINARY_MAGIC) {
        return parse_binary(&bytes, label);
    }
    let side = sidecar(path);
    if side.is_file() {
        check_digest(&bytes, &std::fs::read_to_string(&side).map_err(io)?)?;
    }
    let text = std::str::from_utf8(&bytes).map_err(|e| DiversityError::Format(e.to_string()))?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(line)
            .map_err(|e| DiversityError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        ids.push(row.id);
        rows.push(row.vector);
    }
    EmbeddingSet::with_ids(label, ids, rows)
}

pub fn parse_binary(bytes: &[u8], label: &str) -> Result<EmbeddingSet, DiversityError> {
    let bad = |m: &str| DiversityError::Format(m.to_string());
    if bytes.len() < 12 + 32 || !bytes.starts_with(BINARY_MAGIC) {
        return Err(bad("not an EMB1 matrix"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    check_digest(body, &hex(digest))?;
    let rows = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    let data = &body[12..];
    if data.len() != rows * cols * 4 {
        return Err(bad("payload length does not match header"));
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let rows: Vec<Vec<f64>> = values
        .chunks(cols.max(1))
        .map(<[f64]>::to_vec)
        .take(rows)
        .collect();
    EmbeddingSet::new(label, rows)
}

pub fn write_binary(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<(), DiversityError> {
    let mut out = Vec::with_capacity(12 + set.len() * set.dim() * 4 + 32);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    for row in set.matrix().row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    std::fs::write(path, out).map_err(io)
}

/// Writes JSON lines plus the `.sha256` sidecar.
pub fn write_jsonl(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<(), DiversityError> {
    let path = path.as_ref();
    let mut text = String::new();
    for (i, id) in set.ids.iter().enumerate() {
        let row = JsonRow {
            id: id.clone(),
            vector: set.row(i),
        };
        text.push_str(&serde_json::to_string(&row).expect("rows serialize"));
        text.push('\n');
    }
    std::fs::write(path, &text).map_err(io)?;
    std::fs::write(sidecar(path), hex(&Sha256::digest(text.as_bytes())) + "\n").map_err(io)
}

/// Thresholds reported for the cumulative variance curves.
pub const VARIANCE_THRESHOLDS: [f64; 2] = [0.90, 0.95];

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub matched_size: usize,
    pub labels: [String; 2],
    pub cumulative: [Vec<f64>; 2],
    pub crossings: Vec<(String, f64, usize)>,
    pub scatter: Vec<(String, String, [f64; 2])>,
    pub kl_trace: Vec<(usize, f64)>,
}

/// Normalize both sets, match their sizes, then run PCA per set and one
/// joint t-SNE over both.
pub fn analyze_pair(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    seed: u64,
    params: &TsneParams,
) -> Result<DiversityReport, DiversityError> {
    if a.dim() != b.dim() {
        return Err(DiversityError::Ragged {
            row: 0,
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (a, b) = subsample_match(&l2_normalize(a)?, &l2_normalize(b)?, seed);
    let cumulative = [pca_explained_variance(&a)?, pca_explained_variance(&b)?];
    let mut crossings = Vec::new();
    for (set, cum) in [&a, &b].iter().zip(&cumulative) {
        for t in VARIANCE_THRESHOLDS {
            crossings.push((set.label.clone(), t, components_for(cum, t)?));
        }
    }
    let joint_rows: Vec<Vec<f64>> = (0..a.len())
        .map(|i| a.row(i))
        .chain((0..b.len()).map(|i| b.row(i)))
        .collect();
    let joint = EmbeddingSet::new("joint", joint_rows)?;
    let t = tsne(&joint, params)?;
    let scatter = a
        .ids
        .iter()
        .map(|id| (a.label.clone(), id.clone()))
        .chain(b.ids.iter().map(|id| (b.label.clone(), id.clone())))
        .zip(&t.points)
        .map(|((l, id), p)| (l, id, *p))
        .collect();
    Ok(DiversityReport {
        matched_size: a.len(),
        labels: [a.label.clone(), b.label.clone()],
        cumulative,
        crossings,
        scatter,
        kl_trace: t.kl_trace,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl DiversityReport {
    /// Writes `scatter.csv`, `variance.csv`, `thresholds.csv` and
    /// `tsne_kl.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DiversityError> {
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut scatter = String::from("dataset,id,x,y\n");
        for (l, id, p) in &self.scatter {
            let _ = writeln!(
                scatter,
                "{},{},{:e},{:e}",
                csv_field(l),
                csv_field(id),
                p[0],
                p[1]
            );
        }
        let mut var = format!(
            "component,{},{}\n",
            csv_field(&self.labels[0]),
            csv_field(&self.labels[1])
        );
        let len = self.cumulative[0].len().max(self.cumulative[1].len());
        for k in 0..len {
            let c = |i: usize| {
                self.cumulative[i]
                    .get(k)
                    .map(|v| format!("{v:.12}"))
                    .unwrap_or_default()
            };
            let _ = writeln!(var, "{},{},{}", k + 1, c(0), c(1));
        }
        let mut th = String::from("dataset,threshold,components\n");
        for (l, t, k) in &self.crossings {
            let _ = writeln!(th, "{},{t},{k}", csv_field(l));
        }
        let mut kl = String::from("iteration,kl\n");
        for (it, v) in &self.kl_trace {
            let _ = writeln!(kl, "{it},{v:.12}");
        }
        for (name, body) in [
            ("scatter.csv", scatter),
            ("variance.csv", var),
            ("thresholds.csv", th),
            ("tsne_kl.csv", kl),
        ] {
            std::fs::write(dir.join(name), body).map_err(io)?;
        }
        Ok(())
    }
}
