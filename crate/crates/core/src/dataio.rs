//! Persistence: the EMB1 embedding format, pipeline configuration and JSON
//! reports.
//!
//! EMB1 layout (all integers little-endian):
//!
//! | offset        | size      | field                              |
//! |---------------|-----------|------------------------------------|
//! | 0             | 4         | magic `b"EMB1"`                    |
//! | 4             | 4         | version, `u32` = 1                 |
//! | 8             | 4         | N, `u32`                           |
//! | 12            | 4         | dim, `u32`                         |
//! | 16            | 1         | source, 0 = real, 1 = synthetic    |
//! | 17            | 4·N·dim   | vectors, `f32` row-major           |
//! | …             | N         | labels, `u8`                       |
//! | …             | 4·N       | ids, `u32`                         |

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::DistanceStats;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;
const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

/// Labelled feature vectors from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: Vec<f32>,
    labels: Vec<u8>,
    ids: Vec<u32>,
    source: Source,
}

impl EmbeddingSet {
    pub fn new(
        dim: usize,
        vectors: Vec<f32>,
        labels: Vec<u8>,
        ids: Vec<u32>,
        source: Source,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        let n = labels.len();
        if vectors.len() != n * dim || ids.len() != n {
            return Err(Error::validation(format!(
                "embedding set shape mismatch: {} values, {} labels, {} ids for dim {dim}",
                vectors.len(),
                n,
                ids.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value in row {}",
                i / dim
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::validation(format!("label {l} is not 0 or 1")));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::validation(format!("duplicate sample id {dup}")));
        }
        Ok(Self {
            dim,
            vectors,
            labels,
            ids,
            source,
        })
    }

    /// Build from f64 rows; values are stored as f32. Ids are `0..N`.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u8>, source: Source) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("ragged rows"));
        }
        let ids = (0..rows.len() as u32).collect();
        let vectors = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(dim, vectors, labels, ids, source)
    }

    pub fn empty(dim: usize, source: Source) -> Result<Self> {
        Self::new(dim, vec![], vec![], vec![], source)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row_f64(i)).collect()
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Subset by row indices, keeping ids.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut vectors = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::validation(format!("row {i} out of range")));
            }
            vectors.extend_from_slice(self.row(i));
        }
        Self::new(
            self.dim,
            vectors,
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.ids[i]).collect(),
            self.source,
        )
    }

    /// Concatenate two sets; ids of `other` are renumbered after `self`'s
    /// maximum id. The result takes `self`'s source tag.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<Self> {
        if self.dim != other.dim && !other.is_empty() && !self.is_empty() {
            return Err(Error::validation(format!(
                "cannot concatenate dim {} with dim {}",
                self.dim, other.dim
            )));
        }
        let base = self.ids.iter().max().map_or(0, |m| m + 1);
        let mut vectors = self.vectors.clone();
        vectors.extend_from_slice(&other.vectors);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.ids.clone();
        ids.extend((0..other.len() as u32).map(|i| base + i));
        let dim = if self.is_empty() { other.dim } else { self.dim };
        Self::new(dim, vectors, labels, ids, self.source)
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(HEADER_LEN + n * (4 * self.dim + 5));
        out.extend_from_slice(EMB1_MAGIC);
        out.extend_from_slice(&EMB1_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(match self.source {
            Source::Real => 0,
            Source::Synthetic => 1,
        });
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != EMB1_MAGIC {
            return Err(fmt_err(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
        }
        let version = r.u32("version")?;
        if version != EMB1_VERSION {
            return Err(fmt_err(4, format!("unsupported version {version}")));
        }
        let n = r.u32("count")? as usize;
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(fmt_err(12, "dimension is zero"));
        }
        let source = match r.take(1, "source")?[0] {
            0 => Source::Real,
            1 => Source::Synthetic,
            other => return Err(fmt_err(16, format!("unknown source tag {other}"))),
        };
        let expected = n
            .checked_mul(dim)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|v| v.checked_add(5 * n))
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| fmt_err(8, "header sizes overflow"))?;
        let vectors = r
            .take(4 * n * dim, "vector payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect::<Vec<_>>();
        let labels_at = r.pos;
        let labels = r.take(n, "labels")?.to_vec();
        let ids_at = r.pos;
        let ids = r
            .take(4 * n, "ids")?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect::<Vec<_>>();
        if bytes.len() != expected {
            return Err(fmt_err(
                expected as u64,
                format!("{} trailing bytes after payload", bytes.len() - expected),
            ));
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(fmt_err((HEADER_LEN + 4 * i) as u64, "non-finite vector value"));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(fmt_err((labels_at + i) as u64, format!("label {}", labels[i])));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(i) = ids.iter().position(|id| !seen.insert(*id)) {
            return Err(fmt_err((ids_at + 4 * i) as u64, format!("duplicate id {}", ids[i])));
        }
        Self::new(dim, vectors, labels, ids, source)
    }
}

fn fmt_err(offset: impl TryInto<u64>, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset.try_into().unwrap_or(u64::MAX),
        message: message.into(),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(fmt_err(
                self.bytes.len() as u64,
                format!(
                    "truncated {what}: needed {len} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingSet::from_bytes(&bytes)
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Run configuration. Every field has a default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub sample_dim: usize,
    /// Fraction of minority-class (malignant) samples.
    pub class_ratio: f64,
    pub client_sizes: Vec<usize>,

    /// Neighbor count for precision/recall manifolds.
    pub k: usize,
    pub kid_block: usize,
    pub kid_blocks: usize,
    pub ppl_epsilon: f64,
    pub ppl_paths: usize,

    /// Classifier learning rate.
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,

    /// Local steps between federated exchanges.
    pub fed_exchange_every: usize,
    pub fed_rounds: usize,
    pub fed_lr: f64,
    pub fed_lambda: f64,
    pub fed_batch: usize,
    pub fed_loss_threshold: f64,

    pub n_train: usize,
    pub n_val: usize,
    /// Multiplier applied to the reference synthetic volumes (55k balanced
    /// synthetic set, 22k minority augmentation).
    pub synth_scale: f64,
    /// Gradient steps used to fit the per-class generators.
    pub gen_fit_steps: usize,

    pub project_targets: usize,
    pub project_max_steps: usize,
    pub project_lr: f64,
    pub project_restarts: usize,
    pub neighbors: usize,
    pub neighbor_radius: f64,
    pub edge_cases: usize,

    pub sefa_indices: Vec<usize>,
    pub sefa_alphas: Vec<f64>,

    pub tsne_dims: usize,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            latent_dim: 16,
            sample_dim: 32,
            class_ratio: 0.02,
            client_sizes: vec![200, 1200, 2000],
            k: 3,
            kid_block: 50,
            kid_blocks: 10,
            ppl_epsilon: 1e-4,
            ppl_paths: 1000,
            lr: 0.0005,
            max_epochs: 20,
            patience: 3,
            batch_size: 32,
            fed_exchange_every: 100,
            fed_rounds: 20,
            fed_lr: 0.05,
            fed_lambda: 0.5,
            fed_batch: 64,
            fed_loss_threshold: 0.01,
            n_train: 1000,
            n_val: 500,
            synth_scale: 0.02,
            gen_fit_steps: 1500,
            project_targets: 12,
            project_max_steps: 2000,
            project_lr: 0.1,
            project_restarts: 3,
            neighbors: 5,
            neighbor_radius: 0.1,
            edge_cases: 8,
            sefa_indices: vec![1, 3, 5],
            sefa_alphas: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            tsne_dims: 3,
            tsne_perplexity: 30.0,
            tsne_iterations: 1000,
            tsne_points: 300,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("sample_dim", self.sample_dim),
            ("k", self.k),
            ("kid_block", self.kid_block),
            ("kid_blocks", self.kid_blocks),
            ("ppl_paths", self.ppl_paths),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
            ("fed_exchange_every", self.fed_exchange_every),
            ("fed_rounds", self.fed_rounds),
            ("fed_batch", self.fed_batch),
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("project_max_steps", self.project_max_steps),
            ("project_restarts", self.project_restarts),
            ("tsne_iterations", self.tsne_iterations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if !(self.class_ratio > 0.0 && self.class_ratio < 1.0) {
            return Err(Error::validation(format!(
                "class_ratio {} must lie in (0, 1)",
                self.class_ratio
            )));
        }
        if self.client_sizes.is_empty() || self.client_sizes.contains(&0) {
            return Err(Error::validation("client_sizes must be non-empty and positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::validation(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        let pos_reals = [
            ("ppl_epsilon", self.ppl_epsilon),
            ("lr", self.lr),
            ("fed_lr", self.fed_lr),
            ("fed_loss_threshold", self.fed_loss_threshold),
            ("synth_scale", self.synth_scale),
            ("project_lr", self.project_lr),
            ("neighbor_radius", self.neighbor_radius),
            ("tsne_perplexity", self.tsne_perplexity),
        ];
        for (name, v) in pos_reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.fed_lambda.is_finite() && self.fed_lambda >= 0.0) {
            return Err(Error::validation("fed_lambda must be non-negative"));
        }
        if self.kid_block < 2 {
            return Err(Error::validation("kid_block must be at least 2"));
        }
        if !matches!(self.tsne_dims, 2 | 3) {
            return Err(Error::validation("tsne_dims must be 2 or 3"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            if e.is_data() {
                Error::validation(format!("config: {e}"))
            } else {
                Error::Json(e)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn read_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PipelineConfig::from_json(&text)
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub kid_mean: f64,
    pub kid_std: f64,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub ppl: f64,
    pub authenticity: f64,
    /// Present once projections have been run.
    pub distance_stats: Option<DistanceStats>,
}

/// Round a float to 9 significant digits.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig9).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with fields in declaration order and floats at 9 significant
/// digits. Output ends with a newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json_string(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
