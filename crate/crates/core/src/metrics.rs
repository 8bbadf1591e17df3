//! Evaluation battery for synthetic data: FID, KID, precision/recall,
//! perceptual path length, authenticity and projection-distance statistics.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingSet, MetricReport, PipelineConfig};
use crate::error::{Error, Result, ResultExt};
use crate::nn::{Activation, Layer};
use crate::numerics::{
    self, knn_radii, mean_cov, pairwise_sum, sqrtm_spd, squared_euclidean, symmetrize, Metric,
};
use crate::rng::stream;
use crate::toygen::ToyGenerator;

/// Fixed map from sample space to feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    input_dim: usize,
    layer: Option<Layer>,
}

impl FeatureExtractor {
    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layer: None,
        }
    }

    /// Seeded affine layer followed by tanh.
    pub fn seeded(input_dim: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            layer: Some(Layer::glorot(
                input_dim,
                feature_dim,
                Activation::Tanh,
                seed,
                &[0xfea7],
            )),
        }
    }

    pub fn from_layer(layer: Layer) -> Self {
        Self {
            input_dim: layer.input_dim(),
            layer: Some(layer),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.as_ref().map_or(self.input_dim, Layer::output_dim)
    }

    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::validation(format!(
                "extractor expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(match &self.layer {
            None => x.to_vec(),
            Some(l) => l.forward(x),
        })
    }

    pub fn extract_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.extract(r)).collect()
    }

    /// Features and the pullback of `cotangent_of(features)` to input space.
    pub(crate) fn extract_with_vjp(
        &self,
        x: &[f64],
        cotangent_of: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        match &self.layer {
            None => {
                let ct = cotangent_of(x);
                (x.to_vec(), ct)
            }
            Some(l) => {
                let y = l.forward(x);
                let ct = cotangent_of(&y);
                let delta: Vec<f64> = ct
                    .iter()
                    .zip(&y)
                    .map(|(c, y)| match l.activation {
                        Activation::Tanh => c * (1.0 - y * y),
                        Activation::Identity => *c,
                    })
                    .collect();
                (y, l.weight.tmul_vec(&delta))
            }
        }
    }
}

fn check_pair(a: &[Vec<f64>], b: &[Vec<f64>], min: usize, what: &str) -> Result<()> {
    if a.len() < min || b.len() < min {
        return Err(Error::validation(format!(
            "{what} needs at least {min} samples per set (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let da = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != da) {
        return Err(Error::validation(format!("{what}: dimension mismatch")));
    }
    Ok(())
}

/// Fréchet distance between Gaussian fits of two sample sets:
/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn fid(real: &EmbeddingSet, gen: &EmbeddingSet) -> Result<f64> {
    fid_rows(&real.rows_f64(), &gen.rows_f64())
}

pub fn fid_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_pair(a, b, 2, "FID")?;
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;
    let mean_term = squared_euclidean(&mu_a, &mu_b);
    let root_a = sqrtm_spd(&cov_a)?.to_matrix();
    let inner = root_a.matmul(&cov_b.to_matrix())?.matmul(&root_a)?;
    let cross = sqrtm_spd(&symmetrize(inner)?)?.trace();
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::numerical("FID evaluated to a non-finite value"));
    }
    Ok(value.max(0.0))
}

/// Degree-3 polynomial kernel `(xᵀy / d + 1)³`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let v = numerics::dot(x, y) / x.len() as f64 + 1.0;
    v * v * v
}

/// Unbiased MMD² between two equally sized blocks under [`poly_kernel`].
pub fn unbiased_mmd2(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len() as f64;
    let n = y.len() as f64;
    let within = |s: &[&[f64]]| -> f64 {
        let terms: Vec<f64> = (0..s.len())
            .flat_map(|i| (0..s.len()).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| poly_kernel(s[i], s[j]))
            .collect();
        pairwise_sum(&terms)
    };
    let cross: Vec<f64> = x
        .iter()
        .flat_map(|a| y.iter().map(move |b| poly_kernel(a, b)))
        .collect();
    within(x) / (m * (m - 1.0)) + within(y) / (n * (n - 1.0)) - 2.0 * pairwise_sum(&cross) / (m * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    pub mean: f64,
    /// Population standard deviation over blocks.
    pub std: f64,
}

pub fn kid(
    real: &EmbeddingSet,
    gen: &EmbeddingSet,
    block_size: usize,
    n_blocks: usize,
    seed: u64,
) -> Result<KidEstimate> {
    kid_rows(&real.rows_f64(), &gen.rows_f64(), block_size, n_blocks, seed)
}

/// Block-averaged KID. Each set is drawn without replacement from a seeded
/// permutation, consecutive blocks taking consecutive chunks; when a
/// permutation runs out a fresh one is drawn, so blocks are disjoint
/// whenever `block_size · n_blocks ≤ N`.
pub fn kid_rows(
    real: &[Vec<f64>],
    gen: &[Vec<f64>],
    block_size: usize,
    n_blocks: usize,
    seed: u64,
) -> Result<KidEstimate> {
    if block_size < 2 || n_blocks == 0 {
        return Err(Error::validation(format!(
            "KID needs block_size >= 2 and n_blocks >= 1 (got {block_size}, {n_blocks})"
        )));
    }
    if block_size > real.len().min(gen.len()) {
        return Err(Error::validation(format!(
            "KID block size {block_size} exceeds set sizes ({}, {})",
            real.len(),
            gen.len()
        )));
    }
    check_pair(real, gen, 2, "KID")?;
    let mut real_blocks = BlockSampler::new(real.len(), seed, 0);
    let mut gen_blocks = BlockSampler::new(gen.len(), seed, 1);
    let values: Vec<f64> = (0..n_blocks)
        .map(|_| {
            let x: Vec<&[f64]> = real_blocks
                .next_block(block_size)
                .into_iter()
                .map(|i| real[i].as_slice())
                .collect();
            let y: Vec<&[f64]> = gen_blocks
                .next_block(block_size)
                .into_iter()
                .map(|i| gen[i].as_slice())
                .collect();
            unbiased_mmd2(&x, &y)
        })
        .collect();
    let mean = pairwise_sum(&values) / n_blocks as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_blocks as f64;
    if !mean.is_finite() {
        return Err(Error::numerical("KID evaluated to a non-finite value"));
    }
    Ok(KidEstimate {
        mean,
        std: var.sqrt(),
    })
}

struct BlockSampler {
    n: usize,
    perm: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BlockSampler {
    fn new(n: usize, seed: u64, key: u64) -> Self {
        let mut s = Self {
            n,
            perm: (0..n).collect(),
            pos: 0,
            rng: stream(seed, &[0x41d, key]),
        };
        s.perm.shuffle(&mut s.rng);
        s
    }

    fn next_block(&mut self, size: usize) -> Vec<usize> {
        if self.pos + size > self.n {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.perm[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Improved precision and recall on k-NN manifolds (euclidean).
pub fn precision_recall(real: &EmbeddingSet, gen: &EmbeddingSet, k: usize) -> Result<(f64, f64)> {
    precision_recall_rows(&real.rows_f64(), &gen.rows_f64(), k)
}

pub fn precision_recall_rows(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 || k >= real.len().min(gen.len()) {
        return Err(Error::validation(format!(
            "precision/recall needs 1 <= k < min(N_real, N_gen) (k = {k}, sizes {} and {})",
            real.len(),
            gen.len()
        )));
    }
    check_pair(real, gen, 2, "precision/recall")?;
    let real_radii = knn_radii(real, k, Metric::Euclidean)?;
    let gen_radii = knn_radii(gen, k, Metric::Euclidean)?;
    Ok((
        manifold_coverage(gen, real, &real_radii),
        manifold_coverage(real, gen, &gen_radii),
    ))
}

/// Fraction of `queries` inside at least one ball `(centers[i], radii[i])`.
fn manifold_coverage(queries: &[Vec<f64>], centers: &[Vec<f64>], radii: &[f64]) -> f64 {
    let inside = queries
        .iter()
        .filter(|q| {
            centers
                .iter()
                .zip(radii)
                .any(|(c, &r)| numerics::euclidean(q, c) <= r)
        })
        .count();
    inside as f64 / queries.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Linear interpolation between mapped codes in w-space.
    #[default]
    LerpW,
    /// Spherical interpolation in z-space, then mapping.
    SlerpZ,
}

/// One sampled path segment for PPL.
#[derive(Debug, Clone, PartialEq)]
pub struct PplPath {
    pub class: Option<usize>,
    pub z_start: Vec<f64>,
    pub z_end: Vec<f64>,
    /// Mapped endpoints; only meaningful for [`Interpolation::LerpW`].
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
    pub t: f64,
}

/// Draw the path endpoints and interpolation positions used by [`ppl`].
pub fn sample_ppl_paths(g: &ToyGenerator, n_paths: usize, seed: u64) -> Result<Vec<PplPath>> {
    let mut rng = stream(seed, &[0x991]);
    let d = g.latent_dim();
    (0..n_paths)
        .map(|_| {
            let z_start: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let z_end: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let t: f64 = rng.random();
            let class = g.is_conditional().then(|| rng.random_range(0..2usize));
            Ok(PplPath {
                w_start: g.mapping(&z_start, class)?,
                w_end: g.mapping(&z_end, class)?,
                class,
                z_start,
                z_end,
                t,
            })
        })
        .collect()
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a + t * (b - a)).collect()
}

fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let na = numerics::norm(a);
    let nb = numerics::norm(b);
    let cos = (numerics::dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega.abs() < 1e-12 {
        return lerp(a, b, t);
    }
    let s = omega.sin();
    let (ca, cb) = (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s);
    a.iter().zip(b).map(|(a, b)| ca * a + cb * b).collect()
}

/// Perceptual path length: the mean over sampled paths of
/// `‖F(G(x(t))) − F(G(x(t + ε)))‖² / ε²`.
pub fn ppl(
    g: &ToyGenerator,
    extractor: &FeatureExtractor,
    n_paths: usize,
    epsilon: f64,
    interpolation: Interpolation,
    seed: u64,
) -> Result<f64> {
    if n_paths == 0 {
        return Err(Error::validation("PPL needs at least one path"));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::validation(format!("PPL epsilon {epsilon} must be positive")));
    }
    let paths = sample_ppl_paths(g, n_paths, seed)?;
    let terms = paths
        .iter()
        .map(|p| {
            let (wa, wb) = match interpolation {
                Interpolation::LerpW => (
                    lerp(&p.w_start, &p.w_end, p.t),
                    lerp(&p.w_start, &p.w_end, p.t + epsilon),
                ),
                Interpolation::SlerpZ => (
                    g.mapping(&slerp(&p.z_start, &p.z_end, p.t), p.class)?,
                    g.mapping(&slerp(&p.z_start, &p.z_end, p.t + epsilon), p.class)?,
                ),
            };
            let fa = extractor.extract(&g.synthesize(&wa)?)?;
            let fb = extractor.extract(&g.synthesize(&wb)?)?;
            Ok(squared_euclidean(&fa, &fb) / (epsilon * epsilon))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&terms) / n_paths as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Authenticity {
    /// Fraction of generated samples not flagged as memorized.
    pub score: f64,
    pub memorized: Vec<bool>,
}

pub fn authenticity(train: &EmbeddingSet, gen: &EmbeddingSet) -> Result<Authenticity> {
    authenticity_rows(&train.rows_f64(), &gen.rows_f64())
}

/// A generated sample is memorized when it lies strictly closer to its
/// nearest training point than that point's own nearest training neighbor.
/// Ties in the nearest training point go to the lowest index.
pub fn authenticity_rows(train: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<Authenticity> {
    if train.len() < 2 {
        return Err(Error::validation(format!(
            "authenticity needs at least 2 training samples, got {}",
            train.len()
        )));
    }
    if gen.is_empty() {
        return Err(Error::validation("authenticity needs generated samples"));
    }
    check_pair(train, gen, 1, "authenticity")?;
    let train_nn = knn_radii(train, 1, Metric::Euclidean)?;
    let memorized: Vec<bool> = gen
        .iter()
        .map(|s| {
            let (nearest, dist) = train
                .iter()
                .enumerate()
                .map(|(i, t)| (i, numerics::euclidean(s, t)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
            dist < train_nn[nearest]
        })
        .collect();
    let flagged = memorized.iter().filter(|&&m| m).count();
    Ok(Authenticity {
        score: (gen.len() - flagged) as f64 / gen.len() as f64,
        memorized,
    })
}

/// Summary of per-pair distances between real samples and their
/// projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub close_threshold: f64,
    /// Ids of pairs with distance strictly below `close_threshold`.
    pub flagged_close: Vec<u32>,
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl DistanceStats {
    /// Summarize precomputed distances. `close_threshold` defaults to Q1.
    pub fn from_distances(
        ids: &[u32],
        distances: &[f64],
        close_threshold: Option<f64>,
    ) -> Result<Self> {
        if distances.is_empty() || ids.len() != distances.len() {
            return Err(Error::validation(
                "distance statistics need at least one (id, distance) pair",
            ));
        }
        if distances.iter().any(|d| !d.is_finite()) {
            return Err(Error::numerical("non-finite distance"));
        }
        let mut sorted = distances.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&sorted, 0.25);
        let threshold = close_threshold.unwrap_or(q1);
        Ok(Self {
            mean: pairwise_sum(distances) / distances.len() as f64,
            median: quantile_sorted(&sorted, 0.5),
            q1,
            q3: quantile_sorted(&sorted, 0.75),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            count: distances.len(),
            close_threshold: threshold,
            flagged_close: ids
                .iter()
                .zip(distances)
                .filter(|(_, &d)| d < threshold)
                .map(|(id, _)| *id)
                .collect(),
        })
    }
}

/// A real feature vector and the feature vector of its projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub id: u32,
    pub real: Vec<f64>,
    pub projected: Vec<f64>,
}

pub fn distance_stats(
    pairs: &[ProjectionPair],
    close_threshold: Option<f64>,
    metric: Metric,
) -> Result<DistanceStats> {
    let distances = pairs
        .iter()
        .map(|p| {
            metric
                .distance(&p.real, &p.projected)
                .map_err(|e| e.context(format!("pair {}", p.id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let ids: Vec<u32> = pairs.iter().map(|p| p.id).collect();
    DistanceStats::from_distances(&ids, &distances, close_threshold)
}

/// Full metric row for one (real, generated) pair of sets. FID, KID,
/// precision/recall and authenticity are computed on extracted features;
/// PPL is taken from the generator. `distance_stats` is left empty.
pub fn evaluate_all(
    scenario: &str,
    real: &EmbeddingSet,
    gen: &EmbeddingSet,
    g: &ToyGenerator,
    extractor: &FeatureExtractor,
    config: &PipelineConfig,
) -> Result<MetricReport> {
    let fr = extractor.extract_rows(&real.rows_f64()).context("feature extraction")?;
    let fg = extractor.extract_rows(&gen.rows_f64()).context("feature extraction")?;
    let fid = fid_rows(&fr, &fg).context("fid")?;
    let kid = kid_rows(&fr, &fg, config.kid_block, config.kid_blocks, config.seed).context("kid")?;
    let (precision, recall) = precision_recall_rows(&fr, &fg, config.k).context("precision/recall")?;
    let ppl = ppl(
        g,
        extractor,
        config.ppl_paths,
        config.ppl_epsilon,
        Interpolation::LerpW,
        config.seed,
    )
    .context("ppl")?;
    let auth = authenticity_rows(&fr, &fg).context("authenticity")?;
    Ok(MetricReport {
        scenario: scenario.to_string(),
        kid_mean: kid.mean,
        kid_std: kid.std,
        fid,
        precision,
        recall,
        ppl,
        authenticity: auth.score,
        distance_stats: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;

    fn rows(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, &[]);
        (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect())
            .collect()
    }

    fn col(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn fid_identical_is_zero() {
        let a = rows(1, 100, 4, 0.0);
        assert!(fid_rows(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn fid_one_dimensional_closed_forms() {
        // (mean, var) = (0, 1) vs (1, 1): (0-1)^2 + (1-1)^2
        let v = fid_rows(&col(&[-1.0, 0.0, 1.0]), &col(&[0.0, 1.0, 2.0])).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        // (0, 1) vs (0, 4): 1 + 4 - 2*2
        let v = fid_rows(&col(&[-1.0, 0.0, 1.0]), &col(&[-2.0, 0.0, 2.0])).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fid_symmetry_and_translation() {
        let a = rows(2, 80, 3, 0.0);
        let b = rows(3, 60, 3, 0.5);
        assert!((fid_rows(&a, &b).unwrap() - fid_rows(&b, &a).unwrap()).abs() < 1e-8);
        let shift = [0.3, -1.0, 2.0];
        let moved: Vec<Vec<f64>> = a
            .iter()
            .map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect())
            .collect();
        let expect: f64 = shift.iter().map(|s| s * s).sum();
        assert!((fid_rows(&a, &moved).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn fid_rejects_bad_inputs() {
        assert!(fid_rows(&col(&[1.0]), &col(&[1.0, 2.0])).is_err());
        assert!(fid_rows(&rows(1, 5, 2, 0.0), &rows(1, 5, 3, 0.0)).is_err());
    }

    #[test]
    fn kid_point_masses_match_double_sum() {
        let m = 3.0;
        let x = col(&[0.0; 4]);
        let y = col(&[m; 4]);
        let est = kid_rows(&x, &y, 4, 1, 0).unwrap();
        // k(0,0) = 1, k(M,M) = (M^2 + 1)^3, k(0,M) = 1
        let mut within_x = 0.0;
        let mut within_y = 0.0;
        let mut cross = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    within_x += (x[i][0] * x[j][0] + 1.0f64).powi(3);
                    within_y += (y[i][0] * y[j][0] + 1.0f64).powi(3);
                }
                cross += (x[i][0] * y[j][0] + 1.0f64).powi(3);
            }
        }
        let expect = within_x / 12.0 + within_y / 12.0 - 2.0 * cross / 16.0;
        assert!((est.mean - expect).abs() < 1e-9 * expect);
        assert_eq!(est.std, 0.0);
    }

    #[test]
    fn kid_single_block_equals_direct_mmd() {
        let a = rows(4, 10, 3, 0.0);
        let b = rows(5, 10, 3, 0.2);
        let est = kid_rows(&a, &b, 10, 1, 9).unwrap();
        let x: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
        let y: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
        assert!((est.mean - unbiased_mmd2(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn kid_null_within_three_std() {
        let a = rows(6, 500, 4, 0.0);
        let est = kid_rows(&a, &a, 50, 10, 3).unwrap();
        assert!(est.mean.abs() <= 3.0 * est.std, "{est:?}");
        assert!(kid_rows(&a, &a[..10], 50, 10, 3).is_err());
        assert!(kid_rows(&a, &a, 1, 10, 3).is_err());
    }

    #[test]
    fn kid_deterministic() {
        let a = rows(6, 120, 4, 0.0);
        let b = rows(7, 120, 4, 0.1);
        assert_eq!(kid_rows(&a, &b, 20, 5, 1).unwrap(), kid_rows(&a, &b, 20, 5, 1).unwrap());
    }

    #[test]
    fn precision_recall_containment_and_separation() {
        let real = rows(8, 40, 3, 0.0);
        let sub: Vec<Vec<f64>> = real.iter().step_by(3).cloned().collect();
        let (p, _) = precision_recall_rows(&real, &sub, 3).unwrap();
        assert_eq!(p, 1.0);
        let far: Vec<Vec<f64>> = real
            .iter()
            .map(|r| r.iter().map(|x| x + 1e4).collect())
            .collect();
        assert_eq!(precision_recall_rows(&real, &far, 3).unwrap(), (0.0, 0.0));
        assert!(precision_recall_rows(&real, &sub, sub.len()).is_err());
    }

    #[test]
    fn precision_recall_monotone_in_k() {
        let real = rows(9, 40, 2, 0.0);
        let gen = rows(10, 35, 2, 0.7);
        let mut prev = (0.0, 0.0);
        for k in 1..20 {
            let pr = precision_recall_rows(&real, &gen, k).unwrap();
            assert!(pr.0 >= prev.0 && pr.1 >= prev.1);
            prev = pr;
        }
    }

    fn identity_generator(d: usize, seed: u64) -> ToyGenerator {
        ToyGenerator::from_parts(
            Mlp::new(vec![Layer::glorot(d, d, Activation::Tanh, seed, &[1])]).unwrap(),
            Mlp::new(vec![Layer::identity(d)]).unwrap(),
            None,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn ppl_identity_closed_form() {
        let g = identity_generator(5, 3);
        let ext = FeatureExtractor::identity(5);
        let paths = sample_ppl_paths(&g, 200, 11).unwrap();
        let expect = paths
            .iter()
            .map(|p| {
                p.w_start
                    .iter()
                    .zip(&p.w_end)
                    .map(|(a, b)| (b - a) * (b - a))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 200.0;
        for eps in [1e-3, 1e-4, 1e-5] {
            let v = ppl(&g, &ext, 200, eps, Interpolation::LerpW, 11).unwrap();
            assert!((v - expect).abs() < 1e-6 * expect, "eps {eps}: {v} vs {expect}");
        }
    }

    #[test]
    fn ppl_constant_generator_is_zero() {
        let cfg = PipelineConfig::default();
        let g = ToyGenerator::new(&cfg, false).unwrap();
        let g = g.with_params(&vec![0.0; g.param_count()]).unwrap();
        let ext = FeatureExtractor::seeded(32, 8, 1);
        for interp in [Interpolation::LerpW, Interpolation::SlerpZ] {
            assert_eq!(ppl(&g, &ext, 20, 1e-4, interp, 0).unwrap(), 0.0);
        }
        assert!(ppl(&g, &ext, 0, 1e-4, Interpolation::LerpW, 0).is_err());
        assert!(ppl(&g, &ext, 5, 0.0, Interpolation::LerpW, 0).is_err());
    }

    #[test]
    fn ppl_conditional_and_slerp_run() {
        let cfg = PipelineConfig::default();
        let g = ToyGenerator::new(&cfg, true).unwrap();
        let ext = FeatureExtractor::identity(32);
        let a = ppl(&g, &ext, 50, 1e-4, Interpolation::SlerpZ, 5).unwrap();
        assert!(a > 0.0 && a.is_finite());
        assert_eq!(a, ppl(&g, &ext, 50, 1e-4, Interpolation::SlerpZ, 5).unwrap());
    }

    #[test]
    fn authenticity_copies_and_far_samples() {
        let train = rows(12, 20, 3, 0.0);
        let copies = train[..5].to_vec();
        let a = authenticity_rows(&train, &copies).unwrap();
        assert_eq!(a.score, 0.0);
        assert!(a.memorized.iter().all(|&m| m));
        let far: Vec<Vec<f64>> = rows(13, 7, 3, 1e3);
        assert_eq!(authenticity_rows(&train, &far).unwrap().score, 1.0);
        let mut mixed = far.clone();
        mixed.extend(copies);
        assert_eq!(authenticity_rows(&train, &mixed).unwrap().score, 7.0 / 12.0);
        assert!(authenticity_rows(&train[..1], &far).is_err());
    }

    #[test]
    fn distance_stats_hand_quartiles() {
        let s = DistanceStats::from_distances(&[0, 1, 2, 3, 4], &[3.0, 0.0, 4.0, 1.0, 2.0], None)
            .unwrap();
        assert_eq!((s.median, s.q1, s.q3, s.min, s.max), (2.0, 1.0, 3.0, 0.0, 4.0));
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.flagged_close, vec![1]);
    }

    #[test]
    fn distance_stats_identical_pairs() {
        let pairs: Vec<ProjectionPair> = (0..4)
            .map(|i| ProjectionPair {
                id: i,
                real: vec![1.0, i as f64],
                projected: vec![1.0, i as f64],
            })
            .collect();
        let s = distance_stats(&pairs, Some(1e-9), Metric::Cosine).unwrap();
        assert_eq!((s.mean, s.median, s.max), (0.0, 0.0, 0.0));
        assert_eq!(s.flagged_close, vec![0, 1, 2, 3]);
        let bad = [ProjectionPair {
            id: 17,
            real: vec![0.0, 0.0],
            projected: vec![1.0, 0.0],
        }];
        let err = distance_stats(&bad, None, Metric::Cosine).unwrap_err();
        assert!(err.to_string().contains("pair 17"));
    }

    #[test]
    fn extractor_vjp_matches_finite_differences() {
        let ext = FeatureExtractor::seeded(4, 3, 2);
        let x = [0.2, -0.4, 0.9, 0.1];
        let c = [1.0, -0.5, 2.0];
        let (_, g) = ext.extract_with_vjp(&x, |_| c.to_vec());
        let f = |x: &[f64]| numerics::dot(&ext.extract(x).unwrap(), &c);
        for i in 0..4 {
            let mut a = x;
            let mut b = x;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            assert!(((f(&a) - f(&b)) / 2e-6 - g[i]).abs() < 1e-8);
        }
    }
}
