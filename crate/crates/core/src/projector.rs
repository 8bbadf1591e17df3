//! Generator inversion: find a latent code `w` whose synthesis matches a
//! target in feature space, plus latent-neighbor generation for edge-case
//! augmentation.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingSet;
use crate::error::{Error, Result};
use crate::metrics::{DistanceStats, FeatureExtractor};
use crate::numerics::{cosine_distance, norm, squared_euclidean};
use crate::rng::{derive_seed, stream};
use crate::toygen::ToyGenerator;

/// Consecutive accepted steps after which the step size is doubled again
/// (never above the configured rate).
const RESTORE_AFTER: usize = 10;
const MIN_STEP: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectOptions {
    pub max_steps: usize,
    pub lr: f64,
    /// Stop once the loss falls to or below this value.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            lr: 0.1,
            tol: 1e-12,
            seed: 42,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub target_id: u32,
    pub w_star: Vec<f64>,
    /// Loss after every optimizer step of the winning restart.
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    /// Cosine distance between target and projection features.
    pub final_cosine: f64,
    pub steps_used: usize,
    pub restart: usize,
}

/// `L(w) = ‖F(G(w)) − target_features‖²` and its gradient in `w`.
pub fn projection_loss_grad(
    g: &ToyGenerator,
    extractor: &FeatureExtractor,
    target_features: &[f64],
    w: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let sample = g.synthesize(w)?;
    let mut loss = 0.0;
    let (_, ct_sample) = extractor.extract_with_vjp(&sample, |f| {
        loss = squared_euclidean(f, target_features);
        f.iter()
            .zip(target_features)
            .map(|(a, b)| 2.0 * (a - b))
            .collect()
    });
    let grad = g.grad_wrt_w(w, &ct_sample)?;
    Ok((loss, grad))
}

struct Run {
    w: Vec<f64>,
    curve: Vec<f64>,
}

/// Gradient descent with backtracking. A step that does not decrease the
/// loss is rejected and the step size halved; after `RESTORE_AFTER`
/// consecutive accepted steps the step size doubles, capped at `opt.lr`.
fn descend(
    g: &ToyGenerator,
    extractor: &FeatureExtractor,
    target_features: &[f64],
    mut w: Vec<f64>,
    opt: &ProjectOptions,
) -> Result<Run> {
    let (mut loss, mut grad) = projection_loss_grad(g, extractor, target_features, &w)?;
    if !loss.is_finite() {
        return Err(Error::numerical("non-finite projection loss at step 0"));
    }
    let mut lr = opt.lr;
    let mut streak = 0;
    let mut curve = Vec::with_capacity(opt.max_steps);
    for step in 0..opt.max_steps {
        if loss <= opt.tol || lr < MIN_STEP || norm(&grad) == 0.0 {
            break;
        }
        let cand: Vec<f64> = w.iter().zip(&grad).map(|(w, g)| w - lr * g).collect();
        let (c_loss, c_grad) = projection_loss_grad(g, extractor, target_features, &cand)?;
        if !c_loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite projection loss at step {}",
                step + 1
            )));
        }
        if c_loss < loss {
            w = cand;
            loss = c_loss;
            grad = c_grad;
            streak += 1;
            if streak == RESTORE_AFTER {
                lr = (lr * 2.0).min(opt.lr);
                streak = 0;
            }
        } else {
            lr *= 0.5;
            streak = 0;
        }
        curve.push(loss);
    }
    if curve.is_empty() {
        curve.push(loss);
    }
    Ok(Run { w, curve })
}

/// Project one target. Restart `r` starts from `mapping(z_r)` with a fresh
/// normal `z_r`; the lowest final loss wins, ties to the lowest restart.
pub fn project(
    target: &[f64],
    target_id: u32,
    class: Option<usize>,
    g: &ToyGenerator,
    extractor: &FeatureExtractor,
    opt: &ProjectOptions,
) -> Result<ProjectionResult> {
    if opt.max_steps == 0 || opt.restarts == 0 {
        return Err(Error::validation("projection needs max_steps >= 1 and restarts >= 1"));
    }
    if target.len() != g.sample_dim() {
        return Err(Error::validation(format!(
            "target has length {}, generator produces {}",
            target.len(),
            g.sample_dim()
        )));
    }
    let target_features = extractor.extract(target)?;
    let mut best: Option<(usize, Run)> = None;
    for r in 0..opt.restarts {
        let mut rng = stream(opt.seed, &[0x9e0, r as u64]);
        let z: Vec<f64> = (0..g.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let run = descend(g, extractor, &target_features, g.mapping(&z, class)?, opt)?;
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| run.curve.last() < b.curve.last());
        if better {
            best = Some((r, run));
        }
    }
    let (restart, run) = best.expect("at least one restart");
    let projected = extractor.extract(&g.synthesize(&run.w)?)?;
    let final_cosine = cosine_distance(&target_features, &projected)?;
    Ok(ProjectionResult {
        target_id,
        final_loss: *run.curve.last().unwrap(),
        steps_used: run.curve.len(),
        w_star: run.w,
        loss_curve: run.curve,
        final_cosine,
        restart,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionOutcome {
    pub target_id: u32,
    pub result: Option<ProjectionResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProjection {
    pub outcomes: Vec<ProjectionOutcome>,
    pub stats: DistanceStats,
}

impl BatchProjection {
    pub fn results(&self) -> impl Iterator<Item = &ProjectionResult> {
        self.outcomes.iter().filter_map(|o| o.result.as_ref())
    }
}

/// Project every row of `targets`. Target `i` uses seed
/// `derive_seed(opt.seed, [i])`; conditional generators receive the row's
/// label as class. Individual failures are recorded; more than half failing
/// fails the batch.
pub fn batch_project(
    targets: &EmbeddingSet,
    g: &ToyGenerator,
    extractor: &FeatureExtractor,
    opt: &ProjectOptions,
) -> Result<BatchProjection> {
    if targets.is_empty() {
        return Err(Error::validation("no projection targets"));
    }
    let outcomes: Vec<ProjectionOutcome> = (0..targets.len())
        .into_par_iter()
        .map(|i| {
            let id = targets.ids()[i];
            let class = g.is_conditional().then(|| targets.labels()[i] as usize);
            let opt_i = ProjectOptions {
                seed: derive_seed(opt.seed, &[i as u64]),
                ..opt.clone()
            };
            match project(&targets.row_f64(i), id, class, g, extractor, &opt_i) {
                Ok(r) => ProjectionOutcome {
                    target_id: id,
                    result: Some(r),
                    error: None,
                },
                Err(e) => ProjectionOutcome {
                    target_id: id,
                    result: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.result.is_none()).count();
    if 2 * failures > outcomes.len() {
        let first = outcomes.iter().find_map(|o| o.error.clone()).unwrap_or_default();
        return Err(Error::numerical(format!(
            "{failures} of {} projections failed; first error: {first}",
            outcomes.len()
        )));
    }
    let (ids, finals): (Vec<u32>, Vec<f64>) = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().map(|r| (r.target_id, r.final_cosine)))
        .unzip();
    let stats = DistanceStats::from_distances(&ids, &finals, None)?;
    Ok(BatchProjection { outcomes, stats })
}

/// `n` latent codes at exact L2 distance `radius` from `w`, in uniformly
/// random directions.
pub fn generate_neighbors(w: &[f64], n: usize, radius: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 || !(radius.is_finite() && radius > 0.0) || w.is_empty() {
        return Err(Error::validation(format!(
            "neighbors need n >= 1 and radius > 0 (got {n}, {radius})"
        )));
    }
    let mut rng = stream(seed, &[0x7e16]);
    Ok((0..n)
        .map(|_| loop {
            let dir: Vec<f64> = (0..w.len()).map(|_| rng.sample(StandardNormal)).collect();
            let len = norm(&dir);
            if len > 1e-12 {
                break w
                    .iter()
                    .zip(&dir)
                    .map(|(w, d)| w + radius * d / len)
                    .collect();
            }
        })
        .collect())
}
