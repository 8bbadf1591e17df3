//! Federated training simulation: clients with unequal data train locally,
//! a server averages their parameters every `local_steps` steps.
//!
//! The generator objective is moment matching,
//! `‖μ(G(Z)) − μ̂ₖ‖² + λ‖Cov(G(Z)) − Σ̂ₖ‖²_F`, against each client's
//! empirical moments, with `Z` a fixed minibatch of latents per round.
//! Progress is measured by the same loss against the population moments of
//! the shared data distribution on a fixed evaluation batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::PipelineConfig;
use crate::error::{Error, Result, ResultExt};
use crate::numerics::{mean_cov, pairwise_sum, Matrix};
use crate::rng::derive_seed;
use crate::toygen::{sample_dataset, sample_latents, DataDistribution, ToyGenerator};

const CLIENT_DATA: u64 = 0xda7a;
const CLIENT_BATCH: u64 = 0xba7c;
const EVAL_BATCH: u64 = 0xe7a1;

/// A differentiable per-client training objective.
pub trait LocalObjective: Send + Sync {
    type Batch: Send + Sync;

    /// Data used for every step of the given round.
    fn batch(&self, round: usize) -> Self::Batch;

    fn loss_grad(&self, params: &[f64], batch: &Self::Batch) -> Result<(f64, Vec<f64>)>;
}

/// `‖θ − c‖²`
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub center: Vec<f64>,
}

impl LocalObjective for Quadratic {
    type Batch = ();

    fn batch(&self, _round: usize) {}

    fn loss_grad(&self, params: &[f64], _batch: &()) -> Result<(f64, Vec<f64>)> {
        if params.len() != self.center.len() {
            return Err(Error::validation("parameter length mismatch"));
        }
        let d: Vec<f64> = params.iter().zip(&self.center).map(|(p, c)| p - c).collect();
        let loss = pairwise_sum(&d.iter().map(|v| v * v).collect::<Vec<_>>());
        Ok((loss, d.iter().map(|v| 2.0 * v).collect()))
    }
}

/// Moment-matching loss of generator `template.with_params(params)` on the
/// latents `z`; the gradient is returned when `with_grad` is set.
pub fn moment_loss(
    template: &ToyGenerator,
    params: &[f64],
    z: &[Vec<f64>],
    target_mean: &[f64],
    target_cov: &Matrix,
    lambda: f64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let g = template.with_params(params)?;
    let b = z.len();
    if b < 2 {
        return Err(Error::validation("moment matching needs at least 2 latents"));
    }
    let d = g.sample_dim();
    if target_mean.len() != d || target_cov.rows != d || target_cov.cols != d {
        return Err(Error::validation("target moments do not match the sample dimension"));
    }
    let samples = z
        .iter()
        .map(|z| g.generate(z, None))
        .collect::<Result<Vec<_>>>()?;
    let (mean, cov) = mean_cov(&samples)?;
    let r_mean: Vec<f64> = mean.iter().zip(target_mean).map(|(a, b)| a - b).collect();
    let mut r_cov = cov.to_matrix();
    r_cov.data.iter_mut().zip(&target_cov.data).for_each(|(a, b)| *a -= b);
    let loss = pairwise_sum(&r_mean.iter().map(|v| v * v).collect::<Vec<_>>())
        + lambda * pairwise_sum(&r_cov.data.iter().map(|v| v * v).collect::<Vec<_>>());
    if !with_grad {
        return Ok((loss, None));
    }
    // dL/dx_i = 2(μ − m)/B + 4λ/(B−1) · (C − S)(x_i − μ)
    let mut grad = vec![0.0; g.param_count()];
    let cm = 4.0 * lambda / (b as f64 - 1.0);
    for (z, x) in z.iter().zip(&samples) {
        let centered: Vec<f64> = x.iter().zip(&mean).map(|(x, m)| x - m).collect();
        let rc = r_cov.mul_vec(&centered);
        g.accumulate_param_grad(
            z,
            |_| {
                r_mean
                    .iter()
                    .zip(&rc)
                    .map(|(rm, rc)| 2.0 * rm / b as f64 + cm * rc)
                    .collect()
            },
            &mut grad,
        );
    }
    Ok((loss, Some(grad)))
}

/// Moment matching against one client's empirical moments.
#[derive(Debug, Clone)]
pub struct MomentMatching {
    pub template: ToyGenerator,
    pub target_mean: Vec<f64>,
    pub target_cov: Matrix,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub client_id: usize,
}

impl LocalObjective for MomentMatching {
    type Batch = Vec<Vec<f64>>;

    fn batch(&self, round: usize) -> Vec<Vec<f64>> {
        let seed = derive_seed(self.seed, &[CLIENT_BATCH, self.client_id as u64, round as u64]);
        sample_latents(self.batch_size, self.template.latent_dim(), seed)
            .expect("batch size validated by the config")
    }

    fn loss_grad(&self, params: &[f64], batch: &Vec<Vec<f64>>) -> Result<(f64, Vec<f64>)> {
        let (loss, grad) = moment_loss(
            &self.template,
            params,
            batch,
            &self.target_mean,
            &self.target_cov,
            self.lambda,
            true,
        )?;
        Ok((loss, grad.expect("gradient requested")))
    }
}

#[derive(Debug, Clone)]
pub struct ClientState<O> {
    pub id: usize,
    pub sample_count: usize,
    pub params: Vec<f64>,
    /// Local steps taken so far.
    pub steps: usize,
    /// Completed local training rounds.
    pub round: usize,
    /// Training loss before every local step.
    pub loss_history: Vec<f64>,
    pub objective: O,
}

impl<O: LocalObjective> ClientState<O> {
    pub fn new(id: usize, sample_count: usize, params: Vec<f64>, objective: O) -> Self {
        Self {
            id,
            sample_count,
            params,
            steps: 0,
            round: 0,
            loss_history: Vec::new(),
            objective,
        }
    }
}

/// `steps` gradient-descent updates on the batch of the client's current
/// round. `steps = 0` leaves the client untouched.
pub fn local_train<O: LocalObjective>(
    mut client: ClientState<O>,
    steps: usize,
    lr: f64,
) -> Result<ClientState<O>> {
    if steps == 0 {
        return Ok(client);
    }
    let batch = client.objective.batch(client.round);
    for _ in 0..steps {
        let (loss, grad) = client.objective.loss_grad(&client.params, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical(format!(
                "client {}: non-finite loss at local step {}",
                client.id, client.steps
            )));
        }
        client.params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g);
        client.loss_history.push(loss);
        client.steps += 1;
    }
    client.round += 1;
    Ok(client)
}

/// Weighted mean `Σ nₖ·θₖ / Σ nₖ`, computed as `Σ (nₖ/N)·θₖ` with pairwise
/// sums so a single client is returned bit-for-bit.
pub fn fedavg(params: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::validation(format!(
            "fedavg needs one weight per client ({} vectors, {} weights)",
            params.len(),
            weights.len()
        )));
    }
    let len = params[0].len();
    if params.iter().any(|p| p.len() != len) {
        return Err(Error::validation("parameter vectors differ in length"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::validation("weights must be finite and non-negative"));
    }
    let total = pairwise_sum(weights);
    if total <= 0.0 {
        return Err(Error::validation("total aggregation weight is zero"));
    }
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut terms = vec![0.0; params.len()];
    Ok((0..len)
        .map(|j| {
            for (k, p) in params.iter().enumerate() {
                terms[k] = norm[k] * p[j];
            }
            pairwise_sum(&terms)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub client_sizes: Vec<usize>,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch: usize,
    pub eval_batch: usize,
    pub loss_threshold: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub sample_dim: usize,
    pub class_ratio: f64,
}

impl FedConfig {
    pub fn from_pipeline(c: &PipelineConfig) -> Self {
        Self {
            client_sizes: c.client_sizes.clone(),
            rounds: c.fed_rounds,
            local_steps: c.fed_exchange_every,
            lr: c.fed_lr,
            lambda: c.fed_lambda,
            batch: c.fed_batch,
            eval_batch: 512,
            loss_threshold: c.fed_loss_threshold,
            seed: c.seed,
            latent_dim: c.latent_dim,
            sample_dim: c.sample_dim,
            class_ratio: c.class_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(m.to_string()));
        if self.client_sizes.is_empty() || self.client_sizes.contains(&0) {
            return bad("federation needs at least one client, each with data");
        }
        if self.client_sizes.iter().any(|&n| n < 2) {
            return bad("every client needs at least 2 samples for covariance");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.batch < 2 || self.eval_batch < 2 {
            return bad("latent batches need at least 2 entries");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lr must be positive and lambda non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientTrace {
    pub id: usize,
    pub sample_count: usize,
    pub weight: f64,
    /// Training loss before every local step.
    pub train_loss: Vec<f64>,
    /// Population loss of the client's local model at the end of each
    /// round, before aggregation.
    pub local_eval_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub client: usize,
    pub isolated_steps: Option<usize>,
    pub federated_steps: Option<usize>,
    /// `None` when either run never reached the threshold.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationRun {
    pub config: FedConfig,
    /// Aggregated parameters after each round.
    pub aggregated: Vec<Vec<f64>>,
    /// Population loss of the aggregated model after each round.
    pub eval_loss: Vec<f64>,
    pub clients: Vec<ClientTrace>,
    /// Local steps until the model a client holds reaches the threshold.
    pub rounds_to_threshold: Vec<Option<usize>>,
    pub speedups: Vec<Speedup>,
}

/// Training history of one client alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolatedRun {
    pub client: usize,
    pub sample_count: usize,
    pub params: Vec<Vec<f64>>,
    pub train_loss: Vec<f64>,
    pub eval_loss: Vec<f64>,
}

struct Setup {
    template: ToyGenerator,
    pop_mean: Vec<f64>,
    pop_cov: Matrix,
    eval_z: Vec<Vec<f64>>,
}

fn setup(cfg: &FedConfig) -> Result<Setup> {
    cfg.validate()?;
    let dist = DataDistribution::standard(cfg.sample_dim, cfg.class_ratio, cfg.seed)?;
    let (pop_mean, pop_cov) = dist.population_moments();
    Ok(Setup {
        template: ToyGenerator::with_dims(cfg.latent_dim, cfg.sample_dim, false, cfg.seed)?,
        pop_mean,
        pop_cov,
        eval_z: sample_latents(cfg.eval_batch, cfg.latent_dim, derive_seed(cfg.seed, &[EVAL_BATCH]))?,
    })
}

fn client_objective(cfg: &FedConfig, s: &Setup, id: usize) -> Result<MomentMatching> {
    let dist = DataDistribution::standard(cfg.sample_dim, cfg.class_ratio, cfg.seed)?;
    let data = sample_dataset(&dist, cfg.client_sizes[id], derive_seed(cfg.seed, &[CLIENT_DATA, id as u64]))?;
    let (target_mean, cov) = mean_cov(&data.rows_f64())?;
    Ok(MomentMatching {
        template: s.template.clone(),
        target_mean,
        target_cov: cov.to_matrix(),
        lambda: cfg.lambda,
        batch_size: cfg.batch,
        seed: cfg.seed,
        client_id: id,
    })
}

fn eval(s: &Setup, cfg: &FedConfig, params: &[f64]) -> Result<f64> {
    Ok(moment_loss(&s.template, params, &s.eval_z, &s.pop_mean, &s.pop_cov, cfg.lambda, false)?.0)
}

struct Simulation {
    aggregated: Vec<Vec<f64>>,
    eval_loss: Vec<f64>,
    clients: Vec<ClientTrace>,
}

/// Synchronous rounds over the given client ids: local training in
/// parallel, then FedAvg and broadcast.
fn simulate(cfg: &FedConfig, ids: &[usize]) -> Result<Simulation> {
    let s = setup(cfg)?;
    let init = s.template.params();
    let mut clients = ids
        .iter()
        .map(|&id| Ok(ClientState::new(id, cfg.client_sizes[id], init.clone(), client_objective(cfg, &s, id)?)))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = clients.iter().map(|c| c.sample_count as f64).collect();
    let total = pairwise_sum(&weights);
    let mut traces: Vec<ClientTrace> = clients
        .iter()
        .map(|c| ClientTrace {
            id: c.id,
            sample_count: c.sample_count,
            weight: c.sample_count as f64 / total,
            train_loss: Vec::new(),
            local_eval_loss: Vec::new(),
        })
        .collect();
    let mut aggregated = Vec::with_capacity(cfg.rounds);
    let mut eval_loss = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        clients = clients
            .into_par_iter()
            .map(|c| local_train(c, cfg.local_steps, cfg.lr))
            .collect::<Result<Vec<_>>>()
            .context(format!("round {round}"))?;
        for (c, t) in clients.iter().zip(&mut traces) {
            t.local_eval_loss.push(eval(&s, cfg, &c.params)?);
        }
        let locals: Vec<Vec<f64>> = clients.iter().map(|c| c.params.clone()).collect();
        let global = fedavg(&locals, &weights)?;
        let loss = eval(&s, cfg, &global)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("round {round}: non-finite aggregated loss")));
        }
        for c in &mut clients {
            c.params.clone_from(&global);
        }
        aggregated.push(global);
        eval_loss.push(loss);
    }
    for (c, t) in clients.into_iter().zip(&mut traces) {
        t.train_loss = c.loss_history;
    }
    Ok(Simulation {
        aggregated,
        eval_loss,
        clients: traces,
    })
}

/// Local steps until the first round whose loss is at or below `threshold`.
pub fn steps_to_threshold(round_losses: &[f64], local_steps: usize, threshold: f64) -> Option<usize> {
    round_losses
        .iter()
        .position(|&l| l <= threshold)
        .map(|r| (r + 1) * local_steps)
}

/// `isolated / federated` steps, `None` unless both reached the threshold.
pub fn speedup_ratio(isolated_steps: Option<usize>, federated_steps: Option<usize>) -> Option<f64> {
    match (isolated_steps, federated_steps) {
        (Some(i), Some(f)) if f > 0 => Some(i as f64 / f as f64),
        _ => None,
    }
}

pub fn speedup(fed: &FederationRun, isolated: &IsolatedRun, client: usize, threshold: f64) -> Speedup {
    let steps = fed.config.local_steps;
    let isolated_steps = steps_to_threshold(&isolated.eval_loss, steps, threshold);
    let federated_steps = steps_to_threshold(&fed.eval_loss, steps, threshold);
    Speedup {
        client,
        isolated_steps,
        federated_steps,
        ratio: speedup_ratio(isolated_steps, federated_steps),
    }
}

/// Federated run alone, without isolated baselines.
pub fn run_federation_only(cfg: &FedConfig) -> Result<FederationRun> {
    let ids: Vec<usize> = (0..cfg.client_sizes.len()).collect();
    let sim = simulate(cfg, &ids)?;
    let reached = steps_to_threshold(&sim.eval_loss, cfg.local_steps, cfg.loss_threshold);
    Ok(FederationRun {
        config: cfg.clone(),
        aggregated: sim.aggregated,
        eval_loss: sim.eval_loss,
        rounds_to_threshold: vec![reached; ids.len()],
        clients: sim.clients,
        speedups: Vec::new(),
    })
}

/// Federated run plus an isolated baseline and speedup for every client.
pub fn run_federation(cfg: &FedConfig) -> Result<FederationRun> {
    let mut run = run_federation_only(cfg)?;
    run.speedups = (0..cfg.client_sizes.len())
        .map(|id| Ok(speedup(&run, &run_isolated(cfg, id)?, id, cfg.loss_threshold)))
        .collect::<Result<Vec<_>>>()?;
    Ok(run)
}

/// Client `client` of `cfg` training alone, with the same data, latent
/// batches and initialization it gets inside the federation.
pub fn run_isolated(cfg: &FedConfig, client: usize) -> Result<IsolatedRun> {
    if client >= cfg.client_sizes.len() {
        return Err(Error::validation(format!(
            "client {client} does not exist ({} clients)",
            cfg.client_sizes.len()
        )));
    }
    let sim = simulate(cfg, &[client])?;
    let trace = sim.clients.into_iter().next().expect("one client");
    Ok(IsolatedRun {
        client,
        sample_count: trace.sample_count,
        params: sim.aggregated,
        train_loss: trace.train_loss,
        eval_loss: sim.eval_loss,
    })
}
