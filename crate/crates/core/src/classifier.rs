//! Predictive-performance harness: a one-hidden-layer classifier, ranking
//! and confusion metrics, and the real / synthetic / augmented scenario
//! table.

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingSet, PipelineConfig, Source};
use crate::error::{Error, Result, ResultExt};
use crate::nn::{Activation, Layer, Mlp};
use crate::rng::{derive_seed, mix64, stream};
use crate::toygen::{sample_latents, ToyGenerator};

pub const HIDDEN_WIDTH: usize = 16;
const RMS_DECAY: f64 = 0.99;
const RMS_FLOOR: f64 = 1e-8;

/// Reference volumes of the synthetic-only training set; the configured
/// scale factor maps them to the run size.
pub const SYNTH_REFERENCE: f64 = 55_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainParams {
    pub fn from_pipeline(c: &PipelineConfig) -> Self {
        Self {
            lr: c.lr,
            max_epochs: c.max_epochs,
            patience: c.patience,
            batch_size: c.batch_size,
            seed: c.seed,
        }
    }
}

impl Default for TrainParams {
    fn default() -> Self {
        Self::from_pipeline(&PipelineConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    /// tanh hidden layer followed by a linear logit head.
    pub net: Mlp,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose weights `net` holds.
    pub best_epoch: usize,
}

impl ClassifierModel {
    pub fn hidden_layer(&self) -> &Layer {
        &self.net.layers[0]
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }
}

/// Untrained network with Glorot weights.
pub fn init_network(input_dim: usize, seed: u64) -> Result<Mlp> {
    Mlp::new(vec![
        Layer::glorot(input_dim, HIDDEN_WIDTH, Activation::Tanh, seed, &[0xc1, 0]),
        Layer::glorot(HIDDEN_WIDTH, 1, Activation::Identity, seed, &[0xc1, 1]),
    ])
}

/// Tracks validation loss and signals a stop after `patience` epochs
/// without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record `loss` for `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn check_rows(net: &Mlp, rows: &[Vec<f64>], labels: Option<&[u8]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != rows.len() {
            return Err(Error::validation("row and label counts differ"));
        }
    }
    rows.iter().try_for_each(|r| net.check_input(r, "classifier input"))
}

/// Mean logistic loss and its gradient with respect to `net.params()`.
pub fn logistic_loss_grad(net: &Mlp, rows: &[Vec<f64>], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    check_rows(net, rows, Some(labels))?;
    if rows.is_empty() {
        return Err(Error::validation("empty training batch"));
    }
    let n = rows.len() as f64;
    let mut grad = vec![0.0; net.param_count()];
    let mut losses = Vec::with_capacity(rows.len());
    for (x, &y) in rows.iter().zip(labels) {
        let trace = net.forward_trace(x);
        let s = trace.output()[0];
        let y = y as f64;
        losses.push(softplus(s) - y * s);
        net.backward(&trace, &[(sigmoid(s) - y) / n], Some(&mut grad));
    }
    Ok((crate::numerics::pairwise_sum(&losses) / n, grad))
}

pub fn logistic_loss(net: &Mlp, rows: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    check_rows(net, rows, Some(labels))?;
    let losses: Vec<f64> = rows
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let s = net.forward(x)[0];
            softplus(s) - y as f64 * s
        })
        .collect();
    Ok(crate::numerics::pairwise_sum(&losses) / rows.len() as f64)
}

/// RMS-scaled minibatch descent on the mean logistic loss, with early
/// stopping on validation loss. Minibatch order comes from a stream keyed by
/// `(seed, epoch)`, so training is deterministic.
pub fn train(train_set: &EmbeddingSet, val_set: &EmbeddingSet, hp: &TrainParams) -> Result<ClassifierModel> {
    if train_set.class_count(0) == 0 || train_set.class_count(1) == 0 {
        return Err(Error::validation("training set must contain both classes"));
    }
    if val_set.is_empty() {
        return Err(Error::validation("validation set is empty"));
    }
    if val_set.dim() != train_set.dim() {
        return Err(Error::validation(format!(
            "validation dim {} differs from training dim {}",
            val_set.dim(),
            train_set.dim()
        )));
    }
    if hp.max_epochs == 0 || hp.batch_size == 0 || hp.patience == 0 {
        return Err(Error::validation("max_epochs, batch_size and patience must be positive"));
    }
    let rows = train_set.rows_f64();
    let labels = train_set.labels();
    let val_rows = val_set.rows_f64();
    let mut net = init_network(train_set.dim(), hp.seed)?;
    let mut params = net.params();
    let mut sq = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut stopper = EarlyStopping::new(hp.patience);
    let mut best = net.clone();
    let mut log = Vec::new();
    for epoch in 1..=hp.max_epochs {
        let mut rng = stream(hp.seed, &[0xc1, 2, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let by: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, g) = logistic_loss_grad(&net, &bx, &by)?;
            for ((p, s), g) in params.iter_mut().zip(&mut sq).zip(&g) {
                *s = RMS_DECAY * *s + (1.0 - RMS_DECAY) * g * g;
                *p -= hp.lr * g / (s.sqrt() + RMS_FLOOR);
            }
            net.set_params(&params)?;
        }
        let train_loss = logistic_loss(&net, &rows, labels)?;
        let val_loss = logistic_loss(&net, &val_rows, val_set.labels())?;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::numerical(format!("non-finite classifier loss at epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = net.clone();
        }
        if stop {
            break;
        }
    }
    Ok(ClassifierModel {
        net: best,
        log,
        best_epoch: stopper.best_epoch,
    })
}

pub fn logits(model: &ClassifierModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_rows(&model.net, rows, None)?;
    Ok(rows.iter().map(|x| model.net.forward(x)[0]).collect())
}

/// Class-1 probability per row.
pub fn predict_proba(model: &ClassifierModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(logits(model, rows)?.into_iter().map(sigmoid).collect())
}

/// Hidden-layer activations per row.
pub fn extract_embeddings(model: &ClassifierModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_rows(&model.net, rows, None)?;
    Ok(rows.iter().map(|x| model.hidden_layer().forward(x)).collect())
}

/// Area under the ROC curve as the Mann–Whitney statistic with midranks,
/// so tied scores count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::validation("score and label counts differ"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("AUC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share (i + j + 2) / 2
        let count = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank2_pos += count * (i + j + 2) as u64;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsMetrics {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Confusion metrics for class-1 probabilities; a sample is predicted
/// positive when its score is at least `threshold`.
pub fn metrics_from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClsMetrics> {
    if scores.is_empty() {
        return Err(Error::validation("empty test set"));
    }
    let auc = auc(scores, labels)?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ClsMetrics {
        acc: ratio(tp + tn, scores.len()),
        auc,
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        tp,
        tn,
        fp,
        fn_,
    })
}

pub fn evaluate(model: &ClassifierModel, test: &EmbeddingSet, threshold: f64) -> Result<ClsMetrics> {
    let scores = predict_proba(model, &test.rows_f64())?;
    metrics_from_scores(&scores, test.labels(), threshold)
}

/// Anything that can produce labelled synthetic samples.
pub trait SyntheticSource: Sync {
    fn sample_dim(&self) -> usize;
    fn generate(&self, class: u8, n: usize, seed: u64) -> Result<Vec<Vec<f64>>>;
}

/// Draws real rows of the requested class uniformly with replacement.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    dim: usize,
    by_class: [Vec<Vec<f64>>; 2],
}

impl ReplaySource {
    pub fn new(real: &EmbeddingSet) -> Self {
        let mut by_class = [Vec::new(), Vec::new()];
        for i in 0..real.len() {
            by_class[real.labels()[i] as usize].push(real.row_f64(i));
        }
        Self {
            dim: real.dim(),
            by_class,
        }
    }
}

impl SyntheticSource for ReplaySource {
    fn sample_dim(&self) -> usize {
        self.dim
    }

    fn generate(&self, class: u8, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let pool = self
            .by_class
            .get(class as usize)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::validation(format!("no real samples of class {class} to replay")))?;
        let mut rng = stream(seed, &[0x4e, class as u64]);
        Ok((0..n)
            .map(|_| pool.choose(&mut rng).expect("non-empty").clone())
            .collect())
    }
}

/// One unconditional generator per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGenerators {
    pub generators: [ToyGenerator; 2],
}

impl SyntheticSource for ClassGenerators {
    fn sample_dim(&self) -> usize {
        self.generators[0].sample_dim()
    }

    fn generate(&self, class: u8, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let g = self
            .generators
            .get(class as usize)
            .ok_or_else(|| Error::validation(format!("class {class} out of range")))?;
        if n == 0 {
            return Ok(Vec::new());
        }
        sample_latents(n, g.latent_dim(), derive_seed(seed, &[class as u64]))?
            .iter()
            .map(|z| g.generate(z, None))
            .collect()
    }
}

/// A conditional generator; the class selects its embedding.
impl SyntheticSource for ToyGenerator {
    fn sample_dim(&self) -> usize {
        ToyGenerator::sample_dim(self)
    }

    fn generate(&self, class: u8, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        sample_latents(n, self.latent_dim(), derive_seed(seed, &[class as u64]))?
            .iter()
            .map(|z| ToyGenerator::generate(self, z, Some(class as usize)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub name: String,
    pub train_benign: usize,
    pub train_malignant: usize,
    pub validation_size: usize,
    pub validation_fingerprint: String,
    pub best_epoch: usize,
    pub metrics: ClsMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTable {
    pub synth_scale: f64,
    pub rows: Vec<ScenarioRow>,
}

/// Order-sensitive digest of a set's ids, labels and values.
pub fn fingerprint(set: &EmbeddingSet) -> String {
    let mut h = mix64(set.len() as u64 ^ ((set.dim() as u64) << 32));
    for i in 0..set.len() {
        h = mix64(h ^ set.ids()[i] as u64 ^ ((set.labels()[i] as u64) << 40));
        for v in set.row(i) {
            h = mix64(h ^ v.to_bits() as u64);
        }
    }
    format!("{h:016x}")
}

fn synthetic_set(rows: Vec<Vec<f64>>, labels: Vec<u8>, dim: usize) -> Result<EmbeddingSet> {
    if rows.is_empty() {
        return EmbeddingSet::empty(dim, Source::Synthetic);
    }
    EmbeddingSet::from_rows(&rows, labels, Source::Synthetic)
}

/// Training sets for the three rows: real only, balanced synthetic of
/// `round(55000·scale)` samples, and real plus synthetic minority samples
/// up to the majority count.
pub fn scenario_training_sets(
    real_train: &EmbeddingSet,
    source: &dyn SyntheticSource,
    synth_scale: f64,
    seed: u64,
) -> Result<Vec<(&'static str, EmbeddingSet)>> {
    if source.sample_dim() != real_train.dim() {
        return Err(Error::validation(format!(
            "synthetic samples have dim {}, real data {}",
            source.sample_dim(),
            real_train.dim()
        )));
    }
    if !(synth_scale.is_finite() && synth_scale > 0.0) {
        return Err(Error::validation("synth_scale must be positive"));
    }
    let dim = real_train.dim();
    let half = ((SYNTH_REFERENCE * synth_scale).round() as usize / 2).max(1);
    let mut rows = source.generate(0, half, derive_seed(seed, &[1]))?;
    rows.extend(source.generate(1, half, derive_seed(seed, &[1]))?);
    let labels = [vec![0u8; half], vec![1u8; half]].concat();
    let synth = synthetic_set(rows, labels, dim)?;

    let counts = [real_train.class_count(0), real_train.class_count(1)];
    let minority = if counts[1] <= counts[0] { 1u8 } else { 0u8 };
    let deficit = counts[1 - minority as usize] - counts[minority as usize];
    let extra = source.generate(minority, deficit, derive_seed(seed, &[2]))?;
    let aug = real_train.concat(&synthetic_set(extra, vec![minority; deficit], dim)?)?;
    Ok(vec![("baseline", real_train.clone()), ("synth", synth), ("aug", aug)])
}

/// Train and evaluate the baseline, synth and aug rows, all on `real_val`.
pub fn run_scenarios(
    real_train: &EmbeddingSet,
    real_val: &EmbeddingSet,
    source: &dyn SyntheticSource,
    hp: &TrainParams,
    synth_scale: f64,
) -> Result<ScenarioTable> {
    let sets = scenario_training_sets(real_train, source, synth_scale, hp.seed)?;
    let print = fingerprint(real_val);
    let rows = sets
        .par_iter()
        .map(|(name, set)| {
            let model = train(set, real_val, hp).context(format!("scenario {name}"))?;
            Ok(ScenarioRow {
                name: name.to_string(),
                train_benign: set.class_count(0),
                train_malignant: set.class_count(1),
                validation_size: real_val.len(),
                validation_fingerprint: print.clone(),
                best_epoch: model.best_epoch,
                metrics: evaluate(&model, real_val, 0.5)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioTable { synth_scale, rows })
}
