//! Toy style-based generator and the ground-truth data sampler.
//!
//! A generator is two small tanh networks: the mapping network sends a
//! latent `z` to an intermediate code `w`, the synthesis network sends `w` to
//! a sample. In conditional mode a per-class vector is added to `w`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingSet, PipelineConfig, Source};
use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, Mlp};
use crate::numerics::Matrix;
use crate::rng::{counter_uniform, stream};

pub const NUM_CLASSES: usize = 2;

// stream keys for weight draws
const KEY_MAPPING: u64 = 1;
const KEY_SYNTHESIS: u64 = 2;
const KEY_EMBEDDING: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGenerator {
    latent_dim: usize,
    sample_dim: usize,
    mapping: Mlp,
    synthesis: Mlp,
    class_embedding: Option<Vec<Vec<f64>>>,
    seed: u64,
}

impl ToyGenerator {
    /// Default architecture: one `latent → latent` mapping layer and two
    /// synthesis layers `latent → sample → sample`, tanh throughout.
    pub fn new(config: &PipelineConfig, conditional: bool) -> Result<Self> {
        Self::with_dims(config.latent_dim, config.sample_dim, conditional, config.seed)
    }

    pub fn with_dims(
        latent_dim: usize,
        sample_dim: usize,
        conditional: bool,
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 || sample_dim == 0 {
            return Err(Error::validation(format!(
                "generator dims must be positive (latent {latent_dim}, sample {sample_dim})"
            )));
        }
        let mapping = Mlp::new(vec![Layer::glorot(
            latent_dim,
            latent_dim,
            Activation::Tanh,
            seed,
            &[KEY_MAPPING, 0],
        )])?;
        let synthesis = Mlp::new(vec![
            Layer::glorot(latent_dim, sample_dim, Activation::Tanh, seed, &[KEY_SYNTHESIS, 0]),
            Layer::glorot(sample_dim, sample_dim, Activation::Tanh, seed, &[KEY_SYNTHESIS, 1]),
        ])?;
        let class_embedding = conditional.then(|| {
            (0..NUM_CLASSES as u64)
                .map(|c| {
                    (0..latent_dim as u64)
                        .map(|i| counter_uniform(seed, &[KEY_EMBEDDING, c], i) - 0.5)
                        .collect()
                })
                .collect()
        });
        Ok(Self {
            latent_dim,
            sample_dim,
            mapping,
            synthesis,
            class_embedding,
            seed,
        })
    }

    /// Assemble from explicit parts.
    pub fn from_parts(
        mapping: Mlp,
        synthesis: Mlp,
        class_embedding: Option<Vec<Vec<f64>>>,
        seed: u64,
    ) -> Result<Self> {
        let latent_dim = mapping.input_dim();
        if mapping.output_dim() != latent_dim {
            return Err(Error::validation(
                "mapping network must preserve the latent dimension",
            ));
        }
        if synthesis.input_dim() != latent_dim {
            return Err(Error::validation(format!(
                "synthesis expects {} inputs, latent dim is {latent_dim}",
                synthesis.input_dim()
            )));
        }
        if let Some(emb) = &class_embedding {
            if emb.len() != NUM_CLASSES || emb.iter().any(|e| e.len() != latent_dim) {
                return Err(Error::validation(format!(
                    "conditional generator needs {NUM_CLASSES} embeddings of length {latent_dim}"
                )));
            }
        }
        Ok(Self {
            latent_dim,
            sample_dim: synthesis.output_dim(),
            mapping,
            synthesis,
            class_embedding,
            seed,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn sample_dim(&self) -> usize {
        self.sample_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_conditional(&self) -> bool {
        self.class_embedding.is_some()
    }

    pub fn mapping_net(&self) -> &Mlp {
        &self.mapping
    }

    pub fn synthesis_net(&self) -> &Mlp {
        &self.synthesis
    }

    pub fn class_embedding(&self, class: usize) -> Option<&[f64]> {
        self.class_embedding
            .as_ref()
            .and_then(|e| e.get(class))
            .map(Vec::as_slice)
    }

    pub fn first_synthesis_layer(&self) -> &Layer {
        &self.synthesis.layers[0]
    }

    /// `z → w`; the class embedding is added after the mapping network.
    pub fn mapping(&self, z: &[f64], class: Option<usize>) -> Result<Vec<f64>> {
        self.mapping.check_input(z, "mapping")?;
        let mut w = self.mapping.forward(z);
        match (&self.class_embedding, class) {
            (None, None) => {}
            (Some(emb), Some(c)) => {
                let e = emb.get(c).ok_or_else(|| {
                    Error::validation(format!("class {c} out of range for {} classes", emb.len()))
                })?;
                w.iter_mut().zip(e).for_each(|(w, e)| *w += e);
            }
            (None, Some(c)) => {
                return Err(Error::validation(format!(
                    "class {c} given to an unconditional generator"
                )))
            }
            (Some(_), None) => {
                return Err(Error::validation("conditional generator needs a class id"))
            }
        }
        Ok(w)
    }

    pub fn synthesize(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.synthesis.check_input(w, "synthesize")?;
        Ok(self.synthesis.forward(w))
    }

    pub fn generate(&self, z: &[f64], class: Option<usize>) -> Result<Vec<f64>> {
        self.synthesize(&self.mapping(z, class)?)
    }

    /// Gradient of `⟨synthesize(w), cotangent⟩` with respect to `w`.
    pub fn grad_wrt_w(&self, w: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.synthesis.check_input(w, "grad_wrt_w")?;
        if cotangent.len() != self.sample_dim {
            return Err(Error::validation(format!(
                "cotangent has length {}, sample dim is {}",
                cotangent.len(),
                self.sample_dim
            )));
        }
        let trace = self.synthesis.forward_trace(w);
        Ok(self.synthesis.backward(&trace, cotangent, None))
    }

    /// Trainable parameters: mapping network followed by synthesis network.
    /// Class embeddings are fixed.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.mapping.params();
        p.extend(self.synthesis.params());
        p
    }

    pub fn param_count(&self) -> usize {
        self.mapping.param_count() + self.synthesis.param_count()
    }

    /// Copy with replaced parameters.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(Error::validation(format!(
                "generator has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::numerical("non-finite generator parameter"));
        }
        let mut g = self.clone();
        let split = self.mapping.param_count();
        g.mapping.set_params(&params[..split])?;
        g.synthesis.set_params(&params[split..])?;
        Ok(g)
    }

    /// Accumulate into `param_grad` the gradient of `⟨generate(z), cotangent⟩`
    /// with respect to [`params`](Self::params), and return the sample.
    pub(crate) fn accumulate_param_grad(
        &self,
        z: &[f64],
        cotangent: impl FnOnce(&[f64]) -> Vec<f64>,
        param_grad: &mut [f64],
    ) -> Vec<f64> {
        let map_trace = self.mapping.forward_trace(z);
        let syn_trace = self.synthesis.forward_trace(map_trace.output());
        let sample = syn_trace.output().to_vec();
        let ct = cotangent(&sample);
        let split = self.mapping.param_count();
        let (pm, ps) = param_grad.split_at_mut(split);
        let gw = self.synthesis.backward(&syn_trace, &ct, Some(ps));
        self.mapping.backward(&map_trace, &gw, Some(pm));
        sample
    }
}

/// `n` standard-normal latent vectors.
pub fn sample_latents(n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 || dim == 0 {
        return Err(Error::validation(format!(
            "latent sampling needs n >= 1 and dim >= 1 (got {n}, {dim})"
        )));
    }
    let mut rng = stream(seed, &[0x1a7e_u64]);
    Ok((0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect())
}

/// Two-class Gaussian ground truth in sample space. Class `c` draws
/// `means[c] + factors[c] · ε`, `ε ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDistribution {
    pub means: Vec<Vec<f64>>,
    pub factors: Vec<Matrix>,
    pub class_ratio: f64,
    pub seed: u64,
}

impl DataDistribution {
    pub fn new(
        means: Vec<Vec<f64>>,
        factors: Vec<Matrix>,
        class_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        if means.len() != NUM_CLASSES || factors.len() != NUM_CLASSES {
            return Err(Error::validation(format!(
                "distribution needs exactly {NUM_CLASSES} classes"
            )));
        }
        if !(class_ratio > 0.0 && class_ratio < 1.0) {
            return Err(Error::validation(format!(
                "class ratio {class_ratio} must lie in (0, 1)"
            )));
        }
        let d = means[0].len();
        for (m, f) in means.iter().zip(&factors) {
            if m.len() != d || f.rows != d || f.cols != d {
                return Err(Error::validation("distribution shapes disagree"));
            }
            let gram = f.matmul(&f.transpose())?;
            let eig = crate::numerics::sym_eig(&crate::numerics::symmetrize(gram)?)?;
            if eig.values.last().copied().unwrap_or(0.0) <= 1e-12 {
                return Err(Error::validation("covariance factor is not full rank"));
            }
        }
        Ok(Self {
            means,
            factors,
            class_ratio,
            seed,
        })
    }

    /// Reference distribution used throughout the toolkit.
    ///
    /// Benign mean in `[-0.2, 0.2]^D`; the malignant mean is shifted by 0.8
    /// along a random unit direction. Both classes share a lower-triangular
    /// factor `0.05·I + B`, where `B` has four strictly-lower columns with
    /// entries `N(0, 0.06²)`.
    pub fn standard(sample_dim: usize, class_ratio: f64, seed: u64) -> Result<Self> {
        if sample_dim == 0 {
            return Err(Error::validation("sample dim must be positive"));
        }
        let mut rng = stream(seed, &[0xda7a]);
        let benign: Vec<f64> = (0..sample_dim)
            .map(|_| 0.4 * rng.random::<f64>() - 0.2)
            .collect();
        let mut dir: Vec<f64> = (0..sample_dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::numerics::norm(&dir);
        dir.iter_mut().for_each(|v| *v /= n);
        let malignant = benign.iter().zip(&dir).map(|(m, d)| m + 0.8 * d).collect();
        let mut factor = Matrix::identity(sample_dim);
        factor.data.iter_mut().for_each(|v| *v *= 0.05);
        for j in 0..sample_dim.min(4) {
            for i in (j + 1)..sample_dim {
                let e: f64 = rng.sample(StandardNormal);
                factor.set(i, j, factor.get(i, j) + 0.06 * e);
            }
        }
        Self::new(
            vec![benign, malignant],
            vec![factor.clone(), factor],
            class_ratio,
            seed,
        )
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `(benign, malignant)` counts for `n` samples, with a warning when the
    /// minority class rounds down to zero.
    pub fn class_counts(&self, n: usize) -> (usize, usize, Option<String>) {
        let minority = (n as f64 * self.class_ratio).floor() as usize;
        let warning = (minority == 0).then(|| {
            format!(
                "n = {n} with class ratio {} yields no minority samples",
                self.class_ratio
            )
        });
        (n - minority, minority, warning)
    }

    pub fn draw(&self, class: usize, rng: &mut impl Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = self.factors[class].mul_vec(&eps);
        x.iter_mut().zip(&self.means[class]).for_each(|(x, m)| *x += m);
        x
    }

    /// Exact mixture mean and covariance.
    pub fn population_moments(&self) -> (Vec<f64>, Matrix) {
        let d = self.dim();
        let p = [1.0 - self.class_ratio, self.class_ratio];
        let mean: Vec<f64> = (0..d)
            .map(|i| p[0] * self.means[0][i] + p[1] * self.means[1][i])
            .collect();
        let mut cov = Matrix::zeros(d, d);
        for c in 0..NUM_CLASSES {
            let f = &self.factors[c];
            let ff_t = f.matmul(&f.transpose()).expect("square factor");
            for i in 0..d {
                for j in 0..d {
                    let di = self.means[c][i] - mean[i];
                    let dj = self.means[c][j] - mean[j];
                    cov.data[i * d + j] += p[c] * (ff_t.get(i, j) + di * dj);
                }
            }
        }
        (mean, cov)
    }
}

/// Draw a labelled real dataset: `floor(n·ratio)` minority samples, the rest
/// majority, in a seeded random order. Ids are `0..n`.
pub fn sample_dataset(dist: &DataDistribution, n: usize, seed: u64) -> Result<EmbeddingSet> {
    if n == 0 {
        return Err(Error::validation("dataset size must be at least 1"));
    }
    let (benign, malignant, _) = dist.class_counts(n);
    let mut labels: Vec<u8> = std::iter::repeat_n(0u8, benign)
        .chain(std::iter::repeat_n(1u8, malignant))
        .collect();
    let mut rng = stream(seed, &[0x5a3b]);
    labels.shuffle(&mut rng);
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&c| dist.draw(c as usize, &mut rng))
        .collect();
    EmbeddingSet::from_rows(&rows, labels, Source::Real)
}
