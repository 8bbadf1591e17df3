//! Closed-form latent directions and w-space editing.
//!
//! Directions are the eigenvectors of `AᵀA` for the weight `A` of the first
//! synthesis layer, ordered by eigenvalue.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sym_eig, symmetrize, Matrix};
use crate::toygen::ToyGenerator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionBasis {
    /// Unit vectors in w-space; the first nonzero component is positive.
    pub directions: Vec<Vec<f64>>,
    /// Eigenvalues of `AᵀA`, descending.
    pub significances: Vec<f64>,
}

impl DirectionBasis {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

pub fn factorize(g: &ToyGenerator) -> Result<DirectionBasis> {
    factorize_weight(&g.first_synthesis_layer().weight)
}

/// Factorize a weight matrix `A` (`out × in`); the bias plays no part.
pub fn factorize_weight(a: &Matrix) -> Result<DirectionBasis> {
    if a.data.iter().all(|&v| v == 0.0) {
        return Err(Error::validation("cannot factorize an all-zero layer"));
    }
    let gram = symmetrize(a.transpose().matmul(a)?)?;
    let eig = sym_eig(&gram)?;
    Ok(DirectionBasis {
        significances: eig.values.iter().map(|v| v.max(0.0)).collect(),
        directions: eig.vectors,
    })
}

/// `w + alpha · directions[index]`
pub fn edit(w: &[f64], basis: &DirectionBasis, index: usize, alpha: f64) -> Result<Vec<f64>> {
    let dir = basis.directions.get(index).ok_or_else(|| {
        Error::validation(format!(
            "direction {index} out of range ({} directions)",
            basis.len()
        ))
    })?;
    if dir.len() != w.len() {
        return Err(Error::validation(format!(
            "latent has length {}, directions have {}",
            w.len(),
            dir.len()
        )));
    }
    Ok(w.iter().zip(dir).map(|(w, d)| w + alpha * d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub alpha: f64,
    pub sample: Vec<f64>,
}

/// Synthesize every `(index, alpha)` edit of `w`, row-major by index.
pub fn edit_sweep(
    w: &[f64],
    basis: &DirectionBasis,
    g: &ToyGenerator,
    indices: &[usize],
    alphas: &[f64],
) -> Result<Vec<SweepCell>> {
    if !alphas.contains(&0.0) {
        return Err(Error::validation("sweep alphas must include 0"));
    }
    let mut grid = Vec::with_capacity(indices.len() * alphas.len());
    for &index in indices {
        for &alpha in alphas {
            grid.push(SweepCell {
                index,
                alpha,
                sample: g.synthesize(&edit(w, basis, index, alpha)?)?,
            });
        }
    }
    Ok(grid)
}
