//! Per-example gradients: one gradient row per minibatch example.
//!
//! Rows are produced by independent single-example forward/backward passes
//! (the batched pass is kept as a cross-check, not the source of truth).
//! The passes run in parallel; each writes its own row, and every reduction
//! over rows is evaluated in fixed order, so results are identical to the
//! sequential computation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ndgrad::graph::{backward, forward, DropoutMode, ModelGraph, StepKey};
use crate::ndgrad::params::ParamVector;
use crate::ndgrad::tensor::Tensor;
use crate::parallel;

/// An m x P matrix of single-example gradients.
#[derive(Debug, Clone)]
pub struct PerExampleGrads {
    m: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl PerExampleGrads {
    pub fn from_rows(m: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if m < 2 {
            return Err(Error::Precondition(format!(
                "per-example gradients need a minibatch of at least 2, got {m}"
            )));
        }
        if rows.len() != m * dim {
            return Err(Error::Length {
                what: "per-example gradient matrix",
                expected: m * dim,
                got: rows.len(),
            });
        }
        Ok(PerExampleGrads { m, dim, rows })
    }

    pub fn batch_size(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.dim)
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|v| v.is_finite())
    }

    /// Row mean, accumulated in row order.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for row in self.rows() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = 1.0 / self.m as f64;
        for a in &mut acc {
            *a *= inv;
        }
        acc
    }
}

/// Computes the gradient of each example's loss separately.
///
/// Row `i` equals `backward` of a forward pass on example `i` alone, with
/// dropout masks derived from the example's row index so that batched and
/// single-example runs agree. Also returns the per-example losses.
pub fn per_example_gradients(
    model: &ModelGraph,
    params: &ParamVector,
    inputs: &Tensor,
    labels: &[usize],
    mode: DropoutMode,
    key: StepKey,
) -> Result<(PerExampleGrads, Vec<f64>)> {
    let m = inputs.outer();
    if m < 2 {
        return Err(Error::Precondition(format!(
            "per-example gradients need a minibatch of at least 2, got {m}"
        )));
    }
    if labels.len() != m {
        return Err(Error::Length {
            what: "labels",
            expected: m,
            got: labels.len(),
        });
    }
    let dim = model.param_dim();
    let mut rows = vec![0.0; m * dim];
    let mut losses = vec![0.0; m];

    parallel::install(|| {
        rows.par_chunks_exact_mut(dim)
            .zip(losses.par_iter_mut())
            .enumerate()
            .try_for_each(|(i, (row, loss))| -> Result<()> {
                let x = inputs.single(i);
                let tape = forward(
                    model,
                    params,
                    &x,
                    &labels[i..=i],
                    mode,
                    key.with_row_offset(key.row_offset + i as u64),
                )?;
                let grad = backward(&tape, params)?;
                row.copy_from_slice(grad.values());
                *loss = tape.loss();
                Ok(())
            })
    })?;

    Ok((PerExampleGrads::from_rows(m, dim, rows)?, losses))
}

/// Loss and gradient of the batched mean-loss pass. Used as the oracle for
/// [`per_example_gradients`] and as the cheap path for plain SGD training.
pub fn batch_gradient(
    model: &ModelGraph,
    params: &ParamVector,
    inputs: &Tensor,
    labels: &[usize],
    mode: DropoutMode,
    key: StepKey,
) -> Result<(f64, ParamVector)> {
    let tape = forward(model, params, inputs, labels, mode, key)?;
    let grad = backward(&tape, params)?;
    Ok((tape.loss(), grad))
}
