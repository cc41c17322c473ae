//! Finite-difference verification of reverse-mode gradients.

use rand::Rng as _;

use serde::{Deserialize, Serialize};

use super::params::Model;
use super::train::{alignment_batch_loss, contrastive_batch_loss, AlignmentExample, PairInput};
use crate::error::{Error, Result};
use crate::seed;

pub const FD_STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / REL_FLOOR.max(a.abs() + b.abs())
}

/// Compares the gradient returned by `loss_and_grad` at `theta` against central
/// differences with step [`FD_STEP`] on `n_probes` coordinates drawn uniformly
/// with `seed`, returning the largest relative error.
pub fn gradient_check<F>(theta: &[f64], loss_and_grad: F, n_probes: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if theta.is_empty() {
        return Err(Error::invalid("gradient check of an empty parameter vector"));
    }
    let (loss, grad) = loss_and_grad(theta)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    if grad.len() != theta.len() {
        return Err(Error::Shape(format!("gradient has {} entries for {} parameters", grad.len(), theta.len())));
    }
    let mut rng = seed::derived_rng(seed, "gradcheck");
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let k = rng.gen_range(0..theta.len());
        probe[k] = theta[k] + FD_STEP;
        let (plus, _) = loss_and_grad(&probe)?;
        probe[k] = theta[k] - FD_STEP;
        let (minus, _) = loss_and_grad(&probe)?;
        probe[k] = theta[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss near coordinate {k}")));
        }
        let fd = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grad[k], fd));
    }
    Ok(worst)
}

/// Worst relative errors of both training losses at a model's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelGradCheck {
    pub contrastive: f64,
    pub alignment: f64,
}

/// Runs [`gradient_check`] on the contrastive loss of `batch` and the alignment
/// loss of `examples`, both evaluated at `model`'s parameters.
pub fn check_model_gradients(
    model: &Model,
    batch: &[PairInput],
    examples: &[AlignmentExample],
    n_probes: usize,
    seed: u64,
) -> Result<ModelGradCheck> {
    let cfg = &model.config;
    let theta = model.params.flat();
    let at = |t: &[f64]| -> Result<super::params::ModelParams> {
        let mut p = model.params.clone();
        p.set_flat(t)?;
        Ok(p)
    };
    let contrastive = gradient_check(
        &theta,
        |t| {
            let (l, g) = contrastive_batch_loss(&at(t)?, cfg, batch, true)?;
            Ok((l, g.expect("gradient requested")))
        },
        n_probes,
        seed,
    )?;
    let alignment = gradient_check(
        &theta,
        |t| {
            let (l, g) = alignment_batch_loss(&at(t)?, cfg, examples, true)?;
            Ok((l, g.expect("gradient requested")))
        },
        n_probes,
        seed,
    )?;
    Ok(ModelGradCheck { contrastive, alignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta: Vec<f64> = (0..50).map(|k| (k as f64 - 25.0) / 7.0).collect();
        let f = |t: &[f64]| Ok((t.iter().map(|v| v * v).sum(), t.iter().map(|v| 2.0 * v).collect()));
        assert!(gradient_check(&theta, f, 20, 1).unwrap() < 1e-9);
    }

    #[test]
    fn zero_gradient_uses_floor() {
        let f = |_: &[f64]| Ok((1.0, vec![0.0; 3]));
        assert_eq!(gradient_check(&[1.0, 2.0, 3.0], f, 5, 1).unwrap(), 0.0);
        assert!((relative_error(0.0, 1e-12) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |t: &[f64]| Ok((t.iter().map(|v| v * v).sum(), t.to_vec()));
        assert!(gradient_check(&[1.0, -2.0], f, 4, 3).unwrap() > 0.1);
    }

    #[test]
    fn non_finite_loss_errors() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(gradient_check(&[1.0], f, 1, 0).is_err());
    }
}
