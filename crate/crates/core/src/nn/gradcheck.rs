//! Central finite-difference check of analytic parameter gradients.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::network::{mse_with_grad, Masks, NetworkModel};
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::seeds::{self, stream};

/// Denominator floor of the relative error, so vanishing gradients compare
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub struct Evaluation {
    pub loss: f64,
    /// Empty unless requested.
    pub grad: Vec<f64>,
    /// ReLU input signs; a change between `±ε` means the difference straddles
    /// a kink and the coordinate is skipped.
    pub pattern: Vec<bool>,
}

pub trait Objective {
    fn evaluate(&self, model: &NetworkModel, with_grad: bool) -> Result<Evaluation>;
}

/// Plain MSE against a target with dropout masks frozen at construction.
pub struct MseObjective {
    pub input: Tensor2,
    pub target: Vec<f64>,
    pub masks: Vec<Vec<f64>>,
}

impl MseObjective {
    pub fn new(model: &NetworkModel, input: Tensor2, target: Vec<f64>, dropout: Option<&mut ChaCha8Rng>) -> Result<Self> {
        let masks = match dropout {
            Some(rng) => model.forward(&input, Masks::Draw(rng))?.1.masks,
            None => vec![Vec::new(); model.layers().len()],
        };
        Ok(Self { input, target, masks })
    }
}

impl Objective for MseObjective {
    fn evaluate(&self, model: &NetworkModel, with_grad: bool) -> Result<Evaluation> {
        let (out, tape) = model.forward(&self.input, Masks::Fixed(&self.masks))?;
        let (loss, g) = mse_with_grad(&out, &self.target)?;
        let grad = if with_grad { model.backward(&tape, &g)? } else { Vec::new() };
        Ok(Evaluation { loss, grad, pattern: tape.activation_pattern(model) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose `±ε` evaluations crossed a ReLU kink.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients with central differences on `coords` random
/// parameters (all of them if the model is smaller).
pub fn grad_check(
    model: &NetworkModel,
    objective: &dyn Objective,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let base = objective.evaluate(model, true)?;
    let params = model.flat_params();
    let n = params.len();
    let mut rng = seeds::rng(seed, stream::GRADCHECK, 0);
    let mut picks = sample(&mut rng, n, coords.min(n)).into_vec();
    picks.sort_unstable();
    let mut probe = model.clone();
    let mut shifted = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None, checked: 0, skipped: 0 };
    for i in picks {
        shifted[i] = params[i] + epsilon;
        probe.set_flat_params(&shifted)?;
        let plus = objective.evaluate(&probe, false)?;
        shifted[i] = params[i] - epsilon;
        probe.set_flat_params(&shifted)?;
        let minus = objective.evaluate(&probe, false)?;
        shifted[i] = params[i];
        if plus.pattern != minus.pattern || plus.pattern != base.pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * epsilon);
        let err = relative_error(base.grad[i], numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of parameter {i}")));
        }
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
