//! Fusion of model-based and learned overlap estimates, and the
//! physics-informed loss built on it.

use crate::error::{Error, Result};
use crate::grid::OverlapSelector;
use crate::nn::gradcheck::{Evaluation, Objective};
use crate::nn::{mse_with_grad, Masks, NetworkModel, Tensor2};

/// Model-based and learned estimates on the overlap states, their mean and
/// difference.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionRecord {
    pub x_hat_m: Vec<f64>,
    pub x_hat_d_star: Vec<f64>,
    pub x_hat_o: Vec<f64>,
    pub diff: Vec<f64>,
}

pub fn fuse(x_hat_m: &[f64], x_hat_d_star: &[f64]) -> Result<FusionRecord> {
    if x_hat_m.len() != x_hat_d_star.len() {
        return Err(Error::Shape(format!(
            "{} model-based and {} learned overlap values",
            x_hat_m.len(),
            x_hat_d_star.len()
        )));
    }
    Ok(FusionRecord {
        x_hat_m: x_hat_m.to_vec(),
        x_hat_d_star: x_hat_d_star.to_vec(),
        x_hat_o: x_hat_m.iter().zip(x_hat_d_star).map(|(m, d)| (m + d) / 2.0).collect(),
        diff: x_hat_m.iter().zip(x_hat_d_star).map(|(m, d)| m - d).collect(),
    })
}

/// Selects the overlap rows of one sample's `(L, P, T)` output.
pub fn select_overlap(sample: &[f64], selector: &OverlapSelector, row_len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(selector.len() * row_len);
    for pos in selector.positions() {
        let row = sample
            .get(pos * row_len..(pos + 1) * row_len)
            .ok_or_else(|| Error::Shape(format!("overlap row {pos} outside the output")))?;
        out.extend_from_slice(row);
    }
    Ok(out)
}

/// Batch loss `MSE(x − x̂ᴰ) + MSE(diff ⊙ (xᴼ − x̂ᴼ))` and its gradient with
/// respect to the network output. `x_hat_m` holds one `(O, P, T)` block per
/// sample and is a constant.
///
/// With an empty selector the second term is absent and the result is
/// exactly the plain MSE.
pub fn pinn_loss(
    x_hat_d: &Tensor2,
    x_true: &[f64],
    x_hat_m: &[&[f64]],
    selector: &OverlapSelector,
    row_len: usize,
) -> Result<(f64, Tensor2)> {
    let (mut loss, mut grad) = mse_with_grad(x_hat_d, x_true)?;
    if selector.is_empty() {
        return Ok((loss, grad));
    }
    let batch = x_hat_m.len();
    let per_sample = x_hat_d.as_slice().len() / batch.max(1);
    if batch == 0 || per_sample * batch != x_hat_d.as_slice().len() {
        return Err(Error::Shape("model-based estimates do not match the batch".into()));
    }
    let overlap_len = selector.len() * row_len;
    let count = (batch * overlap_len) as f64;
    let mut physics = 0.0;
    for (b, m) in x_hat_m.iter().enumerate() {
        if m.len() != overlap_len {
            return Err(Error::Shape(format!("sample {b}: {} model-based values, expected {overlap_len}", m.len())));
        }
        let base = b * per_sample;
        for (o, pos) in selector.positions().enumerate() {
            let start = base + pos * row_len;
            if pos * row_len + row_len > per_sample {
                return Err(Error::Shape(format!("overlap row {pos} outside the output")));
            }
            for j in 0..row_len {
                let d = x_hat_d.as_slice()[start + j];
                let mv = m[o * row_len + j];
                let xo = x_true[start + j];
                let diff = mv - d;
                let err = xo - (mv + d) / 2.0;
                let r = diff * err;
                physics += r * r;
                grad.as_mut_slice()[start + j] += 2.0 * r * (-err - diff / 2.0) / count;
            }
        }
    }
    loss += physics / count;
    Ok((loss, grad))
}

/// Full physics-informed objective on a fixed batch, dropout frozen.
pub struct PinnObjective {
    pub input: Tensor2,
    pub target: Vec<f64>,
    pub x_hat_m: Vec<Vec<f64>>,
    pub selector: OverlapSelector,
    pub row_len: usize,
    pub masks: Vec<Vec<f64>>,
}

impl Objective for PinnObjective {
    fn evaluate(&self, model: &NetworkModel, with_grad: bool) -> Result<Evaluation> {
        let masks = if self.masks.is_empty() { Masks::Off } else { Masks::Fixed(&self.masks) };
        let (out, tape) = model.forward(&self.input, masks)?;
        let m: Vec<&[f64]> = self.x_hat_m.iter().map(Vec::as_slice).collect();
        let (loss, g) = pinn_loss(&out, &self.target, &m, &self.selector, self.row_len)?;
        let grad = if with_grad { model.backward(&tape, &g)? } else { Vec::new() };
        Ok(Evaluation { loss, grad, pattern: tape.activation_pattern(model) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_topology, normalized_adjacency, overlap_selector, synthetic, BranchSpec, TopologySpec};
    use crate::nn::gradcheck::relative_error;
    use crate::nn::{build_layers, grad_check, ArchConfig, Variant};
    use crate::seeds::{self, stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor2 {
        Tensor2::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn selector(overlap: &[usize]) -> OverlapSelector {
        let g = build_topology(&synthetic::five_bus()).unwrap().with_overlap(overlap).unwrap();
        overlap_selector(&g).unwrap()
    }

    #[test]
    fn fuse_examples() {
        let f = fuse(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(f.diff, vec![0.0, 0.0]);
        assert_eq!(f.x_hat_o, vec![1.0, 2.0]);
        let f = fuse(&[1.0], &[0.9]).unwrap();
        assert!((f.x_hat_o[0] - 0.95).abs() < 1e-15 && (f.diff[0] - 0.1).abs() < 1e-15);
        let f = fuse(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!((f.x_hat_o, f.diff), (vec![2.0; 3], vec![-2.0, 0.0, 2.0]));
        assert!(fuse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn scalar_loss_example() {
        let g = build_topology(&TopologySpec {
            bus_count: 2,
            branches: vec![BranchSpec { from: 0, to: 1, r_ohm: 0.01, l_henry: 1e-4 }],
            sources: vec![0],
            loads: vec![1],
            overlap: vec![1],
        })
        .unwrap();
        let sel = overlap_selector(&g).unwrap();
        let (loss, grad) = pinn_loss(&t(1, 1, &[0.8]), &[1.0], &[&[1.0]], &sel, 1).unwrap();
        assert!((loss - 0.0404).abs() < 1e-15, "{loss}");
        let eps = 1e-6;
        let f = |d: f64| pinn_loss(&t(1, 1, &[d]), &[1.0], &[&[1.0]], &sel, 1).unwrap().0;
        let numeric = (f(0.8 + eps) - f(0.8 - eps)) / (2.0 * eps);
        assert!((grad.as_slice()[0] - numeric).abs() < 1e-9);
    }

    #[test]
    fn vanishing_diff_reduces_to_mse() {
        let sel = selector(&[2, 3]);
        let out = t(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let truth = [1.5, 2.0, 2.0, 4.5, 5.0, 6.5, 7.0, 8.0];
        // model-based equals the learned overlap rows 1 and 2
        let m = [3.0, 4.0, 5.0, 6.0];
        let (loss, grad) = pinn_loss(&out, &truth, &[&m], &sel, 2).unwrap();
        let (mse, mse_grad) = mse_with_grad(&out, &truth).unwrap();
        assert_eq!(loss, mse);
        assert_eq!(grad, mse_grad);
        // perfect estimator
        let (zero, _) = pinn_loss(&out, out.as_slice(), &[&m], &sel, 2).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn empty_overlap_is_plain_mse() {
        let sel = selector(&[]);
        let out = t(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let truth = [0.0, 0.5, 1.0, 0.2];
        assert_eq!(pinn_loss(&out, &truth, &[&[]], &sel, 2).unwrap(), mse_with_grad(&out, &truth).unwrap());
    }

    fn pinn_objective(seed: u64, dropout: bool) -> (NetworkModel, PinnObjective) {
        let g = build_topology(&synthetic::five_bus()).unwrap();
        let arch = ArchConfig { hidden: [6, 6, 5], final_dense: true, dropout_rate: if dropout { 0.2 } else { 0.0 } };
        let row_len = 3;
        let m = NetworkModel::new(
            build_layers(Variant::Pinn, 4, row_len, &arch),
            normalized_adjacency(&g),
            vec![1, 2, 3, 4],
            seed,
        )
        .unwrap();
        let mut rng = seeds::rng_from(seed ^ 0xabc);
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let input = t(10, 4, &r(40));
        let target = r(2 * 4 * row_len);
        let x_hat_m = vec![r(2 * row_len), r(2 * row_len)];
        let masks = if dropout {
            let mut d = seeds::rng(seed, stream::DROPOUT, 0);
            m.forward(&input, Masks::Draw(&mut d)).unwrap().1.masks
        } else {
            Vec::new()
        };
        let obj = PinnObjective { input, target, x_hat_m, selector: selector(&[2, 3]), row_len, masks };
        (m, obj)
    }

    #[test]
    fn smaller_step_reduces_truncation_error() {
        let (m, mut obj) = pinn_objective(3, false);
        // widen the model/learned gap so the quartic term carries curvature
        obj.x_hat_m.iter_mut().flatten().for_each(|v| *v *= 3.0);
        let base = obj.evaluate(&m, true).unwrap();
        let (i, &g) = base.grad.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
        let error = |eps: f64| {
            let mut p = m.flat_params();
            let mut probe = m.clone();
            p[i] += eps;
            probe.set_flat_params(&p).unwrap();
            let plus = obj.evaluate(&probe, false).unwrap().loss;
            p[i] -= 2.0 * eps;
            probe.set_flat_params(&p).unwrap();
            let minus = obj.evaluate(&probe, false).unwrap().loss;
            relative_error(g, (plus - minus) / (2.0 * eps))
        };
        let (coarse, fine) = (error(1e-3), error(1e-5));
        assert!(fine < coarse / 100.0, "{coarse} vs {fine}");
        assert!(fine < 1e-5, "{fine}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn pinn_loss_gradient_passes_check(seed in any::<u64>(), dropout in any::<bool>()) {
            let (m, obj) = pinn_objective(seed, dropout);
            let r = grad_check(&m, &obj, 1e-5, 200, seed).unwrap();
            prop_assert!(r.max_rel_error < 1e-5, "{:?}", r);
        }

        #[test]
        fn physics_term_never_lowers_the_loss(vals in proptest::collection::vec(-2.0f64..2.0, 24)) {
            let sel = selector(&[1, 4]);
            let out = t(4, 2, &vals[..8]);
            let truth = &vals[8..16];
            let m = &vals[16..20];
            let (loss, _) = pinn_loss(&out, truth, &[m], &sel, 2).unwrap();
            let (mse, _) = mse_with_grad(&out, truth).unwrap();
            prop_assert!(loss >= mse);
        }
    }
}
