//! Seeded gradient-check suite over every layer kind and both losses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::fusion::PinnObjective;
use crate::error::Result;
use crate::grid::{build_topology, normalized_adjacency, overlap_selector, synthetic, NormalizedAdjacency};
use crate::nn::{build_layers, grad_check, ArchConfig, GradCheckReport, Masks, MseObjective, NetworkModel, Tensor2, Variant};
use crate::seeds::{self, stream};

pub const SUITE_EPSILON: f64 = 1e-5;
pub const SUITE_COORDS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Dense stack, graph stack, graph stack with dropout, and the
/// physics-informed loss, each on a small random model built from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = seeds::rng(seed, stream::GRADCHECK, 1);
    let mut cases = Vec::with_capacity(4);

    let hidden = [rng.random_range(4..9), rng.random_range(4..9), rng.random_range(3..7)];
    let plain = ArchConfig { hidden, final_dense: true, dropout_rate: 0.0 };
    let dense = NetworkModel::new(build_layers(Variant::Mlp, 12, 8, &plain), NormalizedAdjacency::identity(1), vec![0], seed)?;
    let x = Tensor2::from_vec(3, 12, uniform(&mut rng, 36))?;
    let obj = MseObjective::new(&dense, x, uniform(&mut rng, 24), None)?;
    cases.push(SuiteCase { name: "dense", report: grad_check(&dense, &obj, SUITE_EPSILON, SUITE_COORDS, seed)? });

    let n = rng.random_range(3..9);
    let extra = rng.random_range(0..3);
    let g = build_topology(&synthetic::random_feeder(n, extra, &mut rng))?;
    let readout: Vec<usize> = (1..n).collect();
    for (name, rate) in [("gcn", 0.0), ("gcn with dropout", 0.2)] {
        let arch = ArchConfig { dropout_rate: rate, ..plain };
        let m = NetworkModel::new(build_layers(Variant::Gnn, 4, 3, &arch), normalized_adjacency(&g), readout.clone(), seed)?;
        let x = Tensor2::from_vec(2 * n, 4, uniform(&mut rng, 8 * n))?;
        let target = uniform(&mut rng, 2 * readout.len() * 3);
        let mut drop = seeds::rng(seed, stream::DROPOUT, 0);
        let obj = MseObjective::new(&m, x, target, (rate > 0.0).then_some(&mut drop))?;
        cases.push(SuiteCase { name, report: grad_check(&m, &obj, SUITE_EPSILON, SUITE_COORDS, seed)? });
    }

    let g = build_topology(&synthetic::five_bus())?;
    let selector = overlap_selector(&g)?;
    let row_len = 3;
    let arch = ArchConfig { dropout_rate: 0.2, ..plain };
    let m = NetworkModel::new(build_layers(Variant::Pinn, 4, row_len, &arch), normalized_adjacency(&g), vec![1, 2, 3, 4], seed)?;
    let input = Tensor2::from_vec(10, 4, uniform(&mut rng, 40))?;
    let mut drop = seeds::rng(seed, stream::DROPOUT, 1);
    let masks = m.forward(&input, Masks::Draw(&mut drop))?.1.masks;
    let obj = PinnObjective {
        input,
        target: uniform(&mut rng, 2 * 4 * row_len),
        x_hat_m: vec![uniform(&mut rng, selector.len() * row_len), uniform(&mut rng, selector.len() * row_len)],
        selector,
        row_len,
        masks,
    };
    cases.push(SuiteCase { name: "physics-informed loss", report: grad_check(&m, &obj, SUITE_EPSILON, SUITE_COORDS, seed)? });
    Ok(cases)
}
