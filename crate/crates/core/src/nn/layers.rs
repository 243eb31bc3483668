//! Layer kernels with their hand-derived backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor2};
use crate::error::{Error, Result};
use crate::grid::NormalizedAdjacency;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Gcn,
    Activation,
    Dropout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self { kind: LayerKind::Dense, in_dim, out_dim, dropout_rate: 0.0 }
    }

    pub fn gcn(in_dim: usize, out_dim: usize) -> Self {
        Self { kind: LayerKind::Gcn, in_dim, out_dim, dropout_rate: 0.0 }
    }

    pub fn relu(dim: usize) -> Self {
        Self { kind: LayerKind::Activation, in_dim: dim, out_dim: dim, dropout_rate: 0.0 }
    }

    pub fn dropout(dim: usize, rate: f64) -> Self {
        Self { kind: LayerKind::Dropout, in_dim: dim, out_dim: dim, dropout_rate: rate }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("{:?} layer with zero width", self.kind)));
        }
        match self.kind {
            LayerKind::Activation | LayerKind::Dropout if self.in_dim != self.out_dim => {
                Err(Error::Config(format!("{:?} layer must keep its width", self.kind)))
            }
            LayerKind::Dropout if !(0.0..1.0).contains(&self.dropout_rate) => {
                Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)))
            }
            _ => Ok(()),
        }
    }

    /// Weight count followed by bias count.
    pub fn param_shape(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense => (self.in_dim * self.out_dim, self.out_dim),
            LayerKind::Gcn => (self.in_dim * self.out_dim, 0),
            _ => (0, 0),
        }
    }
}

fn check_cols(x: &Tensor2, w: &Tensor2) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(Error::Shape(format!("input width {} does not match weight rows {}", x.cols(), w.rows())));
    }
    Ok(())
}

/// `x·W + b`, bias broadcast over rows.
pub fn dense_forward(x: &Tensor2, w: &Tensor2, bias: &[f64]) -> Result<Tensor2> {
    check_cols(x, w)?;
    if bias.len() != w.cols() {
        return Err(Error::Shape(format!("bias of {} for width {}", bias.len(), w.cols())));
    }
    let mut out = Tensor2::zeros(x.rows(), w.cols());
    for row in out.as_mut_slice().chunks_mut(w.cols()) {
        row.copy_from_slice(bias);
    }
    gemm(x.rows(), x.cols(), w.cols(), x.as_slice(), false, w.as_slice(), false, out.as_mut_slice(), true);
    Ok(out)
}

/// Gradients `(dx, dW, db)` of a dense layer for upstream gradient `g`.
pub fn dense_backward(x: &Tensor2, w: &Tensor2, g: &Tensor2) -> (Tensor2, Tensor2, Vec<f64>) {
    let (m, k, n) = (x.rows(), x.cols(), w.cols());
    let mut dx = Tensor2::zeros(m, k);
    gemm(m, n, k, g.as_slice(), false, w.as_slice(), true, dx.as_mut_slice(), false);
    let mut dw = Tensor2::zeros(k, n);
    gemm(k, m, n, x.as_slice(), true, g.as_slice(), false, dw.as_mut_slice(), false);
    let mut db = vec![0.0; n];
    for row in g.as_slice().chunks(n) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (dx, dw, db)
}

/// `Â·h` applied to every block of `Â.dim()` consecutive rows.
pub fn propagate(adj: &NormalizedAdjacency, h: &Tensor2, transpose: bool) -> Result<Tensor2> {
    let n = adj.dim();
    if n == 0 || !h.rows().is_multiple_of(n) {
        return Err(Error::Shape(format!("{} rows are not whole graphs of {n} nodes", h.rows())));
    }
    let cols = h.cols();
    let mut out = Tensor2::zeros(h.rows(), cols);
    for (src, dst) in h.as_slice().chunks(n * cols).zip(out.as_mut_slice().chunks_mut(n * cols)) {
        gemm(n, n, cols, adj.as_slice(), transpose, src, false, dst, false);
    }
    Ok(out)
}

/// Pre-activation `Â·H·W`; also returns `Â·H` for the backward pass.
pub fn gcn_forward(h: &Tensor2, adj: &NormalizedAdjacency, w: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    check_cols(h, w)?;
    let ah = propagate(adj, h, false)?;
    let out = ah.matmul(w)?;
    Ok((out, ah))
}

/// Gradients `(dH, dW)`: `Âᵀ·G·Wᵀ` and `(Â·H)ᵀ·G`.
pub fn gcn_backward(ah: &Tensor2, adj: &NormalizedAdjacency, w: &Tensor2, g: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    let (m, k, n) = (ah.rows(), ah.cols(), w.cols());
    let mut gw = Tensor2::zeros(m, k);
    gemm(m, n, k, g.as_slice(), false, w.as_slice(), true, gw.as_mut_slice(), false);
    let dh = propagate(adj, &gw, true)?;
    let mut dw = Tensor2::zeros(k, n);
    gemm(k, m, n, ah.as_slice(), true, g.as_slice(), false, dw.as_mut_slice(), false);
    Ok((dh, dw))
}

pub fn relu_forward(x: &Tensor2) -> Tensor2 {
    let data = x.as_slice().iter().map(|&v| v.max(0.0)).collect();
    Tensor2::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

/// Upstream gradient masked by `x > 0`.
pub fn relu_backward(x: &Tensor2, g: &Tensor2) -> Tensor2 {
    let data = x.as_slice().iter().zip(g.as_slice()).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
    Tensor2::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

pub fn apply_mask(x: &Tensor2, mask: &[f64]) -> Tensor2 {
    let data = x.as_slice().iter().zip(mask).map(|(a, b)| a * b).collect();
    Tensor2::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout on a tensor; identity in evaluation mode.
pub fn dropout<R: Rng>(x: &Tensor2, rate: f64, mode: Mode, rng: &mut R) -> Tensor2 {
    match mode {
        Mode::Eval => x.clone(),
        Mode::Train => apply_mask(x, &dropout_mask(x.as_slice().len(), rate, rng)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor2 {
        Tensor2::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
        t(rows, cols, &(0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn dense_examples() {
        let x = t(1, 2, &[1.0, 2.0]);
        assert_eq!(dense_forward(&x, &Tensor2::identity(2), &[0.0, 0.0]).unwrap(), x);
        assert_eq!(dense_forward(&x, &Tensor2::identity(2), &[1.0, 1.0]).unwrap(), t(1, 2, &[2.0, 3.0]));
        assert!(dense_forward(&x, &Tensor2::identity(3), &[0.0; 3]).is_err());
    }

    /// Loss `Σ c ⊙ f(·)` with fixed random `c`, so `∂loss/∂out = c`.
    fn weighted_sum(out: &Tensor2, c: &Tensor2) -> f64 {
        out.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
    }

    fn rel(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut rng = seeds::rng_from(1);
        let (x, w) = (random(3, 4, &mut rng), random(4, 2, &mut rng));
        let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = random(3, 2, &mut rng);
        let (dx, dw, db) = dense_backward(&x, &w, &c);
        let f = |x: &Tensor2, w: &Tensor2, b: &[f64]| weighted_sum(&dense_forward(x, w, b).unwrap(), &c);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..12 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.as_mut_slice()[i] += eps;
            m.as_mut_slice()[i] -= eps;
            worst = worst.max(rel(dx.as_slice()[i], (f(&p, &w, &b) - f(&m, &w, &b)) / (2.0 * eps)));
        }
        for i in 0..8 {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.as_mut_slice()[i] += eps;
            m.as_mut_slice()[i] -= eps;
            worst = worst.max(rel(dw.as_slice()[i], (f(&x, &p, &b) - f(&x, &m, &b)) / (2.0 * eps)));
        }
        for i in 0..2 {
            let (mut p, mut m) = (b.clone(), b.clone());
            p[i] += eps;
            m[i] -= eps;
            worst = worst.max(rel(db[i], (f(&x, &w, &p) - f(&x, &w, &m)) / (2.0 * eps)));
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn gcn_examples() {
        let one = NormalizedAdjacency::identity(1);
        let h = t(1, 3, &[0.5, -1.0, 2.0]);
        assert_eq!(gcn_forward(&h, &one, &Tensor2::identity(3)).unwrap().0, h);
        let half = NormalizedAdjacency::from_dense(2, vec![0.5; 4]).unwrap();
        let (out, _) = gcn_forward(&t(2, 1, &[1.0, 3.0]), &half, &t(1, 1, &[1.0])).unwrap();
        assert_eq!(out, t(2, 1, &[2.0, 2.0]));
        assert!(gcn_forward(&t(3, 1, &[1.0; 3]), &half, &t(1, 1, &[1.0])).is_err());
    }

    #[test]
    fn gcn_gradient_matches_finite_differences() {
        let mut rng = seeds::rng_from(2);
        // random symmetric 4-node operator, two stacked graphs
        let mut a = vec![0.0; 16];
        for i in 0..4 {
            for j in i..4 {
                let v = rng.random_range(0.0..1.0);
                a[i * 4 + j] = v;
                a[j * 4 + i] = v;
            }
        }
        let adj = NormalizedAdjacency::from_dense(4, a).unwrap();
        let (h, w, c) = (random(8, 3, &mut rng), random(3, 2, &mut rng), random(8, 2, &mut rng));
        let (_, ah) = gcn_forward(&h, &adj, &w).unwrap();
        let (dh, dw) = gcn_backward(&ah, &adj, &w, &c).unwrap();
        let f = |h: &Tensor2, w: &Tensor2| weighted_sum(&gcn_forward(h, &adj, w).unwrap().0, &c);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..24 {
            let (mut p, mut m) = (h.clone(), h.clone());
            p.as_mut_slice()[i] += eps;
            m.as_mut_slice()[i] -= eps;
            worst = worst.max(rel(dh.as_slice()[i], (f(&p, &w) - f(&m, &w)) / (2.0 * eps)));
        }
        for i in 0..6 {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.as_mut_slice()[i] += eps;
            m.as_mut_slice()[i] -= eps;
            worst = worst.max(rel(dw.as_slice()[i], (f(&h, &p) - f(&h, &m)) / (2.0 * eps)));
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn relu_examples() {
        let x = t(1, 3, &[-1.0, 0.0, 2.0]);
        let y = relu_forward(&x);
        assert_eq!(y, t(1, 3, &[0.0, 0.0, 2.0]));
        assert_eq!(relu_forward(&y), y);
        let g = relu_backward(&t(1, 2, &[3.0, -3.0]), &t(1, 2, &[1.0, 1.0]));
        assert_eq!(g, t(1, 2, &[1.0, 0.0]));
    }

    #[test]
    fn dropout_examples() {
        let mut rng = seeds::rng_from(4);
        let x = t(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng), x);
        assert_eq!(dropout(&x, 0.7, Mode::Eval, &mut rng), x);
        let ones = Tensor2::from_vec(1, 1_000_000, vec![1.0; 1_000_000]).unwrap();
        let y = dropout(&ones, 0.5, Mode::Train, &mut rng);
        let mean = y.as_slice().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(y.as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::dropout(4, 1.0).validate().is_err());
        assert!(LayerSpec::dense(0, 3).validate().is_err());
        assert!(LayerSpec { kind: LayerKind::Activation, in_dim: 2, out_dim: 3, dropout_rate: 0.0 }.validate().is_err());
        assert!(LayerSpec::gcn(3, 2).validate().is_ok());
    }
}
