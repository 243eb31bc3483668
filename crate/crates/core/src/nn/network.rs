use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    apply_mask, dense_backward, dense_forward, dropout_mask, gcn_backward, gcn_forward, relu_backward, relu_forward,
    LayerKind, LayerSpec,
};
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::grid::NormalizedAdjacency;
use crate::seeds::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mlp,
    Gnn,
    Pinn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mlp, Variant::Gnn, Variant::Pinn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mlp => "mlp",
            Variant::Gnn => "gnn",
            Variant::Pinn => "pinn",
        }
    }

    pub fn is_graph(self) -> bool {
        self != Variant::Mlp
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Variant::Mlp),
            "gnn" => Ok(Variant::Gnn),
            "pinn" => Ok(Variant::Pinn),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Hidden widths and regularization shared by all variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: [usize; 3],
    /// Append the trailing `out → out` dense layer.
    pub final_dense: bool,
    pub dropout_rate: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { hidden: [64, 64, 32], final_dense: true, dropout_rate: 0.0 }
    }
}

/// Layer stack of a variant: two dense hidden layers, then either a third
/// dense layer and a dense output (MLP) or two graph convolutions (GNN/PINN).
pub fn build_layers(variant: Variant, input: usize, output: usize, arch: &ArchConfig) -> Vec<LayerSpec> {
    let [h1, h2, h3] = arch.hidden;
    let mut layers = vec![LayerSpec::dense(input, h1), LayerSpec::relu(h1)];
    if arch.dropout_rate > 0.0 {
        layers.push(LayerSpec::dropout(h1, arch.dropout_rate));
    }
    layers.extend([LayerSpec::dense(h1, h2), LayerSpec::relu(h2)]);
    if arch.dropout_rate > 0.0 {
        layers.push(LayerSpec::dropout(h2, arch.dropout_rate));
    }
    if variant.is_graph() {
        layers.extend([LayerSpec::gcn(h2, h3), LayerSpec::relu(h3), LayerSpec::gcn(h3, output)]);
    } else {
        layers.extend([LayerSpec::dense(h2, h3), LayerSpec::relu(h3), LayerSpec::dense(h3, output)]);
    }
    if arch.final_dense {
        layers.extend([LayerSpec::relu(output), LayerSpec::dense(output, output)]);
    }
    layers
}

/// Parameters of one layer: row-major `in×out` weight and a bias for dense
/// layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Option<Tensor2>,
    pub bias: Option<Vec<f64>>,
}

/// A feed-forward network over graph samples.
///
/// Inputs are stacked per sample as `nodes` rows of `input_width()` values.
/// The output keeps the `readout` rows of each sample, so one sample's output
/// is `readout.len() × output_width()` contiguous values.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    pub(crate) layers: Vec<LayerSpec>,
    pub(crate) params: Vec<LayerParams>,
    pub(crate) adjacency: NormalizedAdjacency,
    pub(crate) readout: Vec<usize>,
    pub seed: u64,
    pub step: u64,
}

/// Dropout masks for a forward pass.
pub enum Masks<'a> {
    /// Evaluation mode: every dropout layer is the identity.
    Off,
    /// Training mode: draw fresh masks.
    Draw(&'a mut ChaCha8Rng),
    /// Replay masks recorded by an earlier pass.
    Fixed(&'a [Vec<f64>]),
}

/// Values kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<Tensor2>,
    /// `Â·H` of graph-convolution layers, by layer index.
    propagated: Vec<Option<Tensor2>>,
    /// Dropout multipliers by layer index.
    pub masks: Vec<Vec<f64>>,
    batch: usize,
}

impl Tape {
    /// Signature of every ReLU input sign, for detecting kinks.
    pub fn activation_pattern(&self, model: &NetworkModel) -> Vec<bool> {
        model
            .layers
            .iter()
            .zip(&self.inputs)
            .filter(|(l, _)| l.kind == LayerKind::Activation)
            .flat_map(|(_, x)| x.as_slice().iter().map(|&v| v > 0.0))
            .collect()
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor2::from_vec(rows, cols, data).expect("sized")
}

impl NetworkModel {
    /// Glorot-uniform weights and zero biases drawn from the init stream.
    pub fn new(layers: Vec<LayerSpec>, adjacency: NormalizedAdjacency, readout: Vec<usize>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            l.validate()?;
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(Error::Config(format!(
                    "layer {i} expects width {} but receives {}",
                    l.in_dim,
                    layers[i - 1].out_dim
                )));
            }
        }
        if readout.is_empty() || readout.iter().any(|&r| r >= adjacency.dim()) {
            return Err(Error::Config(format!("readout rows {readout:?} outside {} nodes", adjacency.dim())));
        }
        let mut rng = seeds::rng(seed, stream::INIT, 0);
        let params = layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Dense => LayerParams {
                    weight: Some(glorot(l.in_dim, l.out_dim, &mut rng)),
                    bias: Some(vec![0.0; l.out_dim]),
                },
                LayerKind::Gcn => LayerParams { weight: Some(glorot(l.in_dim, l.out_dim, &mut rng)), bias: None },
                _ => LayerParams { weight: None, bias: None },
            })
            .collect();
        Ok(Self { layers, params, adjacency, readout, seed, step: 0 })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adjacency
    }

    pub fn readout(&self) -> &[usize] {
        &self.readout
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.dim()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    /// Values per sample at the input and at the output.
    pub fn sample_sizes(&self) -> (usize, usize) {
        (self.nodes() * self.input_width(), self.readout.len() * self.output_width())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_shape().0 + l.param_shape().1).sum()
    }

    /// All parameters flattened layer by layer, weight before bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            if let Some(w) = &p.weight {
                out.extend_from_slice(w.as_slice());
            }
            if let Some(b) = &p.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("{} parameters for a model of {}", flat.len(), self.param_count())));
        }
        let mut rest = flat;
        for p in &mut self.params {
            if let Some(w) = &mut p.weight {
                let n = w.as_slice().len();
                w.as_mut_slice().copy_from_slice(&rest[..n]);
                rest = &rest[n..];
            }
            if let Some(b) = &mut p.bias {
                let n = b.len();
                b.copy_from_slice(&rest[..n]);
                rest = &rest[n..];
            }
        }
        Ok(())
    }

    pub(crate) fn param_slots_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.params.iter_mut().flat_map(|p| {
            let w = p.weight.as_mut().map(|w| w.as_mut_slice());
            let b = p.bias.as_deref_mut();
            w.into_iter().chain(b)
        })
    }

    /// Overwrites the bias of the output layer, which must be dense.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        let width = self.output_width();
        match self.params.last_mut().and_then(|p| p.bias.as_mut()) {
            Some(b) if bias.len() == width => {
                b.copy_from_slice(bias);
                Ok(())
            }
            Some(_) => Err(Error::Shape(format!("{} bias values for output width {width}", bias.len()))),
            None => Err(Error::Config("output layer has no bias".into())),
        }
    }

    /// Stacks per-sample feature vectors into the input tensor.
    pub fn batch_input(&self, samples: &[&[f64]]) -> Result<Tensor2> {
        let per = self.nodes() * self.input_width();
        let mut data = Vec::with_capacity(samples.len() * per);
        for (i, s) in samples.iter().enumerate() {
            if s.len() != per {
                return Err(Error::Shape(format!("sample {i} has {} features, model expects {per}", s.len())));
            }
            data.extend_from_slice(s);
        }
        Tensor2::from_vec(samples.len() * self.nodes(), self.input_width(), data)
    }

    /// Runs every layer and keeps the readout rows.
    pub fn forward(&self, x: &Tensor2, mut masks: Masks<'_>) -> Result<(Tensor2, Tape)> {
        let n = self.nodes();
        if x.cols() != self.input_width() || x.rows() == 0 || !x.rows().is_multiple_of(n) {
            return Err(Error::Shape(format!(
                "input {}x{} does not fit {} nodes of width {}",
                x.rows(),
                x.cols(),
                n,
                self.input_width()
            )));
        }
        let batch = x.rows() / n;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            propagated: vec![None; self.layers.len()],
            masks: vec![Vec::new(); self.layers.len()],
            batch,
        };
        let mut h = x.clone();
        for (i, (l, p)) in self.layers.iter().zip(&self.params).enumerate() {
            let next = match l.kind {
                LayerKind::Dense => {
                    dense_forward(&h, p.weight.as_ref().expect("dense weight"), p.bias.as_ref().expect("bias"))?
                }
                LayerKind::Gcn => {
                    let (out, ah) = gcn_forward(&h, &self.adjacency, p.weight.as_ref().expect("gcn weight"))?;
                    tape.propagated[i] = Some(ah);
                    out
                }
                LayerKind::Activation => relu_forward(&h),
                LayerKind::Dropout => match &mut masks {
                    Masks::Off => h.clone(),
                    Masks::Draw(rng) => {
                        let m = dropout_mask(h.as_slice().len(), l.dropout_rate, *rng);
                        let out = apply_mask(&h, &m);
                        tape.masks[i] = m;
                        out
                    }
                    Masks::Fixed(ms) => {
                        let m = ms.get(i).filter(|m| m.len() == h.as_slice().len()).ok_or_else(|| {
                            Error::Shape(format!("no recorded dropout mask for layer {i}"))
                        })?;
                        tape.masks[i] = m.clone();
                        apply_mask(&h, m)
                    }
                },
            };
            tape.inputs.push(std::mem::replace(&mut h, next));
        }
        let width = self.output_width();
        let mut out = Vec::with_capacity(batch * self.readout.len() * width);
        for b in 0..batch {
            for &r in &self.readout {
                out.extend_from_slice(h.row(b * n + r));
            }
        }
        Ok((Tensor2::from_vec(batch * self.readout.len(), width, out)?, tape))
    }

    /// Output-only evaluation-mode pass.
    pub fn predict(&self, x: &Tensor2) -> Result<Tensor2> {
        Ok(self.forward(x, Masks::Off)?.0)
    }

    /// Flat parameter gradient for upstream gradient `g` on the readout.
    pub fn backward(&self, tape: &Tape, g: &Tensor2) -> Result<Vec<f64>> {
        let (n, width) = (self.nodes(), self.output_width());
        if g.rows() != tape.batch * self.readout.len() || g.cols() != width {
            return Err(Error::Shape(format!("upstream gradient {}x{} does not match output", g.rows(), g.cols())));
        }
        let mut grad = Tensor2::zeros(tape.batch * n, width);
        for b in 0..tape.batch {
            for (k, &r) in self.readout.iter().enumerate() {
                let src = g.row(b * self.readout.len() + k);
                let dst = &mut grad.as_mut_slice()[(b * n + r) * width..(b * n + r + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let (l, p, x) = (&self.layers[i], &self.params[i], &tape.inputs[i]);
            grad = match l.kind {
                LayerKind::Dense => {
                    let (dx, dw, db) = dense_backward(x, p.weight.as_ref().expect("dense weight"), &grad);
                    let mut flat = dw.into_vec();
                    flat.extend(db);
                    per_layer[i] = flat;
                    dx
                }
                LayerKind::Gcn => {
                    let ah = tape.propagated[i].as_ref().expect("recorded Â·H");
                    let (dh, dw) = gcn_backward(ah, &self.adjacency, p.weight.as_ref().expect("gcn weight"), &grad)?;
                    per_layer[i] = dw.into_vec();
                    dh
                }
                LayerKind::Activation => relu_backward(x, &grad),
                LayerKind::Dropout if tape.masks[i].is_empty() => grad,
                LayerKind::Dropout => apply_mask(&grad, &tape.masks[i]),
            };
        }
        Ok(per_layer.concat())
    }
}

/// `w ← w − lr·g` over every parameter of the model.
pub fn sgd_step(model: &mut NetworkModel, grads: &[f64], lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != model.param_count() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), model.param_count())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {i} is {}", grads[i])));
    }
    let mut rest = grads;
    for slot in model.param_slots_mut() {
        let (g, tail) = rest.split_at(slot.len());
        for (w, d) in slot.iter_mut().zip(g) {
            *w -= lr * d;
        }
        rest = tail;
    }
    model.step += 1;
    Ok(())
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(pred: &Tensor2, target: &[f64]) -> Result<(f64, Tensor2)> {
    if pred.as_slice().len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.as_slice().len(), target.len())));
    }
    let count = target.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(target.len());
    for (p, t) in pred.as_slice().iter().zip(target) {
        let r = p - t;
        loss += r * r;
        grad.push(2.0 * r / count);
    }
    Ok((loss / count, Tensor2::from_vec(pred.rows(), pred.cols(), grad)?))
}
