//! Mini-batch SGD training for the three variants. The physics-informed
//! variant adds the fusion term on the overlap rows; the other two train on
//! plain MSE.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::fusion::pinn_loss;
use super::model_based::ModelBasedEstimates;
use crate::error::{Error, Result};
use crate::grid::{normalized_adjacency_on, overlap_selector, GridTopology, NormalizedAdjacency, OverlapSelector};
use crate::nn::{build_layers, LayerKind, mse_with_grad, sgd_step, ArchConfig, Masks, NetworkModel, Variant};
use crate::seeds::{self, stream};
use crate::sim::{DatasetManifest, GraphDataset, GraphSample};

const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(first epoch, rate)` pairs; epochs count from 1.
    pub lr_schedule: Vec<(usize, f64)>,
    pub hidden: [usize; 3],
    /// Trailing `out×out` dense layer after the graph convolutions.
    pub final_dense: bool,
    /// The same trailing layer on the MLP, whose output is `L·P·T` wide.
    pub mlp_output_dense: bool,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Replaces the topology's overlap set when present.
    pub overlap: Option<Vec<usize>>,
    /// Starts the output bias at the mean training label of each output
    /// column. Ignored when the network ends in a graph convolution.
    pub label_mean_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        Self {
            variant: Variant::Pinn,
            epochs: 150,
            batch_size: 4,
            lr_schedule: vec![(1, 0.05), (40, 0.01)],
            hidden: arch.hidden,
            final_dense: arch.final_dense,
            mlp_output_dense: false,
            dropout_rate: arch.dropout_rate,
            seed: 0,
            overlap: None,
            label_mean_bias: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        match self.lr_schedule.first() {
            Some(&(1, _)) => {}
            _ => return bad("learning-rate schedule must start at epoch 1".into()),
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return bad("learning-rate schedule epochs must increase".into());
            }
        }
        if let Some(&(e, r)) = self.lr_schedule.iter().find(|(_, r)| !(*r > 0.0 && *r <= 0.1)) {
            return bad(format!("learning rate {r} at epoch {e} outside (0, 0.1]"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        let final_dense = if self.variant.is_graph() { self.final_dense } else { self.mlp_output_dense };
        ArchConfig { hidden: self.hidden, final_dense, dropout_rate: self.dropout_rate }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_schedule.iter().take_while(|(e, _)| *e <= epoch).last().map_or(self.lr_schedule[0].1, |&(_, r)| r)
    }

    /// The topology with this run's overlap set applied.
    pub fn topology(&self, g: &GridTopology) -> Result<GridTopology> {
        match &self.overlap {
            Some(o) => g.with_overlap(o),
            None => Ok(g.clone()),
        }
    }
}

/// Graph models see one row per feature bus and read out the monitored
/// buses; the MLP sees one flattened row per sample.
pub fn build_model(variant: Variant, m: &DatasetManifest, g: &GridTopology, arch: &ArchConfig, seed: u64) -> Result<NetworkModel> {
    let per_bus = m.label_channels * m.frame_count;
    let (adjacency, readout, input, output) = if variant.is_graph() {
        let readout = m
            .monitored_buses
            .iter()
            .map(|b| {
                m.feature_buses
                    .iter()
                    .position(|f| f == b)
                    .ok_or_else(|| Error::Config(format!("monitored bus {b} has no feature row")))
            })
            .collect::<Result<Vec<_>>>()?;
        (normalized_adjacency_on(g, &m.feature_buses), readout, m.feature_count * m.frame_count, per_bus)
    } else {
        (NormalizedAdjacency::identity(1), vec![0], m.feature_len(), m.label_len())
    };
    NetworkModel::new(build_layers(variant, input, output, arch), adjacency, readout, seed)
}

/// Overlap selection and model-based estimates used by the fused output.
#[derive(Clone, Debug)]
pub struct FusionContext<'a> {
    pub selector: OverlapSelector,
    pub row_len: usize,
    estimates: Option<&'a ModelBasedEstimates>,
}

impl<'a> FusionContext<'a> {
    /// Context for `variant`; only the physics-informed one with a non-empty
    /// overlap set needs estimates.
    pub fn new(variant: Variant, g: &GridTopology, d: &GraphDataset, estimates: Option<&'a ModelBasedEstimates>) -> Result<Self> {
        let row_len = d.manifest.label_channels * d.manifest.frame_count;
        let selector = if variant == Variant::Pinn { overlap_selector(g)? } else { OverlapSelector::default() };
        if selector.is_empty() {
            return Ok(Self { selector, row_len, estimates: None });
        }
        let est = estimates.ok_or_else(|| Error::Config("physics-informed variant needs model-based estimates".into()))?;
        let buses: Vec<usize> = selector.buses().collect();
        if est.overlap_buses != buses || est.row_len != row_len || est.per_sample.len() != d.samples.len() {
            return Err(Error::Config(format!(
                "model-based estimates cover buses {:?} for {} samples; run needs {buses:?} for {}",
                est.overlap_buses,
                est.per_sample.len(),
                d.samples.len()
            )));
        }
        Ok(Self { selector, row_len, estimates: Some(est) })
    }

    pub fn is_active(&self) -> bool {
        self.estimates.is_some()
    }

    /// Estimate for dataset sample `i`; `None` when fusion is off or the
    /// filter failed on that sample.
    pub fn estimate(&self, i: usize) -> Option<&'a [f64]> {
        self.estimates.and_then(|e| e.per_sample[i].as_deref())
    }

    /// Replaces the overlap rows of one output with `(x̂ᴹ + x̂ᴰ*)/2`.
    pub fn fuse_output(&self, out: &mut [f64], i: usize) {
        if let Some(m) = self.estimate(i) {
            for (o, pos) in self.selector.positions().enumerate() {
                let row = &mut out[pos * self.row_len..(pos + 1) * self.row_len];
                for (d, mv) in row.iter_mut().zip(&m[o * self.row_len..(o + 1) * self.row_len]) {
                    *d = (mv + *d) / 2.0;
                }
            }
        }
    }
}

/// Network outputs for `samples` (dataset indices `first..`), flattened, and
/// the same with fusion applied.
pub fn predict_samples(model: &NetworkModel, samples: &[GraphSample], first: usize, ctx: &FusionContext) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut raw = Vec::new();
    for chunk in samples.chunks(INFERENCE_CHUNK) {
        let feats: Vec<&[f64]> = chunk.iter().map(|s| s.features.as_slice()).collect();
        raw.extend_from_slice(model.predict(&model.batch_input(&feats)?)?.as_slice());
    }
    let mut fused = raw.clone();
    if ctx.is_active() && !samples.is_empty() {
        let per = raw.len() / samples.len();
        for (k, out) in fused.chunks_mut(per).enumerate() {
            ctx.fuse_output(out, first + k);
        }
    }
    Ok((raw, fused))
}

/// Mean of each output column over samples and readout rows.
fn label_means(model: &NetworkModel, train: &[GraphSample]) -> Vec<f64> {
    let width = model.output_width();
    let mut sum = vec![0.0; width];
    let mut rows = 0usize;
    for s in train {
        for row in s.labels.chunks(width) {
            sum.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            rows += 1;
        }
    }
    sum.iter().map(|a| a / rows.max(1) as f64).collect()
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return f64::NAN;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_test_mse: f64,
    /// Training samples left out for lack of a model-based estimate.
    pub excluded: usize,
}

impl TrainHistory {
    pub fn train_loss(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("epoch,train_loss,val_mse,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_mse, e.seconds));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Seen after every parameter update.
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
    pub model: &'a NetworkModel,
}

pub fn train(
    cfg: &TrainConfig,
    d: &GraphDataset,
    g: &GridTopology,
    estimates: Option<&ModelBasedEstimates>,
) -> Result<(NetworkModel, TrainHistory)> {
    train_with_observer(cfg, d, g, estimates, &mut |_| {})
}

pub fn train_with_observer(
    cfg: &TrainConfig,
    d: &GraphDataset,
    g: &GridTopology,
    estimates: Option<&ModelBasedEstimates>,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<(NetworkModel, TrainHistory)> {
    cfg.validate()?;
    if d.manifest.scaler.is_none() {
        return Err(Error::Config("training needs a normalized dataset".into()));
    }
    let g = cfg.topology(g)?;
    let ctx = FusionContext::new(cfg.variant, &g, d, estimates)?;
    let mut model = build_model(cfg.variant, &d.manifest, &g, &cfg.arch(), cfg.seed)?;
    if cfg.label_mean_bias && model.layers().last().is_some_and(|l| l.kind == LayerKind::Dense) {
        model.set_output_bias(&label_means(&model, d.train()))?;
    }
    let mut order: Vec<usize> = (0..d.manifest.n_train).filter(|&i| !ctx.is_active() || ctx.estimate(i).is_some()).collect();
    let excluded = d.manifest.n_train - order.len();
    if order.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if excluded > 0 {
        log::warn!("{excluded} training samples have no model-based estimate and are skipped");
    }
    let mut shuffle = seeds::rng(cfg.seed, stream::SHUFFLE, 0);
    let mut dropout = seeds::rng(cfg.seed, stream::DROPOUT, 0);
    let test = d.test();
    let test_labels: Vec<f64> = test.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let feats: Vec<&[f64]> = idx.iter().map(|&i| d.samples[i].features.as_slice()).collect();
            let target: Vec<f64> = idx.iter().flat_map(|&i| d.samples[i].labels.iter().copied()).collect();
            let x = model.batch_input(&feats)?;
            let masks = if cfg.dropout_rate > 0.0 { Masks::Draw(&mut dropout) } else { Masks::Off };
            let (out, tape) = model.forward(&x, masks)?;
            let (loss, grad) = if ctx.is_active() {
                let m: Vec<&[f64]> = idx.iter().map(|&i| ctx.estimate(i).expect("filtered above")).collect();
                pinn_loss(&out, &target, &m, &ctx.selector, ctx.row_len)?
            } else {
                mse_with_grad(&out, &target)?
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("training loss {loss} at epoch {epoch}, batch {batch}")));
            }
            let g = model.backward(&tape, &grad)?;
            sgd_step(&mut model, &g, lr)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}, batch {batch}: {e}")))?;
            loss_sum += loss * idx.len() as f64;
            observer(&StepInfo { epoch, batch, loss, lr, model: &model });
        }
        let (_, fused) = predict_samples(&model, test, d.manifest.n_train, &ctx)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_mse: mse(&fused, &test_labels),
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!("{} epoch {epoch}: loss {:.4e}", cfg.variant.name(), loss_sum / order.len() as f64);
    }
    let final_test_mse = records.last().map_or(f64::NAN, |r| r.val_mse);
    let history = TrainHistory { variant: cfg.variant, seed: cfg.seed, epochs: records, final_test_mse, excluded };
    Ok((model, history))
}
