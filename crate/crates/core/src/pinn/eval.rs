//! Test-split metrics and the side-by-side comparison of the variants.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::train::{predict_samples, FusionContext};
use crate::error::Result;
use crate::grid::PHASES;
use crate::nn::{NetworkModel, Variant};
use crate::sim::dataset::LABELS_PER_BUS;
use crate::sim::GraphDataset;

/// Squared-error means over the test split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMse {
    pub overall: f64,
    pub magnitude: f64,
    pub angle_rad2: f64,
    pub angle_deg2: f64,
}

impl ChannelMse {
    /// `pred` and `truth` are concatenated `(L, P, T)` blocks.
    pub fn compute(pred: &[f64], truth: &[f64], frames: usize) -> Self {
        let (mut mag, mut ang, mut nm, mut na) = (0.0, 0.0, 0usize, 0usize);
        for (k, (row_p, row_t)) in pred.chunks(frames).zip(truth.chunks(frames)).enumerate() {
            let e: f64 = row_p.iter().zip(row_t).map(|(p, t)| (p - t) * (p - t)).sum();
            if k % LABELS_PER_BUS < PHASES {
                mag += e;
                nm += row_p.len();
            } else {
                ang += e;
                na += row_p.len();
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        let deg2 = (180.0 / std::f64::consts::PI).powi(2);
        Self {
            overall: mean(mag + ang, nm + na),
            magnitude: mean(mag, nm),
            angle_rad2: mean(ang, na),
            angle_deg2: mean(ang, na) * deg2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub seed: u64,
    pub samples: usize,
    /// Metrics of the variant's estimate; fused on the overlap for the
    /// physics-informed variant.
    pub metrics: ChannelMse,
    /// Network output alone, before fusion, when fusion applies.
    pub network_only: Option<ChannelMse>,
}

/// Scores `model` on the test split of `d`.
pub fn evaluate(model: &NetworkModel, variant: Variant, d: &GraphDataset, ctx: &FusionContext) -> Result<EvalReport> {
    let test = d.test();
    let truth: Vec<f64> = test.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let (raw, fused) = predict_samples(model, test, d.manifest.n_train, ctx)?;
    let t = d.manifest.frame_count;
    Ok(EvalReport {
        variant,
        seed: model.seed,
        samples: test.len(),
        metrics: ChannelMse::compute(&fused, &truth, t),
        network_only: ctx.is_active().then(|| ChannelMse::compute(&raw, &truth, t)),
    })
}

/// One row per variant, one entry per training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub runs: Vec<EvalReport>,
    pub median_overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub system: String,
    pub rows: Vec<ComparisonRow>,
    /// `1 − PINN/GNN` on the median overall MSE.
    pub pinn_improvement_over_gnn: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

impl ComparisonTable {
    /// Groups reports by variant in MLP, GNN, PINN order.
    pub fn new(system: &str, reports: &[EvalReport]) -> Self {
        let rows: Vec<ComparisonRow> = Variant::ALL
            .iter()
            .filter_map(|&v| {
                let runs: Vec<EvalReport> = reports.iter().filter(|r| r.variant == v).cloned().collect();
                (!runs.is_empty()).then(|| {
                    let overall: Vec<f64> = runs.iter().map(|r| r.metrics.overall).collect();
                    ComparisonRow { variant: v, median_overall: median(&overall), runs }
                })
            })
            .collect();
        let med = |v: Variant| rows.iter().find(|r| r.variant == v).map(|r| r.median_overall);
        let pinn_improvement_over_gnn = med(Variant::Pinn).zip(med(Variant::Gnn)).map(|(p, g)| 1.0 - p / g);
        Self { system: system.to_string(), rows, pinn_improvement_over_gnn }
    }

    pub fn row(&self, v: Variant) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Plain-text table; each cell lists the runs separated by `/`.
    pub fn render(&self) -> String {
        let cell = |runs: &[EvalReport], f: fn(&ChannelMse) -> f64| {
            runs.iter().map(|r| format!("{:.3e}", f(&r.metrics))).collect::<Vec<_>>().join(" / ")
        };
        let mut s = format!("{}\n", self.system);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<5} magnitude MSE {}  angle MSE (rad²) {}  angle MSE (deg²) {}",
                r.variant.name().to_uppercase(),
                cell(&r.runs, |m| m.magnitude),
                cell(&r.runs, |m| m.angle_rad2),
                cell(&r.runs, |m| m.angle_deg2),
            );
        }
        if let Some(i) = self.pinn_improvement_over_gnn {
            let side = if i >= 0.0 { "below" } else { "above" };
            let _ = writeln!(s, "PINN median MSE {:.1}% {side} GNN", 100.0 * i.abs());
        }
        s
    }

    /// One line per variant and run.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,run,seed,overall_mse,magnitude_mse,angle_mse_rad2,angle_mse_deg2,network_only_mse\n");
        for row in &self.rows {
            for (i, r) in row.runs.iter().enumerate() {
                let m = &r.metrics;
                let raw = r.network_only.as_ref().map_or(String::new(), |n| n.overall.to_string());
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{raw}",
                    row.variant.name(),
                    i + 1,
                    r.seed,
                    m.overall,
                    m.magnitude,
                    m.angle_rad2,
                    m.angle_deg2
                );
            }
        }
        s
    }
}
