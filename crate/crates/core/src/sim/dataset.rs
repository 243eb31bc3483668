//! Graph datasets: per-sample feature/label tensors plus the manifest that
//! pins their shapes, seeds and scaler.
//!
//! Features are `(node, F, T)` with `F = 6`: active then reactive power per
//! phase, `S = ½·V·conj(I)` on peak phasors. Labels are `(bus, P, T)` with
//! `P = 6`: voltage magnitude then angle per phase at the monitored buses.

use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::circuit::{build_circuit_ode, simulate_trajectory, Integration, SourceSpec};
use super::noise::add_noise;
use super::phasor::{principal_angle, samples_per_period, SingleBinDft};
use super::scenario::{make_scenario, LoadAdmittance, ScenarioConfig};
use super::trajectory::Trajectory;
use crate::error::{Error, Result};
use crate::grid::{GridTopology, PHASES};
use crate::io::{read_json, read_tensor, write_json, write_tensor};
use crate::seeds::{self, stream};

pub const FEATURES_PER_NODE: usize = 6;
pub const LABELS_PER_BUS: usize = 6;
const FORMAT_VERSION: u32 = 1;

/// Per-bus load override, one value per phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOverride {
    pub bus: usize,
    pub conductance: [f64; PHASES],
    pub susceptance: [f64; PHASES],
}

/// Everything needed to regenerate a dataset from its root seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub f0: f64,
    pub fs: f64,
    pub duration: f64,
    pub change_time: f64,
    pub multiplier_range: [f64; 2],
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub source_magnitude: f64,
    pub load_conductance: f64,
    pub load_susceptance: f64,
    pub load_overrides: Vec<LoadOverride>,
    pub compact_features: bool,
    pub substeps: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            f0: 60.0,
            fs: 12_000.0,
            duration: 0.6,
            change_time: 0.2,
            multiplier_range: [0.7, 1.3],
            noise_sigma: 5e-4,
            n_train: 2000,
            n_test: 500,
            source_magnitude: 1.0,
            load_conductance: 0.3,
            load_susceptance: 0.1,
            load_overrides: Vec::new(),
            compact_features: false,
            substeps: None,
        }
    }
}

impl SimConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.fs
    }

    pub fn frame(&self) -> FrameConfig {
        FrameConfig { f0: self.f0, fs: self.fs, compact_features: self.compact_features }
    }

    pub fn integration(&self) -> Integration {
        Integration { dt: self.dt(), duration: self.duration, substeps: self.substeps }
    }

    pub fn source(&self) -> SourceSpec {
        SourceSpec { magnitude: self.source_magnitude, angle: 0.0, f0: self.f0 }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig { multiplier_range: self.multiplier_range, change_time: self.change_time }
    }

    /// Base load admittances aligned with `g.load_buses()`.
    pub fn base_loads(&self, g: &GridTopology) -> Result<Vec<LoadAdmittance>> {
        for o in &self.load_overrides {
            if !g.is_load(o.bus) {
                return Err(Error::Config(format!("load override for non-load bus {}", o.bus)));
            }
        }
        Ok(g.load_buses()
            .iter()
            .map(|&bus| match self.load_overrides.iter().find(|o| o.bus == bus) {
                Some(o) => LoadAdmittance { conductance: o.conductance, susceptance: o.susceptance },
                None => LoadAdmittance::balanced(self.load_conductance, self.load_susceptance),
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        samples_per_period(self.f0, self.fs)?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be at least 1".into()));
        }
        if !(self.duration > 0.0 && self.change_time > 0.0 && self.change_time < self.duration) {
            return Err(Error::Config(format!(
                "change_time {} must lie inside (0, {})",
                self.change_time, self.duration
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub f0: f64,
    pub fs: f64,
    /// Keep feature rows for load buses only instead of zero-filling the rest.
    pub compact_features: bool,
}

/// Min–max parameters, one entry per physical feature, pooled over nodes and
/// frames so that levels stay comparable between buses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerParams {
    fn scale(&self, c: usize, x: f64) -> f64 {
        let span = self.max[c] - self.min[c];
        if span > 0.0 {
            (x - self.min[c]) / span
        } else {
            0.0
        }
    }

    fn unscale(&self, c: usize, s: f64) -> f64 {
        let span = self.max[c] - self.min[c];
        if span > 0.0 {
            s * span + self.min[c]
        } else {
            self.min[c]
        }
    }

    /// Applies the scaling to one `(node, F, T)` feature tensor.
    pub fn transform(&self, features: &mut [f64], frames: usize) {
        for (c, chunk) in features.chunks_mut(frames).enumerate() {
            for x in chunk {
                *x = self.scale(c % self.min.len(), *x);
            }
        }
    }

    pub fn inverse_transform(&self, features: &mut [f64], frames: usize) {
        for (c, chunk) in features.chunks_mut(frames).enumerate() {
            for x in chunk {
                *x = self.unscale(c % self.min.len(), *x);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub tool_version: String,
    /// Feature rows `N`; bus ids in `feature_buses`.
    pub node_count: usize,
    pub feature_buses: Vec<usize>,
    pub feature_count: usize,
    pub frame_count: usize,
    pub monitored_buses: Vec<usize>,
    pub label_channels: usize,
    pub frame_times: Vec<f64>,
    /// Digest of the network without its overlap set.
    pub topology_digest: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub compact_features: bool,
    pub scaler: Option<ScalerParams>,
    pub sim: SimConfig,
}

impl DatasetManifest {
    pub fn feature_len(&self) -> usize {
        self.node_count * self.feature_count * self.frame_count
    }

    pub fn label_len(&self) -> usize {
        self.monitored_buses.len() * self.label_channels * self.frame_count
    }
}

/// One graph sample: `features` is `(N, F, T)`, `labels` is `(L, P, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSample {
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    pub sample_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub manifest: DatasetManifest,
    /// Training samples first, then test samples.
    pub samples: Vec<GraphSample>,
}

impl GraphDataset {
    pub fn train(&self) -> &[GraphSample] {
        &self.samples[..self.manifest.n_train]
    }

    pub fn test(&self) -> &[GraphSample] {
        &self.samples[self.manifest.n_train..]
    }
}

/// Phasor frames over the one-period, period-hop grid.
pub struct FrameGrid {
    dft: SingleBinDft,
    window: usize,
    frames: usize,
    dt: f64,
}

impl FrameGrid {
    pub fn new(frame: &FrameConfig, t: &Trajectory) -> Result<Self> {
        let dft = SingleBinDft::new(frame.f0, frame.fs)?;
        if (t.dt * frame.fs - 1.0).abs() > 1e-9 {
            return Err(Error::Shape(format!("trajectory dt {} does not match fs {}", t.dt, frame.fs)));
        }
        let window = dft.window_len();
        let frames = t.samples() / window;
        if frames == 0 {
            return Err(Error::Shape("trajectory shorter than one period".into()));
        }
        Ok(Self { dft, window, frames, dt: t.dt })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn frame_time(&self, f: usize) -> f64 {
        (f * self.window) as f64 * self.dt
    }

    /// Phasor of a per-sample series over frame `f`.
    pub fn phasor(&self, series: &[f64], f: usize) -> Complex64 {
        self.dft.project_strided(series, f * self.window, 1)
    }
}

fn feature_buses(g: &GridTopology, compact: bool) -> Vec<usize> {
    if compact {
        g.load_buses().to_vec()
    } else {
        (0..g.bus_count()).collect()
    }
}

/// Builds one sample: features from the measured (possibly noisy) waveforms,
/// labels from the clean ones.
pub fn sample_from_trajectories(
    clean: &Trajectory,
    measured: &Trajectory,
    g: &GridTopology,
    frame: &FrameConfig,
    sample_index: usize,
) -> Result<GraphSample> {
    if clean.samples() != measured.samples()
        || clean.bus_count() != g.bus_count()
        || measured.bus_count() != g.bus_count()
        || clean.load_buses() != g.load_buses()
    {
        return Err(Error::Shape("trajectory does not match topology or its pair".into()));
    }
    let grid = FrameGrid::new(frame, clean)?;
    let t_len = grid.frames();
    let rows = feature_buses(g, frame.compact_features);
    let mut features = vec![0.0; rows.len() * FEATURES_PER_NODE * t_len];
    for (slot, &bus) in g.load_buses().iter().enumerate() {
        let row = rows.iter().position(|&b| b == bus).expect("load bus has a feature row");
        for p in 0..PHASES {
            let v = measured.voltage_series(bus, p);
            let i = measured.load_current_series(slot, p);
            for f in 0..t_len {
                let s = 0.5 * grid.phasor(&v, f) * grid.phasor(&i, f).conj();
                features[(row * FEATURES_PER_NODE + p) * t_len + f] = s.re;
                features[(row * FEATURES_PER_NODE + PHASES + p) * t_len + f] = s.im;
            }
        }
    }
    let monitored = g.monitored_buses();
    let mut labels = vec![0.0; monitored.len() * LABELS_PER_BUS * t_len];
    for (l, &bus) in monitored.iter().enumerate() {
        for p in 0..PHASES {
            let v = clean.voltage_series(bus, p);
            for f in 0..t_len {
                let c = grid.phasor(&v, f);
                labels[(l * LABELS_PER_BUS + p) * t_len + f] = c.norm();
                labels[(l * LABELS_PER_BUS + PHASES + p) * t_len + f] = principal_angle(c.arg());
            }
        }
    }
    if features.iter().chain(&labels).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("sample {sample_index} has non-finite entries")));
    }
    Ok(GraphSample { features, labels, sample_index })
}

/// Clean and measured trajectories of one sample.
#[derive(Clone, Debug)]
pub struct TrajectoryPair {
    pub clean: Trajectory,
    pub noisy: Trajectory,
}

/// Simulates sample `index` of the dataset rooted at `root_seed`.
pub fn generate_pair(g: &GridTopology, cfg: &SimConfig, root_seed: u64, index: usize) -> Result<TrajectoryPair> {
    let base = cfg.base_loads(g)?;
    let scenario = make_scenario(g, &base, &cfg.scenario(), seeds::derive_seed(root_seed, stream::SCENARIO, index as u64))?;
    let model = build_circuit_ode(g, &scenario, cfg.source())?;
    let clean = simulate_trajectory(&model, &cfg.integration(), &scenario)?;
    let noisy = add_noise(&clean, cfg.noise_sigma, seeds::derive_seed(root_seed, stream::NOISE, index as u64))?;
    Ok(TrajectoryPair { clean, noisy })
}

fn manifest_for(g: &GridTopology, cfg: &SimConfig, seed: u64, frames: usize) -> DatasetManifest {
    let rows = feature_buses(g, cfg.compact_features);
    let window = samples_per_period(cfg.f0, cfg.fs).unwrap_or(1);
    DatasetManifest {
        format_version: FORMAT_VERSION,
        tool_version: crate::VERSION.to_string(),
        node_count: rows.len(),
        feature_buses: rows,
        feature_count: FEATURES_PER_NODE,
        frame_count: frames,
        monitored_buses: g.monitored_buses().to_vec(),
        label_channels: LABELS_PER_BUS,
        frame_times: (0..frames).map(|f| (f * window) as f64 / cfg.fs).collect(),
        topology_digest: g.network_digest(),
        seed,
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        compact_features: cfg.compact_features,
        scaler: None,
        sim: cfg.clone(),
    }
}

/// Assembles an unnormalized dataset from simulated pairs; the first
/// `cfg.n_train` become the training split.
pub fn assemble_dataset(
    pairs: &[TrajectoryPair],
    g: &GridTopology,
    cfg: &SimConfig,
    seed: u64,
) -> Result<GraphDataset> {
    let first = pairs.first().ok_or_else(|| Error::Shape("no trajectories".into()))?;
    if pairs.len() != cfg.n_train + cfg.n_test {
        return Err(Error::Shape(format!(
            "{} trajectories for a {}/{} split",
            pairs.len(),
            cfg.n_train,
            cfg.n_test
        )));
    }
    let frame = cfg.frame();
    let (dt, len) = (first.clean.dt, first.clean.samples());
    let samples = pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            if pair.clean.dt != dt || pair.clean.samples() != len {
                return Err(Error::Shape(format!("trajectory {i} has a different dt or duration")));
            }
            sample_from_trajectories(&pair.clean, &pair.noisy, g, &frame, i)
        })
        .collect::<Result<Vec<_>>>()?;
    let frames = FrameGrid::new(&frame, &first.clean)?.frames();
    Ok(GraphDataset { manifest: manifest_for(g, cfg, seed, frames), samples })
}

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Simulates and assembles the whole dataset (unnormalized). `per_sample` sees
/// every pair before it is dropped; results are merged in sample order so the
/// worker count never changes the output.
pub fn generate_dataset_with<T, F>(
    g: &GridTopology,
    cfg: &SimConfig,
    seed: u64,
    workers: usize,
    per_sample: F,
) -> Result<(GraphDataset, Vec<T>)>
where
    T: Send,
    F: Fn(usize, &TrajectoryPair) -> Result<T> + Sync,
{
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_test;
    let frame = cfg.frame();
    let results: Vec<Result<(GraphSample, T, usize)>> = thread_pool(workers)?.install(|| {
        (0..total)
            .into_par_iter()
            .map(|i| {
                let pair = generate_pair(g, cfg, seed, i)?;
                let sample = sample_from_trajectories(&pair.clean, &pair.noisy, g, &frame, i)?;
                let frames = sample.labels.len() / (g.monitored_buses().len().max(1) * LABELS_PER_BUS);
                let extra = per_sample(i, &pair)?;
                Ok((sample, extra, frames))
            })
            .collect()
    });
    let mut samples = Vec::with_capacity(total);
    let mut extras = Vec::with_capacity(total);
    let mut frames = 0;
    for r in results {
        let (s, e, f) = r?;
        frames = f;
        samples.push(s);
        extras.push(e);
    }
    Ok((GraphDataset { manifest: manifest_for(g, cfg, seed, frames), samples }, extras))
}

pub fn generate_dataset(g: &GridTopology, cfg: &SimConfig, seed: u64, workers: usize) -> Result<GraphDataset> {
    Ok(generate_dataset_with(g, cfg, seed, workers, |_, _| Ok(()))?.0)
}

/// Fits min–max scaling on the training split and applies it to both splits.
/// A constant feature maps to 0.
pub fn normalize_dataset(d: &GraphDataset) -> Result<(GraphDataset, ScalerParams)> {
    let m = &d.manifest;
    if m.n_train == 0 || d.samples.len() < m.n_train {
        return Err(Error::Config("training split is empty".into()));
    }
    let channels = m.feature_count;
    let t_len = m.frame_count;
    let mut min = vec![f64::INFINITY; channels];
    let mut max = vec![f64::NEG_INFINITY; channels];
    for s in d.train() {
        for (c, chunk) in s.features.chunks(t_len).enumerate() {
            for &x in chunk {
                min[c % channels] = min[c % channels].min(x);
                max[c % channels] = max[c % channels].max(x);
            }
        }
    }
    let scaler = ScalerParams { min, max };
    let mut out = d.clone();
    for s in &mut out.samples {
        scaler.transform(&mut s.features, t_len);
    }
    out.manifest.scaler = Some(scaler.clone());
    Ok((out, scaler))
}

const SPLITS: [&str; 2] = ["train", "test"];

impl GraphDataset {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        crate::io::create_dir(dir)?;
        write_json(dir.join("manifest.json"), &self.manifest)?;
        for (name, split) in SPLITS.iter().zip([self.train(), self.test()]) {
            let features: Vec<f64> = split.iter().flat_map(|s| s.features.iter().copied()).collect();
            let labels: Vec<f64> = split.iter().flat_map(|s| s.labels.iter().copied()).collect();
            write_tensor(dir.join(format!("{name}_features.bin")), &features)?;
            write_tensor(dir.join(format!("{name}_labels.bin")), &labels)?;
        }
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = read_json(dir.join("manifest.json"))?;
        let (fl, ll) = (manifest.feature_len(), manifest.label_len());
        let mut samples = Vec::with_capacity(manifest.n_train + manifest.n_test);
        for (name, count) in SPLITS.iter().zip([manifest.n_train, manifest.n_test]) {
            let features = read_tensor(dir.join(format!("{name}_features.bin")), count * fl)?;
            let labels = read_tensor(dir.join(format!("{name}_labels.bin")), count * ll)?;
            for k in 0..count {
                samples.push(GraphSample {
                    features: features[k * fl..(k + 1) * fl].to_vec(),
                    labels: labels[k * ll..(k + 1) * ll].to_vec(),
                    sample_index: samples.len(),
                });
            }
        }
        Ok(Self { manifest, samples })
    }

    /// Long-format CSV of every frame: one row per (sample, frame, bus, channel).
    pub fn dump_csv<W: std::io::Write>(&self, out: &mut W, split: Option<&str>, sample: Option<usize>) -> Result<()> {
        let io = |e| Error::io("<csv>", e);
        let m = &self.manifest;
        writeln!(out, "split,sample,frame,time_s,kind,bus,channel,value").map_err(io)?;
        let feature_names = ["p_a", "p_b", "p_c", "q_a", "q_b", "q_c"];
        let label_names = ["vmag_a", "vmag_b", "vmag_c", "vang_a", "vang_b", "vang_c"];
        for (name, samples) in SPLITS.iter().zip([self.train(), self.test()]) {
            if split.is_some_and(|s| s != *name) {
                continue;
            }
            for (k, s) in samples.iter().enumerate() {
                if sample.is_some_and(|want| want != k) {
                    continue;
                }
                for f in 0..m.frame_count {
                    let t = m.frame_times[f];
                    for (r, &bus) in m.feature_buses.iter().enumerate() {
                        for (c, ch) in feature_names.iter().enumerate() {
                            let v = s.features[(r * m.feature_count + c) * m.frame_count + f];
                            writeln!(out, "{name},{k},{f},{t},feature,{bus},{ch},{v}").map_err(io)?;
                        }
                    }
                    for (l, &bus) in m.monitored_buses.iter().enumerate() {
                        for (c, ch) in label_names.iter().enumerate() {
                            let v = s.labels[(l * m.label_channels + c) * m.frame_count + f];
                            writeln!(out, "{name},{k},{f},{t},label,{bus},{ch},{v}").map_err(io)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
