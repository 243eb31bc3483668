//! Model-based overlap estimates `x̂ᴹ`: the filter runs on instrumented
//! branches and its voltage estimates are reduced to phasor frames on the
//! label grid.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dse::{branch_measurements, build_state_space, run_filter, FilterConfig, NoiseLevels, NX};
use crate::error::{Error, Result};
use crate::grid::{overlap_selector, BranchParams, GridTopology, PHASES};
use crate::io::{read_f64s, write_f64s};
use crate::sim::dataset::{thread_pool, FrameGrid, LABELS_PER_BUS};
use crate::sim::phasor::principal_angle;
use crate::sim::{generate_dataset_with, generate_pair, FrameConfig, GraphDataset, SimConfig, Trajectory};

const MAGIC: &[u8; 8] = b"PIGSMBE1";

/// One filter per instrumented branch and the overlap slots it serves.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFilter {
    pub branch: usize,
    pub params: BranchParams,
    /// `(overlap slot, endpoint)`; endpoint 0 is `from_bus`, 1 is `to_bus`.
    pub outputs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapPlan {
    pub filters: Vec<BranchFilter>,
    pub overlap_buses: Vec<usize>,
}

/// Picks an instrumented branch for every overlap bus, preferring branches
/// whose both endpoints are overlap buses so one filter covers both.
pub fn overlap_plan(g: &GridTopology) -> Result<OverlapPlan> {
    let selector = overlap_selector(g)?;
    let buses: Vec<usize> = selector.buses().collect();
    let mut filters: Vec<BranchFilter> = Vec::new();
    for (slot, &bus) in buses.iter().enumerate() {
        let incident = |b: &&BranchParams| b.from_bus == bus || b.to_bus == bus;
        let both = |b: &&BranchParams| buses.contains(&b.from_bus) && buses.contains(&b.to_bus);
        let chosen = g
            .branches()
            .iter()
            .filter(incident)
            .find(both)
            .or_else(|| g.branches().iter().find(incident))
            .ok_or_else(|| Error::Topology(format!("overlap bus {bus} has no incident branch")))?;
        let index = g.branch_index(chosen.from_bus, chosen.to_bus).expect("branch of this topology");
        let side = usize::from(chosen.to_bus == bus);
        match filters.iter_mut().find(|f| f.branch == index) {
            Some(f) => f.outputs.push((slot, side)),
            None => filters.push(BranchFilter { branch: index, params: chosen.clone(), outputs: vec![(slot, side)] }),
        }
    }
    Ok(OverlapPlan { filters, overlap_buses: buses })
}

/// Runs the planned filters on one measured trajectory and returns the
/// `(O, P, T)` magnitude/angle frames of the estimated bus voltages.
pub fn estimate_overlap(t: &Trajectory, plan: &OverlapPlan, noise: NoiseLevels, frame: &FrameConfig) -> Result<Vec<f64>> {
    let grid = FrameGrid::new(frame, t)?;
    let frames = grid.frames();
    let row_len = LABELS_PER_BUS * frames;
    let mut out = vec![0.0; plan.overlap_buses.len() * row_len];
    for f in &plan.filters {
        let (zx, zu) = branch_measurements(t, f.branch)?;
        let model = build_state_space(&f.params, t.dt, noise)?;
        let est = run_filter(&zx, &zu, &model)?;
        for &(slot, side) in &f.outputs {
            for p in 0..PHASES {
                let series: Vec<f64> = est.u_hat.iter().map(|u| u[side * NX + p]).collect();
                for k in 0..frames {
                    let c = grid.phasor(&series, k);
                    out[(slot * LABELS_PER_BUS + p) * frames + k] = c.norm();
                    out[(slot * LABELS_PER_BUS + PHASES + p) * frames + k] = principal_angle(c.arg());
                }
            }
        }
    }
    Ok(out)
}

/// Per-sample `x̂ᴹ`, in dataset sample order. `None` marks a sample whose
/// filter failed; it is left out of physics-informed training.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBasedEstimates {
    pub overlap_buses: Vec<usize>,
    pub row_len: usize,
    pub per_sample: Vec<Option<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    overlap_buses: Vec<usize>,
    row_len: usize,
    present: Vec<bool>,
}

impl ModelBasedEstimates {
    pub fn failures(&self) -> usize {
        self.per_sample.iter().filter(|s| s.is_none()).count()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            overlap_buses: self.overlap_buses.clone(),
            row_len: self.row_len,
            present: self.per_sample.iter().map(Option::is_some).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for s in self.per_sample.iter().flatten() {
            write_f64s(&mut buf, s);
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a model-based estimate file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(body).map_err(|e| Error::json(path, e))?;
        let mut rest = &bytes[16 + hlen..];
        let len = h.overlap_buses.len() * h.row_len;
        let present = h.present.iter().filter(|&&p| p).count();
        if rest.len() != 8 * len * present {
            return Err(bad("payload size does not match header"));
        }
        let per_sample = h.present.iter().map(|&p| p.then(|| read_f64s(&mut rest, len))).collect();
        Ok(Self { overlap_buses: h.overlap_buses, row_len: h.row_len, per_sample })
    }
}

/// Filter failures become `None` with a warning; anything else is an error.
pub(crate) fn tolerate_filter_failure(index: usize, r: Result<Vec<f64>>) -> Result<Option<Vec<f64>>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (Error::Singular(_) | Error::NonFinite(_))) => {
            log::warn!("model-based estimate of sample {index} failed and is excluded: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Re-simulates every sample of the dataset from its recorded seeds and runs
/// the overlap filters on the measured waveforms.
pub fn run_model_based_for_dataset(
    dataset: &GraphDataset,
    g: &GridTopology,
    filter: &FilterConfig,
    workers: usize,
) -> Result<ModelBasedEstimates> {
    let m = &dataset.manifest;
    if g.network_digest() != m.topology_digest {
        return Err(Error::Config("topology does not match the one the dataset was generated on".into()));
    }
    let plan = overlap_plan(g)?;
    let noise = filter.resolve(m.sim.noise_sigma)?;
    let frame = m.sim.frame();
    let indices: Vec<usize> = dataset.samples.iter().map(|s| s.sample_index).collect();
    let per_sample = thread_pool(workers)?.install(|| {
        indices
            .par_iter()
            .map(|&i| {
                let pair = generate_pair(g, &m.sim, m.seed, i)?;
                tolerate_filter_failure(i, estimate_overlap(&pair.noisy, &plan, noise, &frame))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let out = ModelBasedEstimates {
        overlap_buses: plan.overlap_buses,
        row_len: LABELS_PER_BUS * m.frame_count,
        per_sample,
    };
    if out.failures() > 0 {
        log::warn!("{} of {} samples have no model-based estimate", out.failures(), out.per_sample.len());
    }
    Ok(out)
}

/// Simulates a dataset and its model-based estimates in one pass, without
/// the re-simulation that [`run_model_based_for_dataset`] needs.
pub fn generate_with_estimates(
    g: &GridTopology,
    cfg: &SimConfig,
    filter: &FilterConfig,
    seed: u64,
    workers: usize,
) -> Result<(GraphDataset, ModelBasedEstimates)> {
    let plan = overlap_plan(g)?;
    let noise = filter.resolve(cfg.noise_sigma)?;
    let frame = cfg.frame();
    let (dataset, per_sample) = generate_dataset_with(g, cfg, seed, workers, |i, pair| {
        tolerate_filter_failure(i, estimate_overlap(&pair.noisy, &plan, noise, &frame))
    })?;
    let row_len = LABELS_PER_BUS * dataset.manifest.frame_count;
    Ok((dataset, ModelBasedEstimates { overlap_buses: plan.overlap_buses, row_len, per_sample }))
}
