use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::error::{Error, Result};
use crate::grid::{GridTopology, PHASES};
use crate::io::{read_f64s, write_f64s};

const MAGIC: &[u8; 8] = b"PIGSTRJ1";

/// Simulated waveforms, time-major: `[sample][bus|branch|load][phase]`, p.u.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    bus_count: usize,
    /// `(from, to)` per branch, canonical order.
    branches: Vec<(usize, usize)>,
    load_buses: Vec<usize>,
    samples: usize,
    voltages: Vec<f64>,
    branch_currents: Vec<f64>,
    load_currents: Vec<f64>,
    pub scenario: Scenario,
    pub noisy: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dt: f64,
    bus_count: usize,
    branches: Vec<(usize, usize)>,
    load_buses: Vec<usize>,
    samples: usize,
    scenario: Scenario,
    noisy: bool,
}

impl Trajectory {
    pub(crate) fn zeros(g: &GridTopology, dt: f64, samples: usize, scenario: Scenario) -> Self {
        let nb = g.branches().len();
        let nl = g.load_buses().len();
        Self {
            dt,
            bus_count: g.bus_count(),
            branches: g.branches().iter().map(|b| b.endpoints()).collect(),
            load_buses: g.load_buses().to_vec(),
            samples,
            voltages: vec![0.0; samples * g.bus_count() * PHASES],
            branch_currents: vec![0.0; samples * nb * PHASES],
            load_currents: vec![0.0; samples * nl * PHASES],
            scenario,
            noisy: false,
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[(usize, usize)] {
        &self.branches
    }

    pub fn load_count(&self) -> usize {
        self.load_buses.len()
    }

    pub fn load_buses(&self) -> &[usize] {
        &self.load_buses
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn voltage(&self, k: usize, bus: usize, p: usize) -> f64 {
        self.voltages[(k * self.bus_count + bus) * PHASES + p]
    }

    pub fn branch_current(&self, k: usize, branch: usize, p: usize) -> f64 {
        self.branch_currents[(k * self.branches.len() + branch) * PHASES + p]
    }

    /// Current drawn by the load at `load_buses()[slot]`.
    pub fn load_current(&self, k: usize, slot: usize, p: usize) -> f64 {
        self.load_currents[(k * self.load_buses.len() + slot) * PHASES + p]
    }

    pub(crate) fn set_voltage(&mut self, k: usize, bus: usize, p: usize, v: f64) {
        self.voltages[(k * self.bus_count + bus) * PHASES + p] = v;
    }

    pub(crate) fn set_branch_current(&mut self, k: usize, branch: usize, p: usize, v: f64) {
        let nb = self.branches.len();
        self.branch_currents[(k * nb + branch) * PHASES + p] = v;
    }

    pub(crate) fn set_load_current(&mut self, k: usize, slot: usize, p: usize, v: f64) {
        let nl = self.load_buses.len();
        self.load_currents[(k * nl + slot) * PHASES + p] = v;
    }

    /// All measured channels, for noise injection.
    pub(crate) fn channels_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.voltages, &mut self.branch_currents, &mut self.load_currents]
    }

    pub fn voltage_series(&self, bus: usize, p: usize) -> Vec<f64> {
        (0..self.samples).map(|k| self.voltage(k, bus, p)).collect()
    }

    pub fn branch_current_series(&self, branch: usize, p: usize) -> Vec<f64> {
        (0..self.samples).map(|k| self.branch_current(k, branch, p)).collect()
    }

    pub fn load_current_series(&self, slot: usize, p: usize) -> Vec<f64> {
        (0..self.samples).map(|k| self.load_current(k, slot, p)).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            dt: self.dt,
            bus_count: self.bus_count,
            branches: self.branches.clone(),
            load_buses: self.load_buses.clone(),
            samples: self.samples,
            scenario: self.scenario.clone(),
            noisy: self.noisy,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let mut buf = Vec::with_capacity(
            16 + json.len() + 8 * (self.voltages.len() + self.branch_currents.len() + self.load_currents.len()),
        );
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        write_f64s(&mut buf, &self.voltages);
        write_f64s(&mut buf, &self.branch_currents);
        write_f64s(&mut buf, &self.load_currents);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a trajectory file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(body).map_err(|e| Error::json(path, e))?;
        let mut rest = &bytes[16 + hlen..];
        let nv = h.samples * h.bus_count * PHASES;
        let nb = h.samples * h.branches.len() * PHASES;
        let nl = h.samples * h.load_buses.len() * PHASES;
        if rest.len() != 8 * (nv + nb + nl) {
            return Err(bad("payload size does not match header"));
        }
        let voltages = read_f64s(&mut rest, nv);
        let branch_currents = read_f64s(&mut rest, nb);
        let load_currents = read_f64s(&mut rest, nl);
        Ok(Self {
            dt: h.dt,
            bus_count: h.bus_count,
            branches: h.branches,
            load_buses: h.load_buses,
            samples: h.samples,
            voltages,
            branch_currents,
            load_currents,
            scenario: h.scenario,
            noisy: h.noisy,
        })
    }
}
