//! Time-domain branch-current model of the grid.
//!
//! States per phase are the branch currents plus one inductor current per
//! load (the `-jB` part of the load admittance). Source buses are ideal
//! balanced sinusoids. Every other bus must carry a load conductance, which
//! makes its voltage an algebraic function of the states through KCL:
//!
//! ```text
//! v_k = (Σ i_in - i_Lk) / G_k
//! di_ij/dt = (-R_ij i_ij + v_i - v_j) / L_ij
//! di_Lk/dt = ω B_k v_k
//! ```

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::scenario::{LoadAdmittance, Scenario};
use super::trajectory::Trajectory;
use crate::error::{Error, Result};
use crate::grid::{GridTopology, PHASES};

/// Largest Gershgorin-bounded `|λ|·h` allowed for a sub-step.
const MAX_STEP_SPECTRAL_PRODUCT: f64 = 2.0;
/// Any waveform sample above this magnitude (p.u.) is treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 10.0;

/// Ideal source settings shared by every source bus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceSpec {
    pub magnitude: f64,
    /// Phase-a angle, radians. Phases b and c lag by 120° and 240°.
    pub angle: f64,
    pub f0: f64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self { magnitude: 1.0, angle: 0.0, f0: 60.0 }
    }
}

pub(crate) fn phase_shift(p: usize) -> f64 {
    -2.0 * std::f64::consts::PI * p as f64 / 3.0
}

#[derive(Clone, Debug)]
struct PhaseLoads {
    /// Per bus; zero for source buses.
    conductance: Vec<f64>,
    /// `ω·B` per bus (inverse load inductance).
    inv_inductance: Vec<f64>,
}

/// Linear ODE `x' = M(t) x + f(t)` built from a topology and a scenario.
#[derive(Clone, Debug)]
pub struct CircuitModel {
    topology: GridTopology,
    source: SourceSpec,
    omega: f64,
    /// Bus id to position in `load_buses`.
    load_slot: Vec<Option<usize>>,
    pre: [PhaseLoads; PHASES],
    post: [PhaseLoads; PHASES],
    change_time: f64,
}

fn phase_loads(g: &GridTopology, loads: &[LoadAdmittance], p: usize, omega: f64) -> PhaseLoads {
    let n = g.bus_count();
    let mut conductance = vec![0.0; n];
    let mut inv_inductance = vec![0.0; n];
    for (y, &bus) in loads.iter().zip(g.load_buses()) {
        conductance[bus] = y.conductance[p];
        inv_inductance[bus] = omega * y.susceptance[p];
    }
    PhaseLoads { conductance, inv_inductance }
}

/// Assembles the circuit ODE. Fails when a non-source bus has no load, since
/// its voltage is then not determined by KCL.
pub fn build_circuit_ode(g: &GridTopology, s: &Scenario, source: SourceSpec) -> Result<CircuitModel> {
    if s.base_load_admittance.len() != g.load_buses().len() || s.multipliers.len() != g.load_buses().len() {
        return Err(Error::Shape("scenario does not match the topology's load buses".into()));
    }
    if g.source_buses().is_empty() {
        return Err(Error::SingularNetwork("no source bus".into()));
    }
    let mut load_slot = vec![None; g.bus_count()];
    for (k, &bus) in g.load_buses().iter().enumerate() {
        load_slot[bus] = Some(k);
    }
    let post_loads = s.post_change_loads();
    for (k, &bus) in g.load_buses().iter().enumerate() {
        s.base_load_admittance[k].validate(bus)?;
        post_loads[k].validate(bus)?;
    }
    for bus in 0..g.bus_count() {
        if !g.is_source(bus) && load_slot[bus].is_none() {
            return Err(Error::SingularNetwork(format!(
                "bus {bus} has zero load admittance; its voltage is undefined"
            )));
        }
    }
    if !(source.f0 > 0.0 && source.magnitude.is_finite()) {
        return Err(Error::Config("source frequency must be positive".into()));
    }
    let omega = 2.0 * std::f64::consts::PI * source.f0;
    let pre = std::array::from_fn(|p| phase_loads(g, &s.base_load_admittance, p, omega));
    let post = std::array::from_fn(|p| phase_loads(g, &post_loads, p, omega));
    Ok(CircuitModel {
        topology: g.clone(),
        source,
        omega,
        load_slot,
        pre,
        post,
        change_time: s.change_time,
    })
}

/// Integration settings for [`simulate_trajectory`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Integration {
    pub dt: f64,
    pub duration: f64,
    /// RK4 sub-steps per output sample; `None` picks the smallest stable count.
    pub substeps: Option<usize>,
}

impl CircuitModel {
    pub fn topology(&self) -> &GridTopology {
        &self.topology
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn change_time(&self) -> f64 {
        self.change_time
    }

    fn state_len(&self) -> usize {
        self.topology.branches().len() + self.topology.load_buses().len()
    }

    fn source_voltage(&self, p: usize, t: f64) -> f64 {
        self.source.magnitude * (self.omega * t + self.source.angle + phase_shift(p)).cos()
    }

    /// Source voltage phasor for phase `p` (peak-amplitude convention).
    pub fn source_phasor(&self, p: usize) -> Complex64 {
        Complex64::from_polar(self.source.magnitude, self.source.angle + phase_shift(p))
    }

    /// Bus voltages from the state (branch currents, then load inductor currents).
    fn voltages(&self, loads: &PhaseLoads, p: usize, t: f64, state: &[f64], v: &mut [f64]) {
        let g = &self.topology;
        let nb = g.branches().len();
        v.iter_mut().for_each(|x| *x = 0.0);
        for (e, br) in g.branches().iter().enumerate() {
            v[br.from_bus] -= state[e];
            v[br.to_bus] += state[e];
        }
        for bus in 0..g.bus_count() {
            if g.is_source(bus) {
                v[bus] = self.source_voltage(p, t);
            } else {
                let slot = self.load_slot[bus].expect("validated at build");
                v[bus] = (v[bus] - state[nb + slot]) / loads.conductance[bus];
            }
        }
    }

    fn rhs(&self, loads: &PhaseLoads, p: usize, t: f64, state: &[f64], v: &mut [f64], out: &mut [f64]) {
        self.voltages(loads, p, t, state, v);
        let g = &self.topology;
        let nb = g.branches().len();
        for (e, br) in g.branches().iter().enumerate() {
            out[e] = (-br.resistance * state[e] + v[br.from_bus] - v[br.to_bus]) / br.inductance;
        }
        for (slot, &bus) in g.load_buses().iter().enumerate() {
            out[nb + slot] = loads.inv_inductance[bus] * v[bus];
        }
    }

    /// Gershgorin bound on the spectral radius of the state matrix.
    fn spectral_bound(&self) -> f64 {
        let g = &self.topology;
        let n = g.bus_count();
        let mut degree = vec![0usize; n];
        for br in g.branches() {
            degree[br.from_bus] += 1;
            degree[br.to_bus] += 1;
        }
        let mut bound: f64 = 0.0;
        for loads in self.pre.iter().chain(self.post.iter()) {
            // |∂v_k/∂x| summed over the states touching bus k
            let coupling: Vec<f64> = (0..n)
                .map(|k| {
                    if g.is_source(k) {
                        0.0
                    } else {
                        (degree[k] + 1) as f64 / loads.conductance[k]
                    }
                })
                .collect();
            for br in g.branches() {
                let row = (br.resistance + coupling[br.from_bus] + coupling[br.to_bus]) / br.inductance;
                bound = bound.max(row);
            }
            for &bus in g.load_buses() {
                bound = bound.max(loads.inv_inductance[bus] * coupling[bus]);
            }
        }
        bound
    }

    /// Sub-steps per sample keeping RK4 inside its stability region.
    pub fn stable_substeps(&self, dt: f64) -> usize {
        ((self.spectral_bound() * dt / MAX_STEP_SPECTRAL_PRODUCT).ceil() as usize).max(1)
    }

    /// Direct phasor solve of the network with the given loads.
    ///
    /// Returns per-phase bus voltage phasors and branch current phasors.
    pub fn steady_state(&self, loads: &[LoadAdmittance]) -> Result<SteadyState> {
        let g = &self.topology;
        let n = g.bus_count();
        let unknown: Vec<usize> = (0..n).filter(|&b| !g.is_source(b)).collect();
        let mut index = vec![usize::MAX; n];
        for (k, &b) in unknown.iter().enumerate() {
            index[b] = k;
        }
        let mut voltages = vec![[Complex64::new(0.0, 0.0); PHASES]; n];
        let mut currents = vec![[Complex64::new(0.0, 0.0); PHASES]; g.branches().len()];
        for p in 0..PHASES {
            let m = unknown.len();
            let mut y = DMatrix::<Complex64>::zeros(m, m);
            let mut rhs = DMatrix::<Complex64>::zeros(m, 1);
            for br in g.branches() {
                let ys = Complex64::new(br.resistance, self.omega * br.inductance).inv();
                for (a, b) in [(br.from_bus, br.to_bus), (br.to_bus, br.from_bus)] {
                    if g.is_source(a) {
                        continue;
                    }
                    y[(index[a], index[a])] += ys;
                    if g.is_source(b) {
                        rhs[(index[a], 0)] += ys * self.source_phasor(p);
                    } else {
                        y[(index[a], index[b])] -= ys;
                    }
                }
            }
            for (slot, &bus) in g.load_buses().iter().enumerate() {
                let yl = Complex64::new(loads[slot].conductance[p], -loads[slot].susceptance[p]);
                y[(index[bus], index[bus])] += yl;
            }
            let sol = y
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::SingularNetwork("nodal admittance matrix is singular".into()))?;
            for bus in 0..n {
                voltages[bus][p] = if g.is_source(bus) { self.source_phasor(p) } else { sol[(index[bus], 0)] };
            }
            for (e, br) in g.branches().iter().enumerate() {
                let z = Complex64::new(br.resistance, self.omega * br.inductance);
                currents[e][p] = (voltages[br.from_bus][p] - voltages[br.to_bus][p]) / z;
            }
        }
        Ok(SteadyState { voltages, currents })
    }
}

/// Phasors (peak amplitude) of a sinusoidal steady state.
#[derive(Clone, Debug)]
pub struct SteadyState {
    /// `[bus][phase]`
    pub voltages: Vec<[Complex64; PHASES]>,
    /// `[branch][phase]`
    pub currents: Vec<[Complex64; PHASES]>,
}

/// Fixed-step RK4 integration from the pre-change sinusoidal steady state.
///
/// The loads step to their post-change values at the first sample instant at
/// or after `change_time`.
pub fn simulate_trajectory(model: &CircuitModel, integ: &Integration, scenario: &Scenario) -> Result<Trajectory> {
    let Integration { dt, duration, substeps } = *integ;
    let f0 = model.omega / (2.0 * std::f64::consts::PI);
    if !(dt > 0.0 && dt <= 1.0 / (20.0 * f0) * (1.0 + 1e-12)) {
        return Err(Error::Config(format!("dt {dt} must be positive and at most 1/(20 f0)")));
    }
    if !(duration > 0.0) {
        return Err(Error::Config("duration must be positive".into()));
    }
    if !(model.change_time > 0.0 && model.change_time < duration) {
        return Err(Error::Config(format!(
            "change time {} outside the window (0, {duration})",
            model.change_time
        )));
    }
    let samples = (duration / dt - 1e-9).ceil() as usize;
    let change_index = (model.change_time / dt - 1e-9).ceil() as usize;
    let substeps = substeps.unwrap_or_else(|| model.stable_substeps(dt)).max(1);
    let h = dt / substeps as f64;

    let g = &model.topology;
    let (n, nb, nl) = (g.bus_count(), g.branches().len(), g.load_buses().len());
    let mut traj = Trajectory::zeros(g, dt, samples, scenario.clone());
    let steady = model.steady_state(&scenario.base_load_admittance)?;

    let len = model.state_len();
    let mut v = vec![0.0; n];
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);

    for p in 0..PHASES {
        let mut state = vec![0.0; len];
        for e in 0..nb {
            state[e] = steady.currents[e][p].re;
        }
        for (slot, &bus) in g.load_buses().iter().enumerate() {
            let b = scenario.base_load_admittance[slot].susceptance[p];
            // i_L = -jB V
            state[nb + slot] = (Complex64::new(0.0, -b) * steady.voltages[bus][p]).re;
        }

        for k in 0..samples {
            let loads = if k >= change_index { &model.post[p] } else { &model.pre[p] };
            let t = k as f64 * dt;
            model.voltages(loads, p, t, &state, &mut v);
            for bus in 0..n {
                traj.set_voltage(k, bus, p, v[bus]);
            }
            for e in 0..nb {
                traj.set_branch_current(k, e, p, state[e]);
            }
            for (slot, &bus) in g.load_buses().iter().enumerate() {
                traj.set_load_current(k, slot, p, loads.conductance[bus] * v[bus] + state[nb + slot]);
            }
            let worst = v.iter().chain(state.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
            if !(worst < DIVERGENCE_BOUND) {
                return Err(Error::Divergence(format!(
                    "waveform magnitude {worst:.3e} p.u. at t = {t:.6} s (phase {p})"
                )));
            }
            if k + 1 == samples {
                break;
            }
            for s in 0..substeps {
                let t0 = t + s as f64 * h;
                model.rhs(loads, p, t0, &state, &mut v, &mut k1);
                axpy(&state, 0.5 * h, &k1, &mut tmp);
                model.rhs(loads, p, t0 + 0.5 * h, &tmp, &mut v, &mut k2);
                axpy(&state, 0.5 * h, &k2, &mut tmp);
                model.rhs(loads, p, t0 + 0.5 * h, &tmp, &mut v, &mut k3);
                axpy(&state, h, &k3, &mut tmp);
                model.rhs(loads, p, t0 + h, &tmp, &mut v, &mut k4);
                for i in 0..len {
                    state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
    }
    debug_assert_eq!(nl, traj.load_count());
    Ok(traj)
}

fn axpy(x: &[f64], a: f64, y: &[f64], out: &mut [f64]) {
    for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_topology, BranchSpec, TopologySpec};
    use crate::sim::phasor::SingleBinDft;

    fn single_branch(r: f64, l: f64) -> GridTopology {
        build_topology(&TopologySpec {
            bus_count: 2,
            branches: vec![BranchSpec { from: 0, to: 1, r_ohm: r, l_henry: l }],
            sources: vec![0],
            loads: vec![1],
            overlap: vec![],
        })
        .unwrap()
    }

    fn scenario(loads: Vec<LoadAdmittance>, multipliers: Vec<f64>) -> Scenario {
        Scenario { base_load_admittance: loads, multipliers, change_time: 0.2, seed: 0 }
    }

    const INTEG: Integration = Integration { dt: 1.0 / 12_000.0, duration: 0.6, substeps: None };

    #[test]
    fn single_branch_current_matches_closed_form_rl_solution() {
        let (r, l, gl) = (0.05, 0.1 / 377.0, 0.8);
        let g = single_branch(r, l);
        let s = scenario(vec![LoadAdmittance::balanced(gl, 0.0)], vec![1.0]);
        let model = build_circuit_ode(&g, &s, SourceSpec::default()).unwrap();
        let traj = simulate_trajectory(&model, &INTEG, &s).unwrap();
        let omega = model.omega();
        // |V| / |R + jωL + Z_load|
        let expected = 1.0 / Complex64::new(r + 1.0 / gl, omega * l).norm();
        let dft = SingleBinDft::new(60.0, 12_000.0).unwrap();
        let window: Vec<f64> = (0..200).map(|k| traj.branch_current(k, 0, 0)).collect();
        let c = dft.project(&window).unwrap();
        assert!((c.norm() - expected).abs() < 1e-4, "{} vs {expected}", c.norm());
    }

    fn phase_phasors(traj: &Trajectory, bus: usize, frame: usize) -> Vec<Complex64> {
        let dft = SingleBinDft::new(60.0, 12_000.0).unwrap();
        (0..3)
            .map(|p| {
                let w: Vec<f64> = (frame * 200..(frame + 1) * 200).map(|k| traj.voltage(k, bus, p)).collect();
                dft.project(&w).unwrap()
            })
            .collect()
    }

    fn assert_balanced(ph: &[Complex64]) {
        let rot = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI / 3.0);
        assert!((ph[1] - ph[0] * rot).norm() < 1e-6, "{}", (ph[1] - ph[0] * rot).norm());
        assert!((ph[2] - ph[1] * rot).norm() < 1e-6, "{}", (ph[2] - ph[1] * rot).norm());
    }

    #[test]
    fn balanced_phases_are_shifted_copies() {
        let g = single_branch(0.05, 0.1 / 377.0);
        // resistive loads settle within a frame of the step
        let s = scenario(vec![LoadAdmittance::balanced(0.8, 0.0)], vec![1.2]);
        let model = build_circuit_ode(&g, &s, SourceSpec::default()).unwrap();
        let traj = simulate_trajectory(&model, &INTEG, &s).unwrap();
        for frame in [0usize, 11, 14, 35] {
            assert_balanced(&phase_phasors(&traj, 1, frame));
        }
        // an inductive step leaves a point-on-wave dependent DC offset, so
        // symmetry is only exact before the change
        let s = scenario(vec![LoadAdmittance::balanced(0.8, 0.2)], vec![1.2]);
        let model = build_circuit_ode(&g, &s, SourceSpec::default()).unwrap();
        let traj = simulate_trajectory(&model, &INTEG, &s).unwrap();
        for frame in [0usize, 5, 11] {
            assert_balanced(&phase_phasors(&traj, 1, frame));
        }
    }

    #[test]
    fn missing_load_is_a_singular_network() {
        let g = build_topology(&TopologySpec {
            bus_count: 3,
            branches: vec![
                BranchSpec { from: 0, to: 1, r_ohm: 0.01, l_henry: 1e-4 },
                BranchSpec { from: 1, to: 2, r_ohm: 0.01, l_henry: 1e-4 },
            ],
            sources: vec![0],
            loads: vec![1],
            overlap: vec![],
        })
        .unwrap();
        let s = scenario(vec![LoadAdmittance::balanced(0.5, 0.1)], vec![1.0]);
        let err = build_circuit_ode(&g, &s, SourceSpec::default()).unwrap_err();
        assert!(matches!(err, Error::SingularNetwork(_)), "{err}");
        assert_eq!(err.exit_code(), 4);

        let g = single_branch(0.05, 1e-4);
        let s = scenario(vec![LoadAdmittance::balanced(0.0, 0.1)], vec![1.0]);
        assert!(build_circuit_ode(&g, &s, SourceSpec::default()).is_err());
    }

    #[test]
    fn window_sample_count() {
        let g = single_branch(0.05, 1e-3);
        let s = scenario(vec![LoadAdmittance::balanced(0.5, 0.1)], vec![1.0]);
        let model = build_circuit_ode(&g, &s, SourceSpec::default()).unwrap();
        let traj = simulate_trajectory(&model, &INTEG, &s).unwrap();
        assert_eq!(traj.samples(), 7200);
        let coarse = Integration { dt: 1e-4, ..INTEG };
        assert_eq!(simulate_trajectory(&model, &coarse, &s).unwrap().samples(), 6000);
    }

    #[test]
    fn unit_multipliers_leave_steady_state_unchanged() {
        let g = build_topology(&crate::grid::synthetic::five_bus()).unwrap();
        let s = scenario(vec![LoadAdmittance::balanced(0.3, 0.1); 4], vec![1.0; 4]);
        let model = build_circuit_ode(&g, &s, SourceSpec::default()).unwrap();
        let traj = simulate_trajectory(&model, &INTEG, &s).unwrap();
        let dft = SingleBinDft::new(60.0, 12_000.0).unwrap();
        for bus in 0..5 {
            let first: Vec<f64> = (0..200).map(|k| traj.voltage(k, bus, 0)).collect();
            let last: Vec<f64> = (7000..7200).map(|k| traj.voltage(k, bus, 0)).collect();
            let (a, b) = (dft.project(&first).unwrap(), dft.project(&last).unwrap());
            assert!((a - b).norm() < 1e-8, "bus {bus}: {a} vs {b}");
        }
    }

    #[test]
    fn rejects_coarse_step_and_bad_change_time() {
        let g = single_branch(0.05, 1e-3);
        let s = scenario(vec![LoadAdmittance::balanced(0.5, 0.1)], vec![1.0]);
        let model = build_circuit_ode(&g, &s, SourceSpec::default()).unwrap();
        let coarse = Integration { dt: 1.0 / 600.0, ..INTEG };
        assert!(matches!(simulate_trajectory(&model, &coarse, &s), Err(Error::Config(_))));
        let short = Integration { duration: 0.1, ..INTEG };
        assert!(matches!(simulate_trajectory(&model, &short, &s), Err(Error::Config(_))));
    }

    #[test]
    fn unstable_step_is_reported_as_divergence() {
        let g = build_topology(&crate::grid::synthetic::five_bus()).unwrap();
        let s = scenario(vec![LoadAdmittance::balanced(0.3, 0.1); 4], vec![1.0; 4]);
        let model = build_circuit_ode(&g, &s, SourceSpec::default()).unwrap();
        assert!(model.stable_substeps(1.0 / 12_000.0) > 1);
        let forced = Integration { substeps: Some(1), dt: 1.0 / 1200.0, ..INTEG };
        let err = simulate_trajectory(&model, &forced, &s).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err}");
    }
}
