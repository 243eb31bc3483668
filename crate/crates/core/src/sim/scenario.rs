use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridTopology, PHASES};
use crate::seeds;

/// Per-phase constant admittance `Y = G - jB` of a load (siemens, per-unit).
///
/// `susceptance` is inductive and non-negative; the load is realized in the
/// time domain as a conductance in parallel with an inductor of `1/(ωB)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadAdmittance {
    pub conductance: [f64; PHASES],
    pub susceptance: [f64; PHASES],
}

impl LoadAdmittance {
    pub fn balanced(conductance: f64, susceptance: f64) -> Self {
        Self { conductance: [conductance; PHASES], susceptance: [susceptance; PHASES] }
    }

    pub fn scaled(&self, m: f64) -> Self {
        Self {
            conductance: self.conductance.map(|g| g * m),
            susceptance: self.susceptance.map(|b| b * m),
        }
    }

    pub(crate) fn validate(&self, bus: usize) -> Result<()> {
        for p in 0..PHASES {
            let (g, b) = (self.conductance[p], self.susceptance[p]);
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!(
                    "load at bus {bus} phase {p}: conductance must be positive, got {g}"
                )));
            }
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!(
                    "load at bus {bus} phase {p}: susceptance must be non-negative, got {b}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Closed interval the per-bus load multipliers are drawn from.
    pub multiplier_range: [f64; 2],
    /// Instant of the load step, seconds from window start.
    pub change_time: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { multiplier_range: [0.7, 1.3], change_time: 0.2 }
    }
}

/// One load-change experiment: base loads, the step multipliers and when the
/// step happens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Aligned with `GridTopology::load_buses`.
    pub base_load_admittance: Vec<LoadAdmittance>,
    /// Aligned with `GridTopology::load_buses`.
    pub multipliers: Vec<f64>,
    pub change_time: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn post_change_loads(&self) -> Vec<LoadAdmittance> {
        self.base_load_admittance
            .iter()
            .zip(&self.multipliers)
            .map(|(y, &m)| y.scaled(m))
            .collect()
    }
}

/// Draws uniform per-bus multipliers from `cfg.multiplier_range`.
pub fn make_scenario(
    g: &GridTopology,
    base_loads: &[LoadAdmittance],
    cfg: &ScenarioConfig,
    rng_seed: u64,
) -> Result<Scenario> {
    if base_loads.len() != g.load_buses().len() {
        return Err(Error::Shape(format!(
            "{} base loads for {} load buses",
            base_loads.len(),
            g.load_buses().len()
        )));
    }
    for (y, &bus) in base_loads.iter().zip(g.load_buses()) {
        y.validate(bus)?;
    }
    let [lo, hi] = cfg.multiplier_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Config(format!("invalid multiplier range [{lo}, {hi}]")));
    }
    let mut rng = seeds::rng_from(rng_seed);
    let multipliers = base_loads.iter().map(|_| rng.random_range(lo..=hi)).collect();
    Ok(Scenario {
        base_load_admittance: base_loads.to_vec(),
        multipliers,
        change_time: cfg.change_time,
        seed: rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_topology, synthetic};

    fn five_bus() -> (GridTopology, Vec<LoadAdmittance>) {
        let g = build_topology(&synthetic::five_bus()).unwrap();
        let loads = vec![LoadAdmittance::balanced(0.3, 0.1); g.load_buses().len()];
        (g, loads)
    }

    #[test]
    fn multipliers_stay_in_band_over_many_scenarios() {
        let (g, loads) = five_bus();
        let cfg = ScenarioConfig::default();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for seed in 0..10_000u64 {
            let s = make_scenario(&g, &loads, &cfg, seed).unwrap();
            for &m in &s.multipliers {
                lo = lo.min(m);
                hi = hi.max(m);
            }
        }
        assert!(lo >= 0.7 && hi <= 1.3, "[{lo}, {hi}]");
        // the band is actually explored
        assert!(lo < 0.71 && hi > 1.29, "[{lo}, {hi}]");
    }

    #[test]
    fn same_seed_same_scenario() {
        let (g, loads) = five_bus();
        let cfg = ScenarioConfig::default();
        assert_eq!(
            make_scenario(&g, &loads, &cfg, 42).unwrap(),
            make_scenario(&g, &loads, &cfg, 42).unwrap()
        );
        assert_ne!(
            make_scenario(&g, &loads, &cfg, 42).unwrap().multipliers,
            make_scenario(&g, &loads, &cfg, 43).unwrap().multipliers
        );
    }

    #[test]
    fn degenerate_interval_gives_unit_multipliers() {
        let (g, loads) = five_bus();
        let cfg = ScenarioConfig { multiplier_range: [1.0, 1.0], ..Default::default() };
        let s = make_scenario(&g, &loads, &cfg, 9).unwrap();
        assert!(s.multipliers.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn rejects_non_positive_base_load() {
        let (g, mut loads) = five_bus();
        loads[1].conductance[2] = 0.0;
        assert!(make_scenario(&g, &loads, &ScenarioConfig::default(), 0).is_err());
    }
}
