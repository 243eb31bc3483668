//! Pipeline stages over a self-describing run directory:
//!
//! ```text
//! <run>/manifest.json          config, digests, tool version, seeds
//! <run>/dataset/               normalized graph dataset
//! <run>/dse/model_based.bin    overlap estimates per sample
//! <run>/train/<variant>_run<r>.ckpt, <variant>_run<r>_history.csv
//! <run>/eval/report.json, report.txt
//! <run>/report/*.csv           plot data
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dse::{branch_measurements, build_state_space, mse_series, run_filter, NoiseLevels};
use crate::error::{Error, Result};
use crate::grid::{build_topology, GridTopology, TopologySpec, PHASES};
use crate::io::{create_dir, read_json, write_json};
use crate::nn::{read_checkpoint, write_checkpoint, Variant};
use crate::pinn::{
    evaluate, overlap_plan, predict_samples, run_model_based_for_dataset, train, ComparisonTable, FusionContext,
    ModelBasedEstimates, TrainConfig,
};
use crate::seeds::{derive_seed, stream};
use crate::sim::{generate_dataset, generate_pair, normalize_dataset, GraphDataset, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub root: u64,
    /// Scenario and noise streams are derived from this per sample.
    pub dataset: u64,
    /// One per training run, shared by all variants; init, dropout and
    /// shuffle streams derive from it.
    pub runs: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub config: RunConfig,
    pub topology: TopologySpec,
    pub topology_digest: String,
    pub seeds: SeedRecord,
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn estimates(&self) -> PathBuf {
        self.root.join("dse").join("model_based.bin")
    }

    pub fn checkpoint(&self, v: Variant, run: usize) -> PathBuf {
        self.root.join("train").join(format!("{}_run{}.ckpt", v.name(), run + 1))
    }

    pub fn history(&self, v: Variant, run: usize) -> PathBuf {
        self.root.join("train").join(format!("{}_run{}_history.csv", v.name(), run + 1))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("eval").join("report.txt")
    }

    pub fn plot_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Opened run: manifest plus the validated topology.
pub struct Run {
    pub dir: RunDir,
    pub manifest: RunManifest,
    pub topology: GridTopology,
}

impl Run {
    /// Starts (or restarts) a run directory from a config.
    pub fn create(root: impl Into<PathBuf>, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = RunDir::new(root);
        let spec = cfg.topology_spec()?;
        let topology = build_topology(&spec)?;
        let manifest = RunManifest {
            tool_version: crate::VERSION.to_string(),
            config_digest: cfg.digest(),
            config: cfg.clone(),
            topology_digest: topology.digest(),
            topology: spec,
            seeds: SeedRecord {
                root: cfg.seed,
                dataset: cfg.seed,
                runs: (0..cfg.runs).map(|r| derive_seed(cfg.seed, stream::RUN, r as u64)).collect(),
            },
        };
        create_dir(dir.root())?;
        write_json(dir.manifest(), &manifest)?;
        Ok(Self { dir, manifest, topology })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = RunDir::new(root);
        let manifest: RunManifest = read_json(dir.manifest())?;
        let topology = build_topology(&manifest.topology)?;
        Ok(Self { dir, manifest, topology })
    }

    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    pub fn dataset(&self) -> Result<GraphDataset> {
        GraphDataset::read(self.dir.dataset())
    }

    pub fn estimates(&self) -> Result<ModelBasedEstimates> {
        ModelBasedEstimates::read(self.dir.estimates())
    }

    /// Estimates when some variant fuses, `None` otherwise.
    fn estimates_if_needed(&self) -> Result<Option<ModelBasedEstimates>> {
        let needed = self.config().variants.contains(&Variant::Pinn) && !self.topology.overlap_buses().is_empty();
        needed.then(|| self.estimates()).transpose()
    }

    fn run_config(&self, v: Variant, run: usize) -> TrainConfig {
        TrainConfig { variant: v, seed: self.manifest.seeds.runs[run], ..self.config().train.clone() }
    }

    /// Simulates and normalizes the dataset.
    pub fn generate(&self, workers: usize) -> Result<String> {
        let cfg = self.config();
        let raw = generate_dataset(&self.topology, &cfg.sim, self.manifest.seeds.dataset, workers)?;
        let (d, _) = normalize_dataset(&raw)?;
        d.write(self.dir.dataset())?;
        Ok(format!(
            "generated {} train / {} test samples, {} frames, into {}",
            d.manifest.n_train,
            d.manifest.n_test,
            d.manifest.frame_count,
            self.dir.dataset().display()
        ))
    }

    /// Runs the overlap filters on every sample.
    pub fn dse(&self, workers: usize) -> Result<String> {
        let d = self.dataset()?;
        let est = run_model_based_for_dataset(&d, &self.topology, &self.config().filter, workers)?;
        create_dir(self.dir.estimates().parent().expect("inside run"))?;
        est.write(self.dir.estimates())?;
        let t = d.manifest.frame_count;
        let mut err = (0.0, 0usize);
        for (s, e) in d.samples.iter().zip(&est.per_sample) {
            let Some(e) = e else { continue };
            for (o, bus) in est.overlap_buses.iter().enumerate() {
                let row = d.manifest.monitored_buses.iter().position(|b| b == bus).expect("overlap is monitored");
                let truth = &s.labels[row * est.row_len..row * est.row_len + PHASES * t];
                let got = &e[o * est.row_len..o * est.row_len + PHASES * t];
                err.0 += truth.iter().zip(got).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                err.1 += truth.len();
            }
        }
        Ok(format!(
            "model-based estimates for buses {:?}: {} samples, {} excluded, magnitude MSE {:.3e}",
            est.overlap_buses,
            est.per_sample.len(),
            est.failures(),
            err.0 / err.1.max(1) as f64
        ))
    }

    /// Trains every configured variant and run.
    pub fn train(&self) -> Result<String> {
        let d = self.dataset()?;
        let est = self.estimates_if_needed()?;
        create_dir(self.dir.root().join("train"))?;
        let mut lines = Vec::new();
        for &v in &self.config().variants {
            for r in 0..self.config().runs {
                let tc = self.run_config(v, r);
                let (model, history) = train(&tc, &d, &self.topology, est.as_ref())?;
                write_checkpoint(self.dir.checkpoint(v, r), &model, v)?;
                history.write_csv(self.dir.history(v, r))?;
                lines.push(format!("{} run {}: test MSE {:.3e}", v.name(), r + 1, history.final_test_mse));
            }
        }
        Ok(lines.join("; "))
    }

    /// Scores every checkpoint on the test split and writes the comparison.
    pub fn eval(&self) -> Result<ComparisonTable> {
        let d = self.dataset()?;
        let est = self.estimates_if_needed()?;
        let mut reports = Vec::new();
        for &v in &self.config().variants {
            for r in 0..self.config().runs {
                let (model, stored) = read_checkpoint(self.dir.checkpoint(v, r))?;
                if stored != v {
                    return Err(Error::Config(format!("checkpoint for run {} holds a {} model", r + 1, stored.name())));
                }
                let g = self.run_config(v, r).topology(&self.topology)?;
                let ctx = FusionContext::new(v, &g, &d, est.as_ref())?;
                reports.push(evaluate(&model, v, &d, &ctx)?);
            }
        }
        let table = ComparisonTable::new(&self.config().system, &reports);
        create_dir(self.dir.report_json().parent().expect("inside run"))?;
        write_json(self.dir.report_json(), &table)?;
        std::fs::write(self.dir.report_txt(), table.render()).map_err(|e| Error::io(self.dir.report_txt(), e))?;
        Ok(table)
    }

    pub fn report(&self) -> Result<ComparisonTable> {
        read_json(self.dir.report_json())
    }

    /// Writes plot-ready CSVs under `report/` and returns their paths.
    pub fn plot_data(&self) -> Result<Vec<PathBuf>> {
        let out = self.dir.plot_dir();
        create_dir(&out)?;
        let mut written = Vec::new();
        let mut put = |name: &str, text: String| -> Result<()> {
            let p = out.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            written.push(p);
            Ok(())
        };
        put("training_curves.csv", self.training_curves()?)?;
        let d = self.dataset()?;
        if let Some(text) = self.estimation_traces(&d)? {
            put("state_estimates.csv", text)?;
        }
        if let Some(text) = self.filter_traces(&d)? {
            put("filter_estimates.csv", text)?;
        }
        Ok(written)
    }

    fn training_curves(&self) -> Result<String> {
        let mut columns = Vec::new();
        for &v in &self.config().variants {
            for r in 0..self.config().runs {
                let path = self.dir.history(v, r);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let losses: Vec<String> =
                    text.lines().skip(1).filter_map(|l| l.split(',').nth(1).map(str::to_string)).collect();
                columns.push((format!("{}_run{}", v.name(), r + 1), losses));
            }
        }
        let epochs = columns.iter().map(|c| c.1.len()).max().unwrap_or(0);
        let mut s = String::from("epoch");
        for (name, _) in &columns {
            let _ = write!(s, ",{name}_train_loss");
        }
        s.push('\n');
        for e in 0..epochs {
            let _ = write!(s, "{}", e + 1);
            for (_, l) in &columns {
                let _ = write!(s, ",{}", l.get(e).map_or("", String::as_str));
            }
            s.push('\n');
        }
        Ok(s)
    }

    /// Truth and every variant's first-run estimate on the first test
    /// sample, first monitored overlap bus (or first monitored bus).
    fn estimation_traces(&self, d: &GraphDataset) -> Result<Option<String>> {
        let Some(sample) = d.test().first() else { return Ok(None) };
        let m = &d.manifest;
        let t = m.frame_count;
        let bus = self.topology.overlap_buses().first().copied().unwrap_or(m.monitored_buses[0]);
        let row = m.monitored_buses.iter().position(|&b| b == bus).expect("monitored");
        let est = self.estimates_if_needed()?;
        let mut series = vec![("truth".to_string(), sample.labels.clone())];
        for &v in &self.config().variants {
            let (model, _) = read_checkpoint(self.dir.checkpoint(v, 0))?;
            let g = self.run_config(v, 0).topology(&self.topology)?;
            let ctx = FusionContext::new(v, &g, d, est.as_ref())?;
            let (_, fused) = predict_samples(&model, std::slice::from_ref(sample), m.n_train, &ctx)?;
            series.push((v.name().to_string(), fused));
        }
        let mut s = String::from("time,channel,phase");
        for (name, _) in &series {
            let _ = write!(s, ",{name}");
        }
        s.push('\n');
        for (c, channel) in ["magnitude", "angle_rad"].iter().enumerate() {
            for p in 0..PHASES {
                for f in 0..t {
                    let _ = write!(s, "{},{channel},{}", m.frame_times[f], ["a", "b", "c"][p]);
                    for (_, v) in &series {
                        let _ = write!(s, ",{}", v[((row * 6) + c * PHASES + p) * t + f]);
                    }
                    s.push('\n');
                }
            }
        }
        Ok(Some(format!("# bus {bus}, test sample {}\n{s}", sample.sample_index)))
    }

    /// Filter run on the first overlap branch of the first test sample.
    fn filter_traces(&self, d: &GraphDataset) -> Result<Option<String>> {
        let Some(sample) = d.test().first() else { return Ok(None) };
        let plan = overlap_plan(&self.topology)?;
        let Some(f) = plan.filters.first() else { return Ok(None) };
        let m = &d.manifest;
        let pair = generate_pair(&self.topology, &m.sim, m.seed, sample.sample_index)?;
        let noise = self.config().filter.resolve(m.sim.noise_sigma)?;
        let csv = branch_filter_csv(&self.topology, f.params.endpoints(), &pair.clean, &pair.noisy, noise)?;
        Ok(Some(format!("# test sample {}\n{csv}", sample.sample_index)))
    }
}

/// Runs the filter of branch `(from, to)` on `measured` and tabulates, per
/// step, truth and estimate of every state and input channel plus the
/// input-voltage MSE.
pub fn branch_filter_csv(
    g: &GridTopology,
    (from, to): (usize, usize),
    truth: &Trajectory,
    measured: &Trajectory,
    noise: NoiseLevels,
) -> Result<String> {
    let index = g
        .branch_index(from, to)
        .ok_or_else(|| Error::Topology(format!("no branch between buses {from} and {to}")))?;
    if truth.samples() != measured.samples() || truth.branches() != measured.branches() {
        return Err(Error::Shape("truth and measured trajectories differ in layout".into()));
    }
    let params = &g.branches()[index];
    let (zx, zu) = branch_measurements(measured, index)?;
    let (tx, tu) = branch_measurements(truth, index)?;
    let est = run_filter(&zx, &zu, &build_state_space(params, measured.dt, noise)?)?;
    let mse = mse_series(&est.u_hat, &tu)?;
    let (f, t) = params.endpoints();
    let mut names: Vec<String> = ["a", "b", "c"].iter().map(|p| format!("i_{f}_{t}_{p}")).collect();
    for bus in [f, t] {
        names.extend(["a", "b", "c"].iter().map(|p| format!("v_{bus}_{p}")));
    }
    let mut s = String::from("time");
    for n in &names {
        let _ = write!(s, ",{n}_true,{n}_est");
    }
    s.push_str(",voltage_mse\n");
    for k in 0..measured.samples() {
        let _ = write!(s, "{}", truth.time(k));
        for c in 0..PHASES {
            let _ = write!(s, ",{},{}", tx[k][c], est.x_hat[k][c]);
        }
        for c in 0..2 * PHASES {
            let _ = write!(s, ",{},{}", tu[k][c], est.u_hat[k][c]);
        }
        let _ = writeln!(s, ",{}", mse[k]);
    }
    Ok(s)
}
