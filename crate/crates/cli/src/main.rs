use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pigse_core::config::RunConfig;
use pigse_core::grid::build_topology;
use pigse_core::pinn::gradient_suite;
use pigse_core::pipeline::{branch_filter_csv, Run};
use pigse_core::seeds::{derive_seed, stream};
use pigse_core::sim::{add_noise, generate_pair, GraphDataset, Trajectory};
use pigse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pigse", version, about = "Physics-informed state estimation for three-phase distribution grids")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and normalize a dataset into a new run directory.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the root seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Model-based estimates of the overlap buses for every sample.
    #[command(args_conflicts_with_subcommands = true)]
    Dse {
        #[command(subcommand)]
        action: Option<DseAction>,
        #[command(flatten)]
        run: Option<RunArgs>,
    },
    /// Train every configured variant and seeded run.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score the checkpoints on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the comparison table of an evaluated run.
    Report {
        #[command(flatten)]
        run: RunArgs,
        /// Print the table as CSV.
        #[arg(long)]
        csv: bool,
        /// Also write plot-ready CSVs under the run's report/ directory.
        #[arg(long)]
        plot_data: bool,
    },
    /// Finite-difference gradient check of every model configuration.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Simulate one sample and write its noise-free trajectory.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Trajectory file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect a run's dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
}

#[derive(Subcommand)]
enum DseAction {
    /// Filter one branch of a noise-free trajectory after adding
    /// measurement noise; writes a CSV of truth, estimate and MSE.
    Run {
        #[arg(long)]
        trajectory: PathBuf,
        /// Branch endpoints as `from,to`.
        #[arg(long, value_parser = parse_branch)]
        branch: (usize, usize),
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed of the injected noise.
        #[arg(long)]
        seed: Option<u64>,
        /// CSV file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Export frames as long-format CSV.
    Dump {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, required = true)]
        csv: bool,
        /// `train` or `test`.
        #[arg(long)]
        split: Option<String>,
        /// Sample position within the split.
        #[arg(long)]
        sample: Option<usize>,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

fn parse_branch(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected `from,to`")?;
    let bus = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad bus `{v}`: {e}"));
    Ok((bus(a)?, bus(b)?))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<String> {
    match command {
        Command::Generate { config, seed, run } => {
            let cfg = load_config(config.as_deref(), seed)?;
            Run::create(&run.out, &cfg)?.generate(run.workers())
        }
        Command::Dse { action: Some(DseAction::Run { trajectory, branch, config, seed, out }), .. } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let g = build_topology(&cfg.topology_spec()?)?;
            let truth = Trajectory::read(&trajectory)?;
            if truth.noisy {
                return Err(Error::Config(format!("{} already holds measurement noise", trajectory.display())));
            }
            let measured = add_noise(&truth, cfg.sim.noise_sigma, derive_seed(cfg.seed, stream::NOISE, 0))?;
            let csv = branch_filter_csv(&g, branch, &truth, &measured, cfg.filter.resolve(cfg.sim.noise_sigma)?)?;
            let worst = csv
                .lines()
                .skip(1)
                .filter_map(|l| l.rsplit(',').next()?.parse::<f64>().ok())
                .fold(0.0, f64::max);
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?,
                None => print!("{csv}"),
            }
            Ok(format!("branch {}-{}: max per-step voltage MSE {worst:.3e}", branch.0, branch.1))
        }
        Command::Dse { action: None, run: Some(run) } => Run::open(&run.out)?.dse(run.workers()),
        Command::Dse { action: None, run: None } => Err(Error::Config("dse needs --out <run dir> or `dse run`".into())),
        Command::Train { run } => Run::open(&run.out)?.train(),
        Command::Eval { run } => {
            let table = Run::open(&run.out)?.eval()?;
            print!("{}", table.render());
            Ok(format!("wrote {}", run.out.join("eval").join("report.json").display()))
        }
        Command::Report { run, csv, plot_data } => {
            let r = Run::open(&run.out)?;
            let table = r.report()?;
            print!("{}", if csv { table.to_csv() } else { table.render() });
            if plot_data {
                let files = r.plot_data()?;
                return Ok(format!("wrote {} plot files under {}", files.len(), r.dir.plot_dir().display()));
            }
            Ok(format!("{} variants", table.rows.len()))
        }
        Command::Gradcheck { seed } => {
            let cases = gradient_suite(seed)?;
            let mut worst = 0.0f64;
            for c in &cases {
                println!("{:<24} max relative error {:.3e} over {} coordinates", c.name, c.report.max_rel_error, c.report.checked);
                worst = worst.max(c.report.max_rel_error);
            }
            if worst >= 1e-5 {
                return Err(Error::Divergence(format!("max relative gradient error {worst:.3e} is not below 1e-5")));
            }
            Ok(format!("max relative error {worst:.3e}"))
        }
        Command::Simulate { config, seed, index, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let g = build_topology(&cfg.topology_spec()?)?;
            let pair = generate_pair(&g, &cfg.sim, cfg.seed, index)?;
            pair.clean.write(&out)?;
            Ok(format!("wrote {} steps of sample {index} to {}", pair.clean.samples(), out.display()))
        }
        Command::Dataset { action: DatasetAction::Dump { run, csv: _, split, sample } } => {
            let d = GraphDataset::read(Run::open(&run.out)?.dir.dataset())?;
            let stdout = std::io::stdout();
            let mut lock = std::io::BufWriter::new(stdout.lock());
            d.dump_csv(&mut lock, split.as_deref(), sample)?;
            lock.flush().map_err(|e| Error::io("<stdout>", e))?;
            Ok(format!("dumped {} samples", d.samples.len()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    match execute(cli.command) {
        Ok(summary) => {
            eprintln!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
