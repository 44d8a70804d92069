use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pdode::distance::DistanceKind;
use pdode::estimator::{Checkpoint, EstimationConfig, Estimator, OptimizerKind, Status};
use pdode::eval::{
    bottleneck_demo, run_experiment, write_estimate, write_report, BottleneckOptions, ExperimentConfig, Scenario,
};
use pdode::io::write_file;
use pdode::{enumerate_paths, load_network, Error, Loader, ObservationSet, Pdod, PathTable, TimeGrid};

#[derive(Parser)]
#[command(name = "pdode", version, about = "Probabilistic dynamic OD demand estimation")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the true PDOD, its equilibrium route choice and the observed link set.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate daily link-flow observations for a generated scenario.
    Simulate {
        /// Directory written by `generate`.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `observations.csv` in the scenario directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate a PDOD from observed link flows.
    Estimate(EstimateArgs),
    /// Score an estimated PDOD against a generated truth.
    Evaluate {
        /// Directory written by `generate`.
        #[arg(long)]
        truth: PathBuf,
        /// Directory written by `estimate`.
        #[arg(long)]
        estimate: PathBuf,
        /// Report JSON; scatter data goes next to it.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's evaluation sample count.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Canned demonstrations.
    Demo {
        #[command(subcommand)]
        demo: Demo,
    },
    /// Run a whole experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Demo {
    /// Single-bottleneck bias of deterministic estimation.
    Bottleneck {
        /// veh/hour.
        #[arg(long, default_value_t = 2000.0)]
        capacity: f64,
        #[arg(long, default_value_t = 2000.0)]
        inflow_mean: f64,
        #[arg(long, default_value_t = 200.0)]
        inflow_std: f64,
        #[arg(long, default_value_t = 200)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    network: PathBuf,
    /// Observations CSV (`day,link_id,interval,flow`).
    #[arg(long)]
    obs: PathBuf,
    /// Path file; k shortest paths are enumerated when absent.
    #[arg(long)]
    paths: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    max_paths_per_od: usize,
    /// Seconds per interval.
    #[arg(long, default_value_t = 100.0)]
    interval_length: f64,
    /// Estimation config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    distance: Option<DistanceKind>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Deterministic baseline: σ pinned at its floor.
    #[arg(long)]
    ddode: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Data(Error),
    NotConverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::NotConverged) => {
            eprintln!("estimation stopped at the epoch limit without converging; artifacts written");
            ExitCode::from(3)
        }
    }
}

fn config_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let scenario = Scenario::generate(&cfg, &config_dir(&config)).map_err(|e| e.in_stage("generate"))?;
            for f in scenario.save(&out)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Simulate {
            scenario,
            days,
            noise_std,
            seed,
            out,
        } => {
            let mut sc = Scenario::load(&scenario)?;
            if let Some(d) = days {
                sc.observation.days = d;
            }
            if let Some(n) = noise_std {
                sc.observation.noise_std = n;
            }
            if let Some(s) = seed {
                sc.observation.seed = s;
            }
            let obs = sc.simulate().map_err(|e| e.in_stage("simulate"))?;
            let out = out.unwrap_or_else(|| scenario.join("observations.csv"));
            write_file(&out, &obs.to_csv_string(&sc.network))?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Estimate(args) => estimate(args),
        Command::Evaluate {
            truth,
            estimate,
            out,
            samples,
        } => {
            let mut sc = Scenario::load(&truth)?;
            if let Some(m) = samples {
                sc.evaluation.samples = m;
            }
            let est = Pdod::load(estimate.join("pdod.csv"))?;
            let report = sc.evaluate(&est).map_err(|e| e.in_stage("evaluate"))?;
            write_report(&out, &report)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            Ok(())
        }
        Command::Demo {
            demo:
                Demo::Bottleneck {
                    capacity,
                    inflow_mean,
                    inflow_std,
                    days,
                    seed,
                    out,
                },
        } => {
            let opts = BottleneckOptions {
                capacity,
                inflow_mean,
                inflow_std,
                days,
                seed,
                ..BottleneckOptions::default()
            };
            let report = bottleneck_demo(&opts)?;
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            if let Some(out) = out {
                write_file(out, &json)?;
            }
            println!("{json}");
            Ok(())
        }
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_experiment(&cfg, &config_dir(&config), &out)?;
            for r in &outcome.runs {
                let p = &r.report;
                println!(
                    "{:<14} OL {:.3}/{:.3}  AL {:.3}/{:.3}  OD {:.3}/{:.3}  ({} epochs)",
                    r.label, p.r2_ol_mean, p.r2_ol_std, p.r2_al_mean, p.r2_al_std, p.r2_od_mean, p.r2_od_std, r.epochs
                );
            }
            if let Some(b) = &outcome.bottleneck {
                println!(
                    "bottleneck: DDODE {:.1}, PDODE {:.1} (true {:.1})",
                    b.ddode_mean, b.pdode_mean, b.true_mean
                );
            }
            println!("artifacts in {}", out.display());
            Ok(())
        }
    }
}

fn estimate(args: EstimateArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = pdode::io::read_file(p)?;
            serde_json::from_str::<EstimationConfig>(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?
        }
        None => EstimationConfig::default(),
    };
    if let Some(d) = args.distance {
        cfg.distance = d;
    }
    if let Some(l) = args.samples {
        cfg.samples = l;
    }
    if let Some(e) = args.epochs {
        cfg.max_epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(r) = args.learning_rate {
        cfg.learning_rate = r;
    }
    if let Some(o) = args.optimizer {
        cfg.optimizer = o;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.ddode |= args.ddode;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let net = load_network(&args.network)?;
    let paths = match &args.paths {
        Some(p) => PathTable::load(&net, p)?,
        None => enumerate_paths(&net, args.max_paths_per_od)?,
    };
    let obs = ObservationSet::load(&net, &args.obs)?;
    let grid = TimeGrid::new(obs.num_intervals(), args.interval_length)?;
    let loader = Loader::new(&net, &paths, &grid, &cfg.dnl)?;
    let mut est = match &args.resume {
        Some(p) => Estimator::resume(&loader, &obs, cfg.clone(), Checkpoint::load(p)?)?,
        None => Estimator::new(&loader, &obs, cfg.clone(), None)?,
    };
    let checkpoint = args.out.join("checkpoint.json");
    est.run(|s| {
        info!("epoch {}: loss {:.6e}", s.epoch, s.loss_history.last().map(|l| l.1).unwrap_or(f64::NAN));
        Checkpoint::from_state(s).save(&checkpoint)
    })?;
    let state = &est.state;
    write_estimate(&args.out, state)?;
    let summary = serde_json::json!({
        "status": state.status,
        "epochs": state.epoch,
        "final_loss": state.loss_history.last().map(|l| l.1),
        "config": cfg,
    });
    write_file(
        args.out.join("estimate.json"),
        &serde_json::to_string_pretty(&summary).map_err(Error::from)?,
    )?;
    println!("{} after {} epochs; artifacts in {}", status_name(state.status), state.epoch, args.out.display());
    if state.status == Status::MaxEpochs {
        return Err(Failure::NotConverged);
    }
    Ok(())
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Running => "running",
        Status::Converged => "converged",
        Status::MaxEpochs => "epoch limit reached",
    }
}
