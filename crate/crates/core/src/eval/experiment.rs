use std::fmt::Write as _;
use std::path::{Path as FsPath, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::bottleneck::{bottleneck_demo, BottleneckOptions, BottleneckReport};
use super::synth::{choose_observed_links, generate_truth, simulate_observations, DemandSpec};
use super::{evaluate, EvaluationOptions, EvaluationReport};
use crate::behavior::{EquilibriumOptions, RouteChoiceMatrix};
use crate::demand::Pdod;
use crate::distance::DistanceKind;
use crate::dnl::{DnlOptions, Loader};
use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimationConfig, EstimationState};
use crate::io::{fmt_sig, read_file, write_file};
use crate::net::{enumerate_paths, load_network, Network, PathTable, TimeGrid};
use crate::obs::ObservationSet;

const SMALL13: &str = include_str!("../../data/small13_network.csv");

/// A network bundled with the library, by name (`small13`).
pub fn builtin_network(name: &str) -> Result<Network> {
    match name {
        "small13" => Network::from_csv_str(SMALL13, "builtin:small13"),
        _ => Err(Error::Validation(format!("unknown builtin network `{name}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// One estimation with the `estimation` section as given.
    #[default]
    Single,
    /// The same estimation with and without demand variance.
    PdodeVsDdode,
    /// One estimation per entry of `distances`.
    DistanceComparison,
    /// The single-bottleneck bias demonstration; only the `bottleneck` section is used.
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    pub days: usize,
    /// Number of links picked at random when `link_ids` is absent.
    pub num_observed_links: usize,
    pub link_ids: Option<Vec<i64>>,
    /// Standard deviation of the additive count noise. The default is variance 5.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            days: 100,
            num_observed_links: 12,
            link_ids: None,
            noise_std: 5f64.sqrt(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentKind,
    /// `builtin:<name>` or a network file, relative to the config file.
    #[serde(default = "default_network")]
    pub network: String,
    /// Path file; enumerated when absent.
    #[serde(default)]
    pub paths: Option<String>,
    #[serde(default = "default_max_paths")]
    pub max_paths_per_od: usize,
    #[serde(default)]
    pub time_grid: Option<TimeGrid>,
    #[serde(default)]
    pub demand_spec: Option<DemandSpec>,
    #[serde(default)]
    pub truth_seed: u64,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub equilibrium: EquilibriumOptions,
    #[serde(default)]
    pub evaluation: EvaluationOptions,
    #[serde(default = "default_distances")]
    pub distances: Vec<DistanceKind>,
    #[serde(default)]
    pub bottleneck: BottleneckOptions,
}

fn default_network() -> String {
    "builtin:small13".into()
}

fn default_max_paths() -> usize {
    10
}

fn default_distances() -> Vec<DistanceKind> {
    DistanceKind::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&read_file(path)?).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Scenario state written by the generate stage and read back by later stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Setup {
    time_grid: TimeGrid,
    dnl: DnlOptions,
    observed_link_ids: Vec<i64>,
    observation: ObservationConfig,
    evaluation: EvaluationOptions,
    truth_shares: Vec<f64>,
}

/// Ground truth plus everything needed to simulate, estimate and evaluate against it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: Network,
    pub paths: PathTable,
    pub grid: TimeGrid,
    pub dnl: DnlOptions,
    pub truth: Pdod,
    pub truth_choice: RouteChoiceMatrix,
    pub observed_links: Vec<usize>,
    pub observation: ObservationConfig,
    pub evaluation: EvaluationOptions,
}

impl Scenario {
    /// Builds the network, the true PDOD at equilibrium and the observed link set.
    pub fn generate(cfg: &ExperimentConfig, base_dir: &FsPath) -> Result<Self> {
        let network = match cfg.network.strip_prefix("builtin:") {
            Some(name) => builtin_network(name)?,
            None => load_network(base_dir.join(&cfg.network))?,
        };
        let paths = match &cfg.paths {
            Some(p) => PathTable::load(&network, base_dir.join(p))?,
            None => enumerate_paths(&network, cfg.max_paths_per_od)?,
        };
        let grid = cfg
            .time_grid
            .ok_or_else(|| Error::Validation("config has no `time_grid` section".into()))?;
        let grid = TimeGrid::new(grid.num_intervals(), grid.interval_length())?;
        let spec = cfg
            .demand_spec
            .as_ref()
            .ok_or_else(|| Error::Validation("config has no `demand_spec` section".into()))?;
        let dnl = cfg.estimation.dnl.clone();
        let loader = Loader::new(&network, &paths, &grid, &dnl)?;
        let (truth, eq) = generate_truth(&loader, spec, cfg.truth_seed, &cfg.equilibrium)?;
        info!(
            "truth equilibrium: {} iterations, last change {:.2e}",
            eq.iterations, eq.last_change
        );
        let observed_links = match &cfg.observation.link_ids {
            Some(ids) => {
                let mut links = ids
                    .iter()
                    .map(|&id| {
                        network
                            .link_index(id)
                            .ok_or_else(|| Error::Validation(format!("unknown observed link id {id}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                links.sort_unstable();
                links.dedup();
                links
            }
            None => choose_observed_links(&network, cfg.observation.num_observed_links, cfg.observation.seed)?,
        };
        drop(loader);
        Ok(Self {
            network,
            paths,
            grid,
            dnl,
            truth,
            truth_choice: eq.choice,
            observed_links,
            observation: cfg.observation.clone(),
            evaluation: cfg.evaluation,
        })
    }

    pub fn loader(&self) -> Result<Loader<'_>> {
        Loader::new(&self.network, &self.paths, &self.grid, &self.dnl)
    }

    pub fn simulate(&self) -> Result<ObservationSet> {
        let o = &self.observation;
        simulate_observations(
            &self.loader()?,
            &self.truth,
            &self.truth_choice,
            o.days,
            &self.observed_links,
            o.noise_std,
            o.seed,
        )
    }

    /// Runs the estimator to completion, calling `on_epoch` after every epoch.
    pub fn estimate(
        &self,
        observations: &ObservationSet,
        cfg: &EstimationConfig,
        on_epoch: impl FnMut(&EstimationState) -> Result<()>,
    ) -> Result<EstimationState> {
        let loader = Loader::new(&self.network, &self.paths, &self.grid, &cfg.dnl)?;
        let mut e = Estimator::new(&loader, observations, cfg.clone(), None)?;
        e.run(on_epoch)?;
        Ok(e.state)
    }

    /// Scores an estimated PDOD against the truth, each at its own equilibrium.
    pub fn evaluate(&self, estimated: &Pdod) -> Result<EvaluationReport> {
        evaluate(
            &self.loader()?,
            &self.truth,
            Some(&self.truth_choice),
            estimated,
            None,
            &self.observed_links,
            &self.evaluation,
        )
    }

    /// Writes the generate-stage artifacts into `dir`.
    pub fn save(&self, dir: &FsPath) -> Result<Vec<PathBuf>> {
        let setup = Setup {
            time_grid: self.grid,
            dnl: self.dnl.clone(),
            observed_link_ids: self.observed_links.iter().map(|&a| self.network.links()[a].id).collect(),
            observation: self.observation.clone(),
            evaluation: self.evaluation,
            truth_shares: self.truth_choice.shares().to_vec(),
        };
        let files = [
            ("network.csv", self.network.to_csv_string()),
            ("paths.txt", self.paths.to_file_string(&self.network)),
            ("truth_pdod.csv", self.truth.to_csv_string()),
            ("truth_route_choice.csv", self.truth_choice.to_coo_csv()),
            ("setup.json", serde_json::to_string_pretty(&setup)?),
        ];
        files
            .into_iter()
            .map(|(name, body)| {
                let p = dir.join(name);
                write_file(&p, &body)?;
                Ok(p)
            })
            .collect()
    }

    /// Reads back what [`Scenario::save`] wrote.
    pub fn load(dir: &FsPath) -> Result<Self> {
        let network = load_network(dir.join("network.csv"))?;
        let paths = PathTable::load(&network, dir.join("paths.txt"))?;
        let setup_path = dir.join("setup.json");
        let setup: Setup = serde_json::from_str(&read_file(&setup_path)?).map_err(|e| Error::Parse {
            path: setup_path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let grid = TimeGrid::new(setup.time_grid.num_intervals(), setup.time_grid.interval_length())?;
        let truth = Pdod::load(dir.join("truth_pdod.csv"))?;
        if truth.len() != grid.num_intervals() * network.num_od() {
            return Err(Error::Validation(format!(
                "{}: truth PDOD does not match the time grid",
                dir.display()
            )));
        }
        let truth_choice = RouteChoiceMatrix::from_shares(&paths, grid.num_intervals(), setup.truth_shares)?;
        let observed_links = setup
            .observed_link_ids
            .iter()
            .map(|&id| network.link_index(id).ok_or_else(|| Error::Validation(format!("unknown observed link id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            network,
            paths,
            grid,
            dnl: setup.dnl,
            truth,
            truth_choice,
            observed_links,
            observation: setup.observation,
            evaluation: setup.evaluation,
        })
    }
}

/// Headline numbers of one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub distance: DistanceKind,
    pub ddode: bool,
    pub epochs: usize,
    pub status: crate::estimator::Status,
    pub final_loss: f64,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunSummary>,
    pub bottleneck: Option<BottleneckReport>,
    pub files: Vec<PathBuf>,
}

/// Rounds to the six significant digits used in every artifact.
fn sig(x: f64) -> f64 {
    fmt_sig(x).parse().unwrap_or(x)
}

fn rounded_report(r: &EvaluationReport) -> EvaluationReport {
    EvaluationReport {
        r2_ol_mean: sig(r.r2_ol_mean),
        r2_ol_std: sig(r.r2_ol_std),
        r2_al_mean: sig(r.r2_al_mean),
        r2_al_std: sig(r.r2_al_std),
        r2_od_mean: sig(r.r2_od_mean),
        r2_od_std: sig(r.r2_od_std),
        scatter: Vec::new(),
    }
}

pub fn loss_history_csv(history: &[(usize, f64)]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in history {
        let _ = writeln!(out, "{e},{}", fmt_sig(*l));
    }
    out
}

/// Writes one run's PDOD, loss history and shares under `dir`.
pub fn write_estimate(dir: &FsPath, state: &EstimationState) -> Result<Vec<PathBuf>> {
    let files = [
        ("pdod.csv", state.pdod.to_csv_string()),
        ("loss_history.csv", loss_history_csv(&state.loss_history)),
        ("route_choice.csv", state.choice.to_coo_csv()),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let p = dir.join(name);
            write_file(&p, &body)?;
            Ok(p)
        })
        .collect()
}

/// Writes an evaluation report as JSON plus its scatter data as CSV next to it.
pub fn write_report(json_path: &FsPath, report: &EvaluationReport) -> Result<Vec<PathBuf>> {
    let stem = json_path.file_stem().and_then(|s| s.to_str()).unwrap_or("evaluation");
    let scatter = json_path.with_file_name(format!("{stem}_scatter.csv"));
    write_file(json_path, &serde_json::to_string_pretty(&rounded_report(report))?)?;
    write_file(&scatter, &report.scatter_csv())?;
    Ok(vec![json_path.to_path_buf(), scatter])
}

fn summary_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from(
        "label,distance,ddode,epochs,status,final_loss,r2_ol_mean,r2_ol_std,r2_al_mean,r2_al_std,r2_od_mean,r2_od_std\n",
    );
    for r in runs {
        let p = &r.report;
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = write!(out, "{},{},{},{},{status},{}", r.label, r.distance.name(), r.ddode, r.epochs, fmt_sig(r.final_loss));
        for v in [p.r2_ol_mean, p.r2_ol_std, p.r2_al_mean, p.r2_al_std, p.r2_od_mean, p.r2_od_std] {
            let _ = write!(out, ",{}", fmt_sig(v));
        }
        out.push('\n');
    }
    out
}

/// The estimation runs an experiment asks for, as `(label, config)`.
pub fn planned_runs(cfg: &ExperimentConfig) -> Vec<(String, EstimationConfig)> {
    match cfg.experiment {
        ExperimentKind::Single => vec![("estimate".into(), cfg.estimation.clone())],
        ExperimentKind::PdodeVsDdode => [("pdode", false), ("ddode", true)]
            .into_iter()
            .map(|(label, ddode)| {
                (
                    label.to_string(),
                    EstimationConfig {
                        ddode,
                        ..cfg.estimation.clone()
                    },
                )
            })
            .collect(),
        ExperimentKind::DistanceComparison => cfg
            .distances
            .iter()
            .map(|&d| {
                (
                    d.name().to_string(),
                    EstimationConfig {
                        distance: d,
                        ..cfg.estimation.clone()
                    },
                )
            })
            .collect(),
        ExperimentKind::Bottleneck => Vec::new(),
    }
}

/// Runs generate → simulate → estimate → evaluate and writes every artifact plus
/// `summary.csv` and `manifest.json` into `out_dir`. Relative file names in the config
/// resolve against `base_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &FsPath, out_dir: &FsPath) -> Result<ExperimentOutcome> {
    let mut files = Vec::new();
    let mut runs = Vec::new();
    let mut bottleneck = None;
    if cfg.experiment == ExperimentKind::Bottleneck {
        let report = bottleneck_demo(&cfg.bottleneck).map_err(|e| e.in_stage("bottleneck"))?;
        let p = out_dir.join("bottleneck.json");
        write_file(&p, &serde_json::to_string_pretty(&report)?)?;
        files.push(p);
        bottleneck = Some(report);
    } else {
        let scenario = Scenario::generate(cfg, base_dir).map_err(|e| e.in_stage("generate"))?;
        files.extend(scenario.save(out_dir)?);
        let obs = scenario.simulate().map_err(|e| e.in_stage("simulate"))?;
        let p = out_dir.join("observations.csv");
        write_file(&p, &obs.to_csv_string(&scenario.network))?;
        files.push(p);
        for (label, est_cfg) in planned_runs(cfg) {
            info!("run `{label}`");
            let state = scenario
                .estimate(&obs, &est_cfg, |_| Ok(()))
                .map_err(|e| e.in_stage("estimate"))?;
            let report = scenario.evaluate(&state.pdod).map_err(|e| e.in_stage("evaluate"))?;
            let dir = out_dir.join(&label);
            files.extend(write_estimate(&dir, &state)?);
            files.extend(write_report(&dir.join("evaluation.json"), &report)?);
            runs.push(RunSummary {
                label,
                distance: est_cfg.distance,
                ddode: est_cfg.ddode,
                epochs: state.epoch,
                status: state.status,
                final_loss: state.loss_history.last().map(|l| l.1).unwrap_or(f64::NAN),
                report,
            });
        }
        let p = out_dir.join("summary.csv");
        write_file(&p, &summary_csv(&runs))?;
        files.push(p);
    }
    let manifest = serde_json::json!({
        "experiment": cfg.experiment,
        "config": cfg,
        "files": files
            .iter()
            .map(|f| f.strip_prefix(out_dir).unwrap_or(f).display().to_string())
            .collect::<Vec<_>>(),
    });
    let p = out_dir.join("manifest.json");
    write_file(&p, &serde_json::to_string_pretty(&manifest)?)?;
    files.push(p);
    Ok(ExperimentOutcome {
        runs,
        bottleneck,
        files,
    })
}
