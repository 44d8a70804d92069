use serde::{Deserialize, Serialize};

use super::synth::simulate_observations;
use crate::behavior::RouteChoiceMatrix;
use crate::demand::{Pdod, SIGMA_MIN};
use crate::distance::fit_summary;
use crate::dnl::Loader;
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimationConfig, Status};
use crate::net::{enumerate_paths, LinkSpec, Network, TimeGrid};

/// One-hour, single-interval bottleneck experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckOptions {
    /// Bottleneck capacity, veh/hour.
    pub capacity: f64,
    /// Mean and std of the daily upstream demand, veh/hour.
    pub inflow_mean: f64,
    pub inflow_std: f64,
    pub days: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Shared by both estimators; `ddode` and the initial PDOD are set per run.
    pub estimation: EstimationConfig,
}

impl Default for BottleneckOptions {
    fn default() -> Self {
        Self {
            capacity: 2000.0,
            inflow_mean: 2000.0,
            inflow_std: 200.0,
            days: 200,
            noise_std: 0.0,
            seed: 0,
            estimation: EstimationConfig {
                samples: 20,
                batch_size: 20,
                learning_rate: 20.0,
                max_epochs: 200,
                tolerance: 1e-2,
                ..EstimationConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckReport {
    pub true_mean: f64,
    pub true_std: f64,
    /// Mean and std of the observed downstream flow.
    pub observed_mean: f64,
    pub observed_std: f64,
    pub ddode_mean: f64,
    pub pdode_mean: f64,
    pub pdode_std: f64,
    /// `true_mean − estimate` for each estimator.
    pub ddode_bias: f64,
    pub pdode_bias: f64,
    pub ddode_epochs: usize,
    pub pdode_epochs: usize,
    pub ddode_status: Status,
    pub pdode_status: Status,
}

/// Origin 1 → node 2 over the bottleneck (link 1), then 2 → 3 over a wide link (link 2)
/// whose inflow is observed. Both links take 3 s at free flow.
pub fn bottleneck_network(capacity: f64) -> Result<Network> {
    let link = |id: i64, capacity: f64| LinkSpec {
        id,
        from: id,
        to: id + 1,
        length: 0.05,
        free_flow_speed: 60.0,
        capacity,
        is_connector: false,
        jam_density: None,
    };
    Network::new(vec![1, 2, 3], vec![link(1, capacity), link(2, 10.0 * capacity)], vec![(1, 3)])
}

/// Fits the same downstream observations with PDODE and DDODE. Both start from the
/// observed mean, so any gap between them comes from the estimators themselves.
pub fn bottleneck_demo(opts: &BottleneckOptions) -> Result<BottleneckReport> {
    if !(opts.capacity > 0.0 && opts.capacity.is_finite()) {
        return Err(Error::Validation("bottleneck capacity must be positive".into()));
    }
    if opts.days < 2 {
        return Err(Error::Validation("the bottleneck demo needs at least 2 days".into()));
    }
    let net = bottleneck_network(opts.capacity)?;
    let paths = enumerate_paths(&net, 1)?;
    let grid = TimeGrid::new(1, 3600.0)?;
    let loader = Loader::new(&net, &paths, &grid, &opts.estimation.dnl)?;
    let truth = Pdod::projected(1, vec![opts.inflow_mean], vec![opts.inflow_std], SIGMA_MIN)?;
    let choice = RouteChoiceMatrix::uniform(&paths, 1);
    let obs = simulate_observations(&loader, &truth, &choice, opts.days, &[1], opts.noise_std, opts.seed)?;
    let observed = fit_summary(obs.days(), 1)?;
    let start = |std: f64| Pdod::projected(1, observed.mean.clone(), vec![std], opts.estimation.sigma_min);

    let mut cfg = opts.estimation.clone();
    cfg.ddode = false;
    let pdode = estimate(&loader, &obs, &cfg, Some(start(observed.std[0])?))?;
    cfg.ddode = true;
    let ddode = estimate(&loader, &obs, &cfg, Some(start(cfg.sigma_min)?))?;

    Ok(BottleneckReport {
        true_mean: opts.inflow_mean,
        true_std: opts.inflow_std,
        observed_mean: observed.mean[0],
        observed_std: observed.std[0],
        ddode_mean: ddode.pdod.mean()[0],
        pdode_mean: pdode.pdod.mean()[0],
        pdode_std: pdode.pdod.std()[0],
        ddode_bias: opts.inflow_mean - ddode.pdod.mean()[0],
        pdode_bias: opts.inflow_mean - pdode.pdod.mean()[0],
        ddode_epochs: ddode.epoch,
        pdode_epochs: pdode.epoch,
        ddode_status: ddode.status,
        pdode_status: pdode.status,
    })
}
