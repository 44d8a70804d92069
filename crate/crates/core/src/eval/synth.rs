use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::behavior::{solve_statistical_equilibrium, Equilibrium, EquilibriumOptions, RouteChoiceMatrix};
use crate::demand::{rng_stream, sample_demand, stream_id, Pdod, SIGMA_MIN};
use crate::dnl::Loader;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::obs::{restrict_links, ObservationSet};

const TRUTH_TAG: u64 = 6;
const OBS_DEMAND_TAG: u64 = 7;
const OBS_NOISE_TAG: u64 = 8;
const LINK_PICK_TAG: u64 = 9;

/// One value shared by every OD pair, or one per OD pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerOd {
    All(f64),
    Each(Vec<f64>),
}

impl PerOd {
    fn get(&self, od: usize, num_od: usize, what: &str) -> Result<f64> {
        let v = match self {
            PerOd::All(v) => *v,
            PerOd::Each(vs) if vs.len() == num_od => vs[od],
            PerOd::Each(vs) => {
                return Err(Error::Validation(format!(
                    "{what}: {} values given for {num_od} OD pairs",
                    vs.len()
                )))
            }
        };
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Validation(format!("{what} must be finite and nonnegative, got {v}")));
        }
        Ok(v)
    }
}

/// How the true PDOD is laid out over OD pairs and intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandSpec {
    /// Mean and std rise linearly from their base values to their peaks at interval
    /// `center` and fall back symmetrically, reaching the base `width` intervals away.
    Triangular {
        center: f64,
        width: f64,
        mean_peak: PerOd,
        mean_base: PerOd,
        std_peak: PerOd,
        std_base: PerOd,
    },
    /// Independent `U(0, mean_max)` means and `U(0, std_max)` stds.
    Uniform { mean_max: f64, std_max: f64 },
}

impl DemandSpec {
    /// Builds the PDOD; stds below `SIGMA_MIN` are raised to it.
    pub fn build(&self, num_od: usize, num_intervals: usize, seed: u64) -> Result<Pdod> {
        let len = num_od * num_intervals;
        let (mean, std) = match self {
            DemandSpec::Triangular {
                center,
                width,
                mean_peak,
                mean_base,
                std_peak,
                std_base,
            } => {
                if !(width.is_finite() && *width > 0.0 && center.is_finite()) {
                    return Err(Error::Validation("triangular spec needs a finite center and positive width".into()));
                }
                let mut mean = vec![0.0; len];
                let mut std = vec![0.0; len];
                for od in 0..num_od {
                    let (mp, mb) = (mean_peak.get(od, num_od, "mean_peak")?, mean_base.get(od, num_od, "mean_base")?);
                    let (sp, sb) = (std_peak.get(od, num_od, "std_peak")?, std_base.get(od, num_od, "std_base")?);
                    for h in 0..num_intervals {
                        let w = (1.0 - (h as f64 - center).abs() / width).max(0.0);
                        mean[h * num_od + od] = mb + (mp - mb) * w;
                        std[h * num_od + od] = sb + (sp - sb) * w;
                    }
                }
                (mean, std)
            }
            DemandSpec::Uniform { mean_max, std_max } => {
                if !(mean_max.is_finite() && *mean_max >= 0.0 && std_max.is_finite() && *std_max >= 0.0) {
                    return Err(Error::Validation("uniform spec bounds must be finite and nonnegative".into()));
                }
                let mut rng = rng_stream(seed, stream_id(TRUTH_TAG, 0, 0));
                let mean = (0..len).map(|_| mean_max * rng.random::<f64>()).collect();
                let std = (0..len).map(|_| std_max * rng.random::<f64>()).collect();
                (mean, std)
            }
        };
        Pdod::projected(num_od, mean, std, SIGMA_MIN)
    }
}

/// Builds the true PDOD and solves its route-choice equilibrium. Without any demand the
/// shares are irrelevant and stay uniform.
pub fn generate_truth(
    loader: &Loader<'_>,
    spec: &DemandSpec,
    seed: u64,
    eq: &EquilibriumOptions,
) -> Result<(Pdod, Equilibrium)> {
    let n = loader.grid().num_intervals();
    let pdod = spec.build(loader.network().num_od(), n, seed)?;
    if pdod.mean().iter().all(|&m| m == 0.0) && pdod.std().iter().all(|&s| s <= SIGMA_MIN) {
        let eq = Equilibrium {
            choice: RouteChoiceMatrix::uniform(loader.paths(), n),
            loadings: Vec::new(),
            iterations: 0,
            converged: true,
            last_change: 0.0,
        };
        return Ok((pdod, eq));
    }
    let eq = solve_statistical_equilibrium(loader, &pdod, eq)?;
    Ok((pdod, eq))
}

/// Picks `count` distinct links at random, returned in index order.
pub fn choose_observed_links(net: &Network, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > net.num_links() {
        return Err(Error::Validation(format!(
            "cannot observe {count} of {} links",
            net.num_links()
        )));
    }
    let mut rng = rng_stream(seed, stream_id(LINK_PICK_TAG, 0, 0));
    let mut links = sample_indices(&mut rng, net.num_links(), count).into_vec();
    links.sort_unstable();
    Ok(links)
}

/// Daily observations: each day draws a demand, loads it with the fixed shares `choice`,
/// records arrival flows on `links`, adds `N(0, noise_std²)` noise and clamps at zero.
#[allow(clippy::too_many_arguments)]
pub fn simulate_observations(
    loader: &Loader<'_>,
    truth: &Pdod,
    choice: &RouteChoiceMatrix,
    days: usize,
    links: &[usize],
    noise_std: f64,
    seed: u64,
) -> Result<ObservationSet> {
    let na = loader.network().num_links();
    if days == 0 {
        return Err(Error::Validation("at least one observed day is required".into()));
    }
    if let Some(a) = links.iter().find(|&&a| a >= na) {
        return Err(Error::OutOfRange(format!("observed link index {a}")));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Validation(format!("noise std must be nonnegative, got {noise_std}")));
    }
    let flows = (0..days as u64)
        .map(|d| {
            let q = sample_demand(truth, seed, stream_id(OBS_DEMAND_TAG, d, 0));
            let f = choice.apply(&q.demand)?;
            let x = restrict_links(&loader.run(&f)?.link_flows(&f)?, links, na);
            let mut rng = rng_stream(seed, stream_id(OBS_NOISE_TAG, d, 0));
            Ok(x
                .into_iter()
                .map(|v| {
                    let e: f64 = if noise_std > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    (v + noise_std * e).max(0.0)
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut obs = ObservationSet::new(links.to_vec(), loader.grid().num_intervals(), flows)?;
    obs.noise_std = Some(noise_std);
    Ok(obs)
}
