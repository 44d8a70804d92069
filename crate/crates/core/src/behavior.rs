//! Logit route choice and the statistical-equilibrium fixed point.
//!
//! Costs handed to [`logit_choice`] are in the unit the dispersion is expressed in.
//! The equilibrium solver and the estimator pass mean path travel times in minutes.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::demand::{sample_demand, Pdod};
use crate::dnl::{DnlResult, Loader};
use crate::error::{ensure_len, Error, Result};
use crate::io::fmt_sig;
use crate::net::PathTable;
use crate::sparse::CsrMatrix;

/// Default logit dispersion, per minute of travel time.
pub const DEFAULT_DISPERSION: f64 = 0.1;

/// Path shares `p[h * P + k]` of OD `od(k)` demand in interval `h`.
///
/// As a matrix it is `N P × N K` with the single nonzero of row `(h, k)` in column
/// `(h, od(k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteChoiceMatrix {
    num_intervals: usize,
    num_od: usize,
    path_od: Vec<usize>,
    shares: Vec<f64>,
}

impl RouteChoiceMatrix {
    /// Equal shares among the paths of each OD pair.
    pub fn uniform(paths: &PathTable, num_intervals: usize) -> Self {
        let np = paths.len();
        let path_od: Vec<usize> = paths.paths().iter().map(|p| p.od).collect();
        let shares = (0..num_intervals * np)
            .map(|i| 1.0 / paths.paths_of(path_od[i % np]).len() as f64)
            .collect();
        Self {
            num_intervals,
            num_od: num_od(paths),
            path_od,
            shares,
        }
    }

    /// Wraps explicit shares; every (OD, interval) group must be a probability vector.
    pub fn from_shares(paths: &PathTable, num_intervals: usize, shares: Vec<f64>) -> Result<Self> {
        ensure_len("route-choice shares", num_intervals * paths.len(), shares.len())?;
        let m = Self {
            num_intervals,
            num_od: num_od(paths),
            path_od: paths.paths().iter().map(|p| p.od).collect(),
            shares,
        };
        if m.shares.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Validation("route-choice share outside [0, 1]".into()));
        }
        if let Some(c) = m.column_sums().iter().find(|c| (**c - 1.0).abs() > 1e-9) {
            return Err(Error::Validation(format!("route-choice column sums to {c}, not 1")));
        }
        Ok(m)
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    pub fn num_paths(&self) -> usize {
        self.path_od.len()
    }

    pub fn num_od(&self) -> usize {
        self.num_od
    }

    pub fn shares(&self) -> &[f64] {
        &self.shares
    }

    /// Sum of shares per `(h, od)` column, at `h * K + od`.
    pub fn column_sums(&self) -> Vec<f64> {
        let np = self.num_paths();
        let mut sums = vec![0.0; self.num_intervals * self.num_od];
        for (i, s) in self.shares.iter().enumerate() {
            sums[(i / np) * self.num_od + self.path_od[i % np]] += s;
        }
        sums
    }

    /// `F = p Q`.
    pub fn apply(&self, demand: &[f64]) -> Result<Vec<f64>> {
        ensure_len("OD demand vector", self.num_intervals * self.num_od, demand.len())?;
        let np = self.num_paths();
        Ok(self
            .shares
            .iter()
            .enumerate()
            .map(|(i, s)| s * demand[(i / np) * self.num_od + self.path_od[i % np]])
            .collect())
    }

    /// `pᵀ g`, pulling a path-flow gradient back to OD demand.
    pub fn apply_transpose(&self, grad: &[f64]) -> Result<Vec<f64>> {
        ensure_len("path-flow gradient", self.shares.len(), grad.len())?;
        let np = self.num_paths();
        let mut out = vec![0.0; self.num_intervals * self.num_od];
        for (i, (s, g)) in self.shares.iter().zip(grad).enumerate() {
            out[(i / np) * self.num_od + self.path_od[i % np]] += s * g;
        }
        Ok(out)
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let np = self.num_paths();
        let trip = self
            .shares
            .iter()
            .enumerate()
            .map(|(i, &s)| (i, (i / np) * self.num_od + self.path_od[i % np], s))
            .collect();
        CsrMatrix::from_triplets(self.shares.len(), self.num_intervals * self.num_od, trip)
    }

    /// Coordinate-format CSV (`row,col,value`), rows `h * P + k`, columns `h * K + od`.
    pub fn to_coo_csv(&self) -> String {
        let np = self.num_paths();
        let mut out = String::from("row,col,value\n");
        for (i, s) in self.shares.iter().enumerate() {
            let col = (i / np) * self.num_od + self.path_od[i % np];
            let _ = writeln!(out, "{i},{col},{}", fmt_sig(*s));
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.shares
            .iter()
            .zip(&other.shares)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn num_od(paths: &PathTable) -> usize {
    paths.paths().iter().map(|p| p.od + 1).max().unwrap_or(0)
}

/// Logit shares from mean path costs `costs[h * P + k]`.
pub fn logit_choice(costs: &[f64], paths: &PathTable, num_intervals: usize, dispersion: f64) -> Result<RouteChoiceMatrix> {
    if !(dispersion > 0.0 && dispersion.is_finite()) {
        return Err(Error::Validation(format!("dispersion must be positive, got {dispersion}")));
    }
    let np = paths.len();
    ensure_len("path cost vector", num_intervals * np, costs.len())?;
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("path cost vector"));
    }
    let k_od = num_od(paths);
    let mut shares = vec![0.0; num_intervals * np];
    for h in 0..num_intervals {
        for od in 0..k_od {
            let group = paths.paths_of(od);
            if group.is_empty() {
                return Err(Error::Validation(format!("OD pair {od} has no paths")));
            }
            let best = group.iter().map(|&k| costs[h * np + k]).fold(f64::INFINITY, f64::min);
            let mut total = 0.0;
            for &k in group {
                let w = (-dispersion * (costs[h * np + k] - best)).exp();
                shares[h * np + k] = w;
                total += w;
            }
            for &k in group {
                shares[h * np + k] /= total;
            }
        }
    }
    Ok(RouteChoiceMatrix {
        num_intervals,
        num_od: k_od,
        path_od: paths.paths().iter().map(|p| p.od).collect(),
        shares,
    })
}

/// Path costs in minutes averaged over a batch of loadings.
pub fn mean_path_minutes(loadings: &[DnlResult]) -> Vec<f64> {
    let len = loadings.first().map(|r| r.path_times.len()).unwrap_or(0);
    let mut mean = vec![0.0; len];
    for r in loadings {
        for (m, c) in mean.iter_mut().zip(&r.path_times) {
            *m += c;
        }
    }
    let scale = 1.0 / (60.0 * loadings.len().max(1) as f64);
    mean.iter_mut().for_each(|m| *m *= scale);
    mean
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriumOptions {
    /// Demand samples per iteration.
    pub samples: usize,
    pub max_iters: usize,
    /// Stop once no share moves by more than this.
    pub tol: f64,
    /// Logit dispersion per minute.
    pub dispersion: f64,
    pub seed: u64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            samples: 20,
            max_iters: 50,
            tol: 1e-4,
            dispersion: DEFAULT_DISPERSION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub choice: RouteChoiceMatrix,
    /// Loadings of the last iteration's samples.
    pub loadings: Vec<DnlResult>,
    pub iterations: usize,
    pub converged: bool,
    pub last_change: f64,
}

/// Stream tag for equilibrium demand samples.
const EQUILIBRIUM_TAG: u64 = 1;

/// Method of successive averages on logit shares, from uniform shares.
///
/// The same demand samples are reused in every iteration so the map being averaged is
/// fixed and the iteration converges deterministically.
pub fn solve_statistical_equilibrium(loader: &Loader<'_>, pdod: &Pdod, opts: &EquilibriumOptions) -> Result<Equilibrium> {
    if opts.samples == 0 {
        return Err(Error::Precondition("equilibrium needs at least one sample".into()));
    }
    let n = loader.grid().num_intervals();
    ensure_len("PDOD entries", n * loader.network().num_od(), pdod.len())?;
    let samples: Vec<_> = (0..opts.samples as u64)
        .map(|l| sample_demand(pdod, opts.seed, crate::demand::stream_id(EQUILIBRIUM_TAG, 0, l)))
        .collect();
    let mut p = RouteChoiceMatrix::uniform(loader.paths(), n);
    let mut last_change = f64::INFINITY;
    let mut loadings = Vec::new();
    for iter in 1..=opts.max_iters.max(1) {
        loadings = samples
            .iter()
            .map(|s| loader.run(&p.apply(&s.demand)?))
            .collect::<Result<Vec<_>>>()?;
        let target = logit_choice(&mean_path_minutes(&loadings), loader.paths(), n, opts.dispersion)?;
        let step = 1.0 / iter as f64;
        let mut next = p.clone();
        for (s, t) in next.shares.iter_mut().zip(&target.shares) {
            *s += step * (t - *s);
        }
        last_change = next.max_abs_diff(&p);
        p = next;
        if last_change < opts.tol {
            return Ok(Equilibrium {
                choice: p,
                loadings,
                iterations: iter,
                converged: true,
                last_change,
            });
        }
    }
    warn!("route-choice equilibrium stopped after {} iterations, last change {last_change:.3e}", opts.max_iters);
    Ok(Equilibrium {
        choice: p,
        loadings,
        iterations: opts.max_iters.max(1),
        converged: false,
        last_change,
    })
}
