//! Scores, synthetic scenarios and the experiment harness.

mod bottleneck;
mod experiment;
mod synth;

pub use bottleneck::{bottleneck_demo, bottleneck_network, BottleneckOptions, BottleneckReport};
pub use experiment::{
    builtin_network, loss_history_csv, planned_runs, run_experiment, write_estimate, write_report, ExperimentConfig,
    ExperimentKind, ExperimentOutcome, ObservationConfig, RunSummary, Scenario,
};
pub use synth::{choose_observed_links, generate_truth, simulate_observations, DemandSpec, PerOd};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::behavior::{solve_statistical_equilibrium, EquilibriumOptions, RouteChoiceMatrix};
use crate::demand::{sample_demand, stream_id, Pdod};
use crate::distance::fit_summary;
use crate::dnl::Loader;
use crate::error::{ensure_len, Error, Result};
use crate::io::fmt_sig;
use crate::obs::restrict_links;

const EVAL_TAG: u64 = 5;

/// `1 − Σ(t − e)² / Σ(t − t̄)²`.
pub fn r_squared(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    ensure_len("estimate vector", truth.len(), estimate.len())?;
    if truth.is_empty() {
        return Err(Error::Validation("R² of empty vectors".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let total: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if total == 0.0 {
        return Err(Error::Validation("R² undefined for a constant truth vector".into()));
    }
    let resid: f64 = truth.iter().zip(estimate).map(|(t, e)| (t - e).powi(2)).sum();
    Ok(1.0 - resid / total)
}

/// True-versus-estimated values behind one score.
#[derive(Debug, Clone, PartialEq)]
pub struct Scatter {
    pub name: &'static str,
    pub truth: Vec<f64>,
    pub estimate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub r2_ol_mean: f64,
    pub r2_ol_std: f64,
    pub r2_al_mean: f64,
    pub r2_al_std: f64,
    pub r2_od_mean: f64,
    pub r2_od_std: f64,
    #[serde(skip)]
    pub scatter: Vec<Scatter>,
}

impl EvaluationReport {
    /// Scatter data as CSV (`metric,index,truth,estimate`).
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("metric,index,truth,estimate\n");
        for s in &self.scatter {
            for (i, (t, e)) in s.truth.iter().zip(&s.estimate).enumerate() {
                let _ = writeln!(out, "{},{i},{},{}", s.name, fmt_sig(*t), fmt_sig(*e));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationOptions {
    /// Demand samples simulated per PDOD.
    pub samples: usize,
    pub seed: u64,
    pub equilibrium: EquilibriumOptions,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 0,
            equilibrium: EquilibriumOptions::default(),
        }
    }
}

/// Per-entry mean and std (ddof 1) of arrival link flows over `samples` demand draws
/// taken from stream family `family`.
pub fn link_flow_moments(
    loader: &Loader<'_>,
    pdod: &Pdod,
    choice: &RouteChoiceMatrix,
    samples: usize,
    seed: u64,
    family: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples < 2 {
        return Err(Error::Precondition("flow moments need at least 2 samples".into()));
    }
    let flows = (0..samples as u64)
        .map(|l| {
            let q = sample_demand(pdod, seed, stream_id(EVAL_TAG, family, l));
            let f = choice.apply(&q.demand)?;
            loader.run(&f)?.link_flows(&f)
        })
        .collect::<Result<Vec<_>>>()?;
    let s = fit_summary(&flows, 1)?;
    // Entries without variation come back floored; report them as exactly 0.
    let std = s.std.into_iter().map(|v| if v <= crate::distance::STD_FLOOR { 0.0 } else { v }).collect();
    Ok((s.mean, std))
}

/// Compares two PDODs through the flows they generate, each under its own equilibrium
/// route choice. Pass a known equilibrium to skip solving for it. The two sides draw
/// independent samples, so comparing a PDOD with itself shows the Monte Carlo error.
pub fn evaluate(
    loader: &Loader<'_>,
    truth: &Pdod,
    truth_choice: Option<&RouteChoiceMatrix>,
    estimated: &Pdod,
    estimated_choice: Option<&RouteChoiceMatrix>,
    observed_links: &[usize],
    opts: &EvaluationOptions,
) -> Result<EvaluationReport> {
    ensure_len("estimated PDOD", truth.len(), estimated.len())?;
    let solve = |p: &Pdod, given: Option<&RouteChoiceMatrix>| -> Result<RouteChoiceMatrix> {
        match given {
            Some(c) => Ok(c.clone()),
            None => Ok(solve_statistical_equilibrium(loader, p, &opts.equilibrium)?.choice),
        }
    };
    let tc = solve(truth, truth_choice)?;
    let ec = solve(estimated, estimated_choice)?;
    let (tm, ts) = link_flow_moments(loader, truth, &tc, opts.samples, opts.seed, 0)?;
    let (em, es) = link_flow_moments(loader, estimated, &ec, opts.samples, opts.seed, 1)?;
    let na = loader.network().num_links();
    let scatter = vec![
        Scatter {
            name: "ol_mean",
            truth: restrict_links(&tm, observed_links, na),
            estimate: restrict_links(&em, observed_links, na),
        },
        Scatter {
            name: "ol_std",
            truth: restrict_links(&ts, observed_links, na),
            estimate: restrict_links(&es, observed_links, na),
        },
        Scatter {
            name: "al_mean",
            truth: tm,
            estimate: em,
        },
        Scatter {
            name: "al_std",
            truth: ts,
            estimate: es,
        },
        Scatter {
            name: "od_mean",
            truth: truth.mean().to_vec(),
            estimate: estimated.mean().to_vec(),
        },
        Scatter {
            name: "od_std",
            truth: truth.std().to_vec(),
            estimate: estimated.std().to_vec(),
        },
    ];
    let r2 = |i: usize| r_squared(&scatter[i].truth, &scatter[i].estimate);
    Ok(EvaluationReport {
        r2_ol_mean: r2(0)?,
        r2_ol_std: r2(1)?,
        r2_al_mean: r2(2)?,
        r2_al_std: r2(3)?,
        r2_od_mean: r2(4)?,
        r2_od_std: r2(5)?,
        scatter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_squared_cases() {
        let t = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        assert_eq!(r_squared(&t, &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&t, &[3.0, 2.0, 1.0]).unwrap(), -3.0);
        assert!(r_squared(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(r_squared(&t, &[1.0]).is_err());
        assert!(r_squared(&[], &[]).is_err());
    }

    #[test]
    fn r_squared_permutation_invariant() {
        let t = [4.0, 1.0, 7.0, 3.0];
        let e = [3.5, 1.5, 6.0, 3.0];
        let tp = [7.0, 3.0, 4.0, 1.0];
        let ep = [6.0, 3.0, 3.5, 1.5];
        assert!((r_squared(&t, &e).unwrap() - r_squared(&tp, &ep).unwrap()).abs() < 1e-15);
    }
}
