//! Statistical distances between diagonal Gaussians and their gradients with respect to
//! the simulated side.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistanceKind {
    L1,
    L2,
    W2,
    ForwardKl,
    Bhattacharyya,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 5] = [
        DistanceKind::L1,
        DistanceKind::L2,
        DistanceKind::W2,
        DistanceKind::ForwardKl,
        DistanceKind::Bhattacharyya,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::L1 => "l1",
            DistanceKind::L2 => "l2",
            DistanceKind::W2 => "w2",
            DistanceKind::ForwardKl => "kl",
            DistanceKind::Bhattacharyya => "bhattacharyya",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistanceKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown distance '{s}' (expected l1, l2, w2, kl or bhattacharyya)"
                ))
            })
    }
}

impl TryFrom<String> for DistanceKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DistanceKind> for String {
    fn from(k: DistanceKind) -> String {
        k.name().to_string()
    }
}

/// Diagonal Gaussian fitted to a batch of flow vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sample_count: usize,
}

impl GaussianSummary {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, sample_count: usize) -> Result<Self> {
        ensure_len("summary std", mean.len(), std.len())?;
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian summary"));
        }
        if std.iter().any(|s| *s < 0.0) {
            return Err(Error::Validation("negative standard deviation in summary".into()));
        }
        Ok(Self {
            mean,
            std,
            sample_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-entry mean and unfloored std.
fn moments(batch: &[Vec<f64>], ddof: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Precondition("cannot fit a summary to an empty batch".into()));
    }
    if n <= ddof {
        return Err(Error::Precondition(format!("ddof {ddof} needs more than {n} samples")));
    }
    let d = batch[0].len();
    for x in batch {
        ensure_len("batch vector", d, x.len())?;
    }
    let mut mean = vec![0.0; d];
    for x in batch {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for x in batch {
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / (n - ddof) as f64).sqrt()).collect();
    Ok((mean, std))
}

/// Sample mean and std (divisor `n - ddof`), std floored at [`STD_FLOOR`].
pub fn fit_summary(batch: &[Vec<f64>], ddof: usize) -> Result<GaussianSummary> {
    let (mean, std) = moments(batch, ddof)?;
    let std = std.into_iter().map(|s| s.max(STD_FLOOR)).collect();
    GaussianSummary::new(mean, std, batch.len())
}

fn check_pair(kind: DistanceKind, obs: &GaussianSummary, sim: &GaussianSummary) -> Result<()> {
    ensure_len("simulated summary", obs.dim(), sim.dim())?;
    if matches!(kind, DistanceKind::ForwardKl | DistanceKind::Bhattacharyya)
        && obs.std.iter().chain(&sim.std).any(|s| *s <= 0.0)
    {
        return Err(Error::Validation(format!("{kind} distance needs positive standard deviations")));
    }
    Ok(())
}

pub fn distance(kind: DistanceKind, obs: &GaussianSummary, sim: &GaussianSummary) -> Result<f64> {
    check_pair(kind, obs, sim)?;
    let terms = obs.mean.iter().zip(&obs.std).zip(sim.mean.iter().zip(&sim.std));
    let total = match kind {
        DistanceKind::L1 => terms
            .map(|((mo, so), (ms, ss))| (mo - ms).abs() + (so * so - ss * ss).abs())
            .sum(),
        DistanceKind::L2 => terms
            .map(|((mo, so), (ms, ss))| (mo - ms).powi(2) + (so * so - ss * ss).powi(2))
            .sum(),
        DistanceKind::W2 => terms.map(|((mo, so), (ms, ss))| (mo - ms).powi(2) + (so - ss).powi(2)).sum(),
        DistanceKind::ForwardKl => {
            0.5 * terms
                .map(|((mo, so), (ms, ss))| {
                    2.0 * (so / ss).ln() + (mo - ms).powi(2) / (so * so) + (ss * ss) / (so * so) - 1.0
                })
                .sum::<f64>()
        }
        DistanceKind::Bhattacharyya => terms
            .map(|((mo, so), (ms, ss))| {
                let v = 0.5 * (so * so + ss * ss);
                0.125 * (mo - ms).powi(2) / v + 0.5 * (v / (so * ss)).ln()
            })
            .sum(),
    };
    // Rounding can leave the closed forms a hair below zero for identical inputs.
    Ok(f64::max(total, 0.0))
}

/// `(∂M/∂sim.mean, ∂M/∂sim.std)`; the L1 subgradient is 0 at ties.
pub fn distance_gradient(
    kind: DistanceKind,
    obs: &GaussianSummary,
    sim: &GaussianSummary,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(kind, obs, sim)?;
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let (gm, gs) = obs
        .mean
        .iter()
        .zip(&obs.std)
        .zip(sim.mean.iter().zip(&sim.std))
        .map(|((&mo, &so), (&ms, &ss))| {
            let dm = ms - mo;
            match kind {
                DistanceKind::L1 => (sign(dm), 2.0 * ss * sign(ss * ss - so * so)),
                DistanceKind::L2 => (2.0 * dm, 4.0 * ss * (ss * ss - so * so)),
                DistanceKind::W2 => (2.0 * dm, 2.0 * (ss - so)),
                DistanceKind::ForwardKl => (dm / (so * so), ss / (so * so) - 1.0 / ss),
                DistanceKind::Bhattacharyya => {
                    let v = 0.5 * (so * so + ss * ss);
                    (0.25 * dm / v, ss * (0.5 / v - 0.125 * dm * dm / (v * v)) - 0.5 / ss)
                }
            }
        })
        .unzip();
    Ok((gm, gs))
}

/// `∂M(obs, fit(batch))/∂X^(l)` for every sample of the simulated batch.
///
/// Entries whose fitted std sits on the floor pass no gradient through the std.
pub fn chain_to_samples(
    kind: DistanceKind,
    obs: &GaussianSummary,
    batch: &[Vec<f64>],
    ddof: usize,
) -> Result<Vec<Vec<f64>>> {
    let (mean, raw_std) = moments(batch, ddof)?;
    let sim = GaussianSummary::new(
        mean.clone(),
        raw_std.iter().map(|s| s.max(STD_FLOOR)).collect(),
        batch.len(),
    )?;
    let (gm, gs) = distance_gradient(kind, obs, &sim)?;
    let l = batch.len() as f64;
    let denom = (batch.len() - ddof) as f64;
    Ok(batch
        .iter()
        .map(|x| {
            (0..x.len())
                .map(|d| {
                    let through_std = if raw_std[d] > STD_FLOOR {
                        gs[d] * (x[d] - mean[d]) / (denom * raw_std[d])
                    } else {
                        0.0
                    };
                    gm[d] / l + through_std
                })
                .collect()
        })
        .collect())
}
