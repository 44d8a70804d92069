//! Adaptive gradient steps with projection onto `q >= 0`, `σ >= σ_min`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::demand::Pdod;
use crate::error::{ensure_len, Error, Result};

const ADAGRAD_EPS: f64 = 1e-10;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADADELTA_RHO: f64 = 0.95;
const ADADELTA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adagrad,
    Adam,
    Adadelta,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adadelta => "adadelta",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adam" => Ok(OptimizerKind::Adam),
            "adadelta" => Ok(OptimizerKind::Adadelta),
            _ => Err(Error::Validation(format!(
                "unknown optimizer '{s}' (expected adagrad, adam or adadelta)"
            ))),
        }
    }
}

/// Per-coordinate accumulators for one decision vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    /// Adagrad: sum of g². Adam: first moment. AdaDelta: running E[g²].
    pub first: Vec<f64>,
    /// Adam: second moment. AdaDelta: running E[Δx²]. Unused by Adagrad.
    pub second: Vec<f64>,
}

impl Moments {
    fn zeros(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub steps: u64,
    pub mean: Moments,
    pub std: Moments,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, len: usize) -> Self {
        Self {
            kind,
            learning_rate,
            steps: 0,
            mean: Moments::zeros(len),
            std: Moments::zeros(len),
        }
    }

    /// One update of `pdod` from `(∂L/∂q, ∂L/∂σ)`, followed by projection. With
    /// `update_std == false` the standard deviations stay where they are.
    pub fn step(
        &mut self,
        pdod: &mut Pdod,
        grad_mean: &[f64],
        grad_std: &[f64],
        sigma_min: f64,
        update_std: bool,
    ) -> Result<()> {
        ensure_len("mean gradient", pdod.len(), grad_mean.len())?;
        ensure_len("std gradient", pdod.len(), grad_std.len())?;
        if grad_mean.iter().chain(grad_std).any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        ensure_len("optimizer state", pdod.len(), self.mean.first.len())?;
        self.steps += 1;
        let (mean, std) = pdod.parts_mut();
        let (kind, lr, t) = (self.kind, self.learning_rate, self.steps);
        update(kind, lr, t, &mut self.mean, mean, grad_mean);
        for m in mean.iter_mut() {
            *m = m.max(0.0);
        }
        if update_std {
            update(kind, lr, t, &mut self.std, std, grad_std);
        }
        for s in std.iter_mut() {
            *s = s.max(sigma_min);
        }
        Ok(())
    }
}

fn update(kind: OptimizerKind, lr: f64, t: u64, acc: &mut Moments, x: &mut [f64], g: &[f64]) {
    match kind {
        OptimizerKind::Adagrad => {
            for ((x, g), a) in x.iter_mut().zip(g).zip(&mut acc.first) {
                *a += g * g;
                *x -= lr * g / (*a + ADAGRAD_EPS).sqrt();
            }
        }
        OptimizerKind::Adam => {
            let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
            for (((x, g), m), v) in x.iter_mut().zip(g).zip(&mut acc.first).zip(&mut acc.second) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        OptimizerKind::Adadelta => {
            for (((x, g), eg), ed) in x.iter_mut().zip(g).zip(&mut acc.first).zip(&mut acc.second) {
                *eg = ADADELTA_RHO * *eg + (1.0 - ADADELTA_RHO) * g * g;
                let dx = -((*ed + ADADELTA_EPS).sqrt() / (*eg + ADADELTA_EPS).sqrt()) * g;
                *ed = ADADELTA_RHO * *ed + (1.0 - ADADELTA_RHO) * dx * dx;
                *x += lr * dx;
            }
        }
    }
}
