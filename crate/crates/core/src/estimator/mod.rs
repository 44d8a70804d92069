//! PDOD estimation by stochastic gradient descent through the sampled loading graph.
//!
//! One forward pass samples `L` demands, routes them with the current shares, loads the
//! network and compares the fitted link-flow summary with the observed one. The backward
//! pass treats the DAR matrices and the shares as constants and pulls the distance
//! gradient back through `X = ρ p Q` and `Q = q + σ ∘ ν`.

mod checkpoint;
mod optim;

pub use checkpoint::Checkpoint;
pub use optim::{Moments, OptimizerKind, OptimizerState};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{logit_choice, mean_path_minutes, RouteChoiceMatrix, DEFAULT_DISPERSION};
use crate::demand::{demand_gradients, realize, rng_stream, stream_id, DemandSample, NoiseDraw, Pdod, SIGMA_MIN};
use crate::distance::{chain_to_samples, distance, fit_summary, DistanceKind, GaussianSummary};
use crate::dnl::{DnlOptions, Loader};
use crate::error::{ensure_len, Error, Result};
use crate::obs::{restrict_links, ObservationSet};
use crate::sparse::CsrMatrix;

const FORWARD_TAG: u64 = 2;
const SHUFFLE_TAG: u64 = 3;
const INIT_TAG: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub distance: DistanceKind,
    /// Demand samples per forward pass.
    pub samples: usize,
    /// Observed days per mini-batch.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Converged once no mean or std entry moves more than this over an epoch.
    pub tolerance: f64,
    pub seed: u64,
    pub ddof: usize,
    pub sigma_min: f64,
    /// Deterministic baseline: σ pinned at `sigma_min`, demand taken as the mean.
    pub ddode: bool,
    /// Upper bound of the uniform initial means.
    pub q_init_max: f64,
    /// Logit dispersion per minute.
    pub dispersion: f64,
    pub dnl: DnlOptions,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            distance: DistanceKind::W2,
            samples: 10,
            batch_size: 10,
            optimizer: OptimizerKind::Adagrad,
            learning_rate: 1.0,
            max_epochs: 200,
            tolerance: 1e-3,
            seed: 0,
            ddof: 1,
            sigma_min: SIGMA_MIN,
            ddode: false,
            q_init_max: 10.0,
            dispersion: DEFAULT_DISPERSION,
            dnl: DnlOptions::default(),
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Validation("at least 2 samples per forward pass are required".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Validation("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        if self.ddof >= 2 {
            return Err(Error::Validation("ddof must be 0 or 1".into()));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::Validation("sigma_min must be positive".into()));
        }
        if !(self.q_init_max >= 0.0 && self.q_init_max.is_finite()) {
            return Err(Error::Validation("q_init_max must be nonnegative".into()));
        }
        if !(self.dispersion > 0.0) {
            return Err(Error::Validation("dispersion must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationState {
    pub pdod: Pdod,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// `(epoch, mean mini-batch loss)`, epochs counted from 1.
    pub loss_history: Vec<(usize, f64)>,
    pub status: Status,
    /// Route-choice shares used by the next forward pass.
    pub choice: RouteChoiceMatrix,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub loss: f64,
    pub samples: Vec<DemandSample>,
    pub rho: Vec<CsrMatrix>,
    /// Simulated flows on the observed entries, one vector per sample.
    pub simulated: Vec<Vec<f64>>,
    pub choice: RouteChoiceMatrix,
    pub observed: GaussianSummary,
    pub links: Vec<usize>,
    pub num_links: usize,
    /// Mean path travel times across the samples, minutes.
    pub mean_path_minutes: Vec<f64>,
}

/// Samples, loads and scores one mini-batch. `stream` selects the noise streams.
pub fn forward_pass(
    loader: &Loader<'_>,
    pdod: &Pdod,
    choice: &RouteChoiceMatrix,
    observed: &GaussianSummary,
    links: &[usize],
    cfg: &EstimationConfig,
    stream: u64,
) -> Result<ForwardTape> {
    let na = loader.network().num_links();
    ensure_len("observed summary", links.len() * loader.grid().num_intervals(), observed.dim())?;
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut rho = Vec::with_capacity(cfg.samples);
    let mut simulated = Vec::with_capacity(cfg.samples);
    let mut loadings = Vec::with_capacity(cfg.samples);
    if cfg.ddode {
        // Deterministic demand: every sample is the mean, so one loading serves all.
        let sample = realize(pdod, NoiseDraw { nu: vec![0.0; pdod.len()], stream })?;
        let f = choice.apply(&sample.demand)?;
        let r = loader.run(&f)?;
        let x = restrict_links(&r.link_flows(&f)?, links, na);
        for _ in 0..cfg.samples {
            samples.push(sample.clone());
            rho.push(r.rho.clone());
            simulated.push(x.clone());
        }
        loadings.push(r);
    } else {
        for l in 0..cfg.samples as u64 {
            let noise = NoiseDraw::draw(pdod.len(), cfg.seed, stream_id(FORWARD_TAG, stream, l));
            let sample = realize(pdod, noise)?;
            let f = choice.apply(&sample.demand)?;
            let r = loader.run(&f)?;
            simulated.push(restrict_links(&r.link_flows(&f)?, links, na));
            samples.push(sample);
            rho.push(r.rho.clone());
            loadings.push(r);
        }
    }
    let sim = fit_summary(&simulated, cfg.ddof)?;
    let loss = distance(cfg.distance, observed, &sim)?;
    Ok(ForwardTape {
        loss,
        samples,
        rho,
        simulated,
        choice: choice.clone(),
        observed: observed.clone(),
        links: links.to_vec(),
        num_links: na,
        mean_path_minutes: mean_path_minutes(&loadings),
    })
}

/// `(∂L/∂q, ∂L/∂σ)` with ρ and p held fixed.
pub fn backward_pass(tape: &ForwardTape, cfg: &EstimationConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if tape.samples.is_empty() || tape.samples.len() != tape.rho.len() {
        return Err(Error::Precondition("incomplete forward tape".into()));
    }
    let per_sample = chain_to_samples(cfg.distance, &tape.observed, &tape.simulated, cfg.ddof)?;
    let len = tape.samples[0].demand.len();
    let mut g_mean = vec![0.0; len];
    let mut g_std = vec![0.0; len];
    let j = tape.links.len();
    for ((g_obs, rho), sample) in per_sample.iter().zip(&tape.rho).zip(&tape.samples) {
        let mut g_x = vec![0.0; rho.rows()];
        for (i, g) in g_obs.iter().enumerate() {
            g_x[(i / j) * tape.num_links + tape.links[i % j]] = *g;
        }
        let g_f = rho.mul_transpose_vec(&g_x)?;
        let g_q = tape.choice.apply_transpose(&g_f)?;
        let (gm, gs) = demand_gradients(sample, &g_q)?;
        for (acc, g) in g_mean.iter_mut().zip(gm) {
            *acc += g;
        }
        for (acc, g) in g_std.iter_mut().zip(gs) {
            *acc += g;
        }
    }
    Ok((g_mean, g_std))
}

impl ForwardTape {
    /// Loss of `pdod` with this tape's noise, DAR matrices and shares held fixed.
    /// The backward pass is the exact gradient of this function.
    pub fn frozen_loss(&self, pdod: &Pdod, cfg: &EstimationConfig) -> Result<f64> {
        let sims = self
            .samples
            .iter()
            .zip(&self.rho)
            .map(|(s, rho)| {
                let q = realize(pdod, s.noise.clone())?;
                let x = rho.mul_vec(&self.choice.apply(&q.demand)?)?;
                Ok(restrict_links(&x, &self.links, self.num_links))
            })
            .collect::<Result<Vec<_>>>()?;
        distance(cfg.distance, &self.observed, &fit_summary(&sims, cfg.ddof)?)
    }
}

/// Random initial PDOD: `q ~ U(0, q_init_max)`, `σ = 0.1 q + σ_min` (σ_min in DDODE mode).
pub fn initial_pdod(num_od: usize, num_intervals: usize, cfg: &EstimationConfig) -> Result<Pdod> {
    let mut rng = rng_stream(cfg.seed, stream_id(INIT_TAG, 0, 0));
    let mean: Vec<f64> = (0..num_od * num_intervals)
        .map(|_| if cfg.q_init_max > 0.0 { rng.random_range(0.0..cfg.q_init_max) } else { 0.0 })
        .collect();
    let std = if cfg.ddode {
        vec![cfg.sigma_min; mean.len()]
    } else {
        mean.iter().map(|m| 0.1 * m + cfg.sigma_min).collect()
    };
    Pdod::new(num_od, mean, std)
}

/// Splits shuffled day indices into mini-batches, folding a short tail into the last
/// full batch.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().map(Vec::len).unwrap_or(0) < 2 {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

pub struct Estimator<'l, 'n> {
    loader: &'l Loader<'n>,
    observations: &'l ObservationSet,
    cfg: EstimationConfig,
    pub state: EstimationState,
}

impl<'l, 'n> Estimator<'l, 'n> {
    pub fn new(
        loader: &'l Loader<'n>,
        observations: &'l ObservationSet,
        cfg: EstimationConfig,
        initial: Option<Pdod>,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = loader.grid().num_intervals();
        let k = loader.network().num_od();
        if observations.num_days() < 2 {
            return Err(Error::Precondition(format!(
                "estimation needs at least 2 observed days, got {}",
                observations.num_days()
            )));
        }
        if observations.num_intervals() != n {
            return Err(Error::dim("observed intervals", n, observations.num_intervals()));
        }
        if let Some(&a) = observations.links().iter().find(|&&a| a >= loader.network().num_links()) {
            return Err(Error::OutOfRange(format!("observed link index {a}")));
        }
        let mut pdod = match initial {
            Some(p) => {
                ensure_len("initial PDOD", n * k, p.len())?;
                p
            }
            None => initial_pdod(k, n, &cfg)?,
        };
        if cfg.ddode {
            pdod = Pdod::projected(k, pdod.mean().to_vec(), vec![cfg.sigma_min; pdod.len()], cfg.sigma_min)?;
        }
        let state = EstimationState {
            optimizer: OptimizerState::new(cfg.optimizer, cfg.learning_rate, pdod.len()),
            pdod,
            epoch: 0,
            loss_history: Vec::new(),
            status: Status::Running,
            choice: RouteChoiceMatrix::uniform(loader.paths(), n),
        };
        Ok(Self {
            loader,
            observations,
            cfg,
            state,
        })
    }

    /// Continues from a checkpoint written by an earlier run with the same inputs.
    pub fn resume(
        loader: &'l Loader<'n>,
        observations: &'l ObservationSet,
        cfg: EstimationConfig,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        let mut e = Self::new(loader, observations, cfg, None)?;
        e.state = checkpoint.into_state(loader.paths(), loader.grid().num_intervals())?;
        ensure_len("checkpoint PDOD", e.state.optimizer.mean.first.len(), e.state.pdod.len())?;
        Ok(e)
    }

    pub fn config(&self) -> &EstimationConfig {
        &self.cfg
    }

    /// Runs one epoch and returns its mean mini-batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.state.epoch as u64;
        let mut order: Vec<usize> = (0..self.observations.num_days()).collect();
        order.shuffle(&mut rng_stream(self.cfg.seed, stream_id(SHUFFLE_TAG, epoch, 0)));
        let before = self.state.pdod.clone();
        let mut total = 0.0;
        let groups = batches(&order, self.cfg.batch_size);
        for (b, days) in groups.iter().enumerate() {
            let batch: Vec<Vec<f64>> = days.iter().map(|&d| self.observations.days()[d].clone()).collect();
            let observed = fit_summary(&batch, self.cfg.ddof)?;
            let tape = forward_pass(
                self.loader,
                &self.state.pdod,
                &self.state.choice,
                &observed,
                self.observations.links(),
                &self.cfg,
                (epoch << 16) | b as u64,
            )?;
            let (gq, gs) = backward_pass(&tape, &self.cfg)?;
            self.state
                .optimizer
                .step(&mut self.state.pdod, &gq, &gs, self.cfg.sigma_min, !self.cfg.ddode)
                .map_err(|e| Error::Precondition(format!("epoch {} batch {b}: {e}", epoch + 1)))?;
            self.state.choice = logit_choice(
                &tape.mean_path_minutes,
                self.loader.paths(),
                self.loader.grid().num_intervals(),
                self.cfg.dispersion,
            )?;
            total += tape.loss;
        }
        let loss = total / groups.len() as f64;
        self.state.epoch += 1;
        self.state.loss_history.push((self.state.epoch, loss));
        let moved = before
            .mean()
            .iter()
            .zip(self.state.pdod.mean())
            .chain(before.std().iter().zip(self.state.pdod.std()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        debug!("epoch {}: loss {loss:.6e}, max change {moved:.3e}", self.state.epoch);
        if moved < self.cfg.tolerance {
            self.state.status = Status::Converged;
        } else if self.state.epoch >= self.cfg.max_epochs {
            self.state.status = Status::MaxEpochs;
        }
        Ok(loss)
    }

    /// Runs epochs until convergence or `max_epochs`, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EstimationState) -> Result<()>) -> Result<&EstimationState> {
        if self.state.epoch >= self.cfg.max_epochs && self.state.status == Status::Running {
            self.state.status = Status::MaxEpochs;
        }
        while self.state.status == Status::Running {
            self.run_epoch()?;
            on_epoch(&self.state)?;
        }
        info!(
            "estimation finished after {} epochs ({:?}), final loss {:.6e}",
            self.state.epoch,
            self.state.status,
            self.state.loss_history.last().map(|l| l.1).unwrap_or(f64::NAN)
        );
        Ok(&self.state)
    }
}

/// Full estimation from a random (or given) starting PDOD.
pub fn estimate(
    loader: &Loader<'_>,
    observations: &ObservationSet,
    cfg: &EstimationConfig,
    initial: Option<Pdod>,
) -> Result<EstimationState> {
    let mut e = Estimator::new(loader, observations, cfg.clone(), initial)?;
    e.run(|_| Ok(()))?;
    Ok(e.state)
}
