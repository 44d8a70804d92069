//! Probabilistic dynamic OD demand and its reparameterized sampling.
//!
//! A realized demand is `Q = max(0, q + σ ∘ ν)` with `ν ~ N(0, I)`. The map is affine in
//! `(q, σ)` wherever the clamp is inactive, which is what makes `q` and `σ` trainable by
//! ordinary back-propagation.

use std::fmt::Write as _;
use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::io::fmt_sig;

/// Default lower bound on every standard deviation.
pub const SIGMA_MIN: f64 = 1e-6;

/// Independent random stream `stream` under master seed `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs a purpose tag and two counters into one stream id so that independent uses of
/// the same master seed never share a stream.
pub fn stream_id(tag: u64, major: u64, minor: u64) -> u64 {
    debug_assert!(tag < 1 << 8 && major < 1 << 36 && minor < 1 << 20);
    (tag << 56) | (major << 20) | minor
}

/// Mean and standard deviation per (OD, interval), laid out at `h * K + od`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pdod {
    num_od: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Pdod {
    pub fn new(num_od: usize, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if num_od == 0 || mean.is_empty() || mean.len() % num_od != 0 {
            return Err(Error::Validation(format!(
                "PDOD length {} is not a positive multiple of {num_od} OD pairs",
                mean.len()
            )));
        }
        ensure_len("PDOD std vector", mean.len(), std.len())?;
        if let Some(v) = mean.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(format!("PDOD mean must be finite and nonnegative, got {v}")));
        }
        if let Some(v) = std.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Validation(format!("PDOD std must be finite and positive, got {v}")));
        }
        Ok(Self { num_od, mean, std })
    }

    /// Builds a PDOD after projecting onto `mean >= 0`, `std >= sigma_min`.
    pub fn projected(num_od: usize, mut mean: Vec<f64>, mut std: Vec<f64>, sigma_min: f64) -> Result<Self> {
        for m in &mut mean {
            *m = m.max(0.0);
        }
        for s in &mut std {
            *s = s.max(sigma_min);
        }
        Self::new(num_od, mean, std)
    }

    pub fn num_od(&self) -> usize {
        self.num_od
    }

    pub fn num_intervals(&self) -> usize {
        self.mean.len() / self.num_od
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.mean, &mut self.std)
    }

    /// CSV with columns `od_index,interval,mean,std` (both indices 0-based).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("od_index,interval,mean,std\n");
        for (i, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", i % self.num_od, i / self.num_od, fmt_sig(*m), fmt_sig(*s));
        }
        out
    }

    pub fn from_csv_str(text: &str, source: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            od_index: usize,
            interval: usize,
            mean: f64,
            std: f64,
        }
        let mut rows = Vec::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        for r in rdr.deserialize() {
            let r: Row = r.map_err(|e| Error::Parse {
                path: source.to_string(),
                line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                msg: e.to_string(),
            })?;
            rows.push(r);
        }
        let k = rows.iter().map(|r| r.od_index + 1).max().unwrap_or(0);
        let n = rows.iter().map(|r| r.interval + 1).max().unwrap_or(0);
        if k * n != rows.len() || k == 0 {
            return Err(Error::Validation(format!(
                "{source}: expected one row per (od, interval), {k}x{n} grid but {} rows",
                rows.len()
            )));
        }
        let mut mean = vec![f64::NAN; k * n];
        let mut std = vec![f64::NAN; k * n];
        for r in rows {
            mean[r.interval * k + r.od_index] = r.mean;
            std[r.interval * k + r.od_index] = r.std;
        }
        Pdod::new(k, mean, std)
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }
}

/// One standard-normal draw per PDOD entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub nu: Vec<f64>,
    pub stream: u64,
}

impl NoiseDraw {
    pub fn draw(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = rng_stream(seed, stream);
        Self {
            nu: (0..len).map(|_| rng.sample(StandardNormal)).collect(),
            stream,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandSample {
    /// Realized OD demand `Q`, vehicles per interval.
    pub demand: Vec<f64>,
    pub noise: NoiseDraw,
    /// `false` where the nonnegativity clamp was active.
    pub active: Vec<bool>,
}

/// `Q = max(0, q + σ ∘ ν)` for a given noise draw.
pub fn realize(pdod: &Pdod, noise: NoiseDraw) -> Result<DemandSample> {
    ensure_len("noise draw", pdod.len(), noise.nu.len())?;
    let mut demand = Vec::with_capacity(pdod.len());
    let mut active = Vec::with_capacity(pdod.len());
    for ((m, s), nu) in pdod.mean.iter().zip(&pdod.std).zip(&noise.nu) {
        let raw = m + s * nu;
        active.push(raw > 0.0);
        demand.push(raw.max(0.0));
    }
    Ok(DemandSample {
        demand,
        noise,
        active,
    })
}

/// Draws a fresh noise vector from stream `stream` and realizes it.
pub fn sample_demand(pdod: &Pdod, seed: u64, stream: u64) -> DemandSample {
    let noise = NoiseDraw::draw(pdod.len(), seed, stream);
    realize(pdod, noise).expect("noise drawn with matching length")
}

/// Pulls `∂L/∂Q` back to `(∂L/∂q, ∂L/∂σ)`; clamped entries get a zero subgradient.
pub fn demand_gradients(sample: &DemandSample, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_len("upstream demand gradient", sample.demand.len(), upstream.len())?;
    let mut g_mean = Vec::with_capacity(upstream.len());
    let mut g_std = Vec::with_capacity(upstream.len());
    for ((g, &on), nu) in upstream.iter().zip(&sample.active).zip(&sample.noise.nu) {
        if on {
            g_mean.push(*g);
            g_std.push(nu * g);
        } else {
            g_mean.push(0.0);
            g_std.push(0.0);
        }
    }
    Ok((g_mean, g_std))
}
