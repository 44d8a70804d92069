//! Dynamic network loading with a point-queue link model.
//!
//! Every link is a free-flow segment of duration `τ` followed by a vertical queue that
//! discharges at most `capacity` vehicles per second. Cumulative curves are kept on a fine
//! grid of `substeps` points per interval and are piecewise linear in between; departures
//! of a path cohort are spread uniformly over their interval.
//!
//! Bottleneck departures follow Newell's point-queue formula
//! `D(t) = min_{s ≤ t} [A(s) + μ (t − s)]`, evaluated exactly at grid points by including
//! the breakpoints of the shifted arrival curve `A(t) = N_in(t − τ)`.
//!
//! Travel times and the DAR matrix come from marginal-vehicle trajectories: a vehicle
//! entering link `a` at `t` leaves once the downstream curve reaches `N_in(t)`. This keeps
//! `ρ` defined for cohorts that carry no flow, which the backward pass relies on.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::net::{Network, PathTable, TimeGrid};
use crate::sparse::CsrMatrix;

/// DAR entries below this are dropped.
const RHO_DROP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnlOptions {
    /// Intervals simulated past the study period so tail cohorts can clear.
    /// `None` uses twice the longest free-flow path time.
    pub horizon_extension: Option<usize>,
    /// Fine grid points per interval.
    pub substeps: usize,
}

impl Default for DnlOptions {
    fn default() -> Self {
        Self {
            horizon_extension: None,
            substeps: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DnlResult {
    /// Link travel time by entry interval, seconds, at `h * A + a`.
    pub link_times: Vec<f64>,
    /// Path travel time by departure interval, seconds, at `h * P + k`.
    pub path_times: Vec<f64>,
    /// `ρ[(h' A + a), (h P + k)]`: share of cohort `(k, h)` entering link `a` during `h'`.
    pub rho: CsrMatrix,
    pub departures: f64,
    /// Vehicles that reached their destination within the simulated horizon.
    pub exits: f64,
    /// Final cumulative inflow per link.
    pub link_inflow: Vec<f64>,
    /// Final cumulative outflow per link.
    pub link_outflow: Vec<f64>,
    /// Whether every queue emptied before the extended horizon ended.
    pub cleared: bool,
    pub horizon_intervals: usize,
}

impl DnlResult {
    /// Arrival-based link flows `X = ρ F`.
    pub fn link_flows(&self, flows: &[f64]) -> Result<Vec<f64>> {
        link_flows(&self.rho, flows)
    }
}

/// `X = ρ F`.
pub fn link_flows(rho: &CsrMatrix, flows: &[f64]) -> Result<Vec<f64>> {
    rho.mul_vec(flows)
}

pub fn default_extension(net: &Network, paths: &PathTable, grid: &TimeGrid) -> usize {
    let longest = (0..paths.len())
        .map(|k| paths.free_flow_time(net, k))
        .fold(0.0, f64::max);
    ((2.0 * longest / grid.interval_length()).ceil() as usize).max(1)
}

/// Loading plan for a fixed network and path set; reusable across many flow vectors.
#[derive(Debug, Clone)]
pub struct Loader<'a> {
    net: &'a Network,
    paths: &'a PathTable,
    grid: TimeGrid,
    substeps: usize,
    extension: usize,
    /// `(path, position)` pairs per link.
    incidences: Vec<Vec<(usize, usize)>>,
    order: Vec<usize>,
    acyclic: bool,
}

struct LinkCurves {
    tau: f64,
    mu: f64,
    connector: bool,
    inflow: Vec<f64>,
    outflow: Vec<f64>,
    /// `min over i' <= i of inflow[i'] − μ (t_i' + τ)`; empty for connectors.
    prefix_min: Vec<f64>,
}

/// Linear interpolation of a grid curve at fractional index `x`; flat beyond both ends.
fn interp(curve: &[f64], x: f64) -> f64 {
    if x <= 0.0 {
        return curve[0];
    }
    let i = x.floor() as usize;
    if i >= curve.len() - 1 {
        return curve[curve.len() - 1];
    }
    let f = x - i as f64;
    if f == 0.0 {
        curve[i]
    } else {
        curve[i] + f * (curve[i + 1] - curve[i])
    }
}

impl<'a> Loader<'a> {
    pub fn new(net: &'a Network, paths: &'a PathTable, grid: &TimeGrid, opts: &DnlOptions) -> Result<Self> {
        if opts.substeps == 0 {
            return Err(Error::Validation("substeps must be positive".into()));
        }
        let mut incidences = vec![Vec::new(); net.num_links()];
        let mut succ = vec![Vec::new(); net.num_links()];
        let mut indeg = vec![0usize; net.num_links()];
        for (k, p) in paths.paths().iter().enumerate() {
            for (pos, &a) in p.links.iter().enumerate() {
                incidences[a].push((k, pos));
                if let Some(&b) = p.links.get(pos + 1) {
                    if !succ[a].contains(&b) {
                        succ[a].push(b);
                        indeg[b] += 1;
                    }
                }
            }
        }
        // Kahn's algorithm; leftover links sit on a cycle of the succession graph.
        let mut order = Vec::with_capacity(net.num_links());
        let mut ready: Vec<usize> = (0..net.num_links()).filter(|&a| indeg[a] == 0).rev().collect();
        while let Some(a) = ready.pop() {
            order.push(a);
            for &b in &succ[a] {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    ready.push(b);
                }
            }
        }
        let acyclic = order.len() == net.num_links();
        if !acyclic {
            order.extend((0..net.num_links()).filter(|&a| indeg[a] > 0));
        }
        Ok(Self {
            net,
            paths,
            grid: *grid,
            substeps: opts.substeps,
            extension: opts
                .horizon_extension
                .unwrap_or_else(|| default_extension(net, paths, grid)),
            incidences,
            order,
            acyclic,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn paths(&self) -> &PathTable {
        self.paths
    }

    fn dt(&self) -> f64 {
        self.grid.interval_length() / self.substeps as f64
    }

    /// Runs the loading for path departures `flows` (length `N P`, layout `h * P + k`).
    pub fn run(&self, flows: &[f64]) -> Result<DnlResult> {
        let n = self.grid.num_intervals();
        let np = self.paths.len();
        let na = self.net.num_links();
        ensure_len("path flow vector", n * np, flows.len())?;
        if flows.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("path flow vector"));
        }
        if let Some(f) = flows.iter().find(|f| **f < 0.0) {
            return Err(Error::Validation(format!("negative path flow {f}")));
        }

        let s = self.substeps;
        let m = (n + self.extension) * s;
        let dt = self.dt();

        // inflow[k][pos] is the cumulative inflow of path k into its pos-th link.
        let mut inflow: Vec<Vec<Vec<f64>>> = self
            .paths
            .paths()
            .iter()
            .map(|p| vec![Vec::new(); p.links.len()])
            .collect();
        let mut exits: Vec<Vec<f64>> = vec![Vec::new(); np];
        for (k, cohort) in inflow.iter_mut().enumerate() {
            let mut curve = vec![0.0; m + 1];
            let mut acc = 0.0;
            for h in 0..n {
                let f = flows[h * np + k];
                for i in 1..=s {
                    curve[h * s + i] = acc + f * i as f64 / s as f64;
                }
                acc += f;
            }
            for v in curve.iter_mut().skip(n * s + 1) {
                *v = acc;
            }
            cohort[0] = curve;
            for c in cohort.iter_mut().skip(1) {
                *c = vec![0.0; m + 1];
            }
        }

        let mut curves: Vec<Option<LinkCurves>> = (0..na).map(|_| None).collect();
        let max_sweeps = if self.acyclic { 1 } else { na + 2 };
        for sweep in 0..max_sweeps {
            let mut change = 0.0f64;
            for &a in &self.order {
                let link = &self.net.links()[a];
                let incid = &self.incidences[a];
                let mut total = vec![0.0; m + 1];
                for &(k, pos) in incid {
                    for (t, v) in total.iter_mut().zip(&inflow[k][pos]) {
                        *t += v;
                    }
                }
                let tau = link.free_flow_time();
                let mu = link.capacity_per_second();
                let connector = link.is_connector;
                let (outflow, prefix_min) = if connector {
                    (total.clone(), Vec::new())
                } else {
                    bottleneck_departures(&total, tau, mu, dt)
                };

                // Per-path composition of the outflow under FIFO.
                let entry_pos = if connector { Vec::new() } else { entry_positions(&total, &outflow) };
                for &(k, pos) in incid {
                    let out: Vec<f64> = if connector {
                        inflow[k][pos].clone()
                    } else {
                        entry_pos.iter().map(|&x| interp(&inflow[k][pos], x)).collect()
                    };
                    let target = if pos + 1 < self.paths.paths()[k].links.len() {
                        &mut inflow[k][pos + 1]
                    } else {
                        &mut exits[k]
                    };
                    if !self.acyclic && target.len() == out.len() {
                        let d = target
                            .iter()
                            .zip(&out)
                            .map(|(x, y)| (x - y).abs())
                            .fold(0.0, f64::max);
                        change = change.max(d);
                    }
                    *target = out;
                }
                curves[a] = Some(LinkCurves {
                    tau,
                    mu,
                    connector,
                    inflow: total,
                    outflow,
                    prefix_min,
                });
            }
            if self.acyclic || (sweep > 0 && change < 1e-12) {
                break;
            }
        }
        let curves: Vec<LinkCurves> = curves.into_iter().map(|c| c.expect("every link loaded")).collect();

        let departures: f64 = flows.iter().sum();
        let total_exits: f64 = exits.iter().map(|e| e.last().copied().unwrap_or(0.0)).sum();
        let link_inflow: Vec<f64> = curves.iter().map(|c| c.inflow[m]).collect();
        let link_outflow: Vec<f64> = curves.iter().map(|c| c.outflow[m]).collect();
        let cleared = link_inflow
            .iter()
            .zip(&link_outflow)
            .all(|(i, o)| i - o <= 1e-9 * i.max(1.0));
        if !cleared {
            warn!(
                "queues did not clear within {} extra intervals; lengthen the horizon extension",
                self.extension
            );
        }

        let exit_time = |a: usize, t: f64| -> f64 { exit_time(&curves[a], t, dt) };

        let len = self.grid.interval_length();
        let mut link_times = vec![0.0; n * na];
        for h in 0..n {
            let t = (h as f64 + 0.5) * len;
            for a in 0..na {
                link_times[h * na + a] = exit_time(a, t) - t;
            }
        }

        let mut path_times = vec![0.0; n * np];
        let mut triplets = Vec::new();
        let weight = 1.0 / s as f64;
        let mut bucket = vec![0.0; n];
        for (k, p) in self.paths.paths().iter().enumerate() {
            for h in 0..n {
                let t0 = (h as f64 + 0.5) * len;
                let t = p.links.iter().fold(t0, |t, &a| exit_time(a, t));
                path_times[h * np + k] = t - t0;
            }
            // Entry times into every link along the path for departures on the fine grid.
            let mut entries: Vec<Vec<f64>> = vec![Vec::with_capacity(n * s + 1); p.links.len()];
            for j in 0..=n * s {
                let mut t = j as f64 * dt;
                for (pos, &a) in p.links.iter().enumerate() {
                    entries[pos].push(t);
                    t = exit_time(a, t);
                }
            }
            for (pos, &a) in p.links.iter().enumerate() {
                let e = &entries[pos];
                for h in 0..n {
                    bucket.iter_mut().for_each(|b| *b = 0.0);
                    for j in h * s..(h + 1) * s {
                        spread(&mut bucket, e[j], e[j + 1], weight, len);
                    }
                    for (hp, &v) in bucket.iter().enumerate() {
                        if v > RHO_DROP {
                            triplets.push((hp * na + a, h * np + k, v.min(1.0)));
                        }
                    }
                }
            }
        }

        Ok(DnlResult {
            link_times,
            path_times,
            rho: CsrMatrix::from_triplets(n * na, n * np, triplets),
            departures,
            exits: total_exits,
            link_inflow,
            link_outflow,
            cleared,
            horizon_intervals: n + self.extension,
        })
    }
}

/// Distributes `weight`, carried uniformly by entry times in `[lo, hi]`, over intervals.
fn spread(bucket: &mut [f64], lo: f64, hi: f64, weight: f64, len: f64) {
    let n = bucket.len();
    let first = (lo / len).floor();
    if first >= n as f64 {
        return;
    }
    let span = hi - lo;
    if span <= 1e-12 * len {
        bucket[first as usize] += weight;
        return;
    }
    let mut h = first as usize;
    while h < n {
        let a = lo.max(h as f64 * len);
        let b = hi.min((h + 1) as f64 * len);
        if b > a {
            bucket[h] += weight * (b - a) / span;
        }
        if hi <= (h + 1) as f64 * len {
            break;
        }
        h += 1;
    }
}

/// Cumulative bottleneck departures at grid points, with the running minimum of
/// `G_i = A(t_i) − μ (t_i + τ)` that defines them.
fn bottleneck_departures(inflow: &[f64], tau: f64, mu: f64, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let m = inflow.len() - 1;
    let mut prefix_min = Vec::with_capacity(m + 1);
    let mut acc = f64::INFINITY;
    for (i, a) in inflow.iter().enumerate() {
        acc = acc.min(a - mu * (i as f64 * dt + tau));
        prefix_min.push(acc);
    }
    let eps = 1e-9 * dt;
    let out = (0..=m)
        .map(|j| {
            let t = j as f64 * dt;
            if t + eps < tau {
                return 0.0;
            }
            // Breakpoints t_i + τ at or before t.
            let i = (((t - tau + eps) / dt).floor() as usize).min(m);
            (mu * t + prefix_min[i]).min(interp(inflow, (t - tau) / dt))
        })
        .collect();
    (out, prefix_min)
}

/// For each grid point, the fractional grid position at which `inflow` first reaches
/// `outflow[j]`: the entry time of the vehicle leaving at `t_j`.
fn entry_positions(inflow: &[f64], outflow: &[f64]) -> Vec<f64> {
    let m = inflow.len() - 1;
    let mut q = 0usize;
    outflow
        .iter()
        .map(|&d| {
            while q < m && inflow[q] < d {
                q += 1;
            }
            if q == 0 || inflow[q] < d {
                return q as f64;
            }
            let lo = inflow[q - 1];
            if lo >= d {
                // Only reachable when the curve is flat at d; take the earliest point.
                return (q - 1) as f64;
            }
            (q - 1) as f64 + (d - lo) / (inflow[q] - lo)
        })
        .collect()
}

/// Exit time of a marginal vehicle entering the link at `t`.
///
/// Departures are `D(s) = min(A(s − τ), μ s + min over t_i + τ <= s of G_i)`. For
/// `s >= t + τ` the first term already exceeds the vehicle's position `A(t)`, so the exit
/// is the first such `s` where the second term reaches it. That term is linear between
/// consecutive breakpoints `t_i + τ`, which makes the solve exact rather than limited by
/// the grid.
fn exit_time(c: &LinkCurves, t: f64, dt: f64) -> f64 {
    if c.connector {
        return t;
    }
    let free = t + c.tau;
    let ahead = interp(&c.inflow, t / dt);
    if ahead <= 0.0 {
        return free;
    }
    let target = ahead - 1e-12 * ahead.max(1.0);
    let pm = &c.prefix_min;
    let m = pm.len() - 1;
    let i0 = ((t / dt).floor().max(0.0) as usize).min(m);
    // Segment i spans [t_i + τ, t_{i+1} + τ); its right-end value only grows once it
    // reaches the target, so the first segment that gets there can be bisected for.
    let end = |i: usize| c.mu * ((i + 1) as f64 * dt + c.tau) + pm[i];
    let (mut lo, mut hi) = (i0, m);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if end(mid) < target {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    free.max((target - pm[lo]) / c.mu)
}

/// One-shot loading; see [`Loader`] for repeated runs on the same network.
pub fn run_dnl(
    net: &Network,
    paths: &PathTable,
    grid: &TimeGrid,
    flows: &[f64],
    opts: &DnlOptions,
) -> Result<DnlResult> {
    Loader::new(net, paths, grid, opts)?.run(flows)
}
