//! Acceptance checks, one PASS/FAIL line each. Run with
//! `cargo test -p pdode-core --test acceptance`.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{packet_oracle, random_network, single_link_network, toy_network};
use pdode::behavior::logit_choice;
use pdode::demand::{sample_demand, Pdod};
use pdode::distance::{distance, fit_summary, DistanceKind, GaussianSummary};
use pdode::dnl::{run_dnl, DnlOptions, Loader};
use pdode::estimator::{backward_pass, estimate, forward_pass, EstimationConfig, EstimationState};
use pdode::eval::{bottleneck_demo, BottleneckOptions, EvaluationReport, ExperimentConfig, Scenario};
use pdode::net::{enumerate_paths, LinkSpec, Network, TimeGrid};
use pdode::obs::ObservationSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SMALL13: &str = include_str!("../../../configs/small13.json");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    let s = elapsed.as_secs_f64();
    check(s < limit_s, format!("{detail}; {s:.1}s of {limit_s}s"))
}

fn five_point(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let net = toy_network();
    let paths = enumerate_paths(&net, 2).map_err(|e| e.to_string())?;
    let grid = TimeGrid::new(3, 60.0).unwrap();
    let loader = Loader::new(&net, &paths, &grid, &DnlOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let links = vec![0, 1, 3];
    let mut worst = 0.0f64;
    for kind in DistanceKind::ALL {
        for trial in 0..3 {
            let mean: Vec<f64> = (0..6).map(|_| rng.random_range(20.0..40.0)).collect();
            let std: Vec<f64> = (0..6).map(|_| rng.random_range(1.0..3.0)).collect();
            let pdod = Pdod::new(2, mean.clone(), std.clone()).unwrap();
            let costs: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..3.0)).collect();
            let p = logit_choice(&costs, &paths, 3, 0.5).unwrap();
            let days: Vec<Vec<f64>> = (0..10).map(|_| (0..9).map(|_| rng.random_range(5.0..30.0)).collect()).collect();
            let observed = fit_summary(&days, 1).unwrap();
            let cfg = EstimationConfig {
                distance: kind,
                samples: 6,
                seed: trial,
                ..EstimationConfig::default()
            };
            let tape = forward_pass(&loader, &pdod, &p, &observed, &links, &cfg, 0).map_err(|e| e.to_string())?;
            let (gq, gs) = backward_pass(&tape, &cfg).map_err(|e| e.to_string())?;
            let scale = gq.iter().chain(&gs).fold(0.0f64, |m, g| m.max(g.abs()));
            for i in 0..6 {
                let fd_q = five_point(1e-3, |e| {
                    let mut m = mean.clone();
                    m[i] += e;
                    tape.frozen_loss(&Pdod::new(2, m, std.clone()).unwrap(), &cfg).unwrap()
                });
                let fd_s = five_point(1e-4, |e| {
                    let mut s = std.clone();
                    s[i] += e;
                    tape.frozen_loss(&Pdod::new(2, mean.clone(), s).unwrap(), &cfg).unwrap()
                });
                for (g, fd) in [(gq[i], fd_q), (gs[i], fd_s)] {
                    // Entries that are zero up to roundoff are compared against the gradient scale.
                    let rel = (g - fd).abs() / fd.abs().max(1e-3 * scale);
                    if kind == DistanceKind::L1 && !rel.is_finite() {
                        continue;
                    }
                    worst = worst.max(rel);
                }
            }
        }
    }
    if worst >= 1e-4 {
        return Err(format!("worst relative error {worst:.2e}"));
    }
    within(start.elapsed(), 30.0, format!("worst relative error {worst:.2e} over 5 kinds x 3 instances"))
}

fn distance_axioms() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let summary = |rng: &mut ChaCha8Rng| {
        let dim = rng.random_range(1..6);
        GaussianSummary::new(
            (0..dim).map(|_| rng.random_range(-50.0..50.0)).collect(),
            (0..dim).map(|_| rng.random_range(0.1..20.0)).collect(),
            10,
        )
        .unwrap()
    };
    for kind in DistanceKind::ALL {
        for i in 0..1000 {
            let a = summary(&mut rng);
            let b = GaussianSummary::new(
                a.mean.iter().map(|m| m + rng.random_range(-5.0..5.0)).collect(),
                a.std.iter().map(|s| s * rng.random_range(0.5..2.0)).collect(),
                10,
            )
            .unwrap();
            let d = distance(kind, &a, &b).map_err(|e| e.to_string())?;
            let same = distance(kind, &a, &a.clone()).map_err(|e| e.to_string())?;
            if !(d > 1e-10) || same.abs() > 1e-10 || same < 0.0 {
                return Err(format!("{kind} pair {i}: d(a,b) = {d:e}, d(a,a) = {same:e}"));
            }
        }
    }
    let p = GaussianSummary::new(vec![0.0], vec![1.0], 10).unwrap();
    let q = GaussianSummary::new(vec![3.0], vec![2.0], 10).unwrap();
    let w2 = distance(DistanceKind::W2, &p, &q).unwrap();
    if w2 != 10.0 {
        return Err(format!("W2(N(0,1), N(3,4)) = {w2}"));
    }
    within(start.elapsed(), 5.0, "1000 pairs per kind, W2 example = 10".into())
}

fn reparameterization_moments() -> Outcome {
    let start = Instant::now();
    let pdod = Pdod::new(2, vec![2.0, 3.0], vec![0.5, 1.0]).unwrap();
    let n = 100_000;
    let mut sum = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    for s in 0..n {
        let d = sample_demand(&pdod, 13, s as u64);
        for i in 0..2 {
            sum[i] += d.demand[i];
            sq[i] += d.demand[i] * d.demand[i];
        }
    }
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for i in 0..2 {
        let m = sum[i] / n as f64;
        let sd = ((sq[i] - n as f64 * m * m) / (n - 1) as f64).sqrt();
        worst = worst.max((m - pdod.mean()[i]).abs() / pdod.mean()[i]);
        worst = worst.max((sd - pdod.std()[i]).abs() / pdod.std()[i]);
        detail.push(format!("({m:.4}, {sd:.4})"));
    }
    if worst >= 0.01 {
        return Err(format!("moments {}; worst {:.3}%", detail.join(" "), 100.0 * worst));
    }
    within(start.elapsed(), 5.0, format!("moments {}; worst {:.3}%", detail.join(" "), 100.0 * worst))
}

fn chain_link(id: i64, from: i64, to: i64, tau: f64, cap_vph: f64) -> LinkSpec {
    LinkSpec {
        id,
        from,
        to,
        length: tau * 0.01,
        free_flow_speed: 36.0,
        capacity: cap_vph,
        is_connector: false,
        jam_density: None,
    }
}

fn dnl_conservation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..20 {
        let net = random_network(&mut rng);
        let paths = enumerate_paths(&net, 3).unwrap();
        let n = 12;
        let grid = TimeGrid::new(n, 60.0).unwrap();
        let flows: Vec<f64> = (0..n * paths.len())
            .map(|i| if i / paths.len() < 4 { rng.random_range(0.0..40.0) } else { 0.0 })
            .collect();
        let opts = DnlOptions {
            horizon_extension: Some(40),
            ..DnlOptions::default()
        };
        let r = run_dnl(&net, &paths, &grid, &flows, &opts).map_err(|e| e.to_string())?;
        let total: f64 = flows.iter().sum();
        if !r.cleared || (r.exits - total).abs() > 1e-9 * total {
            return Err(format!("network {case}: exits {} vs departures {total}", r.exits));
        }
        let (np, na) = (paths.len(), net.num_links());
        for (k, p) in paths.paths().iter().enumerate() {
            for h in 0..n - 1 {
                let last_exit = (h as f64 + 1.5) * 60.0 + r.path_times[(h + 1) * np + k];
                if last_exit >= grid.horizon() {
                    continue;
                }
                for &a in &p.links {
                    let sum: f64 = (0..n).map(|hp| r.rho.get(hp * na + a, h * np + k)).sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(format!("network {case} path {k} interval {h} link {a}: DAR column sums to {sum}"));
                    }
                }
            }
        }
    }

    let instances: Vec<(Network, Vec<f64>, usize)> = vec![
        (
            Network::new(vec![1, 2], vec![chain_link(1, 1, 2, 50.0, 1440.0)], vec![(1, 2)]).unwrap(),
            vec![30.0, 60.0, 10.0],
            3,
        ),
        (
            Network::new(
                vec![1, 2, 3],
                vec![chain_link(1, 1, 2, 30.0, 2400.0), chain_link(2, 2, 3, 40.0, 900.0)],
                vec![(1, 3)],
            )
            .unwrap(),
            vec![40.0, 50.0, 0.0, 0.0],
            4,
        ),
        (
            Network::new(
                vec![1, 2, 3, 4],
                vec![
                    chain_link(1, 1, 3, 20.0, 3600.0),
                    chain_link(2, 2, 3, 35.0, 3600.0),
                    chain_link(3, 3, 4, 25.0, 1200.0),
                ],
                vec![(1, 4), (2, 4)],
            )
            .unwrap(),
            vec![25.0, 20.0, 30.0, 15.0, 0.0, 0.0],
            3,
        ),
    ];
    let mut worst = 0.0f64;
    for (i, (net, flows, n)) in instances.iter().enumerate() {
        let paths = enumerate_paths(net, 5).unwrap();
        let grid = TimeGrid::new(*n, 100.0).unwrap();
        let opts = DnlOptions {
            horizon_extension: Some(20),
            ..DnlOptions::default()
        };
        let r = run_dnl(net, &paths, &grid, flows, &opts).map_err(|e| e.to_string())?;
        let o = packet_oracle(net, &paths, &grid, flows, 0.01);
        for (a, b) in r.link_times.iter().zip(&o.link_times).chain(r.path_times.iter().zip(&o.path_times)) {
            let rel = (a - b).abs() / b;
            worst = worst.max(rel);
            if rel > 0.01 {
                return Err(format!("packet instance {i}: time {a} vs {b}"));
            }
        }
        for row in 0..r.rho.rows() {
            for col in (0..r.rho.cols()).filter(|&c| flows[c] > 0.0) {
                let (a, b) = (r.rho.get(row, col), o.rho[row][col]);
                if (a - b).abs() > 0.01 {
                    return Err(format!("packet instance {i}: rho[{row},{col}] {a} vs {b}"));
                }
            }
        }
    }
    within(
        start.elapsed(),
        60.0,
        format!("20 random networks conserve; packet oracle worst time error {:.3}%", 100.0 * worst),
    )
}

fn exact_recovery() -> Outcome {
    let start = Instant::now();
    let net = single_link_network(1e5);
    let paths = enumerate_paths(&net, 1).unwrap();
    let n = 3;
    let grid = TimeGrid::new(n, 300.0).unwrap();
    let loader = Loader::new(&net, &paths, &grid, &DnlOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let normal = Normal::new(20.0f64, 2.0).unwrap();
    let days = (0..100).map(|_| (0..n).map(|_| normal.sample(&mut rng).max(0.0)).collect()).collect();
    let obs = ObservationSet::new(vec![0], n, days).unwrap();
    let cfg = EstimationConfig {
        distance: DistanceKind::W2,
        learning_rate: 2.0,
        batch_size: 100,
        samples: 100,
        max_epochs: 200,
        seed: 3,
        ..EstimationConfig::default()
    };
    let state = estimate(&loader, &obs, &cfg, None).map_err(|e| e.to_string())?;
    let means = state.pdod.mean();
    let stds = state.pdod.std();
    let std = stds.iter().sum::<f64>() / n as f64;
    let detail = format!(
        "means {:?}, stds {:?} after {} epochs",
        means.iter().map(|m| (m * 100.0).round() / 100.0).collect::<Vec<_>>(),
        stds.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>(),
        state.epoch
    );
    let ok = state.epoch <= 200 && means.iter().all(|m| (m - 20.0).abs() <= 1.0) && (std - 2.0).abs() <= 0.2;
    if !ok {
        return Err(detail);
    }
    within(start.elapsed(), 120.0, detail)
}

fn bottleneck_bias() -> Outcome {
    let start = Instant::now();
    let r = bottleneck_demo(&BottleneckOptions::default()).map_err(|e| e.to_string())?;
    let detail = format!("DDODE {:.1}, PDODE {:.1}", r.ddode_mean, r.pdode_mean);
    if !(r.ddode_mean < 1990.0 && (r.pdode_mean - 2000.0).abs() < (r.ddode_mean - 2000.0).abs()) {
        return Err(detail);
    }
    within(start.elapsed(), 120.0, detail)
}

struct Run {
    state: EstimationState,
    report: EvaluationReport,
    elapsed: Duration,
}

/// The bundled small-network harness, generated once and shared by the ordering checks.
struct Harness {
    cfg: ExperimentConfig,
    scenario: Scenario,
    obs: ObservationSet,
    setup: Duration,
}

impl Harness {
    fn new() -> Result<Self, String> {
        let start = Instant::now();
        let cfg: ExperimentConfig = serde_json::from_str(SMALL13).map_err(|e| e.to_string())?;
        let scenario = Scenario::generate(&cfg, Path::new(".")).map_err(|e| e.to_string())?;
        let obs = scenario.simulate().map_err(|e| e.to_string())?;
        Ok(Self {
            cfg,
            scenario,
            obs,
            setup: start.elapsed(),
        })
    }

    fn run(&self, distance: DistanceKind, ddode: bool) -> Result<Run, String> {
        let start = Instant::now();
        // Every run takes the full epoch budget so the convergence check sees 200 epochs.
        let cfg = EstimationConfig {
            distance,
            ddode,
            tolerance: 0.0,
            ..self.cfg.estimation.clone()
        };
        let state = self.scenario.estimate(&self.obs, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
        let report = self.scenario.evaluate(&state.pdod).map_err(|e| e.to_string())?;
        Ok(Run {
            state,
            report,
            elapsed: start.elapsed(),
        })
    }
}

fn overfitting_ordering(h: &Harness, pdode: &Run, ddode: &Run) -> Outcome {
    let (p, d) = (&pdode.report, &ddode.report);
    let detail = format!(
        "AL mean PDODE {:.4} vs DDODE {:.4}, OD mean PDODE {:.4} vs DDODE {:.4}",
        p.r2_al_mean, d.r2_al_mean, p.r2_od_mean, d.r2_od_mean
    );
    if !(p.r2_al_mean > d.r2_al_mean && p.r2_od_mean > d.r2_od_mean) {
        return Err(detail);
    }
    within(h.setup + pdode.elapsed + ddode.elapsed, 900.0, detail)
}

fn distance_ordering(h: &Harness, l1: &Run, l2: &Run, w2: &Run) -> Outcome {
    let axes = |r: &Run| (r.report.r2_od_mean, r.report.r2_od_std);
    let ((m1, s1), (m2, s2), (mw, sw)) = (axes(l1), axes(l2), axes(w2));
    let detail = format!("OD mean/std R2: l1 {m1:.3}/{s1:.3}, l2 {m2:.3}/{s2:.3}, w2 {mw:.3}/{sw:.3}");
    let weakest = m1.min(s1).min(m2.min(s2));
    let ok = m1 >= 0.8 && m2 >= 0.8 && mw >= 0.8 && s2 >= s1 && mw.min(sw) >= weakest;
    if !ok {
        return Err(detail);
    }
    within(h.setup + l1.elapsed + l2.elapsed + w2.elapsed, 2700.0, detail)
}

fn convergence(w2: &Run) -> Outcome {
    let hist = &w2.state.loss_history;
    let loss = |epoch: usize| hist.iter().find(|(e, _)| *e == epoch).map(|(_, l)| *l);
    let (Some(first), Some(twentieth)) = (loss(1), loss(20)) else {
        return Err(format!("loss history has {} epochs", hist.len()));
    };
    let detail = format!(
        "epoch 20 loss is {:.1}% of epoch 1 ({twentieth:.3e} / {first:.3e}), {} epochs",
        100.0 * twentieth / first,
        w2.state.epoch
    );
    if !(twentieth <= 0.2 * first && w2.state.epoch == 200) {
        return Err(detail);
    }
    within(w2.elapsed, 600.0, detail)
}

fn determinism(pdode: &Run, ddode: &Run) -> Outcome {
    let again = Harness::new()?;
    for (label, first, second) in [
        ("PDODE", pdode, again.run(DistanceKind::W2, false)?),
        ("DDODE", ddode, again.run(DistanceKind::W2, true)?),
    ] {
        if first.state.loss_history != second.state.loss_history {
            return Err(format!("{label} loss histories differ"));
        }
        if first.state.pdod.to_csv_string() != second.state.pdod.to_csv_string() {
            return Err(format!("{label} PDOD files differ"));
        }
    }
    Ok("loss histories and PDOD CSVs identical for PDODE and DDODE".into())
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "distance axioms", distance_axioms());
    report(3, "reparameterization moments", reparameterization_moments());
    report(4, "DNL conservation and DAR completeness", dnl_conservation());
    report(5, "exact recovery", exact_recovery());
    report(6, "bottleneck bias", bottleneck_bias());

    let harness = Harness::new();
    let runs = harness.as_ref().map_err(Clone::clone).and_then(|h| {
        Ok((
            h.run(DistanceKind::W2, false)?,
            h.run(DistanceKind::W2, true)?,
            h.run(DistanceKind::L1, false)?,
            h.run(DistanceKind::L2, false)?,
        ))
    });
    match (&harness, &runs) {
        (Ok(h), Ok((w2, ddode, l1, l2))) => {
            report(7, "PDODE vs DDODE ordering", overfitting_ordering(h, w2, ddode));
            report(8, "distance comparison ordering", distance_ordering(h, l1, l2, w2));
            report(9, "convergence", convergence(w2));
            report(10, "determinism", determinism(w2, ddode));
        }
        (_, Err(e)) => {
            for (n, name) in [(7, "PDODE vs DDODE ordering"), (8, "distance comparison ordering"), (9, "convergence"), (10, "determinism")] {
                report(n, name, Err(format!("harness failed: {e}")));
            }
        }
        _ => unreachable!(),
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
