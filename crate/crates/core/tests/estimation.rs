mod common;

use common::{single_link_network, toy_network};
use pdode::behavior::logit_choice;
use pdode::demand::Pdod;
use pdode::distance::{fit_summary, DistanceKind};
use pdode::dnl::{DnlOptions, Loader};
use pdode::estimator::{backward_pass, estimate, forward_pass, Checkpoint, EstimationConfig, Estimator, Status};
use pdode::net::{enumerate_paths, TimeGrid};
use pdode::obs::ObservationSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn five_point(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

#[test]
fn toy_gradients_match_finite_differences() {
    let net = toy_network();
    let paths = enumerate_paths(&net, 2).unwrap();
    assert_eq!((net.num_links(), paths.len()), (6, 4));
    let grid = TimeGrid::new(3, 60.0).unwrap();
    let loader = Loader::new(&net, &paths, &grid, &DnlOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let links = vec![1, 3, 0];
    for kind in DistanceKind::ALL {
        for trial in 0..3 {
            let mean: Vec<f64> = (0..6).map(|_| rng.random_range(20.0..40.0)).collect();
            let std: Vec<f64> = (0..6).map(|_| rng.random_range(1.0..3.0)).collect();
            let pdod = Pdod::new(2, mean.clone(), std.clone()).unwrap();
            let costs: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..3.0)).collect();
            let p = logit_choice(&costs, &paths, 3, 0.5).unwrap();
            let days: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..9).map(|_| rng.random_range(5.0..30.0)).collect())
                .collect();
            let observed = fit_summary(&days, 1).unwrap();
            let cfg = EstimationConfig {
                distance: kind,
                samples: 6,
                seed: trial,
                ..EstimationConfig::default()
            };
            let tape = forward_pass(&loader, &pdod, &p, &observed, &links, &cfg, 0).unwrap();
            assert!((tape.frozen_loss(&pdod, &cfg).unwrap() - tape.loss).abs() <= 1e-9 * tape.loss.max(1.0));
            let (gq, gs) = backward_pass(&tape, &cfg).unwrap();
            let scale = gq.iter().chain(&gs).fold(0.0f64, |m, g| m.max(g.abs()));
            for i in 0..6 {
                let fd = five_point(1e-3, |e| {
                    let mut m = mean.clone();
                    m[i] += e;
                    tape.frozen_loss(&Pdod::new(2, m, std.clone()).unwrap(), &cfg).unwrap()
                });
                assert!((gq[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-3 * scale), "{kind} q[{i}]: {} vs {fd}", gq[i]);
                let fd = five_point(1e-4, |e| {
                    let mut s = std.clone();
                    s[i] += e;
                    tape.frozen_loss(&Pdod::new(2, mean.clone(), s).unwrap(), &cfg).unwrap()
                });
                assert!((gs[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-3 * scale), "{kind} s[{i}]: {} vs {fd}", gs[i]);
            }
        }
    }
}

#[test]
fn perfect_fit_has_zero_gradient() {
    let net = single_link_network(1e5);
    let paths = enumerate_paths(&net, 1).unwrap();
    let grid = TimeGrid::new(2, 60.0).unwrap();
    let loader = Loader::new(&net, &paths, &grid, &DnlOptions::default()).unwrap();
    let pdod = Pdod::new(1, vec![10.0, 12.0], vec![1.0, 2.0]).unwrap();
    let p = logit_choice(&[1.0, 1.0], &paths, 2, 0.1).unwrap();
    let cfg = EstimationConfig::default();
    // Score the simulated batch against its own summary.
    let probe = forward_pass(&loader, &pdod, &p, &fit_summary(&[vec![0.0; 2], vec![1.0; 2]], 1).unwrap(), &[0], &cfg, 5).unwrap();
    let own = fit_summary(&probe.simulated, 1).unwrap();
    let tape = forward_pass(&loader, &pdod, &p, &own, &[0], &cfg, 5).unwrap();
    assert_eq!(tape.loss, 0.0);
    let (gq, gs) = backward_pass(&tape, &cfg).unwrap();
    assert!(gq.iter().chain(&gs).all(|g| *g == 0.0));
}

#[test]
fn forward_pass_is_deterministic() {
    let net = toy_network();
    let paths = enumerate_paths(&net, 2).unwrap();
    let grid = TimeGrid::new(3, 60.0).unwrap();
    let loader = Loader::new(&net, &paths, &grid, &DnlOptions::default()).unwrap();
    let pdod = Pdod::new(2, vec![30.0; 6], vec![3.0; 6]).unwrap();
    let p = logit_choice(&[1.0; 12], &paths, 3, 0.1).unwrap();
    let obs = fit_summary(&[vec![20.0; 6], vec![25.0; 6]], 1).unwrap();
    let cfg = EstimationConfig::default();
    let a = forward_pass(&loader, &pdod, &p, &obs, &[1, 3], &cfg, 9).unwrap();
    let b = forward_pass(&loader, &pdod, &p, &obs, &[1, 3], &cfg, 9).unwrap();
    assert_eq!(a.loss, b.loss);
}

fn single_path_days(days: usize, n: usize, mean: f64, std: f64, seed: u64) -> ObservationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(mean, std).unwrap();
    let flows = (0..days)
        .map(|_| (0..n).map(|_| normal.sample(&mut rng).max(0.0)).collect())
        .collect();
    ObservationSet::new(vec![0], n, flows).unwrap()
}

#[test]
fn recovers_single_path_demand() {
    let net = single_link_network(1e5);
    let paths = enumerate_paths(&net, 1).unwrap();
    let n = 3;
    let grid = TimeGrid::new(n, 300.0).unwrap();
    let loader = Loader::new(&net, &paths, &grid, &DnlOptions::default()).unwrap();
    let obs = single_path_days(100, n, 20.0, 2.0, 1);
    // Full-batch summaries and many samples keep the small-sample std bias negligible.
    let cfg = EstimationConfig {
        learning_rate: 2.0,
        batch_size: 100,
        samples: 100,
        seed: 3,
        ..EstimationConfig::default()
    };
    let state = estimate(&loader, &obs, &cfg, None).unwrap();
    for h in 0..n {
        let m = state.pdod.mean()[h];
        assert!((m - 20.0).abs() < 1.0, "interval {h}: mean {m}");
    }
    let std = state.pdod.std().iter().sum::<f64>() / n as f64;
    assert!((std - 2.0).abs() < 0.2, "std {:?}", state.pdod.std());
}

#[test]
fn ddode_keeps_std_at_floor() {
    let net = single_link_network(1e5);
    let paths = enumerate_paths(&net, 1).unwrap();
    let grid = TimeGrid::new(2, 300.0).unwrap();
    let loader = Loader::new(&net, &paths, &grid, &DnlOptions::default()).unwrap();
    let obs = single_path_days(20, 2, 15.0, 1.0, 2);
    let cfg = EstimationConfig {
        ddode: true,
        max_epochs: 30,
        learning_rate: 2.0,
        ..EstimationConfig::default()
    };
    let state = estimate(&loader, &obs, &cfg, None).unwrap();
    assert!(state.pdod.std().iter().all(|s| *s == cfg.sigma_min));
    assert!(state.pdod.mean().iter().all(|m| (m - 15.0).abs() < 1.0), "{:?}", state.pdod.mean());
}

#[test]
fn rejects_single_day() {
    let net = single_link_network(1e5);
    let paths = enumerate_paths(&net, 1).unwrap();
    let grid = TimeGrid::new(2, 300.0).unwrap();
    let loader = Loader::new(&net, &paths, &grid, &DnlOptions::default()).unwrap();
    let obs = single_path_days(1, 2, 15.0, 1.0, 2);
    assert!(estimate(&loader, &obs, &EstimationConfig::default(), None).is_err());
    let empty = ObservationSet::new(vec![0], 2, vec![]).unwrap();
    assert!(estimate(&loader, &empty, &EstimationConfig::default(), None).is_err());
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let net = toy_network();
    let paths = enumerate_paths(&net, 2).unwrap();
    let grid = TimeGrid::new(3, 60.0).unwrap();
    let loader = Loader::new(&net, &paths, &grid, &DnlOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let days = (0..12).map(|_| (0..6).map(|_| rng.random_range(5.0..25.0)).collect()).collect();
    let obs = ObservationSet::new(vec![1, 3], 3, days).unwrap();
    let cfg = EstimationConfig {
        max_epochs: 4,
        batch_size: 4,
        samples: 4,
        tolerance: 0.0,
        ..EstimationConfig::default()
    };
    let full = estimate(&loader, &obs, &cfg, None).unwrap();
    assert_eq!(full.status, Status::MaxEpochs);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("ckpt.json");
    let mut first = Estimator::new(&loader, &obs, cfg.clone(), None).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    Checkpoint::from_state(&first.state).save(&file).unwrap();
    let mut second = Estimator::resume(&loader, &obs, cfg, Checkpoint::load(&file).unwrap()).unwrap();
    second.run(|_| Ok(())).unwrap();
    assert_eq!(second.state.loss_history, full.loss_history);
    assert_eq!(second.state.pdod, full.pdod);
}
