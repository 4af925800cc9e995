//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line per criterion
//! to stderr (uncaptured) and then asserts it.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ftarga::chains::{GibbsSampler, Kernel, RegionSpec};
use ftarga::neural::{Activation, Mlp, ScaleRule};
use twofloat::TwoFloat;
use ftarga::oracles::{self, gibbs_exact_density, gibbs_exact_ratio, poisson_exact_bernoulli, OracleRun, PoissonReward};
use ftarga::quad::integrate_2d;
use ftarga::rga::{self, accumulate_gradient, Objective, SegmentObjective, TrainConfig, Trainer};
use ftarga::rng::{domain, Streams};
use ftarga::runner::{self, ExperimentConfig, ExperimentId};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn report(name: &str, passed: bool, detail: &str, started: Instant) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] {name}: {detail} ({:.1}s)\n", started.elapsed().as_secs_f64());
    // Bypasses libtest output capture so the verdict is always visible.
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "{name}: {detail}");
}

/// exp in double-double: Taylor series on `z / 2^k`, then `k` squarings.
fn exp_dd(z: TwoFloat) -> TwoFloat {
    let mut k = 0;
    let mut r = z;
    while r.hi().abs() > 1e-3 {
        r = r / 2.0;
        k += 1;
    }
    let mut sum = TwoFloat::from(1.0);
    let mut term = TwoFloat::from(1.0);
    for n in 1..=12 {
        term = term * r / n as f64;
        sum += term;
    }
    for _ in 0..k {
        sum = sum * sum;
    }
    sum
}

/// Single-hidden-layer sigmoid forward pass in double-double precision, so the
/// central difference below is not limited by f64 cancellation.
fn value_dd(theta: &[TwoFloat], d: usize, m: usize, x: &[f64]) -> TwoFloat {
    let (a, rest) = theta.split_at(m);
    let (w, b) = rest.split_at(m * d);
    let one = TwoFloat::from(1.0);
    let mut out = TwoFloat::from(0.0);
    for j in 0..m {
        let mut z = b[j];
        for i in 0..d {
            z += w[j * d + i] * x[i];
        }
        out += a[j] * (one / (one + exp_dd(-z)));
    }
    out
}

#[test]
fn gradient_correctness() {
    let t0 = Instant::now();
    let mut rng = Streams::new(1).rng(domain::TEST, 1);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let d = 1 + (case % 3) as usize;
        let m = 1 + rng.random_range(0..40);
        let net = Mlp::init(case, d, &[m], Activation::Sigmoid, None, ScaleRule::Uniform(2.0)).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = net.grad_params(&x).unwrap();
        let mut probe: Vec<TwoFloat> = net.theta().iter().map(|&t| TwoFloat::from(t)).collect();
        assert!((value_dd(&probe, d, m, &x).hi() - net.value(&x)).abs() <= 1e-12 * net.value(&x).abs().max(1.0));
        for k in 0..net.num_params() {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = value_dd(&probe, d, m, &x);
            probe[k] = orig - h;
            let down = value_dd(&probe, d, m, &x);
            probe[k] = orig;
            let fd = ((up - down) / (2.0 * h)).hi();
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    report(
        "gradient correctness",
        worst <= 1e-6,
        &format!("max relative error {worst:.2e} over 100 cases (<= 1e-6)"),
        t0,
    );
}

/// Mean of the one-sided estimator over `n` fresh samples.
fn mean_gradient<O: Objective>(obj: &O, net: &Mlp, seed: u64, n: u64) -> Vec<f64> {
    let streams = Streams::new(seed);
    let mut g = vec![0.0; net.num_params()];
    let w = 1.0 / n as f64;
    for i in 0..n {
        let s = obj.draw(&mut streams.sample_streams(domain::TRAIN, i)).unwrap();
        accumulate_gradient(obj, net, &s, false, w, &mut g);
    }
    g
}

/// Central differences of the double-sampling loss estimate, with common
/// random numbers across `θ ± h e_k` and randomness independent of `mean_gradient`.
fn loss_finite_difference<O: Objective>(obj: &O, net: &Mlp, seed: u64, n: u64, h: f64) -> Vec<f64> {
    let shifted: Vec<(Mlp, Mlp)> = (0..net.num_params())
        .map(|k| {
            let mut up = net.clone();
            up.theta_mut()[k] += h;
            let mut down = net.clone();
            down.theta_mut()[k] -= h;
            (up, down)
        })
        .collect();
    let streams = Streams::new(seed);
    let mut diff = vec![0.0; shifted.len()];
    for i in 0..n {
        let s = obj.draw(&mut streams.sample_streams(domain::PROBE, i)).unwrap();
        for (acc, (up, down)) in diff.iter_mut().zip(&shifted) {
            *acc += obj.loss_sample(up, &s) - obj.loss_sample(down, &s);
        }
    }
    diff.iter().map(|d| d / (n as f64 * 2.0 * h)).collect()
}

/// Worst relative error over the 20 largest finite-difference coordinates.
fn top20_error(g: &[f64], fd: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..fd.len()).collect();
    idx.sort_by(|&a, &b| fd[b].abs().total_cmp(&fd[a].abs()));
    idx.iter()
        .take(20)
        .map(|&k| (g[k] - fd[k]).abs() / fd[k].abs())
        .fold(0.0, f64::max)
}

fn unbiasedness_case<O: Objective>(name: &str, obj: &O, net: &Mlp, n_grad: u64, n_loss: u64) -> (String, f64) {
    let t = Instant::now();
    let g = mean_gradient(obj, net, 101, n_grad);
    let tg = t.elapsed().as_secs_f64();
    let fd = loss_finite_difference(obj, net, 202, n_loss, 1e-5);
    let err = top20_error(&g, &fd);
    (format!("{name} {err:.3} (n={n_grad}, {tg:.0}s + {:.0}s)", t.elapsed().as_secs_f64() - tg), err)
}

#[test]
fn estimator_unbiasedness() {
    let t0 = Instant::now();
    let small = |seed, d| Mlp::init(seed, d, &[8], Activation::Sigmoid, None, ScaleRule::FanIn).unwrap();
    let fluid = runner::fluid_objective();
    let poisson = runner::bernoulli_poisson_objective(PoissonReward::Quadratic);
    let gibbs = runner::gibbs_density_objective();
    let kw = runner::kw_objective(oracles::DEFAULT_STEP_CAP);
    let cases = [
        unbiasedness_case("fta/fluid", &fluid, &small(11, 2), 1_000_000, 1_000_000),
        unbiasedness_case("poisson/bernoulli", &poisson, &small(12, 1), 1_000_000, 1_000_000),
        unbiasedness_case("density/gibbs", &gibbs, &small(13, 2), 1_000_000, 1_000_000),
        unbiasedness_case("segment/kw", &kw, &small(14, 2), 1_000_000, 1_000_000),
    ];
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail: Vec<&str> = cases.iter().map(|c| c.0.as_str()).collect();
    report(
        "estimator unbiasedness",
        worst <= 0.05,
        &format!("top-20 relative error [{}] (<= 0.05)", detail.join(", ")),
        t0,
    );
}

#[test]
fn zero_residual_at_closed_forms() {
    let t0 = Instant::now();
    let n = 100_000;
    let mut lines = Vec::new();
    let mut ok = true;
    for kind in [PoissonReward::Linear, PoissonReward::Quadratic] {
        let obj = runner::bernoulli_poisson_objective(kind);
        let u = move |x: &[f64]| poisson_exact_bernoulli(kind, x[0]);
        let est = rga::residual_loss_estimate(&obj, &u, n, 7).unwrap();
        ok &= est.mean.abs() <= 3.0 * est.stderr;
        lines.push(format!("{kind:?} {:.2e}±{:.1e}", est.mean, est.stderr));
    }
    let obj = runner::gibbs_density_objective();
    let est = rga::residual_loss_estimate(&obj, &gibbs_exact_ratio, n, 7).unwrap();
    ok &= est.mean.abs() <= 3.0 * est.stderr;
    lines.push(format!("gibbs {:.2e}±{:.1e}", est.mean, est.stderr));
    report(
        "zero residual at closed forms",
        ok,
        &format!("{} (|mean| <= 3 stderr, n=1e5)", lines.join(", ")),
        t0,
    );
}

/// Trains and validates one experiment with its desk defaults.
fn desk_run(id: ExperimentId, dir: &Path) -> (runner::Summary, Vec<rga::LossRecord>) {
    let mut cfg = ExperimentConfig::defaults(id, false);
    cfg.seed = 0;
    let art = runner::run_train(&cfg, dir).unwrap();
    let summary = runner::run_validate(&cfg, &art.net, dir).unwrap();
    (summary, art.log)
}

fn loss_trend(id: ExperimentId, log: &[rga::LossRecord], t0: Instant) {
    let (first, last) = (log.first().unwrap(), log.last().unwrap());
    report(
        &format!("loss trend {id}"),
        last.mean < first.mean,
        &format!(
            "loss {:.4e} at 0 -> {:.4e} at {}",
            first.mean, last.mean, last.iteration
        ),
        t0,
    );
}

#[test]
fn bernoulli_poisson_recovery() {
    let mut results = Vec::new();
    for id in [ExperimentId::BernoulliPoissonLinear, ExperimentId::BernoulliPoissonQuadratic] {
        let t0 = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let (summary, log) = desk_run(id, dir.path());
        results.push((id, summary, t0));
        loss_trend(id, &log, t0);
    }
    for (id, s, t0) in results {
        report(
            &format!("poisson recovery {id}"),
            s.gate.passed,
            &format!("aligned RMSE {:.4} over {} points (<= 0.05)", s.rmse, s.points),
            t0,
        );
    }
}

#[test]
fn gibbs_density_recovery() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (s, log) = desk_run(ExperimentId::GibbsDensity, dir.path());
    loss_trend(ExperimentId::GibbsDensity, &log, t0);
    report(
        "gibbs density recovery",
        s.gate.passed,
        &format!("MAE {:.4} over {} points (<= 0.02)", s.mean_abs_error, s.points),
        t0,
    );
}

#[test]
fn fluid_hitting_times() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (s, log) = desk_run(ExperimentId::FluidHitting, dir.path());
    loss_trend(ExperimentId::FluidHitting, &log, t0);
    report(
        "fluid hitting times",
        s.gate.passed,
        &format!(
            "{:.1}% of {} points within max(3 stderr, 10%) (>= 90%)",
            100.0 * s.gate.value,
            s.points
        ),
        t0,
    );
}

#[test]
fn kw_window_hitting_times() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (s, log) = desk_run(ExperimentId::KwHitting, dir.path());
    loss_trend(ExperimentId::KwHitting, &log, t0);
    report(
        "G/G/2 window hitting times",
        s.gate.passed,
        &format!(
            "{:.1}% of {} points with relative error <= 15% (>= 85%)",
            100.0 * s.gate.value,
            s.points
        ),
        t0,
    );
}

#[test]
fn segment_algorithm_degenerates_when_window_is_continuation() {
    let t0 = Instant::now();
    let fta = runner::fluid_objective();
    let seg = SegmentObjective {
        chain: fta.chain.clone(),
        regions: RegionSpec {
            target: fta.regions.target.clone(),
            window: Some(fta.regions.sampling.clone()),
            sampling: fta.regions.sampling.clone(),
        },
        step_cap: 10,
    };
    let net = Mlp::init(3, 2, &[16], Activation::Sigmoid, None, ScaleRule::FanIn).unwrap();
    let cfg = TrainConfig {
        iterations: 1000,
        seed: 9,
        log_samples: 10,
        ..TrainConfig::default()
    };
    let mut a = Trainer::new(&fta, net.clone(), cfg.clone()).unwrap();
    let mut b = Trainer::new(&seg, net, cfg).unwrap();
    let mut first_mismatch = None;
    for step in 1..=1000 {
        a.step().unwrap();
        b.step().unwrap();
        let same = a.net().theta().iter().zip(b.net().theta()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same && first_mismatch.is_none() {
            first_mismatch = Some(step);
        }
    }
    report(
        "segment algorithm degeneracy",
        first_mismatch.is_none(),
        &match first_mismatch {
            None => "1000 steps bitwise identical".to_string(),
            Some(s) => format!("trajectories differ at step {s}"),
        },
        t0,
    );
}

/// `∫∫` of the exact density over a cell, from the antiderivatives
/// `F(t) = 2t − t³/3` and `G(t) = t² − t⁴/4`.
fn gibbs_cell_mass(x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let f = |t: f64| 2.0 * t - t * t * t / 3.0;
    let g = |t: f64| t * t - t.powi(4) / 4.0;
    (9.0 / 200.0) * (2.0 * (f(x1) - f(x0)) * (f(y1) - f(y0)) + (g(x1) - g(x0)) * (g(y1) - g(y0)))
}

#[test]
fn gibbs_invariance_and_normalization() {
    let t0 = Instant::now();
    let n = 100_000usize;
    let bins = 8usize;
    let width = 2.0 / bins as f64;
    let streams = Streams::new(21);
    let mut draw = streams.rng(domain::TEST, 0);
    let mut step = streams.rng(domain::TEST, 1);
    let mut counts = vec![0u64; bins * bins];
    let cell = |v: f64| (((v + 1.0) / width) as usize).min(bins - 1);
    for _ in 0..n {
        let x = GibbsSampler::sample_stationary(&mut draw).unwrap();
        let y = GibbsSampler.step(&x, &mut step).unwrap();
        counts[cell(y[0]) * bins + cell(y[1])] += 1;
    }
    let mut stat = 0.0;
    let mut total_mass = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let lo = |k: usize| -1.0 + k as f64 * width;
            let mass = gibbs_cell_mass(lo(i), lo(i + 1), lo(j), lo(j + 1));
            total_mass += mass;
            let expected = n as f64 * mass;
            let diff = counts[i * bins + j] as f64 - expected;
            stat += diff * diff / expected;
        }
    }
    let df = (bins * bins - 1) as f64;
    let p = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
    report(
        "gibbs invariance",
        p > 1e-3 && (total_mass - 1.0).abs() < 1e-12,
        &format!("chi-square {stat:.1} on {df} df, p = {p:.3} (> 0.001)"),
        t0,
    );

    let t1 = Instant::now();
    let total = integrate_2d(|a, b| gibbs_exact_density(&[a, b]), [-1.0; 2], [1.0; 2], 24);
    let nonneg = (0..=40).all(|i| {
        (0..=40).all(|j| gibbs_exact_density(&[-1.0 + i as f64 * 0.05, -1.0 + j as f64 * 0.05]) >= 0.0)
    });
    let mut worst_kernel: f64 = 0.0;
    let mut rng = streams.rng(domain::TEST, 2);
    for _ in 0..20 {
        let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        // η is uniform on the square, so its density against Lebesgue is 1/4.
        let mass = integrate_2d(
            |a, b| 0.25 * GibbsSampler::transition_density_uniform(&x, &[a, b]),
            [-1.0; 2],
            [1.0; 2],
            24,
        );
        worst_kernel = worst_kernel.max((mass - 1.0).abs());
    }
    report(
        "density normalization",
        (total - 1.0).abs() <= 1e-6 && worst_kernel <= 1e-6 && nonneg,
        &format!(
            "|∫π − 1| = {:.1e}, max |∫p(x,·)dη − 1| = {:.1e} (<= 1e-6), π >= 0 on grid",
            (total - 1.0).abs(),
            worst_kernel
        ),
        t1,
    );
}

#[test]
fn oracle_stderr_scaling() {
    let t0 = Instant::now();
    let kernel = ftarga::chains::FluidNetwork::default();
    let target = ftarga::Region::unit_box(2, 0.0, 1.0);
    let ns = [1_000u64, 4_000, 16_000];
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .enumerate()
        .map(|(q, &n)| {
            let est = oracles::mc_hitting_time(&kernel, &[3.0, 3.0], &target, n, OracleRun::new(5, q as u64)).unwrap();
            ((n as f64).ln(), est.stderr.ln())
        })
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    report(
        "oracle stderr scaling",
        (slope + 0.5).abs() <= 0.1,
        &format!("log-log slope {slope:.3} (-0.5 ± 0.1)"),
        t0,
    );
}

#[test]
fn run_all_is_reproducible() {
    let t0 = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let shrink = |cfg: &mut ExperimentConfig| {
        cfg.train.iterations = 2_000;
        cfg.train.log_every = 500;
        cfg.train.log_samples = 100;
        cfg.network.width = 32;
        cfg.oracle.replications = 50;
        cfg.grid.oracle_spacing = 1.0;
    };
    let a = runner::run_all(17, false, 1, &root.path().join("a"), &shrink).unwrap();
    let b = runner::run_all(17, false, 1, &root.path().join("b"), &shrink).unwrap();
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for (ea, eb) in a.entries.iter().zip(&b.entries) {
        assert!(ea.error.is_none(), "{:?}", ea.error);
        for file in ["loss.csv", "checkpoint", "manifest.json", "grid_learned.csv", "grid_oracle.csv", "summary.json"] {
            let fa = std::fs::read(ea.dir.join(file)).unwrap();
            let fb = std::fs::read(eb.dir.join(file)).unwrap();
            compared += 1;
            if fa != fb {
                mismatched.push(format!("{}/{file}", ea.experiment));
            }
        }
    }
    report(
        "run_all reproducibility",
        mismatched.is_empty(),
        &if mismatched.is_empty() {
            format!("{compared} files byte-identical across two runs")
        } else {
            format!("differs: {}", mismatched.join(", "))
        },
        t0,
    );
}
