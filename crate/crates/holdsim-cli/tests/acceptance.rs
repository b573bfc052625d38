//! Acceptance suite: ten end-to-end checks of the statistical and numerical
//! contracts, one test per criterion. Each test prints a single verdict line
//! (visible with `--nocapture`) and fails listing the violated conditions.

use std::process::Command;
use std::time::Instant;

use holdsim::experiments::{
    run_checks, run_sweep, z_gaussianity_check, ExperimentConfig, MetricKind, ModelSpec,
    RateReport, Regime,
};
use holdsim::linalg::{random_commuting_system, LinearSystem};
use holdsim::lindyn::{
    ideal_trajectory, noisy_trajectory, q_limit_trajectory, sampled_trajectory, z_limit_trajectory,
    BrownianPath, Mesh, Trajectory,
};
use holdsim::nonlindyn::{
    self, ideal_nonlinear, noisy_nonlinear, sampled_nonlinear, z_limit_nonlinear, NonlinearSystem,
};
use holdsim::renewal::{sample_grid, Interarrival};
use holdsim::streams;

/// Collects labeled pass/fail conditions for one criterion and prints a
/// single verdict line; failing conditions go into the panic message.
struct Criterion {
    index: u32,
    name: &'static str,
    checks: Vec<(String, bool)>,
}

impl Criterion {
    fn new(index: u32, name: &'static str) -> Criterion {
        Criterion {
            index,
            name,
            checks: Vec::new(),
        }
    }

    fn check(&mut self, label: impl Into<String>, ok: bool) {
        self.checks.push((label.into(), ok));
    }

    fn finish(self) {
        let failed: Vec<&(String, bool)> = self.checks.iter().filter(|(_, ok)| !ok).collect();
        let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
        println!(
            "ACCEPTANCE {} {}: {} ({} conditions)",
            self.index,
            self.name,
            verdict,
            self.checks.len()
        );
        assert!(
            failed.is_empty(),
            "criterion {} {} failed:\n{}",
            self.index,
            self.name,
            failed
                .iter()
                .map(|(label, _)| format!("  - {label}"))
                .collect::<Vec<_>>()
                .join("\n")
        );
    }
}

fn powers_of_two(lo: u32, hi: u32) -> Vec<u64> {
    (lo..=hi).map(|j| 1u64 << j).collect()
}

fn strictly_decreasing(vals: &[f64]) -> bool {
    vals.windows(2).all(|w| w[1] < w[0])
}

#[test]
fn acceptance_1_renewal_self_checks() {
    let started = Instant::now();
    let mut c = Criterion::new(1, "renewal_self_checks");
    let laws = [
        ("exponential(1)", Interarrival::Exponential { rate: 1.0 }),
        ("uniform(0,1)", Interarrival::Uniform { a: 0.0, b: 1.0 }),
        ("deterministic(1)", Interarrival::Deterministic { a: 1.0 }),
    ];
    for (label, law) in laws {
        let checks = run_checks(&law, 10_000, 1.0, 10_000, 1101).unwrap();
        for ch in &checks {
            c.check(
                format!(
                    "{label} {}: statistic {:.6} target {:.6} tolerance {:.6}",
                    ch.name, ch.statistic, ch.target, ch.tolerance
                ),
                ch.pass,
            );
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    c.check(
        format!("completes in under 10 s ({elapsed:.1} s)"),
        elapsed < 10.0,
    );
    c.finish();
}

#[test]
fn acceptance_2_linear_lln_rate() {
    let started = Instant::now();
    let mut c = Criterion::new(2, "linear_lln_rate");
    let systems = [
        ("scalar_s1", LinearSystem::scalar_s1()),
        ("jordan_pair", LinearSystem::jordan_pair()),
    ];
    for (label, sys) in systems {
        let cfg = ExperimentConfig {
            model: ModelSpec::Linear(sys),
            dist: Interarrival::Exponential { rate: 1.0 },
            // eps = n^{delta - 1} = n^{-2}.
            regime: Regime::R1 { delta: -1.0 },
            n_values: powers_of_two(6, 12),
            replications: 200,
            horizon: 1.0,
            pitch: 2f64.powi(-8),
            seed: 1202,
            metrics: vec![MetricKind::LlnSup { p: 1.0 }],
        };
        let report = run_sweep(&cfg).unwrap();
        let fit = report
            .fits
            .iter()
            .find(|f| f.metric == "lln_p1")
            .expect("rate fit present");
        c.check(
            format!("{label}: slope {:.3} within -1.0 +/- 0.1", fit.slope),
            (fit.slope + 1.0).abs() <= 0.1,
        );
        c.check(
            format!("{label}: r-squared {:.4} >= 0.98", fit.r_squared),
            fit.r_squared >= 0.98,
        );
    }
    let elapsed = started.elapsed().as_secs_f64();
    c.check(
        format!("completes in under 120 s ({elapsed:.1} s)"),
        elapsed < 120.0,
    );
    c.finish();
}

fn clt_sweep(regime: Regime, seed: u64) -> RateReport {
    let cfg = ExperimentConfig {
        model: ModelSpec::Linear(LinearSystem::scalar_s1()),
        dist: Interarrival::Exponential { rate: 1.0 },
        regime,
        n_values: powers_of_two(8, 13),
        replications: 500,
        horizon: 1.0,
        pitch: 2f64.powi(-8),
        seed,
        metrics: vec![MetricKind::CltSup],
    };
    run_sweep(&cfg).unwrap()
}

#[test]
fn acceptance_3_linear_clt_regime1() {
    let started = Instant::now();
    let mut c = Criterion::new(3, "linear_clt_regime1");
    // eps = n^{-1/2}, regime constant 0.
    let report = clt_sweep(Regime::R1 { delta: 0.5 }, 1303);
    let means: Vec<f64> = report.points.iter().map(|p| p.mean).collect();
    c.check(
        format!("coupling error strictly decreasing in n ({means:?})"),
        strictly_decreasing(&means),
    );
    let fit = &report.fits[0];
    c.check(
        format!(
            "slope {:.3} <= -0.3 (bound -0.4 plus 0.1 tolerance)",
            fit.slope
        ),
        fit.slope <= -0.3,
    );
    let elapsed = started.elapsed().as_secs_f64();
    c.check(
        format!("completes in under 600 s ({elapsed:.1} s)"),
        elapsed < 600.0,
    );
    c.finish();
}

#[test]
fn acceptance_4_linear_clt_regime2() {
    let mut c = Criterion::new(4, "linear_clt_regime2");
    // eps = 1/n, regime constant 1, so kappa vanishes identically.
    let report = clt_sweep(Regime::R2 { c: 1.0 }, 1404);
    let means: Vec<f64> = report.points.iter().map(|p| p.mean).collect();
    c.check(
        format!("coupling error decreasing in n ({means:?})"),
        strictly_decreasing(&means),
    );
    let fit = &report.fits[0];
    c.check(format!("slope {:.3} <= -0.2", fit.slope), fit.slope <= -0.2);
    c.check(
        "kappa recorded identically 0".to_string(),
        report.points.iter().all(|p| p.kappa == 0.0),
    );
    c.finish();
}

#[test]
fn acceptance_5_vanishing_noise_limit() {
    let mut c = Criterion::new(5, "vanishing_noise_limit");
    let cfg = ExperimentConfig {
        model: ModelSpec::Linear(LinearSystem::scalar_s1()),
        dist: Interarrival::Exponential { rate: 1.0 },
        regime: Regime::R3,
        n_values: powers_of_two(6, 12),
        replications: 200,
        horizon: 1.0,
        pitch: 2f64.powi(-8),
        seed: 1505,
        metrics: vec![MetricKind::Regime3Sup],
    };
    let report = run_sweep(&cfg).unwrap();
    let means: Vec<f64> = report.points.iter().map(|p| p.mean).collect();
    c.check(
        format!("residual decreasing in n ({means:?})"),
        strictly_decreasing(&means),
    );
    let fit = &report.fits[0];
    c.check(format!("slope {:.3} <= -0.2", fit.slope), fit.slope <= -0.2);
    c.check(
        "kappa recorded as infinite".to_string(),
        report.points.iter().all(|p| p.kappa.is_infinite()),
    );
    c.finish();
}

#[test]
fn acceptance_6_fluctuation_gaussianity() {
    let mut c = Criterion::new(6, "fluctuation_gaussianity");
    let check = z_gaussianity_check(2f64.powi(-6), 10_000, 1606).unwrap();
    c.check(
        format!(
            "Var Z(1) {:.5} within 5% of {:.5}",
            check.statistic, check.target
        ),
        check.pass,
    );
    let sys = LinearSystem::scalar_s1();
    let mesh = Mesh::uniform(2f64.powi(-6), 1.0).unwrap();
    for m in [1.0 / 3.0, 0.5, 1.0] {
        let q = q_limit_trajectory(&sys, &mesh, m).unwrap();
        let q1 = q.point(q.len() - 1)[0];
        let target = 2.0 * m * (-1.0f64).exp();
        c.check(
            format!("Q(1) = {q1:.9} vs 2M/e = {target:.9} at M = {m:.4}"),
            (q1 - target).abs() <= 1e-6,
        );
    }
    c.finish();
}

/// Sup over coarse-mesh points of |fine(stride * i) - reference(i)|.
fn aligned_sup(fine: &Trajectory, stride: usize, reference: &Trajectory) -> f64 {
    let mut sup = 0f64;
    for i in 0..reference.len() {
        let f = fine.point(stride * i);
        let r = reference.point(i);
        for k in 0..r.len() {
            sup = sup.max((f[k] - r[k]).abs());
        }
    }
    sup
}

/// First-order Richardson extrapolation over step sizes h, h/2, h/4,
/// compared against `reference` on the h mesh.
fn richardson_sup(
    level0: &Trajectory,
    level1: &Trajectory,
    level2: &Trajectory,
    reference: &Trajectory,
) -> f64 {
    let mut sup = 0f64;
    for i in 0..reference.len() {
        let a = level0.point(i);
        let b = level1.point(2 * i);
        let d = level2.point(4 * i);
        let r = reference.point(i);
        for k in 0..r.len() {
            let combined = (8.0 * d[k] - 6.0 * b[k] + a[k]) / 3.0;
            sup = sup.max((combined - r[k]).abs());
        }
    }
    sup
}

#[test]
fn acceptance_7_linear_nonlinear_consistency() {
    let mut c = Criterion::new(7, "linear_nonlinear_consistency");
    let mut rng = streams::rng(1707, 0);
    let base_pitch = 2f64.powi(-10);
    let eps = 1e-6;
    let mean_age = 0.5;

    for sys_idx in 0..8u64 {
        let dim = 1 + (sys_idx as usize % 3);
        let lin = random_commuting_system(dim, &mut rng);
        let embed = NonlinearSystem::linear_embedding(&lin);
        let tag = format!("system {sys_idx} ({dim}d)");

        let grid = sample_grid(&Interarrival::Deterministic { a: 1.0 }, 4, 1.0, 0).unwrap();
        let mesh0 = Mesh::from_grid(&grid, base_pitch).unwrap();
        let mesh1 = mesh0.refine_half();
        let mesh2 = mesh1.refine_half();

        // One Brownian path on the finest mesh, coarsened consistently.
        let w2 = BrownianPath::sample(&mesh2, dim, streams::derive_seed(1707, sys_idx)).unwrap();
        let w1 = w2.coarsen(&mesh2, &mesh1).unwrap();
        let w0 = w1.coarsen(&mesh1, &mesh0).unwrap();

        // Exact references on the base mesh.
        let x = ideal_trajectory(&lin, &mesh0).unwrap();
        let xn = sampled_trajectory(&lin, &grid, &mesh0).unwrap();
        let xeps = noisy_trajectory(&lin, &grid, &mesh0, &w0, eps).unwrap();
        let zlin = z_limit_trajectory(&lin, &mesh0, &w0, 1.0, mean_age).unwrap();
        let qlin = q_limit_trajectory(&lin, &mesh0, mean_age).unwrap();

        // Fourth-order integration needs no extrapolation at this step size.
        let y = ideal_nonlinear(&embed, &mesh0).unwrap();
        let ideal_err = aligned_sup(&y, 1, &x);
        c.check(
            format!("{tag} ideal: {ideal_err:.2e} <= 1e-8"),
            ideal_err <= 1e-8,
        );
        let yn = sampled_nonlinear(&embed, &grid, &mesh0).unwrap();
        let sampled_err = aligned_sup(&yn, 1, &xn);
        c.check(
            format!("{tag} sampled: {sampled_err:.2e} <= 1e-8"),
            sampled_err <= 1e-8,
        );

        // First-order noisy runs on the three nested meshes.
        let ye0 = noisy_nonlinear(&embed, &grid, &mesh0, &w0, eps).unwrap();
        let ye1 = noisy_nonlinear(&embed, &grid, &mesh1, &w1, eps).unwrap();
        let ye2 = noisy_nonlinear(&embed, &grid, &mesh2, &w2, eps).unwrap();
        let raw0 = aligned_sup(&ye0, 1, &xeps);
        let raw2 = aligned_sup(&ye2, 4, &xeps);
        let extrap = richardson_sup(&ye0, &ye1, &ye2, &xeps);
        c.check(
            format!("{tag} noisy: step bias shrinks with the step ({raw2:.2e} < {raw0:.2e})"),
            raw2 < raw0,
        );
        c.check(
            format!("{tag} noisy extrapolated: {extrap:.2e} <= 1e-8"),
            extrap <= 1e-8,
        );

        // Fluctuation limit, driven noise: the stochastic integral error of
        // the order-1/2 scheme is not polynomial in h, so extrapolation is
        // checked on the noise-free forcing below; here the raw error obeys
        // the square-root envelope.
        let ze0 = z_limit_nonlinear(&embed, &y, &mesh0, &w0, 1.0, mean_age).unwrap();
        let z_err = aligned_sup(&ze0, 1, &zlin);
        let z_bound = 2.0 * base_pitch.sqrt();
        c.check(
            format!("{tag} fluctuation (driven): {z_err:.2e} <= {z_bound:.2e}"),
            z_err <= z_bound,
        );

        let zeros0 = BrownianPath::zeros(&mesh0, dim);
        let zeros1 = BrownianPath::zeros(&mesh1, dim);
        let zeros2 = BrownianPath::zeros(&mesh2, dim);
        let y1 = ideal_nonlinear(&embed, &mesh1).unwrap();
        let y2 = ideal_nonlinear(&embed, &mesh2).unwrap();
        let zq0 = z_limit_nonlinear(&embed, &y, &mesh0, &zeros0, 1.0, mean_age).unwrap();
        let zq1 = z_limit_nonlinear(&embed, &y1, &mesh1, &zeros1, 1.0, mean_age).unwrap();
        let zq2 = z_limit_nonlinear(&embed, &y2, &mesh2, &zeros2, 1.0, mean_age).unwrap();
        let q_extrap = richardson_sup(&zq0, &zq1, &zq2, &qlin);
        c.check(
            format!("{tag} fluctuation forcing extrapolated: {q_extrap:.2e} <= 1e-8"),
            q_extrap <= 1e-8,
        );
    }
    c.finish();
}

#[test]
fn acceptance_8_nonlinear_lln_rate() {
    let mut c = Criterion::new(8, "nonlinear_lln_rate");
    let cfg = ExperimentConfig {
        model: ModelSpec::Nonlinear(nonlindyn::builtin("sine_feedback").unwrap()),
        dist: Interarrival::Exponential { rate: 1.0 },
        regime: Regime::R1 { delta: -1.0 },
        n_values: powers_of_two(6, 11),
        replications: 200,
        horizon: 1.0,
        pitch: 2f64.powi(-14),
        seed: 1808,
        metrics: vec![MetricKind::LlnSup { p: 1.0 }],
    };
    let report = run_sweep(&cfg).unwrap();
    let fit = &report.fits[0];
    c.check(
        format!("slope {:.3} within -1.0 +/- 0.15", fit.slope),
        (fit.slope + 1.0).abs() <= 0.15,
    );
    c.finish();
}

#[test]
fn acceptance_9_nonlinear_fluctuation_variance() {
    let mut c = Criterion::new(9, "nonlinear_fluctuation_variance");
    let sys = nonlindyn::builtin("sine_equilibrium").unwrap();
    let mesh = Mesh::uniform(2f64.powi(-12), 1.0).unwrap();
    let ideal = ideal_nonlinear(&sys, &mesh).unwrap();
    let last = mesh.len() - 1;
    let reps = 10_000u64;

    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for rep in 0..reps {
        let s = streams::derive_seed(1909, rep);
        let w = BrownianPath::sample(&mesh, 1, s).unwrap();
        let z = z_limit_nonlinear(&sys, &ideal, &mesh, &w, 0.0, 1.0).unwrap();
        let v = z.point(last)[0];
        sum += v;
        sumsq += v * v;
    }
    let n = reps as f64;
    let mean = sum / n;
    let var = (sumsq - n * mean * mean) / (n - 1.0);
    let target = (1.0 - (-4.0f64).exp()) / 16.0;
    c.check(
        format!("Var Z(1) {var:.5} within 7% of {target:.5}"),
        (var - target).abs() <= 0.07 * target,
    );
    c.finish();
}

#[test]
fn acceptance_10_thread_count_determinism() {
    let mut c = Criterion::new(10, "thread_count_determinism");
    let dir = tempfile::tempdir().unwrap();
    let config_text = r#"seed = 2010

[model]
kind = "linear"
system = "scalar_s1"

[dist]
kind = "exponential"
rate = 1.0

[regime]
kind = "r1"
delta = 0.5

[sweep]
n_values = [256, 512]
replications = 40
horizon = 1.0
pitch = 0.015625

[metrics]
kinds = ["lln_p1", "clt"]
"#;
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, config_text).unwrap();

    let run = |out_name: &str, threads: &str| {
        let out_dir = dir.path().join(out_name);
        let status = Command::new(env!("CARGO_BIN_EXE_holdsim"))
            .args([
                "--verb",
                "sweep",
                "--config",
                config_path.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--threads",
                threads,
            ])
            .status()
            .expect("binary runs");
        assert!(status.success());
        let read = |name: &str| std::fs::read(out_dir.join(name)).unwrap();
        let manifest: serde_json::Value = serde_json::from_slice(&read("manifest.json")).unwrap();
        let hashes: Vec<(String, String)> = manifest["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| {
                (
                    e["name"].as_str().unwrap().to_string(),
                    e["sha256"].as_str().unwrap().to_string(),
                )
            })
            .collect();
        (read("points.csv"), read("report.json"), hashes)
    };

    let (points1, report1, hashes1) = run("threads1", "1");
    let (points8, report8, hashes8) = run("threads8", "8");
    c.check(
        "points.csv identical at 1 and 8 threads",
        points1 == points8,
    );
    c.check(
        "report.json identical at 1 and 8 threads",
        report1 == report8,
    );
    c.check(
        "manifest digests identical at 1 and 8 threads",
        hashes1 == hashes8,
    );
    c.finish();
}
