//! Monte Carlo orchestration: regime sweeps, rate fits, and statistical
//! self-checks of the renewal machinery.
//!
//! A sweep walks a list of sampling rates n along a regime curve eps(n),
//! replicates coupled paths R times per rate, aggregates the sup-norm error
//! metrics, and fits log-log slopes. Three regime curves are supported:
//!
//! * Regime 1: eps = n^(delta-1), regime constant 0, kappa = n^(-delta),
//! * Regime 2: eps = 1/(c n), regime constant c, kappa = 0 exactly,
//! * Regime 3: eps = n^(-2), regime constant infinite (noise vanishes
//!   faster than sampling accelerates; only the deterministic limit
//!   applies).
//!
//! Replications run in parallel, but every replication owns a seed derived
//! from (master seed, rate index, replication index) and results reduce in
//! replication order, so reports are byte-identical for any worker count.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{LinalgError, LinearSystem};
use crate::lindyn::{
    build_coupled, fluctuation_errors, z_limit_trajectory, BrownianPath, Mesh, PathError,
    Trajectory,
};
use crate::nonlindyn::{
    build_nonlinear, nonlinear_fluct_error, z_limit_nonlinear, NonlinError, NonlinearSystem,
};
use crate::renewal::{sample_grid, Interarrival, RenewalError};
use crate::streams;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("rate fit failed: {0}")]
    Fit(String),
    #[error("sweep failed: {0}")]
    Sweep(String),
    #[error(transparent)]
    Renewal(#[from] RenewalError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Nonlinear(#[from] NonlinError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Asymptotic regime: fixes the noise curve eps(n) and the bookkeeping
/// constants kappa and c of the fluctuation limit.
#[derive(Debug, Clone, PartialEq)]
pub enum Regime {
    R1 { delta: f64 },
    R2 { c: f64 },
    R3,
}

impl Regime {
    pub fn epsilon(&self, n: u64) -> f64 {
        let nf = n as f64;
        match self {
            Regime::R1 { delta } => nf.powf(delta - 1.0),
            Regime::R2 { c } => 1.0 / (c * nf),
            Regime::R3 => nf.powi(-2),
        }
    }

    /// The limit of 1/(n eps): 0 in Regime 1, c in Regime 2, infinite in
    /// Regime 3.
    pub fn constant(&self) -> f64 {
        match self {
            Regime::R1 { .. } => 0.0,
            Regime::R2 { c } => *c,
            Regime::R3 => f64::INFINITY,
        }
    }

    /// kappa(eps) = |1/(n eps) - c| evaluated in closed form on the regime
    /// curve, so Regime 2 records an exact zero instead of round-trip noise.
    pub fn kappa(&self, n: u64) -> f64 {
        match self {
            Regime::R1 { delta } => (n as f64).powf(-delta),
            Regime::R2 { .. } => 0.0,
            Regime::R3 => f64::INFINITY,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Regime::R1 { delta } => format!("R1(delta={delta})"),
            Regime::R2 { c } => format!("R2(c={c})"),
            Regime::R3 => "R3".to_string(),
        }
    }
}

/// Which sup-norm error a sweep measures per replication.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricKind {
    /// mean of sup|X - x|^p.
    LlnSup { p: f64 },
    /// mean of sup|X - x - eps Z| (linear) or sup|(Y-y)/eps - Z| (nonlinear).
    CltSup,
    /// mean of sup|X - x - Q/n|.
    Regime3Sup,
}

impl MetricKind {
    pub fn label(&self) -> String {
        match self {
            MetricKind::LlnSup { p } => {
                if p.fract() == 0.0 {
                    format!("lln_p{}", *p as i64)
                } else {
                    format!("lln_p{p}")
                }
            }
            MetricKind::CltSup => "clt".to_string(),
            MetricKind::Regime3Sup => "regime3".to_string(),
        }
    }
}

/// The system under study: the exact linear engine or the Runge-Kutta /
/// Euler-Maruyama nonlinear engine.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    Linear(LinearSystem),
    Nonlinear(NonlinearSystem),
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Linear(s) => s.dim(),
            ModelSpec::Nonlinear(s) => s.dim(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dist: Interarrival,
    pub regime: Regime,
    pub n_values: Vec<u64>,
    pub replications: u32,
    pub horizon: f64,
    pub pitch: f64,
    pub seed: u64,
    pub metrics: Vec<MetricKind>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.n_values.is_empty() {
            return bad("n_values must not be empty".into());
        }
        if self.n_values[0] == 0 {
            return bad("n_values must be positive".into());
        }
        if self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return bad("n_values must be strictly increasing".into());
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.pitch.is_finite() && self.pitch > 0.0) {
            return bad(format!("pitch must be positive, got {}", self.pitch));
        }
        if self.metrics.is_empty() {
            return bad("at least one metric is required".into());
        }
        match &self.regime {
            Regime::R1 { delta } if !delta.is_finite() => {
                return bad("regime.delta must be finite".into());
            }
            Regime::R2 { c } if !(c.is_finite() && *c > 0.0) => {
                return bad("regime.c must be positive".into());
            }
            _ => {}
        }
        for &n in &self.n_values {
            let eps = self.regime.epsilon(n);
            if !(eps > 0.0 && eps <= 1.0) {
                return bad(format!("epsilon({n}) = {eps} is outside (0, 1]"));
            }
        }
        if self.metrics.contains(&MetricKind::CltSup) && self.regime.constant().is_infinite() {
            return bad("clt metric requires a finite regime constant (Regime 1 or 2)".into());
        }
        for m in &self.metrics {
            if let MetricKind::LlnSup { p } = m {
                if !(p.is_finite() && *p > 0.0) {
                    return bad(format!("lln power must be positive, got {p}"));
                }
            }
        }
        Ok(())
    }
}

/// One aggregated sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatePoint {
    pub n: u64,
    pub epsilon: f64,
    pub kappa: f64,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub reps: u32,
}

/// Fitted log-log slope for one metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub metric: String,
    pub slope: f64,
    pub slope_se: f64,
    pub r_squared: f64,
    pub points_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub points: Vec<RatePoint>,
    pub fits: Vec<RateFit>,
    pub aborted: u64,
    pub total_replications: u64,
}

/// One statistical self-check: pass iff |statistic - target| <= tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub statistic: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    fn new(name: &str, statistic: f64, target: f64, tolerance: f64) -> CheckReport {
        CheckReport {
            name: name.to_string(),
            statistic,
            target,
            tolerance,
            pass: (statistic - target).abs() <= tolerance,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    fn stderr(&self) -> f64 {
        if self.count < 2 {
            f64::INFINITY
        } else {
            (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt()
        }
    }
}

fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let mut w = Welford::default();
    for &v in vals {
        w.push(v);
    }
    (w.mean(), w.stderr())
}

fn sample_variance(vals: &[f64]) -> f64 {
    let mut w = Welford::default();
    for &v in vals {
        w.push(v);
    }
    if w.count < 2 {
        f64::NAN
    } else {
        w.m2 / (w.count - 1) as f64
    }
}

/// Runs the configured sweep: for each n, `replications` coupled paths with
/// per-replication seeds, an ordered reduction into means and standard
/// errors, and a log-log fit per metric (when >= 30 replications and >= 3
/// admissible points). More than 1% aborted replications fails the run.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<RateReport, ExperimentError> {
    cfg.validate()?;
    let mean_age = cfg.dist.constants()?.mean_age;
    let mut points = Vec::with_capacity(cfg.n_values.len() * cfg.metrics.len());
    let mut aborted = 0u64;
    let mut first_error: Option<String> = None;

    for (n_idx, &n) in cfg.n_values.iter().enumerate() {
        let eps = cfg.regime.epsilon(n);
        let n_seed = streams::derive_seed(cfg.seed, n_idx as u64);
        let results: Vec<Result<Vec<f64>, String>> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| {
                simulate_rep(
                    cfg,
                    n,
                    eps,
                    mean_age,
                    streams::derive_seed(n_seed, rep as u64),
                )
            })
            .collect();

        let mut acc = vec![Welford::default(); cfg.metrics.len()];
        for res in results {
            match res {
                Ok(vals) => {
                    for (w, v) in acc.iter_mut().zip(vals) {
                        w.push(v);
                    }
                }
                Err(e) => {
                    aborted += 1;
                    first_error.get_or_insert(e);
                }
            }
        }
        for (metric, w) in cfg.metrics.iter().zip(&acc) {
            points.push(RatePoint {
                n,
                epsilon: eps,
                kappa: cfg.regime.kappa(n),
                metric: metric.label(),
                mean: w.mean(),
                stderr: w.stderr(),
                reps: w.count as u32,
            });
        }
    }

    let total = cfg.replications as u64 * cfg.n_values.len() as u64;
    if aborted * 100 > total {
        return Err(ExperimentError::Sweep(format!(
            "{aborted} of {total} replications aborted (> 1%); first error: {}",
            first_error.unwrap_or_default()
        )));
    }

    let mut fits = Vec::new();
    if cfg.replications >= 30 {
        for metric in &cfg.metrics {
            let label = metric.label();
            let pts: Vec<(f64, f64, f64)> = points
                .iter()
                .filter(|p| p.metric == label && p.reps > 0)
                .map(|p| (p.n as f64, p.mean, p.stderr))
                .collect();
            if let Ok(fit) = fit_rate(&pts) {
                fits.push(RateFit {
                    metric: label,
                    slope: fit.slope,
                    slope_se: fit.slope_se,
                    r_squared: fit.r_squared,
                    points_used: fit.points_used,
                });
            }
        }
    }

    Ok(RateReport {
        points,
        fits,
        aborted,
        total_replications: total,
    })
}

fn simulate_rep(
    cfg: &ExperimentConfig,
    n: u64,
    eps: f64,
    mean_age: f64,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let fail = |e: &dyn std::fmt::Display| e.to_string();
    let grid = sample_grid(&cfg.dist, n, cfg.horizon, seed).map_err(|e| fail(&e))?;
    let mesh = Mesh::from_grid(&grid, cfg.pitch).map_err(|e| fail(&e))?;
    let with_z = cfg.metrics.contains(&MetricKind::CltSup);
    let with_q = cfg.metrics.contains(&MetricKind::Regime3Sup);
    let regime_c = cfg.regime.constant();

    match &cfg.model {
        ModelSpec::Linear(sys) => {
            let w = BrownianPath::sample(&mesh, sys.dim(), seed).map_err(|e| fail(&e))?;
            let z_c = if with_z { regime_c } else { 0.0 };
            let paths = build_coupled(sys, &grid, &mesh, &w, eps, z_c, mean_age, with_z, with_q)
                .map_err(|e| fail(&e))?;
            let powers: Vec<f64> = cfg
                .metrics
                .iter()
                .filter_map(|m| match m {
                    MetricKind::LlnSup { p } => Some(*p),
                    _ => None,
                })
                .collect();
            let errs = fluctuation_errors(&paths, &powers).map_err(|e| fail(&e))?;
            let mut lln_iter = errs.lln.iter();
            let vals = cfg
                .metrics
                .iter()
                .map(|m| match m {
                    MetricKind::LlnSup { .. } => lln_iter.next().expect("power per metric").1,
                    MetricKind::CltSup => errs.clt_sup.expect("requested"),
                    MetricKind::Regime3Sup => errs.regime3_sup.expect("requested"),
                })
                .collect();
            Ok(vals)
        }
        ModelSpec::Nonlinear(sys) => {
            let w = BrownianPath::sample(&mesh, sys.dim(), seed).map_err(|e| fail(&e))?;
            let z_c = if with_z { regime_c } else { 0.0 };
            let paths = build_nonlinear(sys, &grid, &mesh, &w, eps, z_c, mean_age, with_z)
                .map_err(|e| fail(&e))?;
            let sup_base = paths
                .noisy
                .sup_distance(&paths.ideal)
                .map_err(|e| fail(&e))?;
            let q_limit = if with_q {
                let zero = BrownianPath::zeros(&mesh, sys.dim());
                Some(
                    z_limit_nonlinear(sys, &paths.ideal, &mesh, &zero, 1.0, mean_age)
                        .map_err(|e| fail(&e))?,
                )
            } else {
                None
            };
            let mut vals = Vec::with_capacity(cfg.metrics.len());
            for m in &cfg.metrics {
                match m {
                    MetricKind::LlnSup { p } => vals.push(sup_base.powf(*p)),
                    MetricKind::CltSup => {
                        vals.push(nonlinear_fluct_error(&paths).map_err(|e| fail(&e))?)
                    }
                    MetricKind::Regime3Sup => {
                        let q = q_limit.as_ref().expect("requested");
                        let inv_n = 1.0 / n as f64;
                        let mut sup = 0.0_f64;
                        for i in 0..mesh.len() {
                            let y = paths.ideal.point(i);
                            let yy = paths.noisy.point(i);
                            let qi = q.point(i);
                            let mut acc = 0.0;
                            for c in 0..sys.dim() {
                                let d = yy[c] - y[c] - inv_n * qi[c];
                                acc += d * d;
                            }
                            sup = sup.max(acc.sqrt());
                        }
                        vals.push(sup);
                    }
                }
            }
            Ok(vals)
        }
    }
}

pub struct FitSummary {
    pub slope: f64,
    pub slope_se: f64,
    pub r_squared: f64,
    pub points_used: usize,
}

/// Ordinary least squares of log(mean) on log(n) over the admissible points
/// (standard error below 20% of the mean). Requires at least 3 admissible
/// points and strictly positive means.
pub fn fit_rate(points: &[(f64, f64, f64)]) -> Result<FitSummary, ExperimentError> {
    for &(n, mean, _) in points {
        if mean <= 0.0 {
            return Err(ExperimentError::Fit(format!(
                "mean at n = {n} is not positive ({mean})"
            )));
        }
    }
    let admissible: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, mean, se)| se.is_finite() && *se < 0.2 * mean)
        .map(|&(n, mean, _)| (n.ln(), mean.ln()))
        .collect();
    let m = admissible.len();
    if m < 3 {
        return Err(ExperimentError::Fit(format!(
            "need at least 3 admissible points, have {m}"
        )));
    }
    let mx = admissible.iter().map(|p| p.0).sum::<f64>() / m as f64;
    let my = admissible.iter().map(|p| p.1).sum::<f64>() / m as f64;
    let sxx = admissible.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = admissible
        .iter()
        .map(|p| (p.0 - mx) * (p.1 - my))
        .sum::<f64>();
    if sxx == 0.0 {
        return Err(ExperimentError::Fit("all n values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = admissible
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let sst: f64 = admissible.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    let slope_se = (ssr / (m - 2) as f64 / sxx).sqrt();
    Ok(FitSummary {
        slope,
        slope_se,
        r_squared,
        points_used: m,
    })
}

/// Renewal-theory self-checks at sampling rate n over [0, T]:
///
/// * `wald`: mean of `S_{N+1} - mu (N+1)` against 0 (4 standard errors),
/// * `elementary_renewal`: mean of `N/(nT)` against `1/mu` (4 SE),
/// * `donsker_variance`: variance of `(N - nT/mu)/sqrt(n)` against
///   `Var(xi) T / mu^3` (10%),
/// * `mean_age_M`: mean of `n/T * integral of age` against `M` (5%).
pub fn run_checks(
    dist: &Interarrival,
    n: u64,
    horizon: f64,
    reps: u32,
    seed: u64,
) -> Result<Vec<CheckReport>, ExperimentError> {
    if reps < 1000 {
        return Err(ExperimentError::Config(
            "distributional checks need at least 1000 replications".into(),
        ));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(ExperimentError::Config(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let consts = dist.constants()?;
    let stats: Vec<Result<(f64, f64, f64), String>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let s = streams::derive_seed(seed, rep as u64);
            let grid = sample_grid(dist, n, horizon, s).map_err(|e| e.to_string())?;
            let age = grid.mean_age_integral(1.0).map_err(|e| e.to_string())?;
            Ok((grid.count() as f64, grid.xi_total(), age))
        })
        .collect();
    let mut counts = Vec::with_capacity(reps as usize);
    let mut walds = Vec::with_capacity(reps as usize);
    let mut ages = Vec::with_capacity(reps as usize);
    let nf = n as f64;
    for res in stats {
        let (count, xi_total, age) = res.map_err(ExperimentError::Sweep)?;
        counts.push(count);
        walds.push(xi_total - consts.mean * (count + 1.0));
        ages.push(nf * age / horizon);
    }

    let mut out = Vec::with_capacity(4);
    let (wald_mean, wald_se) = mean_and_se(&walds);
    out.push(CheckReport::new("wald", wald_mean, 0.0, 4.0 * wald_se));

    let rates: Vec<f64> = counts.iter().map(|c| c / (nf * horizon)).collect();
    let (rate_mean, rate_se) = mean_and_se(&rates);
    out.push(CheckReport::new(
        "elementary_renewal",
        rate_mean,
        1.0 / consts.mean,
        4.0 * rate_se,
    ));

    let scaled: Vec<f64> = counts
        .iter()
        .map(|c| (c - nf * horizon / consts.mean) / nf.sqrt())
        .collect();
    let donsker_target = consts.variance * horizon / consts.mean.powi(3);
    out.push(CheckReport::new(
        "donsker_variance",
        sample_variance(&scaled),
        donsker_target,
        0.10 * donsker_target,
    ));

    let (age_mean, _) = mean_and_se(&ages);
    out.push(CheckReport::new(
        "mean_age_M",
        age_mean,
        consts.mean_age,
        0.05 * consts.mean_age,
    ));
    Ok(out)
}

/// Distributional check of the fluctuation limit at the scalar benchmark
/// with no regime forcing: Var Z(1) must equal (1 - e^{-2})/2.
pub fn z_gaussianity_check(
    pitch: f64,
    reps: u32,
    seed: u64,
) -> Result<CheckReport, ExperimentError> {
    if reps < 1000 {
        return Err(ExperimentError::Config(
            "distributional checks need at least 1000 replications".into(),
        ));
    }
    let sys = LinearSystem::scalar_s1();
    let mesh = Mesh::uniform(pitch, 1.0)?;
    let last = mesh.len() - 1;
    let vals: Vec<Result<f64, String>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let s = streams::derive_seed(seed, rep as u64);
            let w = BrownianPath::sample(&mesh, 1, s).map_err(|e| e.to_string())?;
            let z = z_limit_trajectory(&sys, &mesh, &w, 0.0, 1.0).map_err(|e| e.to_string())?;
            Ok(z.point(last)[0])
        })
        .collect();
    let samples: Result<Vec<f64>, String> = vals.into_iter().collect();
    let samples = samples.map_err(ExperimentError::Sweep)?;
    let var = sample_variance(&samples);
    let target = (1.0 - (-2.0_f64).exp()) / 2.0;
    Ok(CheckReport::new(
        "z_gaussianity",
        var,
        target,
        0.05 * target,
    ))
}

/// One coupled path realization for inspection/plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDump {
    pub times: Vec<f64>,
    pub labels: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

/// Simulates a single replication at the first configured n and dumps every
/// trajectory componentwise.
pub fn run_path(cfg: &ExperimentConfig) -> Result<PathDump, ExperimentError> {
    cfg.validate()?;
    let n = cfg.n_values[0];
    let eps = cfg.regime.epsilon(n);
    let mean_age = cfg.dist.constants()?.mean_age;
    let seed = streams::derive_seed(streams::derive_seed(cfg.seed, 0), 0);
    let grid = sample_grid(&cfg.dist, n, cfg.horizon, seed)?;
    let mesh = Mesh::from_grid(&grid, cfg.pitch)?;
    let with_z = cfg.metrics.contains(&MetricKind::CltSup);
    let with_q = cfg.metrics.contains(&MetricKind::Regime3Sup);
    let regime_c = cfg.regime.constant();

    let mut labels = Vec::new();
    let mut columns = Vec::new();
    let mut add = |name: &str, t: &Trajectory| {
        for c in 0..t.dim() {
            labels.push(format!("{name}[{c}]"));
            columns.push((0..t.len()).map(|i| t.point(i)[c]).collect());
        }
    };

    match &cfg.model {
        ModelSpec::Linear(sys) => {
            let w = BrownianPath::sample(&mesh, sys.dim(), seed)?;
            let z_c = if with_z { regime_c } else { 0.0 };
            let paths = build_coupled(sys, &grid, &mesh, &w, eps, z_c, mean_age, with_z, with_q)?;
            add("x", &paths.ideal);
            add("xn", &paths.sampled);
            add("X", &paths.noisy);
            if let Some(z) = &paths.z_limit {
                add("Z", z);
            }
            if let Some(q) = &paths.q_limit {
                add("Q", q);
            }
        }
        ModelSpec::Nonlinear(sys) => {
            let w = BrownianPath::sample(&mesh, sys.dim(), seed)?;
            let z_c = if with_z { regime_c } else { 0.0 };
            let paths = build_nonlinear(sys, &grid, &mesh, &w, eps, z_c, mean_age, with_z)?;
            add("y", &paths.ideal);
            add("yn", &paths.sampled);
            add("Y", &paths.noisy);
            if let Some(z) = &paths.z_limit {
                add("Z", z);
            }
        }
    }

    Ok(PathDump {
        times: mesh.points().to_vec(),
        labels,
        columns,
    })
}
