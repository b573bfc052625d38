//! Nonlinear sampled-feedback dynamics and their limit objects.
//!
//! The model generalizes the linear loop to a Lipschitz drift with a sampled
//! second argument and state-dependent small noise:
//!
//! * `y`   — ideal loop `y' = c(y, y)`,
//! * `yn`  — sampled loop `y' = c(y, y(anchor))`,
//! * `Y`   — noisy loop `dY = c(Y, Y(anchor)) dt + eps sigma(Y) dW`,
//! * `Zn`  — fluctuation limit, the linear time-varying SDE
//!           `dZ = [D1c(y,y) + D2c(y,y)] Z dt + cM D2c(y,y) c(y,y) dt
//!            + sigma(y) dW`.
//!
//! Deterministic paths use classical Runge-Kutta (4 stages, global order 4);
//! stochastic paths use Euler-Maruyama on the mesh (strong order 1/2), so
//! unlike the linear module these carry an O(h) drift bias and an O(sqrt h)
//! strong error that tests and experiments must budget for.
//!
//! A system registers with its two Jacobians; registration cross-checks them
//! against central finite differences at random probe points and estimates a
//! Lipschitz constant from random pairs (a sanity figure, never a gate).

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::linalg::{LinearSystem, Matrix, Vector};
use crate::lindyn::{BrownianPath, Mesh, PathError, Trajectory};
use crate::renewal::SamplingGrid;
use crate::streams;

#[derive(Debug, Error)]
pub enum NonlinError {
    #[error("invalid system: {0}")]
    Invalid(String),
    #[error(
        "{which} disagrees with finite differences at probe {probe} (relative defect {defect:.3e})"
    )]
    Jacobian {
        which: &'static str,
        probe: usize,
        defect: f64,
    },
    #[error("non-finite state at t = {time}")]
    NonFinite { time: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Path(#[from] PathError),
}

type DriftFn = dyn Fn(&Vector, &Vector) -> Vector + Send + Sync;
type DiffusionFn = dyn Fn(&Vector) -> Matrix + Send + Sync;
type JacobianFn = dyn Fn(&Vector, &Vector) -> Matrix + Send + Sync;

const PROBE_COUNT: usize = 64;
const LIPSCHITZ_PAIRS: usize = 1000;
const JACOBIAN_TOL: f64 = 1e-6;
const PROBE_SEED: u64 = 0x6e6f_6e6c_696e_2d70;

/// A registered nonlinear system. Evaluators must be pure and reentrant:
/// path workers call them concurrently.
#[derive(Clone)]
pub struct NonlinearSystem {
    name: String,
    dim: usize,
    y0: Vector,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    d1: Arc<JacobianFn>,
    d2: Arc<JacobianFn>,
    lipschitz: f64,
}

impl std::fmt::Debug for NonlinearSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NonlinearSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("y0", &self.y0)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl NonlinearSystem {
    /// Registers a system: checks both Jacobians against central finite
    /// differences at `PROBE_COUNT` random points in the box
    /// `[-probe_radius, probe_radius]^d x same` and estimates a Lipschitz
    /// constant from random pairs in the same box.
    pub fn new(
        name: impl Into<String>,
        y0: Vector,
        drift: Arc<DriftFn>,
        diffusion: Arc<DiffusionFn>,
        d1: Arc<JacobianFn>,
        d2: Arc<JacobianFn>,
        probe_radius: f64,
    ) -> Result<NonlinearSystem, NonlinError> {
        let name = name.into();
        let dim = y0.len();
        if dim == 0 {
            return Err(NonlinError::Invalid("dimension must be positive".into()));
        }
        if !(probe_radius.is_finite() && probe_radius > 0.0) {
            return Err(NonlinError::Invalid(format!(
                "probe radius must be positive, got {probe_radius}"
            )));
        }
        let mut rng = streams::rng(PROBE_SEED ^ dim as u64, 0);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            Vector::from_fn(dim, |_, _| rng.gen_range(-probe_radius..probe_radius))
        };

        for probe in 0..PROBE_COUNT {
            let x = draw(&mut rng);
            let z = draw(&mut rng);
            check_jacobian("D1c", probe, &drift, &x, &z, &d1(&x, &z), true)?;
            check_jacobian("D2c", probe, &drift, &x, &z, &d2(&x, &z), false)?;
            let s = diffusion(&x);
            if s.nrows() != dim || s.ncols() != dim || s.iter().any(|v| !v.is_finite()) {
                return Err(NonlinError::Invalid(format!(
                    "diffusion must return a finite {dim}x{dim} matrix"
                )));
            }
        }

        let mut lipschitz = 0.0_f64;
        for _ in 0..LIPSCHITZ_PAIRS {
            let (x1, z1) = (draw(&mut rng), draw(&mut rng));
            let (x2, z2) = (draw(&mut rng), draw(&mut rng));
            let num = (drift(&x1, &z1) - drift(&x2, &z2)).norm();
            let den = (&x1 - &x2).norm() + (&z1 - &z2).norm();
            if den > 0.0 {
                lipschitz = lipschitz.max(num / den);
            }
        }
        if !lipschitz.is_finite() {
            return Err(NonlinError::Invalid(
                "drift produced non-finite values in the probe box".into(),
            ));
        }
        if lipschitz > 1e3 {
            log::warn!("system {name} has a large estimated Lipschitz constant {lipschitz:.3e}");
        }

        Ok(NonlinearSystem {
            name,
            dim,
            y0,
            drift,
            diffusion,
            d1,
            d2,
            lipschitz,
        })
    }

    /// Same system started elsewhere; the evaluators are already validated.
    pub fn with_y0(mut self, y0: Vector) -> Result<NonlinearSystem, NonlinError> {
        if y0.len() != self.dim {
            return Err(NonlinError::Invalid(format!(
                "initial state has dim {}, system has dim {}",
                y0.len(),
                self.dim
            )));
        }
        self.y0 = y0;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn y0(&self) -> &Vector {
        &self.y0
    }

    /// Largest `|c(x1,z1) - c(x2,z2)| / (|x1-x2| + |z1-z2|)` seen over the
    /// probe pairs; a sanity figure for growth bounds, not a guarantee.
    pub fn lipschitz_estimate(&self) -> f64 {
        self.lipschitz
    }

    /// Scalar feedback through a sine: `c(x, z) = -x - sin z`,
    /// `sigma(x) = cos(x)/2`. `y0 = 0` is an equilibrium.
    pub fn sine_feedback(y0: f64) -> NonlinearSystem {
        NonlinearSystem::new(
            "sine_feedback",
            Vector::from_element(1, y0),
            Arc::new(|x: &Vector, z: &Vector| Vector::from_element(1, -x[0] - z[0].sin())),
            Arc::new(|x: &Vector| Matrix::from_element(1, 1, 0.5 * x[0].cos())),
            Arc::new(|_: &Vector, _: &Vector| Matrix::from_element(1, 1, -1.0)),
            Arc::new(|_: &Vector, z: &Vector| Matrix::from_element(1, 1, -z[0].cos())),
            2.0,
        )
        .expect("builtin system is consistent")
    }

    /// The linear model written as a nonlinear system:
    /// `c(x, z) = A x - BK z`, `sigma = I`. Bridges the two modules for
    /// cross-validation.
    pub fn linear_embedding(sys: &LinearSystem) -> NonlinearSystem {
        let d = sys.dim();
        let a = sys.a().clone();
        let bk = sys.bk().clone();
        let a2 = a.clone();
        let bk2 = bk.clone();
        NonlinearSystem::new(
            format!("linear_embedding({})", sys_label(sys)),
            sys.x0().clone(),
            Arc::new(move |x: &Vector, z: &Vector| &a * x - &bk * z),
            Arc::new(move |_: &Vector| Matrix::identity(d, d)),
            Arc::new(move |_: &Vector, _: &Vector| a2.clone()),
            Arc::new(move |_: &Vector, _: &Vector| bk2.clone() * -1.0),
            2.0,
        )
        .expect("builtin system is consistent")
    }

    /// Planar rotation with saturated feedback and state-dependent noise:
    /// `c(x, z) = R x - 0.8 tanh(z)` (componentwise tanh) with
    /// `R = [[-0.5, 1], [-1, -0.5]]`. Nothing commutes here; a stress test
    /// for paths that the linear module cannot represent.
    pub fn rotation_saturation() -> NonlinearSystem {
        let r = Matrix::from_row_slice(2, 2, &[-0.5, 1.0, -1.0, -0.5]);
        let r2 = r.clone();
        NonlinearSystem::new(
            "rotation_saturation",
            Vector::from_column_slice(&[0.5, -0.3]),
            Arc::new(move |x: &Vector, z: &Vector| {
                &r * x - Vector::from_fn(2, |i, _| 0.8 * z[i].tanh())
            }),
            Arc::new(|x: &Vector| {
                Matrix::from_row_slice(2, 2, &[0.3 + 0.1 * x[1].sin(), 0.0, 0.1 * x[0].cos(), 0.3])
            }),
            Arc::new(move |_: &Vector, _: &Vector| r2.clone()),
            Arc::new(|_: &Vector, z: &Vector| {
                let mut m = Matrix::zeros(2, 2);
                for i in 0..2 {
                    let th = z[i].tanh();
                    m[(i, i)] = -0.8 * (1.0 - th * th);
                }
                m
            }),
            2.0,
        )
        .expect("builtin system is consistent")
    }
}

fn sys_label(sys: &LinearSystem) -> String {
    format!("{}d", sys.dim())
}

/// Names accepted by the CLI for `model.system` in nonlinear mode.
pub fn builtin_names() -> &'static [&'static str] {
    &["sine_feedback", "sine_equilibrium", "rotation_saturation"]
}

/// Builds a builtin system by name (see [`builtin_names`]).
pub fn builtin(name: &str) -> Option<NonlinearSystem> {
    match name {
        "sine_feedback" => Some(NonlinearSystem::sine_feedback(1.0)),
        "sine_equilibrium" => Some(NonlinearSystem::sine_feedback(0.0)),
        "rotation_saturation" => Some(NonlinearSystem::rotation_saturation()),
        _ => None,
    }
}

fn check_jacobian(
    which: &'static str,
    probe: usize,
    drift: &Arc<DriftFn>,
    x: &Vector,
    z: &Vector,
    jac: &Matrix,
    vary_first: bool,
) -> Result<(), NonlinError> {
    let dim = x.len();
    if jac.nrows() != dim || jac.ncols() != dim {
        return Err(NonlinError::Invalid(format!(
            "{which} must return a {dim}x{dim} matrix"
        )));
    }
    let mut fd = Matrix::zeros(dim, dim);
    for j in 0..dim {
        let base = if vary_first { x[j] } else { z[j] };
        let h = 6e-6 * (1.0 + base.abs());
        let eval = |v: f64| -> Vector {
            let mut xx = x.clone();
            let mut zz = z.clone();
            if vary_first {
                xx[j] = v;
            } else {
                zz[j] = v;
            }
            drift(&xx, &zz)
        };
        let col = (eval(base + h) - eval(base - h)) / (2.0 * h);
        fd.set_column(j, &col);
    }
    let defect = (&fd - jac).norm() / (1.0 + jac.norm());
    if !defect.is_finite() || defect > JACOBIAN_TOL {
        return Err(NonlinError::Jacobian {
            which,
            probe,
            defect,
        });
    }
    Ok(())
}

fn check_finite(v: &Vector, t: f64) -> Result<(), NonlinError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NonlinError::NonFinite { time: t })
    }
}

fn rk4_step(f: &dyn Fn(&Vector) -> Vector, y: &Vector, dt: f64) -> Vector {
    let k1 = f(y);
    let k2 = f(&(y + &k1 * (dt / 2.0)));
    let k3 = f(&(y + &k2 * (dt / 2.0)));
    let k4 = f(&(y + &k3 * dt));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Ideal closed loop `y' = c(y, y)` by classical Runge-Kutta on the mesh.
pub fn ideal_nonlinear(sys: &NonlinearSystem, mesh: &Mesh) -> Result<Trajectory, NonlinError> {
    let mut out = Trajectory::with_capacity(sys.dim, mesh.len());
    let mut cur = sys.y0.clone();
    out.push(&cur);
    let drift = &sys.drift;
    for i in 0..mesh.intervals() {
        let dt = mesh.points()[i + 1] - mesh.points()[i];
        let next = rk4_step(&|y: &Vector| drift(y, y), &cur, dt);
        check_finite(&next, mesh.points()[i + 1])?;
        out.push(&next);
        cur = next;
    }
    Ok(out)
}

/// Sampled loop `y' = c(y, y(anchor))` with the anchor frozen over each hold
/// interval; Runge-Kutta inside intervals, anchors refreshed at grid points.
pub fn sampled_nonlinear(
    sys: &NonlinearSystem,
    grid: &SamplingGrid,
    mesh: &Mesh,
) -> Result<Trajectory, NonlinError> {
    mesh.check_refines(grid)?;
    let mut out = Trajectory::with_capacity(sys.dim, mesh.len());
    let mut cur = sys.y0.clone();
    let mut anchor = cur.clone();
    out.push(&cur);
    let drift = &sys.drift;
    for i in 0..mesh.intervals() {
        let dt = mesh.points()[i + 1] - mesh.points()[i];
        let next = rk4_step(&|y: &Vector| drift(y, &anchor), &cur, dt);
        check_finite(&next, mesh.points()[i + 1])?;
        out.push(&next);
        cur = next;
        if mesh.is_sample(i + 1) {
            anchor.copy_from(&cur);
        }
    }
    Ok(out)
}

/// Noisy sampled loop by Euler-Maruyama: one drift evaluation and one total
/// Brownian increment per mesh interval. `epsilon = 0` is a deterministic
/// Euler variant of [`sampled_nonlinear`] with the documented O(h) bias.
pub fn noisy_nonlinear(
    sys: &NonlinearSystem,
    grid: &SamplingGrid,
    mesh: &Mesh,
    w: &BrownianPath,
    epsilon: f64,
) -> Result<Trajectory, NonlinError> {
    mesh.check_refines(grid)?;
    check_path_shape(w, mesh, sys.dim)?;
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(NonlinError::Domain(format!(
            "noise intensity must be non-negative, got {epsilon}"
        )));
    }
    let mut out = Trajectory::with_capacity(sys.dim, mesh.len());
    let mut cur = sys.y0.clone();
    let mut anchor = cur.clone();
    out.push(&cur);
    for i in 0..mesh.intervals() {
        let dt = mesh.points()[i + 1] - mesh.points()[i];
        let mut next = &cur + (sys.drift)(&cur, &anchor) * dt;
        if epsilon > 0.0 {
            let dw = w.increment(i);
            next.gemv(epsilon, &(sys.diffusion)(&cur), &dw, 1.0);
        }
        check_finite(&next, mesh.points()[i + 1])?;
        out.push(&next);
        cur = next;
        if mesh.is_sample(i + 1) {
            anchor.copy_from(&cur);
        }
    }
    Ok(out)
}

/// Fluctuation limit along a precomputed ideal trajectory: Euler-Maruyama
/// for `dZ = [D1c + D2c](y,y) Z dt + cM D2c(y,y) c(y,y) dt + sigma(y) dW`,
/// coefficients frozen at the left mesh point, `Z(0) = 0`.
pub fn z_limit_nonlinear(
    sys: &NonlinearSystem,
    ideal: &Trajectory,
    mesh: &Mesh,
    w: &BrownianPath,
    regime_c: f64,
    mean_age: f64,
) -> Result<Trajectory, NonlinError> {
    if ideal.len() != mesh.len() || ideal.dim() != sys.dim {
        return Err(NonlinError::Domain(
            "ideal trajectory does not match the mesh".into(),
        ));
    }
    check_path_shape(w, mesh, sys.dim)?;
    if !(regime_c.is_finite() && regime_c >= 0.0) {
        return Err(NonlinError::Domain(format!(
            "regime constant must be finite and non-negative, got {regime_c}"
        )));
    }
    if !(mean_age.is_finite() && mean_age > 0.0) {
        return Err(NonlinError::Domain(format!(
            "mean age must be positive, got {mean_age}"
        )));
    }
    let dim = sys.dim;
    let mut out = Trajectory::with_capacity(dim, mesh.len());
    let mut z = Vector::zeros(dim);
    out.push(&z);
    for i in 0..mesh.intervals() {
        let dt = mesh.points()[i + 1] - mesh.points()[i];
        let y = ideal.to_vector(i);
        let d1 = (sys.d1)(&y, &y);
        let d2 = (sys.d2)(&y, &y);
        let cval = (sys.drift)(&y, &y);
        let mut next = z.clone();
        next.gemv(dt, &(d1 + &d2), &z, 1.0);
        next.gemv(regime_c * mean_age * dt, &d2, &cval, 1.0);
        let dw = w.increment(i);
        next.gemv(1.0, &(sys.diffusion)(&y), &dw, 1.0);
        check_finite(&next, mesh.points()[i + 1])?;
        out.push(&next);
        z = next;
    }
    Ok(out)
}

fn check_path_shape(w: &BrownianPath, mesh: &Mesh, dim: usize) -> Result<(), NonlinError> {
    if w.intervals() != mesh.intervals() || w.dim() != dim {
        return Err(NonlinError::Domain(format!(
            "Brownian path shape ({} intervals, dim {}) does not match mesh ({} intervals, dim {dim})",
            w.intervals(),
            w.dim(),
            mesh.intervals(),
        )));
    }
    Ok(())
}

/// Coupled nonlinear bundle: all paths from one Brownian path on one mesh.
#[derive(Debug, Clone)]
pub struct NonlinearPaths {
    pub mesh: Mesh,
    pub ideal: Trajectory,
    pub sampled: Trajectory,
    pub noisy: Trajectory,
    pub z_limit: Option<Trajectory>,
    pub epsilon: f64,
    pub n: u64,
    pub regime_c: f64,
    pub mean_age: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn build_nonlinear(
    sys: &NonlinearSystem,
    grid: &SamplingGrid,
    mesh: &Mesh,
    w: &BrownianPath,
    epsilon: f64,
    regime_c: f64,
    mean_age: f64,
    with_z: bool,
) -> Result<NonlinearPaths, NonlinError> {
    let ideal = ideal_nonlinear(sys, mesh)?;
    let sampled = sampled_nonlinear(sys, grid, mesh)?;
    let noisy = noisy_nonlinear(sys, grid, mesh, w, epsilon)?;
    let z_limit = if with_z {
        Some(z_limit_nonlinear(sys, &ideal, mesh, w, regime_c, mean_age)?)
    } else {
        None
    };
    Ok(NonlinearPaths {
        mesh: mesh.clone(),
        ideal,
        sampled,
        noisy,
        z_limit,
        epsilon,
        n: grid.n(),
        regime_c,
        mean_age,
    })
}

/// Sup over the mesh of `|(Y - y)/eps - Z|`, the nonlinear CLT error.
pub fn nonlinear_fluct_error(paths: &NonlinearPaths) -> Result<f64, NonlinError> {
    if paths.epsilon <= 0.0 {
        return Err(NonlinError::Domain(
            "fluctuation rescaling needs a positive noise intensity".into(),
        ));
    }
    let z = paths.z_limit.as_ref().ok_or_else(|| {
        NonlinError::Domain("fluctuation error needs the fluctuation limit".into())
    })?;
    let len = paths.mesh.len();
    let dim = paths.ideal.dim();
    let ok = |t: &Trajectory| t.len() == len && t.dim() == dim;
    if !ok(&paths.ideal) || !ok(&paths.noisy) || !ok(z) {
        return Err(NonlinError::Domain(
            "trajectories do not share the mesh".into(),
        ));
    }
    let inv_eps = 1.0 / paths.epsilon;
    let mut sup = 0.0_f64;
    for i in 0..len {
        let y = paths.ideal.point(i);
        let yy = paths.noisy.point(i);
        let zi = z.point(i);
        let mut acc = 0.0;
        for c in 0..dim {
            let d = (yy[c] - y[c]) * inv_eps - zi[c];
            acc += d * d;
        }
        sup = sup.max(acc.sqrt());
    }
    Ok(sup)
}
