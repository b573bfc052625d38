//! Small dense matrix kernel for the control dynamics.
//!
//! Provides the matrix exponential (scaling and squaring with a Pade core),
//! the hold-interval propagator
//!
//! ```text
//! Phi(r) = e^{rA} - (e^{rA} - I) A^{-1} B K,
//! ```
//!
//! the closed-loop flow `e^{t(A-BK)}`, and the noise covariance
//! `V(r) = integral_0^r e^{As} e^{A's} ds` via an augmented-block exponential.
//! Systems validate invertibility of `A` and commutation of `A` with `BK`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("matrix A is singular ({0})")]
    Singular(String),
    #[error("A and BK do not commute: relative defect {defect:.3e} exceeds {tolerance:.3e}")]
    NonCommuting { defect: f64, tolerance: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

fn ensure_finite(m: &Matrix, what: &str) -> Result<(), LinalgError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::Domain(format!(
            "{what} has non-finite entries"
        )))
    }
}

fn one_norm(m: &Matrix) -> f64 {
    let mut max = 0.0_f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|x| x.abs()).sum();
        max = max.max(s);
    }
    max
}

// Pade order thresholds and coefficients for the scaling-and-squaring
// exponential (double precision).
const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068;
const THETA_13: f64 = 5.371920351148152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn pade_solve(u: Matrix, v: Matrix) -> Result<Matrix, LinalgError> {
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| LinalgError::Numerical("Pade denominator is singular".into()))
}

/// Lower-degree Pade approximant using even powers of `a`.
fn pade_low(a: &Matrix, b: &[f64]) -> Result<Matrix, LinalgError> {
    let d = a.nrows();
    let id = Matrix::identity(d, d);
    let a2 = a * a;
    let mut even = &id * b[0];
    let mut odd = &id * b[1];
    let mut pow = id;
    for k in 1..=(b.len() / 2 - 1) {
        pow = &pow * &a2;
        even += &pow * b[2 * k];
        if 2 * k + 1 < b.len() {
            odd += &pow * b[2 * k + 1];
        }
    }
    pade_solve(a * odd, even)
}

fn pade_13(a: &Matrix) -> Result<Matrix, LinalgError> {
    let d = a.nrows();
    let id = Matrix::identity(d, d);
    let b = &B13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u_hi = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u_lo = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = a * (u_hi + u_lo);
    let v_hi = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_hi + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    pade_solve(u, v)
}

/// Matrix exponential `exp(t M)` by scaling and squaring with a Pade core.
///
/// Relative accuracy is at the working-precision level (well below 1e-12 in
/// Frobenius norm for `|tM| <= 100`).
pub fn mat_exp(m: &Matrix, t: f64) -> Result<Matrix, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::Dimension(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !t.is_finite() {
        return Err(LinalgError::Domain(format!("t must be finite, got {t}")));
    }
    ensure_finite(m, "matrix")?;
    if m.nrows() == 1 {
        return Ok(Matrix::from_element(1, 1, (m[(0, 0)] * t).exp()));
    }
    let a = m * t;
    let eta = one_norm(&a);
    if eta <= THETA_3 {
        return pade_low(&a, &B3);
    }
    if eta <= THETA_5 {
        return pade_low(&a, &B5);
    }
    if eta <= THETA_7 {
        return pade_low(&a, &B7);
    }
    if eta <= THETA_9 {
        return pade_low(&a, &B9);
    }
    let s = ((eta / THETA_13).log2().ceil()).max(0.0) as u32;
    let scaled = &a / 2f64.powi(s as i32);
    let mut r = pade_13(&scaled)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Relative commutation tolerance for `A` and `BK`.
pub const COMMUTE_TOL: f64 = 1e-10;
/// Condition number of `A` above which construction records a warning.
pub const CONDITION_WARN: f64 = 1e8;

/// Matrices `A`, `B`, `K` and the initial state, with derived products
/// precomputed once: `BK`, `A^{-1}BK`, `A - BK`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: Matrix,
    b: Matrix,
    k: Matrix,
    x0: Vector,
    bk: Matrix,
    a_inv_bk: Matrix,
    a_minus_bk: Matrix,
    commutation_defect: f64,
    a_condition: f64,
}

impl LinearSystem {
    /// Builds and validates a system; rejects non-commuting `A`, `BK`.
    pub fn new(a: Matrix, b: Matrix, k: Matrix, x0: Vector) -> Result<Self, LinalgError> {
        let sys = Self::build(a, b, k, x0)?;
        let tol = COMMUTE_TOL * sys.a.norm() * sys.bk.norm();
        if sys.commutation_defect > tol {
            return Err(LinalgError::NonCommuting {
                defect: sys.commutation_defect,
                tolerance: tol,
            });
        }
        Ok(sys)
    }

    /// Builds a system without enforcing the commutation invariant. The
    /// defect stays available through [`LinearSystem::commutation_defect`].
    pub fn new_noncommuting(
        a: Matrix,
        b: Matrix,
        k: Matrix,
        x0: Vector,
    ) -> Result<Self, LinalgError> {
        Self::build(a, b, k, x0)
    }

    fn build(a: Matrix, b: Matrix, k: Matrix, x0: Vector) -> Result<Self, LinalgError> {
        let d = a.nrows();
        if a.ncols() != d {
            return Err(LinalgError::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let m = b.ncols();
        if b.nrows() != d || k.nrows() != m || k.ncols() != d {
            return Err(LinalgError::Dimension(format!(
                "need B {d}xm and K mx{d}, got B {}x{} and K {}x{}",
                b.nrows(),
                b.ncols(),
                k.nrows(),
                k.ncols()
            )));
        }
        if x0.len() != d {
            return Err(LinalgError::Dimension(format!(
                "x0 must have length {d}, got {}",
                x0.len()
            )));
        }
        ensure_finite(&a, "A")?;
        ensure_finite(&b, "B")?;
        ensure_finite(&k, "K")?;
        if !x0.iter().all(|x| x.is_finite()) {
            return Err(LinalgError::Domain("x0 has non-finite entries".into()));
        }

        let det = a.determinant();
        let det_floor = 1e-12 * a.norm().max(f64::MIN_POSITIVE).powi(d as i32);
        if det.abs() <= det_floor {
            return Err(LinalgError::Singular(format!(
                "|det A| = {:.3e} at or below threshold {:.3e}",
                det.abs(),
                det_floor
            )));
        }
        let a_inv = a
            .clone()
            .try_inverse()
            .ok_or_else(|| LinalgError::Singular("inversion failed".into()))?;

        let singular = a.clone().svd(false, false).singular_values;
        let s_max = singular.max();
        let s_min = singular.min();
        let a_condition = if s_min > 0.0 {
            s_max / s_min
        } else {
            f64::INFINITY
        };
        if a_condition > CONDITION_WARN {
            log::warn!("A condition number {a_condition:.3e} exceeds {CONDITION_WARN:.1e}");
        }

        let bk = &b * &k;
        let commutation_defect = (&a * &bk - &bk * &a).norm();
        let a_inv_bk = &a_inv * &bk;
        let a_minus_bk = &a - &bk;
        Ok(LinearSystem {
            a,
            b,
            k,
            x0,
            bk,
            a_inv_bk,
            a_minus_bk,
            commutation_defect,
            a_condition,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn x0(&self) -> &Vector {
        &self.x0
    }

    pub fn bk(&self) -> &Matrix {
        &self.bk
    }

    pub fn a_inv_bk(&self) -> &Matrix {
        &self.a_inv_bk
    }

    pub fn a_minus_bk(&self) -> &Matrix {
        &self.a_minus_bk
    }

    /// Frobenius norm of `A BK - BK A`.
    pub fn commutation_defect(&self) -> f64 {
        self.commutation_defect
    }

    /// Spectral condition number of `A`.
    pub fn a_condition(&self) -> f64 {
        self.a_condition
    }

    /// Deterministic exponential growth bound `|x0| e^{(|A| + |B||K|) T}`
    /// (spectral norms) that realized trajectories must respect.
    pub fn growth_bound(&self, horizon: f64) -> f64 {
        let spec = |m: &Matrix| m.clone().svd(false, false).singular_values.max();
        self.x0.norm() * ((spec(&self.a) + spec(&self.b) * spec(&self.k)) * horizon).exp()
    }

    /// Scalar test system: `A = 1`, `B = 1`, `K = 2`, `x0 = 1`.
    pub fn scalar_s1() -> Self {
        LinearSystem::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 2.0),
            Vector::from_element(1, 1.0),
        )
        .expect("valid by construction")
    }

    /// 2x2 commuting test system with a Jordan-block `A` and `BK = 2 I`.
    pub fn jordan_pair() -> Self {
        LinearSystem::new(
            Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            Matrix::identity(2, 2),
            Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]),
            Vector::from_vec(vec![0.6, 0.8]),
        )
        .expect("valid by construction")
    }
}

/// Hold-interval propagator `Phi(r) = e^{rA} - (e^{rA} - I) A^{-1} BK`.
/// `Phi(r) * anchor` is the state after holding the control computed at the
/// anchor for a duration `r`.
pub fn hold_propagator(sys: &LinearSystem, r: f64) -> Result<Matrix, LinalgError> {
    if !(r.is_finite() && r >= 0.0) {
        return Err(LinalgError::Domain(format!(
            "hold duration must be non-negative, got {r}"
        )));
    }
    let e_ra = mat_exp(sys.a(), r)?;
    let d = sys.dim();
    Ok(&e_ra - (e_ra.clone() - Matrix::identity(d, d)) * sys.a_inv_bk())
}

/// Closed-loop flow `e^{t(A - BK)}`.
pub fn closed_loop_flow(sys: &LinearSystem, t: f64) -> Result<Matrix, LinalgError> {
    mat_exp(sys.a_minus_bk(), t)
}

/// Covariance `V(r) = integral_0^r e^{Ms} e^{M's} ds` for an arbitrary square
/// `M`, computed from one exponential of the augmented block matrix
/// `[[-M, I], [0, M']]`: with `e^{rC} = [[F, G], [0, H]]`, `V(r) = e^{rM} G`.
pub fn noise_covariance_of(m: &Matrix, r: f64) -> Result<Matrix, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::Dimension(format!(
            "noise covariance needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !(r.is_finite() && r >= 0.0) {
        return Err(LinalgError::Domain(format!(
            "duration must be non-negative, got {r}"
        )));
    }
    let d = m.nrows();
    let mut block = Matrix::zeros(2 * d, 2 * d);
    block.view_mut((0, 0), (d, d)).copy_from(&(m * -1.0));
    block
        .view_mut((0, d), (d, d))
        .copy_from(&Matrix::identity(d, d));
    block.view_mut((d, d), (d, d)).copy_from(&m.transpose());
    let e_block = mat_exp(&block, r)?;
    let g = e_block.view((0, d), (d, d)).into_owned();
    let v = mat_exp(m, r)? * g;
    Ok((&v + v.transpose()) * 0.5)
}

/// Noise covariance of the plant: `V(r)` for `M = A`.
pub fn noise_covariance(sys: &LinearSystem, r: f64) -> Result<Matrix, LinalgError> {
    noise_covariance_of(sys.a(), r)
}

/// Random system whose `BK` is a polynomial in `A`, so the commutation
/// invariant holds by construction; `A - BK` is kept comfortably stable and
/// `A` well conditioned. `x0` is a random unit vector.
pub fn random_commuting_system<R: Rng>(dim: usize, rng: &mut R) -> LinearSystem {
    assert!(dim >= 1, "dimension must be at least 1");
    loop {
        let scale = 1.0 / (dim as f64).sqrt();
        let a = Matrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0) * scale);
        if a.determinant().abs() < 0.05 {
            continue;
        }
        let sv = a.clone().svd(false, false).singular_values;
        if sv.max() > 2.0 || sv.min() < 0.05 {
            continue;
        }
        let alpha = rng.gen_range(0.6..1.4);
        let beta = rng.gen_range(0.2..0.8);
        let k = Matrix::identity(dim, dim) * alpha + &a * beta;
        let a_minus_bk = &a - &k;
        let max_re = a_minus_bk
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max);
        if max_re > 0.2 {
            continue;
        }
        let mut x0 = Vector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        if x0.norm() < 1e-3 {
            continue;
        }
        x0 /= x0.norm();
        match LinearSystem::new(a, Matrix::identity(dim, dim), k, x0) {
            Ok(sys) => return sys,
            Err(_) => continue,
        }
    }
}
