//! Discrete-time LQR around the upright equilibrium.
//!
//! The plant is linearized numerically: central finite differences of the
//! one-sampling-period flow map (RK45 under zero-order hold) give the
//! discrete `A` and `B` directly, so no separate discretization step is
//! needed. The Riccati equation is solved by fixed-point iteration.
//!
//! This controller only exists to collect informative training data near the
//! upright equilibrium; the actual control experiments use MPC on the
//! learned model.

use nalgebra::{DMatrix, Matrix2x4, Matrix4, Matrix4x2, Vector4};

use crate::dynamics::{self, PendulumParams, PlantState, Torque};
use crate::error::{Error, Result};

/// Discrete-time linearization `x(k+1) ~ A x(k) + B u(k)` about an
/// equilibrium, in plant order `[theta1, dtheta1, theta2, dtheta2]`.
#[derive(Debug, Clone)]
pub struct DiscreteLinearization {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
}

/// Linearize the one-period flow map about `(x_eq, u_eq)` by central finite
/// differences with step `1e-6`.
///
/// Errors unless `(x_eq, u_eq)` is an equilibrium: the state derivative
/// there must have norm below `1e-8`.
pub fn linearize_discrete(
    p: &PendulumParams,
    x_eq: &PlantState,
    u_eq: &Torque,
    ts: f64,
    substeps: usize,
) -> Result<DiscreteLinearization> {
    p.validate()?;
    let residual = dynamics::state_derivative(x_eq, u_eq, p)?.norm();
    if residual > 1e-8 {
        return Err(Error::InvalidParameter(format!(
            "({:?}, {:?}) is not an equilibrium: |state derivative| = {residual:.3e}",
            x_eq, u_eq
        )));
    }
    let h = 1e-6;
    let flow = |x: &Vector4<f64>, u: &Torque| -> Result<Vector4<f64>> {
        Ok(dynamics::advance(&PlantState::from_vector(x), u, p, ts, substeps)?.to_vector())
    };
    let x0 = x_eq.to_vector();
    let mut a = Matrix4::zeros();
    for c in 0..4 {
        let mut hi = x0;
        let mut lo = x0;
        hi[c] += h;
        lo[c] -= h;
        a.set_column(c, &((flow(&hi, u_eq)? - flow(&lo, u_eq)?) / (2.0 * h)));
    }
    let mut b = Matrix4x2::zeros();
    for c in 0..2 {
        let mut hi = u_eq.to_vector();
        let mut lo = u_eq.to_vector();
        hi[c] += h;
        lo[c] -= h;
        b.set_column(
            c,
            &((flow(&x0, &Torque::from_vector(&hi))? - flow(&x0, &Torque::from_vector(&lo))?)
                / (2.0 * h)),
        );
    }
    Ok(DiscreteLinearization { a, b })
}

/// Solve the discrete algebraic Riccati equation
/// `P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q`
/// by fixed-point iteration from `P = Q`, with symmetrization each sweep.
///
/// Converges when the infinity norm of the update drops below `1e-10`;
/// errors after `100_000` iterations.
pub fn dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n || r.nrows() != m
        || r.ncols() != m
    {
        return Err(Error::DimensionMismatch(format!(
            "dare: A {}x{}, B {}x{}, Q {}x{}, R {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    const MAX_ITERS: usize = 100_000;
    const TOL: f64 = 1e-10;
    let mut p = q.clone();
    for _ in 0..MAX_ITERS {
        let atp = a.transpose() * &p;
        let btp = b.transpose() * &p;
        let gram = r + &btp * b; // R + B'PB
        let gram_inv = gram
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("R + B'PB in DARE".into()))?;
        let btpa = &btp * a;
        let mut p_next = &atp * a - btpa.transpose() * &gram_inv * &btpa + q;
        // Symmetrize to keep roundoff from accumulating in the iteration.
        p_next = (&p_next + p_next.transpose()) * 0.5;
        let diff = (&p_next - &p).amax();
        p = p_next;
        if diff < TOL {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("DARE solution".into()));
            }
            return Ok(p);
        }
    }
    Err(Error::NoConvergence("DARE fixed-point iteration".into(), MAX_ITERS))
}

/// State-feedback LQR controller `u = u_eq - K (x - x_eq)`.
#[derive(Debug, Clone)]
pub struct LqrController {
    pub k: Matrix2x4<f64>,
    pub x_eq: PlantState,
    pub u_eq: Torque,
}

impl LqrController {
    /// Unsaturated feedback torque; callers apply saturation (and optional
    /// exploration noise) themselves.
    pub fn torque(&self, x: &PlantState) -> Torque {
        let u = self.u_eq.to_vector() - self.k * (x.to_vector() - self.x_eq.to_vector());
        Torque::from_vector(&u)
    }
}

/// Design an LQR controller about the upright equilibrium with diagonal
/// weights `q` (state, plant order) and `r` (torque).
pub fn design_upright(
    p: &PendulumParams,
    q_diag: &[f64; 4],
    r_diag: &[f64; 2],
    ts: f64,
    substeps: usize,
) -> Result<LqrController> {
    if q_diag.iter().any(|&v| v < 0.0) || r_diag.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidParameter(
            "LQR needs q >= 0 and r > 0 on the diagonals".into(),
        ));
    }
    let lin = linearize_discrete(p, &PlantState::UPRIGHT, &Torque::ZERO, ts, substeps)?;
    let a = DMatrix::from_iterator(4, 4, lin.a.iter().copied());
    let b = DMatrix::from_iterator(4, 2, lin.b.iter().copied());
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(q_diag));
    let r = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(r_diag));
    let p_sol = dare(&a, &b, &q, &r)?;
    let btp = b.transpose() * &p_sol;
    let gram = &r + &btp * &b;
    let k_dyn = gram
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("R + B'PB in gain".into()))?
        * btp
        * &a;
    let mut k = Matrix2x4::zeros();
    for r_i in 0..2 {
        for c in 0..4 {
            k[(r_i, c)] = k_dyn[(r_i, c)];
        }
    }
    // The closed loop must be strictly stable; this fails only if the
    // iteration silently returned a non-stabilizing solution.
    let acl = lin.a - lin.b * k;
    let rho = acl
        .complex_eigenvalues()
        .iter()
        .fold(0.0f64, |m, e| m.max(e.norm()));
    if rho >= 1.0 {
        return Err(Error::NoConvergence(
            format!("LQR produced an unstable closed loop (spectral radius {rho})"),
            0,
        ));
    }
    Ok(LqrController {
        k,
        x_eq: PlantState::UPRIGHT,
        u_eq: Torque::ZERO,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const TS: f64 = 0.01;
    const SUBSTEPS: usize = 10;

    /// Continuous-time linearization at the upright equilibrium, computed
    /// symbolically from an independent derivation of the dynamics (plant
    /// order, nominal parameters).
    #[rustfmt::skip]
    fn a_cont_reference() -> Matrix4<f64> {
        Matrix4::new(
            0.0, 1.0, 0.0, 0.0,
            42.042857142857143, -9.523809523809524, -42.042857142857143, 23.80952380952381,
            0.0, 0.0, 0.0, 1.0,
            -56.057142857142857, 23.80952380952381, 154.15714285714286, -76.19047619047619,
        )
    }

    #[rustfmt::skip]
    fn b_cont_reference() -> Matrix4x2<f64> {
        Matrix4x2::new(
            0.0, 0.0,
            95.238095238095238, -238.09523809523810,
            0.0, 0.0,
            -238.09523809523810, 761.90476190476190,
        )
    }

    /// Truncated Taylor series of the matrix exponential; `|A ts| ~ 1.5`, so
    /// 25 terms are far beyond f64 precision.
    fn expm(a: &Matrix4<f64>) -> Matrix4<f64> {
        let mut sum = Matrix4::identity();
        let mut term = Matrix4::identity();
        for k in 1..25 {
            term = term * a / k as f64;
            sum += term;
        }
        sum
    }

    /// The finite-difference discrete linearization matches the exact
    /// discretization exp(A ts) / integral of exp for the symbolically
    /// derived continuous matrices.
    #[test]
    fn discrete_linearization_matches_symbolic_reference() {
        let p = PendulumParams::default();
        let lin =
            linearize_discrete(&p, &PlantState::UPRIGHT, &Torque::ZERO, TS, SUBSTEPS).unwrap();
        let ac = a_cont_reference();
        let a_exact = expm(&(ac * TS));
        // B_d = (sum_k A^k ts^(k+1) / (k+1)!) B_c
        let mut phi = Matrix4::identity() * TS;
        let mut term = Matrix4::identity() * TS;
        for k in 1..25 {
            term = term * ac * (TS / (k + 1) as f64);
            phi += term;
        }
        let b_exact = phi * b_cont_reference();
        assert!((lin.a - a_exact).amax() < 1e-6, "A error {:.3e}", (lin.a - a_exact).amax());
        assert!((lin.b - b_exact).amax() < 1e-6, "B error {:.3e}", (lin.b - b_exact).amax());
    }

    #[test]
    fn linearize_rejects_non_equilibrium() {
        let p = PendulumParams::default();
        let not_eq = PlantState::new(0.3, 0.0, 0.0, 0.0);
        assert!(linearize_discrete(&p, &not_eq, &Torque::ZERO, TS, SUBSTEPS).is_err());
        assert!(
            linearize_discrete(&p, &PlantState::UPRIGHT, &Torque::new(0.5, 0.0), TS, SUBSTEPS)
                .is_err()
        );
    }

    /// Scalar DARE with a = 0.5, b = q = r = 1 reduces to
    /// p^2 - p/4 - 1 = 0, solvable in closed form.
    #[test]
    fn scalar_dare_matches_closed_form() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let p = dare(&a, &b, &q, &r).unwrap();
        let expected = (0.25 + (0.25f64 * 0.25 + 4.0).sqrt()) / 2.0;
        assert_relative_eq!(p[(0, 0)], expected, max_relative = 1e-9);
        // Residual of the fixed point itself.
        let residual =
            p[(0, 0)] - (0.25 * p[(0, 0)] - 0.25 * p[(0, 0)] * p[(0, 0)] / (1.0 + p[(0, 0)]) + 1.0);
        assert!(residual.abs() < 1e-9);
    }

    #[test]
    fn dare_rejects_dimension_mismatch() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::zeros(3, 1);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        assert!(dare(&a, &b, &q, &r).is_err());
    }

    #[test]
    fn riccati_solution_is_symmetric_psd_and_stabilizing() {
        let p = PendulumParams::default();
        let lin =
            linearize_discrete(&p, &PlantState::UPRIGHT, &Torque::ZERO, TS, SUBSTEPS).unwrap();
        let a = DMatrix::from_iterator(4, 4, lin.a.iter().copied());
        let b = DMatrix::from_iterator(4, 2, lin.b.iter().copied());
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[10.0, 1.0, 10.0, 1.0]));
        let r = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[0.1, 0.1]));
        let sol = dare(&a, &b, &q, &r).unwrap();
        assert!((&sol - sol.transpose()).amax() < 1e-9);
        let eig = sol.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v > 0.0), "{:?}", eig.eigenvalues);

        let ctl = design_upright(&p, &[10.0, 1.0, 10.0, 1.0], &[0.1, 0.1], TS, SUBSTEPS).unwrap();
        let acl = lin.a - lin.b * ctl.k;
        let rho = acl
            .complex_eigenvalues()
            .iter()
            .fold(0.0f64, |m, e| m.max(e.norm()));
        assert!(rho < 1.0, "spectral radius {rho}");
    }

    /// Closed-loop regulation on the true nonlinear plant: from a tilted
    /// start inside the capture region, the saturated LQR drives the state
    /// to the origin within 5 s.
    #[test]
    fn closed_loop_regulates_nonlinear_plant() {
        let p = PendulumParams::default();
        let ctl = design_upright(&p, &[10.0, 1.0, 10.0, 1.0], &[0.1, 0.1], TS, SUBSTEPS).unwrap();
        let mut x = PlantState::new(0.12, 0.0, -0.15, 0.0);
        for _ in 0..500 {
            let u = ctl.torque(&x).clamp(5.0);
            x = dynamics::advance(&x, &u, &p, TS, SUBSTEPS).unwrap();
        }
        let norm = x.to_vector().amax();
        assert!(norm < 1e-3, "state after 5 s: {x:?}");
    }

    #[test]
    fn design_rejects_bad_weights() {
        let p = PendulumParams::default();
        assert!(design_upright(&p, &[-1.0, 1.0, 1.0, 1.0], &[0.1, 0.1], TS, SUBSTEPS).is_err());
        assert!(design_upright(&p, &[1.0, 1.0, 1.0, 1.0], &[0.0, 0.1], TS, SUBSTEPS).is_err());
    }
}
