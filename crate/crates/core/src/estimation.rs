//! State estimation on the learned model: EKF, UKF, and a joint UKF that
//! additionally adapts the network's final linear layer online.
//!
//! All filters work in the model's normalized coordinates (model order
//! `[p1, p2, v1, v2]`, optionally extended by the final-layer parameters).
//! Measurements are joint angles in rad and are normalized at the boundary.
//! The measurement map is the linear position selector, so both filters use
//! the plain linear Kalman update in Joseph form; they differ only in how
//! the prediction propagates uncertainty (Jacobian vs sigma points).

use nalgebra::{DMatrix, DVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{PlantState, Torque};
use crate::error::{Error, Result};
use crate::tustin_net::TustinNetModel;

/// A Gaussian state belief: mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "belief mean has {} entries but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Force exact symmetry on the covariance.
    pub fn symmetrize(&mut self) {
        let t = self.cov.transpose();
        self.cov += t;
        self.cov *= 0.5;
    }

    /// Smallest eigenvalue of the (symmetrized) covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        sym.symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &v| a.min(v))
    }
}

/// Scaled unscented-transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UkfConfig {
    /// Sigma-point spread; small values keep the points near the mean.
    pub alpha: f64,
    /// Prior-distribution weighting of the central covariance point
    /// (2 is optimal for Gaussians).
    pub beta: f64,
    /// Secondary scaling; `None` uses the `3 - n` heuristic.
    pub kappa: Option<f64>,
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 2.0,
            kappa: None,
        }
    }
}

impl UkfConfig {
    pub fn kappa_for(&self, n: usize) -> f64 {
        self.kappa.unwrap_or(3.0 - n as f64)
    }

    /// Composite scaling `lambda = alpha^2 (n + kappa) - n`.
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa_for(n)) - n as f64
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "UKF alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if n as f64 + self.lambda(n) <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "UKF scaling gives n + lambda <= 0 for n = {n} (alpha {}, kappa {})",
                self.alpha,
                self.kappa_for(n)
            )));
        }
        Ok(())
    }
}

/// Process / measurement noise variances, in the model's normalized units.
///
/// `pos_var` and `vel_var` drive the normalized positions and velocities,
/// `param_var` is the random-walk variance of each adapted final-layer
/// parameter (zero freezes them), and `meas_var` is the variance of a
/// normalized angle measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub pos_var: f64,
    pub vel_var: f64,
    pub param_var: f64,
    pub meas_var: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pos_var", self.pos_var),
            ("vel_var", self.vel_var),
            ("param_var", self.param_var),
            ("meas_var", self.meas_var),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.meas_var == 0.0 {
            return Err(Error::InvalidParameter(
                "meas_var must be > 0 (a singular update is not meaningful)".into(),
            ));
        }
        Ok(())
    }

    /// Process covariance of the 4-dim state block.
    pub fn state_q(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            self.pos_var,
            self.pos_var,
            self.vel_var,
            self.vel_var,
        ]))
    }

    /// Process covariance of the joint state with `p` adapted parameters.
    pub fn joint_q(&self, p: usize) -> DMatrix<f64> {
        let mut d = Vec::with_capacity(4 + p);
        d.extend_from_slice(&[self.pos_var, self.pos_var, self.vel_var, self.vel_var]);
        d.extend(std::iter::repeat(self.param_var).take(p));
        DMatrix::from_diagonal(&DVector::from_vec(d))
    }
}

/// Which filter tracks the state in a closed-loop run (adaptation always
/// uses the joint UKF).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterChoice {
    Ekf,
    Ukf,
}

/// Everything the closed loop needs to run a filter: the filter type, its
/// noise model, sigma-point settings, prior variances (normalized units),
/// and the simulated measurement-noise level (rad; 0 disables it).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSetup {
    pub choice: FilterChoice,
    pub noise: NoiseConfig,
    pub ukf: UkfConfig,
    /// Prior variance of each normalized position.
    pub p0_pos: f64,
    /// Prior variance of each normalized velocity.
    pub p0_vel: f64,
    /// Prior variance of each adapted final-layer parameter.
    pub p0_param: f64,
    /// Standard deviation of simulated measurement noise (rad); 0 = off.
    pub meas_sigma: f64,
    /// Seed of the measurement-noise stream.
    pub seed: u64,
}

impl Default for FilterSetup {
    fn default() -> Self {
        Self {
            choice: FilterChoice::Ukf,
            noise: NoiseConfig {
                pos_var: 1e-8,
                vel_var: 1e-6,
                param_var: 1e-8,
                meas_var: 1e-8,
            },
            ukf: UkfConfig::default(),
            p0_pos: 1e-6,
            p0_vel: 1e-4,
            p0_param: 1e-4,
            meas_sigma: 0.0,
            seed: 0,
        }
    }
}

/// A scaled unscented sigma-point set: `2n + 1` points with mean and
/// covariance recombination weights.
#[derive(Debug, Clone)]
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub w_mean: Vec<f64>,
    pub w_cov: Vec<f64>,
}

/// Generate sigma points for a belief. The covariance square root comes
/// from a Cholesky factorization; if the matrix has lost definiteness to
/// roundoff, a diagonal jitter starting at `1e-10` and doubling up to `1e-6`
/// is added before giving up.
pub fn sigma_points(belief: &GaussianBelief, cfg: &UkfConfig) -> Result<SigmaPoints> {
    let n = belief.dim();
    cfg.validate(n)?;
    let lambda = cfg.lambda(n);
    let scale = (n as f64 + lambda).sqrt();

    let sym = (&belief.cov + belief.cov.transpose()) * 0.5;
    let mut jitter = 0.0;
    let chol = loop {
        let mut m = sym.clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        match nalgebra::Cholesky::new(m) {
            Some(c) => break c,
            None => {
                jitter = if jitter == 0.0 { 1e-10 } else { jitter * 2.0 };
                if jitter > 1e-6 {
                    return Err(Error::NotPositiveDefinite(
                        "belief covariance (even with 1e-6 jitter)".into(),
                    ));
                }
            }
        }
    };
    let l = chol.l();

    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(belief.mean.clone());
    for i in 0..n {
        let col = l.column(i) * scale;
        points.push(&belief.mean + &col);
        points.push(&belief.mean - &col);
    }
    let w0_mean = lambda / (n as f64 + lambda);
    let w0_cov = w0_mean + 1.0 - cfg.alpha * cfg.alpha + cfg.beta;
    let wi = 1.0 / (2.0 * (n as f64 + lambda));
    let mut w_mean = vec![wi; 2 * n + 1];
    let mut w_cov = vec![wi; 2 * n + 1];
    w_mean[0] = w0_mean;
    w_cov[0] = w0_cov;
    Ok(SigmaPoints {
        points,
        w_mean,
        w_cov,
    })
}

/// Propagate a belief through an arbitrary transition `f` with additive
/// process noise `q`, using the unscented transform.
pub fn unscented_predict<F>(
    belief: &GaussianBelief,
    mut f: F,
    q: &DMatrix<f64>,
    cfg: &UkfConfig,
) -> Result<GaussianBelief>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let n = belief.dim();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "process noise is {}x{} for an {n}-dim belief",
            q.nrows(),
            q.ncols()
        )));
    }
    let sp = sigma_points(belief, cfg)?;
    let mapped: Vec<DVector<f64>> = sp.points.iter().map(|p| f(p)).collect();
    let mut mean = DVector::zeros(n);
    for (w, x) in sp.w_mean.iter().zip(&mapped) {
        if x.len() != n {
            return Err(Error::DimensionMismatch(
                "transition changed the state dimension".into(),
            ));
        }
        mean.axpy(*w, x, 1.0);
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("unscented predicted mean".into()));
    }
    let mut cov = q.clone();
    for (w, x) in sp.w_cov.iter().zip(&mapped) {
        let d = x - &mean;
        cov.ger(*w, &d, &d, 1.0);
    }
    let mut out = GaussianBelief::new(mean, cov)?;
    out.symmetrize();
    Ok(out)
}

/// Linear Kalman measurement update in Joseph form, which preserves
/// symmetry and positive semidefiniteness:
/// `P+ = (I - K H) P (I - K H)' + K R K'`.
///
/// Returns the updated belief and the innovation `y - H x`.
pub fn linear_update(
    belief: &GaussianBelief,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(GaussianBelief, DVector<f64>)> {
    let n = belief.dim();
    let m = y.len();
    if h.nrows() != m || h.ncols() != n || r.nrows() != m || r.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "update with H {}x{}, R {}x{}, y len {m}, state dim {n}",
            h.nrows(),
            h.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    let innovation = y - h * &belief.mean;
    let pht = &belief.cov * h.transpose();
    let s = h * &pht + r;
    let s_sym = (&s + s.transpose()) * 0.5;
    let chol = nalgebra::Cholesky::new(s_sym)
        .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
    // K = P H' S^-1  <=>  K' = S^-1 (P H')'.
    let k = chol.solve(&pht.transpose()).transpose();
    let mean = &belief.mean + &k * &innovation;
    let ikh = DMatrix::identity(n, n) - &k * h;
    let cov = &ikh * &belief.cov * ikh.transpose() + &k * r * k.transpose();
    let mut out = GaussianBelief::new(mean, cov)?;
    out.symmetrize();
    Ok((out, innovation))
}

/// Measurement update with the position-selector map for any belief whose
/// first entries are `[p1, p2, ...]`. Takes the measured angles in rad,
/// normalizes them, and returns the innovation in rad.
pub fn position_update(
    model: &TustinNetModel,
    belief: &GaussianBelief,
    y: &Vector2<f64>,
    meas_var: f64,
) -> Result<(GaussianBelief, Vector2<f64>)> {
    let n = belief.dim();
    if n < 4 {
        return Err(Error::DimensionMismatch(format!(
            "position update needs at least a 4-dim belief, got {n}"
        )));
    }
    let mut h = DMatrix::zeros(2, n);
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    let r = DMatrix::from_diagonal(&DVector::from_element(2, meas_var));
    let y_norm = DVector::from_vec(vec![y[0] / model.angle_scale, y[1] / model.angle_scale]);
    let (updated, innov) = linear_update(belief, &h, &r, &y_norm)?;
    Ok((
        updated,
        Vector2::new(innov[0], innov[1]) * model.angle_scale,
    ))
}

// --- EKF ---

/// EKF prediction: propagate the mean through the model step and the
/// covariance through its exact Jacobian.
pub fn ekf_predict(
    model: &TustinNetModel,
    belief: &GaussianBelief,
    u: &Torque,
    noise: &NoiseConfig,
) -> Result<GaussianBelief> {
    expect_dim(belief, 4)?;
    let s = crate::tustin_net::NetState::from_vector(&Vector4::from_column_slice(
        belief.mean.as_slice(),
    ));
    let jac = model.step_jacobians(&s, u);
    let next = model.step(&s, u);
    if !next.is_finite() {
        return Err(Error::NonFinite("EKF predicted mean".into()));
    }
    let f = DMatrix::from_iterator(4, 4, jac.state.iter().copied());
    let cov = &f * &belief.cov * f.transpose() + noise.state_q();
    let mut out = GaussianBelief::new(DVector::from_column_slice(next.to_vector().as_slice()), cov)?;
    out.symmetrize();
    Ok(out)
}

/// One EKF cycle: predict under `u`, then update with the measured angles
/// `y` (rad). Returns the posterior and the innovation in rad.
pub fn ekf_step(
    model: &TustinNetModel,
    belief: &GaussianBelief,
    u: &Torque,
    y: &Vector2<f64>,
    noise: &NoiseConfig,
) -> Result<(GaussianBelief, Vector2<f64>)> {
    let predicted = ekf_predict(model, belief, u, noise)?;
    position_update(model, &predicted, y, noise.meas_var)
}

// --- UKF ---

/// UKF prediction: propagate sigma points through the full nonlinear step.
pub fn ukf_predict(
    model: &TustinNetModel,
    belief: &GaussianBelief,
    u: &Torque,
    noise: &NoiseConfig,
    cfg: &UkfConfig,
) -> Result<GaussianBelief> {
    expect_dim(belief, 4)?;
    let q = noise.state_q();
    unscented_predict(
        belief,
        |x| {
            let v = model.step_vec(&Vector4::from_column_slice(x.as_slice()), u);
            DVector::from_column_slice(v.as_slice())
        },
        &q,
        cfg,
    )
}

/// One UKF cycle: predict under `u`, then update with `y` (rad).
pub fn ukf_step(
    model: &TustinNetModel,
    belief: &GaussianBelief,
    u: &Torque,
    y: &Vector2<f64>,
    noise: &NoiseConfig,
    cfg: &UkfConfig,
) -> Result<(GaussianBelief, Vector2<f64>)> {
    let predicted = ukf_predict(model, belief, u, noise, cfg)?;
    position_update(model, &predicted, y, noise.meas_var)
}

// --- joint UKF (state + final-layer parameters) ---

/// Extend a 4-dim state belief with the model's current final-layer
/// parameters: mean `[state; psi]`, block-diagonal covariance with
/// `p0_param` on the parameter block.
pub fn joint_belief(
    model: &TustinNetModel,
    state: &GaussianBelief,
    p0_param: f64,
) -> Result<GaussianBelief> {
    expect_dim(state, 4)?;
    if !(p0_param.is_finite() && p0_param >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "p0_param must be finite and >= 0, got {p0_param}"
        )));
    }
    let psi = model.last_layer_params();
    let p = psi.len();
    let mut mean = DVector::zeros(4 + p);
    mean.rows_mut(0, 4).copy_from(&state.mean);
    mean.rows_mut(4, p).copy_from(&psi);
    let mut cov = DMatrix::zeros(4 + p, 4 + p);
    cov.view_mut((0, 0), (4, 4)).copy_from(&state.cov);
    for i in 0..p {
        cov[(4 + i, 4 + i)] = p0_param;
    }
    GaussianBelief::new(mean, cov)
}

/// Joint-UKF prediction: each sigma point carries its own final-layer
/// parameters, which are substituted into the model before stepping the
/// state part; the parameters themselves follow a random walk.
pub fn jukf_predict(
    model: &TustinNetModel,
    belief: &GaussianBelief,
    u: &Torque,
    noise: &NoiseConfig,
    cfg: &UkfConfig,
) -> Result<GaussianBelief> {
    let p = model.last_layer_len();
    expect_dim(belief, 4 + p)?;
    let q = noise.joint_q(p);
    // One scratch model per call; only the final layer changes per point.
    let mut scratch = model.clone();
    let mut psi = DVector::zeros(p);
    unscented_predict(
        belief,
        move |x| {
            psi.copy_from(&x.rows(4, p));
            scratch
                .set_last_layer(&psi)
                .expect("psi length fixed by construction");
            let s = Vector4::new(x[0], x[1], x[2], x[3]);
            let next = scratch.step_vec(&s, u);
            let mut out = x.clone();
            out.rows_mut(0, 4)
                .copy_from(&DVector::from_column_slice(next.as_slice()));
            out
        },
        &q,
        cfg,
    )
}

/// One joint-UKF cycle: predict under `u`, then update with `y` (rad).
pub fn jukf_step(
    model: &TustinNetModel,
    belief: &GaussianBelief,
    u: &Torque,
    y: &Vector2<f64>,
    noise: &NoiseConfig,
    cfg: &UkfConfig,
) -> Result<(GaussianBelief, Vector2<f64>)> {
    let predicted = jukf_predict(model, belief, u, noise, cfg)?;
    position_update(model, &predicted, y, noise.meas_var)
}

/// Clone the base model with the final layer replaced by the joint belief's
/// current parameter estimate.
pub fn extract_model(model: &TustinNetModel, belief: &GaussianBelief) -> Result<TustinNetModel> {
    let p = model.last_layer_len();
    expect_dim(belief, 4 + p)?;
    let mut out = model.clone();
    out.set_last_layer(&DVector::from(belief.mean.rows(4, p)))?;
    Ok(out)
}

/// Initial state belief from a physical state guess and normalized position
/// / velocity variances.
pub fn initial_state_belief(
    model: &TustinNetModel,
    guess: &PlantState,
    p0_pos: f64,
    p0_vel: f64,
) -> Result<GaussianBelief> {
    if p0_pos < 0.0 || p0_vel < 0.0 {
        return Err(Error::InvalidParameter(
            "initial variances must be >= 0".into(),
        ));
    }
    let s = model.normalize(guess);
    GaussianBelief::new(
        DVector::from_column_slice(s.to_vector().as_slice()),
        DMatrix::from_diagonal(&DVector::from_vec(vec![p0_pos, p0_pos, p0_vel, p0_vel])),
    )
}

/// Physical-units view of a (state or joint) belief: the estimated plant
/// state and the covariance diagonal in plant order
/// `[theta1, dtheta1, theta2, dtheta2]`.
pub fn belief_to_plant(
    model: &TustinNetModel,
    belief: &GaussianBelief,
) -> Result<(PlantState, Vector4<f64>)> {
    if belief.dim() < 4 {
        return Err(Error::DimensionMismatch(format!(
            "state belief needs >= 4 dims, got {}",
            belief.dim()
        )));
    }
    let a2 = model.angle_scale * model.angle_scale;
    let v2 = model.velocity_scale * model.velocity_scale;
    let s = crate::tustin_net::NetState::new(
        Vector2::new(belief.mean[0], belief.mean[1]),
        Vector2::new(belief.mean[2], belief.mean[3]),
    );
    let estimate = model.denormalize(&s);
    let diag = Vector4::new(
        a2 * belief.cov[(0, 0)],
        v2 * belief.cov[(2, 2)],
        a2 * belief.cov[(1, 1)],
        v2 * belief.cov[(3, 3)],
    );
    Ok((estimate, diag))
}

fn expect_dim(belief: &GaussianBelief, n: usize) -> Result<()> {
    if belief.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected a {n}-dim belief, got {}",
            belief.dim()
        )));
    }
    Ok(())
}

// --- filter trace CSV ---

/// Fixed CSV header for filter traces: estimate, covariance diagonal and
/// innovation, all in physical units and plant order.
pub const FILTER_TRACE_HEADER: &str = "t,theta1_hat,dtheta1_hat,theta2_hat,dtheta2_hat,\
p_theta1,p_dtheta1,p_theta2,p_dtheta2,innov_theta1,innov_theta2";

/// One row of a filter trace.
#[derive(Debug, Clone, Copy)]
pub struct FilterTraceRow {
    pub t: f64,
    pub estimate: PlantState,
    /// Covariance diagonal, physical units, plant order.
    pub cov_diag: Vector4<f64>,
    /// Innovation in rad.
    pub innovation: Vector2<f64>,
}

/// Serialize a filter trace to CSV (time with six decimals, values in
/// shortest round-trip form).
pub fn filter_trace_csv(rows: &[FilterTraceRow]) -> String {
    use std::fmt::Write as _;
    let mut out = String::with_capacity(96 * rows.len());
    out.push_str(FILTER_TRACE_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{:.6},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.estimate.theta1,
            r.estimate.dtheta1,
            r.estimate.theta2,
            r.estimate.dtheta2,
            r.cov_diag[0],
            r.cov_diag[1],
            r.cov_diag[2],
            r.cov_diag[3],
            r.innovation[0],
            r.innovation[1]
        )
        .expect("writing to String cannot fail");
    }
    out
}

/// Write a filter trace CSV to a file.
pub fn write_filter_trace(path: &std::path::Path, rows: &[FilterTraceRow]) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::File::create(path)?;
    f.write_all(filter_trace_csv(rows).as_bytes())?;
    Ok(())
}
