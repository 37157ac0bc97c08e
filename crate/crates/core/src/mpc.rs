//! Receding-horizon control on the learned model.
//!
//! The controller solves a short-horizon (default 5 steps) box-constrained
//! optimal control problem by shooting: roll the model forward, accumulate a
//! quadratic cost on predicted state error and control effort, pull the exact
//! gradient back through the step derivative, and take projected-gradient
//! steps with a backtracking line search. The first torque of the plan is
//! applied to the true plant and the procedure repeats with the shifted plan
//! as the warm start.
//!
//! [`closed_loop`] ties the whole pipeline together: plant, measurement,
//! filter (optionally adapting the model's final layer online) and MPC.

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{advance, PendulumParams, PlantState, Torque};
use crate::error::{Error, Result};
use crate::estimation::{
    belief_to_plant, ekf_step, extract_model, initial_state_belief, joint_belief, jukf_step,
    position_update, ukf_step, FilterChoice, FilterSetup, GaussianBelief,
};
use crate::tustin_net::{NetState, TustinNetModel};

/// Wrap an angle to its principal value in `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = (x + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

/// Receding-horizon controller settings.
///
/// `q` weights the predicted state error in normalized model coordinates
/// (order `[p1, p2, v1, v2]`); `r` weights physical torques. The reference
/// is a physical plant state whose angles are compared wrap-aware.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    /// Number of prediction steps (>= 1).
    pub horizon: usize,
    /// State error weight, normalized units, model order. Must be symmetric PSD.
    pub q: Matrix4<f64>,
    /// Control weight on physical torques. Must be symmetric PD.
    pub r: Matrix2<f64>,
    /// Box constraint: every torque component in `[-u_max, u_max]`.
    pub u_max: f64,
    /// Optimizer iteration cap.
    pub max_iters: usize,
    /// Terminate when the projected-gradient residual's sup norm drops below this.
    pub grad_tol: f64,
    /// Target plant state (physical units).
    pub reference: PlantState,
    /// Penalize control increments `u(k) - u(k-1)` instead of magnitudes.
    pub penalize_increments: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self::regulation(10.0, 0.1, 0.01)
    }
}

impl MpcConfig {
    /// Diagonal weights: `q_pos` on both normalized angles, `q_vel` on both
    /// normalized velocities, `r` on both torques. Horizon 5, `u_max` 5.
    pub fn regulation(q_pos: f64, q_vel: f64, r: f64) -> Self {
        Self {
            horizon: 5,
            q: Matrix4::from_diagonal(&Vector4::new(q_pos, q_pos, q_vel, q_vel)),
            r: Matrix2::from_diagonal_element(r),
            u_max: 5.0,
            max_iters: 80,
            grad_tol: 1e-6,
            reference: PlantState::new(0.0, 0.0, 0.0, 0.0),
            penalize_increments: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("MPC horizon must be >= 1".into()));
        }
        if !(self.u_max.is_finite() && self.u_max >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "u_max must be finite and >= 0, got {}",
                self.u_max
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.grad_tol.is_finite() && self.grad_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "grad_tol must be finite and > 0, got {}",
                self.grad_tol
            )));
        }
        if self.q.iter().any(|v| !v.is_finite()) || self.r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MPC weight matrices".into()));
        }
        Ok(())
    }
}

/// Result of one horizon optimization.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// Planned torques, all within the box.
    pub torques: Vec<Torque>,
    /// Predicted states after each planned torque (length = horizon).
    pub predicted: Vec<NetState>,
    /// Cost at the returned plan.
    pub cost: f64,
    /// Optimizer iterations used.
    pub iterations: usize,
    /// Whether the projected-gradient tolerance was reached.
    pub converged: bool,
}

/// Cost, exact torque gradient, and predicted trajectory of one plan.
#[derive(Debug, Clone)]
pub struct HorizonEval {
    pub cost: f64,
    /// d(cost)/d(torque), physical units, one entry per horizon step.
    pub grad: Vec<Vector2<f64>>,
    /// Predicted states after each step (length = horizon).
    pub predicted: Vec<NetState>,
}

/// Wrap-aware state residual in normalized coordinates, model order.
fn state_residual(model: &TustinNetModel, s: &NetState, r: &NetState) -> Vector4<f64> {
    let a = model.angle_scale;
    Vector4::new(
        wrap_angle(a * (s.pos[0] - r.pos[0])) / a,
        wrap_angle(a * (s.pos[1] - r.pos[1])) / a,
        s.vel[0] - r.vel[0],
        s.vel[1] - r.vel[1],
    )
}

/// Roll the model over the horizon and return the cost
/// `sum_k e(k)' Q e(k) + sum_k u(k)' R u(k)` (or increment-weighted control
/// if configured, with `u_prev` as the step before the plan) together with
/// its exact gradient with respect to the torques.
pub fn horizon_cost(
    model: &TustinNetModel,
    s0: &NetState,
    torques: &[Torque],
    cfg: &MpcConfig,
    u_prev: &Torque,
) -> Result<HorizonEval> {
    cfg.validate()?;
    if torques.len() != cfg.horizon {
        return Err(Error::DimensionMismatch(format!(
            "plan has {} torques for a horizon of {}",
            torques.len(),
            cfg.horizon
        )));
    }
    let n = cfg.horizon;
    let r_ref = model.normalize(&cfg.reference);

    // Forward rollout with caches.
    let mut states = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    let mut s = *s0;
    let mut cost = 0.0;
    for u in torques {
        let (next, cache) = model.step_cached(&s, u);
        let e = state_residual(model, &next, &r_ref);
        cost += (e.transpose() * cfg.q * e)[0];
        states.push(next);
        caches.push(cache);
        residuals.push(e);
        s = next;
    }
    for (k, u) in torques.iter().enumerate() {
        let v = if cfg.penalize_increments {
            let prev = if k == 0 { *u_prev } else { torques[k - 1] };
            Vector2::new(u.u1 - prev.u1, u.u2 - prev.u2)
        } else {
            Vector2::new(u.u1, u.u2)
        };
        cost += (v.transpose() * cfg.r * v)[0];
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("MPC horizon cost".into()));
    }

    // Reverse sweep: the wrap in the residual has unit slope almost
    // everywhere, so the cotangent of e passes straight through to the state.
    let mut grad = vec![Vector2::zeros(); n];
    let mut cot_pos = Vector2::zeros();
    let mut cot_vel = Vector2::zeros();
    for k in (0..n).rev() {
        let ce: Vector4<f64> =
            (cfg.q + cfg.q.transpose()) * residuals[k];
        cot_pos += Vector2::new(ce[0], ce[1]);
        cot_vel += Vector2::new(ce[2], ce[3]);
        let cots = model.step_vjp(&caches[k], &cot_pos, &cot_vel, None);
        grad[k] += cots.torque;
        cot_pos = cots.pos;
        cot_vel = cots.vel;
    }
    let rr = cfg.r + cfg.r.transpose();
    for k in 0..n {
        if cfg.penalize_increments {
            let prev = if k == 0 { *u_prev } else { torques[k - 1] };
            let d = Vector2::new(torques[k].u1 - prev.u1, torques[k].u2 - prev.u2);
            grad[k] += rr * d;
            if k + 1 < n {
                let d_next = Vector2::new(
                    torques[k + 1].u1 - torques[k].u1,
                    torques[k + 1].u2 - torques[k].u2,
                );
                grad[k] -= rr * d_next;
            }
        } else {
            grad[k] += rr * Vector2::new(torques[k].u1, torques[k].u2);
        }
    }
    Ok(HorizonEval {
        cost,
        grad,
        predicted: states,
    })
}

fn project(u: &Torque, u_max: f64) -> Torque {
    u.clamp(u_max)
}

/// Solve the horizon problem by projected gradient descent with a
/// backtracking (Armijo) line search. `warm_start` is projected onto the box
/// and padded / truncated to the horizon length; absent, the plan starts at
/// zero. Returns the best plan found; `converged` reports whether the
/// projected-gradient tolerance was met within the iteration cap.
pub fn solve(
    model: &TustinNetModel,
    s0: &NetState,
    cfg: &MpcConfig,
    warm_start: Option<&[Torque]>,
    u_prev: &Torque,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let n = cfg.horizon;
    let mut u: Vec<Torque> = match warm_start {
        Some(w) if !w.is_empty() => {
            let mut v: Vec<Torque> = w.iter().take(n).map(|t| project(t, cfg.u_max)).collect();
            while v.len() < n {
                v.push(*v.last().unwrap());
            }
            v
        }
        _ => vec![Torque::new(0.0, 0.0); n],
    };

    let mut eval = horizon_cost(model, s0, &u, cfg, u_prev)?;
    let mut alpha = 1.0_f64;
    let mut iterations = 0;
    let mut converged = false;
    const C1: f64 = 1e-4;

    // Projected-gradient residual: sup norm of u - P(u - g).
    let residual_of = |u: &[Torque], grad: &[Vector2<f64>]| -> f64 {
        let mut r = 0.0_f64;
        for k in 0..u.len() {
            let stepped = project(
                &Torque::new(u[k].u1 - grad[k][0], u[k].u2 - grad[k][1]),
                cfg.u_max,
            );
            r = r
                .max((u[k].u1 - stepped.u1).abs())
                .max((u[k].u2 - stepped.u2).abs());
        }
        r
    };

    for _ in 0..cfg.max_iters {
        if residual_of(&u, &eval.grad) < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut accepted = false;
        for _ in 0..=30 {
            let candidate: Vec<Torque> = (0..n)
                .map(|k| {
                    project(
                        &Torque::new(
                            u[k].u1 - alpha * eval.grad[k][0],
                            u[k].u2 - alpha * eval.grad[k][1],
                        ),
                        cfg.u_max,
                    )
                })
                .collect();
            // Sufficient decrease along the projected step.
            let mut decrease = 0.0;
            for k in 0..n {
                decrease += eval.grad[k][0] * (u[k].u1 - candidate[k].u1)
                    + eval.grad[k][1] * (u[k].u2 - candidate[k].u2);
            }
            let cand_eval = horizon_cost(model, s0, &candidate, cfg, u_prev)?;
            if cand_eval.cost <= eval.cost - C1 * decrease {
                u = candidate;
                eval = cand_eval;
                alpha = (alpha * 2.0).min(1e6);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Line search stalled at numerical precision; keep the best plan.
            break;
        }
    }
    if !converged {
        converged = residual_of(&u, &eval.grad) < cfg.grad_tol;
    }

    Ok(MpcSolution {
        torques: u,
        predicted: eval.predicted,
        cost: eval.cost,
        iterations,
        converged,
    })
}

/// One logged step of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStep {
    pub t: f64,
    /// True plant state when the torque was chosen.
    pub state: PlantState,
    /// Torque applied over `[t, t + ts)`.
    pub torque: Torque,
    /// Filter estimate the plan was computed from.
    pub estimate: PlantState,
    /// Belief covariance diagonal, physical units, plant order.
    pub cov_diag: Vector4<f64>,
    /// Cost of the accepted plan.
    pub cost: f64,
    /// Optimizer iterations of this solve.
    pub iterations: usize,
    /// Filter innovation after this step's torque (rad): the residual of the
    /// one-step-ahead position prediction against the next measurement.
    pub innovation: Vector2<f64>,
}

/// Full closed-loop run: one row per control step plus the final state.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub steps: Vec<RunStep>,
    /// Plant state after the last applied torque.
    pub final_state: PlantState,
}

/// Fixed CSV header of a closed-loop run log.
pub const RUN_LOG_HEADER: &str = "t,theta1,dtheta1,theta2,dtheta2,u1,u2,\
theta1_hat,dtheta1_hat,theta2_hat,dtheta2_hat,mpc_cost,solver_iters";

impl RunLog {
    pub fn csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::with_capacity(128 * self.steps.len());
        out.push_str(RUN_LOG_HEADER);
        out.push('\n');
        for s in &self.steps {
            writeln!(
                out,
                "{:.6},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.t,
                s.state.theta1,
                s.state.dtheta1,
                s.state.theta2,
                s.state.dtheta2,
                s.torque.u1,
                s.torque.u2,
                s.estimate.theta1,
                s.estimate.dtheta1,
                s.estimate.theta2,
                s.estimate.dtheta2,
                s.cost,
                s.iterations
            )
            .expect("writing to String cannot fail");
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write as _;
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.csv().as_bytes())?;
        Ok(())
    }

    /// Largest wrap-aware angle error (rad, both joints) over all steps with
    /// `t >= t_final - window`, including the final state.
    pub fn max_angle_error_over_window(&self, reference: &PlantState, window: f64) -> f64 {
        let t_final = self
            .steps
            .last()
            .map(|s| s.t)
            .unwrap_or(0.0);
        let mut worst = 0.0_f64;
        let err = |s: &PlantState| {
            wrap_angle(s.theta1 - reference.theta1)
                .abs()
                .max(wrap_angle(s.theta2 - reference.theta2).abs())
        };
        for s in &self.steps {
            if s.t >= t_final - window {
                worst = worst.max(err(&s.state));
            }
        }
        worst.max(err(&self.final_state))
    }

    /// Mean wrap-aware angle error (rad, both joints pooled) over all steps
    /// with `t >= t_final - window`.
    pub fn mean_angle_error_over_window(&self, reference: &PlantState, window: f64) -> f64 {
        let t_final = self.steps.last().map(|s| s.t).unwrap_or(0.0);
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in &self.steps {
            if s.t >= t_final - window {
                sum += wrap_angle(s.state.theta1 - reference.theta1).abs()
                    + wrap_angle(s.state.theta2 - reference.theta2).abs();
                count += 2;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Largest rate error (rad/s, both joints) over all steps with
    /// `t >= t_final - window`, including the final state.
    pub fn max_rate_error_over_window(&self, reference: &PlantState, window: f64) -> f64 {
        let t_final = self.steps.last().map(|s| s.t).unwrap_or(0.0);
        let err = |s: &PlantState| {
            (s.dtheta1 - reference.dtheta1)
                .abs()
                .max((s.dtheta2 - reference.dtheta2).abs())
        };
        let mut worst = 0.0_f64;
        for s in &self.steps {
            if s.t >= t_final - window {
                worst = worst.max(err(&s.state));
            }
        }
        worst.max(err(&self.final_state))
    }

    /// Mean one-step position-prediction residual (rad, both joints pooled)
    /// over all steps with `t >= t_final - window`. Measures how well the
    /// filter's model anticipates the next measurement.
    pub fn mean_innovation_over_window(&self, window: f64) -> f64 {
        let t_final = self.steps.last().map(|s| s.t).unwrap_or(0.0);
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in &self.steps {
            if s.t >= t_final - window {
                sum += s.innovation[0].abs() + s.innovation[1].abs();
                count += 2;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Fraction of steps where both estimated angles and rates lie within
    /// `n_sigma` filter standard deviations of the true plant state.
    pub fn estimate_consistency(&self, n_sigma: f64) -> f64 {
        if self.steps.is_empty() {
            return 1.0;
        }
        let mut ok = 0usize;
        for s in &self.steps {
            let d = [
                wrap_angle(s.estimate.theta1 - s.state.theta1),
                s.estimate.dtheta1 - s.state.dtheta1,
                wrap_angle(s.estimate.theta2 - s.state.theta2),
                s.estimate.dtheta2 - s.state.dtheta2,
            ];
            let inside = (0..4).all(|i| d[i].abs() <= n_sigma * s.cov_diag[i].max(0.0).sqrt());
            if inside {
                ok += 1;
            }
        }
        ok as f64 / self.steps.len() as f64
    }
}

/// Close the loop on the true plant.
///
/// Per step: measure the joint angles (optionally with Gaussian noise),
/// update the belief, optionally extract the adapted model, plan from the
/// belief mean with the previous plan (shifted) as warm start, apply the
/// first torque to the plant. With `adaptive` the belief is the joint
/// state-and-final-layer distribution and the filter is the joint UKF;
/// otherwise `setup.choice` picks the EKF or UKF on the fixed model.
///
/// The filter prior is centered on `x0`; `setup` holds its variances.
/// `substeps` subdivides each sampling period for the plant integrator.
pub fn closed_loop(
    plant: &PendulumParams,
    model: &TustinNetModel,
    setup: &FilterSetup,
    mpc_cfg: &MpcConfig,
    x0: &PlantState,
    duration: f64,
    adaptive: bool,
    substeps: usize,
) -> Result<RunLog> {
    mpc_cfg.validate()?;
    setup.noise.validate()?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "duration must be finite and > 0, got {duration}"
        )));
    }
    let ts = model.ts;
    let n_steps = (duration / ts).round() as usize;
    if n_steps == 0 {
        return Err(Error::InvalidParameter(
            "duration shorter than one sampling period".into(),
        ));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(setup.seed);
    let meas_noise = if setup.meas_sigma > 0.0 {
        Some(Normal::new(0.0, setup.meas_sigma).map_err(|e| {
            Error::InvalidParameter(format!("measurement noise sigma: {e}"))
        })?)
    } else {
        None
    };
    let measure = |x: &PlantState, rng: &mut rand_chacha::ChaCha8Rng| -> Vector2<f64> {
        let mut y = x.angles();
        if let Some(n) = &meas_noise {
            y[0] += n.sample(rng);
            y[1] += n.sample(rng);
        }
        y
    };

    // Belief initialization and the time-zero measurement-only update.
    let state0 = initial_state_belief(model, x0, setup.p0_pos, setup.p0_vel)?;
    let mut belief: GaussianBelief = if adaptive {
        joint_belief(model, &state0, setup.p0_param)?
    } else {
        state0
    };
    let mut x = *x0;
    let y0 = measure(&x, &mut rng);
    let (b, _) = position_update(model, &belief, &y0, setup.noise.meas_var)?;
    belief = b;

    let mut steps = Vec::with_capacity(n_steps);
    let mut warm: Option<Vec<Torque>> = None;
    let mut u_prev = Torque::new(0.0, 0.0);

    for k in 0..n_steps {
        let adapted;
        let plan_model: &TustinNetModel = if adaptive {
            adapted = extract_model(model, &belief)?;
            &adapted
        } else {
            model
        };
        let s0 = NetState::new(
            Vector2::new(belief.mean[0], belief.mean[1]),
            Vector2::new(belief.mean[2], belief.mean[3]),
        );
        let sol = solve(plan_model, &s0, mpc_cfg, warm.as_deref(), &u_prev)?;
        let u = sol.torques[0];
        let (estimate, cov_diag) = belief_to_plant(model, &belief)?;
        let state_k = x;

        x = advance(&x, &u, plant, ts, substeps)?;
        let y = measure(&x, &mut rng);
        let (b, innovation) = if adaptive {
            jukf_step(model, &belief, &u, &y, &setup.noise, &setup.ukf)?
        } else {
            match setup.choice {
                FilterChoice::Ekf => ekf_step(model, &belief, &u, &y, &setup.noise)?,
                FilterChoice::Ukf => ukf_step(model, &belief, &u, &y, &setup.noise, &setup.ukf)?,
            }
        };
        belief = b;
        steps.push(RunStep {
            t: k as f64 * ts,
            state: state_k,
            torque: u,
            estimate,
            cov_diag,
            cost: sol.cost,
            iterations: sol.iterations,
            innovation,
        });

        let mut shifted: Vec<Torque> = sol.torques[1..].to_vec();
        if let Some(last) = sol.torques.last() {
            shifted.push(*last);
        }
        warm = Some(shifted);
        u_prev = u;
    }

    Ok(RunLog {
        steps,
        final_state: x,
    })
}
