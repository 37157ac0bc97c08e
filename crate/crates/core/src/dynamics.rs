//! Rigid-body dynamics of a torque-actuated double inverted pendulum and a
//! fixed-step Dormand–Prince (RK45) integrator.
//!
//! Conventions:
//! * `theta1` is the angle of the first beam measured from the **upright**
//!   vertical, `theta2` is the angle of the second beam **relative to the
//!   first**. The upright equilibrium is the origin `(0, 0, 0, 0)`; the
//!   stable hanging equilibrium is `(pi, 0, 0, 0)`.
//! * Both joints are torque-actuated and carry viscous friction acting on
//!   the joint (relative) velocities.
//! * Potential energy is zero at the upright configuration, so
//!   [`total_energy`] is `0` at the origin and negative when hanging.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical parameters of the two-link pendulum.
///
/// Units are SI throughout: masses in kg, lengths in m, inertias in kg m^2
/// (about each link's center of mass), friction in N m s/rad, gravity in
/// m/s^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    /// Mass of the first link.
    pub m1: f64,
    /// Mass of the second link.
    pub m2: f64,
    /// Length of the first link.
    pub l1: f64,
    /// Length of the second link.
    pub l2: f64,
    /// Distance from joint 1 to the first link's center of mass.
    pub lc1: f64,
    /// Distance from joint 2 to the second link's center of mass.
    pub lc2: f64,
    /// Moment of inertia of the first link about its center of mass.
    pub i1: f64,
    /// Moment of inertia of the second link about its center of mass.
    pub i2: f64,
    /// Viscous friction coefficient at joint 1 (acts on `dtheta1`).
    pub c1: f64,
    /// Viscous friction coefficient at joint 2 (acts on `dtheta2`).
    pub c2: f64,
    /// Gravitational acceleration.
    pub g: f64,
}

impl Default for PendulumParams {
    /// Nominal plant: two uniform 0.2 kg, 0.3 m rods (`I = m l^2 / 12`),
    /// centers of mass at mid-length, friction 0.1 N m s/rad per joint.
    fn default() -> Self {
        let (m, l) = (0.2, 0.3);
        Self {
            m1: m,
            m2: m,
            l1: l,
            l2: l,
            lc1: l / 2.0,
            lc2: l / 2.0,
            i1: m * l * l / 12.0,
            i2: m * l * l / 12.0,
            c1: 0.1,
            c2: 0.1,
            g: 9.81,
        }
    }
}

impl PendulumParams {
    /// Returns an error unless all masses, lengths and inertias are strictly
    /// positive, the friction coefficients are non-negative and the centers
    /// of mass lie on their links.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("l1", self.l1),
            ("l2", self.l2),
            ("lc1", self.lc1),
            ("lc2", self.lc2),
            ("i1", self.i1),
            ("i2", self.i2),
            ("g", self.g),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        for (name, v) in [("c1", self.c1), ("c2", self.c2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.lc1 > self.l1 || self.lc2 > self.l2 {
            return Err(Error::InvalidParameter(
                "centers of mass must lie on their links (lc <= l)".into(),
            ));
        }
        Ok(())
    }
}

/// Full state of the plant: `[theta1, dtheta1, theta2, dtheta2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub theta1: f64,
    pub dtheta1: f64,
    pub theta2: f64,
    pub dtheta2: f64,
}

impl PlantState {
    pub const UPRIGHT: Self = Self::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(theta1: f64, dtheta1: f64, theta2: f64, dtheta2: f64) -> Self {
        Self {
            theta1,
            dtheta1,
            theta2,
            dtheta2,
        }
    }

    /// State as a vector in plant order `[theta1, dtheta1, theta2, dtheta2]`.
    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.theta1, self.dtheta1, self.theta2, self.dtheta2)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Joint angles `[theta1, theta2]`.
    pub fn angles(self) -> Vector2<f64> {
        Vector2::new(self.theta1, self.theta2)
    }

    /// Joint velocities `[dtheta1, dtheta2]`.
    pub fn rates(self) -> Vector2<f64> {
        Vector2::new(self.dtheta1, self.dtheta2)
    }

    pub fn is_finite(self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Joint torques `[u1, u2]` in N m.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Torque {
    pub u1: f64,
    pub u2: f64,
}

impl Torque {
    pub const ZERO: Self = Self::new(0.0, 0.0);

    pub const fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u1, self.u2)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    /// Component-wise saturation to `[-u_max, u_max]`.
    pub fn clamp(self, u_max: f64) -> Self {
        Self::new(self.u1.clamp(-u_max, u_max), self.u2.clamp(-u_max, u_max))
    }

    pub fn is_finite(self) -> bool {
        self.u1.is_finite() && self.u2.is_finite()
    }
}

/// Joint-space mass matrix `M(theta2)` (symmetric positive definite).
///
/// Only the relative angle enters because the kinetic energy is invariant
/// under a rigid rotation of the whole mechanism.
pub fn mass_matrix(theta2: f64, p: &PendulumParams) -> Matrix2<f64> {
    let cos2 = theta2.cos();
    let m11 = p.m1 * p.lc1 * p.lc1
        + p.i1
        + p.m2 * (p.l1 * p.l1 + p.lc2 * p.lc2 + 2.0 * p.l1 * p.lc2 * cos2)
        + p.i2;
    let m12 = p.m2 * (p.lc2 * p.lc2 + p.l1 * p.lc2 * cos2) + p.i2;
    let m22 = p.m2 * p.lc2 * p.lc2 + p.i2;
    Matrix2::new(m11, m12, m12, m22)
}

/// Joint accelerations `[ddtheta1, ddtheta2]` from the Euler–Lagrange
/// equations `M(q) qdd + C(q, qd) qd + g(q) = u - c qd`.
///
/// Errors if the state or torque contains non-finite values.
pub fn accelerations(state: &PlantState, u: &Torque, p: &PendulumParams) -> Result<Vector2<f64>> {
    if !state.is_finite() {
        return Err(Error::NonFinite("plant state".into()));
    }
    if !u.is_finite() {
        return Err(Error::NonFinite("torque".into()));
    }
    let (t1, w1, t2, w2) = (state.theta1, state.dtheta1, state.theta2, state.dtheta2);
    let m = mass_matrix(t2, p);
    // Coriolis/centrifugal coupling coefficient.
    let h = p.m2 * p.l1 * p.lc2 * t2.sin();
    // Gravity torques; angles are measured from the upright vertical, so the
    // gravitational torque on each link is destabilizing (+g sin).
    let g1 = p.g * ((p.m1 * p.lc1 + p.m2 * p.l1) * t1.sin() + p.m2 * p.lc2 * (t1 + t2).sin());
    let g2 = p.g * p.m2 * p.lc2 * (t1 + t2).sin();
    let b = Vector2::new(
        u.u1 - p.c1 * w1 + h * w2 * (2.0 * w1 + w2) + g1,
        u.u2 - p.c2 * w2 - h * w1 * w1 + g2,
    );
    // 2x2 solve by the explicit inverse; M is SPD with determinant bounded
    // away from zero for valid parameters.
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if !det.is_finite() || det.abs() < 1e-300 {
        return Err(Error::NonFinite("mass matrix determinant".into()));
    }
    let acc = Vector2::new(
        (m[(1, 1)] * b[0] - m[(0, 1)] * b[1]) / det,
        (m[(0, 0)] * b[1] - m[(1, 0)] * b[0]) / det,
    );
    Ok(acc)
}

/// State derivative `[dtheta1, ddtheta1, dtheta2, ddtheta2]`.
pub fn state_derivative(
    state: &PlantState,
    u: &Torque,
    p: &PendulumParams,
) -> Result<Vector4<f64>> {
    let acc = accelerations(state, u, p)?;
    Ok(Vector4::new(state.dtheta1, acc[0], state.dtheta2, acc[1]))
}

/// Total mechanical energy (kinetic + potential) with the potential chosen to
/// be zero at the upright configuration. With friction and zero torque this
/// is non-increasing; without friction it is conserved.
pub fn total_energy(state: &PlantState, p: &PendulumParams) -> f64 {
    let (t1, w1, t2, w2) = (state.theta1, state.dtheta1, state.theta2, state.dtheta2);
    let m = mass_matrix(t2, p);
    let qd = Vector2::new(w1, w2);
    let kinetic = 0.5 * (qd.transpose() * m * qd)[(0, 0)];
    // Heights of the centers of mass above the pivot, minus their upright
    // values.
    let y1 = p.lc1 * t1.cos();
    let y2 = p.l1 * t1.cos() + p.lc2 * (t1 + t2).cos();
    let potential =
        p.g * (p.m1 * (y1 - p.lc1) + p.m2 * (y2 - (p.l1 + p.lc2)));
    kinetic + potential
}

// Dormand–Prince 5(4) coefficients. `A` is the strictly lower-triangular
// Runge–Kutta matrix, `B5` the 5th-order weights (also the last row of `A`,
// making the scheme FSAL), `B4` the embedded 4th-order weights.
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One fixed-size Dormand–Prince step for an autonomous ODE `x' = f(x)`.
///
/// Returns `(x5, x4)`: the 5th-order solution and the embedded 4th-order
/// solution. Generic over the state dimension so that scalar test problems
/// use the exact same tableau as the pendulum.
pub fn dp45_step<const N: usize, F>(
    f: &mut F,
    x: &SVector<f64, N>,
    dt: f64,
) -> Result<(SVector<f64, N>, SVector<f64, N>)>
where
    F: FnMut(&SVector<f64, N>) -> Result<SVector<f64, N>>,
{
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "integration step must be finite and > 0, got {dt}"
        )));
    }
    let mut k = [SVector::<f64, N>::zeros(); 7];
    k[0] = f(x)?;
    for i in 0..6 {
        let mut stage = *x;
        for (j, kj) in k.iter().enumerate().take(i + 1) {
            let a = DP_A[i][j];
            if a != 0.0 {
                stage += kj * (dt * a);
            }
        }
        k[i + 1] = f(&stage)?;
    }
    let mut x5 = *x;
    let mut x4 = *x;
    for (i, ki) in k.iter().enumerate() {
        if DP_B5[i] != 0.0 {
            x5 += ki * (dt * DP_B5[i]);
        }
        if DP_B4[i] != 0.0 {
            x4 += ki * (dt * DP_B4[i]);
        }
    }
    if x5.iter().any(|v| !v.is_finite()) || x4.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("integrator output".into()));
    }
    Ok((x5, x4))
}

/// Result of one pendulum integration step.
#[derive(Debug, Clone, Copy)]
pub struct Rk45Step {
    /// 5th-order solution (the one to propagate).
    pub next: PlantState,
    /// Embedded 4th-order solution, exposed for error estimation.
    pub embedded: PlantState,
}

impl Rk45Step {
    /// Infinity-norm difference between the 5th- and 4th-order solutions.
    pub fn error_estimate(&self) -> f64 {
        (self.next.to_vector() - self.embedded.to_vector())
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// One fixed-step RK45 step of the pendulum under a zero-order-hold torque.
pub fn rk45_step(
    state: &PlantState,
    u: &Torque,
    p: &PendulumParams,
    dt: f64,
) -> Result<Rk45Step> {
    let mut f = |x: &Vector4<f64>| state_derivative(&PlantState::from_vector(x), u, p);
    let (x5, x4) = dp45_step(&mut f, &state.to_vector(), dt)?;
    Ok(Rk45Step {
        next: PlantState::from_vector(&x5),
        embedded: PlantState::from_vector(&x4),
    })
}

/// Advance one sampling period `ts` under a zero-order-hold torque, taking
/// `substeps` equal RK45 steps.
pub fn advance(
    state: &PlantState,
    u: &Torque,
    p: &PendulumParams,
    ts: f64,
    substeps: usize,
) -> Result<PlantState> {
    if substeps == 0 {
        return Err(Error::InvalidParameter("substeps must be >= 1".into()));
    }
    let h = ts / substeps as f64;
    let mut x = *state;
    for _ in 0..substeps {
        x = rk45_step(&x, u, p, h)?.next;
    }
    Ok(x)
}

/// Simulate a torque sequence applied with zero-order hold at period `ts`.
///
/// Returns `torques.len() + 1` states including the initial one.
pub fn simulate(
    initial: &PlantState,
    torques: &[Torque],
    p: &PendulumParams,
    ts: f64,
    substeps: usize,
) -> Result<Vec<PlantState>> {
    p.validate()?;
    let mut states = Vec::with_capacity(torques.len() + 1);
    states.push(*initial);
    let mut x = *initial;
    for u in torques {
        x = advance(&x, u, p, ts, substeps)?;
        states.push(x);
    }
    Ok(states)
}

/// Fixed CSV header for trajectory files.
pub const TRAJECTORY_CSV_HEADER: &str = "t,theta1,dtheta1,theta2,dtheta2,u1,u2";

/// Serialize a trajectory to CSV. One row per sample; the final row (which
/// has no applied torque) records zero torque. Time is written with six
/// decimal places; all other columns round-trip exactly via shortest-form
/// floating point formatting.
pub fn trajectory_to_csv(states: &[PlantState], torques: &[Torque], ts: f64) -> Result<String> {
    if states.len() != torques.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "expected states.len() == torques.len() + 1, got {} and {}",
            states.len(),
            torques.len()
        )));
    }
    let mut out = String::with_capacity(64 * states.len());
    out.push_str(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for (k, s) in states.iter().enumerate() {
        let u = torques.get(k).copied().unwrap_or(Torque::ZERO);
        writeln!(
            out,
            "{:.6},{},{},{},{},{},{}",
            k as f64 * ts,
            s.theta1,
            s.dtheta1,
            s.theta2,
            s.dtheta2,
            u.u1,
            u.u2
        )
        .expect("writing to String cannot fail");
    }
    Ok(out)
}

/// Write a trajectory CSV to a file.
pub fn write_trajectory_csv(
    path: &Path,
    states: &[PlantState],
    torques: &[Torque],
    ts: f64,
) -> Result<()> {
    let csv = trajectory_to_csv(states, torques, ts)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(csv.as_bytes())?;
    Ok(())
}

/// Parse a trajectory CSV produced by [`trajectory_to_csv`].
///
/// Returns `(states, torques, ts)` with `torques.len() == states.len() - 1`
/// (the zero torque on the final row is dropped). `ts` is inferred from the
/// first two timestamps; a single-row file yields `ts = 0`.
pub fn parse_trajectory_csv(text: &str) -> Result<(Vec<PlantState>, Vec<Torque>, f64)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
    if header.trim() != TRAJECTORY_CSV_HEADER {
        return Err(Error::Parse(format!(
            "unexpected trajectory header: {header:?}"
        )));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut torques = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse(format!(
                "row {}: expected 7 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let mut vals = [0.0f64; 7];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.trim().parse::<f64>().map_err(|e| {
                Error::Parse(format!("row {}: field {}: {e}", lineno + 2, i + 1))
            })?;
        }
        times.push(vals[0]);
        states.push(PlantState::new(vals[1], vals[2], vals[3], vals[4]));
        torques.push(Torque::new(vals[5], vals[6]));
    }
    if states.is_empty() {
        return Err(Error::Parse("trajectory file has no data rows".into()));
    }
    torques.pop(); // final row carries no applied torque
    let ts = if times.len() >= 2 { times[1] - times[0] } else { 0.0 };
    Ok((states, torques, ts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector1;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const P: PendulumParams = PendulumParams {
        m1: 0.2,
        m2: 0.2,
        l1: 0.3,
        l2: 0.3,
        lc1: 0.15,
        lc2: 0.15,
        i1: 0.2 * 0.3 * 0.3 / 12.0,
        i2: 0.2 * 0.3 * 0.3 / 12.0,
        c1: 0.1,
        c2: 0.1,
        g: 9.81,
    };

    #[test]
    fn default_params_match_nominal_plant() {
        assert_eq!(PendulumParams::default(), P);
        P.validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_parameters() {
        let mut p = P;
        p.m1 = 0.0;
        assert!(p.validate().is_err());
        let mut p = P;
        p.c1 = -0.1;
        assert!(p.validate().is_err());
        let mut p = P;
        p.lc1 = 0.4;
        assert!(p.validate().is_err());
        let mut p = P;
        p.i2 = f64::NAN;
        assert!(p.validate().is_err());
    }

    /// All four configurations with both links vertical are equilibria: the
    /// acceleration is exactly zero there (sin of 0/pi enters every gravity
    /// term).
    #[test]
    fn vertical_configurations_are_equilibria() {
        for t1 in [0.0, PI] {
            for t2 in [0.0, PI] {
                let s = PlantState::new(t1, 0.0, t2, 0.0);
                let acc = accelerations(&s, &Torque::ZERO, &P).unwrap();
                // sin(pi) is ~1.2e-16 rather than 0 in f64, so allow the
                // corresponding scaled residual rather than exact zero.
                assert!(acc.norm() < 1e-13, "acc at ({t1},{t2}) = {acc:?}");
            }
        }
    }

    /// Accelerations at two interior states, checked against values computed
    /// symbolically (independent derivation of the Euler–Lagrange equations
    /// from the link position vectors).
    #[test]
    fn accelerations_match_symbolic_reference() {
        let s = PlantState::new(0.1, 0.0, -0.1, 0.0);
        let acc = accelerations(&s, &Torque::ZERO, &P).unwrap();
        assert_relative_eq!(acc[0], 8.288354334506166, max_relative = 1e-12);
        assert_relative_eq!(acc[1], -20.65877496370689, max_relative = 1e-12);

        let s = PlantState::new(0.4, 1.3, -0.7, -2.1);
        let u = Torque::new(0.8, -0.3);
        let acc = accelerations(&s, &u, &P).unwrap();
        assert_relative_eq!(acc[0], 80.22856475850492, max_relative = 1e-12);
        assert_relative_eq!(acc[1], -200.13402548698127, max_relative = 1e-12);
    }

    #[test]
    fn accelerations_reject_non_finite_input() {
        let s = PlantState::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(accelerations(&s, &Torque::ZERO, &P).is_err());
        let s = PlantState::UPRIGHT;
        assert!(accelerations(&s, &Torque::new(f64::INFINITY, 0.0), &P).is_err());
    }

    #[test]
    fn mass_matrix_is_symmetric_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t2: f64 = rng.random_range(-10.0..10.0);
            let m = mass_matrix(t2, &P);
            assert_eq!(m[(0, 1)], m[(1, 0)]);
            // 2x2 SPD <=> positive diagonal + positive determinant.
            assert!(m[(0, 0)] > 0.0);
            assert!(m.determinant() > 0.0);
        }
    }

    /// Energy reference values: zero at upright rest, the exact drop
    /// `-2 g (m1 lc1 + m2 (l1 + lc2))` when hanging, and an independently
    /// computed value at a general state.
    #[test]
    fn energy_reference_values() {
        assert_eq!(total_energy(&PlantState::UPRIGHT, &P), 0.0);

        let hanging = PlantState::new(PI, 0.0, 0.0, 0.0);
        let expected = -2.0 * P.g * (P.m1 * P.lc1 + P.m2 * (P.l1 + P.lc2));
        assert_relative_eq!(total_energy(&hanging, &P), expected, max_relative = 1e-15);
        assert_relative_eq!(total_energy(&hanging, &P), -2.3544, max_relative = 1e-12);

        let s = PlantState::new(0.4, 1.3, -0.7, -2.1);
        assert_relative_eq!(
            total_energy(&s, &P),
            -0.0677986425181697,
            max_relative = 1e-12
        );
    }

    /// The tableau reproduces the exact exponential on a linear test problem
    /// to machine precision in one step.
    #[test]
    fn dp45_linear_problem_one_step() {
        let mut f = |x: &Vector1<f64>| Ok(-x);
        let x0 = Vector1::new(1.0);
        let (x5, x4) = dp45_step(&mut f, &x0, 0.01).unwrap();
        let exact = (-0.01f64).exp();
        assert_relative_eq!(x5[0], exact, max_relative = 1e-12);
        // The embedded solution is one order lower but still very accurate.
        assert_relative_eq!(x4[0], exact, max_relative = 1e-9);
        assert!(x5[0] != x4[0], "embedded solution must differ");
    }

    #[test]
    fn dp45_rejects_bad_step() {
        let mut f = |x: &Vector1<f64>| Ok(-x);
        assert!(dp45_step(&mut f, &Vector1::new(1.0), 0.0).is_err());
        assert!(dp45_step(&mut f, &Vector1::new(1.0), f64::NAN).is_err());
    }

    /// Without friction and torque, energy is conserved to ~1e-6 J over 10 s
    /// of swinging at dt = 1e-3.
    #[test]
    fn energy_conservation_frictionless() {
        let mut p = P;
        p.c1 = 0.0;
        p.c2 = 0.0;
        let mut s = PlantState::new(0.3, 0.0, 0.2, 0.0);
        let e0 = total_energy(&s, &p);
        let dt = 1e-3;
        let mut max_drift = 0.0f64;
        for _ in 0..10_000 {
            s = rk45_step(&s, &Torque::ZERO, &p, dt).unwrap().next;
            max_drift = max_drift.max((total_energy(&s, &p) - e0).abs());
        }
        assert!(max_drift < 1e-6, "energy drift {max_drift}");
    }

    /// With friction and zero torque, energy is non-increasing at sampling
    /// instants (passivity).
    #[test]
    fn passivity_with_friction() {
        let mut s = PlantState::new(2.0, 0.0, 1.0, 0.0);
        let mut prev = total_energy(&s, &P);
        for _ in 0..5000 {
            s = rk45_step(&s, &Torque::ZERO, &P, 1e-3).unwrap().next;
            let e = total_energy(&s, &P);
            // Integrator error can raise energy by a few ulps; allow that.
            assert!(e <= prev + 1e-12, "energy increased: {prev} -> {e}");
            prev = e;
        }
    }

    /// Global error of the 5th-order solution scales like dt^5: halving dt
    /// divides the error by ~32. Uses a bounded frictionless oscillation
    /// about the hanging equilibrium over 1 s and a reference trajectory at
    /// dt/1000 per grid.
    #[test]
    fn fifth_order_convergence() {
        let mut p = P;
        p.c1 = 0.0;
        p.c2 = 0.0;
        let x0 = PlantState::new(PI - 0.3, 0.0, 0.2, 0.0);
        let horizon = 1.0;
        let run = |dt: f64| -> Vector4<f64> {
            let n = (horizon / dt).round() as usize;
            let mut s = x0;
            for _ in 0..n {
                s = rk45_step(&s, &Torque::ZERO, &p, dt).unwrap().next;
            }
            s.to_vector()
        };
        // Covers slightly over a decade of step sizes.
        let dts = [0.04, 0.02, 0.01, 0.005, 0.0025];
        let mut errors = Vec::new();
        for &dt in &dts {
            let reference = run(dt / 1000.0);
            let err = (run(dt) - reference).norm();
            errors.push(err);
        }
        for w in errors.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(
                (4.2..6.5).contains(&order),
                "observed order {order} (errors {errors:?})"
            );
        }
    }

    /// Fixed-step integration composes exactly: one 10-step simulate equals
    /// two chained 5-step simulates bit for bit.
    #[test]
    fn simulate_composes_deterministically() {
        let torques: Vec<Torque> = (0..10).map(|k| Torque::new(0.1 * k as f64, -0.05)).collect();
        let x0 = PlantState::new(0.5, -0.2, 0.3, 0.1);
        let full = simulate(&x0, &torques, &P, 0.01, 10).unwrap();
        let first = simulate(&x0, &torques[..5], &P, 0.01, 10).unwrap();
        let second = simulate(first.last().unwrap(), &torques[5..], &P, 0.01, 10).unwrap();
        assert_eq!(full[5], first[5]);
        assert_eq!(full.last().unwrap(), second.last().unwrap());
    }

    /// Starting at the stable hanging equilibrium with no torque the state
    /// never moves (the derivative is exactly zero up to sin(pi) roundoff).
    #[test]
    fn hanging_equilibrium_is_stationary() {
        let hanging = PlantState::new(PI, 0.0, 0.0, 0.0);
        let states = simulate(&hanging, &vec![Torque::ZERO; 200], &P, 0.01, 10).unwrap();
        for s in &states {
            assert!((s.theta1 - PI).abs() < 1e-9);
            assert!(s.theta2.abs() < 1e-9);
            assert!(s.dtheta1.abs() < 1e-9);
            assert!(s.dtheta2.abs() < 1e-9);
        }
    }

    /// An unactuated fall from near-upright settles at the hanging
    /// equilibrium (theta1 = pi, theta2 = 0) thanks to joint friction.
    #[test]
    fn free_fall_settles_hanging() {
        let x0 = PlantState::new(0.3, 0.0, 0.2, 0.0);
        let n = 1200; // 12 s at ts = 0.01
        let states = simulate(&x0, &vec![Torque::ZERO; n], &P, 0.01, 10).unwrap();
        let last = states.last().unwrap();
        // Wrap theta1 into (-pi, pi] around pi before comparing.
        let wrap = |a: f64| (a + PI).rem_euclid(2.0 * PI) - PI;
        assert!(wrap(last.theta1 - PI).abs() < 0.05, "theta1 = {}", last.theta1);
        assert!(wrap(last.theta2).abs() < 0.05, "theta2 = {}", last.theta2);
        assert!(last.dtheta1.abs() < 0.05);
        assert!(last.dtheta2.abs() < 0.05);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let torques: Vec<Torque> = (0..7).map(|k| Torque::new(k as f64 * 0.3 - 1.0, 0.25)).collect();
        let x0 = PlantState::new(0.1, 0.0, -0.1, 0.0);
        let states = simulate(&x0, &torques, &P, 0.01, 10).unwrap();
        let csv = trajectory_to_csv(&states, &torques, 0.01).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRAJECTORY_CSV_HEADER);
        let first = lines.next().unwrap();
        assert!(first.starts_with("0.000000,"), "{first}");
        // Final row records zero torque.
        let last = csv.lines().last().unwrap();
        assert!(last.ends_with(",0,0"), "{last}");

        let (states2, torques2, ts) = parse_trajectory_csv(&csv).unwrap();
        assert_eq!(states2.len(), states.len());
        assert_eq!(torques2.len(), torques.len());
        assert_relative_eq!(ts, 0.01, max_relative = 1e-9);
        for (a, b) in states.iter().zip(&states2) {
            // Shortest-form formatting round-trips f64 exactly.
            assert_eq!(a, b);
        }
        for (a, b) in torques.iter().zip(&torques2) {
            assert_eq!(a, b);
        }

        // Determinism: same inputs, same bytes.
        assert_eq!(csv, trajectory_to_csv(&states, &torques, 0.01).unwrap());
    }

    #[test]
    fn parse_rejects_malformed_csv() {
        assert!(parse_trajectory_csv("").is_err());
        assert!(parse_trajectory_csv("a,b\n1,2\n").is_err());
        let bad = format!("{TRAJECTORY_CSV_HEADER}\n0.0,1.0,2.0\n");
        assert!(parse_trajectory_csv(&bad).is_err());
        let bad = format!("{TRAJECTORY_CSV_HEADER}\n0.0,x,0,0,0,0,0\n");
        assert!(parse_trajectory_csv(&bad).is_err());
    }

    #[test]
    fn torque_clamp() {
        assert_eq!(Torque::new(7.0, -9.0).clamp(5.0), Torque::new(5.0, -5.0));
        assert_eq!(Torque::new(1.0, -2.0).clamp(5.0), Torque::new(1.0, -2.0));
    }
}
