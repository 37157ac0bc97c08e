//! A recurrent neural state-space model of the pendulum.
//!
//! The state is a normalized `(pos, vel)` pair per joint. One step first
//! computes the next velocity with a learned forward-Euler increment and then
//! integrates the position with the trapezoidal (Tustin) rule using both the
//! current and the *new* velocity:
//!
//! ```text
//! vel' = vel + MLP(features(pos, vel, u))
//! pos' = pos + Ts * Kv * (vel' + vel) / 2
//! ```
//!
//! `Kv = velocity_scale / angle_scale` converts normalized velocities into
//! normalized-position rates. The sampling period of the velocity update is
//! absorbed into the learned output layer. Angles enter the network only
//! through `sin`/`cos` features, making the model exactly 2*pi-periodic in
//! the physical angles.
//!
//! Everything here is deterministic and the analytic derivatives (one-step
//! Jacobians and reverse-mode vector-Jacobian products) are exact, which the
//! tests check against central finite differences.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{PlantState, Torque};
use crate::error::{Error, Result};

/// One affine layer `z = W h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weight: DMatrix::zeros(rows, cols),
            bias: DVector::zeros(rows),
        }
    }
}

/// A multilayer perceptron with `tanh` hidden activations and a linear
/// output layer. Also used as the container for parameter-shaped gradients
/// and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Forward-pass cache for one evaluation: the input and every hidden
/// activation, as needed by [`MlpParams::vjp`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: DVector<f64>,
    /// Post-`tanh` activations of each hidden layer, in forward order.
    pub hidden: Vec<DVector<f64>>,
}

impl MlpParams {
    /// Layer widths `[input, hidden..., output]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weight.ncols()];
        s.extend(self.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidParameter(format!(
                "MLP needs at least [input, output] non-zero sizes, got {sizes:?}"
            )));
        }
        Ok(())
    }

    /// All-zero parameters with the given layer widths.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer::zeros(w[1], w[0]))
            .collect();
        Ok(Self { layers })
    }

    /// Zero parameters with the same shape as `other`.
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    /// Xavier-uniform initialization: weights drawn from
    /// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`, biases
    /// zero. Fully determined by `seed`.
    pub fn xavier_init(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut layer = Layer::zeros(fan_out, fan_in);
            // Row-major order so the draw sequence matches the flat layout.
            for r in 0..fan_out {
                for c in 0..fan_in {
                    layer.weight[(r, c)] = rng.random_range(-limit..limit);
                }
            }
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flatten to a single vector: per layer, the weight matrix in row-major
    /// order followed by the bias.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in 0..l.weight.nrows() {
                for c in 0..l.weight.ncols() {
                    out.push(l.weight[(r, c)]);
                }
            }
            out.extend(l.bias.iter().copied());
        }
        DVector::from_vec(out)
    }

    /// Inverse of [`to_flat`] for the given layer widths.
    pub fn from_flat(sizes: &[usize], flat: &DVector<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(sizes)?;
        if flat.len() != mlp.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "flat parameter vector has {} entries, shape {:?} needs {}",
                flat.len(),
                sizes,
                mlp.param_count()
            )));
        }
        let mut k = 0;
        for l in &mut mlp.layers {
            for r in 0..l.weight.nrows() {
                for c in 0..l.weight.ncols() {
                    l.weight[(r, c)] = flat[k];
                    k += 1;
                }
            }
            for r in 0..l.bias.len() {
                l.bias[r] = flat[k];
                k += 1;
            }
        }
        Ok(mlp)
    }

    /// `self += scale * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.zip_apply(&b.weight, |x, y| *x += scale * y);
            a.bias.axpy(scale, &b.bias, 1.0);
        }
    }

    /// Multiply every parameter by `scale`.
    pub fn scale(&mut self, scale: f64) {
        for l in &mut self.layers {
            l.weight *= scale;
            l.bias *= scale;
        }
    }

    /// Reset every parameter to zero (keeps the shape).
    pub fn set_zero(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// Largest absolute parameter value (gradient diagnostics).
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn forward(&self, input: &DVector<f64>) -> DVector<f64> {
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.bias.clone();
            z.gemv(1.0, &l.weight, &h, 1.0);
            h = if i < last { z.map(f64::tanh) } else { z };
        }
        h
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_cached(&self, input: &DVector<f64>) -> (DVector<f64>, MlpCache) {
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.bias.clone();
            z.gemv(1.0, &l.weight, &h, 1.0);
            if i < last {
                h = z.map(f64::tanh);
                hidden.push(h.clone());
            } else {
                h = z;
            }
        }
        (
            h,
            MlpCache {
                input: input.clone(),
                hidden,
            },
        )
    }

    /// Reverse-mode vector-Jacobian product. Given the cotangent of the
    /// output, accumulates parameter gradients into `grad` (if provided) and
    /// returns the cotangent of the input.
    pub fn vjp(
        &self,
        cache: &MlpCache,
        cot_out: &DVector<f64>,
        mut grad: Option<&mut MlpParams>,
    ) -> DVector<f64> {
        let mut delta = cot_out.clone();
        for i in (0..self.layers.len()).rev() {
            let layer_in = if i == 0 {
                &cache.input
            } else {
                &cache.hidden[i - 1]
            };
            if let Some(g) = grad.as_deref_mut() {
                g.layers[i].weight.ger(1.0, &delta, layer_in, 1.0);
                g.layers[i].bias += &delta;
            }
            let mut e = DVector::zeros(layer_in.len());
            e.gemv_tr(1.0, &self.layers[i].weight, &delta, 0.0);
            if i > 0 {
                // d tanh(z) = (1 - h^2) dz with h = tanh(z).
                let h = &cache.hidden[i - 1];
                delta = e.zip_map(h, |ei, hi| ei * (1.0 - hi * hi));
            } else {
                return e;
            }
        }
        unreachable!("loop always returns at i == 0")
    }

    /// Exact Jacobian of the output with respect to the input, from a cached
    /// forward pass.
    pub fn input_jacobian(&self, cache: &MlpCache) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut j = self.layers[last].weight.clone();
        for i in (0..last).rev() {
            let h = &cache.hidden[i];
            // J <- J * diag(1 - h^2) * W_i
            for (mut col, hv) in j.column_iter_mut().zip(h.iter()) {
                col *= 1.0 - hv * hv;
            }
            j = &j * &self.layers[i].weight;
        }
        j
    }
}

/// Normalized model state: `pos = theta / angle_scale`,
/// `vel = dtheta / velocity_scale`, one entry per joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetState {
    pub pos: Vector2<f64>,
    pub vel: Vector2<f64>,
}

impl NetState {
    pub fn new(pos: Vector2<f64>, vel: Vector2<f64>) -> Self {
        Self { pos, vel }
    }

    /// Vector form `[p1, p2, v1, v2]` (model order: positions first).
    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.pos[0], self.pos[1], self.vel[0], self.vel[1])
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(Vector2::new(v[0], v[1]), Vector2::new(v[2], v[3]))
    }

    pub fn is_finite(self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Number of input features: `sin`/`cos` of both scaled angles, both
/// normalized velocities, both normalized torques.
pub const N_FEATURES: usize = 8;
/// Number of network outputs: one velocity increment per joint.
pub const N_OUTPUTS: usize = 2;

/// The recurrent pendulum model: an MLP velocity increment plus the
/// trapezoidal position update, together with the normalization constants
/// that tie the model to physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct TustinNetModel {
    pub mlp: MlpParams,
    /// Sampling period of the discrete model (s).
    pub ts: f64,
    /// `velocity_scale / angle_scale`; stored explicitly and checked for
    /// consistency when loading checkpoints.
    pub kv: f64,
    /// Angles are divided by this before entering the model (rad).
    pub angle_scale: f64,
    /// Angular rates are divided by this (rad/s).
    pub velocity_scale: f64,
    /// Torques are divided by this (N m).
    pub torque_scale: f64,
}

/// Cache of one [`TustinNetModel::step_cached`] call.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub mlp: MlpCache,
}

/// Exact Jacobians of the one-step map, in model order `[p1, p2, v1, v2]`.
#[derive(Debug, Clone)]
pub struct StepJacobians {
    /// d(next state) / d(state), 4x4.
    pub state: Matrix4<f64>,
    /// d(next state) / d(torque), 4x2.
    pub torque: Matrix4x2<f64>,
}

impl TustinNetModel {
    pub fn new(
        mlp: MlpParams,
        ts: f64,
        angle_scale: f64,
        velocity_scale: f64,
        torque_scale: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("ts", ts),
            ("angle_scale", angle_scale),
            ("velocity_scale", velocity_scale),
            ("torque_scale", torque_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        let sizes = mlp.sizes();
        if sizes[0] != N_FEATURES || *sizes.last().unwrap() != N_OUTPUTS {
            return Err(Error::InvalidParameter(format!(
                "pendulum model needs an {N_FEATURES}-input, {N_OUTPUTS}-output MLP, got {sizes:?}"
            )));
        }
        Ok(Self {
            mlp,
            ts,
            kv: velocity_scale / angle_scale,
            angle_scale,
            velocity_scale,
            torque_scale,
        })
    }

    /// The standard pendulum model: widths `[8, 100, 100, 2]`, angle scale
    /// `pi`, velocity scale `2*pi`, Xavier-initialized from `seed`.
    pub fn pendulum_default(ts: f64, torque_scale: f64, seed: u64) -> Result<Self> {
        let mlp = MlpParams::xavier_init(&[N_FEATURES, 100, 100, N_OUTPUTS], seed)?;
        Self::new(
            mlp,
            ts,
            std::f64::consts::PI,
            2.0 * std::f64::consts::PI,
            torque_scale,
        )
    }

    /// Half the normalized-position increment per unit of summed velocity:
    /// `ts * kv / 2`.
    pub fn half_gain(&self) -> f64 {
        self.ts * self.kv / 2.0
    }

    /// Convert a physical plant state to normalized model coordinates.
    pub fn normalize(&self, s: &PlantState) -> NetState {
        NetState::new(
            s.angles() / self.angle_scale,
            s.rates() / self.velocity_scale,
        )
    }

    /// Convert normalized model coordinates back to a physical plant state.
    pub fn denormalize(&self, s: &NetState) -> PlantState {
        PlantState::new(
            s.pos[0] * self.angle_scale,
            s.vel[0] * self.velocity_scale,
            s.pos[1] * self.angle_scale,
            s.vel[1] * self.velocity_scale,
        )
    }

    /// Input features `[sin(a p1), cos(a p1), sin(a p2), cos(a p2), v1, v2,
    /// u1/us, u2/us]` where `a` is the angle scale. Angles only enter through
    /// sin/cos, so the model is exactly periodic in the physical angles.
    pub fn features(&self, s: &NetState, u: &Torque) -> DVector<f64> {
        let a = self.angle_scale;
        DVector::from_vec(vec![
            (a * s.pos[0]).sin(),
            (a * s.pos[0]).cos(),
            (a * s.pos[1]).sin(),
            (a * s.pos[1]).cos(),
            s.vel[0],
            s.vel[1],
            u.u1 / self.torque_scale,
            u.u2 / self.torque_scale,
        ])
    }

    /// One model step: Euler velocity update, then trapezoidal position
    /// update using the *new* velocity.
    pub fn step(&self, s: &NetState, u: &Torque) -> NetState {
        let delta = self.mlp.forward(&self.features(s, u));
        self.apply_update(s, &delta)
    }

    /// [`step`](Self::step) that also returns the cache for
    /// [`step_vjp`](Self::step_vjp) / [`step_jacobians`](Self::step_jacobians).
    pub fn step_cached(&self, s: &NetState, u: &Torque) -> (NetState, StepCache) {
        let (delta, mlp) = self.mlp.forward_cached(&self.features(s, u));
        (self.apply_update(s, &delta), StepCache { mlp })
    }

    fn apply_update(&self, s: &NetState, delta: &DVector<f64>) -> NetState {
        let vel = s.vel + Vector2::new(delta[0], delta[1]);
        let pos = s.pos + (vel + s.vel) * self.half_gain();
        NetState::new(pos, vel)
    }

    /// Step in vector form (model order), for the filters.
    pub fn step_vec(&self, x: &Vector4<f64>, u: &Torque) -> Vector4<f64> {
        self.step(&NetState::from_vector(x), u).to_vector()
    }

    /// Open-loop rollout; returns `torques.len() + 1` states including `s0`.
    pub fn rollout(&self, s0: &NetState, torques: &[Torque]) -> Vec<NetState> {
        let mut out = Vec::with_capacity(torques.len() + 1);
        out.push(*s0);
        let mut s = *s0;
        for u in torques {
            s = self.step(&s, u);
            out.push(s);
        }
        out
    }

    /// Initial model state from two consecutive angle measurements:
    /// the position is `y1` normalized and the velocity is the backward
    /// difference `(y1 - y0) / ts`, normalized.
    pub fn init_state(&self, y0: &Vector2<f64>, y1: &Vector2<f64>, ts: f64) -> Result<NetState> {
        if !(ts.is_finite() && ts > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "init_state needs ts > 0, got {ts}"
            )));
        }
        Ok(NetState::new(
            y1 / self.angle_scale,
            (y1 - y0) / (ts * self.velocity_scale),
        ))
    }

    /// Reverse-mode step derivative. `cot_pos`/`cot_vel` are the cotangents
    /// of the *next* state; returns the cotangents of the previous state and
    /// of the torque, accumulating MLP parameter gradients into `grad` when
    /// provided.
    pub fn step_vjp(
        &self,
        cache: &StepCache,
        cot_pos: &Vector2<f64>,
        cot_vel: &Vector2<f64>,
        grad: Option<&mut MlpParams>,
    ) -> StepCotangents {
        let lam = self.half_gain();
        // pos' = pos + lam * (2 vel + delta); vel' = vel + delta.
        let cot_delta = DVector::from_vec(vec![
            cot_vel[0] + lam * cot_pos[0],
            cot_vel[1] + lam * cot_pos[1],
        ]);
        let cot_phi = self.mlp.vjp(&cache.mlp, &cot_delta, grad);
        let phi = &cache.mlp.input;
        let a = self.angle_scale;
        // Features: phi0 = sin(a p1), phi1 = cos(a p1), phi2 = sin(a p2),
        // phi3 = cos(a p2), phi4 = v1, phi5 = v2, phi6 = u1/us, phi7 = u2/us.
        let cot_pos_prev = Vector2::new(
            cot_pos[0] + a * (phi[1] * cot_phi[0] - phi[0] * cot_phi[1]),
            cot_pos[1] + a * (phi[3] * cot_phi[2] - phi[2] * cot_phi[3]),
        );
        let cot_vel_prev = Vector2::new(
            cot_vel[0] + 2.0 * lam * cot_pos[0] + cot_phi[4],
            cot_vel[1] + 2.0 * lam * cot_pos[1] + cot_phi[5],
        );
        let cot_torque = Vector2::new(
            cot_phi[6] / self.torque_scale,
            cot_phi[7] / self.torque_scale,
        );
        StepCotangents {
            pos: cot_pos_prev,
            vel: cot_vel_prev,
            torque: cot_torque,
        }
    }

    /// Exact one-step Jacobians with respect to the state and the torque.
    pub fn step_jacobians(&self, s: &NetState, u: &Torque) -> StepJacobians {
        let (_, cache) = self.step_cached(s, u);
        let jphi = self.mlp.input_jacobian(&cache.mlp); // 2x8
        let phi = &cache.mlp.input;
        let a = self.angle_scale;
        // d delta / d pos via the trig features.
        let mut dp = nalgebra::Matrix2::<f64>::zeros();
        for r in 0..2 {
            dp[(r, 0)] = a * (jphi[(r, 0)] * phi[1] - jphi[(r, 1)] * phi[0]);
            dp[(r, 1)] = a * (jphi[(r, 2)] * phi[3] - jphi[(r, 3)] * phi[2]);
        }
        let dv = nalgebra::Matrix2::<f64>::new(
            jphi[(0, 4)],
            jphi[(0, 5)],
            jphi[(1, 4)],
            jphi[(1, 5)],
        );
        let du = nalgebra::Matrix2::<f64>::new(
            jphi[(0, 6)],
            jphi[(0, 7)],
            jphi[(1, 6)],
            jphi[(1, 7)],
        ) / self.torque_scale;
        let lam = self.half_gain();
        let eye = nalgebra::Matrix2::<f64>::identity();
        let mut state = Matrix4::<f64>::zeros();
        state.fixed_view_mut::<2, 2>(0, 0).copy_from(&(eye + dp * lam));
        state
            .fixed_view_mut::<2, 2>(0, 2)
            .copy_from(&((eye * 2.0 + dv) * lam));
        state.fixed_view_mut::<2, 2>(2, 0).copy_from(&dp);
        state.fixed_view_mut::<2, 2>(2, 2).copy_from(&(eye + dv));
        let mut torque = Matrix4x2::<f64>::zeros();
        torque.fixed_view_mut::<2, 2>(0, 0).copy_from(&(du * lam));
        torque.fixed_view_mut::<2, 2>(2, 0).copy_from(&du);
        StepJacobians { state, torque }
    }

    /// Number of parameters in the final linear layer.
    pub fn last_layer_len(&self) -> usize {
        let l = self.mlp.layers.last().unwrap();
        l.weight.len() + l.bias.len()
    }

    /// Final-layer parameters as a flat vector (weight row-major, then bias).
    pub fn last_layer_params(&self) -> DVector<f64> {
        let l = self.mlp.layers.last().unwrap();
        let mut out = Vec::with_capacity(l.weight.len() + l.bias.len());
        for r in 0..l.weight.nrows() {
            for c in 0..l.weight.ncols() {
                out.push(l.weight[(r, c)]);
            }
        }
        out.extend(l.bias.iter().copied());
        DVector::from_vec(out)
    }

    /// Overwrite the final linear layer from a flat vector.
    pub fn set_last_layer(&mut self, psi: &DVector<f64>) -> Result<()> {
        let l = self.mlp.layers.last_mut().unwrap();
        if psi.len() != l.weight.len() + l.bias.len() {
            return Err(Error::DimensionMismatch(format!(
                "final layer has {} parameters, got {}",
                l.weight.len() + l.bias.len(),
                psi.len()
            )));
        }
        let mut k = 0;
        for r in 0..l.weight.nrows() {
            for c in 0..l.weight.ncols() {
                l.weight[(r, c)] = psi[k];
                k += 1;
            }
        }
        for r in 0..l.bias.len() {
            l.bias[r] = psi[k];
            k += 1;
        }
        Ok(())
    }

    /// Exact Jacobian of the one-step map with respect to the final linear
    /// layer's parameters (4 x last_layer_len, model order rows).
    pub fn last_layer_jacobian(&self, s: &NetState, u: &Torque) -> DMatrix<f64> {
        let (_, cache) = self.step_cached(s, u);
        let h = cache
            .mlp
            .hidden
            .last()
            .expect("pendulum MLP always has a hidden layer");
        let n_h = h.len();
        let p = self.last_layer_len();
        let lam = self.half_gain();
        // delta_i depends on W[i, :] (gradient h) and b[i] (gradient 1).
        let mut j = DMatrix::zeros(4, p);
        for i in 0..N_OUTPUTS {
            for c in 0..n_h {
                let col = i * n_h + c;
                j[(i, col)] = lam * h[c]; // pos_i row
                j[(2 + i, col)] = h[c]; // vel_i row
            }
            let bias_col = N_OUTPUTS * n_h + i;
            j[(i, bias_col)] = lam;
            j[(2 + i, bias_col)] = 1.0;
        }
        j
    }

    // --- checkpoint serialization ---

    const MAGIC: &'static [u8; 4] = b"TNCK";
    const VERSION: u32 = 1;

    /// Serialize to the versioned binary checkpoint format: magic, format
    /// version, the five scale constants, then each layer's dimensions and
    /// parameters as little-endian f64 (weights row-major, then bias).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        for v in [
            self.ts,
            self.kv,
            self.angle_scale,
            self.velocity_scale,
            self.torque_scale,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.mlp.layers.len() as u32).to_le_bytes());
        for l in &self.mlp.layers {
            out.extend_from_slice(&(l.weight.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weight.ncols() as u32).to_le_bytes());
            for r in 0..l.weight.nrows() {
                for c in 0..l.weight.ncols() {
                    out.extend_from_slice(&l.weight[(r, c)].to_le_bytes());
                }
            }
            for b in l.bias.iter() {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    /// Parse a checkpoint, validating magic, version, scale consistency and
    /// layer-dimension chaining.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let magic = cur.take(4)?;
        if magic != Self::MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {:?}",
                Self::MAGIC
            )));
        }
        let version = cur.u32()?;
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (supported: {})",
                Self::VERSION
            )));
        }
        let ts = cur.f64()?;
        let kv = cur.f64()?;
        let angle_scale = cur.f64()?;
        let velocity_scale = cur.f64()?;
        let torque_scale = cur.f64()?;
        let n_layers = cur.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            if rows == 0 || cols == 0 || rows > 1 << 20 || cols > 1 << 20 {
                return Err(Error::Checkpoint(format!(
                    "layer {i}: implausible dimensions {rows}x{cols}"
                )));
            }
            if let Some(prev) = layers.last() {
                let prev: &Layer = prev;
                if prev.weight.nrows() != cols {
                    return Err(Error::Checkpoint(format!(
                        "layer {i}: input width {cols} does not match previous output {}",
                        prev.weight.nrows()
                    )));
                }
            }
            let mut layer = Layer::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    layer.weight[(r, c)] = cur.f64()?;
                }
            }
            for r in 0..rows {
                layer.bias[r] = cur.f64()?;
            }
            layers.push(layer);
        }
        if !cur.at_end() {
            return Err(Error::Checkpoint("trailing bytes after last layer".into()));
        }
        let model = Self::new(
            MlpParams { layers },
            ts,
            angle_scale,
            velocity_scale,
            torque_scale,
        )?;
        if (model.kv - kv).abs() > 1e-12 * kv.abs().max(1.0) {
            return Err(Error::Checkpoint(format!(
                "stored kv {kv} inconsistent with velocity_scale/angle_scale {}",
                model.kv
            )));
        }
        Ok(Self { kv, ..model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Output of [`TustinNetModel::step_vjp`].
#[derive(Debug, Clone, Copy)]
pub struct StepCotangents {
    pub pos: Vector2<f64>,
    pub vel: Vector2<f64>,
    pub torque: Vector2<f64>,
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.at == self.bytes.len()
    }
}
