//! Dataset generation and model training.
//!
//! Episodes are simulated with the true plant in two regimes: unactuated
//! falls from arbitrary angles with piecewise-constant random torques, and
//! LQR-stabilized runs near the upright equilibrium with exploration noise.
//! Each 12 s episode is split in half: the first 6 s train, the last 6 s
//! validate.
//!
//! The loss compares predicted and measured *angles* through
//! `2 (1 - cos(error))`, which is smooth, 2*pi-periodic, and locally
//! quadratic (`~ error^2` for small errors). Gradients flow through the
//! recurrent rollout by reverse-mode accumulation (truncated BPTT over the
//! segment), and Adam with bias correction performs the updates. Everything
//! is seeded and deterministic.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, PendulumParams, PlantState, Torque};
use crate::error::{Error, Result};
use crate::lqr::LqrController;
use crate::tustin_net::{MlpParams, TustinNetModel};

/// How an episode's torques were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Free fall from a uniformly random configuration with
    /// piecewise-constant random torques.
    #[serde(rename = "open-loop-fall")]
    OpenLoopFall,
    /// LQR feedback near the upright equilibrium with Gaussian exploration
    /// noise added before saturation.
    #[serde(rename = "lqr-closed-loop")]
    LqrClosedLoop,
}

impl Regime {
    pub fn tag(self) -> &'static str {
        match self {
            Regime::OpenLoopFall => "open-loop-fall",
            Regime::LqrClosedLoop => "lqr-closed-loop",
        }
    }
}

/// One recorded episode. `measured` are the joint angles the model trains
/// on; `truth` keeps the full simulator states for evaluation.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Measured joint angles `y(k)`, one per sampling instant.
    pub measured: Vec<Vector2<f64>>,
    /// Applied torques `u(k)`; one fewer than measurements.
    pub torques: Vec<Torque>,
    /// Full simulator states, aligned with `measured`.
    pub truth: Vec<PlantState>,
    /// Sampling period (s).
    pub ts: f64,
    pub regime: Regime,
    /// Seed this episode was generated from.
    pub seed: u64,
}

impl Episode {
    /// Build an episode from simulator output; measurements are the exact
    /// joint angles (training data carries no measurement noise).
    pub fn from_simulation(
        truth: Vec<PlantState>,
        torques: Vec<Torque>,
        ts: f64,
        regime: Regime,
        seed: u64,
    ) -> Result<Self> {
        let ep = Self {
            measured: truth.iter().map(|s| s.angles()).collect(),
            torques,
            truth,
            ts,
            regime,
            seed,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<()> {
        if self.measured.len() != self.torques.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "episode has {} measurements but {} torques",
                self.measured.len(),
                self.torques.len()
            )));
        }
        if !self.truth.is_empty() && self.truth.len() != self.measured.len() {
            return Err(Error::DimensionMismatch(
                "episode truth/measurement lengths differ".into(),
            ));
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(Error::InvalidParameter(format!("episode ts = {}", self.ts)));
        }
        Ok(())
    }

    /// Number of control steps (`measured.len() - 1`).
    pub fn steps(&self) -> usize {
        self.torques.len()
    }

    /// Split into equal first/second halves that share the boundary sample,
    /// so the validation half starts exactly where the training half ends.
    pub fn split_half(&self) -> Result<(Episode, Episode)> {
        let n = self.steps();
        if n < 4 {
            return Err(Error::EpisodeTooShort(format!(
                "cannot split an episode with {n} steps"
            )));
        }
        let m = n / 2;
        let take = |lo: usize, hi: usize| Episode {
            measured: self.measured[lo..=hi].to_vec(),
            torques: self.torques[lo..hi].to_vec(),
            truth: if self.truth.is_empty() {
                Vec::new()
            } else {
                self.truth[lo..=hi].to_vec()
            },
            ts: self.ts,
            regime: self.regime,
            seed: self.seed,
        };
        Ok((take(0, m), take(m, n)))
    }
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of open-loop fall episodes.
    pub n_open_loop: usize,
    /// Number of LQR closed-loop episodes.
    pub n_closed_loop: usize,
    /// Episode duration (s).
    pub duration: f64,
    /// Hold time of each piecewise-constant random torque (s).
    pub torque_hold: f64,
    /// Torque saturation (N m).
    pub u_max: f64,
    /// Amplitude of the random open-loop torques (N m). Kept well below the
    /// gravity torque scale so falls actually settle near the hanging
    /// equilibrium instead of being driven into sustained spinning.
    pub open_loop_torque: f64,
    /// Closed-loop initial angles are uniform in `[-near_upright, near_upright]`.
    pub near_upright: f64,
    /// Std of the Gaussian exploration torque added before saturation (N m).
    pub exploration_sigma: f64,
    /// Base seed; per-episode seeds are derived from it.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_open_loop: 40,
            n_closed_loop: 40,
            duration: 12.0,
            torque_hold: 0.1,
            u_max: 5.0,
            open_loop_torque: 0.5,
            near_upright: 0.1,
            exploration_sigma: 0.5,
            seed: 0,
        }
    }
}

/// Derive an independent stream seed from a base seed (splitmix64 finalizer,
/// so nearby inputs give unrelated outputs).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate the training corpus: `n_open_loop` falls followed by
/// `n_closed_loop` stabilized episodes. `lqr` is required when closed-loop
/// episodes are requested.
pub fn collect_dataset(
    p: &PendulumParams,
    lqr: Option<&LqrController>,
    cfg: &DatasetConfig,
    ts: f64,
    substeps: usize,
) -> Result<Vec<Episode>> {
    p.validate()?;
    if cfg.n_closed_loop > 0 && lqr.is_none() {
        return Err(Error::InvalidParameter(
            "closed-loop episodes require an LQR controller".into(),
        ));
    }
    if !(cfg.duration > 0.0 && cfg.torque_hold > 0.0 && cfg.u_max > 0.0) {
        return Err(Error::InvalidParameter(
            "dataset duration, torque_hold and u_max must be > 0".into(),
        ));
    }
    if !(cfg.open_loop_torque >= 0.0 && cfg.open_loop_torque.is_finite()) {
        return Err(Error::InvalidParameter(
            "open_loop_torque must be finite and >= 0".into(),
        ));
    }
    let n_steps = (cfg.duration / ts).round() as usize;
    let hold = (cfg.torque_hold / ts).round().max(1.0) as usize;
    let mut episodes = Vec::with_capacity(cfg.n_open_loop + cfg.n_closed_loop);

    for i in 0..cfg.n_open_loop {
        let seed = derive_seed(cfg.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Uniform in (-pi, pi]: negate a draw from [-pi, pi).
        let t1 = -rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let t2 = -rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let x0 = PlantState::new(t1, 0.0, t2, 0.0);
        let mut torques = Vec::with_capacity(n_steps);
        while torques.len() < n_steps {
            let u = if cfg.open_loop_torque > 0.0 {
                Torque::new(
                    rng.random_range(-cfg.open_loop_torque..cfg.open_loop_torque),
                    rng.random_range(-cfg.open_loop_torque..cfg.open_loop_torque),
                )
            } else {
                Torque::new(0.0, 0.0)
            };
            for _ in 0..hold.min(n_steps - torques.len()) {
                torques.push(u);
            }
        }
        let truth = dynamics::simulate(&x0, &torques, p, ts, substeps)?;
        episodes.push(Episode::from_simulation(
            truth,
            torques,
            ts,
            Regime::OpenLoopFall,
            seed,
        )?);
    }

    // Offset the closed-loop stream so its seeds never collide with the
    // open-loop ones.
    for i in 0..cfg.n_closed_loop {
        let seed = derive_seed(cfg.seed, (1u64 << 32) | i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lqr = lqr.unwrap();
        let noise = Normal::new(0.0, cfg.exploration_sigma)
            .map_err(|e| Error::InvalidParameter(format!("exploration noise: {e}")))?;
        let t1 = rng.random_range(-cfg.near_upright..cfg.near_upright);
        let t2 = rng.random_range(-cfg.near_upright..cfg.near_upright);
        let mut x = PlantState::new(t1, 0.0, t2, 0.0);
        let mut truth = vec![x];
        let mut torques = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let fb = lqr.torque(&x);
            let u = Torque::new(fb.u1 + noise.sample(&mut rng), fb.u2 + noise.sample(&mut rng))
                .clamp(cfg.u_max);
            x = dynamics::advance(&x, &u, p, ts, substeps)?;
            truth.push(x);
            torques.push(u);
        }
        episodes.push(Episode::from_simulation(
            truth,
            torques,
            ts,
            Regime::LqrClosedLoop,
            seed,
        )?);
    }
    Ok(episodes)
}

// --- dataset on disk ---

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    regime: Regime,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    ts: f64,
    episodes: Vec<ManifestEntry>,
}

/// Write every episode as a trajectory CSV plus a `manifest.json` naming
/// each file, its regime and its seed.
pub fn write_dataset(dir: &Path, episodes: &[Episode]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ts = episodes.first().map(|e| e.ts).unwrap_or(0.0);
    let mut manifest = Manifest {
        ts,
        episodes: Vec::with_capacity(episodes.len()),
    };
    for (i, ep) in episodes.iter().enumerate() {
        ep.validate()?;
        if (ep.ts - ts).abs() > 1e-12 {
            return Err(Error::InvalidParameter(
                "all episodes in a dataset must share one sampling period".into(),
            ));
        }
        let file = format!("episode_{i:03}.csv");
        dynamics::write_trajectory_csv(&dir.join(&file), &ep.truth, &ep.torques, ep.ts)?;
        manifest.episodes.push(ManifestEntry {
            file,
            regime: ep.regime,
            seed: ep.seed,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Load a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Episode>> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for entry in &manifest.episodes {
        let text = std::fs::read_to_string(dir.join(&entry.file))?;
        let (truth, torques, _) = dynamics::parse_trajectory_csv(&text)?;
        episodes.push(Episode::from_simulation(
            truth,
            torques,
            manifest.ts,
            entry.regime,
            entry.seed,
        )?);
    }
    Ok(episodes)
}

// --- loss ---

/// Periodic angle loss: mean over steps and joints of
/// `2 (1 - cos(predicted - measured))`. Angles in rad. Empty input gives 0.
pub fn one_minus_cos_loss(pred: &[Vector2<f64>], meas: &[Vector2<f64>]) -> Result<f64> {
    if pred.len() != meas.len() {
        return Err(Error::DimensionMismatch(format!(
            "loss over {} predictions vs {} measurements",
            pred.len(),
            meas.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (p, m) in pred.iter().zip(meas) {
        for j in 0..2 {
            acc += 2.0 * (1.0 - (p[j] - m[j]).cos());
        }
    }
    Ok(acc / (2.0 * pred.len() as f64))
}

/// Equivalent quadratic-on-the-circle form: mean over steps and joints of
/// `(sin p - sin m)^2 + (cos p - cos m)^2`. Identical to
/// [`one_minus_cos_loss`] by the angle-difference identity.
pub fn sincos_loss(pred: &[Vector2<f64>], meas: &[Vector2<f64>]) -> Result<f64> {
    if pred.len() != meas.len() {
        return Err(Error::DimensionMismatch(format!(
            "loss over {} predictions vs {} measurements",
            pred.len(),
            meas.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (p, m) in pred.iter().zip(meas) {
        for j in 0..2 {
            let ds = p[j].sin() - m[j].sin();
            let dc = p[j].cos() - m[j].cos();
            acc += ds * ds + dc * dc;
        }
    }
    Ok(acc / (2.0 * pred.len() as f64))
}

// --- segments and BPTT ---

/// A contiguous training window: measurements `y(0..=m)` and the torques
/// between them. The first two measurements anchor the initial model state;
/// predictions are compared against `y(2..=m)`.
#[derive(Debug, Clone)]
pub struct Segment {
    pub measured: Vec<Vector2<f64>>,
    pub torques: Vec<Torque>,
    pub ts: f64,
}

impl Segment {
    /// Number of predicted (loss-bearing) samples.
    pub fn predictions(&self) -> usize {
        self.measured.len().saturating_sub(2)
    }
}

/// Cut an episode into BPTT windows. `max_len None` keeps the whole episode
/// as one segment; `Some(l)` produces consecutive windows of `l` steps whose
/// initial states re-anchor on the shared boundary measurements. Windows too
/// short to predict anything are dropped.
pub fn make_segments(ep: &Episode, max_len: Option<usize>) -> Vec<Segment> {
    let n = ep.steps();
    let l = max_len.unwrap_or(n.max(1)).max(2);
    let mut out = Vec::new();
    let mut lo = 0;
    while lo < n {
        let hi = (lo + l).min(n);
        if hi - lo >= 2 {
            out.push(Segment {
                measured: ep.measured[lo..=hi].to_vec(),
                torques: ep.torques[lo..hi].to_vec(),
                ts: ep.ts,
            });
        }
        lo = hi;
    }
    out
}

/// Roll the model through a segment and return the loss.
pub fn segment_loss(model: &TustinNetModel, seg: &Segment) -> Result<f64> {
    let (loss, _) = forward_segment(model, seg, None)?;
    Ok(loss)
}

fn check_segment(model: &TustinNetModel, seg: &Segment) -> Result<()> {
    if seg.measured.len() != seg.torques.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "segment with {} measurements and {} torques",
            seg.measured.len(),
            seg.torques.len()
        )));
    }
    if (seg.ts - model.ts).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "segment sampled at {} s but the model steps at {} s",
            seg.ts, model.ts
        )));
    }
    Ok(())
}

/// Shared forward pass. When `caches` is provided, stores per-step caches
/// and rollout states for the backward sweep.
#[allow(clippy::type_complexity)]
fn forward_segment(
    model: &TustinNetModel,
    seg: &Segment,
    mut caches: Option<(
        &mut Vec<crate::tustin_net::StepCache>,
        &mut Vec<crate::tustin_net::NetState>,
    )>,
) -> Result<(f64, usize)> {
    check_segment(model, seg)?;
    let m = seg.measured.len();
    if m < 3 {
        return Ok((0.0, 0));
    }
    let mut s = model.init_state(&seg.measured[0], &seg.measured[1], seg.ts)?;
    if let Some((_, states)) = caches.as_mut() {
        states.push(s);
    }
    let n_pred = m - 2;
    let mut acc = 0.0;
    for k in 1..m - 1 {
        let (next, cache) = model.step_cached(&s, &seg.torques[k]);
        if !next.is_finite() {
            return Err(Error::NonFinite("model rollout".into()));
        }
        let y = &seg.measured[k + 1];
        for j in 0..2 {
            acc += 2.0 * (1.0 - (model.angle_scale * next.pos[j] - y[j]).cos());
        }
        if let Some((cs, states)) = caches.as_mut() {
            cs.push(cache);
            states.push(next);
        }
        s = next;
    }
    Ok((acc / (2.0 * n_pred as f64), n_pred))
}

/// Truncated-BPTT gradient of the segment loss with respect to every MLP
/// parameter, accumulated into `grad`. Returns `(loss, predictions)`;
/// segments too short to predict contribute nothing.
pub fn segment_gradient(
    model: &TustinNetModel,
    seg: &Segment,
    grad: &mut MlpParams,
) -> Result<(f64, usize)> {
    let mut caches = Vec::new();
    let mut states = Vec::new();
    let (loss, n_pred) = forward_segment(model, seg, Some((&mut caches, &mut states)))?;
    if n_pred == 0 {
        return Ok((loss, 0));
    }
    let a = model.angle_scale;
    let scale = a / n_pred as f64;
    // d loss / d pos at prediction index k (angles y(k+2) onward).
    let direct = |idx: usize| -> Vector2<f64> {
        let pos = states[idx + 1].pos;
        let y = &seg.measured[idx + 2];
        Vector2::new(
            scale * (a * pos[0] - y[0]).sin(),
            scale * (a * pos[1] - y[1]).sin(),
        )
    };
    let mut cot_pos = direct(n_pred - 1);
    let mut cot_vel = Vector2::zeros();
    for k in (0..n_pred).rev() {
        let cot = model.step_vjp(&caches[k], &cot_pos, &cot_vel, Some(grad));
        if k > 0 {
            cot_pos = cot.pos + direct(k - 1);
            cot_vel = cot.vel;
        }
    }
    Ok((loss, n_pred))
}

// --- Adam ---

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment state for Adam over MLP parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: MlpParams,
    v: MlpParams,
    t: u64,
}

impl AdamState {
    pub fn new(shape: &MlpParams) -> Self {
        Self {
            m: MlpParams::zeros_like(shape),
            v: MlpParams::zeros_like(shape),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` along `grad`.
    pub fn step(&mut self, params: &mut MlpParams, grad: &MlpParams, cfg: &AdamConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (li, layer) in params.layers.iter_mut().enumerate() {
            let g = &grad.layers[li];
            let m = &mut self.m.layers[li];
            let v = &mut self.v.layers[li];
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            };
            for ((p, &g), (m, v)) in layer
                .weight
                .iter_mut()
                .zip(g.weight.iter())
                .zip(m.weight.iter_mut().zip(v.weight.iter_mut()))
            {
                update(p, g, m, v);
            }
            for ((p, &g), (m, v)) in layer
                .bias
                .iter_mut()
                .zip(g.bias.iter())
                .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
            {
                update(p, g, m, v);
            }
        }
    }
}

// --- training driver ---

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Maximum number of epochs.
    pub epochs: usize,
    /// Segments per Adam update.
    pub batch_size: usize,
    /// Early stopping: stop after this many epochs without a new best
    /// validation loss.
    pub patience: usize,
    /// BPTT window for closed-loop episodes (open-loop falls train on the
    /// whole half-episode).
    pub closed_loop_segment: usize,
    /// Extra refinement epochs run after the main stage at `polish_lr`,
    /// restarting the optimizer from the best checkpoint so far (0 disables
    /// the stage). The low-rate stage tightens the final fit once the main
    /// rate has stopped improving validation loss.
    pub polish_epochs: usize,
    /// Learning rate for the refinement stage.
    pub polish_lr: f64,
    /// Shuffle seed.
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 6,
            patience: 100,
            closed_loop_segment: 100,
            polish_epochs: 0,
            polish_lr: 1e-4,
            seed: 1,
            adam: AdamConfig::default(),
        }
    }
}

/// One epoch of the training history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of [`train`]: the best-validation model and the loss history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TustinNetModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Split episodes into train/validation halves and cut them into segments.
pub fn build_segments(
    episodes: &[Episode],
    closed_loop_segment: usize,
) -> Result<(Vec<Segment>, Vec<Segment>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ep in episodes {
        let (first, second) = ep.split_half()?;
        let max_len = match ep.regime {
            Regime::OpenLoopFall => None,
            Regime::LqrClosedLoop => Some(closed_loop_segment),
        };
        train.extend(make_segments(&first, max_len));
        val.extend(make_segments(&second, max_len));
    }
    Ok((train, val))
}

/// One stage of mini-batch Adam with early stopping; epochs are numbered
/// from `epoch_offset` so multi-stage histories stay contiguous.
#[allow(clippy::too_many_arguments)]
fn train_stage(
    init: &TustinNetModel,
    train_segs: &[Segment],
    val_segs: &[Segment],
    adam_cfg: &AdamConfig,
    epochs: usize,
    patience: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    epoch_offset: usize,
) -> Result<TrainOutcome> {
    let mut model = init.clone();
    let mut adam = AdamState::new(&model.mlp);
    let mut order: Vec<usize> = (0..train_segs.len()).collect();
    let mut grad = MlpParams::zeros_like(&model.mlp);

    let val_loss = |m: &TustinNetModel| -> Result<f64> {
        let mut acc = 0.0;
        let mut n = 0usize;
        for s in val_segs {
            let (l, p) = forward_segment(m, s, None)?;
            acc += l * p as f64;
            n += p;
        }
        Ok(if n == 0 { 0.0 } else { acc / n as f64 })
    };

    let mut history = Vec::new();
    let mut best_params = model.mlp.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = epoch_offset;
    let mut since_best = 0usize;

    for epoch in epoch_offset..epoch_offset + epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_pred = 0usize;
        for batch in order.chunks(batch_size) {
            grad.set_zero();
            for &idx in batch {
                let (l, p) = segment_gradient(&model, &train_segs[idx], &mut grad)?;
                epoch_loss += l * p as f64;
                epoch_pred += p;
            }
            grad.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.mlp, &grad, adam_cfg);
        }
        let train_loss = epoch_loss / epoch_pred as f64;
        let val = val_loss(&model)?;
        if !train_loss.is_finite() || !val.is_finite() {
            return Err(Error::TrainingDiverged(epoch));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val,
        });
        if val < best_val {
            best_val = val;
            best_params = model.mlp.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > patience {
                break;
            }
        }
    }

    model.mlp = best_params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}

/// Train `model` on the episodes with mini-batch Adam and early stopping on
/// the validation halves, then optionally refine the best checkpoint at a
/// lower rate (`polish_epochs` / `polish_lr`). Returns the parameters of the
/// best validation epoch across all stages, not the last one. Deterministic
/// for fixed seeds.
pub fn train(
    model: &TustinNetModel,
    episodes: &[Episode],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidParameter(
            "training needs batch_size >= 1 and epochs >= 1".into(),
        ));
    }
    if cfg.polish_epochs > 0 && !(cfg.polish_lr > 0.0 && cfg.polish_lr.is_finite()) {
        return Err(Error::InvalidParameter(
            "polish_lr must be positive and finite when polish_epochs > 0".into(),
        ));
    }
    let (train_segs, val_segs) = build_segments(episodes, cfg.closed_loop_segment)?;
    let total_pred: usize = train_segs.iter().map(|s| s.predictions()).sum();
    if total_pred == 0 {
        return Err(Error::EpisodeTooShort(
            "no trainable predictions in the dataset".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = train_stage(
        model,
        &train_segs,
        &val_segs,
        &cfg.adam,
        cfg.epochs,
        cfg.patience,
        cfg.batch_size,
        &mut rng,
        0,
    )?;
    if cfg.polish_epochs > 0 {
        let polish_adam = AdamConfig {
            lr: cfg.polish_lr,
            ..cfg.adam
        };
        let polish = train_stage(
            &out.model,
            &train_segs,
            &val_segs,
            &polish_adam,
            cfg.polish_epochs,
            cfg.patience,
            cfg.batch_size,
            &mut rng,
            out.history.len(),
        )?;
        out.history.extend(polish.history);
        if polish.best_val_loss < out.best_val_loss {
            out.model = polish.model;
            out.best_epoch = polish.best_epoch;
            out.best_val_loss = polish.best_val_loss;
        }
    }
    Ok(out)
}

/// Fixed CSV header for training logs.
pub const TRAINING_LOG_HEADER: &str = "epoch,train_loss,val_loss";

/// Serialize a training history to CSV.
pub fn training_log_csv(history: &[EpochRecord]) -> String {
    let mut out = String::new();
    out.push_str(TRAINING_LOG_HEADER);
    out.push('\n');
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_loss)
            .expect("writing to String cannot fail");
    }
    out
}

/// Write a training log CSV to a file.
pub fn write_training_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(training_log_csv(history).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn small_model(seed: u64) -> TustinNetModel {
        let mlp = MlpParams::xavier_init(&[8, 5, 4, 2], seed).unwrap();
        TustinNetModel::new(mlp, 0.01, PI, 2.0 * PI, 5.0).unwrap()
    }

    #[test]
    fn loss_hand_values() {
        // Error of pi on both joints: 2(1 - cos(pi)) = 4 per joint.
        let pred = vec![Vector2::new(PI, PI)];
        let meas = vec![Vector2::zeros()];
        assert_relative_eq!(one_minus_cos_loss(&pred, &meas).unwrap(), 4.0, max_relative = 1e-15);
        // Error of pi on one joint only: mean of (4, 0) = 2.
        let pred = vec![Vector2::new(PI, 0.0)];
        assert_relative_eq!(one_minus_cos_loss(&pred, &meas).unwrap(), 2.0, max_relative = 1e-15);
        // No error, no loss; and 2*pi wraps to no loss.
        let pred = vec![Vector2::new(2.0 * PI, 0.0)];
        assert!(one_minus_cos_loss(&pred, &meas).unwrap() < 1e-15);
        // Empty input.
        assert_eq!(one_minus_cos_loss(&[], &[]).unwrap(), 0.0);
        // Length mismatch.
        assert!(one_minus_cos_loss(&pred, &[]).is_err());
    }

    proptest! {
        /// The two loss forms are the same function:
        /// (sin a - sin b)^2 + (cos a - cos b)^2 = 2 - 2 cos(a - b).
        #[test]
        fn loss_forms_agree(raw in proptest::collection::vec((-8.0..8.0f64, -8.0..8.0f64, -8.0..8.0f64, -8.0..8.0f64), 1..20)) {
            let pred: Vec<Vector2<f64>> = raw.iter().map(|r| Vector2::new(r.0, r.1)).collect();
            let meas: Vec<Vector2<f64>> = raw.iter().map(|r| Vector2::new(r.2, r.3)).collect();
            let a = one_minus_cos_loss(&pred, &meas).unwrap();
            let b = sincos_loss(&pred, &meas).unwrap();
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn random_segment(seed: u64, m: usize) -> Segment {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Segment {
            measured: (0..m)
                .map(|_| Vector2::new(rng.random_range(-PI..PI), rng.random_range(-PI..PI)))
                .collect(),
            torques: (0..m - 1)
                .map(|_| Torque::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                .collect(),
            ts: 0.01,
        }
    }

    /// BPTT gradient against central finite differences on every parameter
    /// of a small network, over a multi-step segment.
    #[test]
    fn bptt_gradient_matches_finite_differences() {
        let model = small_model(3);
        let seg = random_segment(17, 8);

        let mut grad = MlpParams::zeros_like(&model.mlp);
        let (loss, n_pred) = segment_gradient(&model, &seg, &mut grad).unwrap();
        assert_eq!(n_pred, 6);
        assert!(loss > 0.0);
        let analytic = grad.to_flat();

        let sizes = model.mlp.sizes();
        let flat = model.mlp.to_flat();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut p = flat.clone();
            p[k] += h;
            let mut hi = model.clone();
            hi.mlp = MlpParams::from_flat(&sizes, &p).unwrap();
            p[k] -= 2.0 * h;
            let mut lo = model.clone();
            lo.mlp = MlpParams::from_flat(&sizes, &p).unwrap();
            let numeric =
                (segment_loss(&hi, &seg).unwrap() - segment_loss(&lo, &seg).unwrap()) / (2.0 * h);
            let tol = (1e-5 * numeric.abs()).max(1e-8);
            assert!(
                (analytic[k] - numeric).abs() <= tol,
                "param {k}: analytic {} vs numeric {numeric} (tol {tol:.2e})",
                analytic[k]
            );
        }
    }

    /// With a single prediction whose joint-2 error is exactly zero, the
    /// final-layer parameters feeding joint 2 get *exactly* zero gradient
    /// (structural sparsity of the output layer), while joint 1's do not.
    #[test]
    fn bptt_structural_zero_gradient() {
        let model = small_model(9);
        let mut seg = random_segment(23, 3);
        // Replay the forward pass and plant the joint-2 measurement on the
        // prediction.
        let s1 = model
            .init_state(&seg.measured[0], &seg.measured[1], seg.ts)
            .unwrap();
        let s2 = model.step(&s1, &seg.torques[1]);
        seg.measured[2][1] = model.angle_scale * s2.pos[1];

        let mut grad = MlpParams::zeros_like(&model.mlp);
        segment_gradient(&model, &seg, &mut grad).unwrap();
        let last = grad.layers.last().unwrap();
        for c in 0..last.weight.ncols() {
            assert_eq!(last.weight[(1, c)], 0.0);
        }
        assert_eq!(last.bias[1], 0.0);
        assert!(last.weight.row(0).amax() > 0.0);
    }

    #[test]
    fn segment_edge_cases() {
        let model = small_model(1);
        // Two measurements, one torque: nothing to predict.
        let seg = random_segment(5, 2);
        let mut grad = MlpParams::zeros_like(&model.mlp);
        let (loss, n) = segment_gradient(&model, &seg, &mut grad).unwrap();
        assert_eq!((loss, n), (0.0, 0));
        assert_eq!(grad.max_abs(), 0.0);
        // Mismatched sampling period is rejected.
        let mut seg = random_segment(6, 5);
        seg.ts = 0.02;
        assert!(segment_loss(&model, &seg).is_err());
        // Mismatched lengths are rejected.
        let mut seg = random_segment(7, 5);
        seg.torques.pop();
        assert!(segment_loss(&model, &seg).is_err());
    }

    #[test]
    fn adam_first_step_and_convergence() {
        // Scalar quadratic f(x) = (x - 3)^2 stored in a 1x1 "MLP".
        let mut params = MlpParams::zeros(&[1, 1]).unwrap();
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&params);
        let mut grad = MlpParams::zeros_like(&params);
        // First step has magnitude ~lr regardless of gradient scale.
        grad.layers[0].weight[(0, 0)] = 2.0 * (0.0 - 3.0);
        adam.step(&mut params, &grad, &cfg);
        assert_relative_eq!(params.layers[0].weight[(0, 0)], cfg.lr, max_relative = 1e-6);
        // Bias has zero gradient and must not move.
        assert_eq!(params.layers[0].bias[0], 0.0);
        // Iterate to convergence.
        for _ in 0..2000 {
            let x = params.layers[0].weight[(0, 0)];
            grad.layers[0].weight[(0, 0)] = 2.0 * (x - 3.0);
            adam.step(&mut params, &grad, &cfg);
        }
        assert!((params.layers[0].weight[(0, 0)] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut params = MlpParams::xavier_init(&[3, 4, 2], 8).unwrap();
        let before = params.clone();
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&params);
        let mut grad = MlpParams::zeros_like(&params);
        grad.layers[0].weight[(0, 0)] = 5.0;
        adam.step(&mut params, &grad, &cfg);
        assert_eq!(params, before);
    }

    #[test]
    fn derive_seed_streams_differ() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        let c = derive_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, 0));
    }

    fn tiny_dataset_cfg() -> DatasetConfig {
        DatasetConfig {
            n_open_loop: 2,
            n_closed_loop: 2,
            duration: 1.2,
            seed: 7,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn collect_dataset_shapes_and_determinism() {
        let p = PendulumParams::default();
        let lqr = crate::lqr::design_upright(&p, &[10.0, 1.0, 10.0, 1.0], &[0.1, 0.1], 0.01, 10)
            .unwrap();
        let cfg = tiny_dataset_cfg();
        let eps = collect_dataset(&p, Some(&lqr), &cfg, 0.01, 10).unwrap();
        assert_eq!(eps.len(), 4);
        for (i, ep) in eps.iter().enumerate() {
            assert_eq!(ep.steps(), 120);
            assert_eq!(ep.measured.len(), 121);
            assert_eq!(ep.truth.len(), 121);
            let expected = if i < 2 {
                Regime::OpenLoopFall
            } else {
                Regime::LqrClosedLoop
            };
            assert_eq!(ep.regime, expected);
            // Torques are saturated.
            assert!(ep
                .torques
                .iter()
                .all(|u| u.u1.abs() <= cfg.u_max && u.u2.abs() <= cfg.u_max));
            ep.validate().unwrap();
        }
        // Open-loop: initial angles anywhere in (-pi, pi], zero velocity,
        // torques piecewise constant over the hold window (10 samples).
        for ep in &eps[..2] {
            let x0 = ep.truth[0];
            assert!(x0.theta1 > -PI && x0.theta1 <= PI);
            assert_eq!(x0.dtheta1, 0.0);
            for block in ep.torques.chunks(10) {
                assert!(block.iter().all(|u| u == &block[0]));
            }
        }
        // Closed-loop: starts near upright.
        for ep in &eps[2..] {
            assert!(ep.truth[0].theta1.abs() <= cfg.near_upright);
            assert!(ep.truth[0].theta2.abs() <= cfg.near_upright);
        }
        // Same seed, same bits; different seed, different data.
        let again = collect_dataset(&p, Some(&lqr), &cfg, 0.01, 10).unwrap();
        for (a, b) in eps.iter().zip(&again) {
            assert_eq!(a.measured, b.measured);
            assert_eq!(a.torques, b.torques);
        }
        let other = collect_dataset(
            &p,
            Some(&lqr),
            &DatasetConfig {
                seed: 8,
                ..cfg.clone()
            },
            0.01,
            10,
        )
        .unwrap();
        assert_ne!(eps[0].measured[0], other[0].measured[0]);

        // Closed-loop episodes without a controller are an error.
        assert!(collect_dataset(&p, None, &cfg, 0.01, 10).is_err());
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let p = PendulumParams::default();
        let cfg = DatasetConfig {
            n_open_loop: 2,
            n_closed_loop: 0,
            duration: 0.5,
            seed: 3,
            ..DatasetConfig::default()
        };
        let eps = collect_dataset(&p, None, &cfg, 0.01, 10).unwrap();
        let dir = std::env::temp_dir().join(format!("tn_dataset_{}", std::process::id()));
        write_dataset(&dir, &eps).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), eps.len());
        for (a, b) in eps.iter().zip(&loaded) {
            assert_eq!(a.measured, b.measured);
            assert_eq!(a.torques, b.torques);
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.regime, b.regime);
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.ts, b.ts);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn split_half_shares_boundary() {
        let p = PendulumParams::default();
        let cfg = DatasetConfig {
            n_open_loop: 1,
            n_closed_loop: 0,
            duration: 1.0,
            seed: 11,
            ..DatasetConfig::default()
        };
        let ep = &collect_dataset(&p, None, &cfg, 0.01, 10).unwrap()[0];
        let (a, b) = ep.split_half().unwrap();
        assert_eq!(a.steps(), 50);
        assert_eq!(b.steps(), 50);
        assert_eq!(a.measured.last().unwrap(), &b.measured[0]);
        assert_eq!(a.truth.last().unwrap(), &b.truth[0]);
        assert_eq!(a.measured[50], ep.measured[50]);
        assert_eq!(b.torques[0], ep.torques[50]);

        let short = Episode {
            measured: ep.measured[..3].to_vec(),
            torques: ep.torques[..2].to_vec(),
            truth: ep.truth[..3].to_vec(),
            ts: ep.ts,
            regime: ep.regime,
            seed: 0,
        };
        assert!(short.split_half().is_err());
    }

    #[test]
    fn make_segments_windows() {
        let p = PendulumParams::default();
        let cfg = DatasetConfig {
            n_open_loop: 1,
            n_closed_loop: 0,
            duration: 6.0,
            seed: 13,
            ..DatasetConfig::default()
        };
        let ep = &collect_dataset(&p, None, &cfg, 0.01, 10).unwrap()[0];
        // Whole episode as a single window.
        let whole = make_segments(ep, None);
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].measured.len(), 601);
        assert_eq!(whole[0].torques.len(), 600);
        // 100-step re-anchored windows.
        let w = make_segments(ep, Some(100));
        assert_eq!(w.len(), 6);
        for (i, s) in w.iter().enumerate() {
            assert_eq!(s.measured.len(), 101);
            assert_eq!(s.torques.len(), 100);
            assert_eq!(s.measured[0], ep.measured[100 * i]);
        }
        // Consecutive windows share their boundary measurement.
        assert_eq!(w[0].measured.last().unwrap(), &w[1].measured[0]);
    }

    /// End-to-end training smoke test on a realizable teacher-student
    /// problem: losses drop, the history is well-formed, early stopping
    /// respects patience, and the whole run is bit-for-bit reproducible.
    #[test]
    fn train_improves_and_is_deterministic() {
        use rand::Rng;
        // Data generated by a "teacher" of the same architecture, so the
        // student can actually fit it.
        let teacher = small_model(42);
        let mut eps = Vec::new();
        for e in 0..2u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + e);
            let s0 = crate::tustin_net::NetState::new(
                Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                Vector2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            );
            let torques: Vec<Torque> = (0..100)
                .map(|_| Torque::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                .collect();
            let measured: Vec<Vector2<f64>> = teacher
                .rollout(&s0, &torques)
                .iter()
                .map(|s| s.pos * teacher.angle_scale)
                .collect();
            eps.push(Episode {
                measured,
                torques,
                truth: Vec::new(),
                ts: teacher.ts,
                // Tagged closed-loop so training uses short re-anchored
                // windows.
                regime: Regime::LqrClosedLoop,
                seed: e,
            });
        }
        let model = small_model(2);
        let tcfg = TrainConfig {
            epochs: 60,
            batch_size: 4,
            patience: 60,
            closed_loop_segment: 10,
            seed: 5,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&model, &eps, &tcfg).unwrap();
        assert!(!out.history.is_empty());
        let first = out.history.first().unwrap();
        let last = out.history.last().unwrap();
        assert!(
            last.train_loss < first.train_loss,
            "train loss did not improve: {} -> {}",
            first.train_loss,
            last.train_loss
        );
        assert!(out.best_val_loss <= first.val_loss);
        assert_eq!(out.history[out.best_epoch].val_loss, out.best_val_loss);

        let again = train(&model, &eps, &tcfg).unwrap();
        assert_eq!(again.model.mlp, out.model.mlp);
        assert_eq!(again.history.len(), out.history.len());
        for (a, b) in out.history.iter().zip(&again.history) {
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.val_loss, b.val_loss);
        }

        let csv = training_log_csv(&out.history);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRAINING_LOG_HEADER);
        assert_eq!(csv.lines().count(), out.history.len() + 1);
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "0");
        assert!(row[1].parse::<f64>().is_ok());
        assert!(row[2].parse::<f64>().is_ok());
    }

    #[test]
    fn train_rejects_degenerate_inputs() {
        let model = small_model(2);
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(&model, &[], &cfg).is_err());
        let cfg = TrainConfig::default();
        assert!(train(&model, &[], &cfg).is_err());
    }

    /// The optional refinement stage extends the history contiguously, never
    /// returns a worse checkpoint than the main stage alone, and stays
    /// deterministic.
    #[test]
    fn polish_stage_refines_the_best_checkpoint() {
        use rand::Rng;
        let teacher = small_model(42);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s0 = crate::tustin_net::NetState::new(
            Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            Vector2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
        );
        let torques: Vec<Torque> = (0..100)
            .map(|_| Torque::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let measured: Vec<Vector2<f64>> = teacher
            .rollout(&s0, &torques)
            .iter()
            .map(|s| s.pos * teacher.angle_scale)
            .collect();
        let eps = [Episode {
            measured,
            torques,
            truth: Vec::new(),
            ts: teacher.ts,
            regime: Regime::LqrClosedLoop,
            seed: 0,
        }];
        let model = small_model(2);
        let base = TrainConfig {
            epochs: 20,
            batch_size: 4,
            patience: 20,
            closed_loop_segment: 10,
            seed: 5,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let plain = train(&model, &eps, &base).unwrap();

        let polished_cfg = TrainConfig {
            polish_epochs: 10,
            polish_lr: 1e-3,
            ..base.clone()
        };
        let polished = train(&model, &eps, &polished_cfg).unwrap();
        assert_eq!(polished.history.len(), plain.history.len() + 10);
        for (i, r) in polished.history.iter().enumerate() {
            assert_eq!(r.epoch, i);
        }
        assert!(polished.best_val_loss <= plain.best_val_loss);
        assert_eq!(
            polished.history[polished.best_epoch].val_loss,
            polished.best_val_loss
        );

        let again = train(&model, &eps, &polished_cfg).unwrap();
        assert_eq!(again.model.mlp, polished.model.mlp);

        let bad = TrainConfig {
            polish_epochs: 10,
            polish_lr: 0.0,
            ..base
        };
        assert!(train(&model, &eps, &bad).is_err());
    }
}
