//! Shared setup helpers for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tustin_mpc::training::Segment;
use tustin_mpc::{PlantState, Torque, TustinNetModel};

/// Production-sized model (two hidden layers of 100) with random weights.
pub fn bench_model(seed: u64) -> TustinNetModel {
    TustinNetModel::pendulum_default(0.01, 5.0, seed).unwrap()
}

/// Random but reproducible measured trajectory for gradient benchmarks.
pub fn bench_segment(seed: u64, predictions: usize) -> Segment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = predictions + 2;
    let mut measured = Vec::with_capacity(len);
    let mut y = nalgebra::Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    measured.push(y);
    for _ in 1..len {
        y += nalgebra::Vector2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        measured.push(y);
    }
    let torques = (0..len - 1)
        .map(|_| Torque::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
        .collect();
    Segment {
        measured,
        torques,
        ts: 0.01,
    }
}

pub fn bench_state(seed: u64) -> PlantState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PlantState::new(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    )
}
