use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tustin_mpc::estimation::*;
use tustin_mpc::mpc::wrap_angle;
use tustin_mpc::training::load_dataset;
use tustin_mpc::tustin_net::TustinNetModel;

fn main() {
    let model = TustinNetModel::load(std::path::Path::new("/tmp/exp/out/train/model.bin")).unwrap();
    let episodes = load_dataset(std::path::Path::new("/tmp/exp/out/dataset")).unwrap();
    // last closed-loop episode as a stand-in held-out run
    let ep = episodes.last().unwrap();

    let args: Vec<String> = std::env::args().collect();
    let decim: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let sigma: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let pv: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, sigma).unwrap();
    let ys: Vec<Vector2<f64>> = ep
        .measured
        .iter()
        .map(|y| Vector2::new(y[0] + noise.sample(&mut rng), y[1] + noise.sample(&mut rng)))
        .collect();

    let a = model.angle_scale;
    let vs = model.velocity_scale;
    let noise_cfg = NoiseConfig {
        pos_var: (0.001_f64 / a).powi(2),
        vel_var: (pv / vs).powi(2),
        param_var: 0.0,
        meas_var: (sigma / a).powi(2),
    };
    let ukf_cfg = UkfConfig::default();

    for choice in [FilterChoice::Ekf, FilterChoice::Ukf] {
        let mut belief =
            initial_state_belief(&model, &ep.truth[0], (0.01_f64 / a).powi(2), (0.1 / vs).powi(2))
                .unwrap();
        let (b, _) = position_update(&model, &belief, &ys[0], noise_cfg.meas_var).unwrap();
        belief = b;
        let mut sq_pos = 0.0;
        let mut n = 0.0;
        for (k, u) in ep.torques.iter().enumerate() {
            belief = match choice {
                FilterChoice::Ekf => ekf_predict(&model, &belief, u, &noise_cfg).unwrap(),
                FilterChoice::Ukf => {
                    ukf_predict(&model, &belief, u, &noise_cfg, &ukf_cfg).unwrap()
                }
            };
            if (k + 1) % decim == 0 {
                let (b, _) =
                    position_update(&model, &belief, &ys[k + 1], noise_cfg.meas_var).unwrap();
                belief = b;
            }
            let (est, _) = belief_to_plant(&model, &belief).unwrap();
            let t = &ep.truth[k + 1];
            sq_pos += wrap_angle(est.theta1 - t.theta1).powi(2)
                + wrap_angle(est.theta2 - t.theta2).powi(2);
            n += 2.0;
        }
        println!(
            "{:?} decim={decim} sigma={sigma} pv={pv}: pos RMSE {:.6e}",
            choice,
            (sq_pos / n).sqrt()
        );
    }
}
