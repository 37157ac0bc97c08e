use tustin_mpc::dynamics::PendulumParams;
use tustin_mpc::mpc::wrap_angle;
use tustin_mpc::training::{collect_dataset, derive_seed, DatasetConfig};
use tustin_mpc::tustin_net::TustinNetModel;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model_path = args
        .get(1)
        .map(String::as_str)
        .unwrap_or("/tmp/exp/out/train/model.bin");
    let near: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let expl: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let model = TustinNetModel::load(std::path::Path::new(model_path)).unwrap();
    let p = PendulumParams::default();
    let lqr = tustin_mpc::lqr::design_upright(&p, &[10.0, 1.0, 10.0, 1.0], &[0.1, 0.1], 0.01, 10)
        .unwrap();

    let mut worst = (0.0f64, 0.0f64);
    let mut mean = (0.0f64, 0.0f64);
    const N: u64 = 12;
    for i in 0..N {
        let cfg = DatasetConfig {
            n_open_loop: 0,
            n_closed_loop: 1,
            duration: 6.0,
            near_upright: near,
            exploration_sigma: expl,
            seed: derive_seed(0, (40 << 32) | i),
            ..DatasetConfig::default()
        };
        let ep = collect_dataset(&p, Some(&lqr), &cfg, 0.01, 10)
            .unwrap()
            .remove(0);
        let s1 = model
            .init_state(&ep.measured[0], &ep.measured[1], ep.ts)
            .unwrap();
        let states = model.rollout(&s1, &ep.torques[1..]);
        let (mut s1e, mut s2e) = (0.0, 0.0);
        let n50 = 50.min(states.len() - 1);
        for j in 1..=n50 {
            let pred = model.denormalize(&states[j]);
            let t = &ep.truth[j + 1];
            s1e += wrap_angle(pred.theta1 - t.theta1).powi(2);
            s2e += wrap_angle(pred.theta2 - t.theta2).powi(2);
        }
        let r1 = (s1e / n50 as f64).sqrt();
        let r2 = (s2e / n50 as f64).sqrt();
        worst = (worst.0.max(r1), worst.1.max(r2));
        mean = (mean.0 + r1 / N as f64, mean.1 + r2 / N as f64);
        println!("episode {i}: theta1 {r1:.4}  theta2 {r2:.4}");
    }
    println!("worst: theta1 {:.4}  theta2 {:.4}", worst.0, worst.1);
    println!("mean:  theta1 {:.4}  theta2 {:.4}", mean.0, mean.1);
}
