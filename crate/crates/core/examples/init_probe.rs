use nalgebra::Vector2;
use tustin_mpc::dynamics::PendulumParams;
use tustin_mpc::mpc::wrap_angle;
use tustin_mpc::training::{collect_dataset, derive_seed, DatasetConfig};
use tustin_mpc::tustin_net::{NetState, TustinNetModel};

fn main() {
    let model =
        TustinNetModel::load(std::path::Path::new("/tmp/exp/out/train/model.bin")).unwrap();
    let p = PendulumParams::default();
    let lqr = tustin_mpc::lqr::design_upright(&p, &[10.0, 1.0, 10.0, 1.0], &[0.1, 0.1], 0.01, 10)
        .unwrap();

    for i in 0..6u64 {
        let cfg = DatasetConfig {
            n_open_loop: 0,
            n_closed_loop: 1,
            duration: 1.0,
            seed: derive_seed(0, (40 << 32) | i),
            ..DatasetConfig::default()
        };
        let ep = collect_dataset(&p, Some(&lqr), &cfg, 0.01, 10).unwrap().remove(0);

        // Euler init vs exact init (true velocities at sample 1).
        let euler = model.init_state(&ep.measured[0], &ep.measured[1], ep.ts).unwrap();
        let exact = NetState::new(
            ep.measured[1] / model.angle_scale,
            Vector2::new(ep.truth[1].dtheta1, ep.truth[1].dtheta2) / model.velocity_scale,
        );

        for (tag, s1) in [("euler", euler), ("exact", exact)] {
            let states = model.rollout(&s1, &ep.torques[1..]);
            let n50 = 50.min(states.len() - 1);
            let (mut s1e, mut s2e) = (0.0, 0.0);
            for j in 1..=n50 {
                let pred = model.denormalize(&states[j]);
                let t = &ep.truth[j + 1];
                s1e += wrap_angle(pred.theta1 - t.theta1).powi(2);
                s2e += wrap_angle(pred.theta2 - t.theta2).powi(2);
            }
            print!(
                "  {tag}: th1 {:.4} th2 {:.4}",
                (s1e / n50 as f64).sqrt(),
                (s2e / n50 as f64).sqrt()
            );
        }
        println!("  (episode {i})");
    }
}
