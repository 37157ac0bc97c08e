use nalgebra::{DMatrix, DVector, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tustin_mpc::dynamics::{advance, PendulumParams, PlantState, Torque};
use tustin_mpc::estimation::*;
use tustin_mpc::lqr::design_upright;
use tustin_mpc::mpc::wrap_angle;
use tustin_mpc::tustin_net::TustinNetModel;

fn main() {
    let model = TustinNetModel::load(std::path::Path::new("/tmp/exp/out/train/model.bin")).unwrap();
    let p = PendulumParams::default();
    let ts = model.ts;
    let lqr = design_upright(&p, &[10.0, 1.0, 10.0, 1.0], &[0.1, 0.1], ts, 10).unwrap();

    let args: Vec<String> = std::env::args().collect();
    let rate0: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6.0);
    let sigma: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let pv: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let dur: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3.0);

    // LQR-stabilized episode starting mid-swing.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Normal::new(0.0, 1.5).unwrap();
    let mut x = PlantState::new(0.3, rate0, -0.3, -rate0);
    let n = (dur / ts).round() as usize;
    let mut truth = vec![x];
    let mut torques = Vec::new();
    for _ in 0..n {
        let fb = lqr.torque(&x);
        let u = Torque::new(fb.u1 + noise.sample(&mut rng), fb.u2 + noise.sample(&mut rng))
            .clamp(5.0);
        x = advance(&x, &u, &p, ts, 10).unwrap();
        truth.push(x);
        torques.push(u);
    }

    let mnoise = Normal::new(0.0, sigma).unwrap();
    let ys: Vec<Vector2<f64>> = truth
        .iter()
        .map(|s| {
            let y = s.angles();
            Vector2::new(y[0] + mnoise.sample(&mut rng), y[1] + mnoise.sample(&mut rng))
        })
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
        // Prior: positions from the first measurement, velocities unknown
        // (zero mean, wide variance covering +-rate0).
        let mean = DVector::from_vec(vec![ys[0][0] / a, ys[0][1] / a, 0.0, 0.0]);
        let p0v = (1.5 * rate0 / vs).powi(2);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![
            (sigma / a).powi(2),
            (sigma / a).powi(2),
            p0v,
            p0v,
        ]));
        let mut belief = GaussianBelief::new(mean, cov).unwrap();

        let mut sq_pos = 0.0;
        let mut sq_vel = 0.0;
        let mut cnt = 0.0;
        for (k, u) in torques.iter().enumerate() {
            let (b, _) = match choice {
                FilterChoice::Ekf => ekf_step(&model, &belief, u, &ys[k + 1], &noise_cfg).unwrap(),
                FilterChoice::Ukf => {
                    ukf_step(&model, &belief, u, &ys[k + 1], &noise_cfg, &ukf_cfg).unwrap()
                }
            };
            belief = b;
            let (est, _) = belief_to_plant(&model, &belief).unwrap();
            let t = &truth[k + 1];
            sq_pos += wrap_angle(est.theta1 - t.theta1).powi(2)
                + wrap_angle(est.theta2 - t.theta2).powi(2);
            sq_vel += (est.dtheta1 - t.dtheta1).powi(2) + (est.dtheta2 - t.dtheta2).powi(2);
            cnt += 2.0;
        }
        println!(
            "{:?} rate0={rate0} sigma={sigma} pv={pv}: pos RMSE {:.6e}  vel RMSE {:.6e}",
            choice,
            (sq_pos / cnt).sqrt(),
            (sq_vel / cnt).sqrt()
        );
    }
}
