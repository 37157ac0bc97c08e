use nalgebra::DVector;
use tustin_mpc::training::{build_segments, load_dataset, segment_loss, train, TrainConfig};
use tustin_mpc::tustin_net::{MlpParams, TustinNetModel};

fn main() {
    let episodes = load_dataset(std::path::Path::new("/tmp/exp/out/dataset")).unwrap();
    let mlp = MlpParams::xavier_init(&[8, 100, 100, 2], 7).unwrap();
    let mut model = TustinNetModel::new(
        mlp,
        0.01,
        std::f64::consts::PI,
        2.0 * std::f64::consts::PI,
        5.0,
    )
    .unwrap();

    if std::env::args().any(|a| a == "--zero-last") {
        let n = model.last_layer_len();
        model.set_last_layer(&DVector::zeros(n)).unwrap();
        println!("last layer zeroed ({n} params)");
    }

    let (train_segs, _) = build_segments(&episodes, 100).unwrap();
    let total: f64 = train_segs.iter().map(|s| s.predictions() as f64).sum();
    let init_loss: f64 = train_segs
        .iter()
        .map(|s| segment_loss(&model, s).unwrap() * s.predictions() as f64)
        .sum::<f64>()
        / total;
    println!("initial train loss {init_loss:.6}");

    let cfg = TrainConfig {
        epochs: 120,
        patience: 120,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let out = train(&model, &episodes, &cfg).unwrap();
    for r in out.history.iter().step_by(10) {
        println!(
            "epoch {:3}  train {:.6}  val {:.6}",
            r.epoch, r.train_loss, r.val_loss
        );
    }
    println!(
        "best epoch {} val {:.6}  ({:.1} s)",
        out.best_epoch,
        out.best_val_loss,
        t0.elapsed().as_secs_f64()
    );
}
