use tustin_mpc::training::{load_dataset, train, TrainConfig};
use tustin_mpc::tustin_net::TustinNetModel;

fn main() {
    let model =
        TustinNetModel::load(std::path::Path::new("/tmp/exp/out/train/model.bin")).unwrap();
    let episodes = load_dataset(std::path::Path::new("/tmp/exp/out/dataset")).unwrap();
    let mut cfg = TrainConfig {
        epochs: 400,
        patience: 120,
        closed_loop_segment: 50,
        ..TrainConfig::default()
    };
    cfg.adam.lr = 1e-4;
    let t0 = std::time::Instant::now();
    let out = train(&model, &episodes, &cfg).unwrap();
    println!(
        "polish: best epoch {} val {:.6e} ({:.0} s)",
        out.best_epoch,
        out.best_val_loss,
        t0.elapsed().as_secs_f64()
    );
    out.model
        .save(std::path::Path::new("/tmp/exp/out/train/model_polished.bin"))
        .unwrap();
}
