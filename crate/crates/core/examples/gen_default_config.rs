fn main() {
    let cfg = tustin_mpc::ExperimentConfig::default();
    print!("{}", cfg.to_toml());
}
