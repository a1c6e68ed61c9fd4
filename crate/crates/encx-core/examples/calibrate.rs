// Scratch calibration driver (not part of the deliverable surface).
use encx_core::encoders::{
    concat_modalities, fit_ridge_bootstrap, train_network, Architecture, RidgeConfig, TrainConfig,
};
use encx_core::metrics::pearson_per_voxel;
use encx_core::synthgen::{self, SynthConfig, Structure};
use ndarray::Array2;

fn mean_r(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    pearson_per_voxel(pred, truth).unwrap().r.mean().unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("nonlinear");
    let t_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1600);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let max_epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(200);
    let patience: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(10);
    let dropout: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.15);

    let cfg = match which {
        "preset-nonlinear" => synthgen::preset_nonlinear(0),
        "preset-additive" => synthgen::preset_additive(0),
        name => {
            let structure = match name {
                "nonlinear" => Structure::Nonlinear,
                "additive" => Structure::Additive,
                _ => Structure::Linear,
            };
            SynthConfig {
                t_train,
                t_test: 400,
                v: 48,
                d_sem: 8,
                d_aud: 4,
                noise_sd: 0.5,
                structure,
                roi_plan: synthgen::equal_rois(48, &["a", "b"]),
                n_train_stories: 2,
                seed: 0,
                ..Default::default()
            }
        }
    };
    let cfg = SynthConfig { t_train, ..cfg };
    let data = synthgen::generate(&cfg).unwrap();
    let (sem_tr, aud_tr) = data.train_design(&cfg).unwrap();
    let (sem_te, aud_te) = data.test_design(&cfg).unwrap();
    let (x_train, split) = concat_modalities(&sem_tr, &aud_tr).unwrap();
    let (x_test, _) = concat_modalities(&sem_te, &aud_te).unwrap();
    let y_train = data.train_responses();
    let truth = data.test_stack().unwrap().mean();

    let tc = TrainConfig {
        batch_size: 64,
        max_epochs,
        patience,
        lr,
        weight_decay: 1e-4,
        dropout,
        seed: 0,
        ..Default::default()
    };

    let t0 = std::time::Instant::now();
    let ridge = fit_ridge_bootstrap(&x_train, &y_train, &RidgeConfig::default()).unwrap();
    let r_ridge = mean_r(&ridge.predict(&x_test).unwrap(), &truth);
    println!("ridge      r = {r_ridge:.4}   ({:.1?})", t0.elapsed());

    for (name, arch, sp) in [
        ("mllinear", Architecture::MlLinear, None),
        ("mlp", Architecture::Mlp, None),
        ("dimlp", Architecture::Dimlp, Some(split)),
    ] {
        let t0 = std::time::Instant::now();
        let ens = train_network(arch, &x_train, &y_train, &tc, sp).unwrap();
        let r = mean_r(&ens.predict(&x_test).unwrap(), &truth);
        println!(
            "{name:10} r = {r:.4}   val_mae = {:.4}  ({:.1?})",
            ens.mean_val_mae(),
            t0.elapsed()
        );
    }
}
