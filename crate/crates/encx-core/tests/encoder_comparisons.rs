//! Cross-module checks: the encoder family trained on generated datasets
//! with known structure, compared through held-out correlation.

use encx_core::encoders::{
    concat_modalities, fit_ridge_bootstrap, hyperparameter_search, train_network, Architecture,
    RidgeConfig, TrainConfig,
};
use encx_core::metrics::pearson_per_voxel;
use encx_core::synthgen::{self, SynthConfig};
use ndarray::Array2;

struct Prepared {
    x_train: Array2<f64>,
    x_test: Array2<f64>,
    split: usize,
    y_train: Array2<f64>,
    truth: Array2<f64>,
}

fn prepare(cfg: &SynthConfig) -> Prepared {
    let data = synthgen::generate(cfg).unwrap();
    let (sem_tr, aud_tr) = data.train_design(cfg).unwrap();
    let (sem_te, aud_te) = data.test_design(cfg).unwrap();
    let (x_train, split) = concat_modalities(&sem_tr, &aud_tr).unwrap();
    let (x_test, _) = concat_modalities(&sem_te, &aud_te).unwrap();
    Prepared {
        x_train,
        x_test,
        split,
        y_train: data.train_responses(),
        truth: data.test_stack().unwrap().mean(),
    }
}

fn mean_test_r(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let r = pearson_per_voxel(pred, truth).unwrap();
    r.r.mean().unwrap()
}

fn quick_train_cfg(seed: u64) -> TrainConfig {
    // MAE training on desk-scale data wants a hotter rate and a longer
    // grace period than the full-scale defaults (an epoch here is ~20 steps).
    TrainConfig {
        batch_size: 64,
        max_epochs: 300,
        patience: 30,
        lr: 1e-2,
        weight_decay: 1e-4,
        dropout: 0.1,
        seed,
        ..Default::default()
    }
}

fn small_nonlinear(seed: u64) -> SynthConfig {
    SynthConfig {
        t_train: 800,
        t_test: 300,
        v: 48,
        d_sem: 8,
        d_aud: 4,
        noise_sd: 0.5,
        structure: encx_core::synthgen::Structure::Nonlinear,
        roi_plan: synthgen::equal_rois(48, &["a", "b"]),
        n_train_stories: 2,
        seed,
        ..Default::default()
    }
}

#[test]
fn mllinear_matches_ridge_on_linear_data() {
    let cfg = SynthConfig {
        structure: encx_core::synthgen::Structure::Linear,
        noise_sd: 0.2,
        ..small_nonlinear(1)
    };
    let p = prepare(&cfg);

    let ridge = fit_ridge_bootstrap(&p.x_train, &p.y_train, &RidgeConfig::default()).unwrap();
    let r_ridge = mean_test_r(&ridge.predict(&p.x_test).unwrap(), &p.truth);

    let ens = train_network(
        Architecture::MlLinear,
        &p.x_train,
        &p.y_train,
        &quick_train_cfg(0),
        None,
    )
    .unwrap();
    let r_ml = mean_test_r(&ens.predict(&p.x_test).unwrap(), &p.truth);

    println!("linear data: ridge r = {r_ridge:.4}, mllinear r = {r_ml:.4}");
    assert!(r_ridge > 0.9, "ridge r = {r_ridge}");
    assert!(r_ml > 0.9, "mllinear r = {r_ml}");
    assert!((r_ridge - r_ml).abs() < 0.05);
}

#[test]
fn mlp_beats_mllinear_on_nonlinear_data() {
    let cfg = synthgen::preset_nonlinear(0);
    let p = prepare(&cfg);
    let tc = quick_train_cfg(0);

    let mlp = train_network(Architecture::Mlp, &p.x_train, &p.y_train, &tc, None).unwrap();
    let r_mlp = mean_test_r(&mlp.predict(&p.x_test).unwrap(), &p.truth);

    let ml = train_network(Architecture::MlLinear, &p.x_train, &p.y_train, &tc, None).unwrap();
    let r_ml = mean_test_r(&ml.predict(&p.x_test).unwrap(), &p.truth);

    let margin = r_mlp - r_ml;
    println!("nonlinear data: mlp r = {r_mlp:.4}, mllinear r = {r_ml:.4}, margin = {margin:.4}");
    assert!(
        margin > 0.0,
        "mlp should beat mllinear: {r_mlp} vs {r_ml}"
    );
    // Golden margin for this config and seed, frozen from a reference run;
    // training is bit-deterministic so this only moves if the code does.
    let golden = 0.1527;
    assert!(
        (margin - golden).abs() < 1e-3,
        "margin {margin} vs golden {golden}"
    );
}

#[test]
fn dimlp_matches_mlp_on_additive_data() {
    let cfg = synthgen::preset_additive(0);
    let p = prepare(&cfg);
    let tc = quick_train_cfg(0);

    let mlp = train_network(Architecture::Mlp, &p.x_train, &p.y_train, &tc, None).unwrap();
    let r_mlp = mean_test_r(&mlp.predict(&p.x_test).unwrap(), &p.truth);

    let dimlp = train_network(
        Architecture::Dimlp,
        &p.x_train,
        &p.y_train,
        &tc,
        Some(p.split),
    )
    .unwrap();
    let r_dimlp = mean_test_r(&dimlp.predict(&p.x_test).unwrap(), &p.truth);

    println!("additive data: mlp r = {r_mlp:.4}, dimlp r = {r_dimlp:.4}");
    assert!(
        (r_mlp - r_dimlp).abs() < 0.01,
        "additive data has no cross-modal term: {r_mlp} vs {r_dimlp}"
    );
}

#[test]
fn search_improves_over_midpoint_config() {
    let cfg = SynthConfig {
        t_train: 500,
        t_test: 200,
        v: 12,
        d_sem: 4,
        d_aud: 2,
        roi_plan: synthgen::equal_rois(12, &["a"]),
        ..small_nonlinear(2)
    };
    let p = prepare(&cfg);

    // Midpoint of the search ranges in log space.
    let base = TrainConfig {
        batch_size: 64,
        max_epochs: 60,
        n_search_trials: 16,
        seed: 5,
        ..Default::default()
    };
    let midpoint = TrainConfig {
        lr: (base.lr_range.0 * base.lr_range.1).sqrt(),
        weight_decay: (base.wd_range.0 * base.wd_range.1).sqrt(),
        dropout: 0.5 * (base.dropout_range.0 + base.dropout_range.1),
        ..base.clone()
    };
    let mid_ens =
        train_network(Architecture::Mlp, &p.x_train, &p.y_train, &midpoint, None).unwrap();
    let r_mid = mean_test_r(&mid_ens.predict(&p.x_test).unwrap(), &p.truth);

    let found = hyperparameter_search(Architecture::Mlp, &p.x_train, &p.y_train, &base, None)
        .unwrap();
    let found_ens =
        train_network(Architecture::Mlp, &p.x_train, &p.y_train, &found, None).unwrap();
    let r_found = mean_test_r(&found_ens.predict(&p.x_test).unwrap(), &p.truth);

    println!(
        "search: midpoint lr {:.2e} r = {r_mid:.4}; found lr {:.2e} r = {r_found:.4}",
        midpoint.lr, found.lr
    );
    assert!(
        r_found > r_mid,
        "searched config should beat the midpoint: {r_found} vs {r_mid}"
    );
}
