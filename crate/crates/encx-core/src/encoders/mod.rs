//! Encoder architectures and the training/ensembling recipe.
//!
//! Four predictors map stimulus features to responses: ridge regression with
//! bootstrapped per-target regularization, and three one-hidden-layer
//! networks (`mlp`, `mllinear`, `dimlp`) trained with MAE loss, decoupled
//! weight decay, contiguous 5-fold cross-validation, and early stopping.

mod network;
mod ridge;
mod train;

pub use network::{
    AdamW, Architecture, BatchNorm, ForwardCache, Gradients, LinearLayer, Mode, NetworkModel,
    HIDDEN_UNITS,
};
pub use ridge::{default_alpha_grid, fit_ridge_bootstrap, RidgeConfig, RidgeModel};
pub use train::{
    hyperparameter_search, train_network, EnsemblePredictor, OutputSpace, TrainConfig,
};

use crate::error::{EncxError, Result};
use crate::tensorio::{read_matrix, write_matrix, MatrixContainer};
use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Column-wise concatenation with the semantic block first. Returns the
/// combined matrix and the boundary column index (the `modality_split` a
/// `dimlp` needs).
pub fn concat_modalities(
    x_sem: &Array2<f64>,
    x_aud: &Array2<f64>,
) -> Result<(Array2<f64>, usize)> {
    if x_sem.nrows() != x_aud.nrows() {
        return Err(EncxError::ShapeMismatch(format!(
            "modalities have {} and {} rows",
            x_sem.nrows(),
            x_aud.nrows()
        )));
    }
    let split = x_sem.ncols();
    let mut out = Array2::<f64>::zeros((x_sem.nrows(), split + x_aud.ncols()));
    out.slice_mut(s![.., ..split]).assign(x_sem);
    out.slice_mut(s![.., split..]).assign(x_aud);
    Ok((out, split))
}

/// Any trained encoder, uniformly predictable and serializable.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Ridge(RidgeModel),
    Network(EnsemblePredictor),
}

impl TrainedModel {
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            TrainedModel::Ridge(m) => m.predict(x),
            TrainedModel::Network(m) => m.predict(x),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TrainedModel::Ridge(_) => "ridge",
            TrainedModel::Network(_) => "network",
        }
    }
}

/// Descriptor stored next to a model's parameter tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub arch: Option<Architecture>,
    /// Which feature blocks the model was trained on ("semantic", "audio", "both").
    pub modality: String,
    pub modality_split: Option<usize>,
    pub output_space: OutputSpace,
    /// Component count when `output_space` is `pca`.
    pub n_pca: Option<usize>,
    pub feature_dim: usize,
    pub target_dim: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge_config: Option<RidgeConfig>,
}

fn write_tensor(dir: &Path, name: &str, a: &Array2<f64>) -> Result<()> {
    write_matrix(
        &MatrixContainer::from_f64(a),
        dir.join(format!("{name}.encx")),
    )
}

fn read_tensor(dir: &Path, name: &str) -> Result<Array2<f64>> {
    Ok(read_matrix(dir.join(format!("{name}.encx")))?.to_f64())
}

/// Serialize a model to `dir`: `descriptor.json` plus one container per
/// parameter tensor. Parameters narrow to float32 on disk.
pub fn save_model(dir: impl AsRef<Path>, model: &TrainedModel, meta: &ModelMeta) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| EncxError::io(dir, e))?;
    let desc_path = dir.join("descriptor.json");
    std::fs::write(&desc_path, serde_json::to_string_pretty(meta)?)
        .map_err(|e| EncxError::io(desc_path, e))?;
    match model {
        TrainedModel::Ridge(m) => {
            write_tensor(dir, "weights", &m.weights)?;
            write_tensor(dir, "bias", &m.bias.clone().insert_axis(Axis(0)))?;
            write_tensor(dir, "alphas", &m.alphas.clone().insert_axis(Axis(0)))?;
            let boots = m.selected_alphas.len();
            let per = m.selected_alphas.first().map_or(0, Vec::len);
            let sel = Array2::from_shape_fn((boots, per), |(b, j)| m.selected_alphas[b][j]);
            write_tensor(dir, "selected_alphas", &sel)?;
            let flags = Array2::from_shape_fn((1, m.degenerate_targets.len()), |(_, i)| {
                m.degenerate_targets[i] as f64
            });
            write_tensor(dir, "degenerate_targets", &flags)?;
        }
        TrainedModel::Network(ens) => {
            for (f, fold) in ens.fold_models.iter().enumerate() {
                for (name, tensor) in fold.tensors() {
                    write_tensor(dir, &format!("fold{f}_{name}"), &tensor)?;
                }
            }
            let val = Array2::from_shape_fn((1, ens.fold_val_mae.len()), |(_, i)| {
                ens.fold_val_mae[i]
            });
            write_tensor(dir, "fold_val_mae", &val)?;
        }
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(TrainedModel, ModelMeta)> {
    let dir = dir.as_ref();
    let desc_path = dir.join("descriptor.json");
    let text = std::fs::read_to_string(&desc_path).map_err(|e| EncxError::io(&desc_path, e))?;
    let meta: ModelMeta = serde_json::from_str(&text)?;
    let model = match meta.kind.as_str() {
        "ridge" => {
            let weights = read_tensor(dir, "weights")?;
            let bias = read_tensor(dir, "bias")?.row(0).to_owned();
            let alphas = read_tensor(dir, "alphas")?.row(0).to_owned();
            let sel = read_tensor(dir, "selected_alphas")?;
            let selected_alphas = sel
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect();
            let degenerate = read_tensor(dir, "degenerate_targets")?
                .row(0)
                .iter()
                .map(|&x| x as usize)
                .collect();
            TrainedModel::Ridge(RidgeModel {
                weights,
                bias,
                alphas,
                selected_alphas,
                degenerate_targets: degenerate,
            })
        }
        "network" => {
            let arch = meta
                .arch
                .ok_or_else(|| EncxError::Manifest("network model without arch".into()))?;
            let cfg = meta
                .train_config
                .clone()
                .ok_or_else(|| EncxError::Manifest("network model without train config".into()))?;
            let mut folds = Vec::with_capacity(cfg.n_folds);
            for f in 0..cfg.n_folds {
                let prefix = format!("fold{f}_");
                let mut tensors: BTreeMap<String, Array2<f64>> = BTreeMap::new();
                for entry in std::fs::read_dir(dir).map_err(|e| EncxError::io(dir, e))? {
                    let entry = entry.map_err(|e| EncxError::io(dir, e))?;
                    let name = entry.file_name().to_string_lossy().into_owned();
                    if let Some(stem) = name
                        .strip_suffix(".encx")
                        .and_then(|s| s.strip_prefix(&prefix))
                    {
                        tensors.insert(
                            stem.to_string(),
                            read_tensor(dir, &format!("{prefix}{stem}"))?,
                        );
                    }
                }
                folds.push(NetworkModel::from_tensors(
                    arch,
                    meta.modality_split,
                    cfg.dropout,
                    cfg.bn_momentum,
                    &tensors,
                )?);
            }
            let fold_val_mae = read_tensor(dir, "fold_val_mae")?.row(0).to_vec();
            TrainedModel::Network(EnsemblePredictor {
                arch,
                modality_split: meta.modality_split,
                output_space: meta.output_space,
                fold_models: folds,
                fold_val_mae,
            })
        }
        other => {
            return Err(EncxError::Manifest(format!(
                "unknown model kind '{other}' in {}",
                desc_path.display()
            )))
        }
    };
    Ok((model, meta))
}
