//! The network encoder family: a single 256-unit hidden layer in three
//! flavors, trained with MAE loss and decoupled weight decay.
//!
//! * `Mlp` — linear, batch norm, tanh, dropout, linear.
//! * `MlLinear` — the same shape with identity activation and no batch norm
//!   or dropout; an exactly linear end-to-end map (a reduced-rank control).
//! * `Dimlp` — one 256-unit branch per modality (each with batch norm, tanh,
//!   dropout), concatenated and fused by a final linear layer, so the only
//!   cross-modality weights live in the output projection.
//!
//! All forward/backward code is hand-rolled over `ndarray` so gradients can
//! be checked against finite differences, and every random draw comes from a
//! seeded generator.

use crate::error::{EncxError, Result};
use crate::rng::SplitMix64;
use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

pub const HIDDEN_UNITS: usize = 256;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    MlLinear,
    Dimlp,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::MlLinear => "mllinear",
            Architecture::Dimlp => "dimlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Architecture::Mlp),
            "mllinear" => Ok(Architecture::MlLinear),
            "dimlp" => Ok(Architecture::Dimlp),
            other => Err(EncxError::InvalidArgument(format!(
                "unknown architecture '{other}' (expected mlp, mllinear, or dimlp)"
            ))),
        }
    }

    fn has_batch_norm(&self) -> bool {
        !matches!(self, Architecture::MlLinear)
    }

    fn has_tanh(&self) -> bool {
        !matches!(self, Architecture::MlLinear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    /// in x out
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearLayer {
    fn init(rng: &mut SplitMix64, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.uniform(-bound, bound));
        let b = Array1::from_shape_fn(fan_out, |_| rng.uniform(-bound, bound));
        LinearLayer { w, b }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(width: usize, momentum: f64) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum,
        }
    }
}

#[derive(Debug, Clone)]
struct Branch {
    lin: LinearLayer,
    bn: Option<BatchNorm>,
}

/// One trained network (a single cross-validation fold's parameters).
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub arch: Architecture,
    /// Column index separating the semantic block from the audio block;
    /// required for `Dimlp`, ignored otherwise.
    pub modality_split: Option<usize>,
    pub dropout_rate: f64,
    pub input_dim: usize,
    pub output_dim: usize,
    branches: Vec<Branch>,
    out: LinearLayer,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    mode: Mode,
    inputs: Vec<Array2<f64>>,
    bn_xhat: Vec<Option<Array2<f64>>>,
    bn_inv_std: Vec<Option<Array1<f64>>>,
    activations: Vec<Array2<f64>>,
    dropout_masks: Vec<Option<Array2<f64>>>,
    hidden_concat: Array2<f64>,
}

/// Gradients in the same layout as [`NetworkModel::param_vec`].
pub struct Gradients {
    pub flat: Vec<f64>,
}

impl NetworkModel {
    /// Initialize with uniform fan-in scaling from a fixed seed.
    pub fn new(
        arch: Architecture,
        input_dim: usize,
        output_dim: usize,
        modality_split: Option<usize>,
        dropout_rate: f64,
        bn_momentum: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(EncxError::InvalidArgument(
                "network dimensions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(EncxError::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let branch_dims: Vec<usize> = match arch {
            Architecture::Dimlp => {
                let split = modality_split.ok_or_else(|| {
                    EncxError::InvalidArgument("dimlp requires a modality split index".into())
                })?;
                if split == 0 || split >= input_dim {
                    return Err(EncxError::InvalidArgument(format!(
                        "modality split {split} must fall inside 1..{input_dim}"
                    )));
                }
                vec![split, input_dim - split]
            }
            _ => vec![input_dim],
        };
        let branches: Vec<Branch> = branch_dims
            .iter()
            .map(|&d| Branch {
                lin: LinearLayer::init(&mut rng, d, HIDDEN_UNITS),
                bn: arch
                    .has_batch_norm()
                    .then(|| BatchNorm::new(HIDDEN_UNITS, bn_momentum)),
            })
            .collect();
        let concat_width = HIDDEN_UNITS * branches.len();
        let out = LinearLayer::init(&mut rng, concat_width, output_dim);
        Ok(NetworkModel {
            arch,
            modality_split: match arch {
                Architecture::Dimlp => modality_split,
                _ => None,
            },
            dropout_rate,
            input_dim,
            output_dim,
            branches,
            out,
        })
    }

    fn branch_input<'a>(&self, x: &'a Array2<f64>, b: usize) -> Array2<f64> {
        match self.arch {
            Architecture::Dimlp => {
                let split = self.modality_split.expect("dimlp has a split");
                if b == 0 {
                    x.slice(s![.., ..split]).to_owned()
                } else {
                    x.slice(s![.., split..]).to_owned()
                }
            }
            _ => x.clone(),
        }
    }

    /// Forward pass. In `Train` mode batch statistics are used and running
    /// statistics updated; dropout needs the caller's generator. In `Eval`
    /// mode running statistics are used and dropout is the identity.
    pub fn forward(
        &mut self,
        x: &Array2<f64>,
        mode: Mode,
        rng: Option<&mut SplitMix64>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim {
            return Err(EncxError::ShapeMismatch(format!(
                "network expects {} input columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let batch = x.nrows();
        if mode == Mode::Train && batch < 2 && self.arch.has_batch_norm() {
            return Err(EncxError::InvalidArgument(
                "batch norm needs at least 2 rows per training batch".into(),
            ));
        }
        let mut rng = rng;

        let n_branches = self.branches.len();
        let mut inputs = Vec::with_capacity(n_branches);
        let mut bn_xhat = Vec::with_capacity(n_branches);
        let mut bn_inv_std = Vec::with_capacity(n_branches);
        let mut activations = Vec::with_capacity(n_branches);
        let mut dropout_masks = Vec::with_capacity(n_branches);
        let mut hidden_concat = Array2::<f64>::zeros((batch, HIDDEN_UNITS * n_branches));

        for b in 0..n_branches {
            let xb = self.branch_input(x, b);
            let mut z = xb.dot(&self.branches[b].lin.w) + &self.branches[b].lin.b;

            let (xhat, inv_std) = if let Some(bn) = self.branches[b].bn.as_mut() {
                match mode {
                    Mode::Train => {
                        let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
                        let mut var = Array1::<f64>::zeros(HIDDEN_UNITS);
                        for j in 0..HIDDEN_UNITS {
                            let mut ss = 0.0;
                            for i in 0..batch {
                                let d = z[[i, j]] - mean[j];
                                ss += d * d;
                            }
                            var[j] = ss / batch as f64; // biased, used for normalization
                        }
                        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                        let mut xhat = z.clone();
                        for j in 0..HIDDEN_UNITS {
                            for i in 0..batch {
                                xhat[[i, j]] = (xhat[[i, j]] - mean[j]) * inv_std[j];
                            }
                        }
                        // Running stats track the unbiased variance.
                        let unbias = batch as f64 / (batch as f64 - 1.0);
                        for j in 0..HIDDEN_UNITS {
                            bn.running_mean[j] =
                                (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * mean[j];
                            bn.running_var[j] = (1.0 - bn.momentum) * bn.running_var[j]
                                + bn.momentum * var[j] * unbias;
                        }
                        for j in 0..HIDDEN_UNITS {
                            for i in 0..batch {
                                z[[i, j]] = bn.gamma[j] * xhat[[i, j]] + bn.beta[j];
                            }
                        }
                        (Some(xhat), Some(inv_std))
                    }
                    Mode::Eval => {
                        let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                        let mut xhat = z.clone();
                        for j in 0..HIDDEN_UNITS {
                            for i in 0..batch {
                                xhat[[i, j]] = (xhat[[i, j]] - bn.running_mean[j]) * inv_std[j];
                            }
                        }
                        for j in 0..HIDDEN_UNITS {
                            for i in 0..batch {
                                z[[i, j]] = bn.gamma[j] * xhat[[i, j]] + bn.beta[j];
                            }
                        }
                        (Some(xhat), Some(inv_std))
                    }
                }
            } else {
                (None, None)
            };

            let a = if self.arch.has_tanh() {
                z.mapv(f64::tanh)
            } else {
                z
            };

            let (h, mask) = if mode == Mode::Train && self.dropout_rate > 0.0 {
                let rng = rng.as_deref_mut().ok_or_else(|| {
                    EncxError::InvalidArgument(
                        "training forward with dropout needs a generator".into(),
                    )
                })?;
                let keep = 1.0 - self.dropout_rate;
                let mask =
                    Array2::from_shape_fn((batch, HIDDEN_UNITS), |_| {
                        if rng.next_f64() < keep {
                            1.0
                        } else {
                            0.0
                        }
                    });
                (&a * &mask / keep, Some(mask))
            } else {
                (a.clone(), None)
            };

            hidden_concat
                .slice_mut(s![.., b * HIDDEN_UNITS..(b + 1) * HIDDEN_UNITS])
                .assign(&h);
            inputs.push(xb);
            bn_xhat.push(xhat);
            bn_inv_std.push(inv_std);
            activations.push(a);
            dropout_masks.push(mask);
        }

        let y = hidden_concat.dot(&self.out.w) + &self.out.b;
        Ok((
            y,
            ForwardCache {
                mode,
                inputs,
                bn_xhat,
                bn_inv_std,
                activations,
                dropout_masks,
                hidden_concat,
            },
        ))
    }

    /// Eval-mode prediction.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut clone = self.clone(); // running stats untouched in eval mode
        let (y, _) = clone.forward(x, Mode::Eval, None)?;
        Ok(y)
    }

    /// Per-branch hidden activations (post-activation, eval mode).
    pub fn hidden_activations(&self, x: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let mut clone = self.clone();
        let (_, cache) = clone.forward(x, Mode::Eval, None)?;
        Ok(cache.activations)
    }

    /// MAE loss and parameter gradients at `x, y` for the mode recorded in
    /// the cache. Returns the loss.
    pub fn backward_mae(
        &self,
        cache: &ForwardCache,
        y_hat: &Array2<f64>,
        y: &Array2<f64>,
    ) -> Result<(f64, Gradients)> {
        if y.shape() != y_hat.shape() {
            return Err(EncxError::ShapeMismatch(format!(
                "loss shapes differ: {:?} vs {:?}",
                y_hat.shape(),
                y.shape()
            )));
        }
        let batch = y.nrows();
        let scale = 1.0 / (batch as f64 * y.ncols() as f64);
        let mut loss = 0.0;
        let mut d = Array2::<f64>::zeros(y.raw_dim());
        for i in 0..batch {
            for j in 0..y.ncols() {
                let diff = y_hat[[i, j]] - y[[i, j]];
                loss += diff.abs() * scale;
                d[[i, j]] = diff.signum() * scale;
            }
        }

        // Output layer.
        let d_out_w = cache.hidden_concat.t().dot(&d);
        let d_out_b = d.sum_axis(Axis(0));
        let dh_full = d.dot(&self.out.w.t());

        let mut branch_grads = Vec::with_capacity(self.branches.len());
        for (b, branch) in self.branches.iter().enumerate() {
            let mut dh = dh_full
                .slice(s![.., b * HIDDEN_UNITS..(b + 1) * HIDDEN_UNITS])
                .to_owned();

            if let Some(mask) = &cache.dropout_masks[b] {
                let keep = 1.0 - self.dropout_rate;
                dh = &dh * mask / keep;
            }

            if self.arch.has_tanh() {
                let a = &cache.activations[b];
                for i in 0..dh.nrows() {
                    for j in 0..HIDDEN_UNITS {
                        dh[[i, j]] *= 1.0 - a[[i, j]] * a[[i, j]];
                    }
                }
            }

            let (dz, d_gamma, d_beta) = if let Some(bn) = &branch.bn {
                let xhat = cache.bn_xhat[b].as_ref().expect("bn cache");
                let inv_std = cache.bn_inv_std[b].as_ref().expect("bn cache");
                let mut d_gamma = Array1::<f64>::zeros(HIDDEN_UNITS);
                let mut d_beta = Array1::<f64>::zeros(HIDDEN_UNITS);
                for j in 0..HIDDEN_UNITS {
                    for i in 0..dh.nrows() {
                        d_gamma[j] += dh[[i, j]] * xhat[[i, j]];
                        d_beta[j] += dh[[i, j]];
                    }
                }
                let mut dz = Array2::<f64>::zeros(dh.raw_dim());
                match cache.mode {
                    Mode::Train => {
                        // Full batch-norm backward through the batch statistics.
                        let n = dh.nrows() as f64;
                        for j in 0..HIDDEN_UNITS {
                            let g = bn.gamma[j] * inv_std[j];
                            let sum_dy = d_beta[j];
                            let sum_dy_xhat = d_gamma[j];
                            for i in 0..dh.nrows() {
                                dz[[i, j]] = g
                                    * (dh[[i, j]]
                                        - sum_dy / n
                                        - xhat[[i, j]] * sum_dy_xhat / n);
                            }
                        }
                    }
                    Mode::Eval => {
                        // Running statistics are constants here.
                        for j in 0..HIDDEN_UNITS {
                            let g = bn.gamma[j] * inv_std[j];
                            for i in 0..dh.nrows() {
                                dz[[i, j]] = g * dh[[i, j]];
                            }
                        }
                    }
                }
                (dz, Some(d_gamma), Some(d_beta))
            } else {
                (dh, None, None)
            };

            let d_w = cache.inputs[b].t().dot(&dz);
            let d_b = dz.sum_axis(Axis(0));
            branch_grads.push((d_w, d_b, d_gamma, d_beta));
        }

        // Flatten in param_vec order.
        let mut flat = Vec::with_capacity(self.param_count());
        for (d_w, d_b, d_gamma, d_beta) in &branch_grads {
            flat.extend(d_w.iter());
            flat.extend(d_b.iter());
            if let Some(g) = d_gamma {
                flat.extend(g.iter());
            }
            if let Some(g) = d_beta {
                flat.extend(g.iter());
            }
        }
        flat.extend(d_out_w.iter());
        flat.extend(d_out_b.iter());
        Ok((loss, Gradients { flat }))
    }

    pub fn mae_loss_eval(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.shape() != y.shape() {
            return Err(EncxError::ShapeMismatch("loss shapes differ".into()));
        }
        let mut loss = 0.0;
        for (a, b) in pred.iter().zip(y.iter()) {
            loss += (a - b).abs();
        }
        Ok(loss / (y.nrows() as f64 * y.ncols() as f64))
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for br in &self.branches {
            n += br.lin.w.len() + br.lin.b.len();
            if let Some(bn) = &br.bn {
                n += bn.gamma.len() + bn.beta.len();
            }
        }
        n + self.out.w.len() + self.out.b.len()
    }

    /// Trainable parameters, flattened (branch linear, bn gamma/beta, output
    /// linear). Running statistics are not included.
    pub fn param_vec(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for br in &self.branches {
            flat.extend(br.lin.w.iter());
            flat.extend(br.lin.b.iter());
            if let Some(bn) = &br.bn {
                flat.extend(bn.gamma.iter());
                flat.extend(bn.beta.iter());
            }
        }
        flat.extend(self.out.w.iter());
        flat.extend(self.out.b.iter());
        flat
    }

    /// Mask aligned with [`param_vec`]: 1.0 where decoupled weight decay
    /// applies (weight matrices), 0.0 for biases and batch-norm parameters.
    pub fn decay_mask(&self) -> Vec<f64> {
        let mut mask = Vec::with_capacity(self.param_count());
        for br in &self.branches {
            mask.extend(std::iter::repeat(1.0).take(br.lin.w.len()));
            mask.extend(std::iter::repeat(0.0).take(br.lin.b.len()));
            if let Some(bn) = &br.bn {
                mask.extend(std::iter::repeat(0.0).take(bn.gamma.len() + bn.beta.len()));
            }
        }
        mask.extend(std::iter::repeat(1.0).take(self.out.w.len()));
        mask.extend(std::iter::repeat(0.0).take(self.out.b.len()));
        mask
    }

    pub fn set_param_vec(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut take = |n: usize, dst: &mut [f64]| {
            for slot in dst.iter_mut().take(n) {
                *slot = it.next().expect("param vector too short");
            }
        };
        for br in &mut self.branches {
            take(br.lin.w.len(), br.lin.w.as_slice_mut().unwrap());
            take(br.lin.b.len(), br.lin.b.as_slice_mut().unwrap());
            if let Some(bn) = &mut br.bn {
                take(bn.gamma.len(), bn.gamma.as_slice_mut().unwrap());
                take(bn.beta.len(), bn.beta.as_slice_mut().unwrap());
            }
        }
        take(self.out.w.len(), self.out.w.as_slice_mut().unwrap());
        take(self.out.b.len(), self.out.b.as_slice_mut().unwrap());
        assert!(it.next().is_none(), "param vector too long");
    }

    /// For `MlLinear`, compose the two layers into one affine map
    /// `(weights, bias)` with `weights` of shape in x out.
    pub fn collapse_affine(&self) -> Result<(Array2<f64>, Array1<f64>)> {
        if self.arch != Architecture::MlLinear {
            return Err(EncxError::InvalidArgument(
                "collapse_affine only applies to mllinear".into(),
            ));
        }
        let lin = &self.branches[0].lin;
        let w = lin.w.dot(&self.out.w);
        let b = lin.b.dot(&self.out.w) + &self.out.b;
        Ok((w, b))
    }

    /// Access to per-branch tensors for serialization.
    pub fn tensors(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (b, br) in self.branches.iter().enumerate() {
            out.push((format!("branch{b}_w"), br.lin.w.clone()));
            out.push((
                format!("branch{b}_b"),
                br.lin.b.clone().insert_axis(Axis(0)),
            ));
            if let Some(bn) = &br.bn {
                out.push((
                    format!("branch{b}_bn_gamma"),
                    bn.gamma.clone().insert_axis(Axis(0)),
                ));
                out.push((
                    format!("branch{b}_bn_beta"),
                    bn.beta.clone().insert_axis(Axis(0)),
                ));
                out.push((
                    format!("branch{b}_bn_mean"),
                    bn.running_mean.clone().insert_axis(Axis(0)),
                ));
                out.push((
                    format!("branch{b}_bn_var"),
                    bn.running_var.clone().insert_axis(Axis(0)),
                ));
            }
        }
        out.push(("out_w".into(), self.out.w.clone()));
        out.push(("out_b".into(), self.out.b.clone().insert_axis(Axis(0))));
        out
    }

    /// Rebuild a model from serialized tensors (inverse of [`tensors`]).
    pub fn from_tensors(
        arch: Architecture,
        modality_split: Option<usize>,
        dropout_rate: f64,
        bn_momentum: f64,
        tensors: &std::collections::BTreeMap<String, Array2<f64>>,
    ) -> Result<Self> {
        let fetch = |name: &str| -> Result<&Array2<f64>> {
            tensors
                .get(name)
                .ok_or_else(|| EncxError::Manifest(format!("model tensor '{name}' missing")))
        };
        let n_branches = if arch == Architecture::Dimlp { 2 } else { 1 };
        let mut branches = Vec::new();
        for b in 0..n_branches {
            let w = fetch(&format!("branch{b}_w"))?.clone();
            let bias = fetch(&format!("branch{b}_b"))?.row(0).to_owned();
            let bn = if arch.has_batch_norm() {
                Some(BatchNorm {
                    gamma: fetch(&format!("branch{b}_bn_gamma"))?.row(0).to_owned(),
                    beta: fetch(&format!("branch{b}_bn_beta"))?.row(0).to_owned(),
                    running_mean: fetch(&format!("branch{b}_bn_mean"))?.row(0).to_owned(),
                    running_var: fetch(&format!("branch{b}_bn_var"))?.row(0).to_owned(),
                    momentum: bn_momentum,
                })
            } else {
                None
            };
            branches.push(Branch {
                lin: LinearLayer { w, b: bias },
                bn,
            });
        }
        let out_w = fetch("out_w")?.clone();
        let out_b = fetch("out_b")?.row(0).to_owned();
        let input_dim = match arch {
            Architecture::Dimlp => branches[0].lin.w.nrows() + branches[1].lin.w.nrows(),
            _ => branches[0].lin.w.nrows(),
        };
        let output_dim = out_w.ncols();
        Ok(NetworkModel {
            arch,
            modality_split: if arch == Architecture::Dimlp {
                modality_split
            } else {
                None
            },
            dropout_rate,
            input_dim,
            output_dim,
            branches,
            out: LinearLayer {
                w: out_w,
                b: out_b,
            },
        })
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer over a flat parameter
/// vector  (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], decay_mask: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            // Decay is decoupled from the gradient path.
            params[i] -= self.lr * self.weight_decay * decay_mask[i] * params[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_input(rng: &mut SplitMix64, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.uniform(-1.0, 1.0))
    }

    fn finite_diff_check(arch: Architecture, split: Option<usize>, dim: usize) {
        let mut model =
            NetworkModel::new(arch, dim, 3, split, 0.2, 0.1, 99).unwrap();
        let mut rng = SplitMix64::new(7);
        let x = small_input(&mut rng, 5, dim);
        let y = small_input(&mut rng, 5, 3);

        // Make running stats nontrivial so eval mode is not the identity.
        if arch.has_batch_norm() {
            let mut warm = SplitMix64::new(8);
            let xw = small_input(&mut warm, 16, dim);
            let _ = model.forward(&xw, Mode::Train, Some(&mut warm)).unwrap();
        }

        // Analytic gradient with dropout disabled, batch norm in inference mode.
        let (y_hat, cache) = model.clone().forward(&x, Mode::Eval, None).unwrap();
        let (_, grads) = model.backward_mae(&cache, &y_hat, &y).unwrap();

        let base = model.param_vec();
        let h = 1e-4;
        let mut checked = 0usize;
        // Every parameter, central differences.
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut m_plus = model.clone();
            m_plus.set_param_vec(&plus);
            let lp = m_plus.mae_loss_eval(&x, &y).unwrap();

            let mut minus = base.clone();
            minus[i] -= h;
            let mut m_minus = model.clone();
            m_minus.set_param_vec(&minus);
            let lm = m_minus.mae_loss_eval(&x, &y).unwrap();

            let fd = (lp - lm) / (2.0 * h);
            let an = grads.flat[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "{arch:?} param {i}: analytic {an} vs fd {fd}"
            );
            checked += 1;
        }
        assert_eq!(checked, base.len());
    }

    #[test]
    fn gradient_check_mllinear() {
        finite_diff_check(Architecture::MlLinear, None, 4);
    }

    #[test]
    fn gradient_check_mlp() {
        finite_diff_check(Architecture::Mlp, None, 4);
    }

    #[test]
    fn gradient_check_dimlp() {
        finite_diff_check(Architecture::Dimlp, Some(2), 5);
    }

    #[test]
    fn train_mode_gradient_matches_finite_differences() {
        // Same check through the batch-statistics path (dropout off).
        let model = NetworkModel::new(Architecture::Mlp, 3, 2, None, 0.0, 0.1, 5).unwrap();
        let mut rng = SplitMix64::new(17);
        let x = small_input(&mut rng, 6, 3);
        let y = small_input(&mut rng, 6, 2);

        let train_loss = |m: &NetworkModel| {
            let mut mc = m.clone();
            let (y_hat, _) = mc.forward(&x, Mode::Train, None).unwrap();
            let mut l = 0.0;
            for (a, b) in y_hat.iter().zip(y.iter()) {
                l += (a - b).abs();
            }
            l / (y.nrows() as f64 * y.ncols() as f64)
        };

        let (y_hat, cache) = model.clone().forward(&x, Mode::Train, None).unwrap();
        let (_, grads) = model.backward_mae(&cache, &y_hat, &y).unwrap();
        let base = model.param_vec();
        let h = 1e-5;
        for i in (0..base.len()).step_by(17) {
            let mut plus = base.clone();
            plus[i] += h;
            let mut mp = model.clone();
            mp.set_param_vec(&plus);
            let mut minus = base.clone();
            minus[i] -= h;
            let mut mm = model.clone();
            mm.set_param_vec(&minus);
            let fd = (train_loss(&mp) - train_loss(&mm)) / (2.0 * h);
            let an = grads.flat[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "param {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn mllinear_collapses_to_single_affine_map() {
        let model = NetworkModel::new(Architecture::MlLinear, 6, 4, None, 0.0, 0.1, 3).unwrap();
        let mut rng = SplitMix64::new(4);
        let x = small_input(&mut rng, 10, 6);
        let pred = model.predict(&x).unwrap();
        let (w, b) = model.collapse_affine().unwrap();
        let direct = x.dot(&w) + &b;
        for (a, c) in pred.iter().zip(direct.iter()) {
            assert!((a - c).abs() < 1e-6);
        }
    }

    #[test]
    fn dimlp_zeroing_audio_block_only_touches_audio_branch() {
        let split = 3usize;
        let dim = 7usize;
        let model = NetworkModel::new(Architecture::Dimlp, dim, 2, Some(split), 0.1, 0.1, 11)
            .unwrap();
        let mut rng = SplitMix64::new(12);
        let x = small_input(&mut rng, 6, dim);
        let mut x_zeroed = x.clone();
        for i in 0..6 {
            for j in split..dim {
                x_zeroed[[i, j]] = 0.0;
            }
        }
        let acts = model.hidden_activations(&x).unwrap();
        let acts_z = model.hidden_activations(&x_zeroed).unwrap();
        // Semantic branch untouched.
        for (a, b) in acts[0].iter().zip(acts_z[0].iter()) {
            assert_eq!(a, b);
        }
        // Audio branch actually changed.
        let diff: f64 = acts[1]
            .iter()
            .zip(acts_z[1].iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn init_is_deterministic() {
        let a = NetworkModel::new(Architecture::Mlp, 5, 3, None, 0.2, 0.1, 42).unwrap();
        let b = NetworkModel::new(Architecture::Mlp, 5, 3, None, 0.2, 0.1, 42).unwrap();
        assert_eq!(a.param_vec(), b.param_vec());
        let c = NetworkModel::new(Architecture::Mlp, 5, 3, None, 0.2, 0.1, 43).unwrap();
        assert_ne!(a.param_vec(), c.param_vec());
    }

    #[test]
    fn tensor_round_trip_preserves_predictions() {
        let mut model =
            NetworkModel::new(Architecture::Dimlp, 6, 3, Some(4), 0.15, 0.1, 21).unwrap();
        let mut rng = SplitMix64::new(22);
        let xw = small_input(&mut rng, 12, 6);
        let _ = model.forward(&xw, Mode::Train, Some(&mut rng)).unwrap();

        let map: std::collections::BTreeMap<String, Array2<f64>> =
            model.tensors().into_iter().collect();
        let rebuilt =
            NetworkModel::from_tensors(Architecture::Dimlp, Some(4), 0.15, 0.1, &map).unwrap();
        let x = small_input(&mut rng, 5, 6);
        let a = model.predict(&x).unwrap();
        let b = rebuilt.predict(&x).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_only_active_in_training() {
        let mut model = NetworkModel::new(Architecture::Mlp, 4, 2, None, 0.5, 0.1, 31).unwrap();
        let mut rng = SplitMix64::new(32);
        let x = small_input(&mut rng, 8, 4);
        let e1 = model.predict(&x).unwrap();
        let e2 = model.predict(&x).unwrap();
        assert_eq!(e1, e2); // eval is deterministic, no dropout
        let (t1, _) = model
            .clone()
            .forward(&x, Mode::Train, Some(&mut SplitMix64::new(1)))
            .unwrap();
        let (t2, _) = model
            .clone()
            .forward(&x, Mode::Train, Some(&mut SplitMix64::new(2)))
            .unwrap();
        assert_ne!(t1, t2); // different masks
    }

    #[test]
    fn invalid_construction_is_rejected() {
        assert!(NetworkModel::new(Architecture::Dimlp, 6, 3, None, 0.1, 0.1, 0).is_err());
        assert!(NetworkModel::new(Architecture::Dimlp, 6, 3, Some(6), 0.1, 0.1, 0).is_err());
        assert!(NetworkModel::new(Architecture::Mlp, 6, 3, None, 1.0, 0.1, 0).is_err());
        assert!(NetworkModel::new(Architecture::Mlp, 0, 3, None, 0.1, 0.1, 0).is_err());
    }
}
