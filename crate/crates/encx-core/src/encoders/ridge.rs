//! Ridge regression with bootstrapped per-target regularization.
//!
//! Training rows are grouped into contiguous chunks; each bootstrap iteration
//! holds out a random 25% of chunks, scores every grid alpha by holdout
//! correlation per target, and the selected alphas are averaged in log space
//! across iterations before the final full-data solve.

use crate::error::{EncxError, Result};
use crate::linalg::sym_eigen_desc;
use crate::rng::{derive_seed, SplitMix64};
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub alpha_grid: Vec<f64>,
    pub n_boot: usize,
    pub chunk_len: usize,
    pub holdout_frac: f64,
    /// Z-score features and center targets with training statistics before
    /// solving; the learned map is folded back so predictions stay exactly
    /// linear in the raw inputs. With `false` the solver fits the textbook
    /// `(XᵀX + aI)w = Xᵀy` with no centering and zero bias.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            alpha_grid: default_alpha_grid(),
            n_boot: 3,
            chunk_len: 20,
            holdout_frac: 0.25,
            standardize: true,
            seed: 0,
        }
    }
}

/// Ten log-spaced alphas in [1, 1e4].
pub fn default_alpha_grid() -> Vec<f64> {
    (0..10)
        .map(|i| 10f64.powf(4.0 * i as f64 / 9.0))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RidgeModel {
    /// D x P weight matrix over raw (unstandardized) inputs.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Per-target regularization strength used for the final solve: the
    /// log-space average of the per-iteration selections.
    pub alphas: Array1<f64>,
    /// Grid alpha selected in each bootstrap iteration, per target
    /// (n_boot rows of length P).
    pub selected_alphas: Vec<Vec<f64>>,
    /// Targets whose holdout block was constant in some bootstrap iteration;
    /// those iterations contributed the median grid alpha.
    pub degenerate_targets: Vec<usize>,
}

impl RidgeModel {
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weights.nrows() {
            return Err(EncxError::ShapeMismatch(format!(
                "ridge predict: input has {} features, model expects {}",
                x.ncols(),
                self.weights.nrows()
            )));
        }
        Ok(x.dot(&self.weights) + &self.bias)
    }
}

struct Standardized {
    x: Array2<f64>,
    x_mean: Array1<f64>,
    x_sd: Array1<f64>,
    y: Array2<f64>,
    y_mean: Array1<f64>,
}

fn standardize(x: &Array2<f64>, y: &Array2<f64>, enabled: bool) -> Standardized {
    let d = x.ncols();
    let p = y.ncols();
    if !enabled {
        return Standardized {
            x: x.clone(),
            x_mean: Array1::zeros(d),
            x_sd: Array1::ones(d),
            y: y.clone(),
            y_mean: Array1::zeros(p),
        };
    }
    let t = x.nrows() as f64;
    let x_mean = x.mean_axis(Axis(0)).expect("nonempty x");
    let mut x_sd = Array1::<f64>::zeros(d);
    for j in 0..d {
        let mut ss = 0.0;
        for i in 0..x.nrows() {
            let dlt = x[[i, j]] - x_mean[j];
            ss += dlt * dlt;
        }
        let sd = (ss / (t - 1.0)).sqrt();
        x_sd[j] = if sd > 0.0 { sd } else { 1.0 };
    }
    let mut xs = x.clone();
    for j in 0..d {
        let (m, s) = (x_mean[j], x_sd[j]);
        for i in 0..xs.nrows() {
            xs[[i, j]] = (xs[[i, j]] - m) / s;
        }
    }
    let y_mean = y.mean_axis(Axis(0)).expect("nonempty y");
    let yc = y - &y_mean;
    Standardized {
        x: xs,
        x_mean,
        x_sd,
        y: yc,
        y_mean,
    }
}

/// Ridge solve for a block of targets sharing one alpha, reusing the
/// eigendecomposition `xtx = q diag(lam) qᵀ`.
fn solve_with_alpha(
    q: &Array2<f64>,
    lam: &Array1<f64>,
    xty: &Array2<f64>,
    alpha: f64,
) -> Array2<f64> {
    let mut z = q.t().dot(xty);
    for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
        let scale = 1.0 / (lam[i].max(0.0) + alpha);
        row.mapv_inplace(|v| v * scale);
    }
    q.dot(&z)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        None
    } else {
        Some(num / (va * vb).sqrt())
    }
}

/// Fit ridge with bootstrapped per-target alpha selection.
///
/// Holdout scores are correlations clamped at zero (an anticorrelated
/// predictor is no better than a constant one); score ties prefer the larger
/// alpha, i.e. the more regularized model.
pub fn fit_ridge_bootstrap(
    x: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &RidgeConfig,
) -> Result<RidgeModel> {
    let t = x.nrows();
    let d = x.ncols();
    let p = y.ncols();
    if y.nrows() != t {
        return Err(EncxError::ShapeMismatch(format!(
            "ridge: x has {t} rows, y has {}",
            y.nrows()
        )));
    }
    if t <= cfg.chunk_len {
        return Err(EncxError::InvalidArgument(format!(
            "ridge needs more rows ({t}) than chunk_len ({})",
            cfg.chunk_len
        )));
    }
    if cfg.alpha_grid.is_empty() || cfg.alpha_grid.iter().any(|&a| !(a > 0.0)) {
        return Err(EncxError::InvalidArgument(
            "alpha grid must be nonempty and positive".into(),
        ));
    }
    if cfg.n_boot == 0 {
        return Err(EncxError::InvalidArgument("n_boot must be >= 1".into()));
    }

    let mut grid = cfg.alpha_grid.clone();
    grid.sort_by(|a, b| a.total_cmp(b));
    let median_alpha = grid[(grid.len() - 1) / 2];

    let std = standardize(x, y, cfg.standardize);

    let n_chunks = t.div_ceil(cfg.chunk_len);
    let n_holdout = ((n_chunks as f64 * cfg.holdout_frac).round() as usize)
        .clamp(1, n_chunks.saturating_sub(1));

    // Per-iteration selected alpha per target.
    let mut selected_alphas: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_boot);
    let mut degenerate = vec![false; p];

    for boot in 0..cfg.n_boot {
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, boot as u64));
        let mut chunk_ids: Vec<usize> = (0..n_chunks).collect();
        rng.shuffle(&mut chunk_ids);
        let holdout_chunks = &chunk_ids[..n_holdout];
        let mut is_holdout_row = vec![false; t];
        for &c in holdout_chunks {
            let lo = c * cfg.chunk_len;
            let hi = ((c + 1) * cfg.chunk_len).min(t);
            for r in lo..hi {
                is_holdout_row[r] = true;
            }
        }
        let train_rows: Vec<usize> = (0..t).filter(|&r| !is_holdout_row[r]).collect();
        let hold_rows: Vec<usize> = (0..t).filter(|&r| is_holdout_row[r]).collect();

        let x_tr = std.x.select(Axis(0), &train_rows);
        let y_tr = std.y.select(Axis(0), &train_rows);
        let x_ho = std.x.select(Axis(0), &hold_rows);
        let y_ho = std.y.select(Axis(0), &hold_rows);

        let xtx = x_tr.t().dot(&x_tr);
        let xty = x_tr.t().dot(&y_tr);
        let (lam, q) = sym_eigen_desc(&xtx)?;

        // Holdout predictions for every alpha; grid is small so this is the
        // cheap part relative to the eigendecomposition.
        let preds: Vec<Array2<f64>> = grid
            .par_iter()
            .map(|&alpha| {
                let w = solve_with_alpha(&q, &lam, &xty, alpha);
                x_ho.dot(&w)
            })
            .collect();

        let mut iter_selection = vec![median_alpha; p];
        for target in 0..p {
            let truth: Vec<f64> = y_ho.column(target).to_vec();
            let t_var = {
                let m = truth.iter().sum::<f64>() / truth.len() as f64;
                truth.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            };
            if t_var <= 0.0 {
                degenerate[target] = true;
                continue; // median grid alpha stands in for this iteration
            }
            let mut best_score = -1.0f64;
            let mut best_alpha = grid[0];
            for (gi, &alpha) in grid.iter().enumerate() {
                let pred: Vec<f64> = preds[gi].column(target).to_vec();
                let score = pearson(&pred, &truth).unwrap_or(0.0).max(0.0);
                if score >= best_score {
                    best_score = score;
                    best_alpha = alpha;
                }
            }
            iter_selection[target] = best_alpha;
        }
        selected_alphas.push(iter_selection);
    }

    let alphas = Array1::from_shape_fn(p, |j| {
        let mean_log = selected_alphas.iter().map(|sel| sel[j].ln()).sum::<f64>()
            / cfg.n_boot as f64;
        mean_log.exp()
    });

    // Final solve on all rows, batching targets that share an alpha.
    let xtx = std.x.t().dot(&std.x);
    let xty = std.x.t().dot(&std.y);
    let (lam, q) = sym_eigen_desc(&xtx)?;
    let mut groups: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
    for j in 0..p {
        groups.entry(alphas[j].to_bits()).or_default().push(j);
    }
    let solved: Vec<(Vec<usize>, Array2<f64>)> = groups
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(bits, cols)| {
            let sub = xty.select(Axis(1), &cols);
            let w = solve_with_alpha(&q, &lam, &sub, f64::from_bits(bits));
            (cols, w)
        })
        .collect();
    let mut w_std = Array2::<f64>::zeros((d, p));
    for (cols, w) in solved {
        for (k, &j) in cols.iter().enumerate() {
            for i in 0..d {
                w_std[[i, j]] = w[[i, k]];
            }
        }
    }

    // Fold the standardization back into raw-space weights and bias.
    let mut weights = w_std;
    for i in 0..d {
        let s = std.x_sd[i];
        for j in 0..p {
            weights[[i, j]] /= s;
        }
    }
    let mut bias = std.y_mean.clone();
    for j in 0..p {
        let mut dot = 0.0;
        for i in 0..d {
            dot += std.x_mean[i] * weights[[i, j]];
        }
        bias[j] -= dot;
    }

    Ok(RidgeModel {
        weights,
        bias,
        alphas,
        selected_alphas,
        degenerate_targets: degenerate
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(j, _)| j)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn gaussian(rng: &mut SplitMix64) -> f64 {
        // Box-Muller is plenty for test data.
        let u1 = rng.next_f64().max(1e-12);
        let u2 = rng.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn random_xy(
        rng: &mut SplitMix64,
        t: usize,
        d: usize,
        p: usize,
        noise: f64,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let x = Array2::from_shape_fn((t, d), |_| gaussian(rng));
        let w = Array2::from_shape_fn((d, p), |_| gaussian(rng) / (d as f64).sqrt());
        let mut y = x.dot(&w);
        if noise > 0.0 {
            y.mapv_inplace(|v| v);
            for e in y.iter_mut() {
                *e += noise * gaussian(rng);
            }
        }
        (x, y, w)
    }

    #[test]
    fn noiseless_linear_data_is_recovered() {
        let mut rng = SplitMix64::new(1);
        let (x, y, w) = random_xy(&mut rng, 300, 8, 4, 0.0);
        let cfg = RidgeConfig {
            alpha_grid: vec![1e-8, 1.0, 100.0],
            standardize: false,
            ..Default::default()
        };
        let model = fit_ridge_bootstrap(&x, &y, &cfg).unwrap();
        let mut worst = 0.0f64;
        for i in 0..8 {
            for j in 0..4 {
                let rel = (model.weights[[i, j]] - w[[i, j]]).abs() / w[[i, j]].abs().max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "worst relative weight error {worst}");

        // Held-out prediction correlation.
        let (x_test, y_test, _) = {
            let xt = Array2::from_shape_fn((100, 8), |_| gaussian(&mut rng));
            let yt = xt.dot(&w);
            (xt, yt, ())
        };
        let pred = model.predict(&x_test).unwrap();
        for j in 0..4 {
            let r = pearson(
                &pred.column(j).to_vec(),
                &y_test.column(j).to_vec(),
            )
            .unwrap();
            assert!(r > 0.999, "target {j}: r = {r}");
        }
    }

    #[test]
    fn closed_form_agreement_single_target() {
        // alpha_grid = {1}: the bootstrap must land on alpha = 1 and the final
        // weights must match a direct dense solve of (XᵀX + I) w = Xᵀy.
        let mut rng = SplitMix64::new(2);
        let (x, y, _) = random_xy(&mut rng, 100, 6, 1, 0.3);
        let cfg = RidgeConfig {
            alpha_grid: vec![1.0],
            standardize: false,
            ..Default::default()
        };
        let model = fit_ridge_bootstrap(&x, &y, &cfg).unwrap();
        assert!((model.alphas[0] - 1.0).abs() < 1e-12);

        // Independent oracle: Gaussian elimination on the normal equations.
        let d = 6;
        let xtx = x.t().dot(&x);
        let xty = x.t().dot(&y);
        let mut a = vec![vec![0.0f64; d + 1]; d];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = xtx[[i, j]] + if i == j { 1.0 } else { 0.0 };
            }
            a[i][d] = xty[[i, 0]];
        }
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in 0..d {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=d {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        for i in 0..d {
            let w_oracle = a[i][d] / a[i][i];
            assert!(
                (model.weights[[i, 0]] - w_oracle).abs() < 1e-6,
                "weight {i}: {} vs oracle {w_oracle}",
                model.weights[[i, 0]]
            );
        }
    }

    #[test]
    fn independent_targets_prefer_the_largest_alpha() {
        // Monte-Carlo oracle: with y independent of x the holdout correlation
        // hovers around zero, and the clamp-at-zero scoring plus
        // prefer-larger-alpha tie break push selection to the top of the grid.
        let grid = default_alpha_grid();
        let max_alpha = *grid.last().unwrap();
        let mut selected = Vec::new();
        for seed in 0..50u64 {
            let mut rng = SplitMix64::new(1000 + seed);
            let x = Array2::from_shape_fn((120, 6), |_| gaussian(&mut rng));
            let y = Array2::from_shape_fn((120, 3), |_| gaussian(&mut rng));
            let cfg = RidgeConfig {
                seed,
                ..Default::default()
            };
            let model = fit_ridge_bootstrap(&x, &y, &cfg).unwrap();
            for sel in &model.selected_alphas {
                selected.extend_from_slice(sel);
            }
        }
        selected.sort_by(|a, b| a.total_cmp(b));
        let median = selected[selected.len() / 2];
        assert!(
            (median - max_alpha).abs() / max_alpha < 1e-9,
            "median selected alpha {median}, expected {max_alpha}"
        );
    }

    #[test]
    fn constant_holdout_target_gets_median_alpha_and_flag() {
        let mut rng = SplitMix64::new(3);
        let x = Array2::from_shape_fn((80, 4), |_| gaussian(&mut rng));
        let mut y = Array2::from_shape_fn((80, 2), |_| gaussian(&mut rng));
        for i in 0..80 {
            y[[i, 1]] = 7.0; // constant everywhere, so constant in any holdout
        }
        let cfg = RidgeConfig::default();
        let model = fit_ridge_bootstrap(&x, &y, &cfg).unwrap();
        let grid = {
            let mut g = cfg.alpha_grid.clone();
            g.sort_by(|a, b| a.total_cmp(b));
            g
        };
        let median_alpha = grid[(grid.len() - 1) / 2];
        assert_eq!(model.degenerate_targets, vec![1]);
        assert!((model.alphas[1] - median_alpha).abs() / median_alpha < 1e-9);
    }

    #[test]
    fn tiny_alpha_on_tall_full_rank_x_matches_ols() {
        let mut rng = SplitMix64::new(4);
        let (x, y, _) = random_xy(&mut rng, 200, 5, 2, 0.1);
        let cfg = RidgeConfig {
            alpha_grid: vec![1e-10],
            standardize: false,
            ..Default::default()
        };
        let model = fit_ridge_bootstrap(&x, &y, &cfg).unwrap();

        // OLS via the same dense-elimination oracle used above.
        let d = 5;
        let xtx = x.t().dot(&x);
        let xty = x.t().dot(&y);
        for target in 0..2 {
            let mut a = vec![vec![0.0f64; d + 1]; d];
            for i in 0..d {
                for j in 0..d {
                    a[i][j] = xtx[[i, j]];
                }
                a[i][d] = xty[[i, target]];
            }
            for col in 0..d {
                let piv = (col..d)
                    .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
                    .unwrap();
                a.swap(col, piv);
                for r in 0..d {
                    if r != col {
                        let f = a[r][col] / a[col][col];
                        for c in col..=d {
                            a[r][c] -= f * a[col][c];
                        }
                    }
                }
            }
            for i in 0..d {
                let ols = a[i][d] / a[i][i];
                assert!(
                    (model.weights[[i, target]] - ols).abs() < 1e-6,
                    "target {target} weight {i}: {} vs {ols}",
                    model.weights[[i, target]]
                );
            }
        }
    }

    #[test]
    fn standardized_fit_is_exactly_linear() {
        let mut rng = SplitMix64::new(5);
        let (x, y, _) = random_xy(&mut rng, 150, 4, 3, 0.2);
        let cfg = RidgeConfig::default();
        let model = fit_ridge_bootstrap(&x, &y, &cfg).unwrap();
        // predict(x) must equal x.weights + bias entrywise by construction;
        // verify against a scalar loop.
        let pred = model.predict(&x).unwrap();
        for i in [0usize, 7, 77] {
            for j in 0..3 {
                let mut v = model.bias[j];
                for k in 0..4 {
                    v += x[[i, k]] * model.weights[[k, j]];
                }
                assert!((pred[[i, j]] - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shape_and_argument_errors() {
        let x = Array2::<f64>::zeros((30, 3));
        let y = Array2::<f64>::zeros((29, 2));
        assert!(fit_ridge_bootstrap(&x, &y, &RidgeConfig::default()).is_err());
        let y = Array2::<f64>::zeros((30, 2));
        let bad = RidgeConfig {
            alpha_grid: vec![],
            ..Default::default()
        };
        assert!(fit_ridge_bootstrap(&x, &y, &bad).is_err());
        let bad = RidgeConfig {
            chunk_len: 30,
            ..Default::default()
        };
        assert!(fit_ridge_bootstrap(&x, &y, &bad).is_err());
    }
}
