//! Incremental PCA over the voxel dimension with project / inverse-project.
//!
//! Fitting consumes the response matrix in row batches. Each batch update
//! does an exact SVD of the stacked matrix [current basis scaled by singular
//! values; centered batch; mean-correction row], which reproduces exact PCA
//! when everything fits in one batch. The SVD itself runs through the Jacobi
//! eigensolver on the (voxels x voxels) Gram matrix.

use crate::error::{EncxError, Result};
use crate::linalg::sym_eigen_desc;
use crate::tensorio::{read_matrix, write_matrix, MatrixContainer};
use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Default rows per incremental batch. The original fit used 8192 maximum
/// components; batch size is an artifact knob.
pub const DEFAULT_BATCH_ROWS: usize = 1024;

#[derive(Debug, Clone)]
pub struct PcaModel {
    /// Per-voxel mean of the training responses.
    pub mean: Array1<f64>,
    /// Voxels x k_max, orthonormal columns ordered by decreasing variance.
    pub components: Array2<f64>,
    /// Variance explained by each component (descending, nonnegative).
    pub explained_variance: Array1<f64>,
    pub k_max: usize,
    pub n_samples_seen: usize,
}

/// Fit PCA incrementally over `batch_rows`-row slices of `y` (T x V).
pub fn fit_incremental_pca(y: &Array2<f64>, k_max: usize, batch_rows: usize) -> Result<PcaModel> {
    let t = y.nrows();
    let v = y.ncols();
    if t < 2 {
        return Err(EncxError::InvalidArgument(format!(
            "pca needs at least 2 rows, got {t}"
        )));
    }
    if k_max == 0 || k_max > t.min(v) {
        return Err(EncxError::InvalidArgument(format!(
            "k_max {k_max} out of range 1..={}",
            t.min(v)
        )));
    }
    if batch_rows < 2 {
        return Err(EncxError::InvalidArgument(
            "batch_rows must be at least 2".into(),
        ));
    }

    let mut mean = Array1::<f64>::zeros(v);
    let mut singular = Array1::<f64>::zeros(0);
    let mut components = Array2::<f64>::zeros((0, v)); // rows are components here
    let mut n_seen = 0usize;

    let mut row = 0usize;
    while row < t {
        let stop = (row + batch_rows).min(t);
        let batch = y.slice(s![row..stop, ..]);
        let m = batch.nrows();
        let batch_mean = batch.mean_axis(Axis(0)).expect("nonempty batch");

        let stacked = if n_seen == 0 {
            &batch - &batch_mean
        } else {
            let total = n_seen + m;
            let correction_scale = ((n_seen as f64 * m as f64) / total as f64).sqrt();
            let correction = (&mean - &batch_mean) * correction_scale;
            let k = singular.len();
            let mut st = Array2::<f64>::zeros((k + m + 1, v));
            for i in 0..k {
                let si = singular[i];
                for j in 0..v {
                    st[[i, j]] = si * components[[i, j]];
                }
            }
            let centered = &batch - &batch_mean;
            st.slice_mut(s![k..k + m, ..]).assign(&centered);
            st.row_mut(k + m).assign(&correction);
            st
        };

        let total = n_seen + m;
        mean = (&mean * n_seen as f64 + &batch_mean * m as f64) / total as f64;
        n_seen = total;

        // Right singular vectors of `stacked` via the spectrum of its Gram matrix.
        let gram = stacked.t().dot(&stacked);
        let (eig, vecs) = sym_eigen_desc(&gram)?;
        let keep = k_max.min(stacked.nrows()).min(v);
        singular = Array1::from_shape_fn(keep, |i| eig[i].max(0.0).sqrt());
        components = vecs.slice(s![.., ..keep]).t().to_owned();

        row = stop;
    }

    let k = singular.len();
    let denom = (n_seen - 1) as f64;
    let explained_variance = Array1::from_shape_fn(k, |i| singular[i] * singular[i] / denom);

    // Sign convention: the entry of largest magnitude in each component is
    // made positive, so fits are deterministic across batch layouts.
    let mut cols = components.t().to_owned(); // V x k
    for mut col in cols.axis_iter_mut(Axis(1)) {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }

    Ok(PcaModel {
        mean,
        components: cols,
        explained_variance,
        k_max: k,
        n_samples_seen: n_seen,
    })
}

impl PcaModel {
    /// Project `y` (T x V) onto the first `n_pca` components: `(y - mean) W`.
    pub fn project(&self, y: &Array2<f64>, n_pca: usize) -> Result<Array2<f64>> {
        if n_pca == 0 || n_pca > self.k_max {
            return Err(EncxError::InvalidArgument(format!(
                "n_pca {n_pca} out of range 1..={}",
                self.k_max
            )));
        }
        if y.ncols() != self.mean.len() {
            return Err(EncxError::ShapeMismatch(format!(
                "project: input has {} voxels, model expects {}",
                y.ncols(),
                self.mean.len()
            )));
        }
        let centered = y - &self.mean;
        Ok(centered.dot(&self.components.slice(s![.., ..n_pca])))
    }

    /// Map component scores back to voxel space: `y_pca Wᵀ + mean`.
    pub fn inverse_project(&self, y_pca: &Array2<f64>) -> Result<Array2<f64>> {
        let n_pca = y_pca.ncols();
        if n_pca == 0 || n_pca > self.k_max {
            return Err(EncxError::ShapeMismatch(format!(
                "inverse_project: {n_pca} columns exceed k_max {}",
                self.k_max
            )));
        }
        let w = self.components.slice(s![.., ..n_pca]);
        Ok(y_pca.dot(&w.t()) + &self.mean)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| EncxError::io(dir, e))?;
        let mean =
            MatrixContainer::from_f64(&self.mean.clone().insert_axis(Axis(0)).to_owned());
        write_matrix(&mean, dir.join("pca_mean.encx"))?;
        write_matrix(
            &MatrixContainer::from_f64(&self.components),
            dir.join("pca_components.encx"),
        )?;
        let sidecar = PcaSidecar {
            explained_variance: self.explained_variance.to_vec(),
            k_max: self.k_max,
            n_samples_seen: self.n_samples_seen,
        };
        let path = dir.join("pca_model.json");
        std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?)
            .map_err(|e| EncxError::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mean = read_matrix(dir.join("pca_mean.encx"))?.to_f64();
        let components = read_matrix(dir.join("pca_components.encx"))?.to_f64();
        let path = dir.join("pca_model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| EncxError::io(&path, e))?;
        let sidecar: PcaSidecar = serde_json::from_str(&text)?;
        if components.ncols() != sidecar.k_max {
            return Err(EncxError::Manifest(format!(
                "pca sidecar k_max {} does not match component matrix width {}",
                sidecar.k_max,
                components.ncols()
            )));
        }
        Ok(PcaModel {
            mean: mean.row(0).to_owned(),
            components,
            explained_variance: Array1::from_vec(sidecar.explained_variance),
            k_max: sidecar.k_max,
            n_samples_seen: sidecar.n_samples_seen,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PcaSidecar {
    explained_variance: Vec<f64>,
    k_max: usize,
    n_samples_seen: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_principal_angle;
    use crate::rng::SplitMix64;
    use approx::assert_abs_diff_eq;

    fn random_matrix(rng: &mut SplitMix64, t: usize, v: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, v), |_| rng.uniform(-1.0, 1.0))
    }

    /// Exact PCA via eigendecomposition of the sample covariance — the
    /// reference the incremental path is checked against.
    fn exact_pca(y: &Array2<f64>, k: usize) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
        let t = y.nrows();
        let mean = y.mean_axis(Axis(0)).unwrap();
        let centered = y - &mean;
        let cov = centered.t().dot(&centered) / (t as f64 - 1.0);
        let (eig, vecs) = sym_eigen_desc(&cov).unwrap();
        (
            mean,
            vecs.slice(s![.., ..k]).to_owned(),
            eig.slice(s![..k]).to_owned(),
        )
    }

    #[test]
    fn orthonormal_components_invariant() {
        let mut rng = SplitMix64::new(5);
        let y = random_matrix(&mut rng, 60, 12);
        let model = fit_incremental_pca(&y, 8, 25).unwrap();
        let g = model.components.t().dot(&model.components);
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - expect).abs() < 1e-4, "gram[{i},{j}]={}", g[[i, j]]);
            }
        }
        for i in 1..8 {
            assert!(model.explained_variance[i - 1] >= model.explained_variance[i] - 1e-12);
            assert!(model.explained_variance[i] >= -1e-12);
        }
    }

    #[test]
    fn rank_two_data_is_captured_by_two_components() {
        let mut rng = SplitMix64::new(6);
        let t = 100;
        let v = 10;
        // Two known factors.
        let f1 = Array1::from_shape_fn(v, |j| (j as f64 * 0.9).sin());
        let f2 = Array1::from_shape_fn(v, |j| (j as f64 * 0.3).cos());
        let mut y = Array2::<f64>::zeros((t, v));
        for i in 0..t {
            let a = rng.uniform(-2.0, 2.0);
            let b = rng.uniform(-1.0, 1.0);
            for j in 0..v {
                y[[i, j]] = a * f1[j] + b * f2[j];
            }
        }
        let model = fit_incremental_pca(&y, 2, t).unwrap();
        let captured: f64 = model.explained_variance.sum();
        let centered = &y - &y.mean_axis(Axis(0)).unwrap();
        let total = centered.iter().map(|x| x * x).sum::<f64>() / (t as f64 - 1.0);
        assert!(
            captured / total > 0.999,
            "captured {captured} of {total}"
        );
    }

    #[test]
    fn repeated_single_row_has_zero_variance() {
        let row = Array1::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let y = Array2::from_shape_fn((20, 4), |(_, j)| row[j]);
        let model = fit_incremental_pca(&y, 3, 7).unwrap();
        for &ev in model.explained_variance.iter() {
            assert!(ev.abs() < 1e-20);
        }
        let g = model.components.t().dot(&model.components);
        for i in 0..3 {
            assert_abs_diff_eq!(g[[i, i]], 1.0, epsilon = 1e-10);
        }
    }

    /// Random T x V data with a decaying factor spectrum. Truncated PCA only
    /// has a well-defined top-k subspace when the spectrum has a gap at k, so
    /// incremental-vs-exact comparisons use this instead of isotropic noise.
    fn random_factor_matrix(rng: &mut SplitMix64, t: usize, v: usize, rank: usize) -> Array2<f64> {
        let loadings = Array2::from_shape_fn((rank, v), |_| rng.uniform(-1.0, 1.0));
        let mut y = Array2::<f64>::zeros((t, v));
        for i in 0..t {
            for k in 0..rank {
                let a = rng.uniform(-1.0, 1.0) * 0.8f64.powi(k as i32);
                for j in 0..v {
                    y[[i, j]] += a * loadings[[k, j]];
                }
            }
            for j in 0..v {
                y[[i, j]] += 1e-3 * rng.uniform(-1.0, 1.0);
            }
        }
        y
    }

    #[test]
    fn incremental_matches_exact_pca_across_batchings() {
        let mut rng = SplitMix64::new(7);
        let k = 8;
        let y = random_factor_matrix(&mut rng, 200, 50, k);
        let full = fit_incremental_pca(&y, k, 200).unwrap();
        let batched = fit_incremental_pca(&y, k, 50).unwrap();
        let (_, exact_comps, exact_var) = exact_pca(&y, k);

        // Single batch reproduces exact PCA.
        let angle_full = max_principal_angle(&full.components, &exact_comps).unwrap();
        assert!(angle_full < 1e-4, "single-batch angle {angle_full}");
        for i in 0..k {
            assert!((full.explained_variance[i] - exact_var[i]).abs() / exact_var[i] < 1e-6);
        }

        // Four batches stay within the looser subspace tolerance.
        let angle_batched = max_principal_angle(&batched.components, &exact_comps).unwrap();
        assert!(angle_batched < 1e-3, "batched angle {angle_batched}");
    }

    #[test]
    fn project_centers_the_mean() {
        let mut rng = SplitMix64::new(8);
        let y = random_matrix(&mut rng, 40, 6);
        let model = fit_incremental_pca(&y, 4, 40).unwrap();
        let mean_rows = Array2::from_shape_fn((3, 6), |(_, j)| model.mean[j]);
        let proj = model.project(&mean_rows, 4).unwrap();
        for x in proj.iter() {
            assert!(x.abs() < 1e-10);
        }
    }

    #[test]
    fn projecting_a_component_gives_a_basis_vector() {
        let mut rng = SplitMix64::new(9);
        let y = random_matrix(&mut rng, 40, 6);
        let model = fit_incremental_pca(&y, 4, 40).unwrap();
        let mut row = Array2::<f64>::zeros((1, 6));
        for j in 0..6 {
            row[[0, j]] = model.mean[j] + model.components[[j, 0]];
        }
        let proj = model.project(&row, 4).unwrap();
        assert_abs_diff_eq!(proj[[0, 0]], 1.0, epsilon = 1e-8);
        for c in 1..4 {
            assert!(proj[[0, c]].abs() < 1e-8);
        }
    }

    #[test]
    fn full_rank_projection_preserves_distances() {
        let mut rng = SplitMix64::new(10);
        let t = 30;
        let y = random_matrix(&mut rng, t, 8);
        let k = 8; // full rank (t > v)
        let model = fit_incremental_pca(&y, k, t).unwrap();
        let proj = model.project(&y, k).unwrap();
        for a in 0..t {
            for b in (a + 1)..t {
                let d_orig: f64 = (0..8)
                    .map(|j| (y[[a, j]] - y[[b, j]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let d_proj: f64 = (0..k)
                    .map(|j| (proj[[a, j]] - proj[[b, j]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d_orig - d_proj).abs() < 1e-4 * d_orig.max(1.0));
            }
        }
    }

    #[test]
    fn round_trip_at_full_rank_is_identity() {
        let mut rng = SplitMix64::new(11);
        let y = random_matrix(&mut rng, 50, 7);
        let model = fit_incremental_pca(&y, 7, 50).unwrap();
        let proj = model.project(&y, 7).unwrap();
        let back = model.inverse_project(&proj).unwrap();
        let num: f64 = (&back - &y).iter().map(|x| x * x).sum();
        let den: f64 = y.iter().map(|x| x * x).sum();
        assert!((num / den).sqrt() < 1e-4);
    }

    #[test]
    fn zero_scores_reconstruct_the_mean() {
        let mut rng = SplitMix64::new(12);
        let y = random_matrix(&mut rng, 30, 5);
        let model = fit_incremental_pca(&y, 3, 30).unwrap();
        let zeros = Array2::<f64>::zeros((4, 3));
        let back = model.inverse_project(&zeros).unwrap();
        for r in 0..4 {
            for j in 0..5 {
                assert_abs_diff_eq!(back[[r, j]], model.mean[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn truncation_error_equals_discarded_variance() {
        let mut rng = SplitMix64::new(13);
        let t = 80;
        let v = 10;
        let y = random_matrix(&mut rng, t, v);
        let model = fit_incremental_pca(&y, v, t).unwrap();
        for k in [2usize, 5, 8] {
            let proj = model.project(&y, k).unwrap();
            let back = model.inverse_project(&proj).unwrap();
            let sse: f64 = (&back - &y).iter().map(|x| x * x).sum();
            let expect: f64 = model
                .explained_variance
                .iter()
                .skip(k)
                .sum::<f64>()
                * (t as f64 - 1.0);
            assert!(
                (sse - expect).abs() / expect < 1e-3,
                "k={k}: sse {sse} vs discarded variance {expect}"
            );
        }
    }

    #[test]
    fn reconstruction_error_is_monotone_in_k() {
        let mut rng = SplitMix64::new(14);
        let y = random_matrix(&mut rng, 60, 9);
        let model = fit_incremental_pca(&y, 9, 60).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..=9 {
            let back = model
                .inverse_project(&model.project(&y, k).unwrap())
                .unwrap();
            let sse: f64 = (&back - &y).iter().map(|x| x * x).sum();
            assert!(sse <= last + 1e-9, "k={k}: {sse} > {last}");
            last = sse;
        }
    }

    #[test]
    fn project_and_inverse_are_adjoint() {
        let mut rng = SplitMix64::new(15);
        let y = random_matrix(&mut rng, 40, 6);
        let model = fit_incremental_pca(&y, 4, 40).unwrap();
        // <project(a), z> == <a - mean, inverse_project(z) - mean> through the
        // orthonormal block.
        let a = random_matrix(&mut rng, 1, 6);
        let z = random_matrix(&mut rng, 1, 4);
        let lhs: f64 = model
            .project(&a, 4)
            .unwrap()
            .iter()
            .zip(z.iter())
            .map(|(p, q)| p * q)
            .sum();
        let back = model.inverse_project(&z).unwrap();
        let rhs: f64 = (0..6)
            .map(|j| (a[[0, j]] - model.mean[j]) * (back[[0, j]] - model.mean[j]))
            .sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn k_max_bounds_are_enforced() {
        let mut rng = SplitMix64::new(16);
        let y = random_matrix(&mut rng, 10, 5);
        assert!(fit_incremental_pca(&y, 6, 10).is_err());
        assert!(fit_incremental_pca(&y, 0, 10).is_err());
        let model = fit_incremental_pca(&y, 3, 10).unwrap();
        assert!(model.project(&y, 4).is_err());
        assert!(model
            .inverse_project(&Array2::<f64>::zeros((2, 4)))
            .is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SplitMix64::new(17);
        let y = random_matrix(&mut rng, 30, 6);
        let model = fit_incremental_pca(&y, 4, 30).unwrap();
        model.save(dir.path()).unwrap();
        let loaded = PcaModel::load(dir.path()).unwrap();
        assert_eq!(loaded.k_max, 4);
        assert_eq!(loaded.n_samples_seen, 30);
        // float32 narrowing on disk
        for (a, b) in model.components.iter().zip(loaded.components.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let proj_a = model.project(&y, 4).unwrap();
        let proj_b = loaded.project(&y, 4).unwrap();
        for (a, b) in proj_a.iter().zip(proj_b.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
