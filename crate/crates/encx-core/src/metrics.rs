//! Evaluation: per-voxel correlation, signed r², noise ceiling, normalized
//! correlation, and block-permutation significance with FDR control.

use crate::error::{EncxError, Result};
use crate::rng::SplitMix64;
use crate::tensorio::RoiAtlas;
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::Serialize;

/// Ceiling floor from the evaluation convention: voxels with a ceiling below
/// this divide by the floor instead.
pub const CCMAX_FLOOR: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct PearsonResult {
    pub r: Array1<f64>,
    /// Voxels where either side was constant; their r is reported as 0.
    pub constant: Vec<bool>,
}

/// Pearson correlation per column. Columns that are constant on either side
/// get r = 0 and a flag rather than NaN.
pub fn pearson_per_voxel(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<PearsonResult> {
    if pred.shape() != truth.shape() {
        return Err(EncxError::ShapeMismatch(format!(
            "pearson: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let t = pred.nrows();
    if t < 3 {
        return Err(EncxError::InvalidArgument(format!(
            "pearson needs at least 3 rows, got {t}"
        )));
    }
    let v = pred.ncols();
    let results: Vec<(f64, bool)> = (0..v)
        .into_par_iter()
        .map(|j| {
            let mut ma = 0.0;
            let mut mb = 0.0;
            for i in 0..t {
                ma += pred[[i, j]];
                mb += truth[[i, j]];
            }
            ma /= t as f64;
            mb /= t as f64;
            let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
            for i in 0..t {
                let dx = pred[[i, j]] - ma;
                let dy = truth[[i, j]] - mb;
                num += dx * dy;
                va += dx * dx;
                vb += dy * dy;
            }
            if va <= 0.0 || vb <= 0.0 {
                (0.0, true)
            } else {
                (num / (va * vb).sqrt(), false)
            }
        })
        .collect();
    Ok(PearsonResult {
        r: Array1::from_iter(results.iter().map(|x| x.0)),
        constant: results.iter().map(|x| x.1).collect(),
    })
}

/// Signed squared correlation: `|r| * r`.
pub fn signed_r2(r: &Array1<f64>) -> Array1<f64> {
    r.mapv(|x| x.abs() * x)
}

/// Repeated presentations of one stimulus: n_repeats matrices of T x V.
#[derive(Debug, Clone)]
pub struct RepeatStack {
    repeats: Vec<Array2<f64>>,
}

impl RepeatStack {
    pub fn new(repeats: Vec<Array2<f64>>) -> Result<Self> {
        if repeats.len() < 2 {
            return Err(EncxError::InvalidArgument(format!(
                "repeat stack needs at least 2 repeats, got {}",
                repeats.len()
            )));
        }
        let shape = repeats[0].shape().to_vec();
        for (i, r) in repeats.iter().enumerate() {
            if r.shape() != &shape[..] {
                return Err(EncxError::ShapeMismatch(format!(
                    "repeat {i} has shape {:?}, expected {:?}",
                    r.shape(),
                    shape
                )));
            }
        }
        Ok(RepeatStack { repeats })
    }

    pub fn n_repeats(&self) -> usize {
        self.repeats.len()
    }

    pub fn n_tr(&self) -> usize {
        self.repeats[0].nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.repeats[0].ncols()
    }

    pub fn repeats(&self) -> &[Array2<f64>] {
        &self.repeats
    }

    /// Across-repeat mean response: the evaluation ground truth.
    pub fn mean(&self) -> Array2<f64> {
        let mut acc = Array2::<f64>::zeros(self.repeats[0].raw_dim());
        for r in &self.repeats {
            acc += r;
        }
        acc / self.repeats.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct NoiseCeiling {
    pub cc_max: Array1<f64>,
    pub signal_power: Array1<f64>,
    pub noise_power: Array1<f64>,
    /// Voxels whose estimated signal power was nonpositive; their ceiling is
    /// pinned at the floor.
    pub floored: Vec<bool>,
}

/// Closed-form ceiling given signal power, noise power, and repeat count.
pub fn ceiling_from_powers(sp: f64, np: f64, n_repeats: usize) -> f64 {
    (1.0 + np / (sp * n_repeats as f64)).sqrt().recip()
}

/// Estimate the per-voxel noise ceiling from a repeat stack.
///
/// Signal and noise power come from the repeat decomposition
/// `SP = (N * Var_t(mean) - mean_r Var_t) / (N - 1)`, `NP = mean_r Var_t - SP`.
/// The within-repeat scatter is evaluated through the algebraically identical
/// pairwise form `sum_r Var_t(y_r - mean) = (1/N) sum_{r<s} Var_t(y_r - y_s)`,
/// which is exactly zero for identical repeats, so the NP = 0 case yields a
/// ceiling of exactly 1 with no rounding residue.
pub fn noise_ceiling(stack: &RepeatStack, floor: f64) -> Result<NoiseCeiling> {
    let n = stack.n_repeats();
    let t = stack.n_tr();
    if t < 2 {
        return Err(EncxError::InvalidArgument(
            "noise ceiling needs at least 2 timepoints".into(),
        ));
    }
    let v = stack.n_voxels();
    let mean = stack.mean();

    let var_t = |xs: &[f64]| -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
    };

    let per_voxel: Vec<(f64, f64, f64, bool)> = (0..v)
        .into_par_iter()
        .map(|j| {
            let mean_col: Vec<f64> = (0..t).map(|i| mean[[i, j]]).collect();
            let var_mean = var_t(&mean_col);
            let mut pair_sum = 0.0;
            let reps = stack.repeats();
            for a in 0..n {
                for b in (a + 1)..n {
                    let diff: Vec<f64> =
                        (0..t).map(|i| reps[a][[i, j]] - reps[b][[i, j]]).collect();
                    pair_sum += var_t(&diff);
                }
            }
            let resid_sum = pair_sum / n as f64;
            let np = resid_sum / (n as f64 - 1.0);
            let sp = var_mean - resid_sum / (n as f64 * (n as f64 - 1.0));
            if sp <= 0.0 {
                (floor, sp, np, true)
            } else {
                (ceiling_from_powers(sp, np, n), sp, np, false)
            }
        })
        .collect();

    Ok(NoiseCeiling {
        cc_max: Array1::from_iter(per_voxel.iter().map(|x| x.0)),
        signal_power: Array1::from_iter(per_voxel.iter().map(|x| x.1)),
        noise_power: Array1::from_iter(per_voxel.iter().map(|x| x.2)),
        floored: per_voxel.iter().map(|x| x.3).collect(),
    })
}

/// Normalized correlation: `r / max(cc_max, floor)` elementwise.
pub fn cc_norm(r: &Array1<f64>, cc_max: &Array1<f64>, floor: f64) -> Result<Array1<f64>> {
    if r.len() != cc_max.len() {
        return Err(EncxError::ShapeMismatch(format!(
            "cc_norm: {} correlations vs {} ceilings",
            r.len(),
            cc_max.len()
        )));
    }
    Ok(Array1::from_shape_fn(r.len(), |j| {
        r[j] / cc_max[j].max(floor)
    }))
}

/// Benjamini-Hochberg step-up adjustment; returns q-values in input order.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut q = vec![0.0; m];
    let mut running_min = f64::INFINITY;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let raw = (p[idx] * m as f64 / (rank + 1) as f64).min(1.0);
        running_min = running_min.min(raw);
        q[idx] = running_min;
    }
    q
}

#[derive(Debug, Clone)]
pub struct Significance {
    pub p: Array1<f64>,
    pub q: Array1<f64>,
    pub mask: Vec<bool>,
}

/// One-sided permutation test with FDR control.
///
/// The null distribution comes from circularly shifting the truth by random
/// whole-block offsets (blocks of `block_len` TRs), which preserves the
/// autocorrelation inside blocks. p-values use the add-one convention, then
/// Benjamini-Hochberg gives q and the mask is `q < q_thresh`.
pub fn significance_fdr(
    pred: &Array2<f64>,
    truth: &Array2<f64>,
    n_perm: usize,
    block_len: usize,
    q_thresh: f64,
    seed: u64,
) -> Result<Significance> {
    if pred.shape() != truth.shape() {
        return Err(EncxError::ShapeMismatch(format!(
            "significance: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let t = pred.nrows();
    if block_len == 0 || t < 3 * block_len {
        return Err(EncxError::InvalidArgument(format!(
            "significance needs at least 3 blocks: T = {t}, block_len = {block_len}"
        )));
    }
    if n_perm == 0 {
        return Err(EncxError::InvalidArgument("n_perm must be >= 1".into()));
    }
    let v = pred.ncols();
    let n_blocks = t / block_len;

    // Shared block offsets across voxels; each permutation shifts the truth
    // rows by offsets[k] (never zero).
    let mut rng = SplitMix64::new(seed);
    let offsets: Vec<usize> = (0..n_perm)
        .map(|_| block_len * (1 + rng.below(n_blocks - 1)))
        .collect();

    // Centered unit-norm columns make each correlation a plain dot product,
    // and circular shifts leave mean and norm untouched.
    let normalize = |m: &Array2<f64>| -> (Array2<f64>, Vec<bool>) {
        let mut out = Array2::<f64>::zeros(m.raw_dim());
        let mut constant = vec![false; v];
        for j in 0..v {
            let mean = (0..t).map(|i| m[[i, j]]).sum::<f64>() / t as f64;
            let mut norm = 0.0;
            for i in 0..t {
                let d = m[[i, j]] - mean;
                out[[i, j]] = d;
                norm += d * d;
            }
            if norm <= 0.0 {
                constant[j] = true;
            } else {
                let inv = norm.sqrt().recip();
                for i in 0..t {
                    out[[i, j]] *= inv;
                }
            }
        }
        (out, constant)
    };
    let (a, const_a) = normalize(pred);
    let (b, const_b) = normalize(truth);

    let p_values: Vec<f64> = (0..v)
        .into_par_iter()
        .map(|j| {
            if const_a[j] || const_b[j] {
                return 1.0;
            }
            let mut obs = 0.0;
            for i in 0..t {
                obs += a[[i, j]] * b[[i, j]];
            }
            let mut exceed = 0usize;
            for &off in &offsets {
                let mut rn = 0.0;
                for i in 0..t {
                    let k = i + off;
                    let k = if k >= t { k - t } else { k };
                    rn += a[[i, j]] * b[[k, j]];
                }
                if rn >= obs {
                    exceed += 1;
                }
            }
            (1 + exceed) as f64 / (n_perm + 1) as f64
        })
        .collect();

    let q = benjamini_hochberg(&p_values);
    let mask = q.iter().map(|&x| x < q_thresh).collect();
    Ok(Significance {
        p: Array1::from_vec(p_values),
        q: Array1::from_vec(q),
        mask,
    })
}

/// Everything the downstream analyses consume, one entry per voxel.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub r: Array1<f64>,
    pub r2: Array1<f64>,
    pub cc_max: Array1<f64>,
    pub cc_norm: Array1<f64>,
    pub p: Array1<f64>,
    pub q: Array1<f64>,
    pub mask: Vec<bool>,
    pub constant_voxels: Vec<bool>,
    pub floored_voxels: Vec<bool>,
}

impl EvalReport {
    pub fn n_voxels(&self) -> usize {
        self.r.len()
    }

    pub fn mean_r(&self) -> f64 {
        self.r.mean().unwrap_or(0.0)
    }

    pub fn mean_r2(&self) -> f64 {
        self.r2.mean().unwrap_or(0.0)
    }

    pub fn mean_cc_norm(&self) -> f64 {
        self.cc_norm.mean().unwrap_or(0.0)
    }

    /// CSV with one row per voxel.
    pub fn to_csv(&self, atlas: Option<&RoiAtlas>) -> String {
        let mut out = String::from("voxel,roi,r,r2,cc_max,cc_norm,p,q,significant\n");
        for j in 0..self.n_voxels() {
            let roi = atlas.map_or("", |a| a.labels[j].as_str());
            out.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
                j,
                roi,
                self.r[j],
                self.r2[j],
                self.cc_max[j],
                self.cc_norm[j],
                self.p[j],
                self.q[j],
                self.mask[j] as u8
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoiSummary {
    pub roi: String,
    pub n_voxels: usize,
    pub mean_r: f64,
    pub mean_r2: f64,
    pub mean_cc_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryTable {
    pub overall: RoiSummary,
    pub per_roi: Vec<RoiSummary>,
}

/// Unweighted voxel means per ROI and over the whole recording.
pub fn summarize(report: &EvalReport, atlas: &RoiAtlas) -> Result<SummaryTable> {
    if atlas.voxel_count != report.n_voxels() {
        return Err(EncxError::ShapeMismatch(format!(
            "atlas covers {} voxels, report has {}",
            atlas.voxel_count,
            report.n_voxels()
        )));
    }
    let mean_of = |idx: &[usize], xs: &Array1<f64>| -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        idx.iter().map(|&j| xs[j]).sum::<f64>() / idx.len() as f64
    };
    let mut per_roi = Vec::new();
    for name in atlas.roi_names() {
        let idx = atlas.indices_of(&name);
        per_roi.push(RoiSummary {
            roi: name,
            n_voxels: idx.len(),
            mean_r: mean_of(&idx, &report.r),
            mean_r2: mean_of(&idx, &report.r2),
            mean_cc_norm: mean_of(&idx, &report.cc_norm),
        });
    }
    let all: Vec<usize> = (0..report.n_voxels()).collect();
    Ok(SummaryTable {
        overall: RoiSummary {
            roi: "(all)".into(),
            n_voxels: all.len(),
            mean_r: mean_of(&all, &report.r),
            mean_r2: mean_of(&all, &report.r2),
            mean_cc_norm: mean_of(&all, &report.cc_norm),
        },
        per_roi,
    })
}
