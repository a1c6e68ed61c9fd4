//! Spatiotemporal error-difference analysis, ROI clustering with modularity,
//! variance partitioning, and validation-based voxel masks.

use crate::error::{EncxError, Result};
use crate::tensorio::RoiAtlas;
use ndarray::{Array1, Array2};
use serde::Serialize;
use serde_json::json;

/// Per-voxel, per-timepoint difference of absolute prediction errors:
/// `|f1 - y| - |f2 - y|`. Positive values mean model 2 was closer.
#[derive(Debug, Clone)]
pub struct RedField {
    pub data: Array2<f64>,
    pub model_pair: (String, String),
}

pub fn red_field(
    pred1: &Array2<f64>,
    pred2: &Array2<f64>,
    truth: &Array2<f64>,
    model_pair: (String, String),
) -> Result<RedField> {
    if pred1.shape() != truth.shape() || pred2.shape() != truth.shape() {
        return Err(EncxError::ShapeMismatch(format!(
            "red_field: {:?} / {:?} vs truth {:?}",
            pred1.shape(),
            pred2.shape(),
            truth.shape()
        )));
    }
    let mut data = Array2::<f64>::zeros(truth.raw_dim());
    for ((i, j), out) in data.indexed_iter_mut() {
        *out = (pred1[[i, j]] - truth[[i, j]]).abs() - (pred2[[i, j]] - truth[[i, j]]).abs();
    }
    Ok(RedField { data, model_pair })
}

/// ROI-mean time series of an error-difference field (rows = ROI, cols = t).
#[derive(Debug, Clone)]
pub struct RoiSeries {
    pub roi_names: Vec<String>,
    pub data: Array2<f64>,
    /// ROI names from the atlas vocabulary that contained no voxels.
    pub empty_rois: Vec<String>,
}

pub fn roi_red_series(field: &RedField, atlas: &RoiAtlas) -> Result<RoiSeries> {
    roi_mean_series(&field.data, atlas)
}

fn roi_mean_series(data: &Array2<f64>, atlas: &RoiAtlas) -> Result<RoiSeries> {
    if atlas.voxel_count != data.ncols() {
        return Err(EncxError::ShapeMismatch(format!(
            "atlas covers {} voxels, field has {}",
            atlas.voxel_count,
            data.ncols()
        )));
    }
    let t = data.nrows();
    let mut roi_names = Vec::new();
    let mut rows = Vec::new();
    let mut empty = Vec::new();
    for name in atlas.roi_names() {
        let idx = atlas.indices_of(&name);
        if idx.is_empty() {
            empty.push(name);
            continue;
        }
        let mut row = vec![0.0f64; t];
        for &j in &idx {
            for (i, slot) in row.iter_mut().enumerate() {
                *slot += data[[i, j]];
            }
        }
        let inv = 1.0 / idx.len() as f64;
        for slot in &mut row {
            *slot *= inv;
        }
        roi_names.push(name);
        rows.push(row);
    }
    let r = roi_names.len();
    let mut out = Array2::<f64>::zeros((r, t));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(RoiSeries {
        roi_names,
        data: out,
        empty_rois: empty,
    })
}

#[derive(Debug, Clone)]
pub struct CorrMatrix {
    pub names: Vec<String>,
    pub values: Array2<f64>,
    /// Rows whose series was constant; their off-diagonal entries are 0.
    pub constant_rows: Vec<bool>,
}

/// Pearson correlation between ROI time series: symmetric with unit diagonal.
pub fn roi_correlation(series: &RoiSeries) -> Result<CorrMatrix> {
    let r = series.data.nrows();
    let t = series.data.ncols();
    if t < 3 {
        return Err(EncxError::InvalidArgument(format!(
            "roi correlation needs at least 3 timepoints, got {t}"
        )));
    }
    let mut centered = series.data.clone();
    let mut norms = vec![0.0f64; r];
    let mut constant = vec![false; r];
    for i in 0..r {
        let mean = (0..t).map(|k| centered[[i, k]]).sum::<f64>() / t as f64;
        let mut ss = 0.0;
        for k in 0..t {
            centered[[i, k]] -= mean;
            ss += centered[[i, k]] * centered[[i, k]];
        }
        norms[i] = ss.sqrt();
        constant[i] = ss <= 0.0;
    }
    let mut values = Array2::<f64>::eye(r);
    for i in 0..r {
        for j in (i + 1)..r {
            let v = if constant[i] || constant[j] {
                0.0
            } else {
                let mut dot = 0.0;
                for k in 0..t {
                    dot += centered[[i, k]] * centered[[j, k]];
                }
                dot / (norms[i] * norms[j])
            };
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    Ok(CorrMatrix {
        names: series.roi_names.clone(),
        values,
        constant_rows: constant,
    })
}

/// ROI-mean raw signal correlations (the connectivity baseline).
pub fn functional_connectivity(truth: &Array2<f64>, atlas: &RoiAtlas) -> Result<CorrMatrix> {
    let series = roi_mean_series(truth, atlas)?;
    roi_correlation(&series)
}

/// Stepwise dendrogram: leaves are ROI names; internal node k (id = R + k)
/// merges `merges[k]`. Heights are nondecreasing under average linkage.
#[derive(Debug, Clone, Serialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Dendrogram {
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

/// Average-linkage agglomeration on distance `1 - corr`.
///
/// Ties are broken by the lexicographically smallest pair of cluster labels,
/// a cluster's label being its smallest member name, so the merge order is
/// deterministic.
pub fn hierarchical_cluster(corr: &CorrMatrix) -> Result<Dendrogram> {
    let r = corr.values.nrows();
    if corr.values.ncols() != r || corr.names.len() != r {
        return Err(EncxError::ShapeMismatch(
            "correlation matrix and name list disagree".into(),
        ));
    }
    if r < 2 {
        return Err(EncxError::InvalidArgument(
            "clustering needs at least 2 items".into(),
        ));
    }
    for i in 0..r {
        for j in 0..r {
            if (corr.values[[i, j]] - corr.values[[j, i]]).abs() > 1e-9 {
                return Err(EncxError::InvalidArgument(format!(
                    "correlation matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    struct Cluster {
        id: usize,
        size: usize,
        label: String,
    }
    let mut active: Vec<Cluster> = (0..r)
        .map(|i| Cluster {
            id: i,
            size: 1,
            label: corr.names[i].clone(),
        })
        .collect();
    // Distance matrix between active clusters, indexed by position in `active`.
    let mut dist = vec![vec![0.0f64; r]; r];
    for i in 0..r {
        for j in 0..r {
            dist[i][j] = 1.0 - corr.values[[i, j]];
        }
    }

    let mut merges = Vec::with_capacity(r - 1);
    let mut next_id = r;
    while active.len() > 1 {
        // Best pair: minimal distance, ties by sorted label pair.
        let mut best: Option<(usize, usize)> = None;
        for i in 0..active.len() {
            for j in (i + 1)..active.len() {
                let better = match best {
                    None => true,
                    Some((bi, bj)) => {
                        let d = dist[i][j];
                        let bd = dist[bi][bj];
                        if d < bd - 1e-15 {
                            true
                        } else if d > bd + 1e-15 {
                            false
                        } else {
                            let key = pair_key(&active[i].label, &active[j].label);
                            let bkey = pair_key(&active[bi].label, &active[bj].label);
                            key < bkey
                        }
                    }
                };
                if better {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("at least one pair");
        let height = dist[i][j];
        merges.push(Merge {
            a: active[i].id,
            b: active[j].id,
            height,
        });

        // Average-linkage update against every other cluster.
        let (si, sj) = (active[i].size as f64, active[j].size as f64);
        for k in 0..active.len() {
            if k == i || k == j {
                continue;
            }
            let d = (si * dist[i][k] + sj * dist[j][k]) / (si + sj);
            dist[i][k] = d;
            dist[k][i] = d;
        }
        let merged_label = if active[i].label <= active[j].label {
            active[i].label.clone()
        } else {
            active[j].label.clone()
        };
        active[i] = Cluster {
            id: next_id,
            size: (si + sj) as usize,
            label: merged_label,
        };
        next_id += 1;
        // Remove j by swapping with the last entry, fixing the distance rows.
        let last = active.len() - 1;
        if j != last {
            active.swap(j, last);
            for k in 0..active.len() {
                dist[j][k] = dist[last][k];
                dist[k][j] = dist[k][last];
            }
        }
        active.pop();
    }
    Ok(Dendrogram {
        leaves: corr.names.clone(),
        merges,
    })
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Cluster labels (0-based, in order of first appearance) for the cut
    /// that yields `k` clusters.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        let r = self.n_leaves();
        if k == 0 || k > r {
            return Err(EncxError::InvalidArgument(format!(
                "cut into {k} clusters of {r} leaves"
            )));
        }
        // Apply the first r - k merges with a union-find over node ids.
        let mut parent: Vec<usize> = (0..r + self.merges.len()).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (m, merge) in self.merges.iter().take(r - k).enumerate() {
            let node = r + m;
            let ra = find(&mut parent, merge.a);
            let rb = find(&mut parent, merge.b);
            parent[ra] = node;
            parent[rb] = node;
        }
        let mut labels = vec![usize::MAX; r];
        let mut next = 0usize;
        let mut seen: std::collections::BTreeMap<usize, usize> = Default::default();
        for leaf in 0..r {
            let root = find(&mut parent, leaf);
            let label = *seen.entry(root).or_insert_with(|| {
                let l = next;
                next += 1;
                l
            });
            labels[leaf] = label;
        }
        Ok(labels)
    }

    /// Nested JSON tree (names at leaves, heights at internal nodes).
    pub fn to_json_tree(&self) -> serde_json::Value {
        let r = self.n_leaves();
        let total = r + self.merges.len();
        let mut nodes: Vec<serde_json::Value> = Vec::with_capacity(total);
        for name in &self.leaves {
            nodes.push(json!({ "leaf": name }));
        }
        for merge in &self.merges {
            let a = nodes[merge.a].clone();
            let b = nodes[merge.b].clone();
            nodes.push(json!({
                "height": merge.height,
                "children": [a, b],
            }));
        }
        nodes.last().cloned().unwrap_or(json!(null))
    }

    /// Indented text rendering, children under their merge height.
    pub fn render_text(&self) -> String {
        fn walk(
            d: &Dendrogram,
            node: usize,
            depth: usize,
            out: &mut String,
        ) {
            let pad = "  ".repeat(depth);
            let r = d.n_leaves();
            if node < r {
                out.push_str(&format!("{pad}{}\n", d.leaves[node]));
            } else {
                let merge = &d.merges[node - r];
                out.push_str(&format!("{pad}+ h={:.6}\n", merge.height));
                walk(d, merge.a, depth + 1, out);
                walk(d, merge.b, depth + 1, out);
            }
        }
        let mut out = String::new();
        if self.merges.is_empty() {
            for name in &self.leaves {
                out.push_str(name);
                out.push('\n');
            }
        } else {
            walk(self, self.n_leaves() + self.merges.len() - 1, 0, &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModularityScore {
    pub q: f64,
    /// The graph had no positive weight at all; q is reported as 0.
    pub zero_weight: bool,
}

/// Newman modularity over the positive part of the correlation matrix with a
/// zeroed diagonal: `Q = (1/2m) * sum_ij (A_ij - k_i k_j / 2m) d(c_i, c_j)`.
pub fn modularity_q(corr: &Array2<f64>, labels: &[usize]) -> Result<ModularityScore> {
    let r = corr.nrows();
    if corr.ncols() != r {
        return Err(EncxError::ShapeMismatch(
            "modularity needs a square matrix".into(),
        ));
    }
    if labels.len() != r {
        return Err(EncxError::ShapeMismatch(format!(
            "{} labels for {r} nodes",
            labels.len()
        )));
    }
    let mut a = Array2::<f64>::zeros((r, r));
    for i in 0..r {
        for j in 0..r {
            if i != j {
                a[[i, j]] = corr[[i, j]].max(0.0);
            }
        }
    }
    let degrees: Vec<f64> = (0..r).map(|i| (0..r).map(|j| a[[i, j]]).sum()).collect();
    let two_m: f64 = degrees.iter().sum();
    if two_m <= 0.0 {
        return Ok(ModularityScore {
            q: 0.0,
            zero_weight: true,
        });
    }
    let mut q = 0.0;
    for i in 0..r {
        for j in 0..r {
            if labels[i] == labels[j] {
                q += a[[i, j]] - degrees[i] * degrees[j] / two_m;
            }
        }
    }
    Ok(ModularityScore {
        q: q / two_m,
        zero_weight: false,
    })
}

/// Scan every dendrogram cut (2..=R clusters) and return the labels with the
/// highest modularity; ties go to fewer clusters.
pub fn best_cut_modularity(
    corr: &Array2<f64>,
    dend: &Dendrogram,
) -> Result<(Vec<usize>, f64)> {
    let r = dend.n_leaves();
    let mut best_labels = dend.cut(2.min(r))?;
    let mut best_q = modularity_q(corr, &best_labels)?.q;
    for k in 3..=r {
        let labels = dend.cut(k)?;
        let q = modularity_q(corr, &labels)?.q;
        if q > best_q + 1e-15 {
            best_q = q;
            best_labels = labels;
        }
    }
    Ok((best_labels, best_q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dominant {
    Semantic,
    Audio,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionBasis {
    R2,
    CcNorm,
}

/// Unique/joint decomposition of a joint model's explained value.
#[derive(Debug, Clone)]
pub struct VariancePartition {
    pub unique_sem: Array1<f64>,
    pub unique_aud: Array1<f64>,
    pub shared: Array1<f64>,
    pub dominant: Vec<Dominant>,
    /// Total amount clamped away per voxel (sum of negative parts).
    pub clamp_adjustment: Array1<f64>,
    pub basis: PartitionBasis,
}

/// Decompose per-voxel explained values from the three nested fits:
/// `unique_sem = joint - aud`, `unique_aud = joint - sem`,
/// `shared = sem + aud - joint`; negatives clamp to zero with the clamped
/// mass recorded. Dominance is the argmax of the clamped parts, ties to joint.
pub fn variance_partition(
    r2_sem: &Array1<f64>,
    r2_aud: &Array1<f64>,
    r2_joint: &Array1<f64>,
    basis: PartitionBasis,
) -> Result<VariancePartition> {
    let v = r2_sem.len();
    if r2_aud.len() != v || r2_joint.len() != v {
        return Err(EncxError::ShapeMismatch(format!(
            "partition inputs disagree: {v}, {}, {}",
            r2_aud.len(),
            r2_joint.len()
        )));
    }
    let mut unique_sem = Array1::<f64>::zeros(v);
    let mut unique_aud = Array1::<f64>::zeros(v);
    let mut shared = Array1::<f64>::zeros(v);
    let mut clamp = Array1::<f64>::zeros(v);
    let mut dominant = Vec::with_capacity(v);
    for j in 0..v {
        let us = r2_joint[j] - r2_aud[j];
        let ua = r2_joint[j] - r2_sem[j];
        let sh = r2_sem[j] + r2_aud[j] - r2_joint[j];
        let mut clamped = 0.0;
        let mut fix = |x: f64| {
            if x < 0.0 {
                clamped += -x;
                0.0
            } else {
                x
            }
        };
        let us = fix(us);
        let ua = fix(ua);
        let sh = fix(sh);
        unique_sem[j] = us;
        unique_aud[j] = ua;
        shared[j] = sh;
        clamp[j] = clamped;
        let dom = if us > ua && us > sh {
            Dominant::Semantic
        } else if ua > us && ua > sh {
            Dominant::Audio
        } else {
            Dominant::Joint
        };
        dominant.push(dom);
    }
    Ok(VariancePartition {
        unique_sem,
        unique_aud,
        shared,
        dominant,
        clamp_adjustment: clamp,
        basis,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VennRow {
    pub roi: String,
    pub n_significant: usize,
    pub n_semantic: usize,
    pub n_audio: usize,
    pub n_joint: usize,
    /// Percentages of the significant voxels in this ROI; `None` when the
    /// mask selected nothing here.
    pub pct_semantic: Option<f64>,
    pub pct_audio: Option<f64>,
    pub pct_joint: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VennTable {
    pub rows: Vec<VennRow>,
    pub overall: VennRow,
}

/// Count dominant categories among mask-significant voxels per ROI.
pub fn roi_venn(
    part: &VariancePartition,
    mask: &[bool],
    atlas: &RoiAtlas,
) -> Result<VennTable> {
    let v = part.dominant.len();
    if mask.len() != v || atlas.voxel_count != v {
        return Err(EncxError::ShapeMismatch(format!(
            "venn inputs disagree: partition {v}, mask {}, atlas {}",
            mask.len(),
            atlas.voxel_count
        )));
    }
    let count = |idx: &[usize]| -> VennRow {
        let mut n_sig = 0usize;
        let (mut ns, mut na, mut nj) = (0usize, 0usize, 0usize);
        for &j in idx {
            if !mask[j] {
                continue;
            }
            n_sig += 1;
            match part.dominant[j] {
                Dominant::Semantic => ns += 1,
                Dominant::Audio => na += 1,
                Dominant::Joint => nj += 1,
            }
        }
        let pct = |n: usize| {
            if n_sig == 0 {
                None
            } else {
                Some(100.0 * n as f64 / n_sig as f64)
            }
        };
        VennRow {
            roi: String::new(),
            n_significant: n_sig,
            n_semantic: ns,
            n_audio: na,
            n_joint: nj,
            pct_semantic: pct(ns),
            pct_audio: pct(na),
            pct_joint: pct(nj),
        }
    };
    let mut rows = Vec::new();
    for name in atlas.roi_names() {
        let mut row = count(&atlas.indices_of(&name));
        row.roi = name;
        rows.push(row);
    }
    let all: Vec<usize> = (0..v).collect();
    let mut overall = count(&all);
    overall.roi = "(all)".into();
    Ok(VennTable { rows, overall })
}

/// Keep the multimodal model only where it strictly improved validation r.
pub fn validation_mask(val_r_multi: &Array1<f64>, val_r_uni: &Array1<f64>) -> Result<Vec<bool>> {
    if val_r_multi.len() != val_r_uni.len() {
        return Err(EncxError::ShapeMismatch(format!(
            "validation mask inputs disagree: {} vs {}",
            val_r_multi.len(),
            val_r_uni.len()
        )));
    }
    Ok((0..val_r_multi.len())
        .map(|j| val_r_multi[j] > val_r_uni[j])
        .collect())
}

/// CSV rendering of a correlation matrix.
pub fn corr_to_csv(corr: &CorrMatrix) -> String {
    let mut out = String::from("roi");
    for name in &corr.names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, name) in corr.names.iter().enumerate() {
        out.push_str(name);
        for j in 0..corr.names.len() {
            out.push_str(&format!(",{:.9e}", corr.values[[i, j]]));
        }
        out.push('\n');
    }
    out
}
