//! Seeded synthetic datasets with known ground truth: stimulus features at
//! irregular event times, responses with planted linear / nonlinear /
//! multimodal structure, repeat stacks with known noise power, and ROI
//! dynamics that cluster by drive type.
//!
//! Responses are built from the same aligned design matrices the pipeline
//! produces (resample then delay-embed), so a noiseless linear dataset is
//! exactly linear in the features an encoder sees. Noise is white Gaussian
//! per TR, which keeps the repeat-based ceiling formula exact.

use crate::alignment::{delay_embed, lanczos_resample, FeatureSeries, DEFAULT_DELAYS_TR};
use crate::error::{EncxError, Result};
use crate::metrics::{ceiling_from_powers, RepeatStack};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensorio::RoiAtlas;
use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const MODALITY_SEMANTIC: &str = "semantic";
pub const MODALITY_AUDIO: &str = "audio";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    Linear,
    Nonlinear,
    Additive,
    MultimodalPlanted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drive {
    Semantic,
    Audio,
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoiPlanEntry {
    pub name: String,
    /// Half-open voxel range [start, end).
    pub start: usize,
    pub end: usize,
    pub drive: Drive,
    /// Gain per schedule block; cycles over story-local time.
    pub gain_schedule: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub t_train: usize,
    pub t_test: usize,
    pub v: usize,
    pub d_sem: usize,
    pub d_aud: usize,
    pub noise_sd: f64,
    /// Geometric spread of noise across voxels; overrides `noise_sd` when set.
    pub noise_sd_range: Option<(f64, f64)>,
    pub n_repeats: usize,
    pub structure: Structure,
    /// Must partition [0, v). Drives and schedules only shape the
    /// multimodal-planted structure.
    pub roi_plan: Vec<RoiPlanEntry>,
    pub block_len_tr: usize,
    pub tr_seconds: f64,
    pub events_per_tr: f64,
    pub lanczos_lobes: usize,
    pub delays_tr: Vec<usize>,
    pub n_train_stories: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            t_train: 800,
            t_test: 200,
            v: 48,
            d_sem: 8,
            d_aud: 4,
            noise_sd: 0.5,
            noise_sd_range: None,
            n_repeats: 10,
            structure: Structure::Linear,
            roi_plan: equal_rois(48, &["roiA", "roiB", "roiC", "roiD"]),
            block_len_tr: 40,
            tr_seconds: 2.0,
            events_per_tr: 3.0,
            lanczos_lobes: 3,
            delays_tr: DEFAULT_DELAYS_TR.to_vec(),
            n_train_stories: 2,
            seed: 0,
        }
    }
}

/// Split [0, v) evenly across `names` with joint drive and flat gains.
pub fn equal_rois(v: usize, names: &[&str]) -> Vec<RoiPlanEntry> {
    let n = names.len();
    (0..n)
        .map(|i| RoiPlanEntry {
            name: names[i].to_string(),
            start: v * i / n,
            end: v * (i + 1) / n,
            drive: Drive::Joint,
            gain_schedule: vec![1.0],
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct StoryData {
    pub story_id: String,
    pub features: BTreeMap<String, FeatureSeries>,
    /// T x V responses (signal plus noise), in raw generator units.
    pub responses: Array2<f64>,
    pub n_tr: usize,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Exact per-voxel variance of the noiseless test-timeline signal.
    pub signal_power: Array1<f64>,
    /// Configured per-voxel noise variance.
    pub noise_power: Array1<f64>,
    pub n_repeats: usize,
    pub roi_drives: Vec<(String, Drive)>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train_stories: Vec<StoryData>,
    pub test_story_id: String,
    pub test_features: BTreeMap<String, FeatureSeries>,
    pub test_repeats: Vec<Array2<f64>>,
    /// Noiseless test signal (the quantity behind GroundTruth.signal_power).
    pub test_signal: Array2<f64>,
    pub atlas: RoiAtlas,
    pub truth: GroundTruth,
    pub tr_seconds: f64,
}

impl SynthDataset {
    pub fn test_stack(&self) -> Result<RepeatStack> {
        RepeatStack::new(self.test_repeats.clone())
    }

    /// Aligned, delay-embedded design matrices for the training timeline,
    /// stories concatenated in order: (semantic, audio).
    pub fn train_design(&self, cfg: &SynthConfig) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut sems = Vec::new();
        let mut auds = Vec::new();
        for story in &self.train_stories {
            let (s, a) = align_story(cfg, &story.features, story.n_tr)?;
            sems.push(s);
            auds.push(a);
        }
        Ok((vstack(&sems), vstack(&auds)))
    }

    pub fn test_design(&self, cfg: &SynthConfig) -> Result<(Array2<f64>, Array2<f64>)> {
        align_story(cfg, &self.test_features, cfg.t_test)
    }

    /// Training responses concatenated across stories.
    pub fn train_responses(&self) -> Array2<f64> {
        let parts: Vec<Array2<f64>> = self
            .train_stories
            .iter()
            .map(|s| s.responses.clone())
            .collect();
        vstack(&parts)
    }
}

fn vstack(parts: &[Array2<f64>]) -> Array2<f64> {
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::<f64>::zeros((rows, cols));
    let mut at = 0;
    for p in parts {
        out.slice_mut(ndarray::s![at..at + p.nrows(), ..]).assign(p);
        at += p.nrows();
    }
    out
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.t_train == 0
        || cfg.t_test == 0
        || cfg.v == 0
        || cfg.d_sem == 0
        || cfg.d_aud == 0
        || cfg.n_repeats == 0
        || cfg.n_train_stories == 0
        || cfg.block_len_tr == 0
    {
        return Err(EncxError::InvalidArgument(
            "all synth counts must be positive".into(),
        ));
    }
    if !(cfg.tr_seconds > 0.0) || !(cfg.events_per_tr > 0.0) {
        return Err(EncxError::InvalidArgument(
            "tr_seconds and events_per_tr must be positive".into(),
        ));
    }
    let mut plan = cfg.roi_plan.clone();
    plan.sort_by_key(|e| e.start);
    let mut at = 0usize;
    for e in &plan {
        if e.start != at || e.end <= e.start {
            return Err(EncxError::InvalidArgument(format!(
                "roi plan does not partition voxels: '{}' covers [{}, {}) but expected start {at}",
                e.name, e.start, e.end
            )));
        }
        at = e.end;
    }
    if at != cfg.v {
        return Err(EncxError::InvalidArgument(format!(
            "roi plan covers [0, {at}) of {} voxels",
            cfg.v
        )));
    }
    if cfg.structure == Structure::MultimodalPlanted && (cfg.d_sem < 2 || cfg.d_aud < 2) {
        return Err(EncxError::InvalidArgument(
            "multimodal-planted needs at least 2 features per modality (one is reserved)".into(),
        ));
    }
    Ok(())
}

fn gaussian(rng: &mut SplitMix64) -> f64 {
    StandardNormal.sample(rng)
}

/// Irregular event times covering [0, n_tr * tr): a jittered regular grid.
fn event_times(rng: &mut SplitMix64, n_tr: usize, cfg: &SynthConfig) -> Vec<f64> {
    let step = cfg.tr_seconds / cfg.events_per_tr;
    let total = n_tr as f64 * cfg.tr_seconds;
    let n_events = (total / step).floor() as usize;
    (0..n_events)
        .map(|i| (i as f64 + 0.5 + rng.uniform(-0.3, 0.3)) * step)
        .collect()
}

/// Per-story feature series. In the planted structure the last column of
/// each modality carries one shared latent (identical values in both), which
/// is what makes "joint" drives readable from either modality.
fn gen_features(
    rng: &mut SplitMix64,
    n_tr: usize,
    cfg: &SynthConfig,
) -> Result<BTreeMap<String, FeatureSeries>> {
    let times = event_times(rng, n_tr, cfg);
    let n_ev = times.len();
    let mut sem = Array2::<f64>::zeros((n_ev, cfg.d_sem));
    let mut aud = Array2::<f64>::zeros((n_ev, cfg.d_aud));
    for i in 0..n_ev {
        for j in 0..cfg.d_sem {
            sem[[i, j]] = gaussian(rng);
        }
        for j in 0..cfg.d_aud {
            aud[[i, j]] = gaussian(rng);
        }
    }
    if cfg.structure == Structure::MultimodalPlanted {
        for i in 0..n_ev {
            let shared = gaussian(rng);
            sem[[i, cfg.d_sem - 1]] = shared;
            aud[[i, cfg.d_aud - 1]] = shared;
        }
    }
    let mut out = BTreeMap::new();
    out.insert(
        MODALITY_SEMANTIC.to_string(),
        FeatureSeries::new(times.clone(), sem)?,
    );
    out.insert(MODALITY_AUDIO.to_string(), FeatureSeries::new(times, aud)?);
    Ok(out)
}

/// Resample and delay-embed one story's features: (semantic, audio) blocks.
pub fn align_story(
    cfg: &SynthConfig,
    features: &BTreeMap<String, FeatureSeries>,
    n_tr: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let sem = features
        .get(MODALITY_SEMANTIC)
        .ok_or_else(|| EncxError::Manifest("missing semantic features".into()))?;
    let aud = features
        .get(MODALITY_AUDIO)
        .ok_or_else(|| EncxError::Manifest("missing audio features".into()))?;
    let sem_tr = lanczos_resample(sem, cfg.tr_seconds, n_tr, cfg.lanczos_lobes)?;
    let aud_tr = lanczos_resample(aud, cfg.tr_seconds, n_tr, cfg.lanczos_lobes)?;
    Ok((
        delay_embed(&sem_tr, &cfg.delays_tr)?.data,
        delay_embed(&aud_tr, &cfg.delays_tr)?.data,
    ))
}

/// Everything sampled once and reused on the train and test timelines.
struct GenWeights {
    // Linear part factored through a small set of latent series so the
    // across-voxel signal is low-rank (as voxel data is): lin = x p_lin m_lin.
    p_lin: Array2<f64>, // (ds + da) x r
    m_lin: Array2<f64>, // r x v
    u_sem: Array2<f64>,
    w_tanh_sem: Array2<f64>,
    u_aud: Array2<f64>,
    w_tanh_aud: Array2<f64>,
    // Within-modality product features: (x a_k)(x b_k). Products of centered
    // projections carry no linear component at all, so a linear readout is
    // blind to them while a per-modality nonlinear branch is not.
    a_sem: Array2<f64>,
    b_sem: Array2<f64>,
    w_prod_sem: Array2<f64>,
    a_aud: Array2<f64>,
    b_aud: Array2<f64>,
    w_prod_aud: Array2<f64>,
    p_cross: Array2<f64>, // ds x k
    q_cross: Array2<f64>, // da x k
    w_cross: Array2<f64>, // k x v
    roi_dirs: Vec<Array1<f64>>, // per plan entry, in that drive's embedded space
    voxel_gain: Array1<f64>,
    bg_gain: Array1<f64>,
}

const LIN_LATENTS: usize = 16;
const TANH_HIDDEN: usize = 12;
const CROSS_TERMS: usize = 6;
const PROD_TERMS: usize = 4;
const TANH_INPUT_SCALE: f64 = 2.5;
const BACKGROUND_WEIGHT: f64 = 0.6;

fn sample_weights(cfg: &SynthConfig, ds: usize, da: usize) -> GenWeights {
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, 3));
    let v = cfg.v;
    let mut mat = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| gaussian(&mut rng));
    let p_lin = mat(ds + da, LIN_LATENTS);
    let m_lin = mat(LIN_LATENTS, v);
    let u_sem = mat(ds, TANH_HIDDEN);
    let w_tanh_sem = mat(TANH_HIDDEN, v);
    let u_aud = mat(da, TANH_HIDDEN);
    let w_tanh_aud = mat(TANH_HIDDEN, v);
    let a_sem = mat(ds, PROD_TERMS);
    let b_sem = mat(ds, PROD_TERMS);
    let w_prod_sem = mat(PROD_TERMS, v);
    let a_aud = mat(da, PROD_TERMS);
    let b_aud = mat(da, PROD_TERMS);
    let w_prod_aud = mat(PROD_TERMS, v);
    let p_cross = mat(ds, CROSS_TERMS);
    let q_cross = mat(da, CROSS_TERMS);
    let w_cross = mat(CROSS_TERMS, v);
    let mut roi_dirs = Vec::new();
    for entry in &cfg.roi_plan {
        // Joint drives read the shared feature column (delay-1 copy); private
        // drives get a random direction over their modality's private columns.
        let dir = match entry.drive {
            Drive::Joint => {
                let mut d = Array1::<f64>::zeros(ds);
                d[cfg.d_sem - 1] = 1.0; // delay-1 copy of the shared column
                d
            }
            Drive::Semantic => {
                let mut d = Array1::from_shape_fn(ds, |_| gaussian(&mut rng));
                if cfg.structure == Structure::MultimodalPlanted {
                    zero_shared_positions(&mut d, cfg.d_sem, cfg.delays_tr.len());
                }
                d
            }
            Drive::Audio => {
                let mut d = Array1::from_shape_fn(da, |_| gaussian(&mut rng));
                if cfg.structure == Structure::MultimodalPlanted {
                    zero_shared_positions(&mut d, cfg.d_aud, cfg.delays_tr.len());
                }
                d
            }
        };
        roi_dirs.push(dir);
    }
    let voxel_gain = Array1::from_shape_fn(v, |_| rng.uniform(0.7, 1.3));
    let bg_gain = Array1::from_shape_fn(v, |_| rng.uniform(0.7, 1.3));
    GenWeights {
        p_lin,
        m_lin,
        u_sem,
        w_tanh_sem,
        u_aud,
        w_tanh_aud,
        a_sem,
        b_sem,
        w_prod_sem,
        a_aud,
        b_aud,
        w_prod_aud,
        p_cross,
        q_cross,
        w_cross,
        roi_dirs,
        voxel_gain,
        bg_gain,
    }
}

/// Zero the embedded copies of the reserved shared column so private drives
/// stay private.
fn zero_shared_positions(dir: &mut Array1<f64>, d_mod: usize, n_delays: usize) {
    for b in 0..n_delays {
        dir[b * d_mod + (d_mod - 1)] = 0.0;
    }
}

/// Column-normalize to unit (unbiased) standard deviation; constant columns
/// are left untouched. Returns the applied divisors.
fn unit_sd_columns(m: &mut Array2<f64>) -> Array1<f64> {
    let t = m.nrows();
    let mut scales = Array1::<f64>::ones(m.ncols());
    for j in 0..m.ncols() {
        let mean = (0..t).map(|i| m[[i, j]]).sum::<f64>() / t as f64;
        let ss: f64 = (0..t).map(|i| (m[[i, j]] - mean).powi(2)).sum();
        let sd = (ss / (t as f64 - 1.0)).sqrt();
        if sd > 0.0 {
            scales[j] = sd;
            for i in 0..t {
                m[[i, j]] /= sd;
            }
        }
    }
    scales
}

/// Apply normalization factors learned on the training timeline.
fn apply_scales(m: &mut Array2<f64>, scales: &Array1<f64>) {
    for j in 0..m.ncols() {
        let s = scales[j];
        for i in 0..m.nrows() {
            m[[i, j]] /= s;
        }
    }
}

struct SignalParts {
    components: Vec<Array2<f64>>,
    weights: Vec<f64>,
}

/// Divisors for the nonlinear component inputs, learned once on the training
/// design so the stimulus-to-signal map is one fixed function of the
/// features on every timeline.
struct InternalScales {
    tanh_sem: Array1<f64>,
    tanh_aud: Array1<f64>,
    prod_sem_a: Array1<f64>,
    prod_sem_b: Array1<f64>,
    prod_aud_a: Array1<f64>,
    prod_aud_b: Array1<f64>,
    cross_a: Array1<f64>,
    cross_b: Array1<f64>,
}

fn column_sds(m: &Array2<f64>) -> Array1<f64> {
    let t = m.nrows();
    Array1::from_shape_fn(m.ncols(), |j| {
        let mean = (0..t).map(|i| m[[i, j]]).sum::<f64>() / t as f64;
        let ss: f64 = (0..t).map(|i| (m[[i, j]] - mean).powi(2)).sum();
        let sd = (ss / (t as f64 - 1.0)).sqrt();
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    })
}

fn learn_internal_scales(
    w: &GenWeights,
    x_sem: &Array2<f64>,
    x_aud: &Array2<f64>,
) -> InternalScales {
    InternalScales {
        tanh_sem: column_sds(&x_sem.dot(&w.u_sem)),
        tanh_aud: column_sds(&x_aud.dot(&w.u_aud)),
        prod_sem_a: column_sds(&x_sem.dot(&w.a_sem)),
        prod_sem_b: column_sds(&x_sem.dot(&w.b_sem)),
        prod_aud_a: column_sds(&x_aud.dot(&w.a_aud)),
        prod_aud_b: column_sds(&x_aud.dot(&w.b_aud)),
        cross_a: column_sds(&x_sem.dot(&w.p_cross)),
        cross_b: column_sds(&x_aud.dot(&w.q_cross)),
    }
}

fn raw_components(
    cfg: &SynthConfig,
    w: &GenWeights,
    scales: &InternalScales,
    x_sem: &Array2<f64>,
    x_aud: &Array2<f64>,
    story_local_t: &[usize],
) -> SignalParts {
    let t = x_sem.nrows();
    let v = cfg.v;
    let x_all = {
        let mut m = Array2::<f64>::zeros((t, x_sem.ncols() + x_aud.ncols()));
        m.slice_mut(ndarray::s![.., ..x_sem.ncols()]).assign(x_sem);
        m.slice_mut(ndarray::s![.., x_sem.ncols()..]).assign(x_aud);
        m
    };
    match cfg.structure {
        Structure::Linear => SignalParts {
            components: vec![x_all.dot(&w.p_lin).dot(&w.m_lin)],
            weights: vec![1.0],
        },
        Structure::Nonlinear => {
            let lin = x_all.dot(&w.p_lin).dot(&w.m_lin);
            let tanh_sem = tanh_mix(x_sem, &w.u_sem, &scales.tanh_sem).dot(&w.w_tanh_sem);
            let tanh_aud = tanh_mix(x_aud, &w.u_aud, &scales.tanh_aud).dot(&w.w_tanh_aud);
            let prod_sem = scaled_products(
                x_sem,
                x_sem,
                &w.a_sem,
                &w.b_sem,
                &scales.prod_sem_a,
                &scales.prod_sem_b,
            )
            .dot(&w.w_prod_sem);
            let prod_aud = scaled_products(
                x_aud,
                x_aud,
                &w.a_aud,
                &w.b_aud,
                &scales.prod_aud_a,
                &scales.prod_aud_b,
            )
            .dot(&w.w_prod_aud);
            let cross = scaled_products(
                x_sem,
                x_aud,
                &w.p_cross,
                &w.q_cross,
                &scales.cross_a,
                &scales.cross_b,
            )
            .dot(&w.w_cross);
            SignalParts {
                components: vec![lin, tanh_sem + tanh_aud, prod_sem + prod_aud, cross],
                weights: vec![0.45, 0.45, 0.5, 0.6],
            }
        }
        Structure::Additive => {
            let lin = x_all.dot(&w.p_lin).dot(&w.m_lin);
            let tanh_sem = tanh_mix(x_sem, &w.u_sem, &scales.tanh_sem).dot(&w.w_tanh_sem);
            let tanh_aud = tanh_mix(x_aud, &w.u_aud, &scales.tanh_aud).dot(&w.w_tanh_aud);
            SignalParts {
                components: vec![lin, tanh_sem, tanh_aud],
                weights: vec![0.5, 0.55, 0.55],
            }
        }
        Structure::MultimodalPlanted => {
            // Per-ROI drive latents modulated by the block gain schedule,
            // plus a shared background so raw connectivity stays flat.
            let mut planted = Array2::<f64>::zeros((t, v));
            for (k, entry) in cfg.roi_plan.iter().enumerate() {
                let dir = &w.roi_dirs[k];
                let series = match entry.drive {
                    Drive::Semantic | Drive::Joint => x_sem.dot(dir),
                    Drive::Audio => x_aud.dot(dir),
                };
                let sched = &entry.gain_schedule;
                for (row, &lt) in story_local_t.iter().enumerate() {
                    let gain = sched[(lt / cfg.block_len_tr) % sched.len()];
                    for voxel in entry.start..entry.end {
                        planted[[row, voxel]] = gain * series[row] * w.voxel_gain[voxel];
                    }
                }
            }
            // Background: the shared column's delay-1 copy feeds every voxel.
            let shared_idx = cfg.d_sem - 1;
            let mut background = Array2::<f64>::zeros((t, v));
            for row in 0..t {
                let c = x_sem[[row, shared_idx]];
                for voxel in 0..v {
                    background[[row, voxel]] = c * w.bg_gain[voxel];
                }
            }
            SignalParts {
                components: vec![planted, background],
                weights: vec![1.0, BACKGROUND_WEIGHT],
            }
        }
    }
}

fn tanh_mix(x: &Array2<f64>, u: &Array2<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut z = x.dot(u);
    apply_scales(&mut z, scale);
    z.mapv_inplace(|v| (TANH_INPUT_SCALE * v).tanh());
    z
}

/// Elementwise products of two projection blocks, each divided by its
/// train-learned scale: within-modality when `xa` and `xb` coincide,
/// cross-modality otherwise.
fn scaled_products(
    xa: &Array2<f64>,
    xb: &Array2<f64>,
    a: &Array2<f64>,
    b: &Array2<f64>,
    sa: &Array1<f64>,
    sb: &Array1<f64>,
) -> Array2<f64> {
    let mut pa = xa.dot(a);
    let mut pb = xb.dot(b);
    apply_scales(&mut pa, sa);
    apply_scales(&mut pb, sb);
    let mut out = Array2::<f64>::zeros(pa.raw_dim());
    for ((i, j), slot) in out.indexed_iter_mut() {
        *slot = pa[[i, j]] * pb[[i, j]];
    }
    out
}

/// Normalization state learned on the training timeline (unit sd per voxel
/// and per component), reapplied verbatim on the test timeline so the
/// train-to-test map is one fixed function.
struct SignalModel {
    component_scales: Vec<Array1<f64>>,
    weights: Vec<f64>,
    final_scale: Array1<f64>,
}

fn combine(parts: &mut SignalParts, model: Option<&SignalModel>) -> (Array2<f64>, Option<SignalModel>) {
    let t = parts.components[0].nrows();
    let v = parts.components[0].ncols();
    match model {
        None => {
            let mut component_scales = Vec::new();
            for c in parts.components.iter_mut() {
                component_scales.push(unit_sd_columns(c));
            }
            let mut total = Array2::<f64>::zeros((t, v));
            for (c, &w) in parts.components.iter().zip(&parts.weights) {
                total = total + &(c * w);
            }
            let final_scale = unit_sd_columns(&mut total);
            (
                total,
                Some(SignalModel {
                    component_scales,
                    weights: parts.weights.clone(),
                    final_scale,
                }),
            )
        }
        Some(m) => {
            let mut total = Array2::<f64>::zeros((t, v));
            for ((c, scale), &w) in parts
                .components
                .iter_mut()
                .zip(&m.component_scales)
                .zip(&m.weights)
            {
                apply_scales(c, scale);
                total = total + &(&*c * w);
            }
            apply_scales(&mut total, &m.final_scale);
            (total, None)
        }
    }
}

/// Generate a full dataset: train stories, a test repeat stack, the atlas,
/// and the ground truth needed for analytic ceilings.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    validate(cfg)?;

    // Per-voxel noise scale.
    let noise_sd: Array1<f64> = match cfg.noise_sd_range {
        None => Array1::from_elem(cfg.v, cfg.noise_sd),
        Some((lo, hi)) => {
            if !(lo > 0.0) || !(hi > 0.0) {
                return Err(EncxError::InvalidArgument(
                    "noise_sd_range bounds must be positive".into(),
                ));
            }
            Array1::from_shape_fn(cfg.v, |j| {
                let frac = if cfg.v == 1 {
                    0.0
                } else {
                    j as f64 / (cfg.v - 1) as f64
                };
                lo * (hi / lo).powf(frac)
            })
        }
    };

    // Stories: contiguous chunks of the training timeline.
    let bounds: Vec<(usize, usize)> = (0..cfg.n_train_stories)
        .map(|s| {
            (
                cfg.t_train * s / cfg.n_train_stories,
                cfg.t_train * (s + 1) / cfg.n_train_stories,
            )
        })
        .collect();
    if bounds.iter().any(|(lo, hi)| hi - lo < 2) {
        return Err(EncxError::InvalidArgument(
            "stories need at least 2 TRs each".into(),
        ));
    }

    let mut story_features = Vec::new();
    let mut sem_parts = Vec::new();
    let mut aud_parts = Vec::new();
    let mut local_t: Vec<usize> = Vec::new();
    for (s, (lo, hi)) in bounds.iter().enumerate() {
        let n_tr = hi - lo;
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, 100 + s as u64));
        let feats = gen_features(&mut rng, n_tr, cfg)?;
        let (x_sem, x_aud) = align_story(cfg, &feats, n_tr)?;
        sem_parts.push(x_sem);
        aud_parts.push(x_aud);
        local_t.extend(0..n_tr);
        story_features.push(feats);
    }
    let x_sem_train = vstack(&sem_parts);
    let x_aud_train = vstack(&aud_parts);

    let ds = x_sem_train.ncols();
    let da = x_aud_train.ncols();
    let weights = sample_weights(cfg, ds, da);
    let scales = learn_internal_scales(&weights, &x_sem_train, &x_aud_train);

    // Training signal fixes the normalization; the test timeline reuses it.
    let mut train_parts =
        raw_components(cfg, &weights, &scales, &x_sem_train, &x_aud_train, &local_t);
    let (signal_train, model) = combine(&mut train_parts, None);
    let model = model.expect("training pass returns the model");

    let mut test_rng = SplitMix64::new(derive_seed(cfg.seed, 200));
    let test_features = gen_features(&mut test_rng, cfg.t_test, cfg)?;
    let (x_sem_test, x_aud_test) = align_story(cfg, &test_features, cfg.t_test)?;
    let test_local: Vec<usize> = (0..cfg.t_test).collect();
    let mut test_parts =
        raw_components(cfg, &weights, &scales, &x_sem_test, &x_aud_test, &test_local);
    let (signal_test, _) = combine(&mut test_parts, Some(&model));

    // Noise.
    let mut train_noise_rng = SplitMix64::new(derive_seed(cfg.seed, 4));
    let mut y_train = signal_train.clone();
    for mut row in y_train.rows_mut() {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot += noise_sd[j] * gaussian(&mut train_noise_rng);
        }
    }

    let mut test_repeats = Vec::with_capacity(cfg.n_repeats);
    for rep in 0..cfg.n_repeats {
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, 1000 + rep as u64));
        let mut y = signal_test.clone();
        for mut row in y.rows_mut() {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot += noise_sd[j] * gaussian(&mut rng);
            }
        }
        test_repeats.push(y);
    }

    // Atlas from the plan.
    let mut labels = vec![String::new(); cfg.v];
    for entry in &cfg.roi_plan {
        for slot in labels.iter_mut().take(entry.end).skip(entry.start) {
            *slot = entry.name.clone();
        }
    }

    // Exact test-signal power per voxel.
    let t_test = signal_test.nrows() as f64;
    let mean = signal_test.mean_axis(Axis(0)).expect("nonempty test");
    let mut signal_power = Array1::<f64>::zeros(cfg.v);
    for j in 0..cfg.v {
        let mut ss = 0.0;
        for i in 0..signal_test.nrows() {
            let d = signal_test[[i, j]] - mean[j];
            ss += d * d;
        }
        signal_power[j] = ss / (t_test - 1.0);
    }

    let mut train_stories = Vec::new();
    for (s, (lo, hi)) in bounds.iter().enumerate() {
        let n_tr = hi - lo;
        train_stories.push(StoryData {
            story_id: format!("train{s:02}"),
            features: story_features[s].clone(),
            responses: y_train.slice(ndarray::s![*lo..*hi, ..]).to_owned(),
            n_tr,
        });
    }

    Ok(SynthDataset {
        train_stories,
        test_story_id: "test00".into(),
        test_features,
        test_repeats,
        test_signal: signal_test,
        atlas: RoiAtlas::new(labels),
        truth: GroundTruth {
            signal_power,
            noise_power: noise_sd.mapv(|s| s * s),
            n_repeats: cfg.n_repeats,
            roi_drives: cfg
                .roi_plan
                .iter()
                .map(|e| (e.name.clone(), e.drive))
                .collect(),
        },
        tr_seconds: cfg.tr_seconds,
    })
}

/// Closed-form per-voxel ceiling from known powers.
pub fn analytic_ceiling(gt: &GroundTruth, n_repeats: usize) -> Result<Array1<f64>> {
    let mut out = Array1::<f64>::zeros(gt.signal_power.len());
    for j in 0..out.len() {
        let sp = gt.signal_power[j];
        if sp <= 0.0 {
            return Err(EncxError::InvalidArgument(format!(
                "voxel {j} has nonpositive signal power {sp}"
            )));
        }
        out[j] = ceiling_from_powers(sp, gt.noise_power[j], n_repeats);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Named configurations used by the command-line pipeline and the test suites.
// ---------------------------------------------------------------------------

/// Linear benchmark: T = 2000, V = 500, 64 embedded features, light noise.
pub fn preset_linear(seed: u64) -> SynthConfig {
    SynthConfig {
        t_train: 2000,
        t_test: 500,
        v: 500,
        d_sem: 12,
        d_aud: 4,
        noise_sd: 0.1,
        structure: Structure::Linear,
        roi_plan: equal_rois(500, &["bandA", "bandB", "bandC", "bandD"]),
        n_train_stories: 2,
        seed,
        ..Default::default()
    }
}

/// Nonlinear structure with cross-modal product terms.
pub fn preset_nonlinear(seed: u64) -> SynthConfig {
    SynthConfig {
        t_train: 1600,
        t_test: 400,
        v: 96,
        d_sem: 8,
        d_aud: 4,
        noise_sd: 0.5,
        structure: Structure::Nonlinear,
        roi_plan: equal_rois(96, &["bandA", "bandB", "bandC", "bandD"]),
        n_train_stories: 2,
        seed,
        ..Default::default()
    }
}

/// Per-modality nonlinearities with no cross-modal term.
pub fn preset_additive(seed: u64) -> SynthConfig {
    SynthConfig {
        structure: Structure::Additive,
        ..preset_nonlinear(seed)
    }
}

/// Two planted drive groups with complementary gain schedules, for the
/// error-difference clustering analyses.
pub fn preset_planted_red(seed: u64) -> SynthConfig {
    let v = 96;
    let names = [
        ("semA", Drive::Semantic),
        ("semB", Drive::Semantic),
        ("semC", Drive::Semantic),
        ("semD", Drive::Semantic),
        ("audA", Drive::Audio),
        ("audB", Drive::Audio),
        ("audC", Drive::Audio),
        ("audD", Drive::Audio),
    ];
    let n = names.len();
    let roi_plan: Vec<RoiPlanEntry> = names
        .iter()
        .enumerate()
        .map(|(i, (name, drive))| RoiPlanEntry {
            name: name.to_string(),
            start: v * i / n,
            end: v * (i + 1) / n,
            drive: *drive,
            gain_schedule: match drive {
                Drive::Audio => vec![0.15, 1.25],
                _ => vec![1.25, 0.15],
            },
        })
        .collect();
    SynthConfig {
        t_train: 1200,
        t_test: 400,
        v,
        d_sem: 12,
        d_aud: 8,
        noise_sd: 0.6,
        structure: Structure::MultimodalPlanted,
        roi_plan,
        block_len_tr: 40,
        n_train_stories: 2,
        seed,
        ..Default::default()
    }
}

/// Planted drives for variance partitioning: audio-only, semantic-only, and
/// redundant (joint) voxel groups with flat gains.
pub fn preset_planted_vp(seed: u64) -> SynthConfig {
    let v = 90;
    let names = [
        ("semOnly", Drive::Semantic),
        ("audOnly", Drive::Audio),
        ("redundant", Drive::Joint),
    ];
    let n = names.len();
    let roi_plan: Vec<RoiPlanEntry> = names
        .iter()
        .enumerate()
        .map(|(i, (name, drive))| RoiPlanEntry {
            name: name.to_string(),
            start: v * i / n,
            end: v * (i + 1) / n,
            drive: *drive,
            gain_schedule: vec![1.0],
        })
        .collect();
    SynthConfig {
        t_train: 1200,
        t_test: 400,
        v,
        d_sem: 12,
        d_aud: 8,
        noise_sd: 0.4,
        structure: Structure::MultimodalPlanted,
        roi_plan,
        n_train_stories: 2,
        seed,
        ..Default::default()
    }
}

/// Small linear config for end-to-end determinism runs.
pub fn preset_tiny(seed: u64) -> SynthConfig {
    SynthConfig {
        t_train: 300,
        t_test: 120,
        v: 24,
        d_sem: 6,
        d_aud: 3,
        noise_sd: 0.3,
        structure: Structure::Linear,
        roi_plan: equal_rois(24, &["left", "right"]),
        n_train_stories: 2,
        seed,
        ..Default::default()
    }
}

pub fn preset_by_name(name: &str, seed: u64) -> Result<SynthConfig> {
    match name {
        "linear" => Ok(preset_linear(seed)),
        "nonlinear" => Ok(preset_nonlinear(seed)),
        "additive" => Ok(preset_additive(seed)),
        "planted-red" => Ok(preset_planted_red(seed)),
        "planted-vp" => Ok(preset_planted_vp(seed)),
        "tiny" => Ok(preset_tiny(seed)),
        other => Err(EncxError::InvalidArgument(format!(
            "unknown synth preset '{other}'"
        ))),
    }
}
