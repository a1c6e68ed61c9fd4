//! Subcommand implementations. Every command is deterministic given its
//! inputs and seed, and every file written carries the effective config hash.

use crate::config::CliConfig;
use anyhow::{anyhow, bail, Context};
use encx_core::alignment::{delay_embed, lanczos_resample, FeatureSeries};
use encx_core::analysis::{
    self, best_cut_modularity, functional_connectivity, hierarchical_cluster, red_field,
    roi_correlation, roi_red_series, roi_venn, variance_partition, PartitionBasis,
};
use encx_core::encoders::{
    concat_modalities, fit_ridge_bootstrap, load_model, save_model, train_network, Architecture,
    ModelMeta, OutputSpace, TrainedModel,
};
use encx_core::metrics::{
    cc_norm, noise_ceiling, pearson_per_voxel, signed_r2, significance_fdr, summarize,
    EvalReport, RepeatStack,
};
use encx_core::reduction::{fit_incremental_pca, PcaModel};
use encx_core::synthgen::{self, MODALITY_AUDIO, MODALITY_SEMANTIC};
use encx_core::tensorio::{
    read_matrix, write_matrix, zscore_responses, DatasetManifest, FeatureRef, MatrixContainer,
    RoiAtlas, StoryEntry, TestStoryEntry,
};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const META_CONFIG_HASH: &str = "config_hash";

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_effective_config(out: &Path, cfg: &CliConfig) -> anyhow::Result<()> {
    std::fs::write(out.join("effective_config.json"), cfg.canonical_json())
        .with_context(|| format!("writing effective config under {}", out.display()))
}

fn write_stamped(
    a: &Array2<f64>,
    path: &Path,
    hash: &str,
    extra_meta: &[(&str, String)],
) -> anyhow::Result<()> {
    let mut m = MatrixContainer::from_f64(a).with_meta(META_CONFIG_HASH, hash);
    for (k, v) in extra_meta {
        m.meta_mut().insert((*k).to_string(), v.clone());
    }
    write_matrix(&m, path)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(cfg: &CliConfig, out: &Path) -> anyhow::Result<()> {
    let mut synth_cfg = match (&cfg.synth.config, &cfg.synth.preset) {
        (Some(explicit), _) => explicit.clone(),
        (None, Some(name)) => synthgen::preset_by_name(name, cfg.seed)?,
        (None, None) => synthgen::preset_by_name("tiny", cfg.seed)?,
    };
    synth_cfg.seed = cfg.seed;
    let hash = cfg.hash();

    let data = synthgen::generate(&synth_cfg)?;
    ensure_dir(out)?;
    let stories_dir = out.join("stories");
    ensure_dir(&stories_dir)?;

    let mut manifest_stories = Vec::new();
    for story in &data.train_stories {
        let mut feature_paths = BTreeMap::new();
        for (modality, fs) in &story.features {
            let values_rel = format!("stories/{}_{}.encx", story.story_id, modality);
            let times_rel = format!("stories/{}_{}_times.encx", story.story_id, modality);
            write_feature(fs, &out.join(&values_rel), &out.join(&times_rel), &hash)?;
            feature_paths.insert(
                modality.clone(),
                FeatureRef {
                    values: values_rel.into(),
                    times: times_rel.into(),
                },
            );
        }
        let resp_rel = format!("stories/{}_response.encx", story.story_id);
        write_stamped(
            &story.responses,
            &out.join(&resp_rel),
            &hash,
            &[("story_id", story.story_id.clone())],
        )?;
        manifest_stories.push(StoryEntry {
            story_id: story.story_id.clone(),
            feature_paths,
            response_path: resp_rel.into(),
            tr_seconds: synth_cfg.tr_seconds,
        });
    }

    let mut test_feature_paths = BTreeMap::new();
    for (modality, fs) in &data.test_features {
        let values_rel = format!("stories/{}_{}.encx", data.test_story_id, modality);
        let times_rel = format!("stories/{}_{}_times.encx", data.test_story_id, modality);
        write_feature(fs, &out.join(&values_rel), &out.join(&times_rel), &hash)?;
        test_feature_paths.insert(
            modality.clone(),
            FeatureRef {
                values: values_rel.into(),
                times: times_rel.into(),
            },
        );
    }
    let mut repeat_paths = Vec::new();
    for (k, rep) in data.test_repeats.iter().enumerate() {
        let rel = format!("stories/{}_rep{k:02}.encx", data.test_story_id);
        write_stamped(rep, &out.join(&rel), &hash, &[])?;
        repeat_paths.push(PathBuf::from(rel));
    }

    data.atlas.save(out.join("atlas.json"))?;
    let manifest = DatasetManifest {
        stories: manifest_stories,
        test_stories: vec![TestStoryEntry {
            story_id: data.test_story_id.clone(),
            feature_paths: test_feature_paths,
            repeat_response_paths: repeat_paths,
            tr_seconds: synth_cfg.tr_seconds,
        }],
        roi_atlas_path: "atlas.json".into(),
    };
    manifest.save(out.join("manifest.json"))?;

    write_json(
        &out.join("groundtruth.json"),
        &json!({
            "signal_power": data.truth.signal_power.to_vec(),
            "noise_power": data.truth.noise_power.to_vec(),
            "n_repeats": data.truth.n_repeats,
            "roi_drives": data.truth.roi_drives
                .iter()
                .map(|(name, drive)| json!({"roi": name, "drive": drive}))
                .collect::<Vec<_>>(),
            "config_hash": hash,
        }),
    )?;
    write_effective_config(out, cfg)?;
    println!("synth: wrote dataset to {}", out.display());
    Ok(())
}

fn write_feature(
    fs: &FeatureSeries,
    values_path: &Path,
    times_path: &Path,
    hash: &str,
) -> anyhow::Result<()> {
    write_stamped(&fs.values().to_owned(), values_path, hash, &[])?;
    let times = Array2::from_shape_fn((fs.len(), 1), |(i, _)| fs.times()[i]);
    write_stamped(&times, times_path, hash, &[])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct PreparedMeta {
    pub voxel_count: usize,
    pub n_train_rows: usize,
    pub n_test_rows: usize,
    pub n_repeats: usize,
    pub tr_seconds: f64,
    pub modalities: Vec<String>,
    pub k_max: usize,
    pub delays_tr: Vec<usize>,
    pub lanczos_lobes: usize,
    pub config_hash: String,
}

fn align_feature(
    fs_values: &Path,
    fs_times: &Path,
    tr_seconds: f64,
    n_tr: usize,
    lobes: usize,
    delays: &[usize],
) -> anyhow::Result<Array2<f64>> {
    let values = read_matrix(fs_values)?.to_f64();
    let times = read_matrix(fs_times)?.to_f64();
    if times.ncols() != 1 || times.nrows() != values.nrows() {
        bail!(
            "times matrix {} must be one column matching {} value rows",
            fs_times.display(),
            values.nrows()
        );
    }
    let fs = FeatureSeries::new(times.column(0).to_vec(), values)?;
    let resampled = lanczos_resample(&fs, tr_seconds, n_tr, lobes)?;
    Ok(delay_embed(&resampled, delays)?.data)
}

pub fn cmd_prepare(cfg: &CliConfig, manifest_path: &Path, out: &Path) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let voxel_count = manifest.validate()?;
    let hash = cfg.hash();
    ensure_dir(out)?;

    if manifest.stories.is_empty() || manifest.test_stories.is_empty() {
        bail!("manifest needs at least one training story and one test story");
    }
    let modalities: Vec<String> = manifest.stories[0]
        .feature_paths
        .keys()
        .cloned()
        .collect();

    // Training stories: z-score responses per story, align features per story.
    let mut x_train: BTreeMap<String, Vec<Array2<f64>>> = BTreeMap::new();
    let mut y_parts: Vec<Array2<f64>> = Vec::new();
    for story in &manifest.stories {
        let y = read_matrix(&story.response_path)?;
        let n_tr = y.rows();
        let yz = zscore_responses(&y)?.to_f64();
        for (modality, fref) in &story.feature_paths {
            let x = align_feature(
                &fref.values,
                &fref.times,
                story.tr_seconds,
                n_tr,
                cfg.prepare.lanczos_lobes,
                &cfg.prepare.delays_tr,
            )?;
            x_train.entry(modality.clone()).or_default().push(x);
        }
        y_parts.push(yz);
    }
    let y_train = vstack(&y_parts);

    // Test story (the first): align features, z-score each repeat.
    let test = &manifest.test_stories[0];
    let first_rep = read_matrix(&test.repeat_response_paths[0])?;
    let n_test_rows = first_rep.rows();
    let mut x_test: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for (modality, fref) in &test.feature_paths {
        let x = align_feature(
            &fref.values,
            &fref.times,
            test.tr_seconds,
            n_test_rows,
            cfg.prepare.lanczos_lobes,
            &cfg.prepare.delays_tr,
        )?;
        x_test.insert(modality.clone(), x);
    }
    let mut repeats = Vec::new();
    for rel in &test.repeat_response_paths {
        let rep = read_matrix(rel)?;
        repeats.push(zscore_responses(&rep)?.to_f64());
    }
    let stack = RepeatStack::new(repeats)?;
    let y_test_mean = stack.mean();

    // PCA over the aggregated z-scored training responses.
    let k_max = cfg
        .prepare
        .n_pca_max
        .min(y_train.nrows())
        .min(y_train.ncols());
    let pca = fit_incremental_pca(&y_train, k_max, cfg.prepare.batch_rows)?;
    pca.save(out.join("pca"))?;

    for (modality, parts) in &x_train {
        write_stamped(
            &vstack(parts),
            &out.join(format!("x_train_{modality}.encx")),
            &hash,
            &[],
        )?;
    }
    for (modality, x) in &x_test {
        write_stamped(
            x,
            &out.join(format!("x_test_{modality}.encx")),
            &hash,
            &[],
        )?;
    }
    write_stamped(&y_train, &out.join("y_train.encx"), &hash, &[])?;
    write_stamped(&y_test_mean, &out.join("y_test_mean.encx"), &hash, &[])?;
    for (k, rep) in stack.repeats().iter().enumerate() {
        write_stamped(
            rep,
            &out.join(format!("y_test_rep{k:02}.encx")),
            &hash,
            &[],
        )?;
    }
    let atlas = RoiAtlas::load(&manifest.roi_atlas_path)?;
    atlas.save(out.join("atlas.json"))?;

    let meta = PreparedMeta {
        voxel_count,
        n_train_rows: y_train.nrows(),
        n_test_rows,
        n_repeats: stack.n_repeats(),
        tr_seconds: manifest.stories[0].tr_seconds,
        modalities,
        k_max,
        delays_tr: cfg.prepare.delays_tr.clone(),
        lanczos_lobes: cfg.prepare.lanczos_lobes,
        config_hash: hash,
    };
    std::fs::write(
        out.join("prepared.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    write_effective_config(out, cfg)?;
    println!(
        "prepare: {} train rows, {} test rows, {} voxels, k_max {}",
        meta.n_train_rows, meta.n_test_rows, meta.voxel_count, meta.k_max
    );
    Ok(())
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

// ---------------------------------------------------------------------------
// shared loading of a prepared directory
// ---------------------------------------------------------------------------

pub struct Prepared {
    pub meta: PreparedMeta,
    pub dir: PathBuf,
    pub atlas: RoiAtlas,
}

impl Prepared {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(dir.join("prepared.json"))
            .with_context(|| format!("{} is not a prepared directory", dir.display()))?;
        let meta: PreparedMeta = serde_json::from_str(&text)?;
        let atlas = RoiAtlas::load(dir.join("atlas.json"))?;
        Ok(Prepared {
            meta,
            dir: dir.to_path_buf(),
            atlas,
        })
    }

    fn design(&self, split: &str, modality: &str) -> anyhow::Result<(Array2<f64>, Option<usize>)> {
        let read = |m: &str| -> anyhow::Result<Array2<f64>> {
            let path = self.dir.join(format!("x_{split}_{m}.encx"));
            Ok(read_matrix(&path)?.to_f64())
        };
        match modality {
            "both" => {
                let sem = read(MODALITY_SEMANTIC)?;
                let aud = read(MODALITY_AUDIO)?;
                let (x, at) = concat_modalities(&sem, &aud)?;
                Ok((x, Some(at)))
            }
            m => Ok((read(m)?, None)),
        }
    }

    pub fn train_design(&self, modality: &str) -> anyhow::Result<(Array2<f64>, Option<usize>)> {
        self.design("train", modality)
    }

    pub fn test_design(&self, modality: &str) -> anyhow::Result<(Array2<f64>, Option<usize>)> {
        self.design("test", modality)
    }

    pub fn y_train(&self) -> anyhow::Result<Array2<f64>> {
        Ok(read_matrix(self.dir.join("y_train.encx"))?.to_f64())
    }

    pub fn y_test_mean(&self) -> anyhow::Result<Array2<f64>> {
        Ok(read_matrix(self.dir.join("y_test_mean.encx"))?.to_f64())
    }

    pub fn test_stack(&self) -> anyhow::Result<RepeatStack> {
        let mut reps = Vec::new();
        for k in 0.. {
            let path = self.dir.join(format!("y_test_rep{k:02}.encx"));
            if !path.exists() {
                break;
            }
            reps.push(read_matrix(&path)?.to_f64());
        }
        Ok(RepeatStack::new(reps)?)
    }

    pub fn pca(&self) -> anyhow::Result<PcaModel> {
        Ok(PcaModel::load(self.dir.join("pca"))?)
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainArgs {
    pub modality: String,
    pub encoder: String,
    pub output_space: String,
    pub n_pca: Option<usize>,
}

pub fn cmd_train(
    cfg: &CliConfig,
    prep_dir: &Path,
    args: &TrainArgs,
    out: &Path,
) -> anyhow::Result<()> {
    if !matches!(args.modality.as_str(), "semantic" | "audio" | "both") {
        bail!("config error: modality must be semantic, audio, or both");
    }
    if args.encoder == "dimlp" && args.modality != "both" {
        bail!("config error: dimlp requires both modalities");
    }
    let output_space = match args.output_space.as_str() {
        "pca" => OutputSpace::Pca,
        "voxels" => OutputSpace::Voxels,
        other => bail!("config error: unknown output space '{other}'"),
    };

    let prep = Prepared::load(prep_dir)?;
    let (x, split) = prep.train_design(&args.modality)?;
    let y_vox = prep.y_train()?;

    let (y, n_pca) = match output_space {
        OutputSpace::Voxels => (y_vox, None),
        OutputSpace::Pca => {
            let pca = prep.pca()?;
            let n_pca = match args.n_pca {
                Some(n) => {
                    if n > pca.k_max {
                        bail!(
                            "config error: n_pca {n} exceeds the fitted k_max {}",
                            pca.k_max
                        );
                    }
                    n
                }
                None => 512.min(pca.k_max),
            };
            (pca.project(&y_vox, n_pca)?, Some(n_pca))
        }
    };

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let mut ridge_cfg = cfg.ridge.clone();
    ridge_cfg.seed = cfg.seed;

    let model = match args.encoder.as_str() {
        "linear" => TrainedModel::Ridge(fit_ridge_bootstrap(&x, &y, &ridge_cfg)?),
        name => {
            let arch = Architecture::parse(name)?;
            let mut ens = train_network(arch, &x, &y, &train_cfg, split)?;
            ens.output_space = output_space;
            TrainedModel::Network(ens)
        }
    };

    let meta = ModelMeta {
        kind: model.kind().into(),
        arch: match args.encoder.as_str() {
            "linear" => None,
            name => Some(Architecture::parse(name)?),
        },
        modality: args.modality.clone(),
        modality_split: split.filter(|_| args.encoder == "dimlp"),
        output_space,
        n_pca,
        feature_dim: x.ncols(),
        target_dim: y.ncols(),
        seed: cfg.seed,
        train_config: if args.encoder == "linear" {
            None
        } else {
            Some(train_cfg)
        },
        ridge_config: if args.encoder == "linear" {
            Some(ridge_cfg)
        } else {
            None
        },
    };
    save_model(out, &model, &meta)?;
    write_effective_config(out, cfg)?;
    println!(
        "train: {} {} -> {} ({})",
        args.modality,
        args.encoder,
        out.display(),
        match n_pca {
            Some(n) => format!("pca {n}"),
            None => "voxels".into(),
        }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Voxel-space test predictions for a stored model (inverse-projecting
/// PCA-space outputs).
pub fn voxel_predictions(
    prep: &Prepared,
    model: &TrainedModel,
    meta: &ModelMeta,
) -> anyhow::Result<Array2<f64>> {
    let (x, _) = prep.test_design(&meta.modality)?;
    let raw = model.predict(&x)?;
    match meta.output_space {
        OutputSpace::Voxels => Ok(raw),
        OutputSpace::Pca => Ok(prep.pca()?.inverse_project(&raw)?),
    }
}

pub fn cmd_eval(cfg: &CliConfig, prep_dir: &Path, model_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let prep = Prepared::load(prep_dir)?;
    let (model, meta) = load_model(model_dir)?;
    let pred = voxel_predictions(&prep, &model, &meta)?;
    let truth = prep.y_test_mean()?;
    if truth.ncols() != prep.meta.voxel_count {
        anyhow::bail!(
            "prepared directory is inconsistent: {} voxels vs recorded {}",
            truth.ncols(),
            prep.meta.voxel_count
        );
    }
    let stack = prep.test_stack()?;

    let report = build_report(cfg, &pred, &truth, &stack)?;
    ensure_dir(out)?;
    std::fs::write(out.join("report.csv"), report.to_csv(Some(&prep.atlas)))?;
    let summary = summarize(&report, &prep.atlas)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "kind": "eval",
            "modality": meta.modality,
            "encoder": meta.arch.map(|a| a.as_str().to_string()).unwrap_or_else(|| "linear".into()),
            "output_space": meta.output_space,
            "n_pca": meta.n_pca,
            "n_voxels": report.n_voxels(),
            "mean_r": report.mean_r(),
            "mean_r2": report.mean_r2(),
            "mean_cc_norm": report.mean_cc_norm(),
            "per_roi": summary.per_roi,
            "overall": summary.overall,
            "config_hash": cfg.hash(),
        }),
    )?;
    write_effective_config(out, cfg)?;
    println!(
        "eval: mean r {:.4}, mean r2 {:.4}, mean cc_norm {:.4}",
        report.mean_r(),
        report.mean_r2(),
        report.mean_cc_norm()
    );
    Ok(())
}

pub fn build_report(
    cfg: &CliConfig,
    pred: &Array2<f64>,
    truth: &Array2<f64>,
    stack: &RepeatStack,
) -> anyhow::Result<EvalReport> {
    let pearson = pearson_per_voxel(pred, truth)?;
    let ceiling = noise_ceiling(stack, cfg.eval.ccmax_floor)?;
    let ccn = cc_norm(&pearson.r, &ceiling.cc_max, cfg.eval.ccmax_floor)?;
    let sig = significance_fdr(
        pred,
        truth,
        cfg.eval.n_perm,
        cfg.eval.block_len,
        cfg.eval.q_thresh,
        cfg.seed,
    )?;
    Ok(EvalReport {
        r2: signed_r2(&pearson.r),
        r: pearson.r,
        cc_max: ceiling.cc_max,
        cc_norm: ccn,
        p: sig.p,
        q: sig.q,
        mask: sig.mask,
        constant_voxels: pearson.constant,
        floored_voxels: ceiling.floored,
    })
}

// ---------------------------------------------------------------------------
// red
// ---------------------------------------------------------------------------

pub fn cmd_red(
    cfg: &CliConfig,
    prep_dir: &Path,
    pairs: &[(String, PathBuf, PathBuf)],
    out: &Path,
) -> anyhow::Result<()> {
    if pairs.is_empty() {
        bail!("config error: red needs at least one --pair label=model1:model2");
    }
    let prep = Prepared::load(prep_dir)?;
    let truth = prep.y_test_mean()?;
    ensure_dir(out)?;

    // Connectivity baseline from the raw test signal.
    let fc = functional_connectivity(&truth, &prep.atlas)?;
    std::fs::write(out.join("fc_corr.csv"), analysis::corr_to_csv(&fc))?;
    let fc_dend = hierarchical_cluster(&fc)?;
    write_json(&out.join("fc_dendrogram.json"), &fc_dend.to_json_tree())?;
    std::fs::write(out.join("fc_dendrogram.txt"), fc_dend.render_text())?;
    let (_, fc_q) = best_cut_modularity(&fc.values, &fc_dend)?;

    let mut pair_summaries = Vec::new();
    for (label, dir1, dir2) in pairs {
        let (m1, meta1) = load_model(dir1)?;
        let (m2, meta2) = load_model(dir2)?;
        let pred1 = voxel_predictions(&prep, &m1, &meta1)?;
        let pred2 = voxel_predictions(&prep, &m2, &meta2)?;
        let field = red_field(
            &pred1,
            &pred2,
            &truth,
            (meta1.modality.clone(), meta2.modality.clone()),
        )?;
        let series = roi_red_series(&field, &prep.atlas)?;
        let corr = roi_correlation(&series)?;
        std::fs::write(
            out.join(format!("red_{label}_corr.csv")),
            analysis::corr_to_csv(&corr),
        )?;
        let dend = hierarchical_cluster(&corr)?;
        write_json(
            &out.join(format!("red_{label}_dendrogram.json")),
            &dend.to_json_tree(),
        )?;
        std::fs::write(
            out.join(format!("red_{label}_dendrogram.txt")),
            dend.render_text(),
        )?;
        let (labels, q) = best_cut_modularity(&corr.values, &dend)?;
        let two_cut = dend.cut(2.min(dend.n_leaves()))?;
        // Field statistics: mean RED per ROI over time.
        let mean_red: Vec<f64> = (0..series.data.nrows())
            .map(|i| series.data.row(i).mean().unwrap_or(0.0))
            .collect();
        pair_summaries.push(json!({
            "label": label,
            "model1": meta1.modality,
            "model2": meta2.modality,
            "q_best_cut": q,
            "best_cut_labels": corr.names.iter().zip(&labels)
                .map(|(n, l)| json!({"roi": n, "cluster": l})).collect::<Vec<_>>(),
            "two_cut_labels": corr.names.iter().zip(&two_cut)
                .map(|(n, l)| json!({"roi": n, "cluster": l})).collect::<Vec<_>>(),
            "mean_red_per_roi": corr.names.iter().zip(&mean_red)
                .map(|(n, m)| json!({"roi": n, "mean_red": m})).collect::<Vec<_>>(),
            "empty_rois": series.empty_rois,
        }));
    }

    write_json(
        &out.join("red_summary.json"),
        &json!({
            "kind": "red",
            "fc_q_best_cut": fc_q,
            "pairs": pair_summaries,
            "config_hash": cfg.hash(),
        }),
    )?;
    write_effective_config(out, cfg)?;
    println!("red: fc q = {fc_q:.4} plus {} pair(s)", pairs.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// vp
// ---------------------------------------------------------------------------

pub fn cmd_vp(
    cfg: &CliConfig,
    prep_dir: &Path,
    sem_dir: &Path,
    aud_dir: &Path,
    joint_dir: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let basis = match cfg.vp.basis.as_str() {
        "r2" => PartitionBasis::R2,
        "cc_norm" => PartitionBasis::CcNorm,
        other => bail!("config error: unknown vp basis '{other}'"),
    };
    let prep = Prepared::load(prep_dir)?;
    let truth = prep.y_test_mean()?;
    let stack = prep.test_stack()?;

    let value_of = |dir: &Path| -> anyhow::Result<(Array1<f64>, Array2<f64>)> {
        let (model, meta) = load_model(dir)?;
        let pred = voxel_predictions(&prep, &model, &meta)?;
        let r = pearson_per_voxel(&pred, &truth)?.r;
        let value = match basis {
            PartitionBasis::R2 => signed_r2(&r).mapv(|x| x.max(0.0)),
            PartitionBasis::CcNorm => {
                let ceiling = noise_ceiling(&stack, cfg.eval.ccmax_floor)?;
                cc_norm(&r, &ceiling.cc_max, cfg.eval.ccmax_floor)?.mapv(|x| x.max(0.0))
            }
        };
        Ok((value, pred))
    };

    let (v_sem, _) = value_of(sem_dir)?;
    let (v_aud, _) = value_of(aud_dir)?;
    let (v_joint, pred_joint) = value_of(joint_dir)?;

    let part = variance_partition(&v_sem, &v_aud, &v_joint, basis)?;
    let sig = significance_fdr(
        &pred_joint,
        &truth,
        cfg.eval.n_perm,
        cfg.eval.block_len,
        cfg.eval.q_thresh,
        cfg.seed,
    )?;
    let venn = roi_venn(&part, &sig.mask, &prep.atlas)?;

    ensure_dir(out)?;
    let mut csv = String::from(
        "voxel,roi,value_sem,value_aud,value_joint,unique_sem,unique_aud,shared,clamp,dominant,significant\n",
    );
    for j in 0..part.dominant.len() {
        csv.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{}\n",
            j,
            prep.atlas.labels[j],
            v_sem[j],
            v_aud[j],
            v_joint[j],
            part.unique_sem[j],
            part.unique_aud[j],
            part.shared[j],
            part.clamp_adjustment[j],
            match part.dominant[j] {
                analysis::Dominant::Semantic => "semantic",
                analysis::Dominant::Audio => "audio",
                analysis::Dominant::Joint => "joint",
            },
            sig.mask[j] as u8,
        ));
    }
    std::fs::write(out.join("vp.csv"), csv)?;

    let mut venn_csv = String::from(
        "roi,n_significant,n_semantic,n_audio,n_joint,pct_semantic,pct_audio,pct_joint\n",
    );
    let fmt_pct = |p: Option<f64>| p.map_or("".into(), |x| format!("{x:.3}"));
    for row in venn.rows.iter().chain(std::iter::once(&venn.overall)) {
        venn_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.roi,
            row.n_significant,
            row.n_semantic,
            row.n_audio,
            row.n_joint,
            fmt_pct(row.pct_semantic),
            fmt_pct(row.pct_audio),
            fmt_pct(row.pct_joint),
        ));
    }
    std::fs::write(out.join("venn.csv"), venn_csv)?;

    write_json(
        &out.join("vp_summary.json"),
        &json!({
            "kind": "vp",
            "basis": cfg.vp.basis,
            "overall": venn.overall,
            "per_roi": venn.rows,
            "config_hash": cfg.hash(),
        }),
    )?;
    write_effective_config(out, cfg)?;
    println!(
        "vp: {} significant voxels, dominant joint {}",
        venn.overall.n_significant, venn.overall.n_joint
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(cfg: &CliConfig, run_dir: &Path, out: &Path) -> anyhow::Result<()> {
    // Collect every eval summary under the run directory, sorted by path for
    // a stable discovery order.
    let mut summaries = Vec::new();
    let mut stack = vec![run_dir.to_path_buf()];
    let mut paths = Vec::new();
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                paths.push(path);
            }
        }
    }
    paths.sort();
    for path in paths {
        let text = std::fs::read_to_string(&path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.get("kind").and_then(|k| k.as_str()) == Some("eval") {
            summaries.push((path, value));
        }
    }
    if summaries.is_empty() {
        bail!("no eval summaries found under {}", run_dir.display());
    }

    // Table rows sorted by mean normalized correlation, descending.
    let mut rows: Vec<serde_json::Value> = summaries
        .iter()
        .map(|(path, v)| {
            json!({
                "source": path.parent().and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                "modality": v["modality"],
                "encoder": v["encoder"],
                "output_space": v["output_space"],
                "mean_r": v["mean_r"],
                "mean_r2": v["mean_r2"],
                "mean_cc_norm": v["mean_cc_norm"],
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        let ka = a["mean_cc_norm"].as_f64().unwrap_or(f64::MIN);
        let kb = b["mean_cc_norm"].as_f64().unwrap_or(f64::MIN);
        kb.total_cmp(&ka)
            .then_with(|| a["source"].as_str().cmp(&b["source"].as_str()))
    });

    ensure_dir(out)?;
    write_json(
        &out.join("report.json"),
        &json!({
            "kind": "report",
            "rows": rows,
            "config_hash": cfg.hash(),
        }),
    )?;

    let mut table = String::from("source,modality,encoder,output_space,mean_r2,mean_cc_norm\n");
    for row in &rows {
        table.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            row["source"].as_str().unwrap_or(""),
            row["modality"].as_str().unwrap_or(""),
            row["encoder"].as_str().unwrap_or(""),
            row["output_space"].as_str().unwrap_or(""),
            row["mean_r2"].as_f64().unwrap_or(f64::NAN),
            row["mean_cc_norm"].as_f64().unwrap_or(f64::NAN),
        ));
    }
    std::fs::write(out.join("table.csv"), &table)?;
    write_effective_config(out, cfg)?;
    println!("report: {} rows", rows.len());
    Ok(())
}

pub fn parse_pair(raw: &str) -> anyhow::Result<(String, PathBuf, PathBuf)> {
    let (label, rest) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("config error: --pair expects label=model1:model2, got '{raw}'"))?;
    let (m1, m2) = rest
        .split_once(':')
        .ok_or_else(|| anyhow!("config error: --pair expects label=model1:model2, got '{raw}'"))?;
    Ok((label.to_string(), PathBuf::from(m1), PathBuf::from(m2)))
}
