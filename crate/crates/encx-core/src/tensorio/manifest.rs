//! Dataset manifests and ROI atlases (UTF-8 JSON documents).

use crate::error::{EncxError, Result};
use crate::tensorio::read_matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Paths to one modality's feature data: a values matrix (events x dim) and a
/// times matrix (events x 1, seconds).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureRef {
    pub values: PathBuf,
    pub times: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoryEntry {
    pub story_id: String,
    /// Modality name ("semantic", "audio", ...) to feature files.
    pub feature_paths: BTreeMap<String, FeatureRef>,
    pub response_path: PathBuf,
    pub tr_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TestStoryEntry {
    pub story_id: String,
    pub feature_paths: BTreeMap<String, FeatureRef>,
    /// One response matrix per repeated presentation of the same stimulus.
    pub repeat_response_paths: Vec<PathBuf>,
    pub tr_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub stories: Vec<StoryEntry>,
    pub test_stories: Vec<TestStoryEntry>,
    pub roi_atlas_path: PathBuf,
}

impl DatasetManifest {
    /// Load a manifest, rewriting relative paths against the manifest's
    /// parent directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EncxError::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| EncxError::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.rebase(base);
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| EncxError::io(path, e))
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        for s in &mut self.stories {
            for f in s.feature_paths.values_mut() {
                fix(&mut f.values);
                fix(&mut f.times);
            }
            fix(&mut s.response_path);
        }
        for s in &mut self.test_stories {
            for f in s.feature_paths.values_mut() {
                fix(&mut f.values);
                fix(&mut f.times);
            }
            for p in &mut s.repeat_response_paths {
                fix(p);
            }
        }
        fix(&mut self.roi_atlas_path);
    }

    /// Check the manifest invariants: every referenced matrix is readable,
    /// all responses share one voxel count, and every test story has at
    /// least two repeats. Returns the common voxel count.
    pub fn validate(&self) -> Result<usize> {
        let mut voxel_count: Option<usize> = None;
        let mut check_response = |p: &Path| -> Result<()> {
            let m = read_matrix(p)?;
            match voxel_count {
                None => voxel_count = Some(m.cols()),
                Some(v) if v != m.cols() => {
                    return Err(EncxError::Manifest(format!(
                        "{} has {} voxels, expected {}",
                        p.display(),
                        m.cols(),
                        v
                    )))
                }
                _ => {}
            }
            Ok(())
        };
        for s in &self.stories {
            if s.feature_paths.is_empty() {
                return Err(EncxError::Manifest(format!(
                    "story '{}' has no feature paths",
                    s.story_id
                )));
            }
            for f in s.feature_paths.values() {
                read_matrix(&f.values)?;
                read_matrix(&f.times)?;
            }
            check_response(&s.response_path)?;
        }
        for s in &self.test_stories {
            if s.repeat_response_paths.len() < 2 {
                return Err(EncxError::Manifest(format!(
                    "test story '{}' has {} repeats; noise ceiling needs at least 2",
                    s.story_id,
                    s.repeat_response_paths.len()
                )));
            }
            for f in s.feature_paths.values() {
                read_matrix(&f.values)?;
                read_matrix(&f.times)?;
            }
            for p in &s.repeat_response_paths {
                check_response(p)?;
            }
        }
        let atlas = RoiAtlas::load(&self.roi_atlas_path)?;
        if let Some(v) = voxel_count {
            if atlas.voxel_count != v {
                return Err(EncxError::Manifest(format!(
                    "atlas covers {} voxels, responses have {}",
                    atlas.voxel_count, v
                )));
            }
        }
        voxel_count.ok_or_else(|| EncxError::Manifest("manifest lists no responses".into()))
    }
}

/// Per-voxel ROI labels; an empty string marks an unassigned voxel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoiAtlas {
    pub voxel_count: usize,
    pub labels: Vec<String>,
}

impl RoiAtlas {
    pub fn new(labels: Vec<String>) -> Self {
        RoiAtlas {
            voxel_count: labels.len(),
            labels,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EncxError::io(path, e))?;
        let atlas: RoiAtlas = serde_json::from_str(&text)
            .map_err(|e| EncxError::Manifest(format!("{}: {e}", path.display())))?;
        if atlas.labels.len() != atlas.voxel_count {
            return Err(EncxError::Manifest(format!(
                "atlas voxel_count {} does not match {} labels",
                atlas.voxel_count,
                atlas.labels.len()
            )));
        }
        Ok(atlas)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| EncxError::io(path, e))
    }

    /// Distinct non-empty labels in sorted order: the ROI vocabulary.
    pub fn roi_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .labels
            .iter()
            .filter(|l| !l.is_empty())
            .cloned()
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Voxel indices carrying `label`.
    pub fn indices_of(&self, label: &str) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.as_str() == label)
            .map(|(i, _)| i)
            .collect()
    }
}
