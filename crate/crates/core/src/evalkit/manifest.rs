//! Evaluation manifests: a JSON array of pair entries, each either a scene
//! file (grids and keypoints regenerated from it) or explicit grid and
//! keypoint files with inline calibration and ground truth.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalError, PairInputs};
use crate::descfield::{load_grid, oracle_grid, scene_keypoints, KeypointSet};
use crate::geom::{CameraIntrinsics, Pose, PoseRecord, ScenePair};
use crate::io::FileError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub scene: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub grid_a: PathBuf,
    pub grid_b: PathBuf,
    pub keypoints_a: PathBuf,
    pub keypoints_b: PathBuf,
    pub intrinsics_a: CameraIntrinsics,
    pub intrinsics_b: CameraIntrinsics,
    pub pose_gt: PoseRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ManifestEntry {
    Scene(SceneEntry),
    Files(FileEntry),
}

impl ManifestEntry {
    fn from_value(value: serde_json::Value) -> Result<Self, String> {
        let is_scene = value.get("scene").is_some();
        let parsed = if is_scene {
            serde_json::from_value(value).map(Self::Scene)
        } else {
            serde_json::from_value(value).map(Self::Files)
        };
        parsed.map_err(|e| e.to_string())
    }

    fn paths(&self) -> Vec<&Path> {
        match self {
            Self::Scene(s) => vec![&s.scene],
            Self::Files(f) => vec![&f.grid_a, &f.grid_b, &f.keypoints_a, &f.keypoints_b],
        }
    }
}

/// Pair entries plus the directory relative paths are resolved against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, EvalError> {
        let values: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| {
            EvalError::Manifest {
                index: 0,
                message: format!("not a JSON array of entries: {e}"),
            }
        })?;
        let entries = values
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                ManifestEntry::from_value(v).map_err(|message| EvalError::Manifest { index, message })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::new(entries, base_dir))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("manifest serialization");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(FileError::io(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(FileError::io(path))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Checks that every referenced file exists and the inline geometry is
    /// valid; the error names the first bad entry.
    pub fn validate(&self) -> Result<(), EvalError> {
        for (index, entry) in self.entries.iter().enumerate() {
            let bad = |message: String| EvalError::Manifest { index, message };
            for p in entry.paths() {
                if !self.resolve(p).is_file() {
                    return Err(bad(format!("missing file {}", p.display())));
                }
            }
            if let ManifestEntry::Files(f) = entry {
                f.intrinsics_a.validate().map_err(|e| bad(e.to_string()))?;
                f.intrinsics_b.validate().map_err(|e| bad(e.to_string()))?;
                Pose::try_from(f.pose_gt).map_err(|e| bad(e.to_string()))?;
            }
            if let ManifestEntry::Scene(s) = entry {
                if s.noise_sigma.is_some_and(|n| !(n.is_finite() && n >= 0.0)) {
                    return Err(bad("noise_sigma must be finite and non-negative".into()));
                }
            }
        }
        Ok(())
    }

    /// Descriptor dimension fixed by entry `index`: the grid's for file
    /// entries, the optional `dim` for scene entries.
    pub fn entry_dim(&self, index: usize) -> Result<Option<usize>, EvalError> {
        match &self.entries[index] {
            ManifestEntry::Scene(s) => Ok(s.dim),
            ManifestEntry::Files(f) => Ok(Some(load_grid(self.resolve(&f.grid_a))?.dim())),
        }
    }

    /// Loads (or, for scene entries, synthesizes) the inputs of entry
    /// `index`. `default_dim` applies to scene entries without a `dim`.
    pub fn load_pair(&self, index: usize, default_dim: usize) -> Result<PairInputs, EvalError> {
        let wrap = |e: EvalError| match e {
            e @ EvalError::Manifest { .. } => e,
            other => EvalError::Manifest {
                index,
                message: other.to_string(),
            },
        };
        self.load_pair_inner(index, default_dim).map_err(wrap)
    }

    fn load_pair_inner(&self, index: usize, default_dim: usize) -> Result<PairInputs, EvalError> {
        match &self.entries[index] {
            ManifestEntry::Scene(s) => {
                let scene = ScenePair::load(self.resolve(&s.scene))?;
                let seed = s.grid_seed.unwrap_or(0);
                let dim = s.dim.unwrap_or(default_dim);
                let (grid_a, grid_b) =
                    oracle_grid(&scene, dim, s.noise_sigma.unwrap_or(0.0), seed)
                        .map_err(|e| FileError::Invalid(e.to_string()))?;
                let kps = scene_keypoints(&scene, 0.0, seed);
                Ok(PairInputs {
                    grid_a,
                    grid_b,
                    keypoints_a: kps.a,
                    keypoints_b: kps.b,
                    intrinsics_a: scene.intrinsics_a,
                    intrinsics_b: scene.intrinsics_b,
                    pose_gt: scene.pose,
                })
            }
            ManifestEntry::Files(f) => Ok(PairInputs {
                grid_a: load_grid(self.resolve(&f.grid_a))?,
                grid_b: load_grid(self.resolve(&f.grid_b))?,
                keypoints_a: KeypointSet::load(self.resolve(&f.keypoints_a))?,
                keypoints_b: KeypointSet::load(self.resolve(&f.keypoints_b))?,
                intrinsics_a: f.intrinsics_a,
                intrinsics_b: f.intrinsics_b,
                pose_gt: Pose::try_from(f.pose_gt).map_err(FileError::Geom)?,
            }),
        }
    }
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new(Vec::new(), PathBuf::new())
    }
}
