//! Evaluation protocol: epipolar correctness, matching precision and score,
//! pose-error AUC, and manifest-driven batch runs.

mod manifest;
mod report;

pub use manifest::{FileEntry, Manifest, ManifestEntry, SceneEntry};
pub use report::{
    aggregate, run_confidence_ablation, run_manifest, Auc, ConfidenceSetting, EvalRecord, Report,
};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{match_pair, AssignError, Match, MatcherConfig, MatcherWeights};
use crate::descfield::{DescriptorGrid, GridFormatError, KeypointSet};
use crate::geom::{
    essential_from_pose, pose_error, sym_epipolar_distance, CameraIntrinsics, EssentialMatrix,
    GeomError, Pose, PoseRecord,
};
use crate::io::FileError;
use crate::posest::{ransac_essential, RansacConfig};

/// A match is epipolar-correct when its squared symmetric epipolar distance
/// under the ground-truth essential matrix is strictly below this.
pub const EPIPOLAR_THRESHOLD: f64 = 5e-4;

/// Pose-error thresholds, in degrees, at which the AUC is reported.
pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pose AUC needs at least one pose error")]
    EmptyInput,
    #[error("AUC thresholds must be positive and ascending")]
    BadThresholds,
    #[error("pose error {0} is negative")]
    NegativeError(f64),
    #[error("manifest entry {index}: {message}")]
    Manifest { index: usize, message: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Grid(#[from] GridFormatError),
}

fn is_correct(e: &EssentialMatrix, pa: &Vector2<f64>, pb: &Vector2<f64>) -> bool {
    sym_epipolar_distance(pa, pb, e).is_ok_and(|d| d < EPIPOLAR_THRESHOLD)
}

/// Whether a single match is consistent with the ground-truth epipolar
/// geometry. A degenerate epipolar line counts as incorrect.
pub fn epipolar_correct(
    m: &Match,
    kps_a: &KeypointSet,
    kps_b: &KeypointSet,
    gt: &Pose,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Result<bool, GeomError> {
    Ok(correctness_flags(std::slice::from_ref(m), kps_a, kps_b, gt, k_a, k_b)?[0])
}

/// [`epipolar_correct`] for every match, computing `E` once.
pub fn correctness_flags(
    matches: &[Match],
    kps_a: &KeypointSet,
    kps_b: &KeypointSet,
    gt: &Pose,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Result<Vec<bool>, GeomError> {
    let e = essential_from_pose(gt)?;
    Ok(matches
        .iter()
        .map(|m| {
            is_correct(
                &e,
                &k_a.normalize(&kps_a.coords[m.a]),
                &k_b.normalize(&kps_b.coords[m.b]),
            )
        })
        .collect())
}

/// Matching precision (correct / matches) and matching score (correct /
/// mean keypoint count). Both are 0 when their denominator is.
pub fn precision_and_score(flags: &[bool], num_kps_a: usize, num_kps_b: usize) -> (f64, f64) {
    let correct = flags.iter().filter(|&&f| f).count() as f64;
    let precision = if flags.is_empty() {
        0.0
    } else {
        correct / flags.len() as f64
    };
    let mean_kps = (num_kps_a + num_kps_b) as f64 / 2.0;
    let score = if mean_kps == 0.0 { 0.0 } else { correct / mean_kps };
    (precision, score)
}

/// Area under the cumulative pose-error curve up to each threshold, as a
/// percentage. `None` marks a failed estimate and never counts as recalled.
pub fn pose_auc(errors: &[Option<f64>], thresholds: &[f64]) -> Result<Vec<f64>, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0))
        || thresholds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(EvalError::BadThresholds);
    }
    let mut finite = Vec::with_capacity(errors.len());
    for e in errors.iter().flatten() {
        if *e < 0.0 {
            return Err(EvalError::NegativeError(*e));
        }
        if e.is_finite() {
            finite.push(*e);
        }
    }
    finite.sort_by(f64::total_cmp);
    let n = errors.len() as f64;

    Ok(thresholds
        .iter()
        .map(|&t| {
            // recall is k/n on [e_k, e_{k+1}); sum the rectangles up to t
            let mut area = 0.0;
            for (k, &e) in finite.iter().enumerate() {
                if e >= t {
                    break;
                }
                let next = finite.get(k + 1).map_or(t, |&x| x.min(t));
                area += (k + 1) as f64 / n * (next - e);
            }
            100.0 * area / t
        })
        .collect())
}

/// Trained or passthrough weights together with the configuration they run
/// under.
#[derive(Debug, Clone, PartialEq)]
pub struct Matcher {
    pub weights: MatcherWeights,
    pub config: MatcherConfig,
}

impl Matcher {
    pub fn passthrough(config: MatcherConfig) -> Self {
        Self {
            weights: MatcherWeights::passthrough(config.dim, config.confidence_mode),
            config: MatcherConfig {
                num_layers: 0,
                ..config
            },
        }
    }
}

/// Everything needed to evaluate one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInputs {
    pub grid_a: DescriptorGrid,
    pub grid_b: DescriptorGrid,
    pub keypoints_a: KeypointSet,
    pub keypoints_b: KeypointSet,
    pub intrinsics_a: CameraIntrinsics,
    pub intrinsics_b: CameraIntrinsics,
    pub pose_gt: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    /// `null` when pose estimation failed.
    pub pose_error_deg: Option<f64>,
    pub num_matches: usize,
    pub num_correct_matches: usize,
    pub num_keypoints_a: usize,
    pub num_keypoints_b: usize,
    pub num_inliers: usize,
    pub precision: f64,
    pub matching_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_estimate: Option<PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl PairResult {
    pub fn failed(&self) -> bool {
        self.pose_error_deg.is_none()
    }
}

/// Match, estimate the relative pose and score the pair. Pose estimation
/// failures are recorded in the result.
pub fn run_pair(
    inputs: &PairInputs,
    matcher: &Matcher,
    ransac: &RansacConfig,
) -> Result<PairResult, EvalError> {
    let (_, matches) = match_pair(
        &inputs.keypoints_a,
        &inputs.keypoints_b,
        &inputs.grid_a,
        &inputs.grid_b,
        &matcher.weights,
        &matcher.config,
    )?;
    let flags = correctness_flags(
        &matches.0,
        &inputs.keypoints_a,
        &inputs.keypoints_b,
        &inputs.pose_gt,
        &inputs.intrinsics_a,
        &inputs.intrinsics_b,
    )?;
    let (num_a, num_b) = (inputs.keypoints_a.len(), inputs.keypoints_b.len());
    let (precision, matching_score) = precision_and_score(&flags, num_a, num_b);

    let mut result = PairResult {
        pose_error_deg: None,
        num_matches: matches.len(),
        num_correct_matches: flags.iter().filter(|&&f| f).count(),
        num_keypoints_a: num_a,
        num_keypoints_b: num_b,
        num_inliers: 0,
        precision,
        matching_score,
        pose_estimate: None,
        failure: None,
    };
    let estimate = ransac_essential(
        &matches,
        &inputs.keypoints_a,
        &inputs.keypoints_b,
        &inputs.intrinsics_a,
        &inputs.intrinsics_b,
        ransac,
    );
    match estimate {
        Ok(est) => {
            result.num_inliers = est.num_inliers;
            result.pose_estimate = Some(PoseRecord::from(&est.pose));
            match pose_error(&est.pose, &inputs.pose_gt) {
                Ok(err) => result.pose_error_deg = Some(err),
                Err(e) => result.failure = Some(e.to_string()),
            }
        }
        Err(e) => result.failure = Some(e.to_string()),
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descfield::{oracle_grid, scene_keypoints};
    use crate::geom::{synth_scene, SceneConfig};

    fn oracle_auc(errors: &[Option<f64>], t: f64) -> f64 {
        let sum: f64 = errors
            .iter()
            .map(|e| e.map_or(0.0, |e| (t - e).max(0.0)))
            .sum();
        100.0 * sum / (errors.len() as f64 * t)
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(pose_auc(&[Some(0.0); 4], &AUC_THRESHOLDS).unwrap(), vec![100.0; 3]);
        assert_eq!(pose_auc(&[None; 3], &AUC_THRESHOLDS).unwrap(), vec![0.0; 3]);
        let auc = pose_auc(&[Some(0.0), Some(10.0)], &[10.0]).unwrap();
        assert_eq!(auc, vec![50.0]);
        // [0, 2, 4] at T = 5: (5 + 3 + 1) / 15
        let auc = pose_auc(&[Some(0.0), Some(4.0), Some(2.0)], &[5.0]).unwrap();
        assert!((auc[0] - 60.0).abs() < 1e-12);
        assert_eq!(
            pose_auc(&[Some(1.0), Some(f64::INFINITY)], &[5.0]).unwrap(),
            pose_auc(&[Some(1.0), None], &[5.0]).unwrap()
        );
    }

    #[test]
    fn auc_errors() {
        assert!(matches!(pose_auc(&[], &AUC_THRESHOLDS), Err(EvalError::EmptyInput)));
        assert!(matches!(
            pose_auc(&[Some(1.0)], &[10.0, 5.0]),
            Err(EvalError::BadThresholds)
        ));
        assert!(matches!(
            pose_auc(&[Some(-1.0)], &[5.0]),
            Err(EvalError::NegativeError(_))
        ));
    }

    #[test]
    fn auc_against_closed_form() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let errs: Vec<Option<f64>> = (0..n)
                .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0.0..30.0)))
                .collect();
            let auc = pose_auc(&errs, &AUC_THRESHOLDS).unwrap();
            for (a, t) in auc.iter().zip(AUC_THRESHOLDS) {
                assert!((a - oracle_auc(&errs, t)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn precision_and_score_cases() {
        let (p, _) = precision_and_score(&[true, true, false], 10, 10);
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_and_score(&[], 10, 10), (0.0, 0.0));
        assert_eq!(precision_and_score(&[], 0, 0), (0.0, 0.0));
        let (p, m) = precision_and_score(&[true; 100], 1024, 1024);
        assert_eq!((p, m), (1.0, 100.0 / 1024.0));
    }

    fn scene_pair(seed: u64, noise: f64) -> PairInputs {
        let scene = synth_scene(
            &SceneConfig {
                num_points: 60,
                image_size: (160, 120),
                focal: 150.0,
                ..SceneConfig::default()
            },
            seed,
        )
        .unwrap();
        let (grid_a, grid_b) = oracle_grid(&scene, 32, noise, seed).unwrap();
        let kps = scene_keypoints(&scene, 0.0, seed);
        PairInputs {
            grid_a,
            grid_b,
            keypoints_a: kps.a,
            keypoints_b: kps.b,
            intrinsics_a: scene.intrinsics_a,
            intrinsics_b: scene.intrinsics_b,
            pose_gt: scene.pose,
        }
    }

    #[test]
    fn correctness_threshold_is_strict() {
        let p = scene_pair(0, 0.0);
        let e = essential_from_pose(&p.pose_gt).unwrap();
        // slide a B point along its epipolar normal until the distance is
        // on the threshold
        let pa = Vector2::new(0.05, -0.02);
        let line = e.0 * pa.push(1.0);
        let n = Vector2::new(line.x, line.y);
        let on_line = -line.z * n / n.norm_squared();
        let at = |s: f64| sym_epipolar_distance(&pa, &(on_line + s * n), &e).unwrap();
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = (lo + hi) / 2.0;
            if at(mid) < EPIPOLAR_THRESHOLD {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(is_correct(&e, &pa, &(on_line + lo * n)));
        assert!(at(hi) >= EPIPOLAR_THRESHOLD);
        assert!(!is_correct(&e, &pa, &(on_line + hi * n)));
    }

    #[test]
    fn oracle_pair_end_to_end() {
        let p = scene_pair(4, 0.0);
        let m = Matcher::passthrough(MatcherConfig::passthrough(32));
        let r = run_pair(&p, &m, &RansacConfig::default()).unwrap();
        assert_eq!(r.precision, 1.0);
        assert!(r.pose_error_deg.unwrap() < 0.01);
        assert_eq!(r, run_pair(&p, &m, &RansacConfig::default()).unwrap());
    }

    #[test]
    fn few_matches_record_failure() {
        let mut p = scene_pair(2, 0.0);
        let keep: Vec<usize> = (0..5).collect();
        p.keypoints_a = p.keypoints_a.select(&keep);
        let m = Matcher::passthrough(MatcherConfig::passthrough(32));
        let r = run_pair(&p, &m, &RansacConfig::default()).unwrap();
        assert!(r.failed());
        assert!(r.num_matches <= 5);
        assert!(r.failure.is_some());
        assert_eq!(r.precision, 1.0);
    }
}
