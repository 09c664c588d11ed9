//! Aggregated evaluation records and the batch runners.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pose_auc, run_pair, EvalError, Manifest, Matcher, PairInputs, PairResult, AUC_THRESHOLDS};
use crate::io::FileError;
use crate::posest::RansacConfig;

/// Pose AUC in percent at 5, 10 and 20 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Auc {
    #[serde(rename = "5")]
    pub at5: f64,
    #[serde(rename = "10")]
    pub at10: f64,
    #[serde(rename = "20")]
    pub at20: f64,
}

/// One row of a results table: AUC plus mean precision and matching score,
/// all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub label: String,
    pub auc: Auc,
    pub precision: f64,
    pub matching_score: f64,
    pub num_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub record: EvalRecord,
    pub pairs: Vec<PairResult>,
}

impl Report {
    pub fn num_failures(&self) -> usize {
        self.pairs.iter().filter(|p| p.failed()).count()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FileError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(FileError::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FileError> {
        crate::io::read_json(path.as_ref())
    }
}

/// Averages per-pair results in the given order.
pub fn aggregate(label: &str, pairs: &[PairResult]) -> Result<EvalRecord, EvalError> {
    let errors: Vec<Option<f64>> = pairs.iter().map(|p| p.pose_error_deg).collect();
    let auc = pose_auc(&errors, &AUC_THRESHOLDS)?;
    let n = pairs.len() as f64;
    let mean = |f: fn(&PairResult) -> f64| 100.0 * pairs.iter().map(f).sum::<f64>() / n;
    Ok(EvalRecord {
        label: label.to_string(),
        auc: Auc {
            at5: auc[0],
            at10: auc[1],
            at20: auc[2],
        },
        precision: mean(|p| p.precision),
        matching_score: mean(|p| p.matching_score),
        num_pairs: pairs.len(),
    })
}

/// Which confidence values the keypoints carry during an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfidenceSetting {
    /// Whatever the keypoint files provide.
    Native,
    /// Uniform in `[0, 1)`, seeded.
    Random,
    Zero,
    One,
}

impl ConfidenceSetting {
    pub const ALL: [Self; 4] = [Self::Native, Self::Random, Self::Zero, Self::One];

    pub fn label(self) -> &'static str {
        match self {
            Self::Native => "native",
            Self::Random => "rand",
            Self::Zero => "zero",
            Self::One => "one",
        }
    }

    fn apply(self, inputs: &mut PairInputs, seed: u64, index: usize) {
        for (side, kps) in [&mut inputs.keypoints_a, &mut inputs.keypoints_b]
            .into_iter()
            .enumerate()
        {
            let n = kps.len();
            kps.confidence = match self {
                Self::Native => continue,
                Self::Random => {
                    let stream = seed.wrapping_add(2 * index as u64 + side as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(stream);
                    Some((0..n).map(|_| rng.random::<f64>()).collect())
                }
                Self::Zero => Some(vec![0.0; n]),
                Self::One => Some(vec![1.0; n]),
            };
        }
    }
}

fn resolve_jobs(jobs: usize) -> usize {
    if jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        jobs
    }
}

fn evaluate(
    manifest: &Manifest,
    matcher: &Matcher,
    ransac: &RansacConfig,
    jobs: usize,
    setting: ConfidenceSetting,
    confidence_seed: u64,
) -> Result<Vec<PairResult>, EvalError> {
    manifest.validate()?;
    let n = manifest.len();
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    let run_one = |index: usize| -> Result<PairResult, EvalError> {
        let mut inputs = manifest.load_pair(index, matcher.config.dim)?;
        setting.apply(&mut inputs, confidence_seed, index);
        let ransac = RansacConfig {
            seed: ransac.seed.wrapping_add(index as u64),
            ..*ransac
        };
        run_pair(&inputs, matcher, &ransac).map_err(|e| EvalError::Manifest {
            index,
            message: e.to_string(),
        })
    };

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<PairResult, EvalError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..resolve_jobs(jobs).min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = run_one(i);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    // manifest order, so the first error reported is the first bad entry
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot").expect("every entry evaluated"))
        .collect()
}

/// Evaluates every manifest entry on up to `jobs` threads (0 = all cores)
/// and aggregates in manifest order, so the report does not depend on
/// `jobs`. Each pair's RANSAC seed is `ransac.seed + entry index`.
pub fn run_manifest(
    manifest: &Manifest,
    matcher: &Matcher,
    ransac: &RansacConfig,
    jobs: usize,
    label: &str,
) -> Result<Report, EvalError> {
    let pairs = evaluate(manifest, matcher, ransac, jobs, ConfidenceSetting::Native, 0)?;
    Ok(Report {
        record: aggregate(label, &pairs)?,
        pairs,
    })
}

/// One report per [`ConfidenceSetting`], labelled `native`, `rand`, `zero`
/// and `one`.
pub fn run_confidence_ablation(
    manifest: &Manifest,
    matcher: &Matcher,
    ransac: &RansacConfig,
    jobs: usize,
    confidence_seed: u64,
) -> Result<Vec<Report>, EvalError> {
    ConfidenceSetting::ALL
        .iter()
        .map(|&setting| {
            let pairs = evaluate(manifest, matcher, ransac, jobs, setting, confidence_seed)?;
            Ok(Report {
                record: aggregate(setting.label(), &pairs)?,
                pairs,
            })
        })
        .collect()
}
