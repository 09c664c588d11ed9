//! The matcher head: keypoint encoding, attentional aggregation, dustbin
//! Sinkhorn and match decoding.

mod network;
mod sinkhorn;
mod weights;

pub use network::{encode_keypoints, gnn_forward, normalize_coords, score_matrix};
pub use sinkhorn::{sinkhorn, AssignmentMatrix};
pub use weights::{
    random_weights, AttentionBlock, LayerPair, Linear, MatcherWeights, WeightsError,
    ENCODER_HIDDEN_LAYERS, PASSTHROUGH_BIN_SCORE, PASSTHROUGH_MATCH_SCORE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descfield::{sample_descriptors, DescError, DescriptorGrid, KeypointSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error("legacy confidence mode requires keypoint confidence")]
    MissingConfidence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("score matrix contains non-finite values")]
    NonFiniteScore,
    #[error("invalid matcher config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Descriptor(#[from] DescError),
}

/// Whether the keypoint encoder sees detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    /// Coordinates only.
    #[default]
    Oblivious,
    /// Coordinates plus confidence as a third encoder input.
    Legacy,
}

impl std::str::FromStr for ConfidenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oblivious" => Ok(Self::Oblivious),
            "legacy" => Ok(Self::Legacy),
            other => Err(format!("unknown confidence mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherConfig {
    pub dim: usize,
    /// Number of self+cross attention layer pairs.
    pub num_layers: usize,
    pub num_heads: usize,
    pub sinkhorn_iters: usize,
    pub match_threshold: f64,
    pub confidence_mode: ConfidenceMode,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            dim: crate::descfield::DEFAULT_DIM,
            num_layers: 9,
            num_heads: 4,
            sinkhorn_iters: 100,
            match_threshold: 0.2,
            confidence_mode: ConfidenceMode::Oblivious,
        }
    }
}

impl MatcherConfig {
    /// Configuration matching [`MatcherWeights::passthrough`].
    pub fn passthrough(dim: usize) -> Self {
        Self {
            dim,
            num_layers: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AssignError> {
        let bad = |m: &str| Err(AssignError::InvalidConfig(m.into()));
        if self.dim == 0 || self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return bad("dim must be a positive multiple of num_heads");
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn_iters must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return bad("match_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

/// One-to-one matches ordered by index in A.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchList(pub Vec<Match>);

impl MatchList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.0.iter().map(|m| (m.a, m.b)).collect()
    }

    /// `{"matches": [[i, j, score], ...]}`
    pub fn to_json(&self) -> String {
        let rows: Vec<(usize, usize, f64)> = self.0.iter().map(|m| (m.a, m.b, m.score)).collect();
        let mut s = serde_json::to_string_pretty(&serde_json::json!({ "matches": rows }))
            .expect("match serialization");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct File {
            matches: Vec<(usize, usize, f64)>,
        }
        let f: File = serde_json::from_str(text)?;
        Ok(Self(
            f.matches
                .into_iter()
                .map(|(a, b, score)| Match { a, b, score })
                .collect(),
        ))
    }
}

/// Index of the first maximum.
fn first_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mutual nearest neighbours over the non-dustbin block with
/// `P_ij >= threshold`. Ties go to the lowest index.
pub fn extract_matches(p: &AssignmentMatrix, threshold: f64) -> MatchList {
    let (m, n) = (p.m(), p.n());
    if m == 0 || n == 0 {
        return MatchList::default();
    }
    let block = p.0.view((0, 0), (m, n));
    let col_best: Vec<usize> = (0..n)
        .map(|j| first_argmax(block.column(j).iter().copied()).unwrap())
        .collect();
    let matches = (0..m)
        .filter_map(|i| {
            let j = first_argmax(block.row(i).iter().copied()).unwrap();
            let score = block[(i, j)];
            (col_best[j] == i && score >= threshold).then_some(Match { a: i, b: j, score })
        })
        .collect();
    MatchList(matches)
}

/// Full matcher: sample descriptors at the keypoints, encode, aggregate,
/// score, normalize and decode.
pub fn match_pair(
    kps_a: &KeypointSet,
    kps_b: &KeypointSet,
    grid_a: &DescriptorGrid,
    grid_b: &DescriptorGrid,
    weights: &MatcherWeights,
    config: &MatcherConfig,
) -> Result<(AssignmentMatrix, MatchList), AssignError> {
    config.validate()?;
    weights
        .check(config)
        .map_err(|e| AssignError::ShapeMismatch(e.to_string()))?;
    if grid_a.dim() != config.dim || grid_b.dim() != config.dim {
        return Err(AssignError::ShapeMismatch(format!(
            "grid dims {} and {} but matcher dim {}",
            grid_a.dim(),
            grid_b.dim(),
            config.dim
        )));
    }
    let desc_a = sample_descriptors(grid_a, kps_a)?;
    let desc_b = sample_descriptors(grid_b, kps_b)?;
    let feat_a = encode_keypoints(kps_a, &desc_a, weights, config)?;
    let feat_b = encode_keypoints(kps_b, &desc_b, weights, config)?;
    if kps_a.is_empty() || kps_b.is_empty() {
        let empty = nalgebra::DMatrix::zeros(kps_a.len(), kps_b.len());
        let p = sinkhorn(&empty, weights.bin_score as f64, config.sinkhorn_iters)?;
        return Ok((p, MatchList::default()));
    }
    let (ctx_a, ctx_b) = gnn_forward(&feat_a, &feat_b, weights, config)?;
    let scores = score_matrix(&ctx_a, &ctx_b, weights);
    let p = sinkhorn(&scores, weights.bin_score as f64, config.sinkhorn_iters)?;
    let matches = extract_matches(&p, config.match_threshold);
    log::debug!(
        "matched {} of {}x{} keypoints",
        matches.len(),
        kps_a.len(),
        kps_b.len()
    );
    Ok((p, matches))
}
