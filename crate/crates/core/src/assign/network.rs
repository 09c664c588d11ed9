//! Positional keypoint encoding, attentional aggregation and pairwise scores.

use nalgebra::DMatrix;

use super::weights::{AttentionBlock, Linear, MatcherWeights};
use super::{AssignError, ConfidenceMode, MatcherConfig};
use crate::descfield::{DescriptorSet, KeypointSet};

fn relu(mut x: DMatrix<f64>) -> DMatrix<f64> {
    x.apply(|v| *v = v.max(0.0));
    x
}

fn mlp(layers: &[Linear], x: DMatrix<f64>) -> DMatrix<f64> {
    let last = layers.len().saturating_sub(1);
    layers.iter().enumerate().fold(x, |h, (i, l)| {
        let y = l.forward(&h);
        if i < last {
            relu(y)
        } else {
            y
        }
    })
}

/// Maps pixel coordinates into `[-1, 1)` with the image center at 0.
pub fn normalize_coords(kps: &KeypointSet) -> Vec<[f64; 2]> {
    let (w, h) = (kps.image_size.0 as f64, kps.image_size.1 as f64);
    kps.coords
        .iter()
        .map(|p| [(p.x - w / 2.0) / (w / 2.0), (p.y - h / 2.0) / (h / 2.0)])
        .collect()
}

/// `feature_i = desc_i + MLP(normalized coords_i)`. In legacy mode the MLP
/// also receives the keypoint confidence; in oblivious mode the confidence
/// field is never touched.
pub fn encode_keypoints(
    kps: &KeypointSet,
    descs: &DescriptorSet,
    weights: &MatcherWeights,
    config: &MatcherConfig,
) -> Result<DMatrix<f64>, AssignError> {
    if descs.len() != kps.len() {
        return Err(AssignError::ShapeMismatch(format!(
            "{} descriptors for {} keypoints",
            descs.len(),
            kps.len()
        )));
    }
    if descs.dim() != config.dim {
        return Err(AssignError::ShapeMismatch(format!(
            "descriptor width {} but matcher dim {}",
            descs.dim(),
            config.dim
        )));
    }
    let coords = normalize_coords(kps);
    let input = match config.confidence_mode {
        ConfidenceMode::Oblivious => {
            DMatrix::from_fn(kps.len(), 2, |i, j| coords[i][j])
        }
        ConfidenceMode::Legacy => {
            let conf = kps.confidence.as_ref().ok_or(AssignError::MissingConfidence)?;
            DMatrix::from_fn(kps.len(), 3, |i, j| if j < 2 { coords[i][j] } else { conf[i] })
        }
    };
    if input.ncols() != weights.encoder_input() {
        return Err(AssignError::ShapeMismatch(format!(
            "encoder expects {} inputs, mode provides {}",
            weights.encoder_input(),
            input.ncols()
        )));
    }
    Ok(&descs.0 + mlp(&weights.encoder, input))
}

fn softmax_rows(mut s: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in s.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    s
}

/// Message from `source` to every row of `x`, already passed through the
/// block's MLP; the caller adds it residually.
fn attention_delta(
    block: &AttentionBlock,
    x: &DMatrix<f64>,
    source: &DMatrix<f64>,
    num_heads: usize,
) -> DMatrix<f64> {
    let dim = x.ncols();
    let head_dim = dim / num_heads;
    let q = block.query.forward(x);
    let k = block.key.forward(source);
    let v = block.value.forward(source);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut message = DMatrix::zeros(x.nrows(), dim);
    for h in 0..num_heads {
        let cols = h * head_dim;
        let qh = q.columns(cols, head_dim);
        let kh = k.columns(cols, head_dim);
        let vh = v.columns(cols, head_dim);
        let prob = softmax_rows(qh * kh.transpose() * scale);
        message
            .columns_mut(cols, head_dim)
            .copy_from(&(prob * vh));
    }
    let merged = block.merge.forward(&message);
    let mut cat = DMatrix::zeros(x.nrows(), 2 * dim);
    cat.columns_mut(0, dim).copy_from(x);
    cat.columns_mut(dim, dim).copy_from(&merged);
    let hidden = relu(block.mlp_hidden.forward(&cat));
    block.mlp_out.forward(&hidden)
}

/// Alternating self/cross attention with residual updates. Both sides of a
/// block are computed from the same input state before either is updated.
pub fn gnn_forward(
    feat_a: &DMatrix<f64>,
    feat_b: &DMatrix<f64>,
    weights: &MatcherWeights,
    config: &MatcherConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>), AssignError> {
    if feat_a.ncols() != config.dim || feat_b.ncols() != config.dim {
        return Err(AssignError::ShapeMismatch(format!(
            "feature widths {} and {} but matcher dim {}",
            feat_a.ncols(),
            feat_b.ncols(),
            config.dim
        )));
    }
    if weights.layers.len() != config.num_layers {
        return Err(AssignError::ShapeMismatch(format!(
            "weights hold {} layers, config expects {}",
            weights.layers.len(),
            config.num_layers
        )));
    }
    if config.num_layers > 0 && (feat_a.nrows() == 0 || feat_b.nrows() == 0) {
        return Err(AssignError::ShapeMismatch(
            "attention needs keypoints on both sides".into(),
        ));
    }
    let mut a = feat_a.clone();
    let mut b = feat_b.clone();
    for pair in &weights.layers {
        let da = attention_delta(&pair.self_attn, &a, &a, config.num_heads);
        let db = attention_delta(&pair.self_attn, &b, &b, config.num_heads);
        a += da;
        b += db;
        let da = attention_delta(&pair.cross_attn, &a, &b, config.num_heads);
        let db = attention_delta(&pair.cross_attn, &b, &a, config.num_heads);
        a += da;
        b += db;
    }
    Ok((a, b))
}

/// `S_ij = <proj(a_i), proj(b_j)> / sqrt(D)`.
pub fn score_matrix(
    feat_a: &DMatrix<f64>,
    feat_b: &DMatrix<f64>,
    weights: &MatcherWeights,
) -> DMatrix<f64> {
    let pa = weights.final_proj.forward(feat_a);
    let pb = weights.final_proj.forward(feat_b);
    let dim = weights.dim() as f64;
    (pa * pb.transpose()) / dim.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::random_weights;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(layers: usize) -> MatcherConfig {
        MatcherConfig {
            dim: 16,
            num_layers: layers,
            num_heads: 4,
            ..MatcherConfig::default()
        }
    }

    fn random_feats(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0))
    }

    fn kps(n: usize, seed: u64) -> (KeypointSet, DescriptorSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n)
            .map(|_| Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..48.0)))
            .collect();
        let conf = (0..n).map(|_| rng.random()).collect();
        let set = KeypointSet::new(coords, Some(conf), (64, 48)).unwrap();
        (set, DescriptorSet(random_feats(n, 16, seed + 100)))
    }

    #[test]
    fn zero_encoder_is_identity() {
        let cfg = config(0);
        let mut w = random_weights(&cfg, 0);
        for l in &mut w.encoder {
            *l = Linear::zeros(l.in_dim, l.out_dim);
        }
        let (k, d) = kps(7, 1);
        let f = encode_keypoints(&k, &d, &w, &cfg).unwrap();
        assert_eq!(f, d.0);
    }

    #[test]
    fn center_maps_to_origin() {
        let k = KeypointSet::new(vec![Vector2::new(32.0, 24.0)], None, (64, 48)).unwrap();
        assert_eq!(normalize_coords(&k), vec![[0.0, 0.0]]);
        let corner = KeypointSet::new(vec![Vector2::new(0.0, 0.0)], None, (64, 48)).unwrap();
        assert_eq!(normalize_coords(&corner), vec![[-1.0, -1.0]]);
    }

    #[test]
    fn oblivious_ignores_confidence_legacy_requires_it() {
        let cfg = config(0);
        let w = random_weights(&cfg, 3);
        let (k, d) = kps(9, 2);
        let base = encode_keypoints(&k, &d, &w, &cfg).unwrap();
        for conf in [None, Some(vec![0.0; 9]), Some(vec![1.0; 9])] {
            let f = encode_keypoints(&k.with_confidence(conf), &d, &w, &cfg).unwrap();
            assert_eq!(f, base);
        }

        let legacy = MatcherConfig {
            confidence_mode: ConfidenceMode::Legacy,
            ..cfg
        };
        let wl = random_weights(&legacy, 3);
        assert_eq!(
            encode_keypoints(&k.with_confidence(None), &d, &wl, &legacy).unwrap_err(),
            AssignError::MissingConfidence
        );
        let f0 = encode_keypoints(&k.with_confidence(Some(vec![0.0; 9])), &d, &wl, &legacy).unwrap();
        let f1 = encode_keypoints(&k.with_confidence(Some(vec![1.0; 9])), &d, &wl, &legacy).unwrap();
        assert_ne!(f0, f1);
    }

    #[test]
    fn no_layers_is_identity() {
        let cfg = config(0);
        let w = random_weights(&cfg, 0);
        let a = random_feats(5, 16, 1);
        let b = random_feats(6, 16, 2);
        let (oa, ob) = gnn_forward(&a, &b, &w, &cfg).unwrap();
        assert_eq!((oa, ob), (a, b));
    }

    #[test]
    fn swapping_sides_swaps_outputs() {
        let cfg = config(2);
        let w = random_weights(&cfg, 4);
        let a = random_feats(5, 16, 1);
        let b = random_feats(8, 16, 2);
        let (oa, ob) = gnn_forward(&a, &b, &w, &cfg).unwrap();
        let (sb, sa) = gnn_forward(&b, &a, &w, &cfg).unwrap();
        assert_eq!(oa, sa);
        assert_eq!(ob, sb);
    }

    #[test]
    fn permuting_a_permutes_rows() {
        let cfg = config(2);
        let w = random_weights(&cfg, 5);
        let a = random_feats(6, 16, 1);
        let b = random_feats(7, 16, 2);
        let perm = [3, 0, 5, 1, 4, 2];
        let pa = DMatrix::from_fn(6, 16, |i, j| a[(perm[i], j)]);
        let (oa, ob) = gnn_forward(&a, &b, &w, &cfg).unwrap();
        let (qa, qb) = gnn_forward(&pa, &b, &w, &cfg).unwrap();
        for i in 0..6 {
            for j in 0..16 {
                assert!((qa[(i, j)] - oa[(perm[i], j)]).abs() < 1e-4);
            }
        }
        assert!((qb - ob).abs().max() < 1e-4);
    }

    #[test]
    fn empty_side_rejected_with_layers() {
        let cfg = config(1);
        let w = random_weights(&cfg, 0);
        let a = DMatrix::zeros(0, 16);
        let b = random_feats(3, 16, 0);
        assert!(matches!(
            gnn_forward(&a, &b, &w, &cfg),
            Err(AssignError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn score_of_identical_features() {
        let dim = 9;
        let mut w = crate::assign::MatcherWeights::passthrough(dim, ConfidenceMode::Oblivious);
        w.final_proj = Linear::scaled_identity(dim, 1.0);
        let f = DMatrix::from_fn(1, dim, |_, j| j as f64 - 3.0);
        let s = score_matrix(&f, &f, &w);
        assert!((s[(0, 0)] - f.norm_squared() / 3.0).abs() < 1e-12);

        let e1 = DMatrix::from_fn(1, dim, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let e2 = DMatrix::from_fn(1, dim, |_, j| if j == 1 { 1.0 } else { 0.0 });
        assert_eq!(score_matrix(&e1, &e2, &w)[(0, 0)], 0.0);
    }
}
