//! Browser bindings for the oblimatch demo page.
//!
//! Each operation has a plain Rust function returning a JSON value (tested
//! natively) and a thin `wasm_bindgen` export that serializes it.

use nalgebra::DMatrix;
use oblimatch::assign::{match_pair, sinkhorn, MatcherConfig};
use oblimatch::descfield::{oracle_grid, scene_keypoints, KeypointSet};
use oblimatch::evalkit::{correctness_flags, pose_auc, precision_and_score, Matcher, AUC_THRESHOLDS};
use oblimatch::geom::{pose_error, synth_scene, SceneConfig};
use oblimatch::posest::{ransac_essential, RansacConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Descriptor dimension used by the demo scenes.
pub const DEMO_DIM: usize = 32;
/// Image size of the demo scenes.
pub const DEMO_SIZE: (u32, u32) = (320, 240);
const DEMO_FOCAL: f64 = 300.0;

/// Parameters of [`explore_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub points: usize,
    pub exclusive: usize,
    pub descriptor_noise: f64,
    pub pixel_noise: f64,
    pub max_rotation_deg: f64,
    pub match_threshold: f64,
    pub seed: u64,
}

/// Synthesizes a pair, matches it with the passthrough matcher and
/// estimates the pose. Returns keypoints, matches with ground-truth
/// correctness and summary metrics.
pub fn explore_scene(p: &SceneParams) -> Result<Value, String> {
    let config = SceneConfig {
        num_points: p.points,
        num_exclusive: p.exclusive,
        image_size: DEMO_SIZE,
        focal: DEMO_FOCAL,
        max_rotation_deg: p.max_rotation_deg,
        ..SceneConfig::default()
    };
    let scene = synth_scene(&config, p.seed).map_err(|e| e.to_string())?;
    let (grid_a, grid_b) =
        oracle_grid(&scene, DEMO_DIM, p.descriptor_noise, p.seed ^ 0x9e37).map_err(|e| e.to_string())?;
    let kps = scene_keypoints(&scene, p.pixel_noise, p.seed ^ 0x79b9);
    let matcher = Matcher::passthrough(MatcherConfig {
        match_threshold: p.match_threshold,
        ..MatcherConfig::passthrough(DEMO_DIM)
    });
    let (_, matches) = match_pair(&kps.a, &kps.b, &grid_a, &grid_b, &matcher.weights, &matcher.config)
        .map_err(|e| e.to_string())?;
    let flags = correctness_flags(
        &matches.0,
        &kps.a,
        &kps.b,
        &scene.pose,
        &scene.intrinsics_a,
        &scene.intrinsics_b,
    )
    .map_err(|e| e.to_string())?;
    let (precision, score) = precision_and_score(&flags, kps.a.len(), kps.b.len());
    let estimate = ransac_essential(
        &matches,
        &kps.a,
        &kps.b,
        &scene.intrinsics_a,
        &scene.intrinsics_b,
        &RansacConfig { seed: p.seed, ..RansacConfig::default() },
    );
    let (pose_err, inliers, failure) = match &estimate {
        Ok(est) => (pose_error(&est.pose, &scene.pose).ok(), est.num_inliers, None),
        Err(e) => (None, 0, Some(e.to_string())),
    };
    let coords = |k: &KeypointSet| -> Vec<[f64; 2]> {
        k.coords.iter().map(|c| [c.x, c.y]).collect()
    };
    let match_list: Vec<Value> = matches
        .0
        .iter()
        .zip(&flags)
        .map(|(m, &ok)| json!({ "a": m.a, "b": m.b, "score": m.score, "correct": ok }))
        .collect();
    Ok(json!({
        "width": DEMO_SIZE.0,
        "height": DEMO_SIZE.1,
        "keypoints_a": coords(&kps.a),
        "keypoints_b": coords(&kps.b),
        "matches": match_list,
        "num_ground_truth": kps.gt_matches().len(),
        "precision": precision,
        "matching_score": score,
        "num_inliers": inliers,
        "pose_error_deg": pose_err,
        "failure": failure,
    }))
}

/// Runs Sinkhorn on an `m x n` score matrix drawn uniformly from `[-3, 3]`
/// with `signal` added to the diagonal. Returns the full coupling including
/// dustbins and the largest marginal violation over non-dustbin rows and
/// columns.
pub fn sinkhorn_heatmap(
    m: usize,
    n: usize,
    signal: f64,
    bin_score: f64,
    iters: usize,
    seed: u64,
) -> Result<Value, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = DMatrix::from_fn(m, n, |i, j| {
        rng.random_range(-3.0..3.0) + if i == j { signal } else { 0.0 }
    });
    let p = sinkhorn(&scores, bin_score, iters).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = (0..=m).map(|i| p.0.row(i).iter().copied().collect()).collect();
    let row_err = (0..m).map(|i| (p.0.row(i).sum() - 1.0).abs()).fold(0.0, f64::max);
    let col_err = (0..n).map(|j| (p.0.column(j).sum() - 1.0).abs()).fold(0.0, f64::max);
    Ok(json!({
        "rows": m,
        "cols": n,
        "coupling": rows,
        "marginal_error": row_err.max(col_err),
    }))
}

/// Parses a comma or whitespace separated list of pose errors in degrees;
/// `fail`, `none` or `-` mark a failed estimate.
pub fn parse_errors(text: &str) -> Result<Vec<Option<f64>>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| match t.to_ascii_lowercase().as_str() {
            "fail" | "none" | "-" => Ok(None),
            _ => t
                .parse::<f64>()
                .map(Some)
                .map_err(|_| format!("not a number: {t:?}")),
        })
        .collect()
}

/// Cumulative recall curve of the errors up to `max_threshold` degrees
/// (`samples + 1` points) and the AUC at the standard thresholds.
pub fn auc_curve(errors: &[Option<f64>], max_threshold: f64, samples: usize) -> Result<Value, String> {
    if max_threshold.is_nan() || max_threshold <= 0.0 || samples == 0 {
        return Err("max threshold and sample count must be positive".into());
    }
    let auc = pose_auc(errors, &AUC_THRESHOLDS).map_err(|e| e.to_string())?;
    let n = errors.len() as f64;
    let curve: Vec<[f64; 2]> = (0..=samples)
        .map(|k| {
            let t = max_threshold * k as f64 / samples as f64;
            let hit = errors.iter().filter(|e| matches!(e, Some(v) if *v <= t)).count();
            [t, hit as f64 / n]
        })
        .collect();
    Ok(json!({
        "curve": curve,
        "auc": { "5": auc[0], "10": auc[1], "20": auc[2] },
    }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsValue> {
    v.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = exploreScene)]
#[allow(clippy::too_many_arguments)]
pub fn explore_scene_js(
    points: usize,
    exclusive: usize,
    descriptor_noise: f64,
    pixel_noise: f64,
    max_rotation_deg: f64,
    match_threshold: f64,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(explore_scene(&SceneParams {
        points,
        exclusive,
        descriptor_noise,
        pixel_noise,
        max_rotation_deg,
        match_threshold,
        seed: seed as u64,
    }))
}

#[wasm_bindgen(js_name = sinkhornHeatmap)]
pub fn sinkhorn_heatmap_js(
    m: usize,
    n: usize,
    signal: f64,
    bin_score: f64,
    iters: usize,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(sinkhorn_heatmap(m, n, signal, bin_score, iters, seed as u64))
}

#[wasm_bindgen(js_name = aucCurve)]
pub fn auc_curve_js(errors: &str, max_threshold: f64, samples: usize) -> Result<String, JsValue> {
    to_js(parse_errors(errors).and_then(|e| auc_curve(&e, max_threshold, samples)))
}
