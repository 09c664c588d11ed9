//! Relative pose from putative matches: eight-point essential matrix inside
//! RANSAC, decomposition with a cheirality vote, then a Levenberg-Marquardt
//! polish of the pose on the Sampson residuals of the consensus set.
//!
//! All solvers work on normalized image coordinates.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::assign::MatchList;
use crate::descfield::KeypointSet;
use crate::geom::{sampson_distance, skew, CameraIntrinsics, EssentialMatrix, Pose};

const SAMPLE_SIZE: usize = 8;
const POLISH_ROUNDS: usize = 20;
const LM_ITERS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("need at least 8 correspondences, got {0}")]
    InsufficientMatches(usize),
    #[error("correspondences do not constrain the essential matrix (rank < 8)")]
    DegenerateConfiguration,
    #[error("no sample produced an essential matrix")]
    NoModelFound,
    #[error("two pose candidates have the same cheirality support")]
    CheiralityAmbiguous,
    #[error("triangulation rays are parallel")]
    ParallelRays,
    #[error("{0} points in A but {1} in B")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub max_iters: usize,
    pub confidence: f64,
    /// Inlier threshold in pixels; a match is an inlier when its Sampson
    /// distance is below `(threshold / f)^2`, `f` the mean focal length of
    /// both cameras.
    pub inlier_threshold_pix: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            confidence: 0.99999,
            inlier_threshold_pix: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// Relative pose with unit-length translation.
    pub pose: Pose,
    pub essential: EssentialMatrix,
    pub inlier_mask: Vec<bool>,
    pub num_inliers: usize,
}

/// Triangulated point in camera A's frame with its depth in both cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Triangulated {
    pub point: [f64; 3],
    pub depth_a: f64,
    pub depth_b: f64,
}

/// Linear eight-point solve of `x_b^T E x_a = 0` followed by projection onto
/// the essential manifold (singular values `(s, s, 0)`, `s` the mean of the
/// two largest).
pub fn eight_point(
    corr_a: &[Vector2<f64>],
    corr_b: &[Vector2<f64>],
) -> Result<EssentialMatrix, PoseError> {
    if corr_a.len() != corr_b.len() {
        return Err(PoseError::LengthMismatch(corr_a.len(), corr_b.len()));
    }
    let n = corr_a.len();
    if n < SAMPLE_SIZE {
        return Err(PoseError::InsufficientMatches(n));
    }
    // Zero rows pad the system to 9x9 so the SVD yields a full V.
    let mut design = DMatrix::<f64>::zeros(n.max(9), 9);
    for (r, (a, b)) in corr_a.iter().zip(corr_b).enumerate() {
        let row = [
            b.x * a.x,
            b.x * a.y,
            b.x,
            b.y * a.x,
            b.y * a.y,
            b.y,
            a.x,
            a.y,
            1.0,
        ];
        for (c, v) in row.into_iter().enumerate() {
            design[(r, c)] = v;
        }
    }
    let svd = design.svd(false, true);
    let s = &svd.singular_values;
    if s[7].is_nan() || s[7] <= 1e-10 * s[0] {
        return Err(PoseError::DegenerateConfiguration);
    }
    let v_t = svd.v_t.expect("v_t requested");
    let null = v_t.row(8);
    let e = Matrix3::from_row_slice(null.clone_owned().as_slice());
    Ok(project_to_essential(&e))
}

fn project_to_essential(e: &Matrix3<f64>) -> EssentialMatrix {
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sigma = (svd.singular_values[0] + svd.singular_values[1]) / 2.0;
    let d = Matrix3::from_diagonal(&Vector3::new(sigma, sigma, 0.0));
    EssentialMatrix(u * d * v_t)
}

/// The four `(R, t)` factorizations of `E`, `t` unit length:
/// `(U W V^T, u3)`, `(U W V^T, -u3)`, `(U W^T V^T, u3)`, `(U W^T V^T, -u3)`.
pub fn decompose_essential(e: &EssentialMatrix) -> [Pose; 4] {
    let svd = e.0.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).normalize();
    [
        Pose {
            rotation: r1,
            translation: t,
        },
        Pose {
            rotation: r1,
            translation: -t,
        },
        Pose {
            rotation: r2,
            translation: t,
        },
        Pose {
            rotation: r2,
            translation: -t,
        },
    ]
}

/// Linear (DLT) triangulation with `P_a = [I | 0]` and `P_b = [R | t]`.
pub fn triangulate(
    pa: &Vector2<f64>,
    pb: &Vector2<f64>,
    pose: &Pose,
) -> Result<Triangulated, PoseError> {
    let ray_a = pa.push(1.0);
    let ray_b = pose.rotation.transpose() * pb.push(1.0);
    let sin = ray_a.cross(&ray_b).norm() / (ray_a.norm() * ray_b.norm());
    if sin < 1e-12 {
        return Err(PoseError::ParallelRays);
    }
    let r = &pose.rotation;
    let t = &pose.translation;
    let pb_rows = |k: usize| [r[(k, 0)], r[(k, 1)], r[(k, 2)], t[k]];
    let (b0, b1, b2) = (pb_rows(0), pb_rows(1), pb_rows(2));
    let mut a = Matrix4::zeros();
    let rows = [
        [-1.0, 0.0, pa.x, 0.0],
        [0.0, -1.0, pa.y, 0.0],
        std::array::from_fn(|c| pb.x * b2[c] - b0[c]),
        std::array::from_fn(|c| pb.y * b2[c] - b1[c]),
    ];
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let h = svd.v_t.unwrap().row(3).transpose();
    let point = Vector3::new(h[0], h[1], h[2]) / h[3];
    let in_b = pose.transform(&point);
    Ok(Triangulated {
        point: point.into(),
        depth_a: point.z,
        depth_b: in_b.z,
    })
}

fn cheirality_support(pose: &Pose, corr_a: &[Vector2<f64>], corr_b: &[Vector2<f64>]) -> usize {
    corr_a
        .iter()
        .zip(corr_b)
        .filter(|(a, b)| {
            triangulate(a, b, pose).is_ok_and(|t| {
                t.depth_a.is_finite() && t.depth_b.is_finite() && t.depth_a > 0.0 && t.depth_b > 0.0
            })
        })
        .count()
}

/// Picks the decomposition of `E` that puts the most correspondences in
/// front of both cameras.
pub fn recover_pose(
    e: &EssentialMatrix,
    corr_a: &[Vector2<f64>],
    corr_b: &[Vector2<f64>],
) -> Result<Pose, PoseError> {
    if corr_a.len() != corr_b.len() {
        return Err(PoseError::LengthMismatch(corr_a.len(), corr_b.len()));
    }
    if corr_a.is_empty() {
        return Err(PoseError::InsufficientMatches(0));
    }
    let candidates = decompose_essential(e);
    let mut support: Vec<(usize, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (cheirality_support(c, corr_a, corr_b), i))
        .collect();
    support.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    if support[0].0 == support[1].0 {
        return Err(PoseError::CheiralityAmbiguous);
    }
    Ok(candidates[support[0].1])
}

fn inlier_mask(
    e: &EssentialMatrix,
    corr_a: &[Vector2<f64>],
    corr_b: &[Vector2<f64>],
    threshold: f64,
) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = corr_a
        .iter()
        .zip(corr_b)
        .map(|(a, b)| sampson_distance(a, b, e).is_ok_and(|d| d < threshold))
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    (mask, count)
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let good = inlier_ratio.powi(SAMPLE_SIZE as i32);
    if good >= 1.0 {
        return 0;
    }
    if good <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - good).ln()).ceil();
    if n.is_finite() && n >= 0.0 {
        (n as usize).min(cap)
    } else {
        cap
    }
}

fn sampson_residuals(pose: &Pose, corr_a: &[Vector2<f64>], corr_b: &[Vector2<f64>]) -> DVector<f64> {
    let e = skew(&pose.translation) * pose.rotation;
    DVector::from_iterator(
        corr_a.len(),
        corr_a.iter().zip(corr_b).map(|(a, b)| {
            let xa = a.push(1.0);
            let xb = b.push(1.0);
            let l = e * xa;
            let lt = e.transpose() * xb;
            let denom = (l.x * l.x + l.y * l.y + lt.x * lt.x + lt.y * lt.y).sqrt();
            if denom > 0.0 {
                xb.dot(&l) / denom
            } else {
                0.0
            }
        }),
    )
}

/// Moves `pose` by a rotation increment `d[0..3]` (left-multiplied, axis
/// times angle) and a translation increment `d[3..5]` in the tangent plane
/// of the unit translation.
fn retract(pose: &Pose, d: &[f64]) -> Pose {
    let rotation = Rotation3::from_scaled_axis(Vector3::new(d[0], d[1], d[2])).into_inner() * pose.rotation;
    let t = pose.translation.normalize();
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = t.cross(&helper).normalize();
    let v = t.cross(&u);
    Pose {
        rotation,
        translation: (t + d[3] * u + d[4] * v).normalize(),
    }
}

/// Levenberg-Marquardt on the signed Sampson residuals over the five pose
/// degrees of freedom (rotation and translation direction). Returns a pose
/// with unit translation whose residual is no larger than the input's.
pub fn refine_pose(pose: &Pose, corr_a: &[Vector2<f64>], corr_b: &[Vector2<f64>]) -> Pose {
    let mut current = Pose {
        rotation: pose.rotation,
        translation: pose.translation.normalize(),
    };
    if corr_a.len() < 5 || corr_a.len() != corr_b.len() {
        return current;
    }
    let mut residual = sampson_residuals(&current, corr_a, corr_b);
    let mut cost = residual.norm_squared();
    let mut lambda = 1e-3;
    let h = 1e-7;
    for _ in 0..LM_ITERS {
        if cost == 0.0 {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(corr_a.len(), 5);
        for k in 0..5 {
            let mut d = [0.0; 5];
            d[k] = h;
            let plus = sampson_residuals(&retract(&current, &d), corr_a, corr_b);
            d[k] = -h;
            let minus = sampson_residuals(&retract(&current, &d), corr_a, corr_b);
            jac.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        let jt = jac.transpose();
        let gradient = &jt * &residual;
        let mut normal = &jt * &jac;
        for k in 0..5 {
            normal[(k, k)] *= 1.0 + lambda;
        }
        let Some(step) = normal.lu().solve(&(-gradient)) else {
            break;
        };
        let candidate = retract(&current, step.as_slice());
        let candidate_residual = sampson_residuals(&candidate, corr_a, corr_b);
        let candidate_cost = candidate_residual.norm_squared();
        if candidate_cost < cost {
            let gain = (cost - candidate_cost) / cost;
            current = candidate;
            residual = candidate_residual;
            cost = candidate_cost;
            lambda = (lambda * 0.1).max(1e-12);
            if gain < 1e-12 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e8 {
                break;
            }
        }
    }
    current
}

/// RANSAC over normalized correspondences with the Sampson distance compared
/// against `threshold`. The best sample model is refit on its consensus set,
/// decomposed, and then polished with [`refine_pose`], re-selecting inliers
/// after each polish until the inlier set stops changing.
pub fn ransac_essential_normalized(
    corr_a: &[Vector2<f64>],
    corr_b: &[Vector2<f64>],
    threshold: f64,
    config: &RansacConfig,
) -> Result<PoseEstimate, PoseError> {
    let n = corr_a.len();
    if n != corr_b.len() {
        return Err(PoseError::LengthMismatch(n, corr_b.len()));
    }
    if n < SAMPLE_SIZE {
        return Err(PoseError::InsufficientMatches(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(EssentialMatrix, Vec<bool>, usize)> = None;
    let mut budget = config.max_iters.max(1);
    let mut iter = 0;
    let mut sample_a = [Vector2::zeros(); SAMPLE_SIZE];
    let mut sample_b = [Vector2::zeros(); SAMPLE_SIZE];
    while iter < budget {
        iter += 1;
        let idx = rand::seq::index::sample(&mut rng, n, SAMPLE_SIZE);
        for (k, i) in idx.iter().enumerate() {
            sample_a[k] = corr_a[i];
            sample_b[k] = corr_b[i];
        }
        let Ok(e) = eight_point(&sample_a, &sample_b) else {
            continue;
        };
        let (mask, count) = inlier_mask(&e, corr_a, corr_b, threshold);
        if best.as_ref().is_none_or(|b| count > b.2) {
            budget = required_iterations(count as f64 / n as f64, config.confidence, config.max_iters)
                .max(iter);
            best = Some((e, mask, count));
        }
    }
    let (mut e, mut mask, mut count) = best.ok_or(PoseError::NoModelFound)?;
    log::debug!("ransac: {iter} iterations, {count}/{n} inliers before refit");

    if count >= SAMPLE_SIZE {
        let (in_a, in_b) = select(corr_a, corr_b, &mask);
        if let Ok(refit) = eight_point(&in_a, &in_b) {
            let (refit_mask, refit_count) = inlier_mask(&refit, corr_a, corr_b, threshold);
            if refit_count >= count {
                e = refit;
                mask = refit_mask;
                count = refit_count;
            }
        }
    }
    let (in_a, in_b) = select(corr_a, corr_b, &mask);
    let mut pose = recover_pose(&e, &in_a, &in_b)?;

    for _ in 0..POLISH_ROUNDS {
        if count < SAMPLE_SIZE {
            break;
        }
        let (in_a, in_b) = select(corr_a, corr_b, &mask);
        let polished = refine_pose(&pose, &in_a, &in_b);
        let polished_e = EssentialMatrix(skew(&polished.translation) * polished.rotation);
        let (polished_mask, polished_count) = inlier_mask(&polished_e, corr_a, corr_b, threshold);
        if polished_count < SAMPLE_SIZE {
            break;
        }
        let stable = polished_mask == mask;
        pose = polished;
        e = polished_e;
        mask = polished_mask;
        count = polished_count;
        if stable {
            break;
        }
    }
    Ok(PoseEstimate {
        pose,
        essential: e,
        inlier_mask: mask,
        num_inliers: count,
    })
}

fn select(
    corr_a: &[Vector2<f64>],
    corr_b: &[Vector2<f64>],
    mask: &[bool],
) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
    corr_a
        .iter()
        .zip(corr_b)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (*a, *b))
        .unzip()
}

/// Squared Sampson-distance threshold for an inlier cutoff in pixels:
/// `(pixels / f)^2` with `f` the mean of both cameras' focal lengths.
pub fn normalized_threshold(pixels: f64, k_a: &CameraIntrinsics, k_b: &CameraIntrinsics) -> f64 {
    let f = (k_a.fx + k_a.fy + k_b.fx + k_b.fy) / 4.0;
    (pixels / f).powi(2)
}

/// Robust relative pose for a list of matches between two keypoint sets.
pub fn ransac_essential(
    matches: &MatchList,
    kps_a: &KeypointSet,
    kps_b: &KeypointSet,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
    config: &RansacConfig,
) -> Result<PoseEstimate, PoseError> {
    let (corr_a, corr_b): (Vec<_>, Vec<_>) = matches
        .0
        .iter()
        .map(|m| (k_a.normalize(&kps_a.coords[m.a]), k_b.normalize(&kps_b.coords[m.b])))
        .unzip();
    let threshold = normalized_threshold(config.inlier_threshold_pix, k_a, k_b);
    ransac_essential_normalized(&corr_a, &corr_b, threshold, config)
}
