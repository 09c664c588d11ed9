//! Synthetic descriptor fields with planted correspondences.

use nalgebra::{DVector, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{lattice, DescError, DescriptorGrid, KeypointSet};
use crate::geom::{jitter, ScenePair};

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(&mut *rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn background(width: usize, height: usize, dim: usize, rng: &mut ChaCha8Rng) -> DescriptorGrid {
    let mut data = Vec::with_capacity(width * height * dim);
    for _ in 0..width * height {
        data.extend(random_unit(dim, rng).iter().map(|&v| v as f32));
    }
    DescriptorGrid::new(width, height, dim, data).expect("background grid shape")
}

/// Writes `v` into the 2x2 lattice block surrounding `p`, so bilinear
/// readout anywhere inside that cell returns `v`.
fn splat(grid: &mut DescriptorGrid, p: &Vector2<f64>, v: &DVector<f64>) {
    let (x0, x1, _) = lattice(p.x, grid.width());
    let (y0, y1, _) = lattice(p.y, grid.height());
    for (x, y) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
        for (dst, &src) in grid.cell_mut(x, y).iter_mut().zip(v.iter()) {
            *dst = src as f32;
        }
    }
}

fn perturb(v: &DVector<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    if sigma == 0.0 {
        return v.clone();
    }
    // per-channel std sigma/sqrt(D): the noise vector has norm ~sigma
    let scale = sigma / (v.len() as f64).sqrt();
    let noisy = DVector::from_fn(v.len(), |i, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        v[i] + scale * z
    });
    let n = noisy.norm();
    noisy / n
}

/// Builds a pair of grids in which every visible scene point carries a
/// random unit descriptor at its projection. Co-visible points share the
/// same descriptor in both grids (each copy independently perturbed by
/// `noise_sigma` and renormalized); all other cells hold independent random
/// unit vectors.
pub fn oracle_grid(
    scene: &ScenePair,
    dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(DescriptorGrid, DescriptorGrid), DescError> {
    if dim < 8 {
        return Err(DescError::BadShape {
            width: scene.image_size_a.0 as usize,
            height: scene.image_size_a.1 as usize,
            dim,
            len: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted: Vec<DVector<f64>> = (0..scene.points.len())
        .map(|_| random_unit(dim, &mut rng))
        .collect();
    let (wa, ha) = scene.image_size_a;
    let (wb, hb) = scene.image_size_b;
    let mut grid_a = background(wa as usize, ha as usize, dim, &mut rng);
    let mut grid_b = background(wb as usize, hb as usize, dim, &mut rng);
    for (i, v) in planted.iter().enumerate() {
        if scene.visible_a[i] {
            let va = perturb(v, noise_sigma, &mut rng);
            splat(&mut grid_a, &scene.pix_a[i], &va);
        }
        if scene.visible_b[i] {
            let vb = perturb(v, noise_sigma, &mut rng);
            splat(&mut grid_b, &scene.pix_b[i], &vb);
        }
    }
    Ok((grid_a, grid_b))
}

/// Keypoints of both views of a synthetic scene with their point ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneKeypoints {
    pub a: KeypointSet,
    pub b: KeypointSet,
    /// Scene point index behind each keypoint of A.
    pub ids_a: Vec<usize>,
    pub ids_b: Vec<usize>,
}

impl SceneKeypoints {
    /// Ground-truth `(index in A, index in B)` pairs, ordered by A index.
    pub fn gt_matches(&self) -> Vec<(usize, usize)> {
        let mut slot = vec![usize::MAX; self.ids_a.iter().chain(&self.ids_b).max().map_or(0, |m| m + 1)];
        for (j, &id) in self.ids_b.iter().enumerate() {
            slot[id] = j;
        }
        self.ids_a
            .iter()
            .enumerate()
            .filter(|(_, &id)| slot[id] != usize::MAX)
            .map(|(i, &id)| (i, slot[id]))
            .collect()
    }
}

fn clamp_into(p: &mut Vector2<f64>, size: (u32, u32)) {
    let max_x = size.0 as f64 - 1e-6;
    let max_y = size.1 as f64 - 1e-6;
    p.x = p.x.clamp(0.0, max_x);
    p.y = p.y.clamp(0.0, max_y);
}

/// Keypoints at the visible projections of a scene. A keeps scene order;
/// B is shuffled so the planted assignment is not the identity. Both sides
/// get a uniform random "detector" confidence, and optional Gaussian pixel
/// noise (clamped back into the image).
pub fn scene_keypoints(scene: &ScenePair, pixel_noise: f64, seed: u64) -> SceneKeypoints {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids_a: Vec<usize> = (0..scene.points.len()).filter(|&i| scene.visible_a[i]).collect();
    let mut ids_b: Vec<usize> = (0..scene.points.len()).filter(|&i| scene.visible_b[i]).collect();
    ids_b.shuffle(&mut rng);

    let mut make = |ids: &[usize], pix: &[Vector2<f64>], size: (u32, u32)| {
        let mut coords: Vec<Vector2<f64>> = ids.iter().map(|&i| pix[i]).collect();
        jitter(&mut coords, pixel_noise, &mut rng);
        coords.iter_mut().for_each(|p| clamp_into(p, size));
        let conf: Vec<f64> = ids.iter().map(|_| rng.random::<f64>()).collect();
        KeypointSet {
            coords,
            confidence: Some(conf),
            image_size: size,
        }
    };
    let a = make(&ids_a, &scene.pix_a, scene.image_size_a);
    let b = make(&ids_b, &scene.pix_b, scene.image_size_b);
    SceneKeypoints { a, b, ids_a, ids_b }
}
