use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::{axis_angle, project, CameraIntrinsics, GeomError, Pose};
use crate::io::{read_json, FileError};

const MAX_POSE_ATTEMPTS: usize = 1000;
const MAX_POINT_ATTEMPTS: usize = 1000;

/// Parameters of the synthetic two-view generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Points visible in both views.
    pub num_points: usize,
    /// Points visible in exactly one view, split between A and B.
    pub num_exclusive: usize,
    /// `(width, height)` of both images in pixels.
    pub image_size: (u32, u32),
    pub focal: f64,
    pub baseline: f64,
    pub max_rotation_deg: f64,
    /// Depth range of the sampled points, in multiples of the baseline.
    pub depth_range: (f64, f64),
    /// Minimum pixel distance between any two projections in the same image.
    pub min_separation_px: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_points: 100,
            num_exclusive: 0,
            image_size: (320, 240),
            focal: 300.0,
            baseline: 1.0,
            max_rotation_deg: 15.0,
            depth_range: (4.0, 12.0),
            min_separation_px: 3.0,
        }
    }
}

/// Ground truth for one synthetic image pair. Points live in camera A's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub intrinsics_a: CameraIntrinsics,
    pub intrinsics_b: CameraIntrinsics,
    /// Camera-B-from-camera-A.
    pub pose: Pose,
    pub points: Vec<Vector3<f64>>,
    pub pix_a: Vec<Vector2<f64>>,
    pub pix_b: Vec<Vector2<f64>>,
    pub visible_a: Vec<bool>,
    pub visible_b: Vec<bool>,
    pub image_size_a: (u32, u32),
    pub image_size_b: (u32, u32),
}

fn inside(p: &Vector2<f64>, depth: f64, size: (u32, u32)) -> bool {
    depth > 0.0 && p.x >= 0.0 && p.y >= 0.0 && p.x < size.0 as f64 && p.y < size.1 as f64
}

struct Placer<'a> {
    config: &'a SceneConfig,
    k: CameraIntrinsics,
    pose: Pose,
    points: Vec<Vector3<f64>>,
    pix_a: Vec<Vector2<f64>>,
    pix_b: Vec<Vector2<f64>>,
    visible_a: Vec<bool>,
    visible_b: Vec<bool>,
}

#[derive(Clone, Copy)]
enum Visibility {
    Both,
    OnlyA,
    OnlyB,
}

impl Placer<'_> {
    fn separated(&self, p: &Vector2<f64>, in_a: bool) -> bool {
        let min2 = self.config.min_separation_px * self.config.min_separation_px;
        let (pix, vis) = if in_a {
            (&self.pix_a, &self.visible_a)
        } else {
            (&self.pix_b, &self.visible_b)
        };
        pix.iter()
            .zip(vis)
            .all(|(q, &v)| !v || (q - p).norm_squared() >= min2)
    }

    fn sample_ray_point(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let (w, h) = self.config.image_size;
        let u = rng.random_range(0.0..w as f64);
        let v = rng.random_range(0.0..h as f64);
        let (d0, d1) = self.config.depth_range;
        let depth = rng.random_range(d0..d1) * self.config.baseline;
        let n = self.k.normalize(&Vector2::new(u, v));
        Vector3::new(n.x, n.y, 1.0) * depth
    }

    fn try_place(&mut self, kind: Visibility, rng: &mut ChaCha8Rng) -> bool {
        let size = self.config.image_size;
        for _ in 0..MAX_POINT_ATTEMPTS {
            let x = match kind {
                Visibility::OnlyB => {
                    let xb = self.sample_ray_point(rng);
                    self.pose.rotation.transpose() * (xb - self.pose.translation)
                }
                _ => self.sample_ray_point(rng),
            };
            let (pa, za) = project(&[x], &self.k, &Pose::identity())[0];
            let (pb, zb) = project(&[x], &self.k, &self.pose)[0];
            let va = inside(&pa, za, size);
            let vb = inside(&pb, zb, size);
            let ok = match kind {
                Visibility::Both => va && vb && self.separated(&pa, true) && self.separated(&pb, false),
                Visibility::OnlyA => va && !vb && self.separated(&pa, true),
                Visibility::OnlyB => vb && !va && self.separated(&pb, false),
            };
            if ok {
                self.points.push(x);
                self.pix_a.push(pa);
                self.pix_b.push(pb);
                self.visible_a.push(va);
                self.visible_b.push(vb);
                return true;
            }
        }
        false
    }
}

fn random_pose(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Pose {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..=config.max_rotation_deg.to_radians());
    let rotation = axis_angle(&Vector3::from(axis), angle);
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let center = Vector3::from(dir) * config.baseline;
    Pose {
        rotation,
        translation: -(rotation * center),
    }
}

/// Samples a deterministic two-view scene. Camera A sits at the origin; camera
/// B is offset by `baseline` in a random direction and rotated by at most
/// `max_rotation_deg`. Points are drawn along random rays of the viewing
/// camera and rejected until visibility and separation constraints hold.
pub fn synth_scene(config: &SceneConfig, seed: u64) -> Result<ScenePair, GeomError> {
    if config.num_points < 8 {
        return Err(GeomError::TooFewPoints(config.num_points));
    }
    if config.baseline.is_nan() || config.baseline <= 0.0 {
        return Err(GeomError::ZeroBaseline);
    }
    let (w, h) = config.image_size;
    let k = CameraIntrinsics::new(config.focal, config.focal, w as f64 / 2.0, h as f64 / 2.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    'pose: for _ in 0..MAX_POSE_ATTEMPTS {
        let pose = random_pose(config, &mut rng);
        let mut placer = Placer {
            config,
            k,
            pose,
            points: Vec::new(),
            pix_a: Vec::new(),
            pix_b: Vec::new(),
            visible_a: Vec::new(),
            visible_b: Vec::new(),
        };
        let only_a = config.num_exclusive / 2;
        let plan = std::iter::repeat_n(Visibility::Both, config.num_points)
            .chain(std::iter::repeat_n(Visibility::OnlyA, only_a))
            .chain(std::iter::repeat_n(
                Visibility::OnlyB,
                config.num_exclusive - only_a,
            ));
        for kind in plan {
            if !placer.try_place(kind, &mut rng) {
                continue 'pose;
            }
        }
        return Ok(ScenePair {
            intrinsics_a: k,
            intrinsics_b: k,
            pose,
            points: placer.points,
            pix_a: placer.pix_a,
            pix_b: placer.pix_b,
            visible_a: placer.visible_a,
            visible_b: placer.visible_b,
            image_size_a: config.image_size,
            image_size_b: config.image_size,
        });
    }
    Err(GeomError::InfeasibleScene(MAX_POSE_ATTEMPTS))
}

/// Gaussian pixel noise added to a list of projections.
pub fn jitter(points: &mut [Vector2<f64>], sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    for p in points {
        let dx: f64 = StandardNormal.sample(rng);
        let dy: f64 = StandardNormal.sample(rng);
        p.x += sigma * dx;
        p.y += sigma * dy;
    }
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    intrinsics_a: CameraIntrinsics,
    intrinsics_b: CameraIntrinsics,
    rotation: [f64; 9],
    translation: [f64; 3],
    points: Vec<[f64; 3]>,
    pix_a: Vec<[f64; 2]>,
    pix_b: Vec<[f64; 2]>,
    visible_a: Vec<bool>,
    visible_b: Vec<bool>,
    image_size_a: [u32; 2],
    image_size_b: [u32; 2],
}

impl ScenePair {
    /// Indices of points visible in both views.
    pub fn covisible(&self) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| self.visible_a[i] && self.visible_b[i])
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = SceneFile {
            intrinsics_a: self.intrinsics_a,
            intrinsics_b: self.intrinsics_b,
            rotation: self.pose.rotation_row_major(),
            translation: self.pose.translation.into(),
            points: self.points.iter().map(|p| (*p).into()).collect(),
            pix_a: self.pix_a.iter().map(|p| (*p).into()).collect(),
            pix_b: self.pix_b.iter().map(|p| (*p).into()).collect(),
            visible_a: self.visible_a.clone(),
            visible_b: self.visible_b.clone(),
            image_size_a: [self.image_size_a.0, self.image_size_a.1],
            image_size_b: [self.image_size_b.0, self.image_size_b.1],
        };
        serde_json::to_string_pretty(&file).expect("scene serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, FileError> {
        let f: SceneFile = serde_json::from_str(text).map_err(FileError::json("<scene>"))?;
        Self::from_file(f)
    }

    fn from_file(f: SceneFile) -> Result<Self, FileError> {
        let n = f.points.len();
        if [f.pix_a.len(), f.pix_b.len(), f.visible_a.len(), f.visible_b.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(FileError::Invalid(format!(
                "scene arrays disagree in length (expected {n} points)"
            )));
        }
        f.intrinsics_a.validate().map_err(FileError::geom)?;
        f.intrinsics_b.validate().map_err(FileError::geom)?;
        let pose = Pose::from_row_major(f.rotation, f.translation).map_err(FileError::geom)?;
        Ok(Self {
            intrinsics_a: f.intrinsics_a,
            intrinsics_b: f.intrinsics_b,
            pose,
            points: f.points.into_iter().map(Vector3::from).collect(),
            pix_a: f.pix_a.into_iter().map(Vector2::from).collect(),
            pix_b: f.pix_b.into_iter().map(Vector2::from).collect(),
            visible_a: f.visible_a,
            visible_b: f.visible_b,
            image_size_a: (f.image_size_a[0], f.image_size_a[1]),
            image_size_b: (f.image_size_b[0], f.image_size_b[1]),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FileError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(FileError::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FileError> {
        let f: SceneFile = read_json(path.as_ref())?;
        Self::from_file(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{essential_from_pose, normalize_pixel};

    #[test]
    fn deterministic_given_seed() {
        let cfg = SceneConfig::default();
        let a = synth_scene(&cfg, 11).unwrap();
        let b = synth_scene(&cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a, synth_scene(&cfg, 12).unwrap());
    }

    #[test]
    fn too_few_points() {
        let cfg = SceneConfig {
            num_points: 4,
            ..SceneConfig::default()
        };
        let err = synth_scene(&cfg, 0).unwrap_err();
        assert_eq!(err, GeomError::TooFewPoints(4));
        assert!(err.to_string().contains("need ≥ 8 co-visible points"));
    }

    #[test]
    fn infeasible_when_separation_impossible() {
        let cfg = SceneConfig {
            num_points: 50,
            image_size: (8, 8),
            min_separation_px: 4.0,
            ..SceneConfig::default()
        };
        assert_eq!(
            synth_scene(&cfg, 0).unwrap_err(),
            GeomError::InfeasibleScene(MAX_POSE_ATTEMPTS)
        );
    }

    #[test]
    fn invariants_hold() {
        let cfg = SceneConfig {
            num_points: 60,
            num_exclusive: 10,
            ..SceneConfig::default()
        };
        for seed in 0..10 {
            let s = synth_scene(&cfg, seed).unwrap();
            assert!(s.pose.translation.norm() > 1e-6);
            assert_eq!(s.covisible().len(), 60);
            assert_eq!(s.points.len(), 70);
            let e = essential_from_pose(&s.pose).unwrap();
            for i in 0..s.points.len() {
                let (w, h) = s.image_size_a;
                if s.visible_a[i] {
                    assert!(s.pix_a[i].x >= 0.0 && s.pix_a[i].x < w as f64);
                    assert!(s.pix_a[i].y >= 0.0 && s.pix_a[i].y < h as f64);
                }
                if s.visible_b[i] {
                    assert!(s.pix_b[i].x >= 0.0 && s.pix_b[i].x < w as f64);
                    assert!(s.pix_b[i].y >= 0.0 && s.pix_b[i].y < h as f64);
                }
                if s.visible_a[i] && s.visible_b[i] {
                    assert!(s.points[i].z > 0.0);
                    assert!(s.pose.transform(&s.points[i]).z > 0.0);
                    let a = normalize_pixel(&s.pix_a[i], &s.intrinsics_a);
                    let b = normalize_pixel(&s.pix_b[i], &s.intrinsics_b);
                    assert!(e.residual(&a, &b).abs() < 1e-9);
                }
            }
            assert_eq!(s.visible_a.iter().filter(|v| !**v).count(), 5);
            assert_eq!(s.visible_b.iter().filter(|v| !**v).count(), 5);
        }
    }

    #[test]
    fn json_round_trip() {
        let s = synth_scene(&SceneConfig::default(), 3).unwrap();
        let back = ScenePair::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.to_json(), back.to_json());
    }

    #[test]
    fn json_field_order() {
        let s = synth_scene(&SceneConfig::default(), 3).unwrap();
        let text = s.to_json();
        let keys = [
            "intrinsics_a",
            "intrinsics_b",
            "rotation",
            "translation",
            "points",
            "pix_a",
            "pix_b",
            "visible_a",
            "visible_b",
            "image_size_a",
            "image_size_b",
        ];
        let positions: Vec<usize> = keys
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }
}
