//! Seeded synthetic scenes: a teacher Gaussian set rendered from cameras on a sphere.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::heads::GaussianPrimitive;
use crate::image::Image;
use crate::render::{project_gaussian, render, RasterSettings};

pub const MIN_IMAGE_SIDE: usize = 16;
pub const FIELD_OF_VIEW_DEG: f64 = 50.0;
/// Camera distance from the centroid in units of the bounds' half-diagonal.
pub const CAMERA_DISTANCE_FACTOR: f64 = 2.0;
pub const MAX_ELEVATION_DEG: f64 = 35.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub teacher_gaussians: usize,
    pub bound_min: [f64; 3],
    pub bound_max: [f64; 3],
    /// Total camera count; the last `test_cameras` picked are held out.
    pub cameras: usize,
    pub test_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub voxel_size: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            teacher_gaussians: 80,
            bound_min: [-1.0; 3],
            bound_max: [1.0; 3],
            cameras: 12,
            test_cameras: 2,
            width: 64,
            height: 64,
            voxel_size: 0.25,
        }
    }
}

const KEYS: [&str; 9] = [
    "seed",
    "teacher_gaussians",
    "bound_min",
    "bound_max",
    "cameras",
    "test_cameras",
    "width",
    "height",
    "voxel_size",
];

fn parse_vec3(value: &str, line: usize) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("line {line}: expected three numbers, got '{value}'")));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| Error::Config(format!("line {line}: '{p}' is not a number")))?;
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value '{value}' for {key}")))
}

impl SceneSpec {
    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SceneSpec::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => spec.seed = parse_num(key, value, line)?,
                "teacher_gaussians" => spec.teacher_gaussians = parse_num(key, value, line)?,
                "bound_min" => spec.bound_min = parse_vec3(value, line)?,
                "bound_max" => spec.bound_max = parse_vec3(value, line)?,
                "cameras" => spec.cameras = parse_num(key, value, line)?,
                "test_cameras" => spec.test_cameras = parse_num(key, value, line)?,
                "width" => spec.width = parse_num(key, value, line)?,
                "height" => spec.height = parse_num(key, value, line)?,
                "voxel_size" => spec.voxel_size = parse_num(key, value, line)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {line}: unknown key '{other}' (known: {})",
                        KEYS.join(", ")
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let v = |a: [f64; 3]| format!("{} {} {}", a[0], a[1], a[2]);
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "teacher_gaussians = {}", self.teacher_gaussians);
        let _ = writeln!(s, "bound_min = {}", v(self.bound_min));
        let _ = writeln!(s, "bound_max = {}", v(self.bound_max));
        let _ = writeln!(s, "cameras = {}", self.cameras);
        let _ = writeln!(s, "test_cameras = {}", self.test_cameras);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "voxel_size = {}", self.voxel_size);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_gaussians < 1 {
            return Err(Error::Config("teacher_gaussians must be at least 1".into()));
        }
        if self.test_cameras < 1 || self.cameras <= self.test_cameras {
            return Err(Error::Config(format!(
                "need at least one train and one test camera, got {} cameras with {} held out",
                self.cameras, self.test_cameras
            )));
        }
        if self.width < MIN_IMAGE_SIDE || self.height < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {}x{}",
                self.width, self.height
            )));
        }
        for axis in 0..3 {
            let (lo, hi) = (self.bound_min[axis], self.bound_max[axis]);
            if !lo.is_finite() || !hi.is_finite() || !(hi > lo) {
                return Err(Error::Config(format!("degenerate bounds on axis {axis}: [{lo}, {hi}]")));
            }
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::Config(format!("voxel_size must be positive, got {}", self.voxel_size)));
        }
        Ok(())
    }

    pub fn train_cameras(&self) -> usize {
        self.cameras - self.test_cameras
    }

    pub fn centroid(&self) -> Vector3<f64> {
        (Vector3::from(self.bound_min) + Vector3::from(self.bound_max)) * 0.5
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * FIELD_OF_VIEW_DEG.to_radians()).tan()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub teacher: Vec<GaussianPrimitive>,
    pub train: Vec<View>,
    pub test: Vec<View>,
    /// Teacher means; the anchor initialization input.
    pub init_points: Vec<[f64; 3]>,
}

impl Scene {
    /// Train views then test views.
    pub fn views(&self) -> impl Iterator<Item = &View> {
        self.train.iter().chain(&self.test)
    }

    pub fn view(&self, index: usize) -> Result<&View> {
        let total = self.train.len() + self.test.len();
        self.views()
            .nth(index)
            .ok_or_else(|| Error::InvalidInput(format!("view {index} out of range (scene has {total})")))
    }
}

fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return q.map(|v| v / n);
        }
    }
}

/// Indices of held-out cameras, spread evenly around the ring.
fn test_indices(total: usize, test: usize) -> Vec<usize> {
    (0..test)
        .map(|t| (((t as f64 + 0.5) * total as f64 / test as f64).floor() as usize).min(total - 1))
        .collect()
}

pub fn render_teacher(teacher: &[GaussianPrimitive], camera: &Camera) -> Image {
    let settings = RasterSettings::default();
    let splats: Vec<_> = teacher
        .iter()
        .filter_map(|g| project_gaussian(g, camera, &settings))
        .collect();
    render(&splats, camera, [0.0; 3], &settings)
}

pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lo = Vector3::from(spec.bound_min);
    let hi = Vector3::from(spec.bound_max);
    let extent = hi - lo;
    let mean_extent = extent.mean();

    let teacher: Vec<GaussianPrimitive> = (0..spec.teacher_gaussians)
        .map(|_| {
            let position = [
                rng.gen_range(lo.x..hi.x),
                rng.gen_range(lo.y..hi.y),
                rng.gen_range(lo.z..hi.z),
            ];
            let scale = std::array::from_fn(|_| rng.gen_range(0.03..0.12) * mean_extent);
            GaussianPrimitive {
                position,
                opacity: rng.gen_range(0.4..0.95),
                color: std::array::from_fn(|_| rng.gen_range(0.05..0.95)),
                scale,
                rotation: random_unit_quaternion(&mut rng),
            }
        })
        .collect();

    let center = spec.centroid();
    let radius = CAMERA_DISTANCE_FACTOR * 0.5 * extent.norm();
    let focal = spec.focal();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let mut cameras = Vec::with_capacity(spec.cameras);
    for j in 0..spec.cameras {
        let azimuth = std::f64::consts::TAU * (j as f64 + rng.gen_range(-0.25..0.25)) / spec.cameras as f64;
        let elevation = rng.gen_range(-MAX_ELEVATION_DEG..MAX_ELEVATION_DEG).to_radians();
        let eye = center
            + radius
                * Vector3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                );
        cameras.push(Camera::look_at(spec.width, spec.height, focal, eye, center, up)?);
    }

    let held_out = test_indices(spec.cameras, spec.test_cameras);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (j, camera) in cameras.into_iter().enumerate() {
        let image = render_teacher(&teacher, &camera);
        let view = View { camera, image };
        if held_out.contains(&j) {
            test.push(view);
        } else {
            train.push(view);
        }
    }
    let init_points = teacher.iter().map(|g| g.position).collect();
    Ok(Scene {
        spec: spec.clone(),
        teacher,
        train,
        test,
        init_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{psnr, PSNR_CAP};

    fn small() -> SceneSpec {
        SceneSpec {
            teacher_gaussians: 20,
            width: 24,
            height: 20,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_synthetic_scene(&small()).unwrap();
        let b = generate_synthetic_scene(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&SceneSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.teacher, c.teacher);
    }

    #[test]
    fn split_is_exact_and_disjoint() {
        let s = generate_synthetic_scene(&SceneSpec {
            cameras: 12,
            test_cameras: 2,
            ..small()
        })
        .unwrap();
        assert_eq!((s.train.len(), s.test.len()), (10, 2));
        for t in &s.test {
            assert!(s.train.iter().all(|v| v.camera != t.camera));
        }
        assert_eq!(test_indices(12, 2), vec![3, 9]);
    }

    #[test]
    fn teacher_against_itself_hits_the_cap() {
        let s = generate_synthetic_scene(&small()).unwrap();
        for v in s.views() {
            let again = render_teacher(&s.teacher, &v.camera);
            assert_eq!(psnr(&again, &v.image).unwrap(), PSNR_CAP);
        }
    }

    #[test]
    fn images_are_not_blank() {
        let s = generate_synthetic_scene(&SceneSpec::default()).unwrap();
        for v in s.views() {
            let mean = v.image.data().iter().sum::<f64>() / v.image.data().len() as f64;
            assert!(mean > 0.02, "mean intensity {mean}");
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = SceneSpec {
            seed: 7,
            bound_min: [-1.5, -1.0, -0.5],
            ..Default::default()
        };
        assert_eq!(SceneSpec::parse(&spec.to_text()).unwrap(), spec);
        let parsed = SceneSpec::parse("# comment\nseed = 3 # trailing\n\nwidth=32\n").unwrap();
        assert_eq!((parsed.seed, parsed.width, parsed.height), (3, 32, 64));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SceneSpec::parse("bound_min = 1 1 1\nbound_max = 1 2 2").is_err());
        assert!(SceneSpec::parse("width = 8").is_err());
        assert!(SceneSpec::parse("cameras = 2\ntest_cameras = 2").is_err());
        assert!(SceneSpec::parse("teacher_gaussians = 0").is_err());
        assert!(SceneSpec::parse("colour = red").is_err());
        assert!(SceneSpec::parse("seed").is_err());
        assert!(SceneSpec::parse("seed = x").is_err());
    }
}
