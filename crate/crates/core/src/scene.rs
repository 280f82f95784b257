//! Synthetic RGB-D scenes with exact point-pixel correspondence.
//!
//! A scene is a labelled, coloured point set sampled from a handful of
//! geometric primitives. Every primitive is cut in two by a random plane and
//! each half is painted from one of two colour palettes, so a class is the
//! pair (shape kind, palette):
//!
//! - classes sharing a palette differ only in geometry,
//! - classes sharing a shape kind differ only in colour.
//!
//! A linear read-out therefore needs features that carry both modalities.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::rng;

/// Number of primitive shape kinds (plane, box, sphere, cylinder).
pub const SHAPE_KINDS: usize = 4;
/// Palettes per shape kind.
pub const PALETTES: usize = 2;
/// Class count of every generated scene.
pub const NUM_CLASSES: usize = SHAPE_KINDS * PALETTES;

// Bases differ by 0.2 in red and blue; shift plus point noise is about 0.08 per channel.
const PALETTE_BASE: [Vec3; PALETTES] = [[0.61, 0.48, 0.41], [0.41, 0.48, 0.61]];
const PALETTE_POINT_NOISE: f64 = 0.06;
const PALETTE_PRIMITIVE_SHIFT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Plane,
    Box,
    Sphere,
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; SHAPE_KINDS] =
        [ShapeKind::Plane, ShapeKind::Box, ShapeKind::Sphere, ShapeKind::Cylinder];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Class id of a (shape kind, palette) combination.
pub fn class_of(kind: ShapeKind, palette: usize) -> u32 {
    (kind.index() * PALETTES + palette) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub primitives: usize,
    pub points_per_primitive: usize,
    pub extent: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            primitives: 4,
            points_per_primitive: 256,
            extent: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.primitives < 2 {
            return Err(config_err(format!(
                "scene needs at least 2 primitives, got {}",
                self.primitives
            )));
        }
        if self.points_per_primitive < 16 {
            return Err(config_err(format!(
                "scene needs at least 16 points per primitive, got {}",
                self.points_per_primitive
            )));
        }
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return Err(config_err(format!("extent must be positive, got {}", self.extent)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub extent: f64,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the structural invariants; used after deserialisation and in tests.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n < 2 {
            return Err(config_err(format!("scene needs at least 2 points, got {n}")));
        }
        if self.colors.len() != n || self.labels.len() != n {
            return Err(config_err("points, colors and labels differ in length"));
        }
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return Err(config_err("extent must be positive"));
        }
        for p in &self.points {
            if p.iter().any(|c| !c.is_finite() || c.abs() > self.extent) {
                return Err(config_err(format!("point {p:?} outside the scene extent")));
            }
        }
        for c in &self.colors {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(config_err(format!("color {c:?} outside [0, 1]")));
            }
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(config_err(format!("label {l} >= class count {}", self.num_classes)));
        }
        Ok(())
    }
}

/// Generates a scene. Pure in `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, 0x5CE7E);
    let e = cfg.extent;
    let floor = -0.7 * e;

    // Shuffled round-robin over shape kinds so every kind shows up once the
    // scene has at least four primitives.
    let mut order = ShapeKind::ALL;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let point_noise = Normal::new(0.0, PALETTE_POINT_NOISE).unwrap();
    let shift_noise = Normal::new(0.0, PALETTE_PRIMITIVE_SHIFT).unwrap();

    let n = cfg.primitives * cfg.points_per_primitive;
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);

    for p in 0..cfg.primitives {
        let kind = order[p % SHAPE_KINDS];
        let size = e * rng.random_range(0.18..0.3);
        let cx = rng.random_range(-0.6..0.6) * e;
        let cy = rng.random_range(-0.6..0.6) * e;
        let (center, sampler): (Vec3, Box<dyn Fn(&mut rng::Rng) -> Vec3>) = match kind {
            ShapeKind::Plane => {
                let hx = size * rng.random_range(1.0..1.6);
                let hy = size * rng.random_range(1.0..1.6);
                let z = floor + rng.random_range(0.0..0.2) * e;
                (
                    [cx, cy, z],
                    Box::new(move |r: &mut rng::Rng| [r.random_range(-hx..hx), r.random_range(-hy..hy), 0.0]),
                )
            }
            ShapeKind::Box => {
                let half = [
                    size * rng.random_range(0.6..1.0),
                    size * rng.random_range(0.6..1.0),
                    size * rng.random_range(0.6..1.0),
                ];
                (
                    [cx, cy, floor + half[2]],
                    Box::new(move |r: &mut rng::Rng| sample_box_surface(r, half)),
                )
            }
            ShapeKind::Sphere => {
                let radius = size * 0.9;
                let z = floor + radius + rng.random_range(0.0..0.5) * e;
                (
                    [cx, cy, z],
                    Box::new(move |r: &mut rng::Rng| geom::scale(unit_sphere(r), radius)),
                )
            }
            ShapeKind::Cylinder => {
                let radius = size * 0.5;
                let half_h = size * 1.4;
                (
                    [cx, cy, floor + half_h],
                    Box::new(move |r: &mut rng::Rng| {
                        let a = r.random_range(0.0..std::f64::consts::TAU);
                        [radius * a.cos(), radius * a.sin(), r.random_range(-half_h..half_h)]
                    }),
                )
            }
        };

        let split = unit_sphere(&mut rng);
        let shifts: [Vec3; PALETTES] = std::array::from_fn(|_| {
            [
                shift_noise.sample(&mut rng),
                shift_noise.sample(&mut rng),
                shift_noise.sample(&mut rng),
            ]
        });
        for _ in 0..cfg.points_per_primitive {
            let local = sampler(&mut rng);
            let palette = usize::from(geom::dot(local, split) < 0.0);
            let base = geom::add(PALETTE_BASE[palette], shifts[palette]);
            let color = std::array::from_fn(|c| (base[c] + point_noise.sample(&mut rng)).clamp(0.0, 1.0));
            let pos = geom::add(center, local);
            points.push(std::array::from_fn(|c| pos[c].clamp(-e, e)));
            colors.push(color);
            labels.push(class_of(kind, palette));
        }
    }

    Ok(Scene {
        points,
        colors,
        labels,
        num_classes: NUM_CLASSES,
        extent: e,
    })
}

fn unit_sphere(rng: &mut rng::Rng) -> Vec3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2 = geom::dot(v, v);
        if n2 > 1e-6 && n2 <= 1.0 {
            return geom::scale(v, 1.0 / n2.sqrt());
        }
    }
}

fn sample_box_surface(rng: &mut rng::Rng, half: Vec3) -> Vec3 {
    let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (a, area) in areas.iter().enumerate() {
        if pick < *area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut p: Vec3 = std::array::from_fn(|c| rng.random_range(-half[c]..half[c]));
    p[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
    p
}

/// Pinhole camera. World points map to camera coordinates as `R·(p − t)`,
/// with x right, y down and z along the optical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(config_err("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(config_err("image size must be positive"));
        }
        let err = geom::orthonormality_error(&self.rotation);
        if err > 1e-9 {
            return Err(config_err(format!("rotation not orthonormal (error {err:e})")));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, world z up, 60° horizontal field of view.
    pub fn look_at(eye: Vec3, target: Vec3, width: usize, height: usize) -> Self {
        let forward = geom::normalize(geom::sub(target, eye));
        let mut right = geom::cross(forward, [0.0, 0.0, 1.0]);
        if geom::norm(right) < 1e-9 {
            right = [1.0, 0.0, 0.0];
        }
        let right = geom::normalize(right);
        let down = geom::normalize(geom::cross(forward, right));
        let f = (width as f64 / 2.0) / (std::f64::consts::PI / 6.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation: [right, down, forward],
            translation: eye,
            width,
            height,
        }
    }

    /// Orbit camera: distance 3·extent from a point near the origin.
    pub fn orbit(azimuth: f64, elevation: f64, extent: f64, target: Vec3, size: usize) -> Self {
        let r = 3.0 * extent;
        let eye = [
            target[0] + r * elevation.cos() * azimuth.cos(),
            target[1] + r * elevation.cos() * azimuth.sin(),
            target[2] + r * elevation.sin(),
        ];
        Self::look_at(eye, target, size, size)
    }

    pub fn random(rng: &mut rng::Rng, extent: f64, size: usize) -> Self {
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = rng.random_range(20f64.to_radians()..55f64.to_radians());
        let target = [
            rng.random_range(-0.1..0.1) * extent,
            rng.random_range(-0.1..0.1) * extent,
            rng.random_range(-0.1..0.1) * extent,
        ];
        Self::orbit(az, el, extent, target, size)
    }

    /// Fixed viewpoint used for evaluation renders.
    pub fn canonical(extent: f64, size: usize) -> Self {
        Self::orbit(0.7, 40f64.to_radians(), extent, [0.0; 3], size)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        geom::mat_vec(&self.rotation, geom::sub(p, self.translation))
    }
}

/// A rendered view. Pixels are row-major, index `v·width + u`.
///
/// Besides colour, depth and the point index, each occupied pixel stores the
/// exact continuous image coordinates of the splatted point, which lets
/// [`backproject`] invert the projection without quantisation error.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub corr: Vec<i64>,
    pub uv: Vec<[f64; 2]>,
}

impl RgbdImage {
    fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            rgb: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            corr: vec![-1; n],
            uv: vec![[0.0; 2]; n],
        }
    }

    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.corr
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= 0)
            .map(|(p, &c)| (p, c as usize))
    }

    /// Pixel of every point index, `None` when the point is not visible.
    pub fn pixel_of_points(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for (p, i) in self.occupied() {
            if i < n {
                out[i] = Some(p);
            }
        }
        out
    }
}

const NEAR_PLANE: f64 = 1e-9;

/// Splats every point in front of the camera to its nearest pixel; the
/// smallest depth wins and exact depth ties keep the lower point index.
pub fn project(scene: &Scene, cam: &Camera) -> RgbdImage {
    let mut img = RgbdImage::empty(cam.width, cam.height);
    for (i, (&p, &color)) in scene.points.iter().zip(&scene.colors).enumerate() {
        let pc = cam.to_camera(p);
        if pc[2] <= NEAR_PLANE {
            continue;
        }
        let u = cam.fx * pc[0] / pc[2] + cam.cx;
        let v = cam.fy * pc[1] / pc[2] + cam.cy;
        let (pu, pv) = (u.round(), v.round());
        if pu < 0.0 || pv < 0.0 || pu >= cam.width as f64 || pv >= cam.height as f64 {
            continue;
        }
        let pix = pv as usize * cam.width + pu as usize;
        if img.corr[pix] >= 0 && img.depth[pix] <= pc[2] {
            continue;
        }
        img.corr[pix] = i as i64;
        img.depth[pix] = pc[2];
        img.rgb[pix] = color;
        img.uv[pix] = [u, v];
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackprojectedPoint {
    pub pixel: usize,
    pub point_index: usize,
    pub position: Vec3,
}

/// Inverts the pinhole map for every occupied pixel using its stored depth.
pub fn backproject(img: &RgbdImage, cam: &Camera) -> Vec<BackprojectedPoint> {
    img.occupied()
        .map(|(pixel, point_index)| {
            let z = img.depth[pixel];
            let [u, v] = img.uv[pixel];
            let pc = [(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z];
            let position = geom::add(geom::mat_t_vec(&cam.rotation, pc), cam.translation);
            BackprojectedPoint {
                pixel,
                point_index,
                position,
            }
        })
        .collect()
}
