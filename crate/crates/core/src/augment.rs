//! Two-view generation: Gaussian jitter on points and colours, plus the
//! geometric and multi-view augmentations used in the ablations.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::geom::{self, Vec3};
use crate::rng;
use crate::scene::{project, Camera, RgbdImage, Scene};

/// Minimum number of shared points between two multi-view renders.
pub const MIN_MULTI_VIEW_CORR: usize = 32;
/// Camera resampling attempts before multi-view generation gives up.
pub const MULTI_VIEW_ATTEMPTS: usize = 16;

/// Augmentations composed on top of jitter. Names match the ablation columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Extra {
    Rotation,
    Scaling,
    Translation,
    Flip,
    MultiView,
}

impl Extra {
    pub fn name(self) -> &'static str {
        match self {
            Extra::Rotation => "rot",
            Extra::Scaling => "scal",
            Extra::Translation => "trans",
            Extra::Flip => "flip",
            Extra::MultiView => "mvr",
        }
    }
}

/// Jitter is always applied; `extras` lists what is composed on top of it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AugmentMode {
    pub extras: Vec<Extra>,
}

impl AugmentMode {
    pub fn jitter_only() -> Self {
        Self::default()
    }

    pub fn with(extras: &[Extra]) -> Self {
        let mut extras = extras.to_vec();
        extras.sort();
        extras.dedup();
        Self { extras }
    }

    pub fn has(&self, e: Extra) -> bool {
        self.extras.contains(&e)
    }
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.extras.is_empty() {
            return f.write_str("jitter");
        }
        let names: Vec<_> = self.extras.iter().map(|e| e.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for AugmentMode {
    type Err = Error;

    /// Accepts `jitter`, or `+`-joined extras such as `rot+scal` (a leading
    /// `jitter+` is allowed and ignored).
    fn from_str(s: &str) -> Result<Self> {
        let mut extras = Vec::new();
        for tok in s.split('+').map(str::trim) {
            let e = match tok {
                "jitter" => continue,
                "rot" => Extra::Rotation,
                "scal" => Extra::Scaling,
                "trans" => Extra::Translation,
                "flip" => Extra::Flip,
                "mvr" => Extra::MultiView,
                other => return Err(config_err(format!("unknown augmentation '{other}'"))),
            };
            extras.push(e);
        }
        Ok(Self::with(&extras))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub sigma_xyz: f64,
    pub sigma_rgb: f64,
    pub mode: AugmentMode,
    /// Rotation about z is drawn from `[-rot_range, rot_range]` radians.
    pub rot_range: f64,
    /// Scale factor is drawn from `[1 - scale_range, 1 + scale_range]`.
    pub scale_range: f64,
    /// Per-axis translation drawn from `[-trans_range, trans_range]` metres.
    pub trans_range: f64,
    /// Render size used for both views.
    pub image_size: usize,
}

impl AugmentConfig {
    pub fn for_extent(extent: f64) -> Self {
        Self {
            sigma_xyz: 0.02 * extent,
            sigma_rgb: 0.05,
            mode: AugmentMode::jitter_only(),
            rot_range: std::f64::consts::PI,
            scale_range: 0.2,
            trans_range: 0.2 * extent,
            image_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma_xyz, "sigma_xyz")?;
        check_sigma(self.sigma_rgb, "sigma_rgb")?;
        for (v, name) in [
            (self.rot_range, "rot_range"),
            (self.scale_range, "scale_range"),
            (self.trans_range, "trans_range"),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(format!("{name} must be finite and >= 0")));
            }
        }
        if self.scale_range >= 1.0 {
            return Err(config_err("scale_range must be < 1"));
        }
        if self.image_size < 8 {
            return Err(config_err("image_size must be at least 8"));
        }
        Ok(())
    }
}

fn check_sigma(s: f64, name: &str) -> Result<()> {
    if !s.is_finite() || s < 0.0 {
        return Err(config_err(format!("{name} must be finite and >= 0, got {s}")));
    }
    Ok(())
}

/// Adds independent Gaussian noise to every coordinate and colour channel;
/// colours are clamped back into `[0, 1]`. Indices and labels are untouched.
pub fn jitter(scene: &Scene, sigma_xyz: f64, sigma_rgb: f64, seed: u64) -> Result<Scene> {
    check_sigma(sigma_xyz, "sigma_xyz")?;
    check_sigma(sigma_rgb, "sigma_rgb")?;
    let mut out = scene.clone();
    let mut rng = rng::stream(seed, 0x717);
    if sigma_xyz > 0.0 {
        let n = Normal::new(0.0, sigma_xyz).unwrap();
        for p in &mut out.points {
            for c in p.iter_mut() {
                *c += n.sample(&mut rng);
            }
        }
        out.extent = out.extent.max(max_abs(&out.points));
    }
    if sigma_rgb > 0.0 {
        let n = Normal::new(0.0, sigma_rgb).unwrap();
        for col in &mut out.colors {
            for c in col.iter_mut() {
                *c = (*c + n.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn max_abs(points: &[Vec3]) -> f64 {
    points.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, c| m.max(c.abs()))
}

/// One augmented version of a scene with its render.
///
/// For the rigid/scaling modes the image is rendered before the geometric
/// transform is applied to `scene.points`, so the 2D branch sees the same
/// picture while the 3D coordinates move.
#[derive(Debug, Clone)]
pub struct View {
    pub scene: Scene,
    pub image: RgbdImage,
    pub camera: Camera,
    /// Pixel index of every point, `None` when not visible.
    pub pixel_of: Vec<Option<usize>>,
    /// Extent of the source scene, used to normalise encoder inputs.
    pub base_extent: f64,
}

impl View {
    fn new(scene: Scene, camera: Camera, base_extent: f64) -> Self {
        let image = project(&scene, &camera);
        let pixel_of = image.pixel_of_points(scene.len());
        Self {
            scene,
            image,
            camera,
            pixel_of,
            base_extent,
        }
    }
}

/// Clean (unaugmented) render of a scene from the evaluation viewpoint.
pub fn canonical_view(scene: &Scene, image_size: usize) -> View {
    View::new(scene.clone(), Camera::canonical(scene.extent, image_size), scene.extent)
}

/// Correspondence between two views as (view-1 index, view-2 index) pairs.
pub type Correspondence = Vec<(usize, usize)>;

/// Points visible in both renders, paired with themselves.
fn shared_visible(a: &View, b: &View) -> Correspondence {
    a.pixel_of
        .iter()
        .zip(&b.pixel_of)
        .enumerate()
        .filter(|(_, (pa, pb))| pa.is_some() && pb.is_some())
        .map(|(i, _)| (i, i))
        .collect()
}

pub fn make_views(scene: &Scene, cfg: &AugmentConfig, seed: u64) -> Result<(View, View, Correspondence)> {
    cfg.validate()?;
    let base = scene.extent;
    let s1 = jitter(scene, cfg.sigma_xyz, cfg.sigma_rgb, rng::derive(seed, 1))?;
    let mut s2 = jitter(scene, cfg.sigma_xyz, cfg.sigma_rgb, rng::derive(seed, 2))?;
    let mut cam_rng = rng::stream(seed, 3);

    let (v1, v2, corr) = if cfg.mode.has(Extra::MultiView) {
        let mut best = 0;
        let mut found = None;
        for _ in 0..MULTI_VIEW_ATTEMPTS {
            let c1 = Camera::random(&mut cam_rng, base, cfg.image_size);
            let c2 = Camera::random(&mut cam_rng, base, cfg.image_size);
            let v1 = View::new(s1.clone(), c1, base);
            let v2 = View::new(s2.clone(), c2, base);
            let corr = shared_visible(&v1, &v2);
            best = best.max(corr.len());
            if corr.len() >= MIN_MULTI_VIEW_CORR {
                found = Some((v1, v2, corr));
                break;
            }
        }
        found.ok_or(Error::TooFewCorrespondences {
            found: best,
            needed: MIN_MULTI_VIEW_CORR,
            attempts: MULTI_VIEW_ATTEMPTS,
        })?
    } else {
        let cam = Camera::random(&mut cam_rng, base, cfg.image_size);
        let v1 = View::new(s1, cam.clone(), base);
        let v2_img = View::new(s2.clone(), cam, base);
        apply_geometric(&mut s2, cfg, rng::derive(seed, 4));
        let v2 = View { scene: s2, ..v2_img };
        let corr = shared_visible(&v1, &v2);
        (v1, v2, corr)
    };
    Ok((v1, v2, corr))
}

/// Applies the configured rotation, scaling, translation and flip, in that
/// order, to every point.
fn apply_geometric(scene: &mut Scene, cfg: &AugmentConfig, seed: u64) {
    let mut rng = rng::stream(seed, 0x6E0);
    let mode = &cfg.mode;
    if mode.has(Extra::Rotation) {
        let theta = sample_sym(&mut rng, cfg.rot_range);
        let r = geom::rot_z(theta);
        for p in &mut scene.points {
            *p = geom::mat_vec(&r, *p);
        }
    }
    if mode.has(Extra::Scaling) {
        let s = 1.0 + sample_sym(&mut rng, cfg.scale_range);
        for p in &mut scene.points {
            *p = geom::scale(*p, s);
        }
    }
    if mode.has(Extra::Translation) {
        let t: Vec3 = std::array::from_fn(|_| sample_sym(&mut rng, cfg.trans_range));
        for p in &mut scene.points {
            *p = geom::add(*p, t);
        }
    }
    if mode.has(Extra::Flip) && rng.random_bool(0.5) {
        for p in &mut scene.points {
            p[0] = -p[0];
        }
    }
    scene.extent = scene.extent.max(max_abs(&scene.points));
}

fn sample_sym(rng: &mut rng::Rng, range: f64) -> f64 {
    if range > 0.0 {
        rng.random_range(-range..=range)
    } else {
        0.0
    }
}
