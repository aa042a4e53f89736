//! Depth rendering from point maps, training-time perturbation and
//! mirroring, and the synthetic scene used in place of recorded data.

pub mod io;
mod scene;

use rand::Rng as _;

pub use scene::{
    generate_synthetic_scene, sample_camera_poses, BoxObject, Pole, SceneModel, SceneSpec,
    TrajectorySpec,
};

use crate::error::{Error, Result};
use crate::geometry::{project_point, quaternion, transform_points, CameraIntrinsics, Pose7D};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// A point cloud in the global frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointMap {
    pub points: Vec<[f32; 3]>,
    /// Per-point reflectance; carried through I/O, never rendered.
    pub reflectance: Option<Vec<f32>>,
}

impl PointMap {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        let map = PointMap {
            points,
            reflectance: None,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn with_reflectance(points: Vec<[f32; 3]>, reflectance: Vec<f32>) -> Result<Self> {
        let map = PointMap {
            points,
            reflectance: Some(reflectance),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::invalid(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        if let Some(r) = &self.reflectance {
            if r.len() != self.points.len() {
                return Err(Error::invalid(format!(
                    "{} reflectance values for {} points",
                    r.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points mapped through `H(pose)`, rounded back to `f32`.
    pub fn transformed(&self, pose: &Pose7D) -> PointMap {
        PointMap {
            points: transform_points(&self.points, pose)
                .into_iter()
                .map(|p| p.map(|v| v as f32))
                .collect(),
            reflectance: self.reflectance.clone(),
        }
    }
}

/// Per-pixel depth in meters; 0 marks "no return".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn empty(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }

    /// Left-right flip.
    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        data.chunks_exact_mut(self.width).for_each(<[f32]>::reverse);
        DepthImage { data, ..*self }
    }

    /// `[H, W, 1]` tensor in raw meters.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, 1],
            self.data.iter().map(|&d| T::lit(f64::from(d))).collect(),
        )
        .expect("image dimensions are positive")
    }
}

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        let row = self.width * 3;
        for line in data.chunks_exact_mut(row) {
            for x in 0..self.width / 2 {
                let (a, b) = (x * 3, (self.width - 1 - x) * 3);
                for c in 0..3 {
                    line.swap(a + c, b + c);
                }
            }
        }
        RgbImage { data, ..*self }
    }

    /// `[H, W, 3]` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let s = 1.0 / 255.0;
        Tensor::new(
            vec![self.height, self.width, 3],
            self.data
                .iter()
                .map(|&v| T::lit(f64::from(v) * s))
                .collect(),
        )
        .expect("image dimensions are positive")
    }
}

/// Occlusion handling for [`render_depth_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Side of the square neighbourhood searched for nearer surfaces; 0 or 1
    /// disables the mask.
    pub occlusion_window: usize,
    /// A pixel deeper than the nearest return in its window by more than
    /// this many meters is treated as occluded and cleared.
    pub occlusion_margin: f32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            occlusion_window: 5,
            occlusion_margin: 0.5,
        }
    }
}

/// Depth image of `map` seen from `pose`, with the default occlusion mask.
pub fn render_depth(map: &PointMap, pose: &Pose7D, k: &CameraIntrinsics) -> Result<DepthImage> {
    render_depth_with(map, pose, k, &RenderOptions::default())
}

pub fn render_depth_with(
    map: &PointMap,
    pose: &Pose7D,
    k: &CameraIntrinsics,
    opts: &RenderOptions,
) -> Result<DepthImage> {
    if map.is_empty() {
        return Err(Error::invalid("cannot render an empty point map"));
    }
    let mut zbuf = DepthImage::empty(k.width, k.height);
    let h = pose.to_homogeneous();
    for p in &map.points {
        let pv = h.apply(p.map(f64::from));
        if let Some(proj) = project_point(pv, k) {
            let (x, y) = proj.pixel();
            let slot = &mut zbuf.data[y * k.width + x];
            let z = proj.depth as f32;
            if *slot == 0.0 || z < *slot {
                *slot = z;
            }
        }
    }
    if opts.occlusion_window <= 1 {
        return Ok(zbuf);
    }
    Ok(occlusion_mask(&zbuf, opts))
}

fn occlusion_mask(zbuf: &DepthImage, opts: &RenderOptions) -> DepthImage {
    let (w, h) = (zbuf.width, zbuf.height);
    let r = opts.occlusion_window / 2;
    // Separable minimum over nonzero depths: rows first, then columns.
    let nz_min = |a: f32, b: f32| match (a > 0.0, b > 0.0) {
        (true, true) => a.min(b),
        (true, false) => a,
        _ => b,
    };
    let mut rows = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).fold(0.0, |m, xx| nz_min(m, zbuf.data[y * w + xx]));
        }
    }
    let mut out = zbuf.clone();
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let d = zbuf.data[y * w + x];
            if d == 0.0 {
                continue;
            }
            let local = (lo..=hi).fold(0.0, |m, yy| nz_min(m, rows[yy * w + x]));
            if d > local + opts.occlusion_margin {
                out.data[y * w + x] = 0.0;
            }
        }
    }
    out
}

/// Bounds of the uniformly sampled training perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationRange {
    /// Meters, per axis.
    pub max_translation: f64,
    /// Degrees, per Euler angle.
    pub max_rotation_deg: f64,
}

impl PerturbationRange {
    pub fn new(max_translation: f64, max_rotation_deg: f64) -> Result<Self> {
        if !(max_translation >= 0.0 && max_rotation_deg >= 0.0) {
            return Err(Error::invalid(format!(
                "perturbation bounds must be non-negative, got {max_translation} m / {max_rotation_deg} deg"
            )));
        }
        Ok(PerturbationRange {
            max_translation,
            max_rotation_deg,
        })
    }

    pub fn scaled_translation(&self, factor: f64) -> Self {
        PerturbationRange {
            max_translation: self.max_translation * factor,
            ..*self
        }
    }
}

fn symmetric(rng: &mut Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Translation uniform per axis; rotation from three Euler angles drawn
/// uniformly (roll about x, pitch about y, yaw about z of the camera frame).
pub fn sample_perturbation(range: &PerturbationRange, rng: &mut Rng) -> Pose7D {
    let t = [0; 3].map(|_| symmetric(rng, range.max_translation));
    let max_r = range.max_rotation_deg.to_radians();
    let [a, b, c] = [0; 3].map(|_| symmetric(rng, max_r));
    Pose7D {
        t,
        q: quaternion::from_euler(a, b, c),
    }
}

/// Flips image and depth left-right and adjusts the principal point and the
/// relative-pose target so that the mirrored pair still regresses to it.
///
/// Mirroring is the reflection `S = diag(-1, 1, 1)` of the camera frame; the
/// target becomes `S·H·S`, which negates `tx`, `qy` and `qz`.
pub fn mirror_horizontal(
    image: &RgbImage,
    depth: &DepthImage,
    target: &Pose7D,
    k: &CameraIntrinsics,
) -> Result<(RgbImage, DepthImage, Pose7D, CameraIntrinsics)> {
    if (image.width, image.height) != (depth.width, depth.height) {
        return Err(Error::shape(
            "mirror_horizontal",
            format!(
                "image {}x{} vs depth {}x{}",
                image.width, image.height, depth.width, depth.height
            ),
        ));
    }
    let mirrored_target = Pose7D {
        t: [-target.t[0], target.t[1], target.t[2]],
        q: [target.q[0], target.q[1], -target.q[2], -target.q[3]],
    };
    let k = CameraIntrinsics {
        cx: k.width as f64 - 1.0 - k.cx,
        ..*k
    };
    Ok((image.flipped(), depth.flipped(), mirrored_target, k))
}
