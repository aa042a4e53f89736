//! Procedural street-like scene: a ground square, yawed boxes and vertical
//! poles around a circular road. The same primitives are sampled into a
//! point map and ray-cast into shaded RGB, so every image/depth pair shares
//! real geometry.

use std::f64::consts::PI;

use rand::Rng as _;

use super::{PointMap, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{quaternion, CameraIntrinsics, Pose7D};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// The ground square spans `[-e, e]²` at `z = 0`.
    pub ground_half_extent: f64,
    pub ground_spacing: f64,
    /// Grid spacing for box faces and pole mantles.
    pub surface_spacing: f64,
    /// Building blocks, split between the two sides of the road.
    pub boxes: usize,
    pub poles: usize,
    /// Radius of the circular road the cameras drive along.
    pub path_radius: f64,
    /// Half the distance between the two rows of buildings.
    pub corridor_half_width: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            ground_half_extent: 32.0,
            ground_spacing: 0.1,
            surface_spacing: 0.06,
            boxes: 28,
            poles: 40,
            path_radius: 16.0,
            corridor_half_width: 4.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.boxes + self.poles == 0 {
            return Err(Error::invalid("scene needs at least one box or pole"));
        }
        let positive = [
            self.ground_half_extent,
            self.ground_spacing,
            self.surface_spacing,
            self.path_radius,
            self.corridor_half_width,
        ];
        if !positive.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::invalid(
                "scene extents and spacings must be positive",
            ));
        }
        // the deepest outer block reaches 7.5 m past the corridor; inner blocks must not cross the centre
        if self.path_radius + self.corridor_half_width + 7.5 > self.ground_half_extent
            || self.path_radius - self.corridor_half_width < 7.5
        {
            return Err(Error::invalid(format!(
                "road of radius {} does not fit on ground of half extent {}",
                self.path_radius, self.ground_half_extent
            )));
        }
        Ok(())
    }
}

/// Points along a segment of length `len` at spacing `s`, both ends included.
fn grid_count(len: f64, s: f64) -> usize {
    (len / s - 1e-9).ceil().max(0.0) as usize + 1
}

fn grid(len: f64, s: f64) -> impl Iterator<Item = f64> {
    let n = grid_count(len, s);
    (0..n).map(move |i| {
        if n == 1 {
            0.0
        } else {
            len * i as f64 / (n - 1) as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxObject {
    /// Footprint centre on the ground.
    pub center: [f64; 2],
    pub half_size: [f64; 2],
    pub height: f64,
    pub yaw: f64,
    pub albedo: [f64; 3],
}

impl BoxObject {
    /// Number of map points [`BoxObject::sample`] produces.
    pub fn surface_sample_count(&self, s: f64) -> usize {
        let nx = grid_count(2.0 * self.half_size[0], s);
        let ny = grid_count(2.0 * self.half_size[1], s);
        let nz = grid_count(self.height, s);
        2 * nx * nz + 2 * ny * nz + nx * ny
    }

    fn to_world(&self, l: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * l[0] - s * l[1],
            self.center[1] + s * l[0] + c * l[1],
            l[2],
        ]
    }

    fn to_local(&self, p: [f64; 3], is_direction: bool) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (x, y) = if is_direction {
            (p[0], p[1])
        } else {
            (p[0] - self.center[0], p[1] - self.center[1])
        };
        [c * x + s * y, -s * x + c * y, p[2]]
    }

    /// Four side faces and the roof on a regular grid.
    pub fn sample(&self, s: f64, out: &mut Vec<[f32; 3]>) {
        let [hx, hy] = self.half_size;
        let h = self.height;
        let mut push = |l: [f64; 3]| out.push(self.to_world(l).map(|v| v as f32));
        for fx in [-hx, hx] {
            for a in grid(2.0 * hy, s) {
                for z in grid(h, s) {
                    push([fx, a - hy, z]);
                }
            }
        }
        for fy in [-hy, hy] {
            for a in grid(2.0 * hx, s) {
                for z in grid(h, s) {
                    push([a - hx, fy, z]);
                }
            }
        }
        for a in grid(2.0 * hx, s) {
            for b in grid(2.0 * hy, s) {
                push([a - hx, b - hy, h]);
            }
        }
    }

    /// Slab test in the box frame; returns distance and world normal.
    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let lo_ = self.to_local(o, false);
        let ld = self.to_local(d, true);
        let lo = [-self.half_size[0], -self.half_size[1], 0.0];
        let hi = [self.half_size[0], self.half_size[1], self.height];
        let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut axis = 0;
        for i in 0..3 {
            if ld[i].abs() < 1e-15 {
                if lo_[i] < lo[i] || lo_[i] > hi[i] {
                    return None;
                }
                continue;
            }
            let (mut t0, mut t1) = ((lo[i] - lo_[i]) / ld[i], (hi[i] - lo_[i]) / ld[i]);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            if t0 > tmin {
                tmin = t0;
                axis = i;
            }
            tmax = tmax.min(t1);
        }
        if tmin > tmax || tmin <= 1e-9 {
            return None;
        }
        let mut n = [0.0; 3];
        n[axis] = -ld[axis].signum();
        let (s, c) = self.yaw.sin_cos();
        Some((tmin, [c * n[0] - s * n[1], s * n[0] + c * n[1], n[2]]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pole {
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
    pub albedo: [f64; 3],
}

impl Pole {
    pub fn surface_sample_count(&self, s: f64) -> usize {
        self.ring_count(s) * grid_count(self.height, s)
    }

    fn ring_count(&self, s: f64) -> usize {
        ((2.0 * PI * self.radius / s).ceil() as usize).max(8)
    }

    /// The mantle only; caps are too small to matter.
    pub fn sample(&self, s: f64, out: &mut Vec<[f32; 3]>) {
        let n = self.ring_count(s);
        for i in 0..n {
            let (sa, ca) = (2.0 * PI * i as f64 / n as f64).sin_cos();
            for z in grid(self.height, s) {
                out.push([
                    (self.center[0] + self.radius * ca) as f32,
                    (self.center[1] + self.radius * sa) as f32,
                    z as f32,
                ]);
            }
        }
    }

    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let (px, py) = (o[0] - self.center[0], o[1] - self.center[1]);
        let a = d[0] * d[0] + d[1] * d[1];
        let mut best: Option<(f64, [f64; 3])> = None;
        if a > 1e-15 {
            let b = 2.0 * (px * d[0] + py * d[1]);
            let c = px * px + py * py - self.radius * self.radius;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let t = (-b - disc.sqrt()) / (2.0 * a);
                let z = o[2] + t * d[2];
                if t > 1e-9 && (0.0..=self.height).contains(&z) {
                    let n = [
                        (px + t * d[0]) / self.radius,
                        (py + t * d[1]) / self.radius,
                        0.0,
                    ];
                    best = Some((t, n));
                }
            }
        }
        if d[2] < 0.0 && o[2] > self.height {
            let t = (self.height - o[2]) / d[2];
            let (x, y) = (px + t * d[0], py + t * d[1]);
            if x * x + y * y <= self.radius * self.radius && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, [0.0, 0.0, 1.0]));
            }
        }
        best
    }
}

const LIGHT: [f64; 3] = [0.45, 0.6, 0.66];
const AMBIENT: f64 = 0.35;
const SKY: [u8; 3] = [150, 190, 235];
const GROUND_ALBEDO: [f64; 3] = [0.45, 0.45, 0.42];

/// Ray-casting renderer for the primitives a map was sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub spec: SceneSpec,
    pub boxes: Vec<BoxObject>,
    pub poles: Vec<Pole>,
}

impl SceneModel {
    /// Point map of all primitives: ground grid first, then boxes, then poles.
    pub fn point_map(&self) -> PointMap {
        let s = self.spec.surface_spacing;
        let e = self.spec.ground_half_extent;
        let mut pts = Vec::new();
        for x in grid(2.0 * e, self.spec.ground_spacing) {
            for y in grid(2.0 * e, self.spec.ground_spacing) {
                pts.push([(x - e) as f32, (y - e) as f32, 0.0]);
            }
        }
        for b in &self.boxes {
            b.sample(s, &mut pts);
        }
        for p in &self.poles {
            p.sample(s, &mut pts);
        }
        PointMap {
            points: pts,
            reflectance: None,
        }
    }

    pub fn ground_sample_count(&self) -> usize {
        grid_count(2.0 * self.spec.ground_half_extent, self.spec.ground_spacing).pow(2)
    }

    pub fn render_rgb(&self, pose: &Pose7D, k: &CameraIntrinsics) -> RgbImage {
        self.render_labeled(pose, k).0
    }

    /// RGB plus, per pixel, the primitive hit by the centre ray: `0` for the
    /// ground, `1..` for boxes then poles, `None` for sky.
    pub fn render_labeled(
        &self,
        pose: &Pose7D,
        k: &CameraIntrinsics,
    ) -> (RgbImage, Vec<Option<u32>>) {
        let r = pose.rotation();
        let o = pose.camera_center();
        let l_norm = LIGHT.iter().map(|v| v * v).sum::<f64>().sqrt();
        let light = LIGHT.map(|v| v / l_norm);
        let mut img = RgbImage::new(k.width, k.height);
        let mut labels = vec![None; k.width * k.height];
        for y in 0..k.height {
            for x in 0..k.width {
                let dc = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
                // world direction Rᵀ·dc; the hit distance is then camera depth
                let d = [0, 1, 2].map(|j| r[0][j] * dc[0] + r[1][j] * dc[1] + r[2][j] * dc[2]);
                let hit = self.cast(o, d);
                let rgb = match hit {
                    None => SKY,
                    Some((_, n, label)) => {
                        let albedo = self.albedo(label);
                        let lambert =
                            (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                        let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                        albedo.map(|a| (a * shade * 255.0).round().clamp(0.0, 255.0) as u8)
                    }
                };
                img.set_pixel(x, y, rgb);
                labels[y * k.width + x] = hit.map(|h| h.2);
            }
        }
        (img, labels)
    }

    fn albedo(&self, label: u32) -> [f64; 3] {
        let i = label as usize;
        if i == 0 {
            GROUND_ALBEDO
        } else if i <= self.boxes.len() {
            self.boxes[i - 1].albedo
        } else {
            self.poles[i - 1 - self.boxes.len()].albedo
        }
    }

    fn cast(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3], u32)> {
        let mut best: Option<(f64, [f64; 3], u32)> = None;
        let mut offer = |t: f64, n: [f64; 3], label: u32| {
            if best.is_none_or(|b| t < b.0) {
                best = Some((t, n, label));
            }
        };
        if d[2] < 0.0 && o[2] > 0.0 {
            let t = -o[2] / d[2];
            let e = self.spec.ground_half_extent;
            let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
            if x.abs() <= e && y.abs() <= e {
                offer(t, [0.0, 0.0, 1.0], 0);
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some((t, n)) = b.intersect(o, d) {
                offer(t, n, 1 + i as u32);
            }
        }
        let base = 1 + self.boxes.len() as u32;
        for (j, p) in self.poles.iter().enumerate() {
            if let Some((t, n)) = p.intersect(o, d) {
                offer(t, n, base + j as u32);
            }
        }
        best
    }
}

fn random_albedo(rng: &mut Rng) -> [f64; 3] {
    // Saturated hue at random brightness, so neighbouring objects differ.
    let hue = rng.random_range(0.0..6.0f64);
    let v = rng.random_range(0.55..1.0);
    let s = rng.random_range(0.3..0.8);
    let f = hue.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match hue as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn polar(r: f64, a: f64) -> [f64; 2] {
    [r * a.cos(), r * a.sin()]
}

/// Point map plus the renderer that shades the same geometry.
///
/// Buildings stand in two rows along the road, one block per equal slice of
/// the circle, each with its own gap, setback, depth and height. Poles stand
/// on the strip between the road and the buildings.
pub fn generate_synthetic_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<(PointMap, SceneModel)> {
    spec.validate()?;
    let outer = spec.boxes / 2;
    let inner = spec.boxes - outer;
    let mut boxes = Vec::with_capacity(spec.boxes);
    for (side, count) in [(-1.0, inner), (1.0, outer)] {
        for i in 0..count {
            let slot = 2.0 * PI / count as f64;
            let fill = rng.random_range(0.65..0.9);
            let angle = slot * (i as f64 + rng.random_range(0.0..1.0 - fill) + fill / 2.0);
            let setback = rng.random_range(0.0..1.5);
            let depth = rng.random_range(3.0..6.0);
            let height = rng.random_range(3.0..10.0);
            let albedo = random_albedo(rng);
            // the street-facing face sits at the setback; the arc becomes a chord
            let face = spec.path_radius + side * (spec.corridor_half_width + setback);
            let r = face + side * depth / 2.0;
            let half_len = (face * slot * fill / 2.0).clamp(0.5, 10.0);
            boxes.push(BoxObject {
                center: polar(r, angle),
                half_size: [half_len, depth / 2.0],
                height,
                yaw: angle + PI / 2.0,
                albedo,
            });
        }
    }
    let poles = (0..spec.poles)
        .map(|_| {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let offset = spec.corridor_half_width - rng.random_range(0.2..0.8);
            let angle = rng.random_range(0.0..2.0 * PI);
            Pole {
                center: polar(spec.path_radius + side * offset, angle),
                radius: rng.random_range(0.08..0.25),
                height: rng.random_range(3.0..7.0),
                albedo: random_albedo(rng),
            }
        })
        .collect();
    let model = SceneModel {
        spec: spec.clone(),
        boxes,
        poles,
    };
    Ok((model.point_map(), model))
}

/// How camera poses are spread along the road.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub height: f64,
    pub height_jitter: f64,
    /// Lateral offset from the road centre line, meters.
    pub lateral_jitter: f64,
    pub yaw_jitter_deg: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            height: 1.6,
            height_jitter: 0.1,
            lateral_jitter: 1.0,
            yaw_jitter_deg: 8.0,
        }
    }
}

/// `n` camera poses on the road, heading along it in either direction.
pub fn sample_camera_poses(
    spec: &SceneSpec,
    traj: &TrajectorySpec,
    n: usize,
    rng: &mut Rng,
) -> Vec<Pose7D> {
    let sym = |rng: &mut Rng, b: f64| {
        if b > 0.0 {
            rng.random_range(-b..=b)
        } else {
            0.0
        }
    };
    (0..n)
        .map(|_| {
            let a = rng.random_range(0.0..2.0 * PI);
            let r = spec.path_radius + sym(rng, traj.lateral_jitter);
            let z = traj.height + sym(rng, traj.height_jitter);
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let h = a + dir * PI / 2.0 + sym(rng, traj.yaw_jitter_deg.to_radians());
            let c = [r * a.cos(), r * a.sin(), z];
            let (sh, ch) = h.sin_cos();
            // rows: camera x (right), y (down), z (forward) in world coordinates
            let rot = [[sh, -ch, 0.0], [0.0, 0.0, -1.0], [ch, sh, 0.0]];
            let t = [0, 1, 2].map(|i| -(rot[i][0] * c[0] + rot[i][1] * c[1] + rot[i][2] * c[2]));
            Pose7D {
                t,
                q: quaternion::from_matrix(&rot),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maprender::render_depth;
    use crate::rng::seeded;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            ground_half_extent: 24.0,
            ground_spacing: 0.25,
            surface_spacing: 0.1,
            boxes: 12,
            poles: 10,
            path_radius: 12.0,
            ..Default::default()
        }
    }

    #[test]
    fn one_box_point_count() {
        let spec = SceneSpec {
            boxes: 1,
            poles: 0,
            ..small_spec()
        };
        let (map, model) = generate_synthetic_scene(&spec, &mut seeded(3)).unwrap();
        let b = &model.boxes[0];
        assert_eq!(
            map.len(),
            b.surface_sample_count(spec.surface_spacing) + model.ground_sample_count()
        );
        // ground count by hand: 48 m at 0.25 m is 193 samples per axis
        assert_eq!(model.ground_sample_count(), 193 * 193);
    }

    #[test]
    fn degenerate_spec_rejected() {
        let spec = SceneSpec {
            boxes: 0,
            poles: 0,
            ..Default::default()
        };
        assert!(generate_synthetic_scene(&spec, &mut seeded(0)).is_err());
        let spec = SceneSpec {
            ground_spacing: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic_scene(&spec, &mut seeded(0)).is_err());
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_synthetic_scene(&small_spec(), &mut seeded(11)).unwrap();
        let b = generate_synthetic_scene(&small_spec(), &mut seeded(11)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&small_spec(), &mut seeded(12)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn camera_pose_looks_along_heading() {
        let spec = small_spec();
        let poses = sample_camera_poses(&spec, &TrajectorySpec::default(), 20, &mut seeded(2));
        for p in poses {
            let c = p.camera_center();
            assert!((c[2] - 1.6).abs() <= 0.1 + 1e-12);
            let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
            assert!((r - spec.path_radius).abs() <= 1.0 + 1e-9);
            // gravity points down the image
            let down = p.rotation()[1];
            assert!((down[2] + 1.0).abs() < 1e-12);
            let hz = p.to_homogeneous();
            let ahead = hz.apply(c);
            assert!(ahead.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn depth_silhouettes_inside_shaded_pixels() {
        let spec = small_spec();
        let mut rng = seeded(21);
        let (map, model) = generate_synthetic_scene(&spec, &mut rng).unwrap();
        let k = CameraIntrinsics::with_fov(192, 128, 80.0).unwrap();
        for pose in sample_camera_poses(&spec, &TrajectorySpec::default(), 4, &mut rng) {
            let depth = render_depth(&map, &pose, &k).unwrap();
            let (_, labels) = model.render_labeled(&pose, &k);
            let (w, h) = (k.width, k.height);
            let mut violations = 0;
            for y in 0..h {
                for x in 0..w {
                    if depth.get(x, y) <= 0.0 {
                        continue;
                    }
                    // a projected sample may sit up to half a pixel off the
                    // centre ray, so allow a one-pixel neighbourhood
                    let shaded = (y.saturating_sub(1)..=(y + 1).min(h - 1)).any(|yy| {
                        (x.saturating_sub(1)..=(x + 1).min(w - 1))
                            .any(|xx| labels[yy * w + xx].is_some())
                    });
                    if !shaded {
                        violations += 1;
                    }
                }
            }
            assert_eq!(violations, 0);
            assert!(depth.valid_count() > 500);
        }
    }

    #[test]
    fn raycast_depth_matches_rendered_depth() {
        // Where a depth pixel and its neighbours all see the same box face,
        // the ray-cast distance and the rendered point depth agree closely.
        let spec = small_spec();
        let mut rng = seeded(8);
        let (map, model) = generate_synthetic_scene(&spec, &mut rng).unwrap();
        let k = CameraIntrinsics::with_fov(192, 128, 80.0).unwrap();
        let pose = sample_camera_poses(&spec, &TrajectorySpec::default(), 1, &mut rng)[0];
        let depth = render_depth(&map, &pose, &k).unwrap();
        let o = pose.camera_center();
        let r = pose.rotation();
        let mut checked = 0;
        for y in 1..k.height - 1 {
            for x in 1..k.width - 1 {
                let dv = f64::from(depth.get(x, y));
                if dv <= 0.0 {
                    continue;
                }
                let dc = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
                let d = [0, 1, 2].map(|j| r[0][j] * dc[0] + r[1][j] * dc[1] + r[2][j] * dc[2]);
                if let Some((t, _, _)) = model.cast(o, d) {
                    if (t - dv).abs() < 0.05 * dv {
                        checked += 1;
                    }
                }
            }
        }
        assert!(
            checked as f64 > 0.8 * depth.valid_count() as f64,
            "{checked} of {}",
            depth.valid_count()
        );
    }
}
