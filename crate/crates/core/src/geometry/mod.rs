//! Rigid-body poses, quaternion algebra and pinhole projection.
//!
//! Conventions used throughout the crate:
//!
//! - quaternions are `[qw, qx, qy, qz]`, canonicalized to `qw >= 0`;
//! - a pose maps world points into the camera frame, `X_c = R·X_w + t`;
//! - the camera frame is x right, y down, z forward.

mod diff;
pub mod quaternion;

pub use diff::quaternion_distance_tensor;
pub use quaternion::Quat;

use crate::error::{Error, Result};

/// Points closer than this along the optical axis are not projected.
pub const Z_NEAR: f64 = 0.05;

const UNIT_TOLERANCE: f64 = 1e-6;
const ORTHONORMAL_TOLERANCE: f64 = 1e-4;

/// Translation plus unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose7D {
    /// Meters.
    pub t: [f64; 3],
    /// `[qw, qx, qy, qz]`.
    pub q: Quat,
}

impl Default for Pose7D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose7D {
    pub const IDENTITY: Pose7D = Pose7D {
        t: [0.0; 3],
        q: quaternion::IDENTITY,
    };

    /// Normalizes and canonicalizes `q`. Zero or non-finite input is rejected.
    pub fn new(t: [f64; 3], q: Quat) -> Result<Self> {
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("non-finite translation {t:?}")));
        }
        let q = quaternion::normalize(&q)
            .ok_or_else(|| Error::invalid(format!("degenerate quaternion {q:?}")))?;
        Ok(Pose7D {
            t,
            q: quaternion::canonical(&q),
        })
    }

    /// `[tx, ty, tz, qw, qx, qy, qz]`.
    pub fn from_vector(v: [f64; 7]) -> Result<Self> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]])
    }

    pub fn to_vector(&self) -> [f64; 7] {
        [
            self.t[0], self.t[1], self.t[2], self.q[0], self.q[1], self.q[2], self.q[3],
        ]
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        quaternion::to_matrix(&self.q)
    }

    /// Homogeneous matrix without the unit-norm check; the quaternion is
    /// renormalized first.
    pub fn to_homogeneous(&self) -> HomogeneousTransform {
        let q = quaternion::normalize(&self.q).unwrap_or(quaternion::IDENTITY);
        HomogeneousTransform::from_parts(&quaternion::to_matrix(&q), self.t)
    }

    /// The pose of `H(self)⁻¹`.
    pub fn inverse(&self) -> Pose7D {
        rigid_to_pose(&self.to_homogeneous().rigid_inverse())
    }

    /// Camera center in the world frame, `-Rᵀ·t`.
    pub fn camera_center(&self) -> [f64; 3] {
        self.inverse().t
    }

    pub fn translation_norm(&self) -> f64 {
        self.t.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Full rotation angle in radians, `2·atan2(|v|, |w|)`.
    pub fn rotation_angle(&self) -> f64 {
        2.0 * quaternion::half_angle(&self.q)
    }
}

/// 4×4 rigid transform with last row `[0, 0, 0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousTransform {
    m: [[f64; 4]; 4],
}

impl HomogeneousTransform {
    pub const IDENTITY: HomogeneousTransform = HomogeneousTransform {
        m: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    };

    /// Accepts any matrix whose last row is exactly `[0, 0, 0, 1]`; the
    /// rotation block is validated when converting back to a pose.
    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!(
                "last row must be [0, 0, 0, 1], got {:?}",
                m[3]
            )));
        }
        if !m.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite transform entry"));
        }
        Ok(HomogeneousTransform { m })
    }

    pub fn from_parts(r: &[[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut m = Self::IDENTITY.m;
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        HomogeneousTransform { m }
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        [0, 1, 2].map(|i| [self.m[i][0], self.m[i][1], self.m[i][2]])
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    /// Matrix product `self · rhs`.
    pub fn compose(&self, rhs: &HomogeneousTransform) -> HomogeneousTransform {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        HomogeneousTransform { m }
    }

    /// Inverse assuming an orthonormal rotation block: `[Rᵀ, -Rᵀt]`.
    pub fn rigid_inverse(&self) -> HomogeneousTransform {
        let r = self.rotation();
        let t = self.translation();
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let ti = [0, 1, 2].map(|i| -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]));
        Self::from_parts(&rt, ti)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2]
            .map(|i| self.m[i][0] * p[0] + self.m[i][1] * p[1] + self.m[i][2] * p[2] + self.m[i][3])
    }

    /// Largest deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn determinant3(&self) -> f64 {
        let r = self.rotation();
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }
}

fn rigid_to_pose(m: &HomogeneousTransform) -> Pose7D {
    Pose7D {
        t: m.translation(),
        q: quaternion::from_matrix(&m.rotation()),
    }
}

/// `H(p)`: the homogeneous matrix of a pose with unit quaternion.
pub fn pose_to_homogeneous(p: &Pose7D) -> Result<HomogeneousTransform> {
    let n = quaternion::norm(&p.q);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!(
            "quaternion norm {n} is not 1; normalize first"
        )));
    }
    Ok(HomogeneousTransform::from_parts(
        &quaternion::to_matrix(&p.q),
        p.t,
    ))
}

/// Pose of a rigid transform, with canonical quaternion.
pub fn homogeneous_to_pose(m: &HomogeneousTransform) -> Result<Pose7D> {
    let err = m.orthonormality_error();
    if err > ORTHONORMAL_TOLERANCE || m.determinant3() <= 0.0 {
        return Err(Error::invalid(format!(
            "rotation block is not a proper rotation (orthonormality error {err:.3e}, det {:.3})",
            m.determinant3()
        )));
    }
    Ok(rigid_to_pose(m))
}

/// Anything with three coordinates.
pub trait Point3 {
    fn xyz(&self) -> [f64; 3];
}

impl Point3 for [f64; 3] {
    fn xyz(&self) -> [f64; 3] {
        *self
    }
}

impl Point3 for [f32; 3] {
    fn xyz(&self) -> [f64; 3] {
        self.map(f64::from)
    }
}

/// World points expressed in the frame of pose `p`: `H(p)·[P_w; 1]`.
pub fn transform_points<P: Point3>(points: &[P], p: &Pose7D) -> Vec<[f64; 3]> {
    let h = p.to_homogeneous();
    points.iter().map(|pt| h.apply(pt.xyz())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid camera intrinsics {self:?}"
            )))
        }
    }

    /// Square-pixel camera with the given horizontal field of view and the
    /// principal point at the image center, `((W-1)/2, (H-1)/2)` in pixel
    /// coordinates, so that mirroring leaves the intrinsics unchanged.
    pub fn with_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Result<Self> {
        let f = (width as f64 / 2.0) / (horizontal_fov_deg.to_radians() / 2.0).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }
}

/// Image-plane position and depth of a camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Pixel whose unit square (centered on integer coordinates) contains
    /// the projection.
    pub fn pixel(&self) -> (usize, usize) {
        (
            (self.u + 0.5).floor() as usize,
            (self.v + 0.5).floor() as usize,
        )
    }
}

/// Pinhole projection; `None` behind the near plane or outside the image.
pub fn project_point(pv: [f64; 3], k: &CameraIntrinsics) -> Option<Projection> {
    let [x, y, z] = pv;
    // also rejects NaN
    if z.is_nan() || z <= Z_NEAR {
        return None;
    }
    let u = k.fx * x / z + k.cx;
    let v = k.fy * y / z + k.cy;
    let inside = |c: f64, n: usize| c >= -0.5 && c < n as f64 - 0.5;
    (inside(u, k.width) && inside(v, k.height)).then_some(Projection { u, v, depth: z })
}

/// Camera-frame point at image position `(u, v)` with known depth.
pub fn unproject(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> [f64; 3] {
    [(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth]
}

/// Absolute pose after applying a predicted relative pose:
/// pose of `H(delta) · H(p0)`.
pub fn compose_refined_pose(p0: &Pose7D, delta: &Pose7D) -> Pose7D {
    rigid_to_pose(&delta.to_homogeneous().compose(&p0.to_homogeneous()))
}

/// Relative pose taking `from` to `to`, i.e. the `delta` with
/// `compose_refined_pose(from, delta) == to`.
pub fn relative_pose(from: &Pose7D, to: &Pose7D) -> Pose7D {
    rigid_to_pose(
        &to.to_homogeneous()
            .compose(&from.to_homogeneous().rigid_inverse()),
    )
}

/// `Π(q̂ · q⁻¹)` with `Π(q) = atan2(√(qx²+qy²+qz²), |qw|)`: half the angle of
/// the rotation between `q` and `qhat`, in `[0, π/2]`.
pub fn quaternion_distance(q: &Quat, qhat: &Quat) -> f64 {
    quaternion::half_angle(&quaternion::mul(qhat, &quaternion::inverse(q)))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};

    use proptest::prelude::*;

    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn same_rotation(a: &Quat, b: &Quat, tol: f64) -> bool {
        approx(a, b, tol) || approx(a, &b.map(|v| -v), tol)
    }

    fn arb_pose() -> impl Strategy<Value = Pose7D> {
        (
            prop::array::uniform3(-10.0f64..10.0),
            prop::array::uniform4(-1.0f64..1.0)
                .prop_filter("non-degenerate", |q| quaternion::norm(q) > 0.1),
        )
            .prop_map(|(t, q)| Pose7D::new(t, q).unwrap())
    }

    #[test]
    fn identity_pose_is_identity_matrix() {
        let h = pose_to_homogeneous(&Pose7D::IDENTITY).unwrap();
        assert_eq!(h, HomogeneousTransform::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = Pose7D {
            t: [0.0; 3],
            q: [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2],
        };
        let y = pose_to_homogeneous(&p).unwrap().apply([1.0, 0.0, 0.0]);
        assert!(approx(&y, &[0.0, 1.0, 0.0], 1e-15));
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let p = Pose7D {
            t: [0.0; 3],
            q: [2.0, 0.0, 0.0, 0.0],
        };
        assert!(pose_to_homogeneous(&p).is_err());
    }

    #[test]
    fn half_turn_about_x_from_matrix() {
        let m = HomogeneousTransform::from_matrix([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let p = homogeneous_to_pose(&m).unwrap();
        assert!(approx(&p.q, &[0.0, 1.0, 0.0, 0.0], 1e-15));
        assert_eq!(
            homogeneous_to_pose(&HomogeneousTransform::IDENTITY).unwrap(),
            Pose7D::IDENTITY
        );
    }

    #[test]
    fn improper_matrices_rejected() {
        let scaled = HomogeneousTransform::from_parts(
            &[[1.1, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        );
        assert!(homogeneous_to_pose(&scaled).is_err());
        let reflect = HomogeneousTransform::from_parts(
            &[[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        );
        assert!(homogeneous_to_pose(&reflect).is_err());
        let mut bad = HomogeneousTransform::IDENTITY.m;
        bad[3][0] = 1e-3;
        assert!(HomogeneousTransform::from_matrix(bad).is_err());
    }

    #[test]
    fn transform_points_examples() {
        let pts = [[1.0f64, 2.0, 3.0], [0.0, 0.0, 5.0]];
        assert_eq!(transform_points(&pts, &Pose7D::IDENTITY), pts.to_vec());
        let p = Pose7D::new([0.0, 0.0, -5.0], quaternion::IDENTITY).unwrap();
        assert_eq!(transform_points(&pts[1..], &p), vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        assert_eq!(
            project_point([0.0, 0.0, 5.0], &k),
            Some(Projection {
                u: 64.0,
                v: 64.0,
                depth: 5.0
            })
        );
        let p = project_point([1.0, 0.0, 5.0], &k).unwrap();
        assert_eq!((p.u, p.v, p.depth), (84.0, 64.0, 5.0));
        assert_eq!(project_point([0.0, 0.0, -1.0], &k), None);
        assert_eq!(project_point([0.0, 0.0, 0.01], &k), None);
        assert_eq!(project_point([100.0, 0.0, 5.0], &k), None);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.5, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn quaternion_distance_reference_values() {
        let id = quaternion::IDENTITY;
        assert_eq!(quaternion_distance(&id, &id), 0.0);
        assert_eq!(quaternion_distance(&id, &[0.0, 1.0, 0.0, 0.0]), FRAC_PI_2);
        let z90 = [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2];
        assert!((quaternion_distance(&id, &z90) - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn compose_with_identity() {
        let p = Pose7D::new([1.0, -2.0, 0.5], [0.9, 0.1, -0.3, 0.2]).unwrap();
        let a = compose_refined_pose(&p, &Pose7D::IDENTITY);
        let b = compose_refined_pose(&Pose7D::IDENTITY, &p);
        assert!(approx(&a.to_vector(), &p.to_vector(), 1e-12));
        assert!(approx(&b.to_vector(), &p.to_vector(), 1e-12));
    }

    fn explicit_product(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    m[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        m
    }

    proptest! {
        #[test]
        fn pose_matrix_round_trip(p in arb_pose()) {
            let back = homogeneous_to_pose(&pose_to_homogeneous(&p).unwrap()).unwrap();
            prop_assert!(approx(&back.t, &p.t, 1e-9));
            prop_assert!(same_rotation(&back.q, &p.q, 1e-9));
            prop_assert!(back.q[0] >= 0.0);
        }

        #[test]
        fn matrix_pose_round_trip(p in arb_pose()) {
            let h = pose_to_homogeneous(&p).unwrap();
            let h2 = pose_to_homogeneous(&homogeneous_to_pose(&h).unwrap()).unwrap();
            prop_assert!(approx(h.matrix().as_flattened(), h2.matrix().as_flattened(), 1e-9));
        }

        #[test]
        fn transform_matches_matrix_oracle(p in arb_pose(), pt in prop::array::uniform3(-50.0f64..50.0)) {
            let m = pose_to_homogeneous(&p).unwrap();
            let m = m.matrix();
            let hom = [pt[0], pt[1], pt[2], 1.0];
            let expect: Vec<f64> = (0..3).map(|i| (0..4).map(|k| m[i][k] * hom[k]).sum()).collect();
            let got = transform_points(&[pt], &p)[0];
            prop_assert!(approx(&got, &expect, 1e-12));
        }

        #[test]
        fn compose_matches_matrix_oracle(p0 in arb_pose(), d in arb_pose()) {
            let expect = explicit_product(pose_to_homogeneous(&d).unwrap().matrix(), pose_to_homogeneous(&p0).unwrap().matrix());
            let expect = homogeneous_to_pose(&HomogeneousTransform::from_matrix(expect).unwrap()).unwrap();
            let got = compose_refined_pose(&p0, &d);
            prop_assert!(approx(&got.t, &expect.t, 1e-9));
            prop_assert!(same_rotation(&got.q, &expect.q, 1e-9));
        }

        #[test]
        fn compose_then_undo(p in arb_pose(), d in arb_pose()) {
            let back = compose_refined_pose(&compose_refined_pose(&p, &d), &d.inverse());
            prop_assert!(approx(&back.t, &p.t, 1e-9));
            prop_assert!(same_rotation(&back.q, &p.q, 1e-9));
        }

        #[test]
        fn relative_pose_recovers_target(a in arb_pose(), b in arb_pose()) {
            let got = compose_refined_pose(&a, &relative_pose(&a, &b));
            prop_assert!(approx(&got.t, &b.t, 1e-9));
            prop_assert!(same_rotation(&got.q, &b.q, 1e-9));
        }

        #[test]
        fn distance_is_double_cover_invariant_and_symmetric(a in arb_pose(), b in arb_pose()) {
            let d = quaternion_distance(&a.q, &b.q);
            prop_assert!((d - quaternion_distance(&a.q, &b.q.map(|v| -v))).abs() < 1e-12);
            prop_assert!((d - quaternion_distance(&b.q, &a.q)).abs() < 1e-12);
            prop_assert!((0.0..=FRAC_PI_2 + 1e-15).contains(&d));
            prop_assert!(quaternion_distance(&a.q, &a.q) < 1e-7);
        }

        #[test]
        fn unproject_inverts_projection(
            x in -3.0f64..3.0, y in -2.0f64..2.0, z in 1.0f64..40.0,
        ) {
            let k = CameraIntrinsics::new(110.0, 110.0, 96.0, 64.0, 192, 128).unwrap();
            if let Some(p) = project_point([x, y, z], &k) {
                let back = unproject(p.u, p.v, p.depth, &k);
                prop_assert!(approx(&back, &[x, y, z], 1e-9));
            }
        }
    }
}
