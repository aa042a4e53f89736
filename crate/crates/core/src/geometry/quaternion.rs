//! Quaternion helpers on `[w, x, y, z]` arrays.

pub type Quat = [f64; 4];

pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn norm(q: &Quat) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn normalize(q: &Quat) -> Option<Quat> {
    let n = norm(q);
    (n > 0.0 && n.is_finite()).then(|| q.map(|v| v / n))
}

/// Flips the sign so that `w >= 0`; `q` and `-q` are the same rotation.
pub fn canonical(q: &Quat) -> Quat {
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        *q
    }
}

pub fn conjugate(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Hamilton product `a ⊗ b`.
pub fn mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn inverse(q: &Quat) -> Quat {
    let n2: f64 = q.iter().map(|v| v * v).sum();
    conjugate(q).map(|v| v / n2)
}

/// Rotation matrix of a unit quaternion.
pub fn to_matrix(q: &Quat) -> [[f64; 3]; 3] {
    let [w, x, y, z] = *q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Quaternion of a rotation matrix (Shepperd's method), canonicalized.
pub fn from_matrix(r: &[[f64; 3]; 3]) -> Quat {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ]
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        ]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        ]
    };
    canonical(&normalize(&q).unwrap_or(IDENTITY))
}

/// Rotation `Rz(yaw) · Ry(pitch) · Rx(roll)` with angles in radians about
/// the frame's own x, y and z axes.
pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Quat {
    let (sr, cr) = (roll / 2.0).sin_cos();
    let (sp, cp) = (pitch / 2.0).sin_cos();
    let (sy, cy) = (yaw / 2.0).sin_cos();
    let qx = [cr, sr, 0.0, 0.0];
    let qy = [cp, 0.0, sp, 0.0];
    let qz = [cy, 0.0, 0.0, sy];
    canonical(&mul(&qz, &mul(&qy, &qx)))
}

/// Rotation by `angle` radians about a unit `axis`.
pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
    let (s, c) = (angle / 2.0).sin_cos();
    [c, axis[0] * s, axis[1] * s, axis[2] * s]
}

/// Half-angle measure `atan2(|v|, |w|)`, in `[0, π/2]`.
pub fn half_angle(q: &Quat) -> f64 {
    let v = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    v.atan2(q[0].abs())
}
