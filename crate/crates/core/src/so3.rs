//! Unit quaternions, rotation matrices and rotation vectors.
//!
//! Every rotation is stored as its canonical quaternion: the representative of
//! the pair `{q, -q}` with a non-negative real part. Components are always
//! ordered `(x, y, z, w)`.
//!
//! The convention for volumes on SO(3) used throughout the crate is that the
//! group has total volume `π²` (the area of the `q_w ≥ 0` half of the unit
//! 3-sphere), so the uniform density is `1 / π²`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Total volume of SO(3) under the hemisphere convention.
pub const SO3_VOLUME: f64 = PI * PI;

const NORM_TOLERANCE: f64 = 1e-9;
const ORTHONORMAL_TOLERANCE: f64 = 1e-8;
const ROTATION_VECTOR_THRESHOLD: f64 = 1e-12;

/// A unit quaternion `x i + y j + z k + w` with `w ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    x: f64,
    y: f64,
    z: f64,
    w: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        w: 1.0,
    };

    /// Normalizes `raw = [x, y, z, w]` and picks the hemisphere representative.
    ///
    /// When `w` is exactly zero the sign is chosen so the first nonzero
    /// imaginary component is positive.
    pub fn canonicalize(raw: [f64; 4]) -> Result<Self> {
        if raw.iter().any(|c| !c.is_finite()) {
            return Err(invalid(format!("non-finite quaternion {raw:?}")));
        }
        let norm = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(invalid("cannot canonicalize a zero quaternion"));
        }
        let [x, y, z, w] = raw.map(|c| c / norm);
        Ok(Self::pick_hemisphere(x, y, z, w))
    }

    fn pick_hemisphere(x: f64, y: f64, z: f64, w: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else {
            [x, y, z]
                .into_iter()
                .find(|c| *c != 0.0)
                .is_some_and(|c| c < 0.0)
        };
        if flip {
            Self {
                x: -x,
                y: -y,
                z: -z,
                w: -w,
            }
        } else {
            Self { x, y, z, w }
        }
    }

    /// Completes `(x, y, z)` inside the closed unit ball to a unit quaternion
    /// with `w = sqrt(1 - x² - y² - z²)`.
    ///
    /// The imaginary part is kept bit-for-bit, so the bins it falls in do not
    /// move.
    pub fn from_xyz(x: f64, y: f64, z: f64) -> Result<Self> {
        let sq = x * x + y * y + z * z;
        if !(sq <= 1.0 + NORM_TOLERANCE) {
            return Err(invalid(format!(
                "({x}, {y}, {z}) lies outside the unit ball"
            )));
        }
        let w = (1.0 - sq).max(0.0).sqrt();
        Ok(Self::pick_hemisphere(x, y, z, w))
    }

    /// Validates an already canonical quaternion without renormalizing it.
    pub fn try_from_canonical(c: [f64; 4]) -> Result<Self> {
        let norm_sq: f64 = c.iter().map(|v| v * v).sum();
        if !((norm_sq - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(invalid(format!("{c:?} is not unit norm")));
        }
        let q = Self::pick_hemisphere(c[0], c[1], c[2], c[3]);
        if q.components() != c {
            return Err(invalid(format!("{c:?} is not canonical")));
        }
        Ok(q)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    /// `[x, y, z, w]`.
    pub fn components(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }

    /// The three projected components modeled autoregressively.
    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z + self.w * other.w
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        quat_to_matrix(self)
    }

    pub fn to_rotation_vector(&self) -> RotationVector {
        quat_to_rotation_vector(self)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.w.clamp(-1.0, 1.0).acos()
    }
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = crate::Error;

    /// Exact canonical inputs keep their bits; anything else is canonicalized.
    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::try_from_canonical(c).or_else(|_| Self::canonicalize(c))
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        q.components()
    }
}

/// Free-function form of [`UnitQuaternion::canonicalize`].
pub fn canonicalize(raw: [f64; 4]) -> Result<UnitQuaternion> {
    UnitQuaternion::canonicalize(raw)
}

/// A proper rotation matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix([f64; 9]);

impl RotationMatrix {
    /// Checks `RᵀR = I` and `det R = 1` to within `1e-8`.
    pub fn try_new(m: [f64; 9]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("rotation matrix has non-finite entries"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[3 * k + i] * m[3 * k + j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHONORMAL_TOLERANCE {
                    return Err(invalid(format!(
                        "matrix is not orthonormal: (RᵀR)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6]);
        if (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(invalid(format!("matrix determinant is {det}, expected 1")));
        }
        Ok(Self(m))
    }

    pub fn as_array(&self) -> &[f64; 9] {
        &self.0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[3 * row + col]
    }

    pub fn to_quaternion(&self) -> UnitQuaternion {
        // Entries are valid by construction.
        matrix_to_quat_unchecked(&self.0)
    }
}

/// A rotation vector `θ e` with `θ ∈ [0, π]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationVector(pub [f64; 3]);

impl RotationVector {
    pub fn angle(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn quat_to_matrix(q: &UnitQuaternion) -> RotationMatrix {
    let UnitQuaternion { x, y, z, w } = *q;
    RotationMatrix([
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    ])
}

/// Converts a row-major matrix, validating it first.
pub fn matrix_to_quat(m: &[f64; 9]) -> Result<UnitQuaternion> {
    let r = RotationMatrix::try_new(*m)?;
    Ok(r.to_quaternion())
}

// Shepperd's method: branch on the largest of the four squared components.
fn matrix_to_quat_unchecked(m: &[f64; 9]) -> UnitQuaternion {
    let (m00, m01, m02) = (m[0], m[1], m[2]);
    let (m10, m11, m12) = (m[3], m[4], m[5]);
    let (m20, m21, m22) = (m[6], m[7], m[8]);
    let trace = m00 + m11 + m22;
    let raw = if trace > m00.max(m11).max(m22) {
        let s = 2.0 * (1.0 + trace).sqrt();
        [(m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s, 0.25 * s]
    } else if m00 >= m11 && m00 >= m22 {
        let s = 2.0 * (1.0 + m00 - m11 - m22).sqrt();
        [0.25 * s, (m01 + m10) / s, (m02 + m20) / s, (m21 - m12) / s]
    } else if m11 >= m22 {
        let s = 2.0 * (1.0 + m11 - m00 - m22).sqrt();
        [(m01 + m10) / s, 0.25 * s, (m12 + m21) / s, (m02 - m20) / s]
    } else {
        let s = 2.0 * (1.0 + m22 - m00 - m11).sqrt();
        [(m02 + m20) / s, (m12 + m21) / s, 0.25 * s, (m10 - m01) / s]
    };
    UnitQuaternion::canonicalize(raw).expect("rotation matrix yields a nonzero quaternion")
}

/// Angle of the relative rotation, `2 acos(min(1, |q1 · q2|))`, in radians.
pub fn geodesic_distance(q1: &UnitQuaternion, q2: &UnitQuaternion) -> f64 {
    2.0 * q1.dot(q2).abs().min(1.0).acos()
}

pub fn quat_to_rotation_vector(q: &UnitQuaternion) -> RotationVector {
    let theta = q.angle();
    if theta < ROTATION_VECTOR_THRESHOLD {
        return RotationVector([0.0; 3]);
    }
    let scale = theta / (theta / 2.0).sin();
    RotationVector([q.x * scale, q.y * scale, q.z * scale])
}

/// Haar-uniform rotation: a normalized 4D standard normal draw.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion {
    loop {
        let raw: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if let Ok(q) = UnitQuaternion::canonicalize(raw) {
            return q;
        }
    }
}
