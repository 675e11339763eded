//! Rigid camera poses, their twist parameterization, pinhole rays, and pose
//! error evaluation.
//!
//! Conventions used throughout the crate:
//! - poses are camera-to-world, `x_world = R * x_cam + t`;
//! - cameras are right-handed, look along `-z`, with `+y` up and image rows
//!   growing downwards;
//! - image coordinates are continuous, so the center of integer pixel
//!   `(i, j)` sits at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation angles below this use Taylor series for the exp/log coefficients.
const SERIES_THRESHOLD: f64 = 0.2;

/// The logarithm is refused within this distance of a half turn.
pub const LOG_CHART_MARGIN: f64 = 1e-6;

/// Element of se(3): rotation part `omega` (axis-angle, radians) and
/// translation part `v`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Components ordered `(omega, v)`.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            omega: Vector3::new(a[0], a[1], a[2]),
            v: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// Camera center for a camera-to-world pose.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Row-major `[R | t]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        rows
    }

    /// Builds a transform from row-major `[R | t]`, rejecting rotations that
    /// are not orthonormal with determinant +1 within `tol`.
    pub fn from_rows(rows: &[[f64; 4]; 3], tol: f64) -> Result<Self> {
        let rotation = Matrix3::from_fn(|r, c| rows[r][c]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        let t = RigidTransform::new(rotation, translation);
        if !t.is_finite() {
            return Err(Error::invalid("pose has non-finite entries"));
        }
        let err = t.orthonormality_error();
        if err > tol {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (deviation {err:.3e})"
            )));
        }
        Ok(t)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|c| c.is_finite())
    }

    /// Max of `|RᵀR - I|` entries and `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let dev = gram.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        dev.max((self.rotation.determinant() - 1.0).abs())
    }

    /// Camera-to-world pose at `eye` looking at `target`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let back = eye - target;
        if back.norm() < 1e-12 {
            return Err(Error::invalid("look_at eye coincides with target"));
        }
        let z = back.normalize();
        let x = up.cross(&z);
        if x.norm() < 1e-9 {
            return Err(Error::invalid("look_at up vector is parallel to view axis"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Ok(Self::new(Matrix3::from_columns(&[x, y, z]), eye))
    }
}

/// Skew-symmetric cross-product matrix.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Coefficients of the closed-form exponential:
/// `a = sinθ/θ`, `b = (1-cosθ)/θ²`, `c = (θ-sinθ)/θ³`,
/// and their derivatives divided by θ.
#[derive(Debug, Clone, Copy)]
struct ExpCoefficients {
    a: f64,
    b: f64,
    c: f64,
    da: f64,
    db: f64,
    dc: f64,
}

impl ExpCoefficients {
    fn at(theta: f64) -> Self {
        let s = theta * theta;
        if theta < SERIES_THRESHOLD {
            let s2 = s * s;
            let s3 = s2 * s;
            let s4 = s3 * s;
            Self {
                a: 1.0 - s / 6.0 + s2 / 120.0 - s3 / 5040.0 + s4 / 362880.0,
                b: 0.5 - s / 24.0 + s2 / 720.0 - s3 / 40320.0 + s4 / 3628800.0,
                c: 1.0 / 6.0 - s / 120.0 + s2 / 5040.0 - s3 / 362880.0 + s4 / 39916800.0,
                da: -1.0 / 3.0 + s / 30.0 - s2 / 840.0 + s3 / 45360.0 - s4 / 3991680.0,
                db: -1.0 / 12.0 + s / 180.0 - s2 / 6720.0 + s3 / 453600.0 - s4 / 47900160.0,
                dc: -1.0 / 60.0 + s / 1260.0 - s2 / 60480.0 + s3 / 4989600.0
                    - s4 / 622702080.0,
            }
        } else {
            let (sin, cos) = theta.sin_cos();
            let half = (0.5 * theta).sin();
            let one_minus_cos = 2.0 * half * half;
            let t3 = s * theta;
            Self {
                a: sin / theta,
                b: one_minus_cos / s,
                c: (theta - sin) / t3,
                da: (theta * cos - sin) / t3,
                db: (theta * sin - 2.0 * one_minus_cos) / (s * s),
                dc: (theta * one_minus_cos - 3.0 * (theta - sin)) / (s * t3),
            }
        }
    }
}

/// Exponential map se(3) → SE(3).
pub fn se3_exp(t: &Twist) -> Result<RigidTransform> {
    if !t.is_finite() {
        return Err(Error::invalid("twist has non-finite components"));
    }
    let theta = t.omega.norm();
    let k = ExpCoefficients::at(theta);
    let w = hat(&t.omega);
    let w2 = w * w;
    let i = Matrix3::identity();
    let rotation = i + w * k.a + w2 * k.b;
    let left_jacobian = i + w * k.b + w2 * k.c;
    Ok(RigidTransform::new(rotation, left_jacobian * t.v))
}

/// Partial derivative of the exponential's `(R, t)` with respect to one twist
/// component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpDerivative {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Exponential map together with its six partial derivatives, ordered like
/// [`Twist::to_array`].
pub fn se3_exp_with_derivatives(t: &Twist) -> Result<(RigidTransform, [ExpDerivative; 6])> {
    let pose = se3_exp(t)?;
    let theta = t.omega.norm();
    let k = ExpCoefficients::at(theta);
    let w = hat(&t.omega);
    let w2 = w * w;
    let left_jacobian = Matrix3::identity() + w * k.b + w2 * k.c;
    let zero = ExpDerivative {
        rotation: Matrix3::zeros(),
        translation: Vector3::zeros(),
    };
    let mut out = [zero; 6];
    for axis in 0..3 {
        let wk = t.omega[axis];
        let e = hat(&Vector3::ith(axis, 1.0));
        let dw2 = e * w + w * e;
        let d_rot = w * (k.da * wk) + e * k.a + w2 * (k.db * wk) + dw2 * k.b;
        let d_jac = w * (k.db * wk) + e * k.b + w2 * (k.dc * wk) + dw2 * k.c;
        out[axis] = ExpDerivative {
            rotation: d_rot,
            translation: d_jac * t.v,
        };
        out[axis + 3] = ExpDerivative {
            rotation: Matrix3::zeros(),
            translation: left_jacobian.column(axis).into_owned(),
        };
    }
    Ok((pose, out))
}

/// Rotation angle of `r` in `[0, π]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = 0.5 * (r.trace() - 1.0);
    let sin = 0.5 * vee(&(r - r.transpose())).norm();
    sin.atan2(cos)
}

/// Logarithm SE(3) → se(3), inverse of [`se3_exp`] for rotation angles below
/// `π - LOG_CHART_MARGIN`.
pub fn se3_log(t: &RigidTransform) -> Result<Twist> {
    if !t.is_finite() {
        return Err(Error::invalid("transform has non-finite entries"));
    }
    let r = &t.rotation;
    let theta = rotation_angle(r);
    if theta >= std::f64::consts::PI - LOG_CHART_MARGIN {
        return Err(Error::ChartBoundary { angle: theta });
    }
    let s = theta * theta;
    // θ / sinθ
    let scale = if theta < SERIES_THRESHOLD {
        let s2 = s * s;
        1.0 + s / 6.0 + 7.0 * s2 / 360.0 + 31.0 * s2 * s / 15120.0 + 127.0 * s2 * s2 / 604800.0
    } else {
        theta / theta.sin()
    };
    let omega = vee(&(r - r.transpose())) * (0.5 * scale);
    let w = hat(&omega);
    let d = if theta < SERIES_THRESHOLD {
        let s2 = s * s;
        1.0 / 12.0 + s / 720.0 + s2 / 30240.0 + s2 * s / 1209600.0 + s2 * s2 / 47900160.0
    } else {
        let k = ExpCoefficients::at(theta);
        (1.0 - k.a / (2.0 * k.b)) / s
    };
    let inv_left_jacobian = Matrix3::identity() - w * 0.5 + w * w * d;
    Ok(Twist::new(omega, inv_left_jacobian * t.translation))
}

/// Rotation by `angle` radians about `axis` (need not be normalized).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.normalize();
    let w = hat(&n);
    Matrix3::identity() + w * angle.sin() + w * w * (1.0 - angle.cos())
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
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

    /// Centered principal point with the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous coordinate of the center of pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> (f64, f64) {
        (col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Unit camera-frame direction through continuous image point `(x, y)`.
    pub fn camera_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, -(y - self.cy) / self.fy, -1.0).normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, depth: f64) -> Vector3<f64> {
        self.origin + self.direction * depth
    }
}

/// World-space ray through continuous image point `px` of a camera at `pose`.
pub fn pixel_to_ray(
    k: &Intrinsics,
    pose: &RigidTransform,
    px: (f64, f64),
    near: f64,
    far: f64,
) -> Result<Ray> {
    let (x, y) = px;
    if !(x >= 0.0 && x <= k.width as f64 && y >= 0.0 && y <= k.height as f64) {
        return Err(Error::invalid(format!(
            "pixel ({x}, {y}) outside {}x{} image",
            k.width, k.height
        )));
    }
    if !(near > 0.0 && near < far) {
        return Err(Error::invalid(format!("need 0 < near < far, got {near}, {far}")));
    }
    Ok(Ray {
        origin: pose.center(),
        direction: pose.transform_vector(&k.camera_direction(x, y)),
        near,
        far,
    })
}

/// Mean residuals after similarity alignment of estimated poses onto truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation: f64,
}

/// Similarity `x ↦ scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity mapping `src` points onto `dst` (Umeyama).
pub fn align_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    let n = src.len();
    if n != dst.len() || n < 3 {
        return Err(Error::invalid(format!(
            "alignment needs equal point sets of at least 3, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let cs = s - mu_s;
        let cd = d - mu_d;
        cov += cd * cs.transpose();
        src_cov += cs * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    let spread = SVD::new(src_cov, false, false).singular_values;
    if spread[0] <= 0.0 || spread[1] <= 1e-9 * spread[0] {
        return Err(Error::AlignmentDegenerate(
            "camera centers are collinear or coincident".into(),
        ));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let sv = svd.singular_values;
    let trace = sv[0] * sign[(0, 0)] + sv[1] * sign[(1, 1)] + sv[2] * sign[(2, 2)];
    let scale = trace / var_s;
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Aligns `estimated` camera centers onto `truth` with a similarity, then
/// averages the per-camera rotation geodesic (degrees) and center distance.
pub fn pose_alignment_error(
    estimated: &[RigidTransform],
    truth: &[RigidTransform],
) -> Result<PoseError> {
    if estimated.len() != truth.len() || estimated.len() < 3 {
        return Err(Error::invalid(format!(
            "pose lists must have equal length >= 3, got {} and {}",
            estimated.len(),
            truth.len()
        )));
    }
    let src: Vec<_> = estimated.iter().map(|p| p.center()).collect();
    let dst: Vec<_> = truth.iter().map(|p| p.center()).collect();
    let sim = align_similarity(&src, &dst)?;
    Ok(alignment_residuals(&sim, estimated, truth))
}

/// Mean rotation (degrees) and center residuals of `estimated` mapped by
/// `sim` against `truth`.
pub fn alignment_residuals(
    sim: &Similarity,
    estimated: &[RigidTransform],
    truth: &[RigidTransform],
) -> PoseError {
    let n = estimated.len().max(1) as f64;
    let mut rot = 0.0;
    let mut trans = 0.0;
    for (e, t) in estimated.iter().zip(truth) {
        let aligned = sim.rotation * e.rotation;
        rot += rotation_angle(&(t.rotation.transpose() * aligned)).to_degrees();
        trans += (sim.apply_point(&e.center()) - t.center()).norm();
    }
    PoseError {
        rotation_deg: rot / n,
        translation: trans / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Matrix exponential of the 4x4 twist matrix by scaling and squaring a
    /// truncated Taylor series.
    fn expm4(t: &Twist) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&t.omega));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.v);
        let squarings = 10;
        let a = m / f64::from(1 << squarings);
        let mut term = nalgebra::Matrix4::identity();
        let mut sum = nalgebra::Matrix4::identity();
        for k in 1..30 {
            term = term * a / k as f64;
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let omega = axis.normalize() * rng.random_range(0.0..max_angle);
        let v = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Twist::new(omega, v)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let t = se3_exp(&Twist::zero()).unwrap();
        assert_eq!(t, RigidTransform::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let tw = Twist::new(Vector3::new(0.0, 0.0, PI / 2.0), Vector3::zeros());
        let t = se3_exp(&tw).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let oracle = expm4(&tw);
        for r in 0..3 {
            for c in 0..3 {
                assert_abs_diff_eq!(t.rotation[(r, c)], expected[(r, c)], epsilon = 1e-10);
                assert_abs_diff_eq!(t.rotation[(r, c)], oracle[(r, c)], epsilon = 1e-10);
            }
        }
        assert_abs_diff_eq!(t.translation.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn exp_matches_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let tw = random_twist(&mut rng, 3.0);
            let t = se3_exp(&tw).unwrap();
            let m = expm4(&tw);
            for r in 0..3 {
                for c in 0..3 {
                    assert_abs_diff_eq!(t.rotation[(r, c)], m[(r, c)], epsilon = 1e-10);
                }
                assert_abs_diff_eq!(t.translation[r], m[(r, 3)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn log_inverts_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            // mix in tiny angles to cover the series branch
            let max = if i % 4 == 0 { 1e-3 } else { 3.0 };
            let tw = random_twist(&mut rng, max);
            let back = se3_log(&se3_exp(&tw).unwrap()).unwrap();
            for (a, b) in tw.to_array().iter().zip(back.to_array()) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn log_of_identity_and_pure_translation() {
        assert_eq!(se3_log(&RigidTransform::identity()).unwrap(), Twist::zero());
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let tw = se3_log(&t).unwrap();
        assert_eq!(tw.omega, Vector3::zeros());
        assert_eq!(tw.v, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_of_log_reproduces_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let t = se3_exp(&random_twist(&mut rng, 3.0)).unwrap();
            let back = se3_exp(&se3_log(&t).unwrap()).unwrap();
            for (a, b) in t.rotation.iter().zip(back.rotation.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
            }
            for (a, b) in t.translation.iter().zip(back.translation.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn log_rejects_half_turn() {
        let r = axis_angle(&Vector3::new(0.0, 1.0, 0.0), PI);
        let err = se3_log(&RigidTransform::new(r, Vector3::zeros())).unwrap_err();
        assert!(matches!(err, Error::ChartBoundary { .. }));
    }

    #[test]
    fn exp_rejects_non_finite() {
        let tw = Twist::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert!(matches!(se3_exp(&tw), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn exp_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for i in 0..50 {
            let max = if i % 5 == 0 { 0.1 } else { 2.5 };
            let tw = random_twist(&mut rng, max);
            let (_, derivs) = se3_exp_with_derivatives(&tw).unwrap();
            for (k, d) in derivs.iter().enumerate() {
                let mut plus = tw.to_array();
                let mut minus = tw.to_array();
                plus[k] += h;
                minus[k] -= h;
                let tp = se3_exp(&Twist::from_array(plus)).unwrap();
                let tm = se3_exp(&Twist::from_array(minus)).unwrap();
                let fd_r = (tp.rotation - tm.rotation) / (2.0 * h);
                let fd_t = (tp.translation - tm.translation) / (2.0 * h);
                assert!((fd_r - d.rotation).amax() < 1e-8, "rotation d/d{k}");
                assert!((fd_t - d.translation).amax() < 1e-8, "translation d/d{k}");
            }
        }
    }

    #[test]
    fn principal_point_ray_looks_down_negative_z() {
        let k = Intrinsics::new(50.0, 50.0, 32.0, 24.0, 64, 48).unwrap();
        let ray = pixel_to_ray(&k, &RigidTransform::identity(), (32.0, 24.0), 0.1, 10.0).unwrap();
        assert_eq!(ray.direction, Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(ray.origin, Vector3::zeros());
    }

    #[test]
    fn one_focal_length_right_is_45_degrees() {
        let k = Intrinsics::new(20.0, 20.0, 32.0, 24.0, 64, 48).unwrap();
        let ray = pixel_to_ray(&k, &RigidTransform::identity(), (52.0, 24.0), 0.1, 10.0).unwrap();
        let s = 0.5f64.sqrt();
        assert_abs_diff_eq!(ray.direction.x, s, epsilon = 1e-12);
        assert_abs_diff_eq!(ray.direction.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ray.direction.z, -s, epsilon = 1e-12);
    }

    #[test]
    fn rays_are_unit_length() {
        let k = Intrinsics::from_fov(17, 13, 60.0).unwrap();
        let pose = se3_exp(&Twist::new(Vector3::new(0.3, -0.2, 0.9), Vector3::new(1.0, 2.0, 3.0)))
            .unwrap();
        for row in 0..k.height {
            for col in 0..k.width {
                let ray =
                    pixel_to_ray(&k, &pose, Intrinsics::pixel_center(col, row), 0.5, 4.0).unwrap();
                assert!((ray.direction.norm() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    fn ring_of_cameras(n: usize) -> Vec<RigidTransform> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * 2.0 * PI;
                let eye = Vector3::new(3.0 * a.cos(), 1.0 + 0.3 * (3.0 * a).sin(), 3.0 * a.sin());
                RigidTransform::look_at(eye, Vector3::zeros(), Vector3::y()).unwrap()
            })
            .collect()
    }

    #[test]
    fn alignment_error_zero_for_identical_and_gauge_shifted_sets() {
        let truth = ring_of_cameras(10);
        let e = pose_alignment_error(&truth, &truth).unwrap();
        assert_abs_diff_eq!(e.rotation_deg, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(e.translation, 0.0, epsilon = 1e-9);

        let g = se3_exp(&Twist::new(Vector3::new(0.4, -1.1, 0.2), Vector3::new(5.0, -2.0, 1.0)))
            .unwrap();
        let shifted: Vec<_> = truth.iter().map(|p| g.compose(p)).collect();
        let e = pose_alignment_error(&shifted, &truth).unwrap();
        assert_abs_diff_eq!(e.rotation_deg, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(e.translation, 0.0, epsilon = 1e-9);

        // common positive scaling of the estimated centers
        let scaled: Vec<_> = shifted
            .iter()
            .map(|p| RigidTransform::new(p.rotation, p.translation * 2.5))
            .collect();
        let e = pose_alignment_error(&scaled, &truth).unwrap();
        assert_abs_diff_eq!(e.rotation_deg, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(e.translation, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn single_rotated_camera_averages_over_set() {
        let truth = ring_of_cameras(10);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let mut est = truth.clone();
        est[3].rotation = axis_angle(&axis, 2f64.to_radians()) * est[3].rotation;
        let e = pose_alignment_error(&est, &truth).unwrap();
        assert_abs_diff_eq!(e.rotation_deg, 0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(e.translation, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn collinear_centers_are_degenerate() {
        let poses: Vec<_> = (0..5)
            .map(|i| RigidTransform::from_translation(Vector3::new(i as f64, 0.0, 0.0)))
            .collect();
        assert!(matches!(
            pose_alignment_error(&poses, &poses),
            Err(Error::AlignmentDegenerate(_))
        ));
        assert!(pose_alignment_error(&poses[..2], &poses[..2]).is_err());
    }

    #[test]
    fn look_at_faces_target() {
        let p = RigidTransform::look_at(Vector3::new(0.0, 0.0, 5.0), Vector3::zeros(), Vector3::y())
            .unwrap();
        let fwd = p.transform_vector(&Vector3::new(0.0, 0.0, -1.0));
        assert_abs_diff_eq!(fwd.z, -1.0, epsilon = 1e-12);
        assert!(p.orthonormality_error() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn exp_rotation_is_orthonormal(
            wx in -3.0f64..3.0, wy in -3.0f64..3.0, wz in -3.0f64..3.0,
            vx in -5.0f64..5.0, vy in -5.0f64..5.0, vz in -5.0f64..5.0,
        ) {
            let t = se3_exp(&Twist::new(Vector3::new(wx, wy, wz), Vector3::new(vx, vy, vz))).unwrap();
            proptest::prop_assert!(t.orthonormality_error() < 1e-9);
        }

        #[test]
        fn exp_log_roundtrip(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..3.0,
            vx in -5.0f64..5.0, vy in -5.0f64..5.0, vz in -5.0f64..5.0,
        ) {
            let axis = Vector3::new(ax, ay, az);
            proptest::prop_assume!(axis.norm() > 1e-3);
            let tw = Twist::new(axis.normalize() * angle, Vector3::new(vx, vy, vz));
            let back = se3_log(&se3_exp(&tw).unwrap()).unwrap();
            for (a, b) in tw.to_array().iter().zip(back.to_array()) {
                proptest::prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
