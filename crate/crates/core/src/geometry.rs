//! Rigid poses, sensor intrinsics and frame conventions.
//!
//! Sensor frames are x forward, y left, z up. Camera frames follow the usual
//! pinhole convention: z forward, x right, y down.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-9;
/// Compositions re-orthonormalize once the determinant drifts this far.
const RENORM_TOL: f64 = 1e-11;

/// Rigid transform mapping points from a sensor frame into the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRecord", try_from = "PoseRecord")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix, rejecting anything that is not a
    /// proper rotation to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Quaternion components in (w, x, y, z) order. The quaternion is
    /// normalized; a zero quaternion is rejected.
    pub fn from_quaternion(translation: Vec3, wxyz: [f64; 4]) -> Result<Self> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let norm = q.norm();
        if !(norm.is_finite() && norm > 1e-12) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose(format!(
                "quaternion {wxyz:?} / translation {:?}",
                translation.as_slice()
            )));
        }
        let unit = UnitQuaternion::from_quaternion(q);
        Ok(Self {
            rotation: *unit.to_rotation_matrix().matrix(),
            translation,
        })
    }

    /// Yaw about z, then pitch about y, then roll about x (intrinsic z-y-x).
    pub fn from_yaw_pitch_roll(translation: Vec3, yaw: f64, pitch: f64, roll: f64) -> Self {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), pitch)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), roll);
        Self {
            rotation: *r.matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Unit quaternion as (w, x, y, z), with w >= 0.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidPose("non-finite component".into()));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation determinant {det}")));
        }
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if gram.amax() > ORTHO_TOL {
            return Err(Error::InvalidPose("rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut out = Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if (out.rotation.determinant() - 1.0).abs() > RENORM_TOL {
            out.rotation = orthonormalize(&out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Euclidean distance between the two translations.
    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let x = m.column(0).normalize();
    let y = (m.column(1) - x * x.dot(&m.column(1))).normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// Point in the sonar frame for a (range, azimuth, elevation) triple.
#[inline]
pub fn spherical_to_sensor(range: f64, azimuth: f64, elevation: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vec3::new(range * ce * ca, range * ce * sa, range * se)
}

/// Inverse of [`spherical_to_sensor`]: returns (range, azimuth, elevation).
#[inline]
pub fn sensor_to_spherical(p: &Vec3) -> (f64, f64, f64) {
    let range = p.norm();
    let azimuth = p.y.atan2(p.x);
    let elevation = if range > 0.0 { (p.z / range).clamp(-1.0, 1.0).asin() } else { 0.0 };
    (range, azimuth, elevation)
}

/// Serialized pose: translation in meters plus a unit quaternion (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let t = p.translation();
        Self {
            translation: [t.x, t.y, t.z],
            rotation: p.quaternion_wxyz(),
        }
    }
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> Self {
        Self::from(&p)
    }
}

impl TryFrom<PoseRecord> for Pose {
    type Error = Error;

    fn try_from(r: PoseRecord) -> Result<Pose> {
        Pose::from_quaternion(Vec3::from(r.translation), r.rotation)
    }
}

/// Multibeam imaging sonar geometry. Beams are spaced uniformly in azimuth,
/// range bins uniformly in range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SonarIntrinsics {
    pub n_beams: usize,
    pub n_range_bins: usize,
    pub hfov: f64,
    pub vfov: f64,
    pub max_range: f64,
    #[serde(default)]
    pub min_range: f64,
}

impl Default for SonarIntrinsics {
    fn default() -> Self {
        Self::m1200d()
    }
}

impl SonarIntrinsics {
    /// 512 beams over 130° by 20°, 398 bins out to 2 m.
    pub fn m1200d() -> Self {
        Self {
            n_beams: 512,
            n_range_bins: 398,
            hfov: 130f64.to_radians(),
            vfov: 20f64.to_radians(),
            max_range: 2.0,
            min_range: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::PI;
        if self.n_beams == 0 || self.n_range_bins == 0 {
            return Err(Error::param("sonar needs at least one beam and one range bin"));
        }
        if self.n_beams > u16::MAX as usize || self.n_range_bins > u16::MAX as usize {
            return Err(Error::param("sonar dimensions exceed 65535"));
        }
        if !(self.hfov > 0.0 && self.hfov < PI) {
            return Err(Error::param(format!("hfov {} outside (0, pi)", self.hfov)));
        }
        if !(self.vfov > 0.0 && self.vfov < PI) {
            return Err(Error::param(format!("vfov {} outside (0, pi)", self.vfov)));
        }
        if !(self.min_range >= 0.0 && self.min_range < self.max_range) || !self.max_range.is_finite() {
            return Err(Error::param(format!(
                "range interval [{}, {}] invalid",
                self.min_range, self.max_range
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn range_resolution(&self) -> f64 {
        (self.max_range - self.min_range) / self.n_range_bins as f64
    }

    #[inline]
    pub fn beam_spacing(&self) -> f64 {
        self.hfov / self.n_beams as f64
    }

    #[inline]
    pub fn bin_center_range(&self, bin: usize) -> f64 {
        self.min_range + (bin as f64 + 0.5) * self.range_resolution()
    }

    #[inline]
    pub fn beam_azimuth(&self, beam: usize) -> f64 {
        -0.5 * self.hfov + (beam as f64 + 0.5) * self.beam_spacing()
    }

    /// Range bin containing `range`, if inside `[min_range, max_range]`.
    #[inline]
    pub fn bin_of_range(&self, range: f64) -> Option<usize> {
        if !(range >= self.min_range && range <= self.max_range) {
            return None;
        }
        let b = ((range - self.min_range) / self.range_resolution()) as usize;
        Some(b.min(self.n_range_bins - 1))
    }

    /// Beam containing `azimuth`, if inside the horizontal fan.
    #[inline]
    pub fn beam_of_azimuth(&self, azimuth: f64) -> Option<usize> {
        let half = 0.5 * self.hfov;
        if !(azimuth >= -half && azimuth <= half) {
            return None;
        }
        let k = ((azimuth + half) / self.beam_spacing()) as usize;
        Some(k.min(self.n_beams - 1))
    }

    /// Whether a sonar-frame point lies inside the imaged frustum.
    pub fn contains(&self, p: &Vec3) -> bool {
        let (r, az, el) = sensor_to_spherical(p);
        r >= self.min_range
            && r <= self.max_range
            && az.abs() <= 0.5 * self.hfov
            && el.abs() <= 0.5 * self.vfov
    }

    /// Closed-form frustum volume in cubic meters.
    pub fn frustum_volume(&self) -> f64 {
        (self.max_range.powi(3) - self.min_range.powi(3)) / 3.0 * self.hfov * 2.0 * (0.5 * self.vfov).sin()
    }
}

/// Undistorted pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    /// 320x240 with a 56° horizontal field of view.
    fn default() -> Self {
        Self { fx: 300.0, fy: 300.0, cx: 160.0, cy: 120.0, width: 320, height: 240 }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::param("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("camera image must be non-empty"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::param("principal point outside the image"));
        }
        Ok(())
    }

    /// Unnormalized camera-frame ray through pixel (u, v); z component is 1.
    #[inline]
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Rotation taking camera-frame vectors (z fwd, x right, y down) into the
/// sonar-style body frame (x fwd, y left, z up).
pub fn camera_axes_to_body() -> Matrix3<f64> {
    Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let t = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        Pose::from_quaternion(t, q).unwrap()
    }

    fn assert_pose_eq(a: &Pose, b: &Pose, tol: f64) {
        assert!((a.rotation() - b.rotation()).amax() < tol);
        assert!((a.translation() - b.translation()).amax() < tol);
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        assert_pose_eq(&Pose::identity().compose(&p), &p, 1e-15);
        assert_pose_eq(&p.compose(&p.inverse()), &Pose::identity(), 1e-9);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        let ab = a.compose(&b);
        for _ in 0..100 {
            let p = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let seq = a.transform_point(&b.transform_point(&p));
            assert!((ab.transform_point(&p) - seq).amax() < 1e-9);
        }
    }

    #[test]
    fn transform_point_examples() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let t = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(t.transform_point(&Vec3::zeros()), Vec3::new(0.0, 0.0, 1.0));
        // Rz(90°) = [[0,-1,0],[1,0,0],[0,0,1]]
        let yaw = Pose::from_yaw_pitch_roll(Vec3::zeros(), FRAC_PI_2, 0.0, 0.0);
        let q = yaw.transform_point(&Vec3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(q.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn spherical_examples() {
        assert_eq!(spherical_to_sensor(1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let p = spherical_to_sensor(1.0, FRAC_PI_2, 0.0);
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 1.0, epsilon = 1e-12);
        let (r, az, el): (f64, f64, f64) = (2.0, 0.3, -0.1);
        let p = spherical_to_sensor(r, az, el);
        assert_abs_diff_eq!(p.x, r * el.cos() * az.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, r * el.cos() * az.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(p.z, r * el.sin(), epsilon = 1e-12);
        let (r2, az2, el2) = sensor_to_spherical(&p);
        assert_abs_diff_eq!(r2, r, epsilon = 1e-12);
        assert_abs_diff_eq!(az2, az, epsilon = 1e-12);
        assert_abs_diff_eq!(el2, el, epsilon = 1e-12);
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let steps: Vec<Pose> = (0..16).map(|_| random_pose(&mut rng)).collect();
        let mut acc = Pose::identity();
        for i in 0..10_000 {
            acc = acc.compose(&steps[i % steps.len()]);
            assert!((acc.rotation().determinant() - 1.0).abs() < 1e-9);
        }
        acc.validate().unwrap();
    }

    #[test]
    fn pose_rejects_non_rotation() {
        assert!(Pose::new(Matrix3::identity() * 2.0, Vec3::zeros()).is_err());
        assert!(Pose::new(-Matrix3::<f64>::identity(), Vec3::zeros()).is_err());
        assert!(Pose::from_quaternion(Vec3::zeros(), [0.0; 4]).is_err());
    }

    #[test]
    fn pose_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pose(&mut rng);
        let rec = PoseRecord::from(&p);
        let back = Pose::try_from(rec).unwrap();
        assert_pose_eq(&p, &back, 1e-12);
    }

    #[test]
    fn sonar_bin_and_beam_lookup() {
        let s = SonarIntrinsics::m1200d();
        s.validate().unwrap();
        assert_abs_diff_eq!(s.range_resolution(), 2.0 / 398.0, epsilon = 1e-15);
        for b in [0, 17, 397] {
            assert_eq!(s.bin_of_range(s.bin_center_range(b)), Some(b));
        }
        for k in [0, 255, 256, 511] {
            assert_eq!(s.beam_of_azimuth(s.beam_azimuth(k)), Some(k));
        }
        assert_eq!(s.bin_of_range(2.0), Some(397));
        assert_eq!(s.bin_of_range(2.01), None);
        assert_eq!(s.beam_of_azimuth(1.2), None);
        assert!(s.contains(&Vec3::new(1.0, 0.0, 0.0)));
        assert!(!s.contains(&Vec3::new(1.0, 0.0, 0.5)));
        let bad = SonarIntrinsics { hfov: 4.0, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn camera_projection_round_trip() {
        let cam = CameraIntrinsics { fx: 500.0, fy: 480.0, cx: 320.0, cy: 240.0, width: 640, height: 480 };
        cam.validate().unwrap();
        let p = cam.pixel_ray(100.0, 50.0) * 2.5;
        let (u, v) = cam.project(&p).unwrap();
        assert_abs_diff_eq!(u, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 50.0, epsilon = 1e-9);
        assert!(CameraIntrinsics { cx: 700.0, ..cam }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn transform_preserves_distances(
            q in proptest::array::uniform4(-1.0f64..1.0),
            t in proptest::array::uniform3(-10.0f64..10.0),
            a in proptest::array::uniform3(-10.0f64..10.0),
            b in proptest::array::uniform3(-10.0f64..10.0),
        ) {
            proptest::prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let pose = Pose::from_quaternion(Vec3::from(t), q).unwrap();
            let (a, b) = (Vec3::from(a), Vec3::from(b));
            let d0 = (a - b).norm();
            let d1 = (pose.transform_point(&a) - pose.transform_point(&b)).norm();
            proptest::prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn boresight_stays_on_x_axis(r in 0.0f64..100.0) {
            let p = spherical_to_sensor(r, 0.0, 0.0);
            proptest::prop_assert_eq!(p.y, 0.0);
            proptest::prop_assert_eq!(p.z, 0.0);
            proptest::prop_assert!(p.x >= 0.0);
        }
    }
}
