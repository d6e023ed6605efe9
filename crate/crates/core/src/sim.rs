//! Synthetic scenes, sonar and camera renderers, and sweep trajectories.
//!
//! Scenes are unions of signed-distance primitives. Both renderers sphere-trace
//! the scene distance; the sonar renderer fans rays across the vertical
//! aperture of every beam and injects ringing, speckle, dropout and background
//! noise from a caller-supplied seeded generator.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{DepthImage, Mask, OpticalFrame, NO_DEPTH};
use crate::geometry::{spherical_to_sensor, CameraIntrinsics, Pose, SonarIntrinsics, Vec3};
use crate::sonar::SonarFrame;

const HIT_EPS: f64 = 1e-5;
const MAX_STEPS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned in the primitive frame, centered on its origin.
    Box { half_extents: [f64; 3] },
    Sphere { radius: f64 },
    /// Half-space below the primitive frame's xy plane; the surface normal is local +z.
    Plane,
    /// Open cylinder wall around local +z from z = 0 to `height`. `radius` is
    /// the wall midline, so the inner surface sits at `radius - thickness / 2`.
    CylinderShell { radius: f64, thickness: f64, height: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub name: String,
    pub shape: Shape,
    /// World←primitive transform.
    pub pose: Pose,
    pub reflectivity: f64,
    pub color: [u8; 3],
}

impl Primitive {
    pub fn new(name: &str, shape: Shape, pose: Pose, reflectivity: f64, color: [u8; 3]) -> Self {
        Self { name: name.to_string(), shape, pose, reflectivity, color }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        let q = self.pose.inverse().transform_point(p);
        local_distance(&self.shape, &q)
    }
}

fn local_distance(shape: &Shape, q: &Vec3) -> f64 {
    match *shape {
        Shape::Box { half_extents } => {
            let d = q.abs() - Vec3::from(half_extents);
            d.sup(&Vec3::zeros()).norm() + d.max().min(0.0)
        }
        Shape::Sphere { radius } => q.norm() - radius,
        Shape::Plane => q.z,
        Shape::CylinderShell { radius, thickness, height } => {
            let ring = (q.x.hypot(q.y) - radius).abs() - thickness / 2.0;
            let cap = (q.z - height / 2.0).abs() - height / 2.0;
            // exact inside and along the faces, a lower bound near the rims
            ring.max(cap)
        }
    }
}

/// Union of primitives over a uniform background color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub background: [u8; 3],
}

/// Primitive frames cached for evaluation.
struct Compiled<'a> {
    scene: &'a Scene,
    inv: Vec<Pose>,
}

impl<'a> Compiled<'a> {
    fn new(scene: &'a Scene) -> Self {
        Self { scene, inv: scene.primitives.iter().map(|p| p.pose.inverse()).collect() }
    }

    fn prim_distance(&self, i: usize, p: &Vec3) -> f64 {
        local_distance(&self.scene.primitives[i].shape, &self.inv[i].transform_point(p))
    }

    fn distance(&self, p: &Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for i in 0..self.inv.len() {
            let d = self.prim_distance(i, p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    fn normal(&self, i: usize, p: &Vec3) -> Vec3 {
        let h = 1e-6;
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            g[a] = self.prim_distance(i, &(p + e)) - self.prim_distance(i, &(p - e));
        }
        g.try_normalize(0.0).unwrap_or_else(Vec3::z)
    }

    /// Sphere traces a unit-direction ray; returns hit distance and primitive.
    fn trace(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, usize)> {
        if self.inv.is_empty() {
            return None;
        }
        let mut t = t_min;
        for _ in 0..MAX_STEPS {
            let (d, i) = self.distance(&(origin + dir * t));
            if d < HIT_EPS {
                return Some((t, i));
            }
            t += d;
            if t > t_max {
                return None;
            }
        }
        None
    }
}

impl Scene {
    pub fn empty() -> Self {
        Self { primitives: Vec::new(), background: [0, 0, 0] }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.primitives.iter().map(|q| q.distance(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            if !(0.0..=1.0).contains(&p.reflectivity) {
                return Err(Error::param(format!("{}: reflectivity outside [0, 1]", p.name)));
            }
            let ok = match p.shape {
                Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
                Shape::Sphere { radius } => radius > 0.0,
                Shape::Plane => true,
                Shape::CylinderShell { radius, thickness, height } => {
                    thickness > 0.0 && radius > thickness / 2.0 && height > 0.0
                }
            };
            if !ok {
                return Err(Error::param(format!("{}: non-positive dimensions", p.name)));
            }
            p.pose.validate()?;
        }
        Ok(())
    }

    pub fn primitive(&self, name: &str) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.name == name)
    }
}

/// Geometry of the default tank.
pub const TANK_INNER_DIAMETER: f64 = 2.1;
pub const TANK_DEPTH: f64 = 1.5;
pub const TANK_WALL_THICKNESS: f64 = 0.02;
pub const CRATE_SIDE: f64 = 0.329;
/// Crate footprint center on the tank floor.
pub const CRATE_CENTER: [f64; 2] = [0.55, 0.1];

/// Cylindrical tank with its floor at z = 0 and one crate-sized box resting on it.
pub fn tank_scene() -> Scene {
    let r_mid = TANK_INNER_DIAMETER / 2.0 + TANK_WALL_THICKNESS / 2.0;
    let h = CRATE_SIDE / 2.0;
    Scene {
        primitives: vec![
            Primitive::new("floor", Shape::Plane, Pose::identity(), 0.35, [90, 85, 80]),
            Primitive::new(
                "wall",
                Shape::CylinderShell { radius: r_mid, thickness: TANK_WALL_THICKNESS, height: TANK_DEPTH },
                Pose::identity(),
                0.6,
                [150, 150, 155],
            ),
            Primitive::new(
                "crate",
                Shape::Box { half_extents: [h; 3] },
                Pose::from_translation(Vec3::new(CRATE_CENTER[0], CRATE_CENTER[1], h)),
                0.9,
                [200, 30, 30],
            ),
        ],
        background: [20, 40, 120],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SonarNoiseModel {
    pub background_mean: f64,
    pub background_sigma: f64,
    /// Range (m) over which the background decays by 1/e. Zero keeps it
    /// uniform in range.
    pub background_range_scale: f64,
    /// Amplitude ratio between successive ringing replicas.
    pub ring_gain: f64,
    /// Replicas on each side of a return.
    pub ring_bins: usize,
    /// Speckle standard deviation at full-scale intensity.
    pub speckle_sigma: f64,
    pub dropout_prob: f64,
}

impl Default for SonarNoiseModel {
    fn default() -> Self {
        Self::noiseless()
    }
}

impl SonarNoiseModel {
    pub fn noiseless() -> Self {
        Self {
            background_mean: 0.0,
            background_sigma: 0.0,
            background_range_scale: 0.0,
            ring_gain: 0.0,
            ring_bins: 0,
            speckle_sigma: 0.0,
            dropout_prob: 0.0,
        }
    }

    /// Moderate artifact levels used by the simulated datasets. The background
    /// is near-field reverberation that fades within a few centimetres.
    pub fn typical() -> Self {
        Self {
            background_mean: 12.0,
            background_sigma: 6.0,
            background_range_scale: 0.05,
            ring_gain: 0.3,
            ring_bins: 2,
            speckle_sigma: 30.0,
            dropout_prob: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.background_mean,
            self.background_sigma,
            self.background_range_scale,
            self.ring_gain,
            self.speckle_sigma,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param("noise parameters must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::param("dropout probability outside [0, 1]"));
        }
        Ok(())
    }

    fn is_noiseless(&self) -> bool {
        self.background_mean == 0.0 && self.background_sigma == 0.0 && self.speckle_sigma == 0.0 && self.dropout_prob == 0.0
    }
}

/// Default number of elevation rays per beam.
pub const DEFAULT_ELEVATION_SAMPLES: usize = 32;

/// Calls `f(beam, bin, primitive, hit, dir)` for every elevation ray of every
/// beam that hits the scene inside the range window.
fn trace_beams(
    compiled: &Compiled,
    pose: &Pose,
    intr: &SonarIntrinsics,
    elevation_samples: usize,
    mut f: impl FnMut(usize, usize, usize, Vec3, Vec3),
) {
    let origin = *pose.translation();
    let t_min = intr.min_range.max(1e-3);
    for beam in 0..intr.n_beams {
        let az = intr.beam_azimuth(beam);
        for e in 0..elevation_samples {
            // exact rational fraction, so odd refinements reproduce coarser elevations bit for bit
            let frac = (2 * e + 1) as f64 / (2 * elevation_samples) as f64;
            let el = intr.vfov * (frac - 0.5);
            let dir = pose.rotate_vector(&spherical_to_sensor(1.0, az, el));
            let Some((t, i)) = compiled.trace(&origin, &dir, t_min, intr.max_range) else { continue };
            let Some(bin) = intr.bin_of_range(t) else { continue };
            f(beam, bin, i, origin + dir * t, dir);
        }
    }
}

/// Noiseless echo intensities before ringing and noise, row-major by bin.
fn sonar_echoes(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics, elevation_samples: usize) -> Vec<f64> {
    let cols = intr.n_beams;
    let mut echo = vec![0.0f64; intr.n_range_bins * cols];
    let compiled = Compiled::new(scene);
    trace_beams(&compiled, pose, intr, elevation_samples, |beam, bin, i, hit, dir| {
        let cos = compiled.normal(i, &hit).dot(&dir).abs();
        let v = 255.0 * scene.primitives[i].reflectivity * cos;
        let cell = &mut echo[bin * cols + beam];
        if v > *cell {
            *cell = v;
        }
    });
    echo
}

/// Renders one sonar frame at `pose`. Noise draws come from `rng` in a fixed
/// order, so a seeded generator gives bit-identical frames.
pub fn render_sonar(
    scene: &Scene,
    pose: &Pose,
    intr: &SonarIntrinsics,
    noise: &SonarNoiseModel,
    elevation_samples: usize,
    rng: &mut impl Rng,
) -> Result<SonarFrame> {
    intr.validate()?;
    noise.validate()?;
    if elevation_samples == 0 {
        return Err(Error::param("elevation_samples must be at least 1"));
    }
    let (rows, cols) = (intr.n_range_bins, intr.n_beams);
    let echo = sonar_echoes(scene, pose, intr, elevation_samples);

    let mut img = echo.clone();
    if noise.ring_gain > 0.0 {
        for bin in 0..rows {
            for beam in 0..cols {
                let v = echo[bin * cols + beam];
                if v <= 0.0 {
                    continue;
                }
                let mut amp = v;
                for j in 1..=noise.ring_bins {
                    amp *= noise.ring_gain;
                    for b in [bin.checked_sub(j), Some(bin + j).filter(|&b| b < rows)].into_iter().flatten() {
                        let cell = &mut img[b * cols + beam];
                        if amp > *cell {
                            *cell = amp;
                        }
                    }
                }
            }
        }
    }

    if !noise.is_noiseless() {
        for (idx, v) in img.iter_mut().enumerate() {
            let decay = if noise.background_range_scale > 0.0 {
                (-intr.bin_center_range(idx / cols) / noise.background_range_scale).exp()
            } else {
                1.0
            };
            let n_speckle: f64 = StandardNormal.sample(rng);
            let n_bg: f64 = StandardNormal.sample(rng);
            let drop = rng.gen::<f64>() < noise.dropout_prob;
            let mut x = *v * (1.0 + noise.speckle_sigma / 255.0 * n_speckle);
            if drop {
                x = 0.0;
            }
            *v = x + decay * (noise.background_mean + noise.background_sigma * n_bg);
        }
    }

    let data = img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    SonarFrame::new(data, *intr, 0.0, *pose)
}

/// Camera render with per-pixel ground truth.
#[derive(Debug, Clone)]
pub struct OpticalRender {
    pub frame: OpticalFrame,
    /// Index of the visible primitive per pixel, -1 for background.
    pub ids: Vec<i32>,
    pub depth: DepthImage,
}

impl OpticalRender {
    pub fn id_mask(&self, id: usize) -> Mask {
        let (w, h) = (self.depth.width, self.depth.height);
        Mask { width: w, height: h, data: self.ids.iter().map(|&i| i == id as i32).collect() }
    }

    pub fn object_mask(&self) -> Mask {
        let (w, h) = (self.depth.width, self.depth.height);
        Mask { width: w, height: h, data: self.ids.iter().map(|&i| i >= 0).collect() }
    }
}

/// Far clip for camera rays.
pub const OPTICAL_FAR: f64 = 20.0;

/// Sphere-traced pinhole render with headlight Lambertian shading.
/// `pose` is world←camera in the camera axis convention.
pub fn render_optical(scene: &Scene, intr: &CameraIntrinsics, pose: &Pose) -> Result<OpticalRender> {
    intr.validate()?;
    let (w, h) = (intr.width, intr.height);
    let compiled = Compiled::new(scene);
    let origin = *pose.translation();
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb(scene.background));
    let mut ids = vec![-1i32; w * h];
    let mut depth = DepthImage::empty(*intr);
    for v in 0..h {
        for u in 0..w {
            let ray = intr.pixel_ray(u as f64, v as f64);
            let len = ray.norm();
            let dir = pose.rotate_vector(&(ray / len));
            let Some((t, i)) = compiled.trace(&origin, &dir, 1e-4, OPTICAL_FAR * len) else { continue };
            let hit = origin + dir * t;
            let shade = 0.25 + 0.75 * compiled.normal(i, &hit).dot(&dir).abs();
            let c = scene.primitives[i].color;
            let px = [0, 1, 2].map(|k| (c[k] as f64 * shade).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(u as u32, v as u32, Rgb(px));
            ids[v * w + u] = i as i32;
            depth.depths[v * w + u] = t / len;
        }
    }
    debug_assert!(depth.depths.iter().all(|&d| d == NO_DEPTH || d > 0.0));
    let frame = OpticalFrame::new(img, *intr, *pose, 0.0)?;
    Ok(OpticalRender { frame, ids, depth })
}

/// Yaw sweeps in sensor-pose space.
///
/// The sensor sits at `pivot + Rz(yaw) (reach, 0, 0) + R sensor_offset` with
/// orientation `R = Rz(yaw) Ry(pitch) Rx(roll)`; positive pitch looks down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepParams {
    pub yaw_min: f64,
    pub yaw_max: f64,
    pub pitch_levels: Vec<f64>,
    pub roll_pair: [f64; 2],
    pub pivot: [f64; 3],
    pub reach: f64,
    pub sensor_offset: [f64; 3],
    pub angular_step: f64,
    pub frame_rate: f64,
}

impl Default for SweepParams {
    /// Yaw ±70° at pitches 45°, 30° and 15° with rolls ±45°, over the default tank.
    fn default() -> Self {
        let d = PI / 180.0;
        Self {
            yaw_min: -70.0 * d,
            yaw_max: 70.0 * d,
            pitch_levels: vec![45.0 * d, 30.0 * d, 15.0 * d],
            roll_pair: [45.0 * d, -45.0 * d],
            pivot: [-0.35, 0.0, 0.6],
            reach: 0.4,
            sensor_offset: [0.0, 0.0, 0.06],
            angular_step: 2.0 * d,
            frame_rate: 10.0,
        }
    }
}

impl SweepParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.yaw_min < self.yaw_max) {
            return Err(Error::param("yaw_min must be below yaw_max"));
        }
        if self.pitch_levels.is_empty() {
            return Err(Error::param("at least one pitch level is required"));
        }
        if !(self.angular_step > 0.0 && self.frame_rate > 0.0 && self.reach >= 0.0) {
            return Err(Error::param("step, frame rate and reach must be positive"));
        }
        Ok(())
    }

    pub fn pose(&self, yaw: f64, pitch: f64, roll: f64) -> Pose {
        let base = Pose::from_yaw_pitch_roll(Vec3::zeros(), yaw, pitch, roll);
        let arm = Vec3::new(self.reach * yaw.cos(), self.reach * yaw.sin(), 0.0);
        let t = Vec3::from(self.pivot) + arm + base.rotate_vector(&Vec3::from(self.sensor_offset));
        Pose::from_yaw_pitch_roll(t, yaw, pitch, roll)
    }

    /// Yaw samples per pass, endpoints included.
    pub fn samples_per_pass(&self) -> usize {
        let span = self.yaw_max - self.yaw_min;
        ((span / self.angular_step) - 1e-9).ceil().max(1.0) as usize + 1
    }
}

/// One forward pass at `roll_pair[0]` and one reverse pass at `roll_pair[1]`
/// per pitch level. Fails when two consecutive poses are within `min_separation`.
pub fn sweep_trajectory(params: &SweepParams, min_separation: f64) -> Result<Vec<(f64, Pose)>> {
    params.validate()?;
    let n = params.samples_per_pass();
    let span = params.yaw_max - params.yaw_min;
    let mut out: Vec<(f64, Pose)> = Vec::with_capacity(n * 2 * params.pitch_levels.len());
    for &pitch in &params.pitch_levels {
        for (pass, &roll) in params.roll_pair.iter().enumerate() {
            for i in 0..n {
                let s = if pass == 0 { i } else { n - 1 - i };
                let yaw = params.yaw_min + span * s as f64 / (n - 1) as f64;
                let pose = params.pose(yaw, pitch, roll);
                if let Some((_, last)) = out.last() {
                    let d = last.translation_distance(&pose);
                    if d <= min_separation {
                        return Err(Error::param(format!(
                            "poses {} and {} are only {d:.4} m apart; increase the step, reach or offset",
                            out.len() - 1,
                            out.len()
                        )));
                    }
                }
                out.push((out.len() as f64 / params.frame_rate, pose));
            }
        }
    }
    Ok(out)
}

/// Body-frame pose (x forward, z up) at `eye` looking at `target`.
pub fn look_at(eye: Vec3, target: Vec3) -> Result<Pose> {
    let x = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::param("eye and target coincide"))?;
    let up = if x.z.abs() > 0.999 { Vec3::x() } else { Vec3::z() };
    let y = up.cross(&x).normalize();
    let z = x.cross(&y);
    Pose::new(nalgebra::Matrix3::from_columns(&[x, y, z]), eye)
}

/// Voxels containing a surface point that some sonar ray of `poses` reaches
/// first: the part of the scene a sweep can observe at all.
pub fn voxelize_visible_surface(
    scene: &Scene,
    poses: &[Pose],
    intr: &SonarIntrinsics,
    elevation_samples: usize,
    spec: &crate::carve::GridSpec,
) -> Vec<bool> {
    let compiled = Compiled::new(scene);
    let mut out = vec![false; spec.len()];
    for pose in poses {
        trace_beams(&compiled, pose, intr, elevation_samples, |_, _, _, hit, _| {
            if let Some([i, j, k]) = spec.locate(&hit) {
                out[spec.index(i, j, k)] = true;
            }
        });
    }
    out
}

/// Ground-truth occupancy of a grid: voxels whose cube the scene surface passes through.
pub fn voxelize_surface(scene: &Scene, spec: &crate::carve::GridSpec) -> Vec<bool> {
    let half_diag = spec.voxel_size * 3f64.sqrt() / 2.0;
    let compiled = Compiled::new(scene);
    (0..spec.len())
        .map(|idx| {
            let [i, j, k] = spec.coords(idx);
            compiled.distance(&spec.center(i, j, k)).0.abs() <= half_diag
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn wall_at(x: f64) -> Scene {
        // plane facing -x at distance x
        let pose = Pose::from_yaw_pitch_roll(Vec3::new(x, 0.0, 0.0), 0.0, -PI / 2.0, 0.0);
        Scene { primitives: vec![Primitive::new("wall", Shape::Plane, pose, 1.0, [255, 255, 255])], background: [0; 3] }
    }

    #[test]
    fn primitive_distances() {
        let b = Primitive::new("b", Shape::Box { half_extents: [1.0, 2.0, 3.0] }, Pose::identity(), 1.0, [0; 3]);
        assert_abs_diff_eq!(b.distance(&Vec3::new(3.0, 0.0, 0.0)), 2.0);
        assert_abs_diff_eq!(b.distance(&Vec3::new(0.0, 0.0, 0.0)), -1.0);
        assert_abs_diff_eq!(b.distance(&Vec3::new(2.0, 3.0, 3.0)), 2f64.sqrt());
        let s = Primitive::new("s", Shape::Sphere { radius: 0.5 }, Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)), 1.0, [0; 3]);
        assert_abs_diff_eq!(s.distance(&Vec3::zeros()), 0.5);
        let c = Primitive::new("c", Shape::CylinderShell { radius: 1.0, thickness: 0.2, height: 2.0 }, Pose::identity(), 1.0, [0; 3]);
        assert_abs_diff_eq!(c.distance(&Vec3::new(0.0, 0.0, 1.0)), 0.9);
        assert_abs_diff_eq!(c.distance(&Vec3::new(1.0, 0.0, 1.0)), -0.1);
        let w = wall_at(2.0);
        assert_abs_diff_eq!(w.distance(&Vec3::zeros()), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn primitive_distances_are_one_lipschitz() {
        let scene = tank_scene();
        let mut r = rng();
        for _ in 0..2000 {
            let p = Vec3::new(r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5), r.gen_range(-0.5..2.0));
            let q = p + Vec3::new(r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1));
            for prim in &scene.primitives {
                assert!((prim.distance(&p) - prim.distance(&q)).abs() <= (p - q).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn empty_scene_noiseless_is_black() {
        let intr = SonarIntrinsics::m1200d();
        let f = render_sonar(&Scene::empty(), &Pose::identity(), &intr, &SonarNoiseModel::noiseless(), 4, &mut rng()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn plane_at_one_meter_hits_expected_bins() {
        let intr = SonarIntrinsics::m1200d();
        let f = render_sonar(&wall_at(1.0), &Pose::identity(), &intr, &SonarNoiseModel::noiseless(), 9, &mut rng()).unwrap();
        let expected = ((1.0 - intr.min_range) / intr.range_resolution()).floor() as i64;
        for beam in 250..262 {
            let lit: Vec<i64> = (0..intr.n_range_bins).filter(|&b| f.get(b, beam) > 100).map(|b| b as i64).collect();
            assert!(!lit.is_empty());
            assert!(lit.iter().all(|b| (b - expected).abs() <= 2), "beam {beam}: {lit:?}");
        }
    }

    #[test]
    fn ringing_lights_adjacent_bins() {
        let intr = SonarIntrinsics::m1200d();
        let clean = render_sonar(&wall_at(1.0), &Pose::identity(), &intr, &SonarNoiseModel::noiseless(), 1, &mut rng()).unwrap();
        let noise = SonarNoiseModel { ring_gain: 0.4, ring_bins: 2, ..SonarNoiseModel::noiseless() };
        let rung = render_sonar(&wall_at(1.0), &Pose::identity(), &intr, &noise, 1, &mut rng()).unwrap();
        let beam = 256;
        let hits: Vec<usize> = (0..intr.n_range_bins).filter(|&b| clean.get(b, beam) > 0).collect();
        assert_eq!(hits.len(), 1);
        let b = hits[0];
        for adj in [b - 2, b - 1, b + 1, b + 2] {
            assert_eq!(clean.get(adj, beam), 0);
            assert!(rung.get(adj, beam) > 0);
        }
        assert!(rung.get(b - 1, beam) > rung.get(b - 2, beam));
    }

    #[test]
    fn background_fades_with_range() {
        use crate::sonar::{binarize, estimate_background};
        let intr = SonarIntrinsics::m1200d();
        let noise = SonarNoiseModel { speckle_sigma: 0.0, dropout_prob: 0.0, ..SonarNoiseModel::typical() };
        let f = render_sonar(&Scene::empty(), &Pose::identity(), &intr, &noise, 1, &mut rng()).unwrap();
        let row_mean = |b: usize| (0..intr.n_beams).map(|k| f.get(b, k) as f64).sum::<f64>() / intr.n_beams as f64;
        let r0 = intr.bin_center_range(0);
        assert!((row_mean(0) - 12.0 * (-r0 / 0.05).exp()).abs() < 1.0);
        let far = intr.bin_of_range(0.4).unwrap();
        assert!((far..intr.n_range_bins).all(|b| (0..intr.n_beams).all(|k| f.get(b, k) == 0)));
        // the near-field statistics gate out every row past the reverberation
        let map = binarize(&f, &estimate_background(&f, 10).unwrap(), 5);
        let last = (0..intr.n_range_bins).filter(|&b| (0..intr.n_beams).any(|k| map.get(b, k))).max().unwrap_or(0);
        assert!(intr.bin_center_range(last) < 0.15, "lit out to {}", intr.bin_center_range(last));

        let flat = SonarNoiseModel { background_range_scale: 0.0, ..noise };
        let g = render_sonar(&Scene::empty(), &Pose::identity(), &intr, &flat, 1, &mut rng()).unwrap();
        let m = (0..intr.n_beams).map(|k| g.get(far, k) as f64).sum::<f64>() / intr.n_beams as f64;
        assert!((m - 12.0).abs() < 1.5);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let intr = SonarIntrinsics { n_beams: 64, n_range_bins: 80, ..SonarIntrinsics::m1200d() };
        let scene = tank_scene();
        let pose = SweepParams::default().pose(0.0, 0.6, 0.0);
        let noise = SonarNoiseModel::typical();
        let a = render_sonar(&scene, &pose, &intr, &noise, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = render_sonar(&scene, &pose, &intr, &noise, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = render_sonar(&scene, &pose, &intr, &noise, 8, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        let quiet = SonarNoiseModel::noiseless();
        let d = render_sonar(&scene, &pose, &intr, &quiet, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let e = render_sonar(&scene, &pose, &intr, &quiet, 8, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(d.data(), e.data());
    }

    #[test]
    fn more_elevation_rays_keep_every_return() {
        let intr = SonarIntrinsics { n_beams: 48, n_range_bins: 100, ..SonarIntrinsics::m1200d() };
        let scene = tank_scene();
        let pose = SweepParams::default().pose(0.2, 0.5, 0.4);
        let q = SonarNoiseModel::noiseless();
        let few = render_sonar(&scene, &pose, &intr, &q, 4, &mut rng()).unwrap();
        // tripling keeps every coarse elevation in the finer set
        let many = render_sonar(&scene, &pose, &intr, &q, 12, &mut rng()).unwrap();
        for (a, b) in few.data().iter().zip(many.data()) {
            assert!(*a == 0 || *b >= *a);
        }
    }

    #[test]
    fn sonar_range_matches_optical_depth() {
        let scene = tank_scene();
        let intr_s = SonarIntrinsics::m1200d();
        let cam = CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 32.0, cy: 24.0, width: 64, height: 48 };
        let body = look_at(Vec3::new(-0.2, 0.1, 0.9), Vec3::new(0.55, 0.1, 0.16)).unwrap();
        let cam_pose = body.compose(&Pose::new(crate::geometry::camera_axes_to_body(), Vec3::zeros()).unwrap());
        let r = render_optical(&scene, &cam, &cam_pose).unwrap();
        let truth = r.depth.get(32, 24);
        let f = render_sonar(&scene, &body, &intr_s, &SonarNoiseModel::noiseless(), 1, &mut rng()).unwrap();
        let beam = intr_s.n_beams / 2;
        let first = (0..intr_s.n_range_bins).find(|&b| f.get(b, beam) > 0).unwrap();
        let got = intr_s.bin_center_range(first);
        // boresight sits between the two middle beams
        let tol = intr_s.range_resolution() + 0.01;
        assert!((got - truth).abs() <= tol, "{got} vs {truth}");
    }

    #[test]
    fn empty_optical_scene() {
        let cam = CameraIntrinsics { fx: 50.0, fy: 50.0, cx: 16.0, cy: 12.0, width: 32, height: 24 };
        let s = Scene { primitives: vec![], background: [1, 2, 3] };
        let r = render_optical(&s, &cam, &Pose::identity()).unwrap();
        assert!(r.frame.pixels.pixels().all(|p| p.0 == [1, 2, 3]));
        assert_eq!(r.object_mask().count(), 0);
        assert_eq!(r.depth.valid_count(), 0);
    }

    #[test]
    fn sphere_silhouette_radius() {
        let (d, rad) = (3.0, 0.6);
        let cam = CameraIntrinsics { fx: 200.0, fy: 200.0, cx: 100.0, cy: 100.0, width: 201, height: 201 };
        let s = Scene {
            primitives: vec![Primitive::new("s", Shape::Sphere { radius: rad }, Pose::from_translation(Vec3::new(0.0, 0.0, d)), 1.0, [255, 0, 0])],
            background: [0; 3],
        };
        let r = render_optical(&s, &cam, &Pose::identity()).unwrap();
        let expected = cam.fx * rad / (d * d - rad * rad).sqrt();
        let m = r.id_mask(0);
        // horizontal and vertical half-widths, plus a disc-area estimate
        let row: Vec<usize> = (0..201).filter(|&u| m.get(u, 100)).collect();
        let half_w = (row.len() as f64) / 2.0;
        assert!((half_w - expected).abs() <= 1.0, "{half_w} vs {expected}");
        let area_r = (m.count() as f64 / PI).sqrt();
        assert!((area_r - expected).abs() <= 1.0);
        for v in 0..201 {
            for u in 0..201 {
                let rr = ((u as f64 - 100.0).powi(2) + (v as f64 - 100.0).powi(2)).sqrt();
                if rr < expected - 1.0 {
                    assert!(m.get(u, v));
                } else if rr > expected + 1.0 {
                    assert!(!m.get(u, v));
                }
            }
        }
    }

    #[test]
    fn plane_depth_at_principal_pixel() {
        let cam = CameraIntrinsics { fx: 80.0, fy: 80.0, cx: 20.0, cy: 15.0, width: 40, height: 30 };
        // plane z = 1.7 in camera coordinates, facing the camera
        let pose = Pose::from_yaw_pitch_roll(Vec3::new(0.0, 0.0, 1.7), 0.0, PI, 0.0);
        let s = Scene { primitives: vec![Primitive::new("p", Shape::Plane, pose, 1.0, [9; 3])], background: [0; 3] };
        let r = render_optical(&s, &cam, &Pose::identity()).unwrap();
        assert_abs_diff_eq!(r.depth.get(20, 15), 1.7, epsilon = 1e-4);
        assert_abs_diff_eq!(r.depth.get(3, 4), 1.7, epsilon = 1e-4);
    }

    #[test]
    fn single_level_full_step_gives_four_poses() {
        let p = SweepParams { pitch_levels: vec![0.5], angular_step: 10.0, ..SweepParams::default() };
        let traj = sweep_trajectory(&p, 0.01).unwrap();
        assert_eq!(traj.len(), 4);
        let yaw = |pose: &Pose| pose.rotation()[(1, 0)].atan2(pose.rotation()[(0, 0)]);
        let yaws: Vec<f64> = traj.iter().map(|(_, p)| yaw(p)).collect();
        for (got, want) in yaws.iter().zip([p.yaw_min, p.yaw_max, p.yaw_max, p.yaw_min]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn default_sweep_has_six_alternating_passes() {
        let p = SweepParams::default();
        let traj = sweep_trajectory(&p, 0.01).unwrap();
        let n = p.samples_per_pass();
        assert_eq!(n, 71);
        assert_eq!(traj.len(), 6 * n);
        for pass in 0..6 {
            let chunk = &traj[pass * n..(pass + 1) * n];
            let y0 = chunk[0].1.rotation()[(1, 0)].atan2(chunk[0].1.rotation()[(0, 0)]);
            let y1 = chunk[n - 1].1.rotation()[(1, 0)].atan2(chunk[n - 1].1.rotation()[(0, 0)]);
            assert_eq!(y1 > y0, pass % 2 == 0);
        }
        for w in traj.windows(2) {
            assert!(w[0].1.translation_distance(&w[1].1) > 0.01);
            assert_abs_diff_eq!(w[1].0 - w[0].0, 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn sweep_rejects_poses_closer_than_gate() {
        let p = SweepParams { angular_step: 0.001, ..SweepParams::default() };
        assert!(sweep_trajectory(&p, 0.01).is_err());
        let p = SweepParams { pitch_levels: vec![], ..SweepParams::default() };
        assert!(sweep_trajectory(&p, 0.01).is_err());
    }

    #[test]
    fn sweep_frusta_cover_workspace() {
        let p = SweepParams::default();
        let traj = sweep_trajectory(&p, 0.01).unwrap();
        let intr = SonarIntrinsics::m1200d();
        let inv: Vec<Pose> = traj.iter().map(|(_, p)| p.inverse()).collect();
        let mut r = rng();
        let n = 4000;
        // the crate plus a 5 cm margin
        let [cx, cy] = CRATE_CENTER;
        let h = 0.5 * CRATE_SIDE + 0.05;
        let covered = (0..n)
            .filter(|_| {
                let q = Vec3::new(r.gen_range(cx - h..cx + h), r.gen_range(cy - h..cy + h), r.gen_range(0.0..2.0 * h));
                inv.iter().any(|pi| intr.contains(&pi.transform_point(&q)))
            })
            .count();
        assert!(covered as f64 / n as f64 >= 0.95, "{covered}/{n}");
    }

    #[test]
    fn look_at_points_boresight_at_target() {
        let eye = Vec3::new(0.1, 0.2, 1.0);
        let target = Vec3::new(0.6, -0.3, 0.2);
        let p = look_at(eye, target).unwrap();
        let local = p.inverse().transform_point(&target);
        assert_abs_diff_eq!(local, Vec3::new((target - eye).norm(), 0.0, 0.0), epsilon = 1e-12);
        assert!(look_at(eye, eye).is_err());
        assert!(look_at(eye, eye - Vec3::z()).is_ok());
    }

    #[test]
    fn visible_voxelization_skips_occluded_surfaces() {
        let mut scene = wall_at(1.0);
        let plate = Pose::from_translation(Vec3::new(0.5, 0.0, 0.0));
        scene.primitives.push(Primitive::new("plate", Shape::Box { half_extents: [0.02, 0.15, 0.15] }, plate, 1.0, [0; 3]));
        let spec = crate::carve::GridSpec::covering([0.0, -1.0, -0.5], [2.0, 1.0, 0.5], 0.05).unwrap();
        let intr = SonarIntrinsics { n_beams: 64, n_range_bins: 100, ..SonarIntrinsics::m1200d() };
        let vis = voxelize_visible_surface(&scene, &[Pose::identity()], &intr, 8, &spec);
        let all = voxelize_surface(&scene, &spec);
        let marked: Vec<usize> = (0..vis.len()).filter(|&i| vis[i]).collect();
        assert!(marked.len() > 50);
        assert!(marked.iter().all(|&i| all[i]));
        // the wall patch in the plate's shadow is surface, but never seen
        let shadow = spec.locate(&Vec3::new(0.99, 0.01, 0.01)).unwrap();
        let idx = spec.index(shadow[0], shadow[1], shadow[2]);
        assert!(all[idx] && !vis[idx]);
        let lit = spec.locate(&Vec3::new(0.99, 0.6, 0.01)).unwrap();
        assert!(vis[spec.index(lit[0], lit[1], lit[2])]);
    }

    #[test]
    fn surface_voxelization_marks_shell_only() {
        let spec = crate::carve::GridSpec::covering([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5], 0.1).unwrap();
        let s = Scene {
            primitives: vec![Primitive::new("s", Shape::Sphere { radius: 0.3 }, Pose::identity(), 1.0, [0; 3])],
            background: [0; 3],
        };
        let occ = voxelize_surface(&s, &spec);
        let center = spec.locate(&Vec3::new(0.01, 0.01, 0.01)).unwrap();
        assert!(!occ[spec.index(center[0], center[1], center[2])]);
        let edge = spec.locate(&Vec3::new(0.3, 0.01, 0.01)).unwrap();
        assert!(occ[spec.index(edge[0], edge[1], edge[2])]);
    }

    #[test]
    fn scene_serde_round_trip() {
        let s = tank_scene();
        let json = serde_json::to_string(&s).unwrap();
        let back: Scene = serde_json::from_str(&json).unwrap();
        assert_eq!(back.primitives.len(), 3);
        assert!(back.validate().is_ok());
        for (a, b) in s.primitives.iter().zip(&back.primitives) {
            assert!(a.pose.translation_distance(&b.pose) < 1e-12);
            assert_eq!(a.shape, b.shape);
        }
    }
}
