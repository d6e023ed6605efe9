//! End-to-end driver: configuration, dataset simulation, streaming
//! reconstruction from a frame log, optical fusion and the voxel-size benchmark.

use std::path::Path;
use std::time::Instant;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carve::{CarveConfig, Carver, GridSnapshot, GridSpec, VoxelGrid, VoxelTemplate};
use crate::error::{Error, Result};
use crate::fusion::{fuse_frame, Bvh, ColoredPointCloud, Mask, MaskConfig, OpticalFrame};
use crate::geometry::{camera_axes_to_body, CameraIntrinsics, Pose, PoseRecord, SonarIntrinsics, Vec3};
use crate::io::{self, FrameKind, FrameLog, FrameLogWriter, FrameRecord, PlyFormat};
use crate::mesh::{marching_cubes, smooth, TriangleMesh, DEFAULT_SMOOTH_ITERATIONS, DEFAULT_SMOOTH_LAMBDA};
use crate::sim::{self, Scene, SonarNoiseModel, SweepParams};
use crate::sonar::{binarize, estimate_background, BinaryPolarMap, SonarFrame, DEFAULT_BACKGROUND_BINS, DEFAULT_HALF_WINDOW};

/// Frames excluded from timing means.
pub const WARMUP_FRAMES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub half_window: usize,
    pub background_bins: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { half_window: DEFAULT_HALF_WINDOW, background_bins: DEFAULT_BACKGROUND_BINS }
    }
}

/// Axis-aligned reconstruction volume in world meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Workspace {
    /// The default tank with a little margin.
    fn default() -> Self {
        Self { min: [-1.2, -1.2, -0.1], max: [1.2, 1.2, 1.6] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshConfig {
    pub smooth_iterations: usize,
    pub smooth_lambda: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { smooth_iterations: DEFAULT_SMOOTH_ITERATIONS, smooth_lambda: DEFAULT_SMOOTH_LAMBDA }
    }
}

/// Output file names, relative to the command's output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub ply_format: PlyFormat,
    pub grid: String,
    pub occupied: String,
    pub timing: String,
    pub mesh: String,
    pub cloud: String,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            ply_format: PlyFormat::BinaryLittleEndian,
            grid: "grid.oasg".into(),
            occupied: "occupied.ply".into(),
            timing: "timing.csv".into(),
            mesh: "mesh.ply".into(),
            cloud: "cloud.ply".into(),
        }
    }
}

/// A close-up camera placement for simulated optical frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalView {
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub sweep: SweepParams,
    pub noise: SonarNoiseModel,
    pub elevation_samples: usize,
    pub optical_views: Vec<OpticalView>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let [cx, cy] = sim::CRATE_CENTER;
        let target = [cx, cy, sim::CRATE_SIDE / 2.0];
        Self {
            sweep: SweepParams::default(),
            noise: SonarNoiseModel::typical(),
            elevation_samples: sim::DEFAULT_ELEVATION_SAMPLES,
            optical_views: vec![
                OpticalView { eye: [cx - 0.55, cy - 0.15, 0.75], target },
                OpticalView { eye: [cx - 0.35, cy + 0.45, 0.7], target },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sonar: SonarIntrinsics,
    pub camera: CameraIntrinsics,
    /// Sonar←camera transform; logged optical poses are sonar (wrist) poses.
    pub camera_extrinsic: Pose,
    pub carve: CarveConfig,
    pub preprocess: PreprocessConfig,
    pub workspace: Workspace,
    pub mask: MaskConfig,
    pub mesh: MeshConfig,
    pub export: ExportConfig,
    pub simulation: SimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sonar: SonarIntrinsics::default(),
            camera: CameraIntrinsics::default(),
            camera_extrinsic: Pose::new(camera_axes_to_body(), Vec3::new(0.0, 0.0, -0.05)).expect("axis permutation"),
            carve: CarveConfig::default(),
            preprocess: PreprocessConfig::default(),
            workspace: Workspace::default(),
            mask: MaskConfig::default(),
            mesh: MeshConfig::default(),
            export: ExportConfig::default(),
            simulation: SimConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every violation is reported as a configuration error.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.sonar.validate().map_err(cfg_err)?;
        self.camera.validate().map_err(cfg_err)?;
        self.camera_extrinsic.validate().map_err(cfg_err)?;
        self.carve.validate().map_err(cfg_err)?;
        self.grid_spec().map_err(cfg_err)?;
        if self.preprocess.background_bins == 0 {
            return Err(Error::Config("preprocess.background_bins must be at least 1".into()));
        }
        if self.mesh.smooth_iterations > 0 && !(self.mesh.smooth_lambda > 0.0 && self.mesh.smooth_lambda < 1.0) {
            return Err(Error::Config("mesh.smooth_lambda must lie in (0, 1)".into()));
        }
        if let MaskConfig::ColorThreshold { threshold, .. } = self.mask {
            if !(threshold >= 0.0) {
                return Err(Error::Config("mask threshold must be non-negative".into()));
            }
        }
        self.simulation.sweep.validate().map_err(cfg_err)?;
        self.simulation.noise.validate().map_err(cfg_err)?;
        if self.simulation.elevation_samples == 0 {
            return Err(Error::Config("simulation.elevation_samples must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::covering(self.workspace.min, self.workspace.max, self.carve.voxel_size)
    }

    /// World←camera pose for a logged sonar-frame pose.
    pub fn camera_pose(&self, sensor_pose: &Pose) -> Pose {
        sensor_pose.compose(&self.camera_extrinsic)
    }
}

/// Background estimate plus binarization.
pub fn preprocess(frame: &SonarFrame, cfg: &PreprocessConfig) -> Result<BinaryPolarMap> {
    let bg = estimate_background(frame, cfg.background_bins)?;
    Ok(binarize(frame, &bg, cfg.half_window))
}

/// Per-frame wall times of processed frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingReport {
    pub frame_seconds: Vec<f64>,
}

impl TimingReport {
    /// Frames counted in the mean: all but the warm-up, or all when there are
    /// no more frames than the warm-up.
    fn measured(&self) -> &[f64] {
        if self.frame_seconds.len() > WARMUP_FRAMES {
            &self.frame_seconds[WARMUP_FRAMES..]
        } else {
            &self.frame_seconds
        }
    }

    pub fn mean_seconds(&self) -> Option<f64> {
        let m = self.measured();
        (!m.is_empty()).then(|| m.iter().sum::<f64>() / m.len() as f64)
    }

    pub fn fps(&self) -> Option<f64> {
        self.mean_seconds().map(|s| 1.0 / s)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["frame", "seconds"]).map_err(csv_err)?;
        for (i, s) in self.frame_seconds.iter().enumerate() {
            w.write_record([i.to_string(), format!("{s:.6}")]).map_err(csv_err)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("ascii"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone)]
pub struct ReconstructOutput {
    pub snapshot: GridSnapshot,
    pub timing: TimingReport,
    pub processed: usize,
    /// Sonar frames dropped by the motion gate.
    pub gated: usize,
    /// (record index, reason) for sonar frames that could not be read.
    pub skipped: Vec<(usize, String)>,
}

/// Streams the log's sonar frames through gate, preprocessing and integration in order.
pub fn run_reconstruct(log: &FrameLog, cfg: &PipelineConfig) -> Result<ReconstructOutput> {
    cfg.validate()?;
    let template = VoxelTemplate::build(&cfg.sonar, cfg.carve.voxel_size)?;
    run_reconstruct_with(log, cfg, template)
}

/// [`run_reconstruct`] with a prebuilt template.
pub fn run_reconstruct_with(log: &FrameLog, cfg: &PipelineConfig, template: VoxelTemplate) -> Result<ReconstructOutput> {
    let mut carver = Carver::with_template(template, cfg.grid_spec()?, cfg.carve)?;
    let mut timing = TimingReport::default();
    let (mut processed, mut gated) = (0, 0);
    let mut skipped = Vec::new();
    for (index, rec) in log.records.iter().enumerate() {
        if rec.kind != FrameKind::Sonar {
            continue;
        }
        let pose: Pose = rec.pose.ok_or(Error::MissingPose { index })?.try_into()?;
        if !carver.should_process(&pose) {
            gated += 1;
            continue;
        }
        let data = match io::read_sonar_image(&log.resolve(&rec.path), &cfg.sonar) {
            Ok(d) => d,
            Err(e) => {
                warn!("skipping sonar frame {index}: {e}");
                skipped.push((index, e.to_string()));
                continue;
            }
        };
        let frame = SonarFrame::new(data, cfg.sonar, rec.timestamp, pose)?;
        let t0 = Instant::now();
        let map = preprocess(&frame, &cfg.preprocess)?;
        carver.process(&map, &pose)?;
        timing.frame_seconds.push(t0.elapsed().as_secs_f64());
        processed += 1;
    }
    Ok(ReconstructOutput { snapshot: carver.snapshot(), timing, processed, gated, skipped })
}

#[derive(Debug, Clone)]
pub struct FuseOutput {
    pub mesh: TriangleMesh,
    pub cloud: ColoredPointCloud,
    /// Points contributed by each fused optical frame, in log order.
    pub frame_points: Vec<usize>,
}

/// Meshes and smooths the snapshot once, then back-projects every optical frame onto it.
pub fn run_fuse(log: &FrameLog, snapshot: &GridSnapshot, cfg: &PipelineConfig) -> Result<FuseOutput> {
    cfg.validate()?;
    let mesh = mesh_snapshot(snapshot, &cfg.mesh)?;
    let bvh = Bvh::build(&mesh);
    let mut cloud = ColoredPointCloud::default();
    let mut frame_points = Vec::new();
    for (index, rec) in log.records.iter().enumerate() {
        if rec.kind != FrameKind::Optical {
            continue;
        }
        let pose: Pose = rec.pose.ok_or(Error::MissingPose { index })?.try_into()?;
        let frame = match load_optical(log, rec, cfg, &pose) {
            Ok(f) => f,
            Err(e) => {
                warn!("skipping optical frame {index}: {e}");
                continue;
            }
        };
        let external = match &rec.mask {
            Some(m) => match io::read_mask(&log.resolve(m)) {
                Ok(img) => Some(Mask::from_luma(&img)),
                Err(e) => {
                    warn!("skipping optical frame {index}: mask: {e}");
                    continue;
                }
            },
            None => None,
        };
        let part = fuse_frame(&bvh, &frame, &cfg.mask, external.as_ref())?;
        frame_points.push(part.len());
        cloud.extend(part);
    }
    Ok(FuseOutput { mesh, cloud, frame_points })
}

fn load_optical(log: &FrameLog, rec: &FrameRecord, cfg: &PipelineConfig, pose: &Pose) -> Result<OpticalFrame> {
    let path = log.resolve(&rec.path);
    let img = io::read_rgb(&path)?;
    OpticalFrame::new(img, cfg.camera, cfg.camera_pose(pose), rec.timestamp)
        .map_err(|e| Error::malformed(&path, e.to_string()))
}

pub fn mesh_snapshot(snapshot: &GridSnapshot, cfg: &MeshConfig) -> Result<TriangleMesh> {
    let raw = marching_cubes(snapshot);
    if cfg.smooth_iterations == 0 {
        return Ok(raw);
    }
    smooth(&raw, cfg.smooth_iterations, cfg.smooth_lambda)
}

/// Ground truth written next to a simulated log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene_name: String,
    pub seed: u64,
    pub scene: Scene,
    pub crate_side: f64,
    pub tank_inner_diameter: f64,
    pub sonar: SonarIntrinsics,
    pub camera: CameraIntrinsics,
    pub camera_extrinsic: Pose,
    pub sonar_frames: usize,
    pub optical_frames: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scene_by_name(name: &str) -> Result<Scene> {
    match name {
        "tank" => Ok(sim::tank_scene()),
        other => Err(Error::Config(format!("unknown scene '{other}' (available: tank)"))),
    }
}

/// Independent, reproducible noise stream per frame.
fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

/// Renders the sweep and the optical close-ups into a frame-log directory.
pub fn simulate(out: &Path, scene_name: &str, seed: u64, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let scene = scene_by_name(scene_name)?;
    let sim_cfg = &cfg.simulation;
    let traj = sim::sweep_trajectory(&sim_cfg.sweep, cfg.carve.motion_gate)?;
    let mut log = FrameLogWriter::create(out)?;
    for (i, (t, pose)) in traj.iter().enumerate() {
        let mut rng = frame_rng(seed, i);
        let frame = sim::render_sonar(&scene, pose, &cfg.sonar, &sim_cfg.noise, sim_cfg.elevation_samples, &mut rng)?;
        let name = format!("sonar_{i:05}.pgm");
        io::write_sonar_image(&frame, &out.join(&name))?;
        log.append(&FrameRecord { kind: FrameKind::Sonar, timestamp: *t, pose: Some(PoseRecord::from(pose)), path: name, mask: None })?;
    }
    let t_end = traj.last().map_or(0.0, |(t, _)| *t);
    for (i, view) in sim_cfg.optical_views.iter().enumerate() {
        let sensor = sim::look_at(Vec3::from(view.eye), Vec3::from(view.target))?;
        let render = sim::render_optical(&scene, &cfg.camera, &cfg.camera_pose(&sensor))?;
        let name = format!("optical_{i:03}.png");
        io::write_rgb(&render.frame.pixels, &out.join(&name))?;
        log.append(&FrameRecord {
            kind: FrameKind::Optical,
            timestamp: t_end + 1.0 + i as f64,
            pose: Some(PoseRecord::from(&sensor)),
            path: name,
            mask: None,
        })?;
    }
    log.finish()?;
    let manifest = Manifest {
        scene_name: scene_name.to_string(),
        seed,
        scene,
        crate_side: sim::CRATE_SIDE,
        tank_inner_diameter: sim::TANK_INNER_DIAMETER,
        sonar: cfg.sonar,
        camera: cfg.camera,
        camera_extrinsic: cfg.camera_extrinsic,
        sonar_frames: traj.len(),
        optical_frames: sim_cfg.optical_views.len(),
    };
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub voxel_size: f64,
    pub mean_seconds: f64,
    pub fps: f64,
    pub frames: usize,
    pub template_voxels: usize,
}

/// Sweep poses spread evenly over the trajectory, `frames` of them.
pub fn bench_poses(sweep: &SweepParams, frames: usize) -> Result<Vec<Pose>> {
    let traj = sim::sweep_trajectory(sweep, 0.0)?;
    Ok((0..frames).map(|i| traj[i * traj.len() / frames.max(1) % traj.len()].1).collect())
}

/// Simulated, preprocessed frames shared by every voxel size of a benchmark.
pub fn bench_frames(cfg: &PipelineConfig, frames: usize, seed: u64) -> Result<Vec<(BinaryPolarMap, Pose)>> {
    let scene = sim::tank_scene();
    let s = &cfg.simulation;
    bench_poses(&s.sweep, frames)?
        .into_iter()
        .enumerate()
        .map(|(i, pose)| {
            let f = sim::render_sonar(&scene, &pose, &cfg.sonar, &s.noise, s.elevation_samples, &mut frame_rng(seed, i))?;
            Ok((preprocess(&f, &cfg.preprocess)?, pose))
        })
        .collect()
}

/// Times integration of a fixed frame set at each voxel size.
pub fn run_bench(cfg: &PipelineConfig, voxel_sizes: &[f64], frames: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if voxel_sizes.len() < 2 {
        return Err(Error::Config("benchmark needs at least two voxel sizes".into()));
    }
    if frames == 0 {
        return Err(Error::Config("benchmark needs at least one frame".into()));
    }
    cfg.validate()?;
    let set = bench_frames(cfg, frames, seed)?;
    voxel_sizes.iter().map(|&v| bench_voxel_size(cfg, &set, v)).collect()
}

pub fn bench_voxel_size(cfg: &PipelineConfig, set: &[(BinaryPolarMap, Pose)], voxel_size: f64) -> Result<BenchRow> {
    let template = VoxelTemplate::build(&cfg.sonar, voxel_size)?;
    let spec = GridSpec::covering(cfg.workspace.min, cfg.workspace.max, voxel_size)?;
    let mut grid = VoxelGrid::new(spec, cfg.carve.t_r)?;
    let mut timing = TimingReport::default();
    for (map, pose) in set {
        let t0 = Instant::now();
        grid.integrate(&template, map, pose)?;
        timing.frame_seconds.push(t0.elapsed().as_secs_f64());
    }
    let mean = timing.mean_seconds().unwrap_or(0.0);
    Ok(BenchRow { voxel_size, mean_seconds: mean, fps: 1.0 / mean, frames: set.len(), template_voxels: template.len() })
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["voxel_size_m", "seconds_per_frame", "fps", "frames", "template_voxels"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            format!("{}", r.voxel_size),
            format!("{:.6}", r.mean_seconds),
            format!("{:.3}", r.fps),
            r.frames.to_string(),
            r.template_voxels.to_string(),
        ])
        .map_err(csv_err)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("ascii"))
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>14}  {:>16}  {:>10}\n", "voxel size (m)", "time/frame (s)", "FPS");
    for r in rows {
        s.push_str(&format!("{:>14.3}  {:>16.6}  {:>10.2}\n", r.voxel_size, r.mean_seconds, r.fps));
    }
    s
}

/// Least-squares slope of ln(time) against ln(1 / voxel size).
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((1.0 / r.voxel_size).ln(), r.mean_seconds.ln())).collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Symmetric Hausdorff distance between two voxel sets of the same grid, in voxel units.
/// `None` when either set is empty.
pub fn hausdorff_voxels(spec: &GridSpec, a: &[bool], b: &[bool]) -> Option<f64> {
    let pts = |m: &[bool]| -> Vec<[i64; 3]> {
        m.iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(i, _)| spec.coords(i).map(|c| c as i64))
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[[i64; 3]], to_mask: &[bool], to: &[[i64; 3]]| -> i64 {
        let mut worst = 0i64;
        for p in from {
            if to_mask[spec.index(p[0] as usize, p[1] as usize, p[2] as usize)] {
                continue;
            }
            let best = to
                .iter()
                .map(|q| (0..3).map(|k| (p[k] - q[k]).pow(2)).sum::<i64>())
                .min()
                .unwrap_or(i64::MAX);
            worst = worst.max(best);
        }
        worst
    };
    let d2 = directed(&pa, b, &pb).max(directed(&pb, a, &pa));
    Some((d2 as f64).sqrt())
}

/// Writes the reconstruction artifacts into `out`.
pub fn export_reconstruction(out: &Path, result: &ReconstructOutput, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    io::save_grid(&result.snapshot, &out.join(&cfg.export.grid))?;
    let centers = result.snapshot.occupied_centers();
    io::write_file(&out.join(&cfg.export.occupied), |w| io::write_points_ply(&centers, cfg.export.ply_format, w))?;
    std::fs::write(out.join(&cfg.export.timing), result.timing.to_csv()?)?;
    Ok(())
}

pub fn export_fusion(out: &Path, result: &FuseOutput, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let fmt = cfg.export.ply_format;
    io::write_file(&out.join(&cfg.export.mesh), |w| io::write_mesh_ply(&result.mesh, fmt, w))?;
    io::write_file(&out.join(&cfg.export.cloud), |w| io::write_cloud_ply(&result.cloud, PlyFormat::BinaryLittleEndian, w))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let cfg = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.carve, cfg.carve);
        assert_eq!(back.sonar, cfg.sonar);
        assert_eq!(back.mask, cfg.mask);
        assert!(back.camera_extrinsic.translation_distance(&cfg.camera_extrinsic) < 1e-12);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = PipelineConfig::from_toml_str("[carve]\nvoxel_size = 0.04\n[sonar]\nn_beams = 256\n").unwrap();
        assert_eq!(cfg.carve.voxel_size, 0.04);
        assert_eq!(cfg.carve.t_r, 0.5);
        assert_eq!(cfg.sonar.n_beams, 256);
        assert_eq!(cfg.sonar.n_range_bins, 398);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "[carve]\nt_r = 1.5\n",
            "[carve]\nvoxel_size = -1.0\n",
            "[workspace]\nmin = [0.0, 0.0, 0.0]\nmax = [0.0, 1.0, 1.0]\n",
            "[mesh]\nsmooth_lambda = 1.0\n",
            "unknown_key = 3\n",
            "[sonar]\nn_beams = \"many\"\n",
        ] {
            assert!(matches!(PipelineConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn timing_excludes_warmup() {
        let t = TimingReport { frame_seconds: vec![9.0, 9.0, 9.0, 9.0, 9.0, 1.0, 3.0] };
        assert_eq!(t.mean_seconds(), Some(2.0));
        assert_eq!(t.fps(), Some(0.5));
        let short = TimingReport { frame_seconds: vec![2.0, 4.0] };
        assert_eq!(short.mean_seconds(), Some(3.0));
        assert_eq!(TimingReport::default().mean_seconds(), None);
        assert!(t.to_csv().unwrap().starts_with("frame,seconds\n0,9.000000\n"));
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let rows: Vec<BenchRow> = [0.05, 0.04, 0.02]
            .iter()
            .map(|&v| BenchRow { voxel_size: v, mean_seconds: 2.0 * (1.0 / v).powf(2.6), fps: 0.0, frames: 1, template_voxels: 0 })
            .collect();
        assert!((loglog_slope(&rows) - 2.6).abs() < 1e-9);
        let table = bench_table(&rows);
        assert_eq!(table.lines().count(), 4);
        let csv = bench_csv(&rows).unwrap();
        assert!(csv.starts_with("voxel_size_m,seconds_per_frame,fps,frames,template_voxels\n0.05,"));
    }

    #[test]
    fn hausdorff_on_small_sets() {
        let spec = GridSpec { origin: [0.0; 3], dims: [5, 5, 5], voxel_size: 1.0 };
        let mut a = vec![false; 125];
        let mut b = vec![false; 125];
        a[spec.index(0, 0, 0)] = true;
        b[spec.index(0, 0, 0)] = true;
        assert_eq!(hausdorff_voxels(&spec, &a, &b), Some(0.0));
        b[spec.index(3, 4, 0)] = true;
        assert_eq!(hausdorff_voxels(&spec, &a, &b), Some(5.0));
        assert_eq!(hausdorff_voxels(&spec, &a, &[false; 125]), None);
    }

    #[test]
    fn unknown_scene_is_config_error() {
        assert!(matches!(scene_by_name("reef"), Err(Error::Config(_))));
    }
}
