#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use oasis::carve::{GridSnapshot, GridSpec};
use oasis::geometry::{Pose, PoseRecord};
use oasis::io::{self, FrameKind, FrameLogWriter, FrameRecord};
use oasis::pipeline::PipelineConfig;
use oasis::sim::{Scene, SweepParams};
use oasis::sonar::SonarFrame;

/// One pitch level at a coarse yaw step: a fast stand-in for the full sweep.
pub fn quick_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    let d = PI / 180.0;
    cfg.simulation.sweep = SweepParams { pitch_levels: vec![30.0 * d], angular_step: 10.0 * d, ..SweepParams::default() };
    cfg.simulation.elevation_samples = 8;
    cfg
}

pub fn sonar_record(path: &str, t: f64, pose: Option<&Pose>) -> FrameRecord {
    FrameRecord { kind: FrameKind::Sonar, timestamp: t, pose: pose.map(PoseRecord::from), path: path.into(), mask: None }
}

/// Writes `frames` as a sonar-only log.
pub fn write_sonar_log(dir: &Path, frames: &[SonarFrame]) {
    let mut log = FrameLogWriter::create(dir).unwrap();
    for (i, f) in frames.iter().enumerate() {
        let name = format!("s{i:04}.pgm");
        io::write_sonar_image(f, &dir.join(&name)).unwrap();
        log.append(&sonar_record(&name, i as f64 * 0.1, Some(&f.pose))).unwrap();
    }
    log.finish().unwrap();
}

/// Solid occupancy of `scene` sampled at voxel centers, as a one-frame snapshot.
pub fn solid_snapshot(scene: &Scene, spec: &GridSpec) -> GridSnapshot {
    let n = spec.len();
    let occ: Vec<u16> = (0..n)
        .map(|idx| {
            let [i, j, k] = spec.coords(idx);
            u16::from(scene.distance(&spec.center(i, j, k)) <= 0.0)
        })
        .collect();
    GridSnapshot::from_counts(*spec, 0.5, vec![1; n], occ, 1).unwrap()
}
