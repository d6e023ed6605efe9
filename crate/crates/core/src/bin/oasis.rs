use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use oasis::io::{self, FrameLog, PlyFormat};
use oasis::pipeline::{self, PipelineConfig};
use oasis::Result;

#[derive(Parser)]
#[command(name = "oasis", version, about = "Opti-acoustic voxel carving and fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a simulated sweep and optical close-ups into a frame log.
    Simulate {
        #[arg(long, default_value = "tank")]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Carve the sonar frames of a log into an occupancy grid.
    Reconstruct {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Mesh a grid and project the log's optical frames onto it.
    Fuse {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Time frame integration across voxel sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.04,0.03,0.02,0.01")]
        voxel_sizes: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Convert a saved grid to PLY (occupied voxel centers, or a mesh).
    Export {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        ply: PathBuf,
        /// Write the smoothed surface mesh instead of voxel centers.
        #[arg(long)]
        mesh: bool,
        #[arg(long)]
        ascii: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    t_r: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.voxel_size {
            cfg.carve.voxel_size = v;
        }
        if let Some(t) = self.t_r {
            cfg.carve.t_r = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { scene, out, seed, common } => {
            let cfg = common.load()?;
            let m = pipeline::simulate(&out, &scene, seed, &cfg)?;
            info!("wrote {} sonar and {} optical frames to {}", m.sonar_frames, m.optical_frames, out.display());
        }
        Command::Reconstruct { log, out, common } => {
            let cfg = common.load()?;
            let log = FrameLog::open(&log)?;
            let res = pipeline::run_reconstruct(&log, &cfg)?;
            pipeline::export_reconstruction(&out, &res, &cfg)?;
            info!(
                "processed {} frames ({} gated, {} skipped), {} voxels occupied",
                res.processed,
                res.gated,
                res.skipped.len(),
                res.snapshot.occupied_count()
            );
            if let Some(mean) = res.timing.mean_seconds() {
                info!("mean {:.4} s/frame ({:.1} FPS)", mean, 1.0 / mean);
            }
        }
        Command::Fuse { log, grid, out, common } => {
            let cfg = common.load()?;
            let log = FrameLog::open(&log)?;
            let snap = io::load_grid(&grid)?;
            let res = pipeline::run_fuse(&log, &snap, &cfg)?;
            pipeline::export_fusion(&out, &res, &cfg)?;
            info!("mesh has {} triangles, cloud has {} points", res.mesh.triangles.len(), res.cloud.len());
        }
        Command::Bench { voxel_sizes, frames, csv, seed, common } => {
            let cfg = common.load()?;
            let rows = pipeline::run_bench(&cfg, &voxel_sizes, frames, seed)?;
            print!("{}", pipeline::bench_table(&rows));
            if let Some(path) = csv {
                std::fs::write(&path, pipeline::bench_csv(&rows)?)?;
            }
        }
        Command::Export { grid, ply, mesh, ascii, common } => {
            let cfg = common.load()?;
            let fmt = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
            export(&grid, &ply, mesh, fmt, &cfg)?;
        }
    }
    Ok(())
}

fn export(grid: &Path, ply: &Path, mesh: bool, fmt: PlyFormat, cfg: &PipelineConfig) -> Result<()> {
    let snap = io::load_grid(grid)?;
    if mesh {
        let m = pipeline::mesh_snapshot(&snap, &cfg.mesh)?;
        io::write_file(ply, |w| io::write_mesh_ply(&m, fmt, w))
    } else {
        let pts = snap.occupied_centers();
        if pts.is_empty() {
            log::warn!("{} has no occupied voxels", grid.display());
        }
        io::write_file(ply, |w| io::write_points_ply(&pts, fmt, w))
    }
}
