//! File formats: sonar PGM, optical PNG/PPM, the frame-log index, the grid
//! blob, and PLY export of meshes and point clouds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use crate::carve::{GridSnapshot, GridSpec};
use crate::error::{Error, Result};
use crate::fusion::ColoredPointCloud;
use crate::geometry::{PoseRecord, SonarIntrinsics, Vec3};
use crate::mesh::TriangleMesh;
use crate::sonar::SonarFrame;

pub const INDEX_FILE: &str = "index.jsonl";

/// Loads an 8-bit grayscale sonar image; rows are range bins, columns beams.
pub fn read_sonar_image(path: &Path, intr: &SonarIntrinsics) -> Result<Vec<u8>> {
    let img = image::open(path)?.into_luma8();
    let dims = (img.height() as usize, img.width() as usize);
    if dims != (intr.n_range_bins, intr.n_beams) {
        return Err(Error::malformed(
            path,
            format!("image is {}x{}, sensor expects {}x{}", dims.0, dims.1, intr.n_range_bins, intr.n_beams),
        ));
    }
    Ok(img.into_raw())
}

/// Writes a binary PGM.
pub fn write_sonar_image(frame: &SonarFrame, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    PnmEncoder::new(w)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(frame.data(), frame.cols() as u32, frame.rows() as u32, ExtendedColorType::L8)?;
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.into_rgb8())
}

/// Format follows the extension (`.png`, `.ppm`).
pub fn write_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)?.into_luma8())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Sonar,
    Optical,
}

/// One line of the frame-log index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub kind: FrameKind,
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
    /// Image path relative to the log directory.
    pub path: String,
    /// Optional precomputed foreground mask for optical frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// A frame-log directory and its parsed index.
#[derive(Debug, Clone)]
pub struct FrameLog {
    pub dir: PathBuf,
    pub records: Vec<FrameRecord>,
}

impl FrameLog {
    pub fn open(dir: &Path) -> Result<Self> {
        let index = dir.join(INDEX_FILE);
        let reader = BufReader::new(File::open(&index)?);
        let mut records: Vec<FrameRecord> = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FrameRecord = serde_json::from_str(&line)
                .map_err(|e| Error::malformed(&index, format!("line {}: {e}", n + 1)))?;
            if let Some(prev) = records.last() {
                if rec.timestamp < prev.timestamp {
                    return Err(Error::malformed(&index, format!("line {}: timestamp goes backwards", n + 1)));
                }
            }
            records.push(rec);
        }
        Ok(Self { dir: dir.to_path_buf(), records })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn count(&self, kind: FrameKind) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }
}

/// Appends records to a new index file.
pub struct FrameLogWriter {
    dir: PathBuf,
    out: BufWriter<File>,
}

impl FrameLogWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), out: BufWriter::new(File::create(dir.join(INDEX_FILE))?) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, rec: &FrameRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

const GRID_MAGIC: &[u8; 4] = b"OASG";
const GRID_VERSION: u32 = 1;

/// Writes a snapshot as: magic, version, origin, dims, voxel size, t_r, frame
/// count, run-length occupancy (alternating runs starting with free), then the
/// raw g_obs and g_occ counters. All little-endian.
pub fn write_grid<W: Write>(snap: &GridSnapshot, mut w: W) -> Result<()> {
    w.write_all(GRID_MAGIC)?;
    w.write_u32::<LittleEndian>(GRID_VERSION)?;
    for o in snap.spec.origin {
        w.write_f64::<LittleEndian>(o)?;
    }
    for d in snap.spec.dims {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    w.write_f64::<LittleEndian>(snap.spec.voxel_size)?;
    w.write_f64::<LittleEndian>(snap.t_r)?;
    w.write_u64::<LittleEndian>(snap.frames)?;
    let runs = run_lengths(&snap.occupied);
    w.write_u64::<LittleEndian>(runs.len() as u64)?;
    for r in runs {
        w.write_u64::<LittleEndian>(r)?;
    }
    for &c in &snap.g_obs {
        w.write_u16::<LittleEndian>(c)?;
    }
    for &c in &snap.g_occ {
        w.write_u16::<LittleEndian>(c)?;
    }
    Ok(())
}

fn run_lengths(bits: &[bool]) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut cur = false;
    let mut n = 0u64;
    for &b in bits {
        if b == cur {
            n += 1;
        } else {
            runs.push(n);
            cur = b;
            n = 1;
        }
    }
    runs.push(n);
    runs
}

pub fn save_grid(snap: &GridSnapshot, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(snap, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R, path: &Path) -> Result<GridSnapshot> {
    let bad = |reason: &str| Error::malformed(path, reason.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(bad("not a grid file"));
    }
    if r.read_u32::<LittleEndian>()? != GRID_VERSION {
        return Err(bad("unsupported grid version"));
    }
    let mut origin = [0.0; 3];
    for o in &mut origin {
        *o = r.read_f64::<LittleEndian>()?;
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = usize::try_from(r.read_u64::<LittleEndian>()?).map_err(|_| bad("dimension overflow"))?;
    }
    let voxel_size = r.read_f64::<LittleEndian>()?;
    let t_r = r.read_f64::<LittleEndian>()?;
    let frames = r.read_u64::<LittleEndian>()?;
    let spec = GridSpec { origin, dims, voxel_size };
    spec.validate().map_err(|e| bad(&e.to_string()))?;
    let n = spec.len();
    let n_runs = r.read_u64::<LittleEndian>()?;
    if n_runs as u128 > n as u128 + 1 {
        return Err(bad("too many occupancy runs"));
    }
    let mut occupied = Vec::with_capacity(n);
    let mut cur = false;
    for _ in 0..n_runs {
        let len = r.read_u64::<LittleEndian>()?;
        if occupied.len() as u128 + len as u128 > n as u128 {
            return Err(bad("occupancy runs exceed grid size"));
        }
        occupied.extend(std::iter::repeat_n(cur, len as usize));
        cur = !cur;
    }
    if occupied.len() != n {
        return Err(bad("occupancy runs do not cover the grid"));
    }
    let mut g_obs = vec![0u16; n];
    let mut g_occ = vec![0u16; n];
    r.read_u16_into::<LittleEndian>(&mut g_obs)?;
    r.read_u16_into::<LittleEndian>(&mut g_occ)?;
    let snap = GridSnapshot::from_counts(spec, t_r, g_obs, g_occ, frames).map_err(|e| bad(&e.to_string()))?;
    if snap.occupied != occupied {
        return Err(bad("stored occupancy disagrees with counters"));
    }
    Ok(snap)
}

pub fn load_grid(path: &Path) -> Result<GridSnapshot> {
    read_grid(BufReader::new(File::open(path)?), path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

impl PlyFormat {
    fn header_name(self) -> &'static str {
        match self {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        }
    }
}

fn write_header(w: &mut impl Write, format: PlyFormat, n_vertices: usize, color: bool, n_faces: Option<usize>) -> Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format {} 1.0", format.header_name())?;
    writeln!(w, "element vertex {n_vertices}")?;
    for c in ["x", "y", "z"] {
        writeln!(w, "property float {c}")?;
    }
    if color {
        for c in ["red", "green", "blue"] {
            writeln!(w, "property uchar {c}")?;
        }
    }
    if let Some(f) = n_faces {
        writeln!(w, "element face {f}")?;
        writeln!(w, "property list uchar int vertex_indices")?;
    }
    writeln!(w, "end_header")?;
    Ok(())
}

fn write_vertex(w: &mut impl Write, format: PlyFormat, p: &Vec3, color: Option<[u8; 3]>) -> Result<()> {
    let xyz = [p.x as f32, p.y as f32, p.z as f32];
    match format {
        PlyFormat::Ascii => {
            write!(w, "{} {} {}", xyz[0], xyz[1], xyz[2])?;
            if let Some(c) = color {
                write!(w, " {} {} {}", c[0], c[1], c[2])?;
            }
            writeln!(w)?;
        }
        PlyFormat::BinaryLittleEndian => {
            for v in xyz {
                w.write_f32::<LittleEndian>(v)?;
            }
            if let Some(c) = color {
                w.write_all(&c)?;
            }
        }
    }
    Ok(())
}

/// Mesh PLY; triangles keep their counterclockwise-from-outside winding.
pub fn write_mesh_ply<W: Write>(mesh: &TriangleMesh, format: PlyFormat, mut w: W) -> Result<()> {
    write_header(&mut w, format, mesh.vertices.len(), false, Some(mesh.triangles.len()))?;
    for v in &mesh.vertices {
        write_vertex(&mut w, format, v, None)?;
    }
    for t in &mesh.triangles {
        match format {
            PlyFormat::Ascii => writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?,
            PlyFormat::BinaryLittleEndian => {
                w.write_u8(3)?;
                for &i in t {
                    w.write_i32::<LittleEndian>(i as i32)?;
                }
            }
        }
    }
    Ok(())
}

/// Binary PLY with per-vertex RGB.
pub fn write_cloud_ply<W: Write>(cloud: &ColoredPointCloud, format: PlyFormat, mut w: W) -> Result<()> {
    write_header(&mut w, format, cloud.len(), true, None)?;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        write_vertex(&mut w, format, p, Some(*c))?;
    }
    Ok(())
}

/// Uncolored points, e.g. occupied voxel centers.
pub fn write_points_ply<W: Write>(points: &[Vec3], format: PlyFormat, mut w: W) -> Result<()> {
    write_header(&mut w, format, points.len(), false, None)?;
    for p in points {
        write_vertex(&mut w, format, p, None)?;
    }
    Ok(())
}

/// Opens `path` for writing and hands a buffered writer to `f`.
pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
