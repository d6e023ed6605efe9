//! C ABI over the oasis engine.
//!
//! Objects cross the boundary as opaque handles created by `*_new` and
//! released by the matching `*_free`. Every fallible call returns an
//! [`OasisStatus`]; on failure, [`oasis_last_error_message`] describes the
//! most recent error on the calling thread. Buffers are owned by the caller
//! and passed with their length in elements.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use oasis::carve::{CarveConfig, Carver, GridSpec};
use oasis::geometry::{Pose, SonarIntrinsics, Vec3};
use oasis::io::{self, PlyFormat};
use oasis::mesh::{marching_cubes, smooth, TriangleMesh};
use oasis::sonar::{binarize, estimate_background, BinaryPolarMap, SonarFrame};
use oasis::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OasisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidParameter = 2,
    ShapeMismatch = 3,
    InvalidPose = 4,
    Io = 5,
    Malformed = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Sonar geometry. Angles in radians, ranges in metres.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OasisSonarIntrinsics {
    pub n_beams: usize,
    pub n_range_bins: usize,
    pub hfov: f64,
    pub vfov: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl From<SonarIntrinsics> for OasisSonarIntrinsics {
    fn from(s: SonarIntrinsics) -> Self {
        Self {
            n_beams: s.n_beams,
            n_range_bins: s.n_range_bins,
            hfov: s.hfov,
            vfov: s.vfov,
            min_range: s.min_range,
            max_range: s.max_range,
        }
    }
}

impl From<OasisSonarIntrinsics> for SonarIntrinsics {
    fn from(s: OasisSonarIntrinsics) -> Self {
        Self {
            n_beams: s.n_beams,
            n_range_bins: s.n_range_bins,
            hfov: s.hfov,
            vfov: s.vfov,
            min_range: s.min_range,
            max_range: s.max_range,
        }
    }
}

/// World-from-sensor pose: translation plus unit quaternion (w, x, y, z).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OasisPose {
    pub translation: [f64; 3],
    pub rotation_wxyz: [f64; 4],
}

/// Axis-aligned voxel grid: min corner, cell counts and edge length.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OasisGridSpec {
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    pub voxel_size: f64,
}

/// Streaming voxel carver (template, grid and motion gate).
pub struct OasisCarver {
    inner: Carver,
    intrinsics: SonarIntrinsics,
}

/// Triangle mesh extracted from a carver.
pub struct OasisMesh {
    inner: TriangleMesh,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> OasisStatus {
    match e {
        Error::InvalidParameter(_) | Error::Config(_) => OasisStatus::InvalidParameter,
        Error::ShapeMismatch { .. } => OasisStatus::ShapeMismatch,
        Error::InvalidPose(_) | Error::MissingPose { .. } => OasisStatus::InvalidPose,
        Error::Io(_) => OasisStatus::Io,
        _ => OasisStatus::Malformed,
    }
}

enum Fail {
    Core(Error),
    Null(&'static str),
    Small { needed: usize, given: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OasisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OasisStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_last_error(format!("{what} is null"));
            OasisStatus::NullPointer
        }
        Ok(Err(Fail::Small { needed, given })) => {
            set_last_error(format!("buffer holds {given} elements, {needed} needed"));
            OasisStatus::BufferTooSmall
        }
        Err(_) => {
            set_last_error("internal panic".into());
            OasisStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, needed: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len < needed {
        return Err(Fail::Small { needed, given: len });
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Error::InvalidParameter("path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn to_pose(p: &OasisPose) -> Result<Pose, Error> {
    Pose::from_quaternion(Vec3::from(p.translation), p.rotation_wxyz)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn oasis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn oasis_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fills `out` with the default sensor (512 beams, 398 bins, 130° x 20°, 2 m).
#[no_mangle]
pub unsafe extern "C" fn oasis_sonar_intrinsics_default(out: *mut OasisSonarIntrinsics) -> OasisStatus {
    guard(|| {
        *deref_mut(out, "out")? = SonarIntrinsics::m1200d().into();
        Ok(())
    })
}

/// Thresholds one row-major (bin, beam) intensity frame into `out` (0 or 1 per pixel).
/// Background statistics come from the first `background_bins` rows.
#[no_mangle]
pub unsafe extern "C" fn oasis_binarize(
    intrinsics: *const OasisSonarIntrinsics,
    intensities: *const u8,
    len: usize,
    background_bins: usize,
    half_window: usize,
    out: *mut u8,
    out_len: usize,
) -> OasisStatus {
    guard(|| {
        let intr: SonarIntrinsics = (*deref(intrinsics, "intrinsics")?).into();
        let data = slice(intensities, len, "intensities")?.to_vec();
        let frame = SonarFrame::new(data, intr, 0.0, Pose::identity())?;
        let bg = estimate_background(&frame, background_bins)?;
        let map = binarize(&frame, &bg, half_window);
        slice_mut(out, out_len, len, "out")?.copy_from_slice(map.data());
        Ok(())
    })
}

/// Grid covering the box `[min, max]` (three doubles each) at `voxel_size`.
#[no_mangle]
pub unsafe extern "C" fn oasis_grid_spec_covering(
    min: *const f64,
    max: *const f64,
    voxel_size: f64,
    out: *mut OasisGridSpec,
) -> OasisStatus {
    guard(|| {
        let corner = |p: *const f64, what| -> Result<[f64; 3], Fail> {
            let s = slice(p, 3, what)?;
            Ok([s[0], s[1], s[2]])
        };
        let s = GridSpec::covering(corner(min, "min")?, corner(max, "max")?, voxel_size)?;
        *deref_mut(out, "out")? = OasisGridSpec { origin: s.origin, dims: s.dims, voxel_size: s.voxel_size };
        Ok(())
    })
}

/// Builds the sensor template and an empty grid. `motion_gate` is the
/// minimum translation (m) between integrated frames.
#[no_mangle]
pub unsafe extern "C" fn oasis_carver_new(
    intrinsics: *const OasisSonarIntrinsics,
    grid: *const OasisGridSpec,
    t_r: f64,
    motion_gate: f64,
    out: *mut *mut OasisCarver,
) -> OasisStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        let intr: SonarIntrinsics = (*deref(intrinsics, "intrinsics")?).into();
        let g = deref(grid, "grid")?;
        let spec = GridSpec { origin: g.origin, dims: g.dims, voxel_size: g.voxel_size };
        spec.validate()?;
        let cfg = CarveConfig { t_r, motion_gate, voxel_size: g.voxel_size };
        let inner = Carver::new(&intr, spec, cfg)?;
        *out = Box::into_raw(Box::new(OasisCarver { inner, intrinsics: intr }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn oasis_carver_free(carver: *mut OasisCarver) {
    if !carver.is_null() {
        drop(Box::from_raw(carver));
    }
}

/// Integrates one binary map (row-major, nonzero = lit) taken at `pose`.
/// `integrated` is set to 0 when the motion gate rejected the frame.
#[no_mangle]
pub unsafe extern "C" fn oasis_carver_integrate(
    carver: *mut OasisCarver,
    map: *const u8,
    len: usize,
    pose: *const OasisPose,
    integrated: *mut bool,
) -> OasisStatus {
    guard(|| {
        let c = deref_mut(carver, "carver")?;
        let bits = slice(map, len, "map")?.iter().map(|&b| u8::from(b != 0)).collect();
        let map = BinaryPolarMap::from_data(bits, c.intrinsics)?;
        let pose = to_pose(deref(pose, "pose")?)?;
        let done = c.inner.process(&map, &pose)?.is_some();
        if let Some(flag) = integrated.as_mut() {
            *flag = done;
        }
        Ok(())
    })
}

/// Number of voxels in the carver's grid.
#[no_mangle]
pub unsafe extern "C" fn oasis_carver_voxel_count(carver: *const OasisCarver, out: *mut usize) -> OasisStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(carver, "carver")?.inner.grid().spec().len();
        Ok(())
    })
}

/// Copies the occupancy flags (x fastest, then y, then z) into `out`.
#[no_mangle]
pub unsafe extern "C" fn oasis_carver_copy_occupancy(carver: *const OasisCarver, out: *mut u8, out_len: usize) -> OasisStatus {
    guard(|| {
        let grid = deref(carver, "carver")?.inner.grid();
        let dst = slice_mut(out, out_len, grid.spec().len(), "out")?;
        for (d, &o) in dst.iter_mut().zip(grid.occupied()) {
            *d = u8::from(o);
        }
        Ok(())
    })
}

/// Copies the observation and occupied-observation counters.
#[no_mangle]
pub unsafe extern "C" fn oasis_carver_copy_counts(
    carver: *const OasisCarver,
    g_obs: *mut u16,
    g_occ: *mut u16,
    out_len: usize,
) -> OasisStatus {
    guard(|| {
        let grid = deref(carver, "carver")?.inner.grid();
        let n = grid.spec().len();
        slice_mut(g_obs, out_len, n, "g_obs")?.copy_from_slice(grid.g_obs());
        slice_mut(g_occ, out_len, n, "g_occ")?.copy_from_slice(grid.g_occ());
        Ok(())
    })
}

/// Writes the grid blob that the command-line tool reads back.
#[no_mangle]
pub unsafe extern "C" fn oasis_carver_save_grid(carver: *const OasisCarver, path: *const c_char) -> OasisStatus {
    guard(|| {
        let c = deref(carver, "carver")?;
        io::save_grid(&c.inner.snapshot(), &path_arg(path)?)?;
        Ok(())
    })
}

/// Extracts the occupied surface. `smooth_iterations` = 0 skips smoothing.
#[no_mangle]
pub unsafe extern "C" fn oasis_mesh_from_carver(
    carver: *const OasisCarver,
    smooth_iterations: usize,
    smooth_lambda: f64,
    out: *mut *mut OasisMesh,
) -> OasisStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        let raw = marching_cubes(&deref(carver, "carver")?.inner.snapshot());
        let inner = if smooth_iterations == 0 { raw } else { smooth(&raw, smooth_iterations, smooth_lambda)? };
        *out = Box::into_raw(Box::new(OasisMesh { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn oasis_mesh_free(mesh: *mut OasisMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

#[no_mangle]
pub unsafe extern "C" fn oasis_mesh_counts(mesh: *const OasisMesh, vertices: *mut usize, triangles: *mut usize) -> OasisStatus {
    guard(|| {
        let m = &deref(mesh, "mesh")?.inner;
        *deref_mut(vertices, "vertices")? = m.vertices.len();
        *deref_mut(triangles, "triangles")? = m.triangles.len();
        Ok(())
    })
}

/// Copies vertex positions as packed xyz triples (`3 * vertices` doubles).
#[no_mangle]
pub unsafe extern "C" fn oasis_mesh_copy_vertices(mesh: *const OasisMesh, out: *mut f64, out_len: usize) -> OasisStatus {
    guard(|| {
        let m = &deref(mesh, "mesh")?.inner;
        let dst = slice_mut(out, out_len, 3 * m.vertices.len(), "out")?;
        for (d, v) in dst.chunks_exact_mut(3).zip(&m.vertices) {
            d.copy_from_slice(&[v.x, v.y, v.z]);
        }
        Ok(())
    })
}

/// Copies triangle vertex indices (`3 * triangles` values, counter-clockwise
/// seen from outside).
#[no_mangle]
pub unsafe extern "C" fn oasis_mesh_copy_triangles(mesh: *const OasisMesh, out: *mut u32, out_len: usize) -> OasisStatus {
    guard(|| {
        let m = &deref(mesh, "mesh")?.inner;
        let dst = slice_mut(out, out_len, 3 * m.triangles.len(), "out")?;
        for (d, t) in dst.chunks_exact_mut(3).zip(&m.triangles) {
            d.copy_from_slice(t);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn oasis_mesh_write_ply(mesh: *const OasisMesh, path: *const c_char, ascii: bool) -> OasisStatus {
    guard(|| {
        let m = &deref(mesh, "mesh")?.inner;
        let fmt = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
        io::write_file(&path_arg(path)?, |w| io::write_mesh_ply(m, fmt, w))?;
        Ok(())
    })
}
