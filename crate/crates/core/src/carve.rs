//! Template-based voxel carving.
//!
//! The frustum template is built once per sonar geometry and voxel size: each
//! polar pixel's elevation arc is sampled and bucketed into a sensor-frame
//! voxel lattice, and every template voxel remembers which pixels reach it.
//! Per frame, each template voxel is marked occupied if any of its pixels is
//! set, moved into the world by the sonar pose, and accumulated into the
//! world grid's observation and occupancy counters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, SonarIntrinsics, Vec3};
use crate::sonar::BinaryPolarMap;

/// Template voxels smaller than this fraction of the range resolution are
/// refused.
pub const DEFAULT_MIN_VOXEL_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarveConfig {
    pub t_r: f64,
    pub motion_gate: f64,
    pub voxel_size: f64,
}

impl Default for CarveConfig {
    fn default() -> Self {
        Self {
            t_r: 0.5,
            motion_gate: 0.01,
            voxel_size: 0.05,
        }
    }
}

impl CarveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_r) {
            return Err(Error::param(format!("t_r {} outside [0, 1]", self.t_r)));
        }
        if !(self.motion_gate >= 0.0) {
            return Err(Error::param("motion gate must be non-negative"));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::param("voxel size must be positive"));
        }
        Ok(())
    }
}

/// Contiguous beams `beam_lo..=beam_hi` of one range bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelRun {
    pub bin: u16,
    pub beam_lo: u16,
    pub beam_hi: u16,
}

/// Sensor-frame voxel set covering the sonar frustum.
///
/// Voxel centers sit on the lattice `key * voxel_size`, so the sonar origin is
/// a voxel center. Pixel references are stored as row runs; [`Self::pixel_refs`]
/// expands them.
#[derive(Debug, Clone)]
pub struct VoxelTemplate {
    voxel_size: f64,
    intrinsics: SonarIntrinsics,
    keys: Vec<[i32; 3]>,
    centers: Vec<[f64; 3]>,
    run_offsets: Vec<u32>,
    runs: Vec<PixelRun>,
    // [start, end) offsets into a per-row prefix-count table of width n_beams + 1.
    spans: Vec<[u32; 2]>,
}

struct ArcSampler {
    half_vfov: f64,
    azimuths: Vec<(f64, f64)>,
    // per bin: range and the elevations where the arc crosses a z-plane
    bins: Vec<(f64, Vec<f64>)>,
}

impl ArcSampler {
    fn new(intr: &SonarIntrinsics, voxel_size: f64) -> Self {
        let azimuths = (0..intr.n_beams).map(|k| intr.beam_azimuth(k).sin_cos()).collect();
        let half = 0.5 * intr.vfov;
        let bins = (0..intr.n_range_bins)
            .map(|b| {
                let r = intr.bin_center_range(b);
                let mut els = Vec::new();
                plane_crossings(r * (-half).sin(), r * half.sin(), voxel_size, |z| {
                    els.push((z / r).clamp(-1.0, 1.0).asin());
                });
                (r, els)
            })
            .collect();
        Self {
            half_vfov: half,
            azimuths,
            bins,
        }
    }

    /// Calls `f(pixel_index, key)` once per lattice voxel crossed by each
    /// pixel's elevation arc, in arc order.
    ///
    /// The arc is cut at every voxel-boundary crossing and sampled at the
    /// midpoint of each piece, so every voxel the arc passes through is hit
    /// and the sampling is never coarser than `voxel_size / (2 r)`.
    fn for_each(&self, voxel_size: f64, mut f: impl FnMut(u32, [i32; 3])) {
        let inv_v = 1.0 / voxel_size;
        let h = self.half_vfov;
        let cos_h = h.cos();
        let n_beams = self.azimuths.len();
        let mut cuts: Vec<f64> = Vec::new();
        for (b, (r, z_cuts)) in self.bins.iter().enumerate() {
            let r = *r;
            for (k, &(sa, ca)) in self.azimuths.iter().enumerate() {
                cuts.clear();
                cuts.push(-h);
                cuts.push(h);
                cuts.extend_from_slice(z_cuts);
                // x = r cos(az) cos(el) and y = r sin(az) cos(el) are even in el.
                for horiz in [r * ca, r * sa] {
                    let (a, b) = if horiz >= 0.0 { (horiz * cos_h, horiz) } else { (horiz, horiz * cos_h) };
                    plane_crossings(a, b, voxel_size, |p| {
                        let e = (p / horiz).clamp(-1.0, 1.0).acos();
                        if e <= h {
                            cuts.push(e);
                            cuts.push(-e);
                        }
                    });
                }
                cuts.sort_unstable_by(|a, b| a.total_cmp(b));
                let pix = (b * n_beams + k) as u32;
                let (cx, cy, cz) = (r * ca * inv_v, r * sa * inv_v, r * inv_v);
                let mut last = [i32::MIN; 3];
                for w in cuts.windows(2) {
                    if w[1] <= w[0] {
                        continue;
                    }
                    let (se, ce) = (0.5 * (w[0] + w[1])).sin_cos();
                    let key = [(ce * cx).round() as i32, (ce * cy).round() as i32, (se * cz).round() as i32];
                    if key != last {
                        f(pix, key);
                        last = key;
                    }
                }
            }
        }
    }
}

/// Calls `f` with every voxel boundary coordinate `(m + 0.5) * v` inside
/// the open interval `(lo, hi)`.
fn plane_crossings(lo: f64, hi: f64, v: f64, mut f: impl FnMut(f64)) {
    let first = ((lo / v) - 0.5).floor() as i64 + 1;
    let mut m = first;
    loop {
        let p = (m as f64 + 0.5) * v;
        if p >= hi {
            break;
        }
        if p > lo {
            f(p);
        }
        m += 1;
    }
}

impl VoxelTemplate {
    pub fn build(intr: &SonarIntrinsics, voxel_size: f64) -> Result<Self> {
        Self::build_with_guard(intr, voxel_size, DEFAULT_MIN_VOXEL_FRACTION)
    }

    /// Like [`Self::build`] with an explicit lower bound on
    /// `voxel_size / range_resolution`.
    pub fn build_with_guard(intr: &SonarIntrinsics, voxel_size: f64, min_fraction: f64) -> Result<Self> {
        intr.validate()?;
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::param("voxel size must be positive"));
        }
        if voxel_size < min_fraction * intr.range_resolution() {
            return Err(Error::param(format!(
                "voxel size {voxel_size} below {min_fraction} x range resolution {}",
                intr.range_resolution()
            )));
        }
        let inv_v = 1.0 / voxel_size;
        let sampler = ArcSampler::new(intr, voxel_size);

        // Dense key box around the frustum.
        let reach = (intr.max_range * inv_v).ceil() as i32 + 1;
        let lo = [-1, -reach, -reach];
        let hi = [reach, reach, reach];
        let lo_y = (-(intr.max_range * (0.5 * intr.hfov).sin()) * inv_v).floor() as i32 - 1;
        let lo_z = (-(intr.max_range * (0.5 * intr.vfov).sin()) * inv_v).floor() as i32 - 1;
        let lo = [lo[0], lo[1].max(lo_y), lo[2].max(lo_z)];
        let hi = [hi[0], hi[1].min(-lo_y), hi[2].min(-lo_z)];
        let dim = [
            (hi[0] - lo[0] + 1) as usize,
            (hi[1] - lo[1] + 1) as usize,
            (hi[2] - lo[2] + 1) as usize,
        ];
        let slot_of = |key: [i32; 3]| -> usize {
            let x = (key[0] - lo[0]) as usize;
            let y = (key[1] - lo[1]) as usize;
            let z = (key[2] - lo[2]) as usize;
            debug_assert!(x < dim[0] && y < dim[1] && z < dim[2]);
            (z * dim[1] + y) * dim[0] + x
        };

        // Pass 1: which lattice slots are hit.
        let mut slot = vec![u32::MAX; dim[0] * dim[1] * dim[2]];
        sampler.for_each(voxel_size, |_, key| slot[slot_of(key)] = 0);
        // Number entries in lattice order.
        let mut keys = Vec::new();
        for z in 0..dim[2] {
            for y in 0..dim[1] {
                for x in 0..dim[0] {
                    let s = (z * dim[1] + y) * dim[0] + x;
                    if slot[s] == 0 {
                        slot[s] = keys.len() as u32;
                        keys.push([x as i32 + lo[0], y as i32 + lo[1], z as i32 + lo[2]]);
                    }
                }
            }
        }
        let n = keys.len();

        // Pass 2: per-entry distinct pixel counts. Pixels arrive in increasing
        // order, so a last-seen marker deduplicates.
        let mut last_pix = vec![u32::MAX; n];
        let mut counts = vec![0u32; n];
        sampler.for_each(voxel_size, |pix, key| {
            let e = slot[slot_of(key)] as usize;
            if last_pix[e] != pix {
                last_pix[e] = pix;
                counts[e] += 1;
            }
        });
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0usize);
        for c in &counts {
            offsets.push(offsets.last().unwrap() + *c as usize);
        }

        // Pass 3: fill the pixel lists.
        let mut pixels = vec![0u32; *offsets.last().unwrap()];
        let mut cursor: Vec<usize> = offsets[..n].to_vec();
        last_pix.fill(u32::MAX);
        sampler.for_each(voxel_size, |pix, key| {
            let e = slot[slot_of(key)] as usize;
            if last_pix[e] != pix {
                last_pix[e] = pix;
                pixels[cursor[e]] = pix;
                cursor[e] += 1;
            }
        });
        drop(slot);

        // Compress each sorted pixel list into row runs.
        let n_beams = intr.n_beams as u32;
        let stride = n_beams + 1;
        let mut run_offsets = Vec::with_capacity(n + 1);
        let mut runs = Vec::new();
        let mut spans = Vec::new();
        run_offsets.push(0u32);
        for e in 0..n {
            let list = &pixels[offsets[e]..offsets[e + 1]];
            let mut i = 0;
            while i < list.len() {
                let start = list[i];
                let mut j = i;
                while j + 1 < list.len() && list[j + 1] == list[j] + 1 && list[j + 1] % n_beams != 0 {
                    j += 1;
                }
                let bin = start / n_beams;
                let (k0, k1) = (start % n_beams, list[j] % n_beams);
                runs.push(PixelRun {
                    bin: bin as u16,
                    beam_lo: k0 as u16,
                    beam_hi: k1 as u16,
                });
                spans.push([bin * stride + k0, bin * stride + k1 + 1]);
                i = j + 1;
            }
            run_offsets.push(runs.len() as u32);
        }

        let centers = keys
            .iter()
            .map(|k| [k[0] as f64 * voxel_size, k[1] as f64 * voxel_size, k[2] as f64 * voxel_size])
            .collect();
        Ok(Self {
            voxel_size,
            intrinsics: *intr,
            keys,
            centers,
            run_offsets,
            runs,
            spans,
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn intrinsics(&self) -> &SonarIntrinsics {
        &self.intrinsics
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Sensor-lattice key of entry `i`; its center is `key * voxel_size`.
    pub fn key(&self, i: usize) -> [i32; 3] {
        self.keys[i]
    }

    pub fn center(&self, i: usize) -> Vec3 {
        Vec3::from(self.centers[i])
    }

    pub fn runs(&self, i: usize) -> &[PixelRun] {
        &self.runs[self.run_offsets[i] as usize..self.run_offsets[i + 1] as usize]
    }

    /// `(range_bin, beam)` pairs whose elevation arcs reach entry `i`.
    pub fn pixel_refs(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.runs(i)
            .iter()
            .flat_map(|r| (r.beam_lo..=r.beam_hi).map(move |k| (r.bin as usize, k as usize)))
    }

    pub fn total_pixel_refs(&self) -> usize {
        self.runs.iter().map(|r| (r.beam_hi - r.beam_lo) as usize + 1).sum()
    }

    /// Whether any referenced pixel of entry `i` is set in `map`.
    pub fn entry_occupied(&self, i: usize, map: &BinaryPolarMap) -> bool {
        self.runs(i)
            .iter()
            .any(|r| (r.beam_lo..=r.beam_hi).any(|k| map.get(r.bin as usize, k as usize)))
    }
}

/// Axis-aligned world box partitioned into cubic voxels. `origin` is the
/// minimum corner; voxel `(i, j, k)` has center `origin + (i + 0.5) * size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    pub voxel_size: f64,
}

impl GridSpec {
    /// Smallest grid of `voxel_size` voxels covering `[min, max]`.
    pub fn covering(min: [f64; 3], max: [f64; 3], voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0) {
            return Err(Error::param("voxel size must be positive"));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            if !(max[a] > min[a]) {
                return Err(Error::param("workspace box is empty"));
            }
            dims[a] = ((max[a] - min[a]) / voxel_size - 1e-9).ceil().max(1.0) as usize;
        }
        let spec = Self {
            origin: min,
            dims,
            voxel_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::param("voxel size must be positive"));
        }
        if self.dims.contains(&0) {
            return Err(Error::param("grid dimensions must be non-zero"));
        }
        if self.len() > u32::MAX as usize {
            return Err(Error::param("grid too large"));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let v = self.voxel_size;
        Vec3::new(
            self.origin[0] + (i as f64 + 0.5) * v,
            self.origin[1] + (j as f64 + 0.5) * v,
            self.origin[2] + (k as f64 + 0.5) * v,
        )
    }

    /// Voxel containing world point `p`, if inside the grid.
    pub fn locate(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin[a]) / self.voxel_size;
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size)
    }
}

#[inline]
fn ratio_exceeds(occ: u16, obs: u16, t_r: f64) -> bool {
    obs > 0 && (occ as f64 / obs as f64) > t_r
}

/// Per-frame integration diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    /// Distinct world voxels observed by this frame.
    pub observed: usize,
    /// Distinct world voxels observed as occupied by this frame.
    pub marked: usize,
    /// Template entries that fell outside the grid.
    pub out_of_bounds: usize,
}

/// World occupancy grid with saturating 16-bit observation counters.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    spec: GridSpec,
    t_r: f64,
    g_obs: Vec<u16>,
    g_occ: Vec<u16>,
    occupied: Vec<bool>,
    // per-frame scratch: 0 untouched, 1 observed free, 2 observed occupied
    mark: Vec<u8>,
    touched: Vec<u32>,
    prefix: Vec<u16>,
    frames: u64,
    out_of_bounds: u64,
}

impl VoxelGrid {
    pub fn new(spec: GridSpec, t_r: f64) -> Result<Self> {
        spec.validate()?;
        if !(0.0..=1.0).contains(&t_r) {
            return Err(Error::param(format!("t_r {t_r} outside [0, 1]")));
        }
        let n = spec.len();
        Ok(Self {
            spec,
            t_r,
            g_obs: vec![0; n],
            g_occ: vec![0; n],
            occupied: vec![false; n],
            mark: vec![0; n],
            touched: Vec::new(),
            prefix: Vec::new(),
            frames: 0,
            out_of_bounds: 0,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn t_r(&self) -> f64 {
        self.t_r
    }

    pub fn g_obs(&self) -> &[u16] {
        &self.g_obs
    }

    pub fn g_occ(&self) -> &[u16] {
        &self.g_occ
    }

    pub fn occupied(&self) -> &[bool] {
        &self.occupied
    }

    pub fn frames_integrated(&self) -> u64 {
        self.frames
    }

    /// Template entries skipped so far because they left the grid.
    pub fn out_of_bounds_total(&self) -> u64 {
        self.out_of_bounds
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    /// Integrates one binary map observed from `pose` (world ← sonar).
    ///
    /// Every template voxel landing in the grid counts as one observation of
    /// its world voxel. Several entries sharing a world voxel in the same frame
    /// still count once, as occupied if any of them is.
    pub fn integrate(&mut self, tmpl: &VoxelTemplate, map: &BinaryPolarMap, pose: &Pose) -> Result<IntegrationStats> {
        let ti = tmpl.intrinsics();
        if map.rows() != ti.n_range_bins || map.cols() != ti.n_beams {
            return Err(Error::ShapeMismatch {
                expected: (ti.n_range_bins, ti.n_beams),
                actual: (map.rows(), map.cols()),
            });
        }
        self.fill_prefix(map);

        let inv_v = 1.0 / self.spec.voxel_size;
        let r = pose.rotation() * inv_v;
        let o = Vec3::from(self.spec.origin);
        let t = (pose.translation() - o) * inv_v;
        let (r00, r01, r02) = (r[(0, 0)], r[(0, 1)], r[(0, 2)]);
        let (r10, r11, r12) = (r[(1, 0)], r[(1, 1)], r[(1, 2)]);
        let (r20, r21, r22) = (r[(2, 0)], r[(2, 1)], r[(2, 2)]);
        let [dx, dy, dz] = self.spec.dims;
        let (fdx, fdy, fdz) = (dx as f64, dy as f64, dz as f64);

        let mut oob = 0usize;
        self.touched.clear();
        let prefix = &self.prefix;
        for (e, c) in tmpl.centers.iter().enumerate() {
            let x = r00 * c[0] + r01 * c[1] + r02 * c[2] + t.x;
            let y = r10 * c[0] + r11 * c[1] + r12 * c[2] + t.y;
            let z = r20 * c[0] + r21 * c[1] + r22 * c[2] + t.z;
            if !(x >= 0.0 && x < fdx && y >= 0.0 && y < fdy && z >= 0.0 && z < fdz) {
                oob += 1;
                continue;
            }
            let idx = (z as usize * dy + y as usize) * dx + x as usize;
            let m = self.mark[idx];
            if m == 2 {
                continue;
            }
            let spans = &tmpl.spans[tmpl.run_offsets[e] as usize..tmpl.run_offsets[e + 1] as usize];
            let occ = spans.iter().any(|s| prefix[s[1] as usize] != prefix[s[0] as usize]);
            if m == 0 {
                self.touched.push(idx as u32);
            }
            self.mark[idx] = 1 + occ as u8;
        }

        let mut marked = 0;
        for &idx in &self.touched {
            let idx = idx as usize;
            let occ = self.mark[idx] == 2;
            self.mark[idx] = 0;
            marked += occ as usize;
            if self.g_obs[idx] == u16::MAX {
                continue;
            }
            self.g_obs[idx] += 1;
            self.g_occ[idx] += occ as u16;
            self.occupied[idx] = ratio_exceeds(self.g_occ[idx], self.g_obs[idx], self.t_r);
        }
        self.frames += 1;
        self.out_of_bounds += oob as u64;
        Ok(IntegrationStats {
            observed: self.touched.len(),
            marked,
            out_of_bounds: oob,
        })
    }

    fn fill_prefix(&mut self, map: &BinaryPolarMap) {
        let cols = map.cols();
        let stride = cols + 1;
        self.prefix.clear();
        self.prefix.resize(map.rows() * stride, 0);
        for (row, out) in map.data().chunks_exact(cols).zip(self.prefix.chunks_exact_mut(stride)) {
            let mut acc = 0u16;
            for (k, &v) in row.iter().enumerate() {
                acc += v as u16;
                out[k + 1] = acc;
            }
        }
    }

    /// Point-in-time copy for readers.
    pub fn snapshot(&self) -> GridSnapshot {
        GridSnapshot {
            spec: self.spec,
            t_r: self.t_r,
            g_obs: self.g_obs.clone(),
            g_occ: self.g_occ.clone(),
            occupied: self.occupied.clone(),
            frames: self.frames,
        }
    }
}

/// Immutable copy of a grid's counters and occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSnapshot {
    pub spec: GridSpec,
    pub t_r: f64,
    pub g_obs: Vec<u16>,
    pub g_occ: Vec<u16>,
    pub occupied: Vec<bool>,
    pub frames: u64,
}

impl GridSnapshot {
    /// Builds a snapshot from raw counters, deriving occupancy at `t_r`.
    pub fn from_counts(spec: GridSpec, t_r: f64, g_obs: Vec<u16>, g_occ: Vec<u16>, frames: u64) -> Result<Self> {
        spec.validate()?;
        if g_obs.len() != spec.len() || g_occ.len() != spec.len() {
            return Err(Error::param("count arrays do not match grid dimensions"));
        }
        if g_occ.iter().zip(&g_obs).any(|(o, b)| o > b) {
            return Err(Error::param("occupied count exceeds observation count"));
        }
        let occupied = g_occ.iter().zip(&g_obs).map(|(&o, &b)| ratio_exceeds(o, b, t_r)).collect();
        Ok(Self {
            spec,
            t_r,
            g_obs,
            g_occ,
            occupied,
            frames,
        })
    }

    pub fn empty(spec: GridSpec, t_r: f64) -> Self {
        let n = spec.len();
        Self {
            spec,
            t_r,
            g_obs: vec![0; n],
            g_occ: vec![0; n],
            occupied: vec![false; n],
            frames: 0,
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn is_occupied(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupied[self.spec.index(i, j, k)]
    }

    pub fn occupied_indices(&self) -> Vec<usize> {
        self.occupied
            .iter()
            .enumerate()
            .filter_map(|(i, &o)| o.then_some(i))
            .collect()
    }

    pub fn occupied_centers(&self) -> Vec<Vec3> {
        self.occupied_indices()
            .into_iter()
            .map(|idx| {
                let [i, j, k] = self.spec.coords(idx);
                self.spec.center(i, j, k)
            })
            .collect()
    }

    /// Occupancy re-derived from the counters at another ratio threshold.
    pub fn occupancy_at(&self, t_r: f64) -> Vec<bool> {
        self.g_occ
            .iter()
            .zip(&self.g_obs)
            .map(|(&o, &b)| ratio_exceeds(o, b, t_r))
            .collect()
    }
}

/// True iff the sonar moved more than `gate` meters since the last processed
/// frame. The first frame always passes.
pub fn should_process(current: &Pose, last_processed: Option<&Pose>, gate: f64) -> bool {
    match last_processed {
        None => true,
        Some(last) => current.translation_distance(last) > gate,
    }
}

/// Template, grid and motion gate bundled into the streaming integrator.
#[derive(Debug, Clone)]
pub struct Carver {
    template: VoxelTemplate,
    grid: VoxelGrid,
    config: CarveConfig,
    last_pose: Option<Pose>,
}

impl Carver {
    pub fn new(intr: &SonarIntrinsics, spec: GridSpec, config: CarveConfig) -> Result<Self> {
        config.validate()?;
        if (spec.voxel_size - config.voxel_size).abs() > 1e-12 {
            return Err(Error::param("grid and carve config disagree on voxel size"));
        }
        let template = VoxelTemplate::build(intr, config.voxel_size)?;
        Self::with_template(template, spec, config)
    }

    pub fn with_template(template: VoxelTemplate, spec: GridSpec, config: CarveConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            grid: VoxelGrid::new(spec, config.t_r)?,
            template,
            config,
            last_pose: None,
        })
    }

    pub fn template(&self) -> &VoxelTemplate {
        &self.template
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn config(&self) -> &CarveConfig {
        &self.config
    }

    pub fn should_process(&self, pose: &Pose) -> bool {
        should_process(pose, self.last_pose.as_ref(), self.config.motion_gate)
    }

    /// Integrates `map` if the pose passes the motion gate. Returns `None`
    /// when the frame was gated out.
    pub fn process(&mut self, map: &BinaryPolarMap, pose: &Pose) -> Result<Option<IntegrationStats>> {
        if !self.should_process(pose) {
            return Ok(None);
        }
        let stats = self.grid.integrate(&self.template, map, pose)?;
        self.last_pose = Some(*pose);
        Ok(Some(stats))
    }

    pub fn snapshot(&self) -> GridSnapshot {
        self.grid.snapshot()
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sensor_to_spherical, spherical_to_sensor};
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashMap, HashSet};

    fn small_sonar() -> SonarIntrinsics {
        SonarIntrinsics {
            n_beams: 48,
            n_range_bins: 60,
            hfov: 60f64.to_radians(),
            vfov: 20f64.to_radians(),
            max_range: 1.2,
            min_range: 0.2,
        }
    }

    #[test]
    fn template_entries_are_unique_and_non_empty() {
        let intr = small_sonar();
        let t = VoxelTemplate::build(&intr, 0.05).unwrap();
        let keys: HashSet<_> = (0..t.len()).map(|i| t.key(i)).collect();
        assert_eq!(keys.len(), t.len());
        for i in 0..t.len() {
            assert!(t.pixel_refs(i).next().is_some());
        }
    }

    /// Smallest L-infinity distance between the arc of (r, az) and `center`,
    /// by dense sampling refined with a ternary search.
    fn arc_linf_distance(intr: &SonarIntrinsics, r: f64, az: f64, center: &Vec3) -> f64 {
        let h = 0.5 * intr.vfov;
        let d = |el: f64| (spherical_to_sensor(r, az, el) - center).amax();
        let n = 4000;
        let step = 2.0 * h / n as f64;
        let best = (0..=n).map(|i| -h + step * i as f64).min_by(|a, b| d(*a).total_cmp(&d(*b))).unwrap();
        let (mut lo, mut hi) = ((best - step).max(-h), (best + step).min(h));
        for _ in 0..100 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if d(m1) < d(m2) { hi = m2 } else { lo = m1 }
        }
        d(0.5 * (lo + hi))
    }

    fn fine_arc_keys(intr: &SonarIntrinsics, b: usize, k: usize, v: f64, n: usize) -> HashSet<[i32; 3]> {
        let r = intr.bin_center_range(b);
        (0..=n)
            .map(|i| {
                let el = -0.5 * intr.vfov + intr.vfov * i as f64 / n as f64;
                let p = spherical_to_sensor(r, intr.beam_azimuth(k), el) / v;
                [p.x.round() as i32, p.y.round() as i32, p.z.round() as i32]
            })
            .collect()
    }

    #[test]
    fn template_matches_brute_force_arc_sampling() {
        let intr = small_sonar();
        let v = 0.05;
        let t = VoxelTemplate::build(&intr, v).unwrap();
        let mut refs: HashMap<(usize, usize), HashSet<[i32; 3]>> = HashMap::new();
        for i in 0..t.len() {
            for px in t.pixel_refs(i) {
                refs.entry(px).or_default().insert(t.key(i));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let (b, k) = (rng.gen_range(0..intr.n_range_bins), rng.gen_range(0..intr.n_beams));
            let got = &refs[&(b, k)];
            // Dense sampling never finds a voxel the template missed.
            assert!(fine_arc_keys(&intr, b, k, v, 4000).is_subset(got));
            // Every listed voxel really meets the arc.
            for key in got {
                let c = Vec3::new(key[0] as f64, key[1] as f64, key[2] as f64) * v;
                let dist = arc_linf_distance(&intr, intr.bin_center_range(b), intr.beam_azimuth(k), &c);
                assert!(dist <= 0.5 * v + 1e-9, "pixel ({b},{k}) voxel {key:?} at {dist}");
            }
        }
    }

    #[test]
    fn template_centers_touch_the_frustum() {
        let intr = small_sonar();
        let v = 0.05;
        let t = VoxelTemplate::build(&intr, v).unwrap();
        let half_diag = 0.5 * 3f64.sqrt() * v;
        for i in 0..t.len() {
            let c = t.center(i);
            let (r, az, el) = sensor_to_spherical(&c);
            assert!(r >= intr.min_range - half_diag && r <= intr.max_range + half_diag);
            let slack = (half_diag / r.max(1e-9)).min(1.0).asin();
            assert!(az.abs() <= 0.5 * intr.hfov + slack + 1e-9);
            assert!(el.abs() <= 0.5 * intr.vfov + slack + 1e-9);
        }
    }

    #[test]
    fn planar_template_equals_wedge_voxelization() {
        let intr = SonarIntrinsics { vfov: 1e-6, ..small_sonar() };
        let v = 0.04;
        let t = VoxelTemplate::build(&intr, v).unwrap();
        let mut wedge: HashSet<[i32; 3]> = HashSet::new();
        let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
        for b in 0..intr.n_range_bins {
            for k in 0..intr.n_beams {
                let r = intr.bin_center_range(b);
                let az = intr.beam_azimuth(k);
                let key = [(r * az.cos() / v).round() as i32, (r * az.sin() / v).round() as i32, 0];
                wedge.insert(key);
            }
        }
        assert_eq!(t.len(), wedge.len());
        for i in 0..t.len() {
            assert_eq!(t.key(i)[2], 0);
            for px in t.pixel_refs(i) {
                assert!(owner.insert(px, i).is_none(), "pixel {px:?} in two voxels");
            }
        }
        assert_eq!(owner.len(), intr.n_beams * intr.n_range_bins);
    }

    #[test]
    fn template_rejects_tiny_voxels() {
        let intr = small_sonar();
        let dr = intr.range_resolution();
        assert!(VoxelTemplate::build(&intr, 0.2 * dr).is_err());
        assert!(VoxelTemplate::build_with_guard(&intr, 0.2 * dr, 0.1).is_ok());
        assert!(VoxelTemplate::build(&intr, 0.0).is_err());
    }

    #[test]
    fn motion_gate_examples() {
        let p = Pose::identity();
        assert!(should_process(&p, None, 0.01));
        assert!(!should_process(&p, Some(&p), 0.01));
        let q = Pose::from_translation(Vec3::new(0.02, 0.0, 0.0));
        assert!(should_process(&q, Some(&p), 0.01));
        let q = Pose::from_translation(Vec3::new(0.0, 0.005, 0.0));
        assert!(!should_process(&q, Some(&p), 0.01));
    }

    /// Grid whose voxel centers line up with the template lattice at the
    /// identity pose.
    fn centered_grid(v: f64, half: f64) -> GridSpec {
        let lo = -half - 0.5 * v;
        GridSpec::covering([lo; 3], [half + 0.5 * v; 3], v).unwrap()
    }

    #[test]
    fn empty_map_only_observes() {
        let intr = small_sonar();
        let t = VoxelTemplate::build(&intr, 0.05).unwrap();
        let mut g = VoxelGrid::new(centered_grid(0.05, 1.5), 0.5).unwrap();
        let stats = g.integrate(&t, &BinaryPolarMap::zeros(intr), &Pose::identity()).unwrap();
        assert_eq!(stats.out_of_bounds, 0);
        assert_eq!(stats.marked, 0);
        assert!(stats.observed > 0);
        assert!(g.g_occ().iter().all(|&c| c == 0));
        assert_eq!(g.g_obs().iter().filter(|&&c| c > 0).count(), stats.observed);
        assert!(g.g_obs().iter().all(|&c| c <= 1));
        assert_eq!(g.occupied_count(), 0);
        // Every observed voxel holds some template center.
        let spec = *g.spec();
        let expected: HashSet<usize> = (0..t.len())
            .filter_map(|i| spec.locate(&t.center(i)).map(|[a, b, c]| spec.index(a, b, c)))
            .collect();
        let observed: HashSet<usize> = (0..spec.len()).filter(|&i| g.g_obs()[i] > 0).collect();
        assert_eq!(expected, observed);
    }

    #[test]
    fn single_pixel_marks_its_arc() {
        let intr = small_sonar();
        let v = 0.05;
        let t = VoxelTemplate::build(&intr, v).unwrap();
        let spec = centered_grid(v, 1.5);
        let mut g = VoxelGrid::new(spec, 0.5).unwrap();
        let mut map = BinaryPolarMap::zeros(intr);
        let (b, k) = (37, 20);
        map.set(b, k, true);
        g.integrate(&t, &map, &Pose::identity()).unwrap();

        // Oracle: voxels within half a voxel (L-infinity) of the arc.
        let r = intr.bin_center_range(b);
        let az = intr.beam_azimuth(k);
        let mut arc = HashSet::new();
        for key in fine_arc_keys(&intr, b, k, v, 200).iter().flat_map(|key| {
            let key = *key;
            (-1..=1).flat_map(move |dx| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| [key[0] + dx, key[1] + dy, key[2] + dz])))
        }) {
            let c = Vec3::new(key[0] as f64, key[1] as f64, key[2] as f64) * v;
            if arc_linf_distance(&intr, r, az, &c) < 0.5 * v - 1e-9 {
                let [a, bb, cc] = spec.locate(&c).unwrap();
                arc.insert(spec.index(a, bb, cc));
            }
        }
        let occupied: HashSet<usize> = (0..spec.len()).filter(|&i| g.occupied()[i]).collect();
        assert_eq!(occupied, arc);
    }

    #[test]
    fn two_rolled_views_intersect() {
        let intr = SonarIntrinsics {
            n_beams: 40,
            n_range_bins: 40,
            hfov: 40f64.to_radians(),
            vfov: 20f64.to_radians(),
            max_range: 0.45,
            min_range: 0.05,
        };
        let v = 0.05;
        let t = VoxelTemplate::build(&intr, v).unwrap();
        // 10^3 grid centered on the sensor origin.
        let spec = GridSpec::covering([-0.275; 3], [0.225; 3], v).unwrap();
        assert_eq!(spec.dims, [10, 10, 10]);
        let target = spherical_to_sensor(intr.bin_center_range(30), 0.0, 0.0);
        let a = Pose::from_translation(Vec3::new(-0.2, 0.0, 0.0));
        let b = Pose::from_yaw_pitch_roll(Vec3::new(-0.2, 0.0, 0.0), 0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let mut g = VoxelGrid::new(spec, 0.9).unwrap();
        let mut per_frame = Vec::new();
        let world_target = a.translation() + target;
        for pose in [a, b] {
            let local = pose.inverse().transform_point(&world_target);
            let (r, az, _) = sensor_to_spherical(&local);
            let mut map = BinaryPolarMap::zeros(intr);
            map.set(intr.bin_of_range(r).unwrap(), intr.beam_of_azimuth(az).unwrap(), true);
            let mut single = VoxelGrid::new(spec, 0.5).unwrap();
            single.integrate(&t, &map, &pose).unwrap();
            per_frame.push(single);
            g.integrate(&t, &map, &pose).unwrap();
        }
        // Hand intersection: voxels occupied in both single-frame grids.
        for idx in 0..spec.len() {
            let both = per_frame[0].occupied()[idx] && per_frame[1].occupied()[idx];
            let seen_twice = g.g_obs()[idx] == 2;
            assert_eq!(g.occupied()[idx], both && seen_twice, "voxel {:?}", spec.coords(idx));
        }
        let [i, j, k] = spec.locate(&world_target).unwrap();
        assert!(g.occupied()[spec.index(i, j, k)]);
    }

    fn random_frames(intr: &SonarIntrinsics, n: usize, seed: u64) -> Vec<(BinaryPolarMap, Pose)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut m = BinaryPolarMap::zeros(*intr);
                for b in 0..intr.n_range_bins {
                    for k in 0..intr.n_beams {
                        if rng.gen_bool(0.08) {
                            m.set(b, k, true);
                        }
                    }
                }
                let pose = Pose::from_yaw_pitch_roll(
                    Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-3.0..3.0),
                );
                (m, pose)
            })
            .collect()
    }

    #[test]
    fn integration_is_order_invariant() {
        let intr = small_sonar();
        let t = VoxelTemplate::build(&intr, 0.06).unwrap();
        let spec = centered_grid(0.06, 1.2);
        let mut frames = random_frames(&intr, 12, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let run = |frames: &[(BinaryPolarMap, Pose)]| {
            let mut g = VoxelGrid::new(spec, 0.5).unwrap();
            for (m, p) in frames {
                g.integrate(&t, m, p).unwrap();
            }
            g
        };
        let base = run(&frames);
        for _ in 0..3 {
            frames.shuffle(&mut rng);
            let g = run(&frames);
            assert_eq!(g.g_obs(), base.g_obs());
            assert_eq!(g.g_occ(), base.g_occ());
            assert_eq!(g.occupied(), base.occupied());
        }
    }

    #[test]
    fn snapshot_is_isolated_and_matches_enumeration() {
        let intr = small_sonar();
        let t = VoxelTemplate::build(&intr, 0.06).unwrap();
        let spec = centered_grid(0.06, 1.2);
        let mut g = VoxelGrid::new(spec, 0.5).unwrap();
        assert_eq!(g.snapshot().occupied_count(), 0);
        let frames = random_frames(&intr, 3, 9);
        g.integrate(&t, &frames[0].0, &frames[0].1).unwrap();
        let snap = g.snapshot();
        let direct: Vec<usize> = (0..spec.len()).filter(|&i| g.occupied()[i]).collect();
        assert_eq!(snap.occupied_indices(), direct);
        let frozen = snap.clone();
        g.integrate(&t, &frames[1].0, &frames[1].1).unwrap();
        assert_eq!(snap, frozen);
        assert_ne!(g.g_obs(), snap.g_obs.as_slice());
    }

    #[test]
    fn carver_respects_motion_gate() {
        let intr = small_sonar();
        let spec = centered_grid(0.06, 1.2);
        let cfg = CarveConfig { voxel_size: 0.06, ..Default::default() };
        let mut c = Carver::new(&intr, spec, cfg).unwrap();
        let m = BinaryPolarMap::zeros(intr);
        let p = Pose::identity();
        assert!(c.process(&m, &p).unwrap().is_some());
        assert!(c.process(&m, &p).unwrap().is_none());
        assert!(c.process(&m, &Pose::from_translation(Vec3::new(0.0, 0.0, 0.011))).unwrap().is_some());
        assert_eq!(c.grid().frames_integrated(), 2);
        let bad = BinaryPolarMap::zeros(SonarIntrinsics { n_beams: 3, ..intr });
        assert!(c.process(&bad, &Pose::from_translation(Vec3::new(1.0, 0.0, 0.0))).is_err());
    }

    #[test]
    fn counters_saturate_without_breaking_ratio() {
        let intr = small_sonar();
        let t = VoxelTemplate::build(&intr, 0.1).unwrap();
        let spec = centered_grid(0.1, 1.5);
        let mut g = VoxelGrid::new(spec, 0.5).unwrap();
        let mut m = BinaryPolarMap::zeros(intr);
        m.set(30, 20, true);
        let idx = g.g_obs.len() / 2;
        g.g_obs[idx] = u16::MAX;
        g.g_occ[idx] = u16::MAX;
        g.integrate(&t, &m, &Pose::identity()).unwrap();
        assert!(g.g_occ().iter().zip(g.g_obs()).all(|(o, b)| o <= b));
        assert_eq!(g.g_obs()[idx], u16::MAX);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn higher_threshold_is_a_subset(seed in 0u64..1000, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let intr = small_sonar();
            let t = VoxelTemplate::build(&intr, 0.08).unwrap();
            let spec = centered_grid(0.08, 1.2);
            let mut g = VoxelGrid::new(spec, lo).unwrap();
            for (m, p) in random_frames(&intr, 4, seed) {
                g.integrate(&t, &m, &p).unwrap();
            }
            let snap = g.snapshot();
            let a = snap.occupancy_at(lo);
            let b = snap.occupancy_at(hi);
            proptest::prop_assert!(a.iter().zip(&b).all(|(&x, &y)| !y || x));
            proptest::prop_assert!(g.g_occ().iter().zip(g.g_obs()).all(|(o, b)| o <= b));
        }
    }
}
