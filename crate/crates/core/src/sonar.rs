//! Imaging sonar frames and the polar preprocessing chain: background
//! statistics, rolling-window binarization, max-pool decimation and the
//! cartesian rendering of the binary map.

use crate::error::{Error, Result};
use crate::geometry::{Pose, SonarIntrinsics};

/// Number of leading range bins assumed to contain only background.
pub const DEFAULT_BACKGROUND_BINS: usize = 10;
/// Rolling-window half width, in range bins.
pub const DEFAULT_HALF_WINDOW: usize = 5;

/// Raw 8-bit polar intensity image. Row-major, rows are range bins ordered
/// near to far, columns are beams ordered by increasing azimuth.
#[derive(Debug, Clone, PartialEq)]
pub struct SonarFrame {
    data: Vec<u8>,
    pub intrinsics: SonarIntrinsics,
    pub timestamp: f64,
    pub pose: Pose,
}

impl SonarFrame {
    pub fn new(data: Vec<u8>, intrinsics: SonarIntrinsics, timestamp: f64, pose: Pose) -> Result<Self> {
        let expected = intrinsics.n_range_bins * intrinsics.n_beams;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: (intrinsics.n_range_bins, intrinsics.n_beams),
                actual: (data.len() / intrinsics.n_beams.max(1), intrinsics.n_beams),
            });
        }
        Ok(Self {
            data,
            intrinsics,
            timestamp,
            pose,
        })
    }

    pub fn zeros(intrinsics: SonarIntrinsics) -> Self {
        Self {
            data: vec![0; intrinsics.n_range_bins * intrinsics.n_beams],
            intrinsics,
            timestamp: 0.0,
            pose: Pose::identity(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.intrinsics.n_range_bins
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.intrinsics.n_beams
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, bin: usize, beam: usize) -> u8 {
        self.data[bin * self.cols() + beam]
    }

    #[inline]
    pub fn set(&mut self, bin: usize, beam: usize, v: u8) {
        let cols = self.cols();
        self.data[bin * cols + beam] = v;
    }

    pub fn row(&self, bin: usize) -> &[u8] {
        let c = self.cols();
        &self.data[bin * c..(bin + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundStats {
    pub mu_bg: f64,
    pub sigma_bg: f64,
}

/// Mean and population standard deviation over the first `n_bins` rows.
pub fn estimate_background(frame: &SonarFrame, n_bins: usize) -> Result<BackgroundStats> {
    if n_bins == 0 || n_bins > frame.rows() {
        return Err(Error::param(format!(
            "background needs {n_bins} rows, frame has {}",
            frame.rows()
        )));
    }
    let (s, q) = sums(&frame.data[..n_bins * frame.cols()]);
    let n = (n_bins * frame.cols()) as f64;
    let mu = s as f64 / n;
    // N·Q − S² is exact in integers.
    let spread = (n_bins * frame.cols()) as u128 * q as u128 - (s as u128) * (s as u128);
    Ok(BackgroundStats {
        mu_bg: mu,
        sigma_bg: (spread as f64).sqrt() / n,
    })
}

fn sums(values: &[u8]) -> (u64, u64) {
    values.iter().fold((0u64, 0u64), |(s, q), &v| {
        let v = v as u64;
        (s + v, q + v * v)
    })
}

/// Binary occupancy in polar layout, one byte (0 or 1) per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPolarMap {
    data: Vec<u8>,
    pub intrinsics: SonarIntrinsics,
}

impl BinaryPolarMap {
    pub fn zeros(intrinsics: SonarIntrinsics) -> Self {
        Self {
            data: vec![0; intrinsics.n_range_bins * intrinsics.n_beams],
            intrinsics,
        }
    }

    pub fn from_data(data: Vec<u8>, intrinsics: SonarIntrinsics) -> Result<Self> {
        if data.len() != intrinsics.n_range_bins * intrinsics.n_beams {
            return Err(Error::ShapeMismatch {
                expected: (intrinsics.n_range_bins, intrinsics.n_beams),
                actual: (data.len() / intrinsics.n_beams.max(1), intrinsics.n_beams),
            });
        }
        Ok(Self {
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
            intrinsics,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.intrinsics.n_range_bins
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.intrinsics.n_beams
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, bin: usize, beam: usize) -> bool {
        self.data[bin * self.cols() + beam] != 0
    }

    #[inline]
    pub fn set(&mut self, bin: usize, beam: usize, v: bool) {
        let cols = self.cols();
        self.data[bin * cols + beam] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Rolling-window binarization.
///
/// A row whose maximum is below `mu_bg + 2 sigma_bg` is cleared. Otherwise the
/// window spans rows `[r - w, r + w]` clamped to the frame and all beams, and a
/// pixel is set iff it exceeds the window mean plus one population standard
/// deviation. A zero `sigma_bg` is treated as one intensity unit.
pub fn binarize(frame: &SonarFrame, bg: &BackgroundStats, half_window: usize) -> BinaryPolarMap {
    let (rows, cols) = (frame.rows(), frame.cols());
    let mut out = BinaryPolarMap::zeros(frame.intrinsics);
    if rows == 0 || cols == 0 {
        return out;
    }
    let w = half_window.max(1);
    let sigma_bg = if bg.sigma_bg > 0.0 { bg.sigma_bg } else { 1.0 };
    let gate = bg.mu_bg + 2.0 * sigma_bg;

    // Prefix sums of per-row sum and sum of squares.
    let mut ps = vec![0u64; rows + 1];
    let mut pq = vec![0u64; rows + 1];
    let mut row_max = vec![0u8; rows];
    for r in 0..rows {
        let row = frame.row(r);
        let (s, q) = sums(row);
        ps[r + 1] = ps[r] + s;
        pq[r + 1] = pq[r] + q;
        row_max[r] = row.iter().copied().max().unwrap_or(0);
    }

    for r in 0..rows {
        if (row_max[r] as f64) < gate {
            continue;
        }
        let lo = r.saturating_sub(w);
        let hi = (r + w).min(rows - 1);
        let n = (hi - lo + 1) * cols;
        let (s, q) = (ps[hi + 1] - ps[lo], pq[hi + 1] - pq[lo]);
        let out_row = &mut out.data[r * cols..(r + 1) * cols];
        // p > mu + sigma  <=>  n p - s > sqrt(n q - s^2), evaluated exactly.
        if n < 1 << 20 {
            let (n, s, q) = (n as i64, s as i64, q as i64);
            let spread = n * q - s * s;
            for (o, &p) in out_row.iter_mut().zip(frame.row(r)) {
                let a = n * p as i64 - s;
                *o = (a > 0 && a * a > spread) as u8;
            }
        } else {
            let (n, s, q) = (n as i128, s as i128, q as i128);
            let spread = n * q - s * s;
            for (o, &p) in out_row.iter_mut().zip(frame.row(r)) {
                let a = n * p as i128 - s;
                *o = (a > 0 && a * a > spread) as u8;
            }
        }
    }
    out
}

/// Max-pools `factor × factor` blocks. Dimensions that are not a multiple of
/// `factor` are zero-padded; the padded geometry keeps the per-bin and
/// per-beam spacing, extending range and field of view accordingly.
pub fn decimate_max(frame: &SonarFrame, factor: usize) -> Result<SonarFrame> {
    if factor == 0 {
        return Err(Error::param("decimation factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(frame.clone());
    }
    let (rows, cols) = (frame.rows(), frame.cols());
    let out_rows = rows.div_ceil(factor);
    let out_cols = cols.div_ceil(factor);
    let mut data = vec![0u8; out_rows * out_cols];
    for r in 0..rows {
        let orow = &mut data[(r / factor) * out_cols..(r / factor + 1) * out_cols];
        for (c, &v) in frame.row(r).iter().enumerate() {
            let o = &mut orow[c / factor];
            if v > *o {
                *o = v;
            }
        }
    }
    let src = frame.intrinsics;
    let mut intr = src;
    intr.n_range_bins = out_rows;
    intr.n_beams = out_cols;
    intr.max_range = src.min_range + (out_rows * factor) as f64 * src.range_resolution();
    intr.hfov = (out_cols * factor) as f64 * src.beam_spacing();
    Ok(SonarFrame {
        data,
        intrinsics: intr,
        timestamp: frame.timestamp,
        pose: frame.pose,
    })
}

/// Binary occupancy resampled onto a metric grid in the sonar's horizontal
/// plane. Row index runs along +x (forward), column index along +y.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianOccupancyImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
    pub pixel_pitch: f64,
    /// Sensor-frame (x, y) of the center of pixel (row 0, col 0).
    pub origin: [f64; 2],
}

impl CartesianOccupancyImage {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    /// Sensor-frame (x, y) of a pixel center.
    #[inline]
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin[0] + row as f64 * self.pixel_pitch,
            self.origin[1] + col as f64 * self.pixel_pitch,
        )
    }
}

/// Inverse-maps each cartesian pixel center to its nearest polar pixel.
pub fn to_cartesian(map: &BinaryPolarMap, pixel_pitch: f64) -> Result<CartesianOccupancyImage> {
    if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
        return Err(Error::param("pixel pitch must be positive"));
    }
    let intr = &map.intrinsics;
    let half_extent = intr.max_range * (0.5 * intr.hfov).sin();
    let width = ((2.0 * half_extent / pixel_pitch).ceil() as usize).max(1);
    let height = ((intr.max_range / pixel_pitch).ceil() as usize).max(1);
    let origin = [0.5 * pixel_pitch, -0.5 * width as f64 * pixel_pitch + 0.5 * pixel_pitch];
    let mut img = CartesianOccupancyImage {
        width,
        height,
        data: vec![0; width * height],
        pixel_pitch,
        origin,
    };
    for row in 0..height {
        for col in 0..width {
            let (x, y) = img.pixel_center(row, col);
            let r = x.hypot(y);
            let az = y.atan2(x);
            if let (Some(b), Some(k)) = (intr.bin_of_range(r), intr.beam_of_azimuth(az)) {
                img.data[row * width + col] = map.get(b, k) as u8;
            }
        }
    }
    Ok(img)
}
