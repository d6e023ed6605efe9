//! Optical fusion: depth rendering of the carved mesh from a camera pose,
//! foreground masking, and back-projection of masked pixels into a colored
//! world-frame point cloud.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};
use crate::mesh::TriangleMesh;

/// Depth value stored for pixels whose ray hits nothing.
pub const NO_DEPTH: f64 = 0.0;

#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Camera image with its calibration and world←camera pose.
#[derive(Debug, Clone)]
pub struct OpticalFrame {
    pub pixels: RgbImage,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub timestamp: f64,
}

impl OpticalFrame {
    pub fn new(pixels: RgbImage, intrinsics: CameraIntrinsics, pose: Pose, timestamp: f64) -> Result<Self> {
        intrinsics.validate()?;
        let dims = (pixels.height() as usize, pixels.width() as usize);
        if dims != (intrinsics.height, intrinsics.width) {
            return Err(Error::ShapeMismatch { expected: (intrinsics.height, intrinsics.width), actual: dims });
        }
        Ok(Self { pixels, intrinsics, pose, timestamp })
    }
}

/// Row-major camera-frame z depths in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depths: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
}

impl DepthImage {
    pub fn empty(intrinsics: CameraIntrinsics) -> Self {
        Self {
            width: intrinsics.width,
            height: intrinsics.height,
            depths: vec![NO_DEPTH; intrinsics.width * intrinsics.height],
            intrinsics,
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.depths[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.depths.iter().filter(|&&d| is_valid_depth(d)).count()
    }
}

/// Row-major boolean image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: bool) {
        self.data[v * self.width + u] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::ShapeMismatch { expected: (self.height, self.width), actual: (other.height, other.width) });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Ok(Mask { width: self.width, height: self.height, data })
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count();
        let union = self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Interprets any non-zero luma as foreground.
    pub fn from_luma(img: &image::GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&p| p != 0).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColoredPointCloud {
    pub points: Vec<Vec3>,
    pub colors: Vec<[u8; 3]>,
}

impl ColoredPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: ColoredPointCloud) {
        self.points.extend(other.points);
        self.colors.extend(other.colors);
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self { lo: Vec3::repeat(f64::INFINITY), hi: Vec3::repeat(f64::NEG_INFINITY) }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    /// Slab test; returns the entry distance when the box is hit before `t_max`.
    #[inline]
    fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let ta = (self.lo[a] - origin[a]) * inv_dir[a];
            let tb = (self.hi[a] - origin[a]) * inv_dir[a];
            let (near, far) = if ta < tb { (ta, tb) } else { (tb, ta) };
            // NaN from 0 * inf compares false and leaves the interval alone
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    // leaf: first..first+count in the triangle order; inner: count == 0, left child = first, right = first + 1
    first: u32,
    count: u32,
}

/// Bounding-volume hierarchy over a mesh's triangles.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
    tris: Vec<[Vec3; 3]>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            nodes.push(BvhNode { bounds: Aabb::empty(), first: 0, count: 0 });
            let mut stack = vec![(0usize, 0usize, tris.len())];
            while let Some((node, lo, hi)) = stack.pop() {
                let mut bounds = Aabb::empty();
                let mut cb = Aabb::empty();
                for &t in &order[lo..hi] {
                    for p in &tris[t as usize] {
                        bounds.grow(p);
                    }
                    cb.grow(&centroids[t as usize]);
                }
                nodes[node].bounds = bounds;
                let extent = cb.hi - cb.lo;
                if hi - lo <= LEAF_SIZE || extent.max() <= 0.0 {
                    nodes[node].first = lo as u32;
                    nodes[node].count = (hi - lo) as u32;
                    continue;
                }
                let axis = extent.imax();
                let mid = (lo + hi) / 2;
                order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
                    centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis])
                });
                let left = nodes.len();
                nodes.push(BvhNode { bounds: Aabb::empty(), first: 0, count: 0 });
                nodes.push(BvhNode { bounds: Aabb::empty(), first: 0, count: 0 });
                nodes[node].first = left as u32;
                stack.push((left, lo, mid));
                stack.push((left + 1, mid, hi));
            }
        }
        Self { nodes, order, tris }
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Nearest hit parameter `t > 0` along `origin + t * dir`; `dir` need not be unit length.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best = f64::INFINITY;
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.bounds.hit(origin, &inv, best).is_none() {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.first as usize..(node.first + node.count) as usize] {
                    if let Some(h) = ray_triangle(origin, dir, &self.tris[t as usize]) {
                        if h < best {
                            best = h;
                        }
                    }
                }
            } else {
                let (l, r) = (node.first, node.first + 1);
                let dl = self.nodes[l as usize].bounds.hit(origin, &inv, best);
                let dr = self.nodes[r as usize].bounds.hit(origin, &inv, best);
                // push the farther child first so the nearer one is visited next
                match (dl, dr) {
                    (Some(a), Some(b)) if a < b => stack.extend([r, l]),
                    (Some(_), Some(_)) => stack.extend([l, r]),
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(r),
                    (None, None) => {}
                }
            }
        }
        best.is_finite().then_some(best)
    }
}

/// Two-sided Möller–Trumbore intersection.
#[inline]
fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 1e-12).then_some(t)
}

fn worker_count(rows: usize) -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(rows.max(1))
}

/// Renders camera-frame z depth of the nearest mesh surface for every pixel.
pub fn render_depth(mesh: &TriangleMesh, intr: &CameraIntrinsics, pose: &Pose) -> Result<DepthImage> {
    render_depth_bvh(&Bvh::build(mesh), intr, pose)
}

/// [`render_depth`] against a prebuilt hierarchy, for rendering several views of one mesh.
pub fn render_depth_bvh(bvh: &Bvh, intr: &CameraIntrinsics, pose: &Pose) -> Result<DepthImage> {
    intr.validate()?;
    let mut img = DepthImage::empty(*intr);
    if bvh.is_empty() {
        return Ok(img);
    }
    let (w, h) = (intr.width, intr.height);
    let origin = *pose.translation();
    let workers = worker_count(h);
    let rows_per = h.div_ceil(workers);
    std::thread::scope(|s| {
        for (chunk_idx, chunk) in img.depths.chunks_mut(rows_per * w).enumerate() {
            s.spawn(move || {
                for (i, d) in chunk.iter_mut().enumerate() {
                    let (u, v) = (i % w, chunk_idx * rows_per + i / w);
                    // The ray has unit z in the camera frame, so t is the depth.
                    let dir = pose.rotate_vector(&intr.pixel_ray(u as f64, v as f64));
                    if let Some(t) = bvh.intersect(&origin, &dir) {
                        *d = t;
                    }
                }
            });
        }
    });
    Ok(img)
}

/// Foreground segmentation strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskConfig {
    /// Pixels farther than `threshold` (Euclidean RGB) from the background color.
    /// Without an explicit color the per-channel median of the image border is used.
    ColorThreshold {
        #[serde(default)]
        background: Option<[u8; 3]>,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    /// Every pixel is foreground; only depth validity restricts the cloud.
    All,
}

fn default_threshold() -> f64 {
    40.0
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig::ColorThreshold { background: None, threshold: default_threshold() }
    }
}

fn border_median(img: &RgbImage) -> [u8; 3] {
    let (w, h) = (img.width(), img.height());
    let mut chans: [Vec<u8>; 3] = Default::default();
    let mut push = |x: u32, y: u32| {
        let p = img.get_pixel(x, y).0;
        for c in 0..3 {
            chans[c].push(p[c]);
        }
    };
    for x in 0..w {
        push(x, 0);
        if h > 1 {
            push(x, h - 1);
        }
    }
    for y in 1..h.saturating_sub(1) {
        push(0, y);
        if w > 1 {
            push(w - 1, y);
        }
    }
    let mut out = [0u8; 3];
    for c in 0..3 {
        chans[c].sort_unstable();
        out[c] = chans[c][chans[c].len() / 2];
    }
    out
}

pub fn foreground_mask(frame: &OpticalFrame, cfg: &MaskConfig) -> Mask {
    let img = &frame.pixels;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match cfg {
        MaskConfig::All => Mask::new(w, h, true),
        MaskConfig::ColorThreshold { background, threshold } => {
            if w == 0 || h == 0 {
                return Mask::new(w, h, false);
            }
            let bg = background.unwrap_or_else(|| border_median(img));
            let t2 = threshold * threshold;
            let data = img
                .pixels()
                .map(|p| {
                    let d2: f64 = (0..3).map(|c| (p.0[c] as f64 - bg[c] as f64).powi(2)).sum();
                    d2 > t2
                })
                .collect();
            Mask { width: w, height: h, data }
        }
    }
}

pub fn depth_validity_mask(depth: &DepthImage) -> Mask {
    Mask { width: depth.width, height: depth.height, data: depth.depths.iter().map(|&d| is_valid_depth(d)).collect() }
}

/// Back-projects every masked pixel with a valid depth into the world frame.
pub fn project_pixels(frame: &OpticalFrame, depth: &DepthImage, mask: &Mask) -> Result<ColoredPointCloud> {
    let (w, h) = (frame.pixels.width() as usize, frame.pixels.height() as usize);
    for (ew, eh) in [(depth.width, depth.height), (mask.width, mask.height)] {
        if (ew, eh) != (w, h) {
            return Err(Error::ShapeMismatch { expected: (h, w), actual: (eh, ew) });
        }
    }
    let intr = &frame.intrinsics;
    let mut cloud = ColoredPointCloud::default();
    for v in 0..h {
        for u in 0..w {
            let d = depth.get(u, v);
            if !mask.get(u, v) || !is_valid_depth(d) {
                continue;
            }
            let p = intr.pixel_ray(u as f64, v as f64) * d;
            cloud.points.push(frame.pose.transform_point(&p));
            cloud.colors.push(frame.pixels.get_pixel(u as u32, v as u32).0);
        }
    }
    Ok(cloud)
}

/// Depth render, foreground and validity masks, and back-projection for one frame.
pub fn fuse_frame(bvh: &Bvh, frame: &OpticalFrame, cfg: &MaskConfig, external: Option<&Mask>) -> Result<ColoredPointCloud> {
    let depth = render_depth_bvh(bvh, &frame.intrinsics, &frame.pose)?;
    let fg = match external {
        Some(m) => m.clone(),
        None => foreground_mask(frame, cfg),
    };
    let mask = fg.intersect(&depth_validity_mask(&depth))?;
    project_pixels(frame, &depth, &mask)
}
