//! Marching cubes over the binary occupancy field and Laplacian smoothing.
//!
//! The case table is generated rather than transcribed. Each cube face is
//! contoured from its four corner values alone, with the ambiguous diagonal
//! configuration always separating the occupied corners, so neighbouring cubes
//! agree on every shared face and the surface has no cracks. Face segments are
//! chained into loops; loops longer than three are fanned around an added
//! centroid vertex.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::carve::GridSnapshot;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Default smoothing passes and step.
pub const DEFAULT_SMOOTH_ITERATIONS: usize = 3;
pub const DEFAULT_SMOOTH_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unnormalized face normal (twice the area).
    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(&(c - a))
    }

    /// Number of triangles incident to each undirected edge.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut m = HashMap::new();
        for t in &self.triangles {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// V − E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Area-weighted vertex normals.
    pub fn compute_normals(&mut self) {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for t in 0..self.triangles.len() {
            let f = self.face_normal(t);
            for &v in &self.triangles[t] {
                n[v as usize] += f;
            }
        }
        for v in &mut n {
            let len = v.norm();
            if len > 0.0 {
                *v /= len;
            }
        }
        self.normals = Some(n);
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    /// Unique one-ring neighbours per vertex, sorted.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                adj[a as usize].push(b);
                adj[b as usize].push(a);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}

// Corner c of the unit cube sits at (c & 1, (c >> 1) & 1, (c >> 2) & 1).
fn corner_pos(c: usize) -> [f64; 3] {
    [(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64]
}

struct CubeTopology {
    edges: Vec<(usize, usize)>,
    // per case: loops of edge indices, outward-oriented
    cases: Vec<Vec<Vec<u8>>>,
}

fn topology() -> &'static CubeTopology {
    static TOPO: OnceLock<CubeTopology> = OnceLock::new();
    TOPO.get_or_init(build_topology)
}

fn build_topology() -> CubeTopology {
    let mut edges = Vec::new();
    for c in 0..8usize {
        for axis in 0..3 {
            if c & (1 << axis) == 0 {
                edges.push((c, c | (1 << axis)));
            }
        }
    }
    let edge_of = |a: usize, b: usize| -> usize {
        edges
            .iter()
            .position(|&(x, y)| (x, y) == (a.min(b), a.max(b)))
            .expect("cube edge")
    };
    let mid = |e: usize| -> Vec3 {
        let (a, b) = edges[e];
        (Vec3::from(corner_pos(a)) + Vec3::from(corner_pos(b))) * 0.5
    };

    // Faces as cyclic corner lists plus outward normal.
    let mut faces = Vec::new();
    for axis in 0..3 {
        let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2usize {
            let base = side << axis;
            let ring = [base, base | 1 << u, base | 1 << u | 1 << w, base | 1 << w];
            let mut n = Vec3::zeros();
            n[axis] = if side == 1 { 1.0 } else { -1.0 };
            faces.push((ring, n));
        }
    }

    let mut cases = Vec::with_capacity(256);
    for case in 0..256usize {
        let inside = |c: usize| case & (1 << c) != 0;
        // directed segments: start edge -> end edge
        let mut next = [u8::MAX; 12];
        for (ring, n) in &faces {
            let crossing: Vec<usize> = (0..4).filter(|&i| inside(ring[i]) != inside(ring[(i + 1) % 4])).collect();
            let mut segs: Vec<(usize, usize, usize)> = Vec::new(); // (edge, edge, inside corner)
            match crossing.len() {
                0 => {}
                2 => {
                    let e0 = edge_of(ring[crossing[0]], ring[(crossing[0] + 1) % 4]);
                    let e1 = edge_of(ring[crossing[1]], ring[(crossing[1] + 1) % 4]);
                    let corner = *ring.iter().find(|&&c| inside(c)).unwrap();
                    segs.push((e0, e1, corner));
                }
                4 => {
                    for i in 0..4 {
                        if inside(ring[i]) {
                            let e0 = edge_of(ring[(i + 3) % 4], ring[i]);
                            let e1 = edge_of(ring[i], ring[(i + 1) % 4]);
                            segs.push((e0, e1, ring[i]));
                        }
                    }
                }
                _ => unreachable!("odd number of face crossings"),
            }
            for (e0, e1, corner) in segs {
                let (p, q) = (mid(e0), mid(e1));
                let c = Vec3::from(corner_pos(corner));
                let (s, t) = if (q - p).cross(n).dot(&(c - p)) > 0.0 { (e0, e1) } else { (e1, e0) };
                debug_assert_eq!(next[s], u8::MAX);
                next[s] = t as u8;
            }
        }
        let mut loops = Vec::new();
        let mut seen = [false; 12];
        for start in 0..12 {
            if next[start] == u8::MAX || seen[start] {
                continue;
            }
            let mut lp = Vec::new();
            let mut e = start;
            while !seen[e] {
                seen[e] = true;
                lp.push(e as u8);
                e = next[e] as usize;
            }
            debug_assert_eq!(e, start);
            loops.push(lp);
        }
        cases.push(loops);
    }
    CubeTopology { edges, cases }
}

/// Extracts the 0.5 isosurface of the occupancy field sampled at voxel centers.
///
/// The field is treated as empty outside the grid, so the result is closed
/// even where occupancy touches the grid boundary. Triangles wind
/// counterclockwise seen from outside the occupied region.
pub fn marching_cubes(snapshot: &GridSnapshot) -> TriangleMesh {
    marching_cubes_field(&snapshot.occupied, snapshot.spec.dims, snapshot.spec.origin, snapshot.spec.voxel_size)
}

/// [`marching_cubes`] on a raw occupancy array indexed `(k * ny + j) * nx + i`.
pub fn marching_cubes_field(occupied: &[bool], dims: [usize; 3], origin: [f64; 3], voxel_size: f64) -> TriangleMesh {
    let topo = topology();
    let [nx, ny, nz] = dims;
    assert_eq!(occupied.len(), nx * ny * nz, "occupancy does not match dims");
    let mut mesh = TriangleMesh::default();
    if !occupied.iter().any(|&o| o) {
        return mesh;
    }
    let sample = |i: i64, j: i64, k: i64| -> bool {
        if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
            return false;
        }
        occupied[(k as usize * ny + j as usize) * nx + i as usize]
    };
    let o = Vec3::from(origin);
    // Sample (i, j, k) sits at origin + (i + 0.5) * v.
    let pos = |p: [f64; 3]| o + Vec3::new(p[0] + 0.5, p[1] + 0.5, p[2] + 0.5) * voxel_size;
    let (sx, sy) = (nx as u64 + 2, ny as u64 + 2);
    let mut edge_vertex: HashMap<u64, u32> = HashMap::new();

    // Only cubes with at least one occupied corner matter.
    let mut active = vec![false; (nx + 1) * (ny + 1) * (nz + 1)];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if occupied[(k * ny + j) * nx + i] {
                    for c in 0..8 {
                        let (ci, cj, ck) = (i + 1 - (c & 1), j + 1 - ((c >> 1) & 1), k + 1 - ((c >> 2) & 1));
                        active[(ck * (ny + 1) + cj) * (nx + 1) + ci] = true;
                    }
                }
            }
        }
    }

    let mut ring: Vec<u32> = Vec::with_capacity(12);
    for ck in 0..=nz {
        for cj in 0..=ny {
            for ci in 0..=nx {
                if !active[(ck * (ny + 1) + cj) * (nx + 1) + ci] {
                    continue;
                }
                // Cube whose lowest corner is sample (ci-1, cj-1, ck-1).
                let (bi, bj, bk) = (ci as i64 - 1, cj as i64 - 1, ck as i64 - 1);
                let mut case = 0usize;
                for c in 0..8 {
                    if sample(bi + (c & 1) as i64, bj + ((c >> 1) & 1) as i64, bk + ((c >> 2) & 1) as i64) {
                        case |= 1 << c;
                    }
                }
                for lp in &topo.cases[case] {
                    ring.clear();
                    for &e in lp {
                        let (a, b) = topo.edges[e as usize];
                        let axis = (a ^ b).trailing_zeros() as usize;
                        let (li, lj, lk) = (bi + (a & 1) as i64, bj + ((a >> 1) & 1) as i64, bk + ((a >> 2) & 1) as i64);
                        let key = ((((lk + 1) as u64 * sy + (lj + 1) as u64) * sx + (li + 1) as u64) << 2) | axis as u64;
                        let id = *edge_vertex.entry(key).or_insert_with(|| {
                            let mut p = [li as f64, lj as f64, lk as f64];
                            p[axis] += 0.5;
                            mesh.vertices.push(pos(p));
                            (mesh.vertices.len() - 1) as u32
                        });
                        ring.push(id);
                    }
                    if ring.len() == 3 {
                        mesh.triangles.push([ring[0], ring[1], ring[2]]);
                    } else {
                        let centroid = ring.iter().map(|&v| mesh.vertices[v as usize]).sum::<Vec3>() / ring.len() as f64;
                        mesh.vertices.push(centroid);
                        let c = (mesh.vertices.len() - 1) as u32;
                        for i in 0..ring.len() {
                            mesh.triangles.push([c, ring[i], ring[(i + 1) % ring.len()]]);
                        }
                    }
                }
            }
        }
    }
    mesh
}

/// Umbrella-operator Laplacian smoothing: each pass moves every vertex by
/// `lambda` toward the mean of its one-ring. Connectivity is untouched.
pub fn smooth(mesh: &TriangleMesh, iterations: usize, lambda: f64) -> Result<TriangleMesh> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::param(format!("smoothing lambda {lambda} outside (0, 1)")));
    }
    let mut out = mesh.clone();
    if iterations == 0 {
        return Ok(out);
    }
    let adj = mesh.vertex_neighbors();
    let mut next = out.vertices.clone();
    for _ in 0..iterations {
        for (v, nbrs) in adj.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let mean = nbrs.iter().map(|&n| out.vertices[n as usize]).sum::<Vec3>() / nbrs.len() as f64;
            next[v] = out.vertices[v] + (mean - out.vertices[v]) * lambda;
        }
        std::mem::swap(&mut out.vertices, &mut next);
    }
    if out.normals.is_some() {
        out.compute_normals();
    }
    Ok(out)
}
