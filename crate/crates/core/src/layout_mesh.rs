//! Tessellated-sphere layout meshes.
//!
//! A layout is a closed, consistently wound triangle mesh. It starts as an
//! icosphere, gets deformed by per-vertex offsets, and is evaluated against a
//! ground-truth room by voxel IoU.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

use crate::{Error, Result, Vec3};

/// Icosphere subdivision levels above this are refused.
pub const MAX_ICOSPHERE_LEVEL: u32 = 7;
pub const DEFAULT_VOXEL_RES: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Optional per-vertex feature block (n x d).
    pub features: Option<Array2<f64>>,
}

impl LayoutMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::Topology(format!("face {f:?} indexes past {n} vertices")));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Domain("non-finite vertex".into()));
        }
        Ok(Self {
            vertices,
            faces,
            features: None,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Undirected edges in first-seen order while walking faces.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = [a.min(b), a.max(b)];
                seen.entry(key).or_insert_with(|| {
                    out.push(key);
                    out.len() - 1
                });
            }
        }
        out
    }

    /// For every undirected edge, the faces on either side (in `edges()` order).
    pub fn edge_faces(&self) -> Result<Vec<([usize; 2], [usize; 2])>> {
        self.check_watertight()?;
        let mut map: HashMap<[usize; 2], Vec<usize>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                map.entry([a.min(b), a.max(b)]).or_default().push(fi);
            }
        }
        Ok(self
            .edges()
            .into_iter()
            .map(|e| {
                let fs = &map[&e];
                (e, [fs[0], fs[1]])
            })
            .collect())
    }

    /// Every edge shared by exactly two faces with opposite directions.
    pub fn check_watertight(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::Topology("mesh has no faces".into()));
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Topology(format!("face {f:?} repeats a vertex")));
            }
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            if count != 1 {
                return Err(Error::Topology(format!(
                    "directed edge ({a}, {b}) used {count} times (inconsistent winding or non-manifold)"
                )));
            }
            if !directed.contains_key(&(b, a)) {
                return Err(Error::Topology(format!("edge ({a}, {b}) is a boundary edge")));
            }
        }
        Ok(())
    }

    pub fn is_watertight(&self) -> bool {
        self.check_watertight().is_ok()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    pub fn face_normal(&self, fi: usize) -> Vec3 {
        let [a, b, c] = self.faces[fi];
        let n = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
        n.normalize()
    }

    pub fn face_area(&self, fi: usize) -> f64 {
        let [a, b, c] = self.faces[fi];
        0.5 * (self.vertices[b] - self.vertices[a])
            .cross(&(self.vertices[c] - self.vertices[a]))
            .norm()
    }

    /// Positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                self.vertices[a].dot(&self.vertices[b].cross(&self.vertices[c])) / 6.0
            })
            .sum()
    }

    pub fn aabb(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Sorted 1-ring neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbr = vec![Vec::new(); self.vertices.len()];
        for [a, b] in self.edges() {
            nbr[a].push(b);
            nbr[b].push(a);
        }
        for n in &mut nbr {
            n.sort_unstable();
        }
        nbr
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v + t).collect(),
            faces: self.faces.clone(),
            features: self.features.clone(),
        }
    }

    pub fn scaled_about(&self, center: Vec3, s: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| center + (v - center) * s).collect(),
            faces: self.faces.clone(),
            features: self.features.clone(),
        }
    }

    /// Axis-aligned box mesh with outward winding (8 vertices, 12 faces).
    pub fn cuboid(min: Vec3, max: Vec3) -> Result<Self> {
        let poly = [
            (min.x, min.z),
            (max.x, min.z),
            (max.x, max.z),
            (min.x, max.z),
        ];
        Self::prism(&poly, 0, min.y, max.y)
    }

    /// Vertical extrusion of a simple plan polygon given as `(x, z)` pairs.
    ///
    /// The polygon must be star-shaped from vertex `fan_root`; floor and
    /// ceiling are fan-triangulated from it.
    pub fn prism(poly: &[(f64, f64)], fan_root: usize, y0: f64, y1: f64) -> Result<Self> {
        let k = poly.len();
        if k < 3 || fan_root >= k || !(y1 > y0) {
            return Err(Error::Domain("invalid prism".into()));
        }
        let mut vertices = Vec::with_capacity(2 * k);
        for &(x, z) in poly {
            vertices.push(Vec3::new(x, y0, z));
        }
        for &(x, z) in poly {
            vertices.push(Vec3::new(x, y1, z));
        }
        let mut faces = Vec::new();
        for step in 1..k - 1 {
            let a = fan_root;
            let b = (fan_root + step) % k;
            let c = (fan_root + step + 1) % k;
            faces.push([a, b, c]);
            faces.push([k + a, k + c, k + b]);
        }
        for i in 0..k {
            let j = (i + 1) % k;
            faces.push([i, j + k, j]);
            faces.push([i, i + k, j + k]);
        }
        let mut mesh = Self::new(vertices, faces)?;
        if mesh.signed_volume() < 0.0 {
            for f in &mut mesh.faces {
                f.swap(1, 2);
            }
        }
        Ok(mesh)
    }
}

fn icosahedron() -> LayoutMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ];
    let vertices: Vec<Vec3> = raw
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
    let mut faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for f in &mut faces {
        let [a, b, c] = *f;
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        if n.dot(&(vertices[a] + vertices[b] + vertices[c])) < 0.0 {
            f.swap(1, 2);
        }
    }
    LayoutMesh {
        vertices,
        faces,
        features: None,
    }
}

fn split_faces(mesh: &LayoutMesh, project: bool) -> LayoutMesh {
    let edges = mesh.edges();
    let n = mesh.vertices.len();
    let mut vertices = mesh.vertices.clone();
    let mut mid = HashMap::with_capacity(edges.len());
    for (k, &[a, b]) in edges.iter().enumerate() {
        let mut m = (mesh.vertices[a] + mesh.vertices[b]) * 0.5;
        if project {
            m = m.normalize();
        }
        vertices.push(m);
        mid.insert([a, b], n + k);
    }
    let key = |a: usize, b: usize| mid[&[a.min(b), a.max(b)]];
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let (ab, bc, ca) = (key(a, b), key(b, c), key(c, a));
        faces.push([a, ab, ca]);
        faces.push([b, bc, ab]);
        faces.push([c, ca, bc]);
        faces.push([ab, bc, ca]);
    }
    LayoutMesh {
        vertices,
        faces,
        features: None,
    }
}

/// Unit icosphere; `level` rounds of midpoint subdivision projected to the sphere.
pub fn icosphere(level: u32) -> Result<LayoutMesh> {
    if level > MAX_ICOSPHERE_LEVEL {
        return Err(Error::Resource(format!(
            "icosphere level {level} exceeds {MAX_ICOSPHERE_LEVEL}"
        )));
    }
    let mut mesh = icosahedron();
    for _ in 0..level {
        mesh = split_faces(&mesh, true);
    }
    Ok(mesh)
}

/// Icosphere level whose vertex count is `n`, if any.
pub fn icosphere_level_for(n: usize) -> Option<u32> {
    (0..=MAX_ICOSPHERE_LEVEL).find(|&l| 10 * 4usize.pow(l) + 2 == n)
}

/// Midpoint subdivision without re-projection: `n` vertices become `4n - 6`.
///
/// The first `n` output vertices are the input vertices; vertex `n + k` is
/// the midpoint of edge `k` of [`LayoutMesh::edges`].
pub fn subdivide(mesh: &LayoutMesh) -> Result<LayoutMesh> {
    mesh.check_watertight()?;
    Ok(split_faces(mesh, false))
}

/// Add per-vertex offsets; topology is untouched.
/// Pull vertex gradients of `subdivide(mesh)` back to `mesh`'s vertices.
pub fn subdivide_backward(mesh: &LayoutMesh, fine_grad: &[Vec3]) -> Result<Vec<Vec3>> {
    let edges = mesh.edges();
    let n = mesh.vertices.len();
    if fine_grad.len() != n + edges.len() {
        return Err(Error::Shape(format!(
            "{} gradients for a subdivided mesh of {} vertices",
            fine_grad.len(),
            n + edges.len()
        )));
    }
    let mut out = fine_grad[..n].to_vec();
    for (k, &[a, b]) in edges.iter().enumerate() {
        let g = fine_grad[n + k] * 0.5;
        out[a] += g;
        out[b] += g;
    }
    Ok(out)
}

pub fn deform(mesh: &LayoutMesh, offsets: &[Vec3]) -> Result<LayoutMesh> {
    if offsets.len() != mesh.vertices.len() {
        return Err(Error::Shape(format!(
            "{} offsets for {} vertices",
            offsets.len(),
            mesh.vertices.len()
        )));
    }
    if offsets.iter().any(|o| !o.iter().all(|c| c.is_finite())) {
        return Err(Error::Domain("non-finite offset".into()));
    }
    Ok(LayoutMesh {
        vertices: mesh.vertices.iter().zip(offsets).map(|(v, o)| v + o).collect(),
        faces: mesh.faces.clone(),
        features: mesh.features.clone(),
    })
}

/// One propagation step: `out_i = W_self f_i + W_nbr mean_{j in N(i)} f_j`.
pub fn graph_conv(
    mesh: &LayoutMesh,
    features: ArrayView2<f64>,
    w_self: ArrayView2<f64>,
    w_nbr: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let (n, d) = features.dim();
    if n != mesh.vertices.len() {
        return Err(Error::Shape(format!("{n} feature rows for {} vertices", mesh.vertices.len())));
    }
    if w_self.dim() != (d, d) || w_nbr.dim() != (d, d) {
        return Err(Error::Shape(format!("weights must be {d}x{d}")));
    }
    let nbr = mesh.neighbors();
    let mut mean = Array2::<f64>::zeros((n, d));
    for (i, ns) in nbr.iter().enumerate() {
        if ns.is_empty() {
            continue;
        }
        let mut row = mean.row_mut(i);
        for &j in ns {
            row += &features.row(j);
        }
        row /= ns.len() as f64;
    }
    Ok(features.dot(&w_self.t()) + mean.dot(&w_nbr.t()))
}

/// Regular voxel grid; cell centers at `min + (i + 0.5) * cell`.
#[derive(Debug, Clone, Copy)]
pub struct VoxelGrid {
    pub min: Vec3,
    pub cell: Vec3,
    pub res: usize,
}

impl VoxelGrid {
    pub fn covering(lo: Vec3, hi: Vec3, res: usize) -> Result<Self> {
        let ext = hi - lo;
        if ext.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Domain("degenerate voxel grid extent".into()));
        }
        Ok(Self {
            min: lo,
            cell: ext / res as f64,
            res,
        })
    }

    pub fn center(&self, i: usize, axis: usize) -> f64 {
        self.min[axis] + (i as f64 + 0.5) * self.cell[axis]
    }
}

// Edge function with a canonical endpoint order so the two triangles sharing
// an edge see exactly negated values.
#[inline]
fn edge_fn(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let (s, t, sign) = if (a[0], a[1]) <= (b[0], b[1]) {
        (a, b, 1.0)
    } else {
        (b, a, -1.0)
    };
    sign * ((t[0] - s[0]) * (p[1] - s[1]) - (t[1] - s[1]) * (p[0] - s[0]))
}

#[inline]
fn top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let d = [b[0] - a[0], b[1] - a[1]];
    d[1] < 0.0 || (d[1] == 0.0 && d[0] < 0.0)
}

/// Height at which a vertical ray through plan point `p` crosses the triangle,
/// using a top-left fill rule so shared edges and vertices count once.
fn vertical_crossing(tri: [Vec3; 3], p: [f64; 2]) -> Option<f64> {
    let mut q = [[tri[0].x, tri[0].z], [tri[1].x, tri[1].z], [tri[2].x, tri[2].z]];
    let mut ys = [tri[0].y, tri[1].y, tri[2].y];
    let mut area = edge_fn(q[0], q[1], q[2]);
    if area == 0.0 {
        return None;
    }
    if area < 0.0 {
        q.swap(1, 2);
        ys.swap(1, 2);
        area = -area;
    }
    let mut w = [0.0; 3];
    for k in 0..3 {
        let (a, b) = (q[(k + 1) % 3], q[(k + 2) % 3]);
        let e = edge_fn(a, b, p);
        if e < 0.0 || (e == 0.0 && !top_left(a, b)) {
            return None;
        }
        w[k] = e;
    }
    Some((w[0] * ys[0] + w[1] * ys[1] + w[2] * ys[2]) / area)
}

/// Inside/outside per voxel by vertical ray parity; index `(ix * res + iz) * res + iy`.
pub fn voxelize(mesh: &LayoutMesh, grid: &VoxelGrid) -> Vec<bool> {
    let res = grid.res;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); res * res];
    let col_range = |lo: f64, hi: f64, axis: usize| -> (usize, usize) {
        let a = ((lo - grid.min[axis]) / grid.cell[axis] - 0.5).ceil().max(0.0);
        let b = ((hi - grid.min[axis]) / grid.cell[axis] - 0.5).floor();
        if b < a {
            return (1, 0);
        }
        (a as usize, (b as usize).min(res - 1))
    };
    for &[a, b, c] in &mesh.faces {
        let tri = [mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]];
        let xmin = tri.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
        let xmax = tri.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
        let zmin = tri.iter().map(|v| v.z).fold(f64::INFINITY, f64::min);
        let zmax = tri.iter().map(|v| v.z).fold(f64::NEG_INFINITY, f64::max);
        let (x0, x1) = col_range(xmin, xmax, 0);
        let (z0, z1) = col_range(zmin, zmax, 2);
        for ix in x0..=x1 {
            for iz in z0..=z1 {
                let p = [grid.center(ix, 0), grid.center(iz, 2)];
                if let Some(y) = vertical_crossing(tri, p) {
                    columns[ix * res + iz].push(y);
                }
            }
        }
    }
    let mut occ = vec![false; res * res * res];
    for (ci, ys) in columns.iter_mut().enumerate() {
        if ys.is_empty() {
            continue;
        }
        ys.sort_by(f64::total_cmp);
        let mut k = 0;
        for iy in 0..res {
            let y = grid.center(iy, 1);
            while k < ys.len() && ys[k] < y {
                k += 1;
            }
            occ[ci * res + iy] = k % 2 == 1;
        }
    }
    occ
}

/// Point-in-solid by vertical ray parity.
pub fn contains_point(mesh: &LayoutMesh, p: Vec3) -> bool {
    let q = [p.x, p.z];
    let crossings = mesh
        .faces
        .iter()
        .filter_map(|&[a, b, c]| {
            vertical_crossing([mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]], q)
        })
        .filter(|&y| y > p.y)
        .count();
    crossings % 2 == 1
}

/// Plan-footprint (2D) and volumetric (3D) IoU on a shared voxel grid.
///
/// The grid spans the union bounding box at `voxel_res` cells per axis. The
/// footprint is the projection of occupied voxels at any height.
pub fn layout_iou(pred: &LayoutMesh, gt: &LayoutMesh, voxel_res: usize) -> Result<(f64, f64)> {
    if voxel_res < 16 {
        return Err(Error::Domain(format!("voxel_res {voxel_res} < 16")));
    }
    pred.check_watertight()?;
    gt.check_watertight()?;
    let (la, ha) = pred.aabb();
    let (lb, hb) = gt.aabb();
    let grid = VoxelGrid::covering(la.inf(&lb), ha.sup(&hb), voxel_res)?;
    let a = voxelize(pred, &grid);
    let b = voxelize(gt, &grid);
    let (mut inter3, mut union3, mut inter2, mut union2) = (0usize, 0usize, 0usize, 0usize);
    let res = voxel_res;
    for col in 0..res * res {
        let (mut fa, mut fb) = (false, false);
        for iy in 0..res {
            let (x, y) = (a[col * res + iy], b[col * res + iy]);
            inter3 += (x && y) as usize;
            union3 += (x || y) as usize;
            fa |= x;
            fb |= y;
        }
        inter2 += (fa && fb) as usize;
        union2 += (fa || fb) as usize;
    }
    let ratio = |i: usize, u: usize| if u == 0 { 0.0 } else { i as f64 / u as f64 };
    Ok((ratio(inter2, union2), ratio(inter3, union3)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn icosphere_counts() {
        let expect = [12, 42, 162, 642, 2562];
        for (level, &n) in expect.iter().enumerate() {
            let m = icosphere(level as u32).unwrap();
            assert_eq!(m.vertex_count(), n);
            assert_eq!(m.edges().len(), 3 * n - 6);
            assert_eq!(m.euler_characteristic(), 2);
            assert!(m.is_watertight());
            assert!(m.signed_volume() > 0.0);
            assert!(m.vertices.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        }
        assert_eq!(icosphere(0).unwrap().faces.len(), 20);
        assert!(matches!(icosphere(8), Err(Error::Resource(_))));
        assert_eq!(icosphere_level_for(642), Some(3));
        assert_eq!(icosphere_level_for(641), None);
    }

    #[test]
    fn subdivide_counts_and_topology() {
        for level in 0..4 {
            let m = icosphere(level).unwrap();
            let n = m.vertex_count();
            let s = subdivide(&m).unwrap();
            assert_eq!(s.vertex_count(), 4 * n - 6);
            assert!(s.is_watertight());
            assert!(s.signed_volume() > 0.0);
            assert_eq!(&s.vertices[..n], &m.vertices[..]);
        }
        let s = subdivide(&icosphere(0).unwrap()).unwrap();
        // midpoints are not projected back to the sphere
        assert!(s.vertices[12..].iter().all(|v| v.norm() < 1.0 - 1e-3));
    }

    #[test]
    fn subdivide_rejects_open_mesh() {
        let mut m = icosphere(1).unwrap();
        m.faces.pop();
        assert!(matches!(subdivide(&m), Err(Error::Topology(_))));
        let mut flipped = icosphere(1).unwrap();
        flipped.faces[0].swap(1, 2);
        assert!(matches!(flipped.check_watertight(), Err(Error::Topology(_))));
    }

    #[test]
    fn deform_cases() {
        let m = icosphere(2).unwrap();
        let n = m.vertex_count();
        assert_eq!(deform(&m, &vec![Vec3::zeros(); n]).unwrap(), m);
        let t = Vec3::new(0.3, -1.0, 2.0);
        let moved = deform(&m, &vec![t; n]).unwrap();
        for i in [0, 5, 17] {
            for j in [1, 9, 100] {
                let d0 = (m.vertices[i] - m.vertices[j]).norm();
                let d1 = (moved.vertices[i] - moved.vertices[j]).norm();
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
        let r = 2.5;
        let radial: Vec<Vec3> = m.vertices.iter().map(|v| v.normalize() * (r - 1.0)).collect();
        let big = deform(&m, &radial).unwrap();
        assert!(big.vertices.iter().all(|v| (v.norm() - r).abs() < 1e-12));
        assert!(matches!(deform(&m, &[Vec3::zeros()]), Err(Error::Shape(_))));
        let mut bad = vec![Vec3::zeros(); n];
        bad[3].x = f64::NAN;
        assert!(matches!(deform(&m, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn graph_conv_cases() {
        let m = icosphere(1).unwrap();
        let (n, d) = (m.vertex_count(), 3);
        let feats = Array2::from_shape_fn((n, d), |(i, k)| (i * 3 + k) as f64 * 0.1);
        let eye = Array2::<f64>::eye(d);
        let zero = Array2::<f64>::zeros((d, d));
        let out = graph_conv(&m, feats.view(), eye.view(), zero.view()).unwrap();
        assert_eq!(out, feats);

        let c = Array2::from_elem((n, d), 1.7);
        let half = &eye * 0.5;
        let out = graph_conv(&m, c.view(), half.view(), half.view()).unwrap();
        assert!(out.iter().all(|&x| (x - 1.7).abs() < 1e-12));

        // impulse reaches exactly the 1-ring
        let mut imp = Array2::<f64>::zeros((n, d));
        imp[[7, 0]] = 1.0;
        let out = graph_conv(&m, imp.view(), zero.view(), eye.view()).unwrap();
        let mut ring = vec![false; n];
        for [a, b] in m.edges() {
            if a == 7 {
                ring[b] = true;
            }
            if b == 7 {
                ring[a] = true;
            }
        }
        for i in 0..n {
            assert_eq!(out[[i, 0]] != 0.0, ring[i], "vertex {i}");
        }
        assert!(graph_conv(&m, imp.view(), Array2::<f64>::eye(2).view(), zero.view()).is_err());
    }

    #[test]
    fn graph_conv_is_linear() {
        let m = icosphere(1).unwrap();
        let n = m.vertex_count();
        let a = Array2::from_shape_fn((n, 2), |(i, k)| ((i + k) as f64).sin());
        let b = Array2::from_shape_fn((n, 2), |(i, k)| ((i * k) as f64).cos());
        let ws = Array2::from_shape_fn((2, 2), |(i, k)| (i as f64) - k as f64 * 0.5);
        let wn = Array2::from_shape_fn((2, 2), |(i, k)| 0.3 + (i * k) as f64);
        let f = |x: &Array2<f64>| graph_conv(&m, x.view(), ws.view(), wn.view()).unwrap();
        let lhs = f(&(&a * 2.0 + &b));
        let rhs = f(&a) * 2.0 + f(&b);
        assert!(lhs.iter().zip(rhs.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn prism_meshes_are_closed() {
        let cube = LayoutMesh::cuboid(Vec3::repeat(-1.0), Vec3::repeat(1.0)).unwrap();
        assert!(cube.is_watertight());
        assert!((cube.signed_volume() - 8.0).abs() < 1e-12);
        let l = [(0.0, 0.0), (4.0, 0.0), (4.0, 2.0), (2.0, 2.0), (2.0, 4.0), (0.0, 4.0)];
        let m = LayoutMesh::prism(&l, 3, -1.0, 1.0).unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!((m.signed_volume() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn containment() {
        let cube = LayoutMesh::cuboid(Vec3::repeat(-1.0), Vec3::repeat(1.0)).unwrap();
        assert!(contains_point(&cube, Vec3::zeros()));
        assert!(!contains_point(&cube, Vec3::new(1.5, 0.0, 0.0)));
        let s = icosphere(2).unwrap();
        assert!(contains_point(&s, Vec3::new(0.1, 0.2, -0.3)));
        assert!(!contains_point(&s, Vec3::new(0.0, 0.0, 1.2)));
    }

    #[test]
    fn iou_identical_nested_disjoint() {
        let cube = LayoutMesh::cuboid(Vec3::repeat(-0.5), Vec3::repeat(0.5)).unwrap();
        assert_eq!(layout_iou(&cube, &cube, 32).unwrap(), (1.0, 1.0));
        let half = cube.scaled_about(Vec3::zeros(), 0.5);
        let (i2, i3) = layout_iou(&cube, &half, 128).unwrap();
        assert!((i3 - 0.125).abs() < 0.01 && (i2 - 0.25).abs() < 0.01);
        let far = cube.translated(Vec3::new(3.0, 0.0, 0.0));
        assert_eq!(layout_iou(&cube, &far, 32).unwrap(), (0.0, 0.0));
        assert!(layout_iou(&cube, &cube, 8).is_err());
        let s = icosphere(3).unwrap();
        assert_eq!(layout_iou(&s, &s, 48).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn sphere_voxel_volume() {
        let s = icosphere(4).unwrap();
        let grid = VoxelGrid::covering(Vec3::repeat(-1.0), Vec3::repeat(1.0), 96).unwrap();
        let occ = voxelize(&s, &grid);
        let vol = occ.iter().filter(|&&x| x).count() as f64 * grid.cell.product();
        assert!((vol - s.signed_volume()).abs() / s.signed_volume() < 0.02);
    }

    #[test]
    fn iou_symmetry_and_continuity() {
        let a = LayoutMesh::cuboid(Vec3::new(-2.0, -1.6, -3.0), Vec3::new(2.0, 1.4, 3.0)).unwrap();
        let b = icosphere(3).unwrap().scaled_about(Vec3::zeros(), 2.5);
        let ab = layout_iou(&a, &b, 64).unwrap();
        let ba = layout_iou(&b, &a, 64).unwrap();
        assert_eq!(ab, ba);
        let diag = (Vec3::new(4.0, 3.0, 6.0)).norm();
        let mut prev = 0.0;
        for eps in [0.1, 0.01] {
            let shift = Vec3::new(1.0, 0.5, 0.3).normalize() * eps * diag;
            let t = a.translated(shift);
            let (_, i3) = layout_iou(&a, &t, 128).unwrap();
            let inter: f64 = (0..3).map(|k| [4.0, 3.0, 6.0][k] - shift[k].abs()).product();
            let exact = inter / (144.0 - inter);
            assert!(i3 > prev && (i3 - exact).abs() < 0.02, "{i3} vs {exact}");
            prev = i3;
        }
    }
}
