//! Synthetic rooms and an exact ray-cast depth renderer.
//!
//! The camera sits at the world origin, gravity aligned, with the floor at
//! `y = -camera_height`. Rooms are cuboids or L-shaped prisms; furniture
//! boxes stand on the floor.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes3d::{plan_intersection_area, BoxRecord, OrientedBox};
use crate::layout_mesh::{contains_point, LayoutMesh};
use crate::pano_geom::EquirectRaster;
use crate::{Error, Result, Vec3};

pub const CATEGORY_NAMES: [&str; 7] = ["bed", "cabinet", "chair", "sofa", "table", "door", "window"];

/// Mean `(l, h, w)` of each category as generated.
pub const CATEGORY_TEMPLATES: [[f64; 3]; 7] = [
    [2.0, 0.6, 1.6],
    [1.0, 1.8, 0.5],
    [0.55, 0.9, 0.55],
    [2.0, 0.85, 0.9],
    [1.2, 0.75, 0.8],
    [0.9, 2.0, 0.1],
    [1.2, 1.2, 0.1],
];

pub const DEFAULT_CAMERA_HEIGHT: f64 = 1.6;
pub const SHAPE_CODE_DIM: usize = 512;
/// Amplitude of pseudo shape-code entries.
pub const SHAPE_CODE_SCALE: f64 = 0.1;

const WALL_MARGIN: f64 = 0.05;
const CAMERA_CLEARANCE: f64 = 0.4;
const MAX_TRIES: usize = 400;
const HIT_EPS: f64 = 1e-12;

pub fn category_index(name: &str) -> Option<u32> {
    CATEGORY_NAMES.iter().position(|&n| n == name).map(|i| i as u32)
}

/// Door and window.
pub fn default_exempt() -> BTreeSet<u32> {
    ["door", "window"].iter().filter_map(|n| category_index(n)).collect()
}

pub fn templates() -> Vec<Vec3> {
    CATEGORY_TEMPLATES.iter().map(|t| Vec3::new(t[0], t[1], t[2])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Total room extent along x, meters.
    pub width: (f64, f64),
    /// Total room extent along z.
    pub depth: (f64, f64),
    pub height: (f64, f64),
    pub camera_height: f64,
    /// Probability of an L-shaped plan.
    pub l_shape_prob: f64,
    /// Object count range; objects that no longer fit are dropped.
    pub objects: (usize, usize),
    /// Categories drawn for furniture.
    pub categories: Vec<u32>,
    /// Relative size jitter, applied per axis.
    pub size_jitter: f64,
    /// Add one box that crosses a wall.
    pub plant_violation: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: (4.0, 6.5),
            depth: (4.5, 7.0),
            height: (2.6, 3.2),
            camera_height: DEFAULT_CAMERA_HEIGHT,
            l_shape_prob: 0.3,
            objects: (3, 6),
            categories: vec![0, 1, 2, 3, 4],
            size_jitter: 0.15,
            plant_violation: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [("width", self.width), ("depth", self.depth), ("height", self.height)];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Domain(format!("{name} range ({lo}, {hi})")));
            }
        }
        if !(self.camera_height > 0.0 && self.camera_height < self.height.0) {
            return Err(Error::Domain(format!(
                "camera height {} must lie below the ceiling",
                self.camera_height
            )));
        }
        if self.objects.0 > self.objects.1 || !(0.0..=1.0).contains(&self.l_shape_prob) {
            return Err(Error::Domain("object count or shape probability range".into()));
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(Error::Domain("size jitter must be in [0, 1)".into()));
        }
        if self.objects.1 > 0 && self.categories.is_empty() {
            return Err(Error::Domain("no categories to draw from".into()));
        }
        if let Some(c) = self.categories.iter().find(|&&c| c as usize >= CATEGORY_NAMES.len()) {
            return Err(Error::Domain(format!("unknown category {c}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub camera_height: f64,
    /// Plan polygon `(x, z)` of the room.
    pub plan: Vec<(f64, f64)>,
    pub layout: LayoutMesh,
    pub boxes: Vec<OrientedBox>,
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, z: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (x1, z1) = poly[i];
        let (x2, z2) = poly[(i + 1) % n];
        if (z1 > z) != (z2 > z) && x < x1 + (z - z1) / (z2 - z1) * (x2 - x1) {
            inside = !inside;
        }
    }
    inside
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dz) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dz) / (dx * dx + dz * dz)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dz).powi(2)).sqrt()
}

/// Plan corners strictly inside the polygon, at least `margin` from every wall.
fn plan_inside(poly: &[(f64, f64)], b: &OrientedBox, margin: f64) -> bool {
    let corners = b.plan_corners();
    let inside = corners.iter().all(|c| {
        point_in_polygon(poly, c[0], c[1])
            && (0..poly.len()).all(|i| dist_to_segment((c[0], c[1]), poly[i], poly[(i + 1) % poly.len()]) >= margin)
    });
    // A convex box with corners inside can still straddle the reflex corner.
    inside
        && (0..poly.len()).all(|i| {
            let p = Vec3::new(poly[i].0, b.center.y, poly[i].1);
            !b.contains(&p)
        })
}

fn range(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.gen_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Deterministic room with furniture.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = range(&mut rng, spec.width);
    let d = range(&mut rng, spec.depth);
    let h = range(&mut rng, spec.height);
    let fx = rng.gen_range(0.35..0.65);
    let fz = rng.gen_range(0.35..0.65);
    let (x0, x1) = (-w * fx, w * (1.0 - fx));
    let (z0, z1) = (-d * fz, d * (1.0 - fz));
    let y0 = -spec.camera_height;
    let y1 = y0 + h;
    let l_shape = rng.gen_bool(spec.l_shape_prob);
    let (plan, root) = if l_shape {
        let cx = x1 * rng.gen_range(0.3..0.6);
        let cz = z1 * rng.gen_range(0.3..0.6);
        (
            vec![(x0, z0), (x1, z0), (x1, z1 - cz), (x1 - cx, z1 - cz), (x1 - cx, z1), (x0, z1)],
            3,
        )
    } else {
        (vec![(x0, z0), (x1, z0), (x1, z1), (x0, z1)], 0)
    };
    let layout = LayoutMesh::prism(&plan, root, y0, y1)?;

    let count = rng.gen_range(spec.objects.0..=spec.objects.1);
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(count + 1);
    for _ in 0..count {
        let cat = spec.categories[rng.gen_range(0..spec.categories.len())];
        let t = CATEGORY_TEMPLATES[cat as usize];
        let mut jit = || 1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter);
        let size = Vec3::new(t[0] * jit(), t[1] * jit(), t[2] * jit());
        if size.y >= h - WALL_MARGIN || size.x.min(size.z) >= w.min(d) - 2.0 * WALL_MARGIN {
            return Err(Error::Generation(format!(
                "{} of size {size:?} does not fit the room",
                CATEGORY_NAMES[cat as usize]
            )));
        }
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let heading = rng.gen_range(-PI..PI);
            let c = Vec3::new(rng.gen_range(x0..x1), y0 + size.y / 2.0, rng.gen_range(z0..z1));
            let b = OrientedBox::new(c, size, heading, cat)?;
            let clear = {
                let (lo, hi) = b.aabb();
                let nearest = Vec3::new(0.0f64.clamp(lo.x, hi.x), 0.0f64.clamp(lo.y, hi.y), 0.0f64.clamp(lo.z, hi.z));
                nearest.norm() > CAMERA_CLEARANCE
            };
            if clear
                && plan_inside(&plan, &b, WALL_MARGIN)
                && boxes.iter().all(|o| plan_intersection_area(o, &b) == 0.0)
            {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            // Crowded: the drawn count is an upper bound.
            None if !boxes.is_empty() => {}
            None => {
                return Err(Error::Generation(format!(
                    "could not place a {} after {MAX_TRIES} tries",
                    CATEGORY_NAMES[cat as usize]
                )))
            }
        }
    }
    if spec.plant_violation {
        // A cabinet pushed halfway through the +x wall.
        let t = CATEGORY_TEMPLATES[1];
        let size = Vec3::new(t[0], t[1], t[2]);
        let zc = z0 + 0.25 * (z1 - z0);
        let b = OrientedBox::new(Vec3::new(x1, y0 + size.y / 2.0, zc), size, 0.0, 1)?;
        boxes.push(b);
    }
    Ok(SyntheticScene {
        seed,
        camera_height: spec.camera_height,
        plan,
        layout,
        boxes,
    })
}

/// Ray parameter of the hit with a triangle, both faces counted.
fn ray_triangle(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(-HIT_EPS..=1.0 + HIT_EPS).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < -HIT_EPS || u + v > 1.0 + HIT_EPS {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > HIT_EPS).then_some(t)
}

/// Slab test in the box frame; entry distance for origins outside the box.
fn ray_box(o: &Vec3, d: &Vec3, b: &OrientedBox) -> Option<f64> {
    let (s, c) = b.heading.sin_cos();
    let to_local = |v: Vec3| Vec3::new(v.x * c - v.z * s, v.y, v.x * s + v.z * c);
    let lo = to_local(o - b.center);
    let ld = to_local(*d);
    let half = b.size / 2.0;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if ld[a].abs() < 1e-300 {
            if lo[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let ta = (-half[a] - lo[a]) / ld[a];
        let tb = (half[a] - lo[a]) / ld[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1 && t0 > HIT_EPS).then_some(t0)
}

/// Nearest hit along `origin + t dir` with the room or a box.
pub fn cast_ray(scene: &SyntheticScene, origin: Vec3, dir: Vec3) -> Option<f64> {
    let m = &scene.layout;
    let mut best: Option<f64> = None;
    let mut keep = |t: f64| {
        if best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    for &[a, b, c] in &m.faces {
        if let Some(t) = ray_triangle(&origin, &dir, &m.vertices[a], &m.vertices[b], &m.vertices[c]) {
            keep(t);
        }
    }
    for b in &scene.boxes {
        if let Some(t) = ray_box(&origin, &dir, b) {
            keep(t);
        }
    }
    best
}

/// Depth panorama (distance along the pixel-center ray) of `width x width/2`.
pub fn render_depth(scene: &SyntheticScene, width: usize) -> Result<EquirectRaster> {
    let cam = Vec3::zeros();
    scene.layout.check_watertight()?;
    if !contains_point(&scene.layout, cam) {
        return Err(Error::Render("camera is outside the layout".into()));
    }
    if scene.boxes.iter().any(|b| b.contains(&cam)) {
        return Err(Error::Render("camera is inside a box".into()));
    }
    let probe = EquirectRaster::filled(width, 1, 0.0)?;
    let height = probe.height;
    let rows: Vec<Result<Vec<f64>>> = (0..height)
        .into_par_iter()
        .map(|row| {
            (0..width)
                .map(|col| {
                    let dir = probe.pixel_center_dir(col, row).unit_vector();
                    cast_ray(scene, cam, dir).ok_or_else(|| {
                        Error::Render(format!("ray at pixel ({col}, {row}) escaped the room"))
                    })
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(width * height);
    for r in rows {
        data.extend(r?);
    }
    EquirectRaster::new(width, height, 1, data)
}

fn hashed_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Deterministic stand-in for a learned shape latent: a per-category base
/// vector plus a smaller size-dependent part.
pub fn pseudo_shape_code(category: u32, size: &Vec3, dim: usize) -> Vec<f64> {
    let mut base = hashed_rng(&[b"category", &category.to_le_bytes()]);
    let size_bytes: Vec<u8> = size.iter().flat_map(|s| s.to_bits().to_le_bytes()).collect();
    let mut detail = hashed_rng(&[b"size", &category.to_le_bytes(), &size_bytes]);
    (0..dim)
        .map(|_| {
            let b: f64 = base.gen_range(-1.0..1.0);
            let s: f64 = detail.gen_range(-1.0..1.0);
            SHAPE_CODE_SCALE * (b + 0.25 * s)
        })
        .collect()
}

/// Evaluation-side view of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Boxes with `shape_code` filled in.
    pub boxes: Vec<OrientedBox>,
    pub layout: LayoutMesh,
    pub codes: Vec<Vec<f64>>,
}

pub fn scene_to_groundtruth(scene: &SyntheticScene) -> GroundTruth {
    let codes: Vec<Vec<f64>> = scene
        .boxes
        .iter()
        .map(|b| pseudo_shape_code(b.category, &b.size, SHAPE_CODE_DIM))
        .collect();
    let boxes = scene
        .boxes
        .iter()
        .zip(&codes)
        .map(|(b, c)| OrientedBox {
            shape_code: Some(c.clone()),
            ..b.clone()
        })
        .collect();
    GroundTruth {
        boxes,
        layout: scene.layout.clone(),
        codes,
    }
}

/// On-disk scene description; the mesh lives in a sidecar OBJ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub seed: u64,
    pub camera_height: f64,
    pub layout_obj: String,
    pub boxes: Vec<BoxRecord>,
    pub codes: Vec<Vec<f64>>,
}

impl SceneFile {
    pub fn new(scene: &SyntheticScene, layout_obj: &str) -> Self {
        let gt = scene_to_groundtruth(scene);
        Self {
            seed: scene.seed,
            camera_height: scene.camera_height,
            layout_obj: layout_obj.to_string(),
            boxes: scene.boxes.iter().map(BoxRecord::from).collect(),
            codes: gt.codes,
        }
    }

    /// Rebuild the scene from this record and its layout mesh.
    pub fn to_scene(&self, layout: LayoutMesh) -> Result<SyntheticScene> {
        let boxes = self
            .boxes
            .iter()
            .map(OrientedBox::try_from)
            .collect::<Result<Vec<_>>>()?;
        let mut plan: Vec<(f64, f64)> = Vec::new();
        for v in &layout.vertices {
            if v.y == -self.camera_height && !plan.contains(&(v.x, v.z)) {
                plan.push((v.x, v.z));
            }
        }
        Ok(SyntheticScene {
            seed: self.seed,
            camera_height: self.camera_height,
            plan,
            layout,
            boxes,
        })
    }
}
