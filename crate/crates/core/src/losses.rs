//! Training objectives with analytic gradients.
//!
//! Layout: Chamfer, normal and edge-sharpness terms between surface samples
//! of a predicted and a ground-truth mesh. Objects: per-stage detection
//! terms averaged over stages. Physics: corners of intersecting boxes that
//! leave the layout's axis-aligned bounds.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes3d::OrientedBox;
use crate::context::heads::{sigmoid, BoxCoder, BoxTarget, HeadLayout};
use crate::layout_mesh::LayoutMesh;
use crate::{Error, Result, Vec3};

pub const CHAMFER_SAMPLES: usize = 1024;
pub const ASSIGN_RADIUS: f64 = 1.0;
/// Faces with less area are skipped by the layout loss.
pub const DEGENERATE_AREA: f64 = 1e-12;
const FLAT_EDGE: f64 = 1e-12;

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_n: f64,
    pub lambda_e: f64,
    pub beta_samp: f64,
    pub beta_objness: f64,
    pub beta_cls: f64,
    pub beta_cen: f64,
    pub beta_size_cls: f64,
    pub beta_size_off: f64,
    pub beta_head_cls: f64,
    pub beta_head_off: f64,
    pub beta_shape: f64,
    pub sigma_l: f64,
    pub sigma_o: f64,
    pub sigma_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_n: 1.0,
            lambda_e: 1.0,
            beta_samp: 1.0,
            beta_objness: 1.0,
            beta_cls: 1.0,
            beta_cen: 1.0,
            beta_size_cls: 1.0,
            beta_size_off: 1.0,
            beta_head_cls: 1.0,
            beta_head_off: 1.0,
            beta_shape: 1.0,
            sigma_l: 1.0,
            sigma_o: 1.0,
            sigma_p: 1.0,
        }
    }
}

impl LossWeights {
    fn all(&self) -> [(&'static str, f64); 15] {
        [
            ("lambda_p", self.lambda_p),
            ("lambda_n", self.lambda_n),
            ("lambda_e", self.lambda_e),
            ("beta_samp", self.beta_samp),
            ("beta_objness", self.beta_objness),
            ("beta_cls", self.beta_cls),
            ("beta_cen", self.beta_cen),
            ("beta_size_cls", self.beta_size_cls),
            ("beta_size_off", self.beta_size_off),
            ("beta_head_cls", self.beta_head_cls),
            ("beta_head_off", self.beta_head_off),
            ("beta_shape", self.beta_shape),
            ("sigma_l", self.sigma_l),
            ("sigma_o", self.sigma_o),
            ("sigma_p", self.sigma_p),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.all() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Domain(format!("weight {name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn as_map(&self) -> BTreeMap<String, f64> {
        self.all().iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }
}

// ---------------------------------------------------------------- layout

struct Samples {
    points: Vec<Vec3>,
    faces: Vec<usize>,
    bary: Vec<[f64; 3]>,
}

fn face_cross(mesh: &LayoutMesh, f: usize) -> Vec3 {
    let [a, b, c] = mesh.faces[f];
    (mesh.vertices[b] - mesh.vertices[a]).cross(&(mesh.vertices[c] - mesh.vertices[a]))
}

/// Back-propagate a gradient on the (unnormalized) face cross product.
fn push_cross_grad(mesh: &LayoutMesh, f: usize, gc: Vec3, grad: &mut [Vec3]) {
    let [a, b, c] = mesh.faces[f];
    let e1 = mesh.vertices[b] - mesh.vertices[a];
    let e2 = mesh.vertices[c] - mesh.vertices[a];
    let g1 = e2.cross(&gc);
    let g2 = gc.cross(&e1);
    grad[a] -= g1 + g2;
    grad[b] += g1;
    grad[c] += g2;
}

fn push_normal_grad(mesh: &LayoutMesh, f: usize, gn: Vec3, grad: &mut [Vec3]) {
    let cr = face_cross(mesh, f);
    let len = cr.norm();
    let n = cr / len;
    push_cross_grad(mesh, f, (gn - n * n.dot(&gn)) / len, grad);
}

fn push_area_grad(mesh: &LayoutMesh, f: usize, ga: f64, grad: &mut [Vec3]) {
    let cr = face_cross(mesh, f);
    push_cross_grad(mesh, f, cr.normalize() * (0.5 * ga), grad);
}

/// `n` samples, faces uniform over non-degenerate faces, points uniform per face.
fn sample_surface(mesh: &LayoutMesh, n: usize, seed: u64) -> Result<(Samples, bool)> {
    let valid: Vec<usize> = (0..mesh.faces.len())
        .filter(|&f| mesh.face_area(f) > DEGENERATE_AREA)
        .collect();
    if valid.is_empty() {
        return Err(Error::Domain("mesh has no non-degenerate faces".into()));
    }
    let degenerate = valid.len() < mesh.faces.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Samples {
        points: Vec::with_capacity(n),
        faces: Vec::with_capacity(n),
        bary: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let f = valid[rng.gen_range(0..valid.len())];
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let q = r1.sqrt();
        let w = [1.0 - q, q * (1.0 - r2), q * r2];
        let [a, b, c] = mesh.faces[f];
        out.points
            .push(mesh.vertices[a] * w[0] + mesh.vertices[b] * w[1] + mesh.vertices[c] * w[2]);
        out.faces.push(f);
        out.bary.push(w);
    }
    Ok((out, degenerate))
}

fn nearest(from: &[Vec3], to: &[Vec3]) -> Vec<usize> {
    from.par_iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, q) in to.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

fn dihedral(n1: &Vec3, n2: &Vec3) -> f64 {
    n1.cross(n2).norm().atan2(n1.dot(n2))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutLoss {
    pub pos: f64,
    pub norm: f64,
    pub sharp: f64,
    pub total: f64,
    /// Zero-area faces were skipped.
    pub degenerate_faces: bool,
    /// Gradient of `total` with respect to every predicted vertex.
    #[serde(skip)]
    pub grad: Vec<Vec3>,
}

/// Weighted Chamfer, normal and sharpness terms of `pred` against `gt`.
///
/// Both meshes draw [`CHAMFER_SAMPLES`] points from the same RNG stream.
/// Each sample carries its face area as an importance weight, which keeps
/// the loss smooth in the vertex positions.
pub fn layout_loss(pred: &LayoutMesh, gt: &LayoutMesh, w: &LossWeights, seed: u64) -> Result<LayoutLoss> {
    w.validate()?;
    pred.check_watertight()?;
    gt.check_watertight()?;
    let (ps, deg_p) = sample_surface(pred, CHAMFER_SAMPLES, seed)?;
    let (gs, deg_g) = sample_surface(gt, CHAMFER_SAMPLES, seed)?;
    let p_area: Vec<f64> = ps.faces.iter().map(|&f| pred.face_area(f)).collect();
    let g_area: Vec<f64> = gs.faces.iter().map(|&f| gt.face_area(f)).collect();
    let p_norm: Vec<Vec3> = ps.faces.iter().map(|&f| pred.face_normal(f)).collect();
    let g_norm: Vec<Vec3> = gs.faces.iter().map(|&f| gt.face_normal(f)).collect();
    let (sw, su): (f64, f64) = (p_area.iter().sum(), g_area.iter().sum());
    let nn_pg = nearest(&ps.points, &gs.points);
    let nn_gp = nearest(&gs.points, &ps.points);

    let mut grad = vec![Vec3::zeros(); pred.vertices.len()];
    // Per-sample gradients on pred sample points, normals and weights.
    let mut g_pt = vec![Vec3::zeros(); ps.points.len()];
    let mut g_n = vec![Vec3::zeros(); ps.points.len()];
    let mut g_w = vec![0.0; ps.points.len()];

    let d2_p: Vec<f64> = (0..ps.points.len())
        .map(|i| (ps.points[i] - gs.points[nn_pg[i]]).norm_squared())
        .collect();
    let c_p: Vec<f64> = (0..ps.points.len())
        .map(|i| 1.0 - p_norm[i].dot(&g_norm[nn_pg[i]]))
        .collect();
    let a_pos: f64 = (0..d2_p.len()).map(|i| p_area[i] * d2_p[i]).sum::<f64>() / sw;
    let a_nrm: f64 = (0..c_p.len()).map(|i| p_area[i] * c_p[i]).sum::<f64>() / sw;
    let mut b_pos = 0.0;
    let mut b_nrm = 0.0;
    for j in 0..gs.points.len() {
        let i = nn_gp[j];
        let diff = gs.points[j] - ps.points[i];
        let u = g_area[j] / su;
        b_pos += u * diff.norm_squared();
        b_nrm += u * (1.0 - g_norm[j].dot(&p_norm[i]));
        g_pt[i] -= diff * (w.lambda_p * u);
        g_n[i] -= g_norm[j] * (0.5 * w.lambda_n * u);
    }
    for i in 0..ps.points.len() {
        let g = gs.points[nn_pg[i]];
        let wi = p_area[i] / sw;
        g_pt[i] += (ps.points[i] - g) * (w.lambda_p * wi);
        g_n[i] -= g_norm[nn_pg[i]] * (0.5 * w.lambda_n * wi);
        g_w[i] += 0.5 * (w.lambda_p * (d2_p[i] - a_pos) + w.lambda_n * (c_p[i] - a_nrm)) / sw;
    }
    let pos = 0.5 * (a_pos + b_pos);
    let norm = 0.5 * (a_nrm + b_nrm);
    for i in 0..ps.points.len() {
        let f = ps.faces[i];
        let fv = pred.faces[f];
        for k in 0..3 {
            grad[fv[k]] += g_pt[i] * ps.bary[i][k];
        }
        if g_n[i] != Vec3::zeros() {
            push_normal_grad(pred, f, g_n[i], &mut grad);
        }
        if g_w[i] != 0.0 {
            push_area_grad(pred, f, g_w[i], &mut grad);
        }
    }

    let sharp = sharpness(pred, gt, w.lambda_e, &mut grad)?;
    let total = w.lambda_p * pos + w.lambda_n * norm + w.lambda_e * sharp;
    Ok(LayoutLoss {
        pos,
        norm,
        sharp,
        total,
        degenerate_faces: deg_p || deg_g,
        grad,
    })
}

fn edge_info(mesh: &LayoutMesh) -> Result<Vec<([usize; 2], [usize; 2], Vec3, f64)>> {
    Ok(mesh
        .edge_faces()?
        .into_iter()
        .map(|(e, f)| {
            let mid = (mesh.vertices[e[0]] + mesh.vertices[e[1]]) * 0.5;
            let ok = mesh.face_area(f[0]) > DEGENERATE_AREA && mesh.face_area(f[1]) > DEGENERATE_AREA;
            let th = if ok {
                dihedral(&mesh.face_normal(f[0]), &mesh.face_normal(f[1]))
            } else {
                f64::NAN
            };
            (e, f, mid, th)
        })
        .collect())
}

/// Mean absolute dihedral difference against the GT edge with the nearest midpoint.
fn sharpness(pred: &LayoutMesh, gt: &LayoutMesh, scale: f64, grad: &mut [Vec3]) -> Result<f64> {
    let pe: Vec<_> = edge_info(pred)?.into_iter().filter(|e| e.3.is_finite()).collect();
    let ge: Vec<_> = edge_info(gt)?.into_iter().filter(|e| e.3.is_finite()).collect();
    if pe.is_empty() || ge.is_empty() {
        return Ok(0.0);
    }
    let g_mid: Vec<Vec3> = ge.iter().map(|e| e.2).collect();
    let p_mid: Vec<Vec3> = pe.iter().map(|e| e.2).collect();
    let nn = nearest(&p_mid, &g_mid);
    let m = pe.len() as f64;
    let mut sum = 0.0;
    for (k, (_, f, _, th)) in pe.iter().enumerate() {
        let diff = th - ge[nn[k]].3;
        sum += diff.abs();
        if scale == 0.0 || diff == 0.0 {
            continue;
        }
        let n1 = pred.face_normal(f[0]);
        let n2 = pred.face_normal(f[1]);
        let x = n1.cross(&n2);
        let sn = x.norm();
        if sn < FLAT_EDGE {
            continue;
        }
        let xh = x / sn;
        let cs = n1.dot(&n2);
        let g = scale * diff.signum() / m;
        let d1 = (n2.cross(&xh) * cs - n2 * sn) * g;
        let d2 = (xh.cross(&n1) * cs - n1 * sn) * g;
        push_normal_grad(pred, f[0], d1, grad);
        push_normal_grad(pred, f[1], d2, grad);
    }
    Ok(sum / m)
}

// ---------------------------------------------------------------- objects

/// `matched[k]` is the GT index assigned to candidate `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectAssignment {
    pub matched: Vec<Option<usize>>,
}

impl ObjectAssignment {
    pub fn matched_count(&self) -> usize {
        self.matched.iter().flatten().count()
    }
}

/// Greedy one-to-one matching of candidate centers to GT centers by distance.
pub fn assign_candidates(anchors: &[Vec3], gts: &[OrientedBox], radius: f64) -> ObjectAssignment {
    let mut pairs = Vec::new();
    for (k, a) in anchors.iter().enumerate() {
        for (g, b) in gts.iter().enumerate() {
            let d = (a - b.center).norm();
            if d <= radius {
                pairs.push((d, k, g));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut matched = vec![None; anchors.len()];
    let mut used = vec![false; gts.len()];
    for (_, k, g) in pairs {
        if matched[k].is_none() && !used[g] {
            matched[k] = Some(g);
            used[g] = true;
        }
    }
    ObjectAssignment { matched }
}

/// Candidate-selection logits and 0/1 labels for the sampling term.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingTargets {
    pub logits: Vec<f64>,
    pub labels: Vec<f64>,
}

/// Everything the object terms compare head outputs against.
#[derive(Debug, Clone)]
pub struct ObjectTargets<'a> {
    pub layout: &'a HeadLayout,
    pub coder: &'a BoxCoder,
    pub anchors: &'a [Vec3],
    pub gts: &'a [OrientedBox],
    /// Shape code per GT box.
    pub gt_codes: &'a [Vec<f64>],
    pub assignment: &'a ObjectAssignment,
    pub sampling: Option<&'a SamplingTargets>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectLoss {
    /// Unweighted per-term values, averaged over stages.
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub samp_omitted: bool,
    pub no_matches: bool,
    /// Gradient of `total` per stage head output.
    #[serde(skip)]
    pub grads: Vec<Array2<f64>>,
    #[serde(skip)]
    pub samp_grad: Option<Vec<f64>>,
}

/// Softplus-form binary cross-entropy on a logit, and its derivative.
fn bce(logit: f64, label: f64) -> (f64, f64) {
    let l = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (l, sigmoid(logit) - label)
}

/// Cross-entropy of `target` under `softmax(logits)`, and the logit gradient.
fn cross_entropy(logits: ArrayView1<f64>, target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let loss = z.ln() + m - logits[target];
    let mut g: Vec<f64> = e.iter().map(|x| x / z).collect();
    g[target] -= 1.0;
    (loss, g)
}

/// Mean over matched candidates of smooth-L1 summed over code dimensions.
pub fn shape_loss(pred_codes: &[&[f64]], gt_codes: &[&[f64]]) -> Result<(f64, bool)> {
    if pred_codes.len() != gt_codes.len() {
        return Err(Error::Shape("shape code counts differ".into()));
    }
    if pred_codes.is_empty() {
        return Ok((0.0, true));
    }
    let mut sum = 0.0;
    for (p, g) in pred_codes.iter().zip(gt_codes) {
        if p.len() != g.len() {
            return Err(Error::Shape(format!("shape code lengths {} and {}", p.len(), g.len())));
        }
        sum += p.iter().zip(g.iter()).map(|(a, b)| smooth_l1(a - b, 1.0)).sum::<f64>();
    }
    Ok((sum / pred_codes.len() as f64, false))
}

pub const OBJECT_TERMS: [&str; 9] = [
    "samp", "objness", "cls", "cen", "size_cls", "size_off", "head_cls", "head_off", "shape",
];

/// Weighted detection terms per stage, averaged over stages.
pub fn object_losses(preds: &[Array2<f64>], t: &ObjectTargets, w: &LossWeights) -> Result<ObjectLoss> {
    w.validate()?;
    if preds.is_empty() {
        return Err(Error::Domain("object losses need at least one stage".into()));
    }
    let kc = t.anchors.len();
    if t.assignment.matched.len() != kc || t.gt_codes.len() != t.gts.len() {
        return Err(Error::Shape("assignment, anchors and GT codes disagree".into()));
    }
    let lay = t.layout;
    let targets: Vec<Option<(BoxTarget, usize)>> = t
        .assignment
        .matched
        .iter()
        .enumerate()
        .map(|(k, m)| match m {
            Some(g) => t.coder.encode(&t.gts[*g], t.anchors[k]).map(|x| Some((x, *g))),
            None => Ok(None),
        })
        .collect::<Result<_>>()?;
    for (x, g) in targets.iter().flatten() {
        if x.category >= lay.cls.len() || x.size_class >= lay.size_cls.len() {
            return Err(Error::Domain(format!("GT category {} outside the head", x.category)));
        }
        if t.gt_codes[*g].len() != lay.shape.len() {
            return Err(Error::Shape("GT shape code length".into()));
        }
    }
    let n_match = targets.iter().flatten().count();
    let inv_m = if n_match > 0 { 1.0 / n_match as f64 } else { 0.0 };
    let n_stage = preds.len() as f64;

    let mut terms: BTreeMap<String, f64> = OBJECT_TERMS.iter().map(|k| (k.to_string(), 0.0)).collect();
    let mut grads = Vec::with_capacity(preds.len());
    for p in preds {
        if p.dim() != (kc, lay.width()) {
            return Err(Error::Shape(format!("head output {:?}, expected {:?}", p.dim(), (kc, lay.width()))));
        }
        let mut g = Array2::zeros(p.dim());
        let mut acc = |name: &str, v: f64| *terms.get_mut(name).unwrap() += v / n_stage;
        let gs = 1.0 / n_stage;
        for k in 0..kc {
            let row = p.row(k);
            let label = if targets[k].is_some() { 1.0 } else { 0.0 };
            let (l, d) = bce(row[lay.objness], label);
            acc("objness", l / kc as f64);
            g[[k, lay.objness]] += gs * w.beta_objness * d / kc as f64;
            let Some((tg, gi)) = &targets[k] else { continue };
            let mut ce = |name: &str, range: std::ops::Range<usize>, target: usize, beta: f64| {
                let (l, d) = cross_entropy(row.slice(s![range.clone()]), target);
                acc(name, l * inv_m);
                for (j, dj) in d.into_iter().enumerate() {
                    g[[k, range.start + j]] += gs * beta * dj * inv_m;
                }
            };
            ce("cls", lay.cls.clone(), tg.category, w.beta_cls);
            ce("size_cls", lay.size_cls.clone(), tg.size_class, w.beta_size_cls);
            ce("head_cls", lay.head_cls.clone(), tg.heading_bin, w.beta_head_cls);
            let so = lay.size_off_of(tg.size_class);
            for a in 0..3 {
                let dc = row[lay.center.start + a] - tg.center_offset[a];
                acc("cen", smooth_l1(dc, 1.0) * inv_m);
                g[[k, lay.center.start + a]] += gs * w.beta_cen * smooth_l1_grad(dc, 1.0) * inv_m;
                let ds = row[so.start + a] - tg.size_offset[a];
                acc("size_off", smooth_l1(ds, 1.0) * inv_m);
                g[[k, so.start + a]] += gs * w.beta_size_off * smooth_l1_grad(ds, 1.0) * inv_m;
            }
            let hi = lay.head_off.start + tg.heading_bin;
            let dh = row[hi] - tg.heading_offset;
            acc("head_off", smooth_l1(dh, 1.0) * inv_m);
            g[[k, hi]] += gs * w.beta_head_off * smooth_l1_grad(dh, 1.0) * inv_m;
            let code = &t.gt_codes[*gi];
            for (j, c) in lay.shape.clone().enumerate() {
                let d = row[c] - code[j];
                acc("shape", smooth_l1(d, 1.0) * inv_m);
                g[[k, c]] += gs * w.beta_shape * smooth_l1_grad(d, 1.0) * inv_m;
            }
        }
        grads.push(g);
    }

    let mut samp_grad = None;
    if let Some(sp) = t.sampling {
        if sp.logits.len() != sp.labels.len() || sp.logits.is_empty() {
            return Err(Error::Shape("sampling logits and labels".into()));
        }
        let n = sp.logits.len() as f64;
        let mut gsamp = Vec::with_capacity(sp.logits.len());
        for (&x, &y) in sp.logits.iter().zip(&sp.labels) {
            let (l, d) = bce(x, y);
            *terms.get_mut("samp").unwrap() += l / n;
            gsamp.push(w.beta_samp * d / n);
        }
        samp_grad = Some(gsamp);
    }
    let beta = [
        ("samp", w.beta_samp),
        ("objness", w.beta_objness),
        ("cls", w.beta_cls),
        ("cen", w.beta_cen),
        ("size_cls", w.beta_size_cls),
        ("size_off", w.beta_size_off),
        ("head_cls", w.beta_head_cls),
        ("head_off", w.beta_head_off),
        ("shape", w.beta_shape),
    ];
    let total = beta.iter().map(|(k, b)| b * terms[*k]).sum();
    Ok(ObjectLoss {
        terms,
        total,
        samp_omitted: t.sampling.is_none(),
        no_matches: n_match == 0,
        grads,
        samp_grad,
    })
}

// ---------------------------------------------------------------- physics

/// Gradient of a scalar with respect to one box's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxGrad {
    pub center: Vec3,
    pub size: Vec3,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalLoss {
    pub value: f64,
    pub box_grads: Vec<BoxGrad>,
    pub layout_grad: Vec<Vec3>,
}

/// Manhattan excess of box corners beyond the layout's per-axis bounds.
///
/// Boxes whose axis-aligned bounds are disjoint from the layout's, and
/// boxes of exempt categories, contribute nothing. Normalized by the total
/// box count.
pub fn physical_violation_loss(
    boxes: &[OrientedBox],
    layout: &LayoutMesh,
    exempt: &BTreeSet<u32>,
) -> Result<PhysicalLoss> {
    layout.check_watertight()?;
    let nv = layout.vertices.len();
    let mut out = PhysicalLoss {
        value: 0.0,
        box_grads: vec![BoxGrad::default(); boxes.len()],
        layout_grad: vec![Vec3::zeros(); nv],
    };
    if boxes.is_empty() {
        return Ok(out);
    }
    let mut hi = [(f64::NEG_INFINITY, 0usize); 3];
    let mut lo = [(f64::INFINITY, 0usize); 3];
    for (i, v) in layout.vertices.iter().enumerate() {
        for a in 0..3 {
            if v[a] > hi[a].0 {
                hi[a] = (v[a], i);
            }
            if v[a] < lo[a].0 {
                lo[a] = (v[a], i);
            }
        }
    }
    let inv_k = 1.0 / boxes.len() as f64;
    for (bi, b) in boxes.iter().enumerate() {
        if exempt.contains(&b.category) {
            continue;
        }
        let (bmin, bmax) = b.aabb();
        if (0..3).any(|a| bmax[a] < lo[a].0 || bmin[a] > hi[a].0) {
            continue;
        }
        let (sn, cs) = b.heading.sin_cos();
        let bg = &mut out.box_grads[bi];
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let lx = sx * b.size.x / 2.0;
                    let lz = sz * b.size.z / 2.0;
                    let p = Vec3::new(
                        b.center.x + lx * cs + lz * sn,
                        b.center.y + sy * b.size.y / 2.0,
                        b.center.z - lx * sn + lz * cs,
                    );
                    // d p / d (l, h, w, heading) per axis.
                    let jac = [
                        [sx * cs / 2.0, 0.0, sz * sn / 2.0, -lx * sn + lz * cs],
                        [0.0, sy / 2.0, 0.0, 0.0],
                        [-sx * sn / 2.0, 0.0, sz * cs / 2.0, -lx * cs - lz * sn],
                    ];
                    for a in 0..3 {
                        let mut g = 0.0;
                        if p[a] > hi[a].0 {
                            out.value += (p[a] - hi[a].0) * inv_k;
                            g += inv_k;
                            out.layout_grad[hi[a].1][a] -= inv_k;
                        }
                        if p[a] < lo[a].0 {
                            out.value += (lo[a].0 - p[a]) * inv_k;
                            g -= inv_k;
                            out.layout_grad[lo[a].1][a] += inv_k;
                        }
                        if g != 0.0 {
                            bg.center[a] += g;
                            bg.size.x += g * jac[a][0];
                            bg.size.y += g * jac[a][1];
                            bg.size.z += g * jac[a][2];
                            bg.heading += g * jac[a][3];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- joint

pub fn joint_loss(layout: f64, object: f64, physic: f64, w: &LossWeights) -> f64 {
    w.sigma_l * layout + w.sigma_o * object + w.sigma_p * physic
}

/// Serializable summary of one joint evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
    pub total: f64,
}

impl LossReport {
    pub fn new(layout: &LayoutLoss, object: &ObjectLoss, physic: f64, w: &LossWeights) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert("L_pos".into(), layout.pos);
        terms.insert("L_norm".into(), layout.norm);
        terms.insert("L_sharp".into(), layout.sharp);
        terms.insert("L_layout".into(), layout.total);
        for (k, v) in &object.terms {
            terms.insert(format!("L_{k}"), *v);
        }
        terms.insert("L_object".into(), object.total);
        terms.insert("L_physic".into(), physic);
        let mut flags = BTreeMap::new();
        flags.insert("samp_omitted".into(), object.samp_omitted);
        flags.insert("no_matches".into(), object.no_matches);
        flags.insert("degenerate_faces".into(), layout.degenerate_faces);
        Self {
            terms,
            weights: w.as_map(),
            flags,
            total: joint_loss(layout.total, object.total, physic, w),
        }
    }
}
