//! Gravity-aligned oriented 3D boxes and detection metrics.
//!
//! A box has size `(l, h, w)` along its local x, y and z axes. The heading
//! rotates the local frame about +y, taking +z toward +x, which matches the
//! azimuth convention of [`crate::pano_geom`].

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Default match threshold for evaluation.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.15;
const CLIP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OrientedBox {
    pub center: Vec3,
    /// `(l, h, w)`, all strictly positive.
    pub size: Vec3,
    pub heading: f64,
    pub category: u32,
    pub score: Option<f64>,
    pub shape_code: Option<Vec<f64>>,
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

impl OrientedBox {
    pub fn new(center: Vec3, size: Vec3, heading: f64, category: u32) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("box size {size:?} must be positive")));
        }
        if !center.iter().all(|c| c.is_finite()) || !heading.is_finite() {
            return Err(Error::Domain("non-finite box parameters".into()));
        }
        Ok(Self {
            center,
            size,
            heading,
            category,
            score: None,
            shape_code: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn volume(&self) -> f64 {
        self.size.product()
    }

    /// Local `(x, z)` half-extent direction to world plan offset.
    #[inline]
    pub fn rotate_plan(&self, lx: f64, lz: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (lx * c + lz * s, -lx * s + lz * c)
    }

    /// Plan rectangle corners `(x, z)`, counter-clockwise about +y starting at
    /// local `(+l/2, +w/2)`.
    pub fn plan_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.size.x / 2.0, self.size.z / 2.0);
        let local = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)];
        local.map(|(lx, lz)| {
            let (dx, dz) = self.rotate_plan(lx, lz);
            [self.center.x + dx, self.center.z + dz]
        })
    }

    /// Eight corners: bottom face (`y = cy - h/2`) in [`OrientedBox::plan_corners`]
    /// order, then the top face in the same order.
    pub fn corners(&self) -> [Vec3; 8] {
        let plan = self.plan_corners();
        let (y0, y1) = (
            self.center.y - self.size.y / 2.0,
            self.center.y + self.size.y / 2.0,
        );
        let mut out = [Vec3::zeros(); 8];
        for (k, p) in plan.iter().enumerate() {
            out[k] = Vec3::new(p[0], y0, p[1]);
            out[k + 4] = Vec3::new(p[0], y1, p[1]);
        }
        out
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let d = p - self.center;
        let (s, c) = self.heading.sin_cos();
        // inverse plan rotation
        let lx = d.x * c - d.z * s;
        let lz = d.x * s + d.z * c;
        lx.abs() <= self.size.x / 2.0 && d.y.abs() <= self.size.y / 2.0 && lz.abs() <= self.size.z / 2.0
    }

    pub fn aabb(&self) -> (Vec3, Vec3) {
        let cs = self.corners();
        let mut lo = cs[0];
        let mut hi = cs[0];
        for c in &cs[1..] {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        (lo, hi)
    }

    fn sort_key(&self) -> [f64; 7] {
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.size.x,
            self.size.y,
            self.size.z,
            self.heading,
        ]
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

fn ccw(mut poly: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    if polygon_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Intersection polygon of two convex polygons (Sutherland-Hodgman).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let clip = ccw(clip.to_vec());
    let mut out = ccw(subject.to_vec());
    let side = |a: [f64; 2], b: [f64; 2], p: [f64; 2]| {
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    };
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(a, b, p), side(a, b, q));
            let p_in = sp >= -CLIP_EPS;
            let q_in = sq >= -CLIP_EPS;
            if p_in {
                out.push(p);
            }
            if p_in != q_in {
                let denom = sp - sq;
                if denom.abs() > CLIP_EPS {
                    let t = sp / denom;
                    out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
                }
            }
        }
    }
    out
}

/// Area of the overlap of the two plan rectangles.
pub fn plan_intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    polygon_area(&clip_convex(&a.plan_corners(), &b.plan_corners())).max(0.0)
}

/// Rotated 3D IoU of two gravity-aligned boxes; exactly symmetric.
pub fn iou3d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let (a, b) = match cmp_boxes(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let y_lo = (a.center.y - a.size.y / 2.0).max(b.center.y - b.size.y / 2.0);
    let y_hi = (a.center.y + a.size.y / 2.0).min(b.center.y + b.size.y / 2.0);
    if y_hi <= y_lo {
        return 0.0;
    }
    let inter = plan_intersection_area(a, b) * (y_hi - y_lo);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn cmp_boxes(a: &OrientedBox, b: &OrientedBox) -> Ordering {
    let (ka, kb) = (a.sort_key(), b.sort_key());
    for (x, y) in ka.iter().zip(&kb) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Per-category AP and their mean over categories with at least one GT.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub per_category: BTreeMap<u32, f64>,
    pub map: f64,
    pub iou_threshold: f64,
}

/// Precision/recall points for one category; one point per distinct score.
pub fn pr_curve(
    dets: &[Vec<OrientedBox>],
    gts: &[Vec<OrientedBox>],
    category: u32,
    iou_thresh: f64,
) -> (Vec<f64>, Vec<f64>, usize) {
    let n_gt: usize = gts
        .iter()
        .map(|g| g.iter().filter(|b| b.category == category).count())
        .sum();
    let mut cands: Vec<(usize, &OrientedBox)> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().filter(|b| b.category == category).map(move |b| (s, b)))
        .collect();
    // stable: ties keep input order
    cands.sort_by(|x, y| {
        let (sx, sy) = (x.1.score.unwrap_or(0.0), y.1.score.unwrap_or(0.0));
        sy.total_cmp(&sx)
    });
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut precision, mut recall) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < cands.len() {
        let score = cands[i].1.score.unwrap_or(0.0);
        while i < cands.len() && cands[i].1.score.unwrap_or(0.0) == score {
            let (s, det) = cands[i];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts[s].iter().enumerate() {
                if g.category != category || matched[s][gi] {
                    continue;
                }
                let iou = iou3d(det, g);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[s][gi] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            i += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    (precision, recall, n_gt)
}

/// All-point interpolated area under a precision/recall curve.
pub fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mrec.push(0.0);
    mpre.push(0.0);
    mrec.extend_from_slice(recall);
    mpre.extend_from_slice(precision);
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..mrec.len() - 1 {
        if mrec[i + 1] != mrec[i] {
            ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1];
        }
    }
    ap
}

/// Detection AP per category over a set of scenes.
///
/// Detections are matched greedily in descending score order to the
/// best-IoU still-unmatched GT of the same scene and category; a match needs
/// `iou3d >= iou_thresh`. Detections with equal scores form a single
/// precision/recall point.
pub fn average_precision(
    dets: &[Vec<OrientedBox>],
    gts: &[Vec<OrientedBox>],
    iou_thresh: f64,
) -> Result<ApReport> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection scenes vs {} GT scenes",
            dets.len(),
            gts.len()
        )));
    }
    let mut cats: Vec<u32> = gts.iter().flatten().map(|b| b.category).collect();
    cats.sort_unstable();
    cats.dedup();
    if cats.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth boxes".into()));
    }
    let mut per_category = BTreeMap::new();
    for &c in &cats {
        let (p, r, _) = pr_curve(dets, gts, c, iou_thresh);
        per_category.insert(c, interpolated_ap(&p, &r));
    }
    let map = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(ApReport {
        per_category,
        map,
        iou_threshold: iou_thresh,
    })
}

/// JSON interchange record for a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
    pub category: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl From<&OrientedBox> for BoxRecord {
    fn from(b: &OrientedBox) -> Self {
        Self {
            center: b.center.into(),
            size: b.size.into(),
            heading: b.heading,
            category: b.category,
            score: b.score,
        }
    }
}

impl TryFrom<&BoxRecord> for OrientedBox {
    type Error = Error;

    fn try_from(r: &BoxRecord) -> Result<Self> {
        let mut b = OrientedBox::new(r.center.into(), r.size.into(), r.heading, r.category)?;
        b.score = r.score;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn cube(c: [f64; 3], s: f64, yaw: f64) -> OrientedBox {
        OrientedBox::new(c.into(), Vec3::repeat(s), yaw, 0).unwrap()
    }

    #[test]
    fn corners_axis_aligned() {
        let b = cube([0.0; 3], 2.0, 0.0);
        let cs = b.corners();
        let mut signs: Vec<[i32; 3]> =
            cs.iter().map(|c| [c.x as i32, c.y as i32, c.z as i32]).collect();
        signs.sort();
        let mut expect = Vec::new();
        for x in [-1, 1] {
            for y in [-1, 1] {
                for z in [-1, 1] {
                    expect.push([x, y, z]);
                }
            }
        }
        assert_eq!(signs, expect);
        let centroid = cs.iter().fold(Vec3::zeros(), |a, c| a + c) / 8.0;
        assert!(centroid.norm() < 1e-9);
        // bottom face first
        assert!(cs[..4].iter().all(|c| c.y == -1.0));
    }

    #[test]
    fn corners_rotated() {
        let b = OrientedBox::new(Vec3::zeros(), Vec3::new(2.0, 2.0, 4.0), FRAC_PI_2, 0).unwrap();
        let (lo, hi) = b.aabb();
        assert!((hi.x - 2.0).abs() < 1e-12 && (hi.z - 1.0).abs() < 1e-12);
        assert!((lo.x + 2.0).abs() < 1e-12 && (lo.z + 1.0).abs() < 1e-12);
        let r = cube([0.0; 3], 2.0, FRAC_PI_4);
        for c in r.corners() {
            assert!(((c.x * c.x + c.z * c.z).sqrt() - 2f64.sqrt()).abs() < 1e-12);
            assert_eq!(c.y.abs(), 1.0);
        }
        let centroid = r.corners().iter().fold(Vec3::zeros(), |a, c| a + c) / 8.0;
        assert!(centroid.norm() < 1e-9);
    }

    #[test]
    fn invalid_size_rejected() {
        assert!(OrientedBox::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0), 0.0, 0).is_err());
    }

    #[test]
    fn iou_basic_cases() {
        let a = cube([0.0; 3], 2.0, 0.0);
        assert_eq!(iou3d(&a, &a), 1.0);
        assert_eq!(iou3d(&a, &cube([5.0, 0.0, 0.0], 2.0, 0.0)), 0.0);
        assert_eq!(iou3d(&a, &cube([0.0, 3.0, 0.0], 2.0, 0.0)), 0.0);
        let b = cube([1.0, 0.0, 0.0], 2.0, 0.0);
        assert!((iou3d(&a, &b) - 4.0 / 12.0).abs() < 1e-9);
        let r = cube([0.0; 3], 1.0, FRAC_PI_4);
        let u = cube([0.0; 3], 1.0, 0.0);
        // octagon area: 2(sqrt 2 - 1) for unit squares at 45 degrees
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        assert!((iou3d(&r, &u) - inter / (2.0 - inter)).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetric_exact() {
        let a = OrientedBox::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.3, 0.7, 2.1), 0.4, 1).unwrap();
        let b = OrientedBox::new(Vec3::new(0.5, -0.1, 0.1), Vec3::new(0.9, 1.2, 1.1), -1.1, 1).unwrap();
        assert_eq!(iou3d(&a, &b), iou3d(&b, &a));
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert_eq!(wrap_angle(0.5), 0.5);
    }

    #[test]
    fn ap_trivial_cases() {
        let g = vec![vec![
            cube([0.0; 3], 1.0, 0.0),
            OrientedBox { category: 2, ..cube([3.0, 0.0, 0.0], 1.0, 0.3) },
        ]];
        let d: Vec<Vec<OrientedBox>> =
            g.iter().map(|s| s.iter().map(|b| b.clone().with_score(1.0)).collect()).collect();
        let r = average_precision(&d, &g, 0.15).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.per_category.values().all(|&v| v == 1.0));
        let r = average_precision(&[vec![]], &g, 0.15).unwrap();
        assert_eq!(r.map, 0.0);
        assert!(matches!(
            average_precision(&[vec![]], &[vec![]], 0.15),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_hand_built_scene() {
        // 3 GT, 4 detections: TP(0.9), FP(0.8), TP(0.7), FP(0.6); one GT missed.
        let gts = vec![vec![
            cube([0.0; 3], 1.0, 0.0),
            cube([3.0, 0.0, 0.0], 1.0, 0.0),
            cube([6.0, 0.0, 0.0], 1.0, 0.0),
        ]];
        let dets = vec![vec![
            cube([0.05, 0.0, 0.0], 1.0, 0.0).with_score(0.9),
            cube([10.0, 0.0, 0.0], 1.0, 0.0).with_score(0.8),
            cube([3.1, 0.0, 0.0], 1.0, 0.1).with_score(0.7),
            cube([0.0, 0.0, 0.1], 1.0, 0.0).with_score(0.6),
        ]];
        let r = average_precision(&dets, &gts, 0.15).unwrap();
        // PR points: (1/3, 1), (1/3, 1/2), (2/3, 2/3), (2/3, 1/2)
        let expect = (1.0 / 3.0) * 1.0 + (1.0 / 3.0) * (2.0 / 3.0);
        assert!((r.map - expect).abs() < 1e-12);
    }

    #[test]
    fn record_roundtrip() {
        let b = OrientedBox::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0), -0.5, 4)
            .unwrap()
            .with_score(0.25);
        let rec = BoxRecord::from(&b);
        let json = serde_json::to_string(&rec).unwrap();
        let back = OrientedBox::try_from(&serde_json::from_str::<BoxRecord>(&json).unwrap()).unwrap();
        assert_eq!(back, b);
        let gt = BoxRecord { score: None, ..rec };
        assert!(!serde_json::to_string(&gt).unwrap().contains("score"));
    }
}
