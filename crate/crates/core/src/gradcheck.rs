//! Central finite-difference checks of every analytic gradient.
//!
//! Each check compares a block of analytic derivatives with
//! `(f(x + h) - f(x - h)) / 2h` on a seeded sample of entries. The error of
//! a block is `max|a - n| / max(max|a|, max|n|, GRAD_FLOOR)`.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes3d::OrientedBox;
use crate::context::{backward, forward, BoxCoder, ContextConfig, EncoderParams, HeadLayout, MaskMode, MaskSpec, OutputGrads, TokenInputs};
use crate::layout_mesh::{icosphere, LayoutMesh};
use crate::losses::{
    assign_candidates, layout_loss, object_losses, physical_violation_loss, LossWeights, ObjectTargets, SamplingTargets,
};
use crate::scenegen::{generate_scene, pseudo_shape_code, SceneSpec};
use crate::toytrain::{prepare_scene, scene_objective};
use crate::{Error, Result, Vec3};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Gradient magnitude below which errors are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;
const ENTRIES_PER_BLOCK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub entries: usize,
    pub skipped: usize,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// Entries replaced because they straddle a switch of a piecewise term.
    pub skipped: usize,
    pub passed: bool,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    fn from_blocks(blocks: Vec<BlockCheck>) -> Self {
        let max_rel_err = blocks.iter().map(|b| b.rel_err).fold(0.0, f64::max);
        Self {
            step: FD_STEP,
            tolerance: GRAD_TOLERANCE,
            max_rel_err,
            skipped: blocks.iter().map(|b| b.skipped).sum(),
            passed: max_rel_err < GRAD_TOLERANCE && blocks.iter().all(|b| b.rel_err.is_finite() && b.entries > 0),
            blocks,
        }
    }

    pub fn worst(&self) -> Option<&BlockCheck> {
        self.blocks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(GRAD_FLOOR)
}

/// Check `grad` of `f` over a flat vector `x` on sampled entries.
///
/// The losses are piecewise smooth: nearest-neighbour and nearest-edge
/// correspondences, argmax decoding and relu terms switch at isolated
/// points. An entry whose difference quotients at `h` and `h / 10`
/// disagree straddles such a switch and is replaced by another entry; the
/// replacements are counted in `skipped`.
fn check_flat(name: &str, x: &[f64], grad: &[f64], rng: &mut ChaCha8Rng, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<BlockCheck> {
    let order = sample(rng, x.len(), x.len().min(4 * ENTRIES_PER_BLOCK)).into_vec();
    let mut a = Vec::with_capacity(ENTRIES_PER_BLOCK);
    let mut n = Vec::with_capacity(ENTRIES_PER_BLOCK);
    let mut skipped = 0;
    let mut buf = x.to_vec();
    let mut quotient = |buf: &mut Vec<f64>, i: usize, h: f64| -> Result<f64> {
        buf[i] = x[i] + h;
        let up = f(buf)?;
        buf[i] = x[i] - h;
        let dn = f(buf)?;
        buf[i] = x[i];
        Ok((up - dn) / (2.0 * h))
    };
    for i in order {
        if a.len() == ENTRIES_PER_BLOCK {
            break;
        }
        let coarse = quotient(&mut buf, i, FD_STEP)?;
        let fine = quotient(&mut buf, i, FD_STEP / 10.0)?;
        if rel_err(&[coarse], &[fine]) > GRAD_TOLERANCE / 10.0 {
            skipped += 1;
            continue;
        }
        a.push(grad[i]);
        n.push(coarse);
    }
    Ok(BlockCheck {
        name: name.to_string(),
        entries: a.len(),
        skipped,
        rel_err: rel_err(&a, &n),
    })
}

/// Check every parameter block of `params` against `grad` for objective `f`.
fn check_params(
    prefix: &str,
    params: &EncoderParams,
    grad: &EncoderParams,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&EncoderParams) -> Result<f64>,
) -> Result<Vec<BlockCheck>> {
    let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
    let grads = grad.blocks();
    let mut out = Vec::with_capacity(names.len());
    for (b, name) in names.iter().enumerate() {
        let x: Vec<f64> = params.blocks()[b].1.iter().copied().collect();
        let g: Vec<f64> = grads[b].1.iter().copied().collect();
        let shape = params.blocks()[b].1.dim();
        let check = check_flat(&format!("{prefix}.{name}"), &x, &g, rng, |v| {
            let mut p = params.clone();
            *p.blocks_mut()[b] = Array2::from_shape_vec(shape, v.to_vec()).expect("same shape");
            f(&p)
        })?;
        out.push(check);
    }
    Ok(out)
}

fn random_inputs(cfg: &ContextConfig, rng: &mut ChaCha8Rng) -> Result<TokenInputs> {
    let u = Uniform::new(-1.0, 1.0);
    let mut t = TokenInputs::zeros(cfg)?;
    t.image_grid.mapv_inplace(|_| u.sample(rng));
    for a in [
        &mut t.layout_feats,
        &mut t.layout_pos,
        &mut t.point_feats,
        &mut t.point_pos,
        &mut t.object_feats,
        &mut t.object_pos,
    ] {
        a.mapv_inplace(|_| u.sample(rng));
    }
    Ok(t)
}

/// Parameters with weights large enough to leave the linear regime.
fn random_params(cfg: &ContextConfig, rng: &mut ChaCha8Rng) -> Result<EncoderParams> {
    let mut p = EncoderParams::init(cfg, rng.next_u64())?;
    let u = Uniform::new(-0.4, 0.4);
    for b in p.blocks_mut() {
        b.mapv_inplace(|x| x + u.sample(rng));
    }
    Ok(p)
}

/// Context module under a random linear read-out of all outputs.
pub fn check_context(cfg: &ContextConfig, seed: u64) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(cfg, &mut rng)?;
    let inputs = random_inputs(cfg, &mut rng)?;
    let t = cfg.total_tokens();
    let mask = MaskSpec::from_indices([1, t - 2], MaskMode::NegInf);
    let (out, cache) = forward(&params, cfg, &inputs, &mask, true)?;
    let u = Uniform::new(-1.0, 1.0);
    let r_stage: Vec<Array2<f64>> = out.stages.iter().map(|s| s.mapv(|_| u.sample(&mut rng))).collect();
    let r_obj: Vec<Array2<f64>> = out.object_preds.iter().map(|s| s.mapv(|_| u.sample(&mut rng))).collect();
    let r_lay = out.layout_offsets.mapv(|_| u.sample(&mut rng));
    let readout = |p: &EncoderParams, x: &TokenInputs| -> Result<f64> {
        let (o, _) = forward(p, cfg, x, &mask, false)?;
        let mut s = 0.0;
        for (a, r) in o.stages.iter().zip(&r_stage) {
            s += (a * r).sum();
        }
        for (a, r) in o.object_preds.iter().zip(&r_obj) {
            s += (a * r).sum();
        }
        Ok(s + (&o.layout_offsets * &r_lay).sum())
    };
    let (g, gi) = backward(
        &params,
        cfg,
        &cache.expect("cache requested"),
        &OutputGrads {
            stages: Some(r_stage.clone()),
            object: r_obj.clone(),
            layout: Some(r_lay.clone()),
        },
    )?;
    let mut out = check_params("context", &params, &g, &mut rng, |p| readout(p, &inputs))?;

    type Field = fn(&mut TokenInputs) -> &mut Array2<f64>;
    let fields: [(&str, Field, &Array2<f64>); 6] = [
        ("layout_feats", |t| &mut t.layout_feats, &gi.layout_feats),
        ("layout_pos", |t| &mut t.layout_pos, &gi.layout_pos),
        ("point_feats", |t| &mut t.point_feats, &gi.point_feats),
        ("point_pos", |t| &mut t.point_pos, &gi.point_pos),
        ("object_feats", |t| &mut t.object_feats, &gi.object_feats),
        ("object_pos", |t| &mut t.object_pos, &gi.object_pos),
    ];
    for (name, field, grad) in fields {
        let mut base = inputs.clone();
        let x: Vec<f64> = field(&mut base).iter().copied().collect();
        let shape = grad.dim();
        let g: Vec<f64> = grad.iter().copied().collect();
        out.push(check_flat(&format!("context.input.{name}"), &x, &g, &mut rng, |v| {
            let mut t = inputs.clone();
            *field(&mut t) = Array2::from_shape_vec(shape, v.to_vec()).expect("same shape");
            readout(&params, &t)
        })?);
    }
    let img: Vec<f64> = inputs.image_feats().iter().copied().collect();
    let g: Vec<f64> = gi.image_feats.iter().copied().collect();
    let dims = inputs.image_grid.dim();
    out.push(check_flat("context.input.image", &img, &g, &mut rng, |v| {
        let mut t = inputs.clone();
        t.image_grid = ndarray::Array3::from_shape_vec(dims, v.to_vec()).expect("same shape");
        readout(&params, &t)
    })?);
    Ok(out)
}

fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(v: &[f64]) -> Vec<Vec3> {
    v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Layout loss and each of its terms with respect to predicted vertices.
pub fn check_layout(seed: u64) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = LayoutMesh::cuboid(Vec3::new(-1.0, -1.0, -1.2), Vec3::new(1.1, 0.9, 1.0))?;
    let u = Uniform::new(-0.15, 0.15);
    let mut pred = icosphere(1)?.scaled_about(Vec3::zeros(), 1.3);
    for v in &mut pred.vertices {
        *v += Vec3::new(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng));
    }
    let zero = LossWeights {
        lambda_p: 0.0,
        lambda_n: 0.0,
        lambda_e: 0.0,
        ..Default::default()
    };
    let variants = [
        ("L_layout", LossWeights::default()),
        ("L_pos", LossWeights { lambda_p: 1.0, ..zero.clone() }),
        ("L_norm", LossWeights { lambda_n: 1.0, ..zero.clone() }),
        ("L_sharp", LossWeights { lambda_e: 1.0, ..zero }),
    ];
    let x = flatten(&pred.vertices);
    let mut out = Vec::new();
    for (name, w) in variants {
        let loss = layout_loss(&pred, &gt, &w, seed)?;
        let g = flatten(&loss.grad);
        out.push(check_flat(&format!("loss.{name}"), &x, &g, &mut rng, |v| {
            let mesh = LayoutMesh::new(unflatten(v), pred.faces.clone())?;
            Ok(layout_loss(&mesh, &gt, &w, seed)?.total)
        })?);
    }
    Ok(out)
}

/// Object losses (all terms, two stages, with a sampling term) against head outputs.
pub fn check_object(seed: u64) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ContextConfig {
        t_object: 4,
        ..ContextConfig::grad_check()
    };
    let head = HeadLayout::new(&cfg);
    let coder = BoxCoder::new(cfg.heading_bins, vec![Vec3::new(1.0, 0.8, 0.6), Vec3::new(2.0, 0.9, 1.6), Vec3::new(0.5, 1.0, 0.5)])?;
    let anchors = vec![
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(1.5, -0.5, 0.5),
        Vec3::new(-1.0, 0.2, 1.0),
        Vec3::new(3.0, 0.0, -3.0),
    ];
    let gts = vec![
        OrientedBox::new(Vec3::new(0.2, 0.1, -0.1), Vec3::new(1.1, 0.7, 0.5), 0.3, 0)?,
        OrientedBox::new(Vec3::new(1.3, -0.4, 0.7), Vec3::new(1.8, 1.0, 1.5), -2.0, 1)?,
        OrientedBox::new(Vec3::new(-1.2, 0.3, 0.8), Vec3::new(0.6, 0.9, 0.4), 1.2, 2)?,
    ];
    let codes: Vec<Vec<f64>> = gts.iter().map(|b| pseudo_shape_code(b.category, &b.size, cfg.shape_dim)).collect();
    let assignment = assign_candidates(&anchors, &gts, crate::losses::ASSIGN_RADIUS);
    let u = Uniform::new(-1.0, 1.0);
    let sampling = SamplingTargets {
        logits: (0..anchors.len()).map(|_| u.sample(&mut rng)).collect(),
        labels: vec![1.0, 1.0, 0.0, 0.0],
    };
    let targets = ObjectTargets {
        layout: &head,
        coder: &coder,
        anchors: &anchors,
        gts: &gts,
        gt_codes: &codes,
        assignment: &assignment,
        sampling: Some(&sampling),
    };
    let w = LossWeights::default();
    let preds: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((anchors.len(), head.width()), |_| 0.5 * u.sample(&mut rng)))
        .collect();
    let loss = object_losses(&preds, &targets, &w)?;
    let mut out = Vec::new();
    for s in 0..preds.len() {
        let x: Vec<f64> = preds[s].iter().copied().collect();
        let g: Vec<f64> = loss.grads[s].iter().copied().collect();
        out.push(check_flat(&format!("loss.L_object.stage{s}"), &x, &g, &mut rng, |v| {
            let mut p = preds.clone();
            p[s] = Array2::from_shape_vec(preds[s].dim(), v.to_vec()).expect("same shape");
            Ok(object_losses(&p, &targets, &w)?.total)
        })?);
    }
    let samp = loss.samp_grad.clone().unwrap_or_default();
    out.push(check_flat("loss.L_samp", &sampling.logits, &samp, &mut rng, |v| {
        let st = SamplingTargets {
            logits: v.to_vec(),
            labels: sampling.labels.clone(),
        };
        let t = ObjectTargets {
            sampling: Some(&st),
            ..targets.clone()
        };
        Ok(object_losses(&preds, &t, &w)?.total)
    })?);
    Ok(out)
}

/// Physical violation loss against box parameters and layout vertices.
pub fn check_physical(seed: u64) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-0.1, 0.1);
    let mut layout = LayoutMesh::cuboid(Vec3::new(-2.0, -1.6, -2.5), Vec3::new(2.0, 1.2, 2.5))?;
    for v in &mut layout.vertices {
        *v += Vec3::new(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng));
    }
    let boxes = vec![
        OrientedBox::new(Vec3::new(1.8, -1.0, 0.3), Vec3::new(1.0, 1.3, 0.6), 0.4, 0)?,
        OrientedBox::new(Vec3::new(-0.3, 0.9, -2.3), Vec3::new(0.8, 0.9, 1.1), -1.1, 1)?,
        OrientedBox::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.5, 0.5, 0.5), 0.2, 2)?,
    ];
    let exempt = BTreeSet::new();
    let loss = physical_violation_loss(&boxes, &layout, &exempt)?;
    if loss.value <= 0.0 {
        return Err(Error::Numerical("physical check scene has no violation".into()));
    }
    let pack = |bs: &[OrientedBox]| -> Vec<f64> {
        bs.iter()
            .flat_map(|b| [b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, b.heading])
            .collect()
    };
    let x = pack(&boxes);
    let g: Vec<f64> = loss
        .box_grads
        .iter()
        .flat_map(|g| [g.center.x, g.center.y, g.center.z, g.size.x, g.size.y, g.size.z, g.heading])
        .collect();
    let mut out = vec![check_flat("loss.L_physic.boxes", &x, &g, &mut rng, |v| {
        let bs: Vec<OrientedBox> = v
            .chunks(7)
            .zip(&boxes)
            .map(|(c, b)| OrientedBox {
                center: Vec3::new(c[0], c[1], c[2]),
                size: Vec3::new(c[3], c[4], c[5]),
                heading: c[6],
                ..b.clone()
            })
            .collect();
        Ok(physical_violation_loss(&bs, &layout, &exempt)?.value)
    })?];
    let xl = flatten(&layout.vertices);
    let gl = flatten(&loss.layout_grad);
    out.push(check_flat("loss.L_physic.layout", &xl, &gl, &mut rng, |v| {
        let m = LayoutMesh::new(unflatten(v), layout.faces.clone())?;
        Ok(physical_violation_loss(&boxes, &m, &exempt)?.value)
    })?);
    Ok(out)
}

/// Shapes of the end-to-end check: the layout segment needs an icosphere
/// vertex count, so it carries 12 tokens.
pub fn joint_config() -> ContextConfig {
    ContextConfig {
        t_layout: 12,
        t_object: 4,
        size_classes: crate::scenegen::CATEGORY_NAMES.len(),
        categories: crate::scenegen::CATEGORY_NAMES.len(),
        ..ContextConfig::grad_check()
    }
}

/// Joint loss of a synthetic scene with respect to every parameter block.
pub fn check_joint(seed: u64) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = joint_config();
    let spec = SceneSpec {
        plant_violation: true,
        ..Default::default()
    };
    let scene = generate_scene(seed, &spec)?;
    let data = prepare_scene(&scene, &cfg, 64, 20_000)?;
    let params = random_params(&cfg, &mut rng)?;
    let w = LossWeights::default();
    let exempt = crate::scenegen::default_exempt();
    let mask = MaskSpec::none(MaskMode::NegInf);
    let (_, g) = scene_objective(&params, &cfg, &data, &w, &exempt, &mask, true)?;
    let g = g.expect("gradient requested");
    check_params("joint", &params, &g, &mut rng, |p| {
        Ok(scene_objective(p, &cfg, &data, &w, &exempt, &mask, false)?.0.total)
    })
}

/// All checks at toy scale.
pub fn run_toy(seed: u64) -> Result<GradCheckReport> {
    let mut blocks = check_context(&ContextConfig::grad_check(), seed)?;
    blocks.extend(check_layout(seed)?);
    blocks.extend(check_object(seed)?);
    blocks.extend(check_physical(seed)?);
    blocks.extend(check_joint(seed)?);
    Ok(GradCheckReport::from_blocks(blocks))
}
