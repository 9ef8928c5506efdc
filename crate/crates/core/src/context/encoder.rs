//! Encoder stack, prediction heads and the hand-written backward pass.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::attention::{attend, attend_backward, Attended};
use super::params::{EncoderParams, LayerParams, Linear};
use super::tokens::{assemble_backward, assemble_tokens, InputGrads, TokenInputs, TokenSet};
use super::{ContextConfig, MaskMode, MaskSpec, Segment};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone, PartialEq)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row *= inv;
        inv_std.push(inv);
    }
    let y = &xhat * g + b;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    c: &NormCache,
    g: &Array2<f64>,
    dy: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &(dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let n = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = c.xhat.row(i);
        let s1 = dh.sum();
        let s2 = dh.dot(&xh);
        let k = c.inv_std[i] / n;
        for j in 0..dy.ncols() {
            dx[[i, j]] = k * (n * dh[j] - s1 - xh[j] * s2);
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
struct HeadCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Attended,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    n1_in: Array2<f64>,
    n1: NormCache,
    heads: Vec<HeadCache>,
    n2_in: Array2<f64>,
    n2: NormCache,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

fn layer_forward(
    x0: &Array2<f64>,
    p: &LayerParams,
    masked: &[bool],
    mode: MaskMode,
    keep: bool,
) -> (Array2<f64>, Option<LayerCache>) {
    let (n1_out, n1) = layer_norm(x0, &p.ln1_g, &p.ln1_b);
    let mut x1 = x0.clone();
    let mut heads = Vec::new();
    for h in 0..p.wq.len() {
        let q = n1_out.dot(&p.wq[h]);
        let k = n1_out.dot(&p.wk[h]);
        let v = n1_out.dot(&p.wv[h]);
        let a = attend(q.view(), k.view(), v.view(), masked, mode);
        x1 += &a.out.dot(&p.wh[h]);
        if keep {
            heads.push(HeadCache { q, k, v, attn: a });
        }
    }
    let (n2_out, n2) = layer_norm(&x1, &p.ln2_g, &p.ln2_b);
    let hidden_pre = n2_out.dot(&p.ff1) + &p.ff1_b;
    let hidden = hidden_pre.mapv(gelu);
    let x2 = &x1 + &(hidden.dot(&p.ff2) + &p.ff2_b);
    let cache = keep.then(|| LayerCache {
        n1_in: n1_out,
        n1,
        heads,
        n2_in: n2_out,
        n2,
        hidden_pre,
        hidden,
    });
    (x2, cache)
}

fn layer_backward(
    c: &LayerCache,
    p: &LayerParams,
    g: &mut LayerParams,
    dx2: &Array2<f64>,
) -> Array2<f64> {
    // FFN sublayer.
    g.ff2 += &c.hidden.t().dot(dx2);
    g.ff2_b += &dx2.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_hidden = dx2.dot(&p.ff2.t());
    let d_pre = &d_hidden * &c.hidden_pre.mapv(gelu_grad);
    g.ff1 += &c.n2_in.t().dot(&d_pre);
    g.ff1_b += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_n2 = d_pre.dot(&p.ff1.t());
    let mut dx1 = dx2 + &layer_norm_backward(&c.n2, &p.ln2_g, &d_n2, &mut g.ln2_g, &mut g.ln2_b);

    // Attention sublayer.
    let mut d_n1 = Array2::zeros(dx1.dim());
    for (h, hc) in c.heads.iter().enumerate() {
        g.wh[h] += &hc.attn.out.t().dot(&dx1);
        let d_o = dx1.dot(&p.wh[h].t());
        let (dq, dk, dv) = attend_backward(&hc.attn, hc.q.view(), &d_o);
        g.wq[h] += &c.n1_in.t().dot(&dq);
        g.wk[h] += &c.n1_in.t().dot(&dk);
        g.wv[h] += &c.n1_in.t().dot(&dv);
        d_n1 += &dq.dot(&p.wq[h].t());
        d_n1 += &dk.dot(&p.wk[h].t());
        d_n1 += &dv.dot(&p.wv[h].t());
    }
    dx1 += &layer_norm_backward(&c.n1, &p.ln1_g, &d_n1, &mut g.ln1_g, &mut g.ln1_b);
    dx1
}

fn linear(x: ArrayView2<f64>, l: &Linear) -> Array2<f64> {
    x.dot(&l.w) + &l.b
}

/// Everything one forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub tokens: TokenSet,
    /// Refined token matrices, one per stage.
    pub stages: Vec<Array2<f64>>,
    /// Object-head outputs per stage, `t_object x HeadLayout::width`.
    pub object_preds: Vec<Array2<f64>>,
    /// Final-stage layout vertex offsets, `t_layout x 3`.
    pub layout_offsets: Array2<f64>,
}

/// Activations kept for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    inputs: TokenInputs,
    layers: Vec<LayerCache>,
    stages: Vec<Array2<f64>>,
}

/// Upstream gradients at the module outputs. Empty vectors and `None` mean zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputGrads {
    pub stages: Option<Vec<Array2<f64>>>,
    pub object: Vec<Array2<f64>>,
    pub layout: Option<Array2<f64>>,
}

fn run_stack(
    z0: Array2<f64>,
    params: &EncoderParams,
    masked: &[bool],
    mode: MaskMode,
    keep: bool,
) -> (Vec<Array2<f64>>, Vec<LayerCache>) {
    if params.layers.is_empty() {
        return (vec![z0], Vec::new());
    }
    let mut stages = Vec::with_capacity(params.layers.len());
    let mut caches = Vec::new();
    let mut x = z0;
    for p in &params.layers {
        let (y, c) = layer_forward(&x, p, masked, mode, keep);
        caches.extend(c);
        stages.push(y.clone());
        x = y;
    }
    (stages, caches)
}

/// Full forward pass. With `keep_cache` false no activations are stored,
/// which is what large configurations need.
pub fn forward(
    params: &EncoderParams,
    cfg: &ContextConfig,
    inputs: &TokenInputs,
    mask: &MaskSpec,
    keep_cache: bool,
) -> Result<(ModelOutput, Option<ForwardCache>)> {
    cfg.validate()?;
    if params.layers.len() != cfg.layers || params.object_heads.len() != cfg.stages() {
        return Err(Error::Shape("parameters do not match configuration".into()));
    }
    let tokens = assemble_tokens(inputs, params, cfg)?;
    let masked = mask.flags(tokens.len())?;
    let (stages, layers) = run_stack(tokens.embeddings.clone(), params, &masked, mask.mode, keep_cache);
    let obj = cfg.segment_range(Segment::Object);
    let lay = cfg.segment_range(Segment::Layout);
    let object_preds: Vec<Array2<f64>> = stages
        .iter()
        .zip(&params.object_heads)
        .map(|(z, h)| linear(z.slice(s![obj.clone(), ..]), h))
        .collect();
    let last = stages.last().expect("at least one stage");
    let layout_offsets = linear(last.slice(s![lay, ..]), &params.layout_head);
    if object_preds.iter().any(|m| m.iter().any(|x| !x.is_finite()))
        || layout_offsets.iter().any(|x| !x.is_finite())
    {
        return Err(Error::Numerical("non-finite head output".into()));
    }
    let cache = keep_cache.then(|| ForwardCache {
        inputs: inputs.clone(),
        layers,
        stages: stages.clone(),
    });
    Ok((
        ModelOutput {
            tokens,
            stages,
            object_preds,
            layout_offsets,
        },
        cache,
    ))
}

/// Gradients of all parameters and raw inputs given upstream output gradients.
pub fn backward(
    params: &EncoderParams,
    cfg: &ContextConfig,
    cache: &ForwardCache,
    grads: &OutputGrads,
) -> Result<(EncoderParams, InputGrads)> {
    let n_stage = cache.stages.len();
    let shape = cache.stages[0].dim();
    let mut d_stage: Vec<Array2<f64>> = match &grads.stages {
        Some(v) => {
            if v.len() != n_stage || v.iter().any(|m| m.dim() != shape) {
                return Err(Error::Shape("stage gradients do not match stages".into()));
            }
            v.clone()
        }
        None => vec![Array2::zeros(shape); n_stage],
    };
    let mut g = params.zeros_like();
    let obj = cfg.segment_range(Segment::Object);
    if !grads.object.is_empty() {
        if grads.object.len() != n_stage {
            return Err(Error::Shape("one object gradient per stage expected".into()));
        }
        for s_ in 0..n_stage {
            let dy = &grads.object[s_];
            let z = cache.stages[s_].slice(s![obj.clone(), ..]);
            if dy.dim() != (z.nrows(), params.object_heads[s_].w.ncols()) {
                return Err(Error::Shape("object gradient shape".into()));
            }
            g.object_heads[s_].w += &z.t().dot(dy);
            g.object_heads[s_].b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dz = dy.dot(&params.object_heads[s_].w.t());
            let mut tgt = d_stage[s_].slice_mut(s![obj.clone(), ..]);
            tgt += &dz;
        }
    }
    if let Some(dy) = &grads.layout {
        let lay = cfg.segment_range(Segment::Layout);
        let z = cache.stages[n_stage - 1].slice(s![lay.clone(), ..]);
        if dy.dim() != (z.nrows(), 3) {
            return Err(Error::Shape("layout gradient shape".into()));
        }
        g.layout_head.w += &z.t().dot(dy);
        g.layout_head.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dz = dy.dot(&params.layout_head.w.t());
        let mut tgt = d_stage[n_stage - 1].slice_mut(s![lay, ..]);
        tgt += &dz;
    }

    let d_z0 = if cache.layers.is_empty() {
        d_stage.pop().expect("one stage")
    } else {
        let mut d = d_stage.pop().expect("stages");
        for l in (0..cache.layers.len()).rev() {
            d = layer_backward(&cache.layers[l], &params.layers[l], &mut g.layers[l], &d);
            if l > 0 {
                d += &d_stage[l - 1];
            }
        }
        d
    };
    let inputs = assemble_backward(&cache.inputs, params, cfg, &d_z0, &mut g)?;
    Ok((g, inputs))
}

/// Refined token matrices for a mask drawn from `mask_seed` at the
/// configured fraction.
pub fn encode(
    tokens: &TokenSet,
    params: &EncoderParams,
    cfg: &ContextConfig,
    mask_seed: u64,
) -> Result<Vec<Array2<f64>>> {
    let mask = MaskSpec::random(tokens.len(), cfg.mask_fraction, mask_seed, MaskMode::NegInf);
    encode_with_mask(tokens, params, &mask)
}

pub fn encode_with_mask(
    tokens: &TokenSet,
    params: &EncoderParams,
    mask: &MaskSpec,
) -> Result<Vec<Array2<f64>>> {
    let d = tokens.embeddings.ncols();
    if let Some(p) = params.layers.first() {
        if p.ln1_g.ncols() != d {
            return Err(Error::Shape(format!("tokens have width {d}, layers expect {}", p.ln1_g.ncols())));
        }
    }
    let masked = mask.flags(tokens.len())?;
    Ok(run_stack(tokens.embeddings.clone(), params, &masked, mask.mode, false).0)
}

/// One encoder layer applied to a token matrix.
pub fn encoder_layer(x: &Array2<f64>, p: &LayerParams, mask: &MaskSpec) -> Result<Array2<f64>> {
    let masked = mask.flags(x.nrows())?;
    Ok(layer_forward(x, p, &masked, mask.mode, false).0)
}

/// Stateful wrapper that keeps the last forward cache.
#[derive(Debug, Clone)]
pub struct ContextModule {
    pub cfg: ContextConfig,
    pub params: EncoderParams,
    cache: Option<ForwardCache>,
}

impl ContextModule {
    pub fn new(cfg: ContextConfig, seed: u64) -> Result<Self> {
        let params = EncoderParams::init(&cfg, seed)?;
        Ok(Self {
            cfg,
            params,
            cache: None,
        })
    }

    pub fn with_params(cfg: ContextConfig, params: EncoderParams) -> Result<Self> {
        params.check_shapes(&cfg)?;
        Ok(Self {
            cfg,
            params,
            cache: None,
        })
    }

    pub fn forward(&mut self, inputs: &TokenInputs, mask: &MaskSpec) -> Result<ModelOutput> {
        let (out, cache) = forward(&self.params, &self.cfg, inputs, mask, true)?;
        self.cache = cache;
        Ok(out)
    }

    pub fn backward(&self, grads: &OutputGrads) -> Result<(EncoderParams, InputGrads)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        backward(&self.params, &self.cfg, cache, grads)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
