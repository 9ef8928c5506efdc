//! Learnable parameter blocks of the context module.
//!
//! Every block is stored as a 2D array; biases and norm scales are `1 x n`
//! rows. [`EncoderParams::blocks`] fixes the canonical order used by
//! checkpoints, gradient checks and optimizer updates:
//!
//! 1. position maps and biases for image, layout, point, object tokens,
//!    then the image feature projection;
//! 2. per layer: `ln1.g, ln1.b`, per head `wq, wk, wv, wh`, then
//!    `ln2.g, ln2.b, ff1, ff1.b, ff2, ff2.b`;
//! 3. one object head (`w, b`) per stage, then the layout head (`w, b`).

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::heads::HeadLayout;
use super::ContextConfig;
use crate::{Error, Result};

pub const INIT_RANGE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Vec<Array2<f64>>,
    pub wk: Vec<Array2<f64>>,
    pub wv: Vec<Array2<f64>>,
    /// Per-head fusion `d_h x d`; head outputs are summed after it.
    pub wh: Vec<Array2<f64>>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub ff1: Array2<f64>,
    pub ff1_b: Array2<f64>,
    pub ff2: Array2<f64>,
    pub ff2_b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub pos_image: Array2<f64>,
    pub pos_image_b: Array2<f64>,
    pub pos_layout: Array2<f64>,
    pub pos_layout_b: Array2<f64>,
    pub pos_point: Array2<f64>,
    pub pos_point_b: Array2<f64>,
    pub pos_object: Array2<f64>,
    pub pos_object_b: Array2<f64>,
    pub image_proj: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub object_heads: Vec<Linear>,
    pub layout_head: Linear,
}

impl EncoderParams {
    /// Uniform(-0.02, 0.02) weights, zero biases, unit norm scales.
    pub fn init(cfg: &ContextConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
        let mut w = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || dist.sample(&mut rng));
        let zeros = |c: usize| Array2::<f64>::zeros((1, c));
        let ones = |c: usize| Array2::<f64>::ones((1, c));
        let (d, dh, dff) = (cfg.d, cfg.head_dim(), cfg.ffn_dim);
        let out = HeadLayout::new(cfg).width();

        let pos_image = w(3, d);
        let pos_layout = w(3, d);
        let pos_point = w(3, d);
        let pos_object = w(6, d);
        let image_proj = w(cfg.image_feat_dim, d);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            let mut wh = Vec::new();
            for _ in 0..cfg.heads {
                wq.push(w(d, dh));
                wk.push(w(d, dh));
                wv.push(w(d, dh));
                wh.push(w(dh, d));
            }
            layers.push(LayerParams {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq,
                wk,
                wv,
                wh,
                ln2_g: ones(d),
                ln2_b: zeros(d),
                ff1: w(d, dff),
                ff1_b: zeros(dff),
                ff2: w(dff, d),
                ff2_b: zeros(d),
            });
        }
        let object_heads = (0..cfg.stages())
            .map(|_| Linear {
                w: w(d, out),
                b: zeros(out),
            })
            .collect();
        let layout_head = Linear {
            w: w(d, 3),
            b: zeros(3),
        };
        Ok(Self {
            pos_image,
            pos_image_b: zeros(d),
            pos_layout,
            pos_layout_b: zeros(d),
            pos_point,
            pos_point_b: zeros(d),
            pos_object,
            pos_object_b: zeros(d),
            image_proj,
            layers,
            object_heads,
            layout_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    /// Named blocks in canonical order.
    pub fn blocks(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("pos_image".into(), &self.pos_image),
            ("pos_image.b".into(), &self.pos_image_b),
            ("pos_layout".into(), &self.pos_layout),
            ("pos_layout.b".into(), &self.pos_layout_b),
            ("pos_point".into(), &self.pos_point),
            ("pos_point.b".into(), &self.pos_point_b),
            ("pos_object".into(), &self.pos_object),
            ("pos_object.b".into(), &self.pos_object_b),
            ("image_proj".into(), &self.image_proj),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1.g"), &p.ln1_g));
            out.push((format!("layer{l}.ln1.b"), &p.ln1_b));
            for h in 0..p.wq.len() {
                out.push((format!("layer{l}.head{h}.wq"), &p.wq[h]));
                out.push((format!("layer{l}.head{h}.wk"), &p.wk[h]));
                out.push((format!("layer{l}.head{h}.wv"), &p.wv[h]));
                out.push((format!("layer{l}.head{h}.wh"), &p.wh[h]));
            }
            out.push((format!("layer{l}.ln2.g"), &p.ln2_g));
            out.push((format!("layer{l}.ln2.b"), &p.ln2_b));
            out.push((format!("layer{l}.ff1"), &p.ff1));
            out.push((format!("layer{l}.ff1.b"), &p.ff1_b));
            out.push((format!("layer{l}.ff2"), &p.ff2));
            out.push((format!("layer{l}.ff2.b"), &p.ff2_b));
        }
        for (s, h) in self.object_heads.iter().enumerate() {
            out.push((format!("object_head{s}.w"), &h.w));
            out.push((format!("object_head{s}.b"), &h.b));
        }
        out.push(("layout_head.w".into(), &self.layout_head.w));
        out.push(("layout_head.b".into(), &self.layout_head.b));
        out
    }

    /// Mutable blocks in the same order as [`EncoderParams::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![
            &mut self.pos_image,
            &mut self.pos_image_b,
            &mut self.pos_layout,
            &mut self.pos_layout_b,
            &mut self.pos_point,
            &mut self.pos_point_b,
            &mut self.pos_object,
            &mut self.pos_object_b,
            &mut self.image_proj,
        ];
        for p in &mut self.layers {
            out.push(&mut p.ln1_g);
            out.push(&mut p.ln1_b);
            for (((q, k), v), h) in p
                .wq
                .iter_mut()
                .zip(p.wk.iter_mut())
                .zip(p.wv.iter_mut())
                .zip(p.wh.iter_mut())
            {
                out.push(q);
                out.push(k);
                out.push(v);
                out.push(h);
            }
            out.push(&mut p.ln2_g);
            out.push(&mut p.ln2_b);
            out.push(&mut p.ff1);
            out.push(&mut p.ff1_b);
            out.push(&mut p.ff2);
            out.push(&mut p.ff2_b);
        }
        for h in &mut self.object_heads {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out.push(&mut self.layout_head.w);
        out.push(&mut self.layout_head.b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`, block by block.
    pub fn add_scaled(&mut self, other: &Self, alpha: f64) -> Result<()> {
        let theirs = other.blocks();
        let mine = self.blocks_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Shape("parameter structures differ".into()));
        }
        for (m, (_, t)) in mine.into_iter().zip(theirs) {
            if m.dim() != t.dim() {
                return Err(Error::Shape("parameter block shapes differ".into()));
            }
            m.scaled_add(alpha, t);
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|((_, a), (_, b))| (*a * b).sum())
            .sum()
    }

    /// Check block shapes against a configuration.
    pub fn check_shapes(&self, cfg: &ContextConfig) -> Result<()> {
        let reference = Self::init(cfg, 0)?;
        let a = self.blocks();
        let b = reference.blocks();
        if a.len() != b.len() {
            return Err(Error::Shape(format!("{} blocks, expected {}", a.len(), b.len())));
        }
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            if x.dim() != y.dim() {
                return Err(Error::Shape(format!(
                    "block {name} is {:?}, expected {:?}",
                    x.dim(),
                    y.dim()
                )));
            }
        }
        Ok(())
    }
}
