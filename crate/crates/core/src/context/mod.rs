//! Transformer context module.
//!
//! Image, layout, point and object tokens are embedded, summed with their
//! position embeddings, concatenated in that order and refined by a stack of
//! pre-norm encoder layers with masked multi-head self-attention. Every stage
//! feeds its own object head; the final stage feeds the layout head. All
//! parameters have hand-written gradients (see [`encoder::backward`]).

pub mod attention;
pub mod encoder;
pub mod heads;
pub mod params;
pub mod tokens;

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use attention::{attention_weights, masked_attention};
pub use encoder::{backward, encode, forward, ContextModule, ForwardCache, ModelOutput, OutputGrads};
pub use heads::{BoxCoder, HeadLayout};
pub use params::EncoderParams;
pub use tokens::{assemble_tokens, Segment, TokenInputs, TokenSet};

/// Shapes of the context module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub d: usize,
    pub heads: usize,
    /// Encoder layers; 0 bypasses the encoder and feeds heads the raw tokens.
    pub layers: usize,
    pub t_image: usize,
    pub t_layout: usize,
    pub t_point: usize,
    pub t_object: usize,
    pub mask_fraction: f64,
    pub size_classes: usize,
    pub heading_bins: usize,
    pub categories: usize,
    pub image_feat_dim: usize,
    pub shape_dim: usize,
    pub ffn_dim: usize,
}

impl ContextConfig {
    /// Full-scale shapes: 16x32 image grid, 642 layout vertices, 1024 point
    /// tokens, 256 object candidates, d = 288, six layers.
    pub fn full() -> Self {
        Self {
            d: 288,
            heads: 8,
            layers: 6,
            t_image: 512,
            t_layout: 642,
            t_point: 1024,
            t_object: 256,
            mask_fraction: 0.1,
            size_classes: 25,
            heading_bins: 12,
            categories: 25,
            image_feat_dim: 512,
            shape_dim: 512,
            ffn_dim: 4 * 288,
        }
    }

    /// Desk-scale training shapes.
    pub fn toy() -> Self {
        Self {
            d: 32,
            heads: 4,
            layers: 2,
            t_image: 128,
            t_layout: 42,
            t_point: 256,
            t_object: 16,
            mask_fraction: 0.1,
            size_classes: crate::scenegen::CATEGORY_NAMES.len(),
            heading_bins: 12,
            categories: crate::scenegen::CATEGORY_NAMES.len(),
            image_feat_dim: 16,
            shape_dim: 512,
            ffn_dim: 4 * 32,
        }
    }

    /// Gradient-check shapes: T = 12, d = 8, two heads, two layers.
    pub fn grad_check() -> Self {
        Self {
            d: 8,
            heads: 2,
            layers: 2,
            t_image: 2,
            t_layout: 4,
            t_point: 4,
            t_object: 2,
            mask_fraction: 0.0,
            size_classes: 3,
            heading_bins: 12,
            categories: 3,
            image_feat_dim: 8,
            shape_dim: 512,
            ffn_dim: 32,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn total_tokens(&self) -> usize {
        self.t_image + self.t_layout + self.t_point + self.t_object
    }

    /// Number of stage outputs that feed object heads.
    pub fn stages(&self) -> usize {
        self.layers.max(1)
    }

    /// Image tokens form a `rows x 2 rows` grid.
    pub fn image_grid(&self) -> Result<(usize, usize)> {
        let rows = ((self.t_image / 2) as f64).sqrt().round() as usize;
        if rows == 0 || 2 * rows * rows != self.t_image {
            return Err(Error::Shape(format!(
                "t_image {} is not a rows x 2rows grid",
                self.t_image
            )));
        }
        Ok((rows, 2 * rows))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Shape(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::Domain(format!("mask_fraction {}", self.mask_fraction)));
        }
        if self.t_object == 0 || self.t_layout == 0 {
            return Err(Error::Shape("object and layout blocks must be non-empty".into()));
        }
        if self.size_classes == 0 || self.heading_bins == 0 || self.categories == 0 {
            return Err(Error::Shape("class counts must be positive".into()));
        }
        if self.ffn_dim == 0 || self.image_feat_dim == 0 {
            return Err(Error::Shape("ffn_dim and image_feat_dim must be positive".into()));
        }
        self.image_grid()?;
        Ok(())
    }

    /// Token index ranges of the four segments.
    pub fn segment_range(&self, seg: Segment) -> std::ops::Range<usize> {
        let a = self.t_image;
        let b = a + self.t_layout;
        let c = b + self.t_point;
        match seg {
            Segment::Image => 0..a,
            Segment::Layout => a..b,
            Segment::Point => b..c,
            Segment::Object => c..c + self.t_object,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Masked keys get `-inf` logits and therefore zero attention.
    NegInf,
    /// Logits multiplied elementwise by a 0/1 key mask before the softmax.
    Multiplicative,
}

/// Tokens hidden as attention keys/values. They still issue queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub masked_token_indices: BTreeSet<usize>,
    pub mode: MaskMode,
}

impl MaskSpec {
    pub fn none(mode: MaskMode) -> Self {
        Self {
            masked_token_indices: BTreeSet::new(),
            mode,
        }
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>, mode: MaskMode) -> Self {
        Self {
            masked_token_indices: indices.into_iter().collect(),
            mode,
        }
    }

    /// `round(fraction * t)` distinct tokens drawn from `seed`.
    pub fn random(t: usize, fraction: f64, seed: u64, mode: MaskMode) -> Self {
        let count = ((fraction * t as f64).round() as usize).min(t);
        if count == 0 {
            return Self::none(mode);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_indices(index::sample(&mut rng, t, count), mode)
    }

    pub fn flags(&self, t: usize) -> Result<Vec<bool>> {
        let mut f = vec![false; t];
        for &i in &self.masked_token_indices {
            if i >= t {
                return Err(Error::Shape(format!("mask index {i} >= token count {t}")));
            }
            f[i] = true;
        }
        Ok(f)
    }

    /// Apply a token permutation: new token `i` is old token `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Self::from_indices(self.masked_token_indices.iter().map(|&j| inv[j]), self.mode)
    }
}
