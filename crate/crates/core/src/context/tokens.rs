//! Token assembly: features plus position embeddings, concatenated as
//! `[image, layout, point, object]`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::params::EncoderParams;
use super::ContextConfig;
use crate::pano_geom::SphericalDir;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Image,
    Layout,
    Point,
    Object,
}

/// Raw per-segment inputs of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenInputs {
    /// `rows x cols x image_feat_dim` global image feature grid.
    pub image_grid: Array3<f64>,
    pub layout_feats: Array2<f64>,
    /// Layout vertex coordinates, `t_layout x 3`.
    pub layout_pos: Array2<f64>,
    pub point_feats: Array2<f64>,
    pub point_pos: Array2<f64>,
    pub object_feats: Array2<f64>,
    /// Candidate boxes `(x, y, z, l, h, w)`, `t_object x 6`.
    pub object_pos: Array2<f64>,
}

/// The concatenated embedding matrix with per-token tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub embeddings: Array2<f64>,
    pub segments: Vec<Segment>,
    pub positions: Vec<Vec<f64>>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// New token `i` is old token `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select(Axis(0), perm),
            segments: perm.iter().map(|&i| self.segments[i]).collect(),
            positions: perm.iter().map(|&i| self.positions[i].clone()).collect(),
        }
    }
}

/// Unit-sphere directions `(cos phi sin theta, sin phi, cos phi cos theta)`
/// of the cell centers of a `rows x cols` equirectangular grid.
pub fn image_token_dirs(rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows * cols, 3));
    for r in 0..rows {
        for c in 0..cols {
            let d = SphericalDir::new(
                TAU * ((c as f64 + 0.5) / cols as f64) - PI,
                FRAC_PI_2 - PI * ((r as f64 + 0.5) / rows as f64),
            )
            .unit_vector();
            let i = r * cols + c;
            out[[i, 0]] = d.x;
            out[[i, 1]] = d.y;
            out[[i, 2]] = d.z;
        }
    }
    out
}

impl TokenInputs {
    /// Zero features with the given positions, shaped for `cfg`.
    pub fn zeros(cfg: &ContextConfig) -> Result<Self> {
        let (rows, cols) = cfg.image_grid()?;
        Ok(Self {
            image_grid: Array3::zeros((rows, cols, cfg.image_feat_dim)),
            layout_feats: Array2::zeros((cfg.t_layout, cfg.d)),
            layout_pos: Array2::zeros((cfg.t_layout, 3)),
            point_feats: Array2::zeros((cfg.t_point, cfg.d)),
            point_pos: Array2::zeros((cfg.t_point, 3)),
            object_feats: Array2::zeros((cfg.t_object, cfg.d)),
            object_pos: Array2::zeros((cfg.t_object, 6)),
        })
    }

    pub fn validate(&self, cfg: &ContextConfig) -> Result<()> {
        let (rows, cols) = cfg.image_grid()?;
        let check = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")))
            } else {
                Ok(())
            }
        };
        if self.image_grid.dim() != (rows, cols, cfg.image_feat_dim) {
            return Err(Error::Shape(format!(
                "image grid is {:?}, expected {:?}",
                self.image_grid.dim(),
                (rows, cols, cfg.image_feat_dim)
            )));
        }
        check("layout_feats", self.layout_feats.dim(), (cfg.t_layout, cfg.d))?;
        check("layout_pos", self.layout_pos.dim(), (cfg.t_layout, 3))?;
        check("point_feats", self.point_feats.dim(), (cfg.t_point, cfg.d))?;
        check("point_pos", self.point_pos.dim(), (cfg.t_point, 3))?;
        check("object_feats", self.object_feats.dim(), (cfg.t_object, cfg.d))?;
        check("object_pos", self.object_pos.dim(), (cfg.t_object, 6))?;
        Ok(())
    }

    pub fn image_feats(&self) -> ArrayView2<'_, f64> {
        let (r, c, f) = self.image_grid.dim();
        self.image_grid
            .view()
            .into_shape_with_order((r * c, f))
            .expect("image grid is contiguous")
    }
}

fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Sum every feature block with its position embedding and concatenate.
pub fn assemble_tokens(
    inputs: &TokenInputs,
    params: &EncoderParams,
    cfg: &ContextConfig,
) -> Result<TokenSet> {
    inputs.validate(cfg)?;
    let (rows, cols) = cfg.image_grid()?;
    let dirs = image_token_dirs(rows, cols);
    let img = inputs.image_feats().dot(&params.image_proj)
        + affine(dirs.view(), &params.pos_image, &params.pos_image_b);
    let lay = &inputs.layout_feats
        + &affine(inputs.layout_pos.view(), &params.pos_layout, &params.pos_layout_b);
    let pt = &inputs.point_feats
        + &affine(inputs.point_pos.view(), &params.pos_point, &params.pos_point_b);
    let obj = &inputs.object_feats
        + &affine(inputs.object_pos.view(), &params.pos_object, &params.pos_object_b);
    let embeddings = concatenate(Axis(0), &[img.view(), lay.view(), pt.view(), obj.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    if !embeddings.iter().all(|x| x.is_finite()) {
        return Err(Error::Numerical("non-finite token embedding".into()));
    }
    let mut segments = Vec::with_capacity(cfg.total_tokens());
    let mut positions = Vec::with_capacity(cfg.total_tokens());
    let blocks: [(Segment, ArrayView2<f64>); 4] = [
        (Segment::Image, dirs.view()),
        (Segment::Layout, inputs.layout_pos.view()),
        (Segment::Point, inputs.point_pos.view()),
        (Segment::Object, inputs.object_pos.view()),
    ];
    for (seg, pos) in blocks {
        for row in pos.rows() {
            segments.push(seg);
            positions.push(row.to_vec());
        }
    }
    Ok(TokenSet {
        embeddings,
        segments,
        positions,
    })
}

/// Gradients of the raw token inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub image_feats: Array2<f64>,
    pub layout_feats: Array2<f64>,
    pub layout_pos: Array2<f64>,
    pub point_feats: Array2<f64>,
    pub point_pos: Array2<f64>,
    pub object_feats: Array2<f64>,
    pub object_pos: Array2<f64>,
}

/// Backward of [`assemble_tokens`]: accumulates into `grads` and returns input gradients.
pub(crate) fn assemble_backward(
    inputs: &TokenInputs,
    params: &EncoderParams,
    cfg: &ContextConfig,
    d_z: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<InputGrads> {
    let (rows, cols) = cfg.image_grid()?;
    let dirs = image_token_dirs(rows, cols);
    let r = |seg| d_z.slice(s![cfg.segment_range(seg), ..]);
    let (d_img, d_lay, d_pt, d_obj) = (
        r(Segment::Image),
        r(Segment::Layout),
        r(Segment::Point),
        r(Segment::Object),
    );
    let sum_rows = |m: &ArrayView2<f64>| m.sum_axis(Axis(0)).insert_axis(Axis(0));

    grads.image_proj += &inputs.image_feats().t().dot(&d_img);
    grads.pos_image += &dirs.t().dot(&d_img);
    grads.pos_image_b += &sum_rows(&d_img);
    grads.pos_layout += &inputs.layout_pos.t().dot(&d_lay);
    grads.pos_layout_b += &sum_rows(&d_lay);
    grads.pos_point += &inputs.point_pos.t().dot(&d_pt);
    grads.pos_point_b += &sum_rows(&d_pt);
    grads.pos_object += &inputs.object_pos.t().dot(&d_obj);
    grads.pos_object_b += &sum_rows(&d_obj);

    Ok(InputGrads {
        image_feats: d_img.dot(&params.image_proj.t()),
        layout_feats: d_lay.to_owned(),
        layout_pos: d_lay.dot(&params.pos_layout.t()),
        point_feats: d_pt.to_owned(),
        point_pos: d_pt.dot(&params.pos_point.t()),
        object_feats: d_obj.to_owned(),
        object_pos: d_obj.dot(&params.pos_object.t()),
    })
}
