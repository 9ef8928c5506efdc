//! Prediction-head output layout and box coding.

use std::f64::consts::{PI, TAU};
use std::ops::Range;

use ndarray::ArrayView1;

use super::ContextConfig;
use crate::boxes3d::{wrap_angle, OrientedBox};
use crate::losses::BoxGrad;
use crate::{Error, Result, Vec3};

/// Smallest decoded box side, in meters.
pub const MIN_DECODED_SIZE: f64 = 1e-3;

/// Column ranges of one object-head output row.
///
/// Order: center offset (3), size-class logits (S), size offsets (3S),
/// heading-bin logits (B), heading offsets (B), objectness (1), category
/// logits (C), shape code.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub center: Range<usize>,
    pub size_cls: Range<usize>,
    pub size_off: Range<usize>,
    pub head_cls: Range<usize>,
    pub head_off: Range<usize>,
    pub objness: usize,
    pub cls: Range<usize>,
    pub shape: Range<usize>,
}

impl HeadLayout {
    pub fn new(cfg: &ContextConfig) -> Self {
        let (s, b, c) = (cfg.size_classes, cfg.heading_bins, cfg.categories);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let center = take(3);
        let size_cls = take(s);
        let size_off = take(3 * s);
        let head_cls = take(b);
        let head_off = take(b);
        let objness = take(1).start;
        let cls = take(c);
        let shape = take(cfg.shape_dim);
        Self {
            center,
            size_cls,
            size_off,
            head_cls,
            head_off,
            objness,
            cls,
            shape,
        }
    }

    pub fn width(&self) -> usize {
        self.shape.end
    }

    pub fn size_off_of(&self, class: usize) -> Range<usize> {
        let a = self.size_off.start + 3 * class;
        a..a + 3
    }
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Regression targets for one candidate matched to a GT box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTarget {
    pub center_offset: Vec3,
    pub size_class: usize,
    pub size_offset: Vec3,
    pub heading_bin: usize,
    pub heading_offset: f64,
    pub category: usize,
}

/// Heading bins and per-class size templates.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxCoder {
    pub heading_bins: usize,
    pub templates: Vec<Vec3>,
}

impl BoxCoder {
    pub fn new(heading_bins: usize, templates: Vec<Vec3>) -> Result<Self> {
        if heading_bins == 0 || templates.is_empty() {
            return Err(Error::Domain("box coder needs bins and templates".into()));
        }
        Ok(Self {
            heading_bins,
            templates,
        })
    }

    pub fn bin_width(&self) -> f64 {
        TAU / self.heading_bins as f64
    }

    /// `-pi + (b + 0.5) * 2pi / B`.
    pub fn bin_center(&self, b: usize) -> f64 {
        -PI + (b as f64 + 0.5) * self.bin_width()
    }

    pub fn encode_heading(&self, yaw: f64) -> (usize, f64) {
        let yaw = wrap_angle(yaw);
        let b = (((yaw + PI) / self.bin_width()).floor() as usize).min(self.heading_bins - 1);
        (b, yaw - self.bin_center(b))
    }

    /// Targets for `gt` relative to a candidate at `anchor`; the size class is
    /// the GT category.
    pub fn encode(&self, gt: &OrientedBox, anchor: Vec3) -> Result<BoxTarget> {
        let class = gt.category as usize;
        let template = self.templates.get(class).ok_or_else(|| {
            Error::Domain(format!("category {class} has no size template"))
        })?;
        let (heading_bin, heading_offset) = self.encode_heading(gt.heading);
        Ok(BoxTarget {
            center_offset: gt.center - anchor,
            size_class: class,
            size_offset: gt.size - template,
            heading_bin,
            heading_offset,
            category: class,
        })
    }

    /// Box from one object-head row; argmax classes, offsets of the chosen class.
    pub fn decode(&self, layout: &HeadLayout, row: ArrayView1<f64>, anchor: Vec3) -> OrientedBox {
        let c = &layout.center;
        let center = anchor + Vec3::new(row[c.start], row[c.start + 1], row[c.start + 2]);
        let s = argmax(row.slice(ndarray::s![layout.size_cls.clone()]));
        let so = layout.size_off_of(s);
        let t = self.templates[s.min(self.templates.len() - 1)];
        let size = Vec3::new(
            (t.x + row[so.start]).max(MIN_DECODED_SIZE),
            (t.y + row[so.start + 1]).max(MIN_DECODED_SIZE),
            (t.z + row[so.start + 2]).max(MIN_DECODED_SIZE),
        );
        let b = argmax(row.slice(ndarray::s![layout.head_cls.clone()]));
        let yaw = self.bin_center(b) + row[layout.head_off.start + b];
        let category = argmax(row.slice(ndarray::s![layout.cls.clone()])) as u32;
        OrientedBox {
            center,
            size,
            heading: wrap_angle(yaw),
            category,
            score: Some(sigmoid(row[layout.objness])),
            shape_code: Some(row.slice(ndarray::s![layout.shape.clone()]).to_vec()),
        }
    }

    /// Accumulate into `out` the row gradient of a scalar whose gradient
    /// with respect to the decoded box is `g`. Class choices are held fixed
    /// and clamped sizes pass no gradient.
    pub fn decode_backward(
        &self,
        layout: &HeadLayout,
        row: ArrayView1<f64>,
        g: &BoxGrad,
        mut out: ndarray::ArrayViewMut1<f64>,
    ) {
        for k in 0..3 {
            out[layout.center.start + k] += g.center[k];
        }
        let s = argmax(row.slice(ndarray::s![layout.size_cls.clone()]));
        let so = layout.size_off_of(s);
        let t = self.templates[s.min(self.templates.len() - 1)];
        for k in 0..3 {
            if t[k] + row[so.start + k] > MIN_DECODED_SIZE {
                out[so.start + k] += g.size[k];
            }
        }
        let b = argmax(row.slice(ndarray::s![layout.head_cls.clone()]));
        out[layout.head_off.start + b] += g.heading;
    }
}
