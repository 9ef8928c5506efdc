//! Scaled dot-product attention with key masking.
//!
//! Keys and values are visited in a canonical order (unmasked first, then by
//! the bit patterns of the key and value rows) so that each output row is a
//! function of its query and the *set* of key/value pairs only. This makes
//! token permutation equivariance exact in floating point.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, Axis};

use super::{MaskMode, MaskSpec};
use crate::{Error, Result};

/// Forward state of one attention call, keys in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Attended {
    pub out: Array2<f64>,
    /// Canonical slot `j` holds original key `perm[j]`.
    pub perm: Vec<usize>,
    /// Row-softmax weights over canonical key slots.
    pub weights: Array2<f64>,
    pub kc: Array2<f64>,
    pub vc: Array2<f64>,
    pub keep: Vec<f64>,
    pub scale: f64,
    pub mode: MaskMode,
}

fn cmp_rows(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    Ordering::Equal
}

fn canonical_order(k: ArrayView2<f64>, v: ArrayView2<f64>, masked: &[bool]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k.nrows()).collect();
    perm.sort_by(|&a, &b| {
        masked[a]
            .cmp(&masked[b])
            .then_with(|| cmp_rows(k.row(a), k.row(b)))
            .then_with(|| cmp_rows(v.row(a), v.row(b)))
    });
    perm
}

fn check_shapes(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<()> {
    if q.ncols() == 0 {
        return Err(Error::Shape("attention head dimension is zero".into()));
    }
    if k.dim() != q.dim() || v.nrows() != k.nrows() {
        return Err(Error::Shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    Ok(())
}

pub(crate) fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    masked: &[bool],
    mode: MaskMode,
) -> Attended {
    let t = k.nrows();
    let perm = canonical_order(k, v, masked);
    let kc = k.select(Axis(0), &perm);
    let vc = v.select(Axis(0), &perm);
    let keep: Vec<f64> = perm.iter().map(|&j| if masked[j] { 0.0 } else { 1.0 }).collect();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut w = q.dot(&kc.t());
    for mut row in w.rows_mut() {
        let mut m = f64::NEG_INFINITY;
        for j in 0..t {
            row[j] *= scale;
            if keep[j] == 0.0 {
                match mode {
                    MaskMode::NegInf => continue,
                    MaskMode::Multiplicative => row[j] *= keep[j],
                }
            }
            m = m.max(row[j]);
        }
        if m == f64::NEG_INFINITY || keep.iter().all(|&x| x == 0.0) {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for j in 0..t {
            if mode == MaskMode::NegInf && keep[j] == 0.0 {
                row[j] = 0.0;
            } else {
                row[j] = (row[j] - m).exp();
                sum += row[j];
            }
        }
        row /= sum;
    }
    let out = w.dot(&vc);
    Attended {
        out,
        perm,
        weights: w,
        kc,
        vc,
        keep,
        scale,
        mode,
    }
}

/// Gradients `(dq, dk, dv)` in original key order.
pub(crate) fn attend_backward(
    a: &Attended,
    q: ArrayView2<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let w = &a.weights;
    let d_w = d_out.dot(&a.vc.t());
    let d_vc = w.t().dot(d_out);
    let mut d_s = Array2::zeros(w.dim());
    let rowdot = (w * &d_w).sum_axis(Axis(1));
    for (i, mut row) in d_s.rows_mut().into_iter().enumerate() {
        for j in 0..row.len() {
            row[j] = w[[i, j]] * (d_w[[i, j]] - rowdot[i]);
            if a.mode == MaskMode::Multiplicative {
                row[j] *= a.keep[j];
            }
            row[j] *= a.scale;
        }
    }
    let d_q = d_s.dot(&a.kc);
    let d_kc = d_s.t().dot(&q);
    let mut d_k = Array2::zeros(d_kc.dim());
    let mut d_v = Array2::zeros(d_vc.dim());
    for (slot, &orig) in a.perm.iter().enumerate() {
        d_k.row_mut(orig).assign(&d_kc.row(slot));
        d_v.row_mut(orig).assign(&d_vc.row(slot));
    }
    (d_q, d_k, d_v)
}

/// `softmax(Q K^T / sqrt(d_h))` with masked keys, times `V`.
///
/// A query whose keys are all masked yields a zero row.
pub fn masked_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: &MaskSpec,
) -> Result<Array2<f64>> {
    check_shapes(q.view(), k.view(), v.view())?;
    let masked = mask.flags(k.nrows())?;
    Ok(attend(q.view(), k.view(), v.view(), &masked, mask.mode).out)
}

/// Attention weights with columns in the original key order.
pub fn attention_weights(q: &Array2<f64>, k: &Array2<f64>, mask: &MaskSpec) -> Result<Array2<f64>> {
    check_shapes(q.view(), k.view(), k.view())?;
    let masked = mask.flags(k.nrows())?;
    let a = attend(q.view(), k.view(), k.view(), &masked, mask.mode);
    let mut w = Array2::zeros(a.weights.dim());
    for (slot, &orig) in a.perm.iter().enumerate() {
        w.column_mut(orig).assign(&a.weights.column(slot));
    }
    Ok(w)
}
