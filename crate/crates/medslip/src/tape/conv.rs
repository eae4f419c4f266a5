//! im2col-based 2-d convolution, single image, channels-first.
//!
//! Output size is `(H + 2*pad - k) / stride + 1` per spatial axis; with
//! `k = 3, pad = 1` this is `ceil(H / stride)`.

use ndarray::{Array2, Array3, ArrayD, ArrayView1, ArrayView3};

pub fn conv_out_len(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfold `(C,H,W)` into `(C*k*k, OH*OW)` patch columns with zero padding.
pub fn im2col(x: &ArrayView3<'_, f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for owi in 0..ow {
                        let iw = (owi * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[[row, ohi * ow + owi]] = x[[ci, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of patch-column gradients back to the `(C,H,W)` input.
pub fn col2im(
    dcols: &Array2<f64>,
    dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Array3<f64> {
    let (c, h, w) = dim;
    let (oh, ow) = out_hw;
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for owi in 0..ow {
                        let iw = (owi * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[[ci, ih as usize, iw as usize]] += dcols[[row, ohi * ow + owi]];
                    }
                }
            }
        }
    }
    dx
}

/// `weight (OC,IC,k,k)` applied to `x (IC,H,W)` with per-channel bias.
pub fn conv2d_forward(
    x: &ArrayView3<'_, f64>,
    weight: &ArrayD<f64>,
    bias: &ArrayView1<'_, f64>,
    stride: usize,
    pad: usize,
    cols: &Array2<f64>,
) -> Array3<f64> {
    let (ic, h, w) = x.dim();
    let oc = weight.shape()[0];
    let k = weight.shape()[2];
    assert_eq!(weight.shape()[1], ic, "conv weight in-channels");
    assert_eq!(bias.len(), oc, "conv bias length");
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let wmat = weight
        .view()
        .into_shape_with_order((oc, ic * k * k))
        .expect("conv weight contiguous")
        .to_owned();
    let omat = wmat.dot(cols);
    let mut out = Array3::zeros((oc, oh, ow));
    for c in 0..oc {
        for hi in 0..oh {
            for wi in 0..ow {
                out[[c, hi, wi]] = omat[[c, hi * ow + wi]] + bias[c];
            }
        }
    }
    out
}
