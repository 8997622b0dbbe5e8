//! im2col-based 2-D convolution kernels (single sample, NCHW without N).

use crate::scalar::Scalar;
use ndarray::{Array2, ArrayD, IxDyn};

fn out_extent(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfold `x [C,H,W]` into `[C*kh*kw, OH*OW]` with zero padding.
pub fn im2col<F: Scalar>(
    x: &ArrayD<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(w, kw, stride, pad);
    let xs = x.as_slice().expect("contiguous input");
    let mut cols = Array2::<F>::zeros((c * kh * kw, oh * ow));
    let cs = cols.as_slice_mut().expect("contiguous cols");
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let row_off = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let src_off = (ch * h + iy as usize) * w;
                    let dst_off = row_off + oy * ow;
                    if stride == 1 {
                        // contiguous span of valid ox values
                        let ox_lo = if (kx as i64) < pad as i64 {
                            (pad - kx) as usize
                        } else {
                            0
                        };
                        let ix_at = |ox: usize| (ox + kx) as i64 - pad as i64;
                        if ox_lo >= ow || ix_at(ox_lo) >= w as i64 {
                            continue;
                        }
                        let ox_hi = usize::min(ow - 1, (w as i64 - 1 + pad as i64 - kx as i64) as usize);
                        let n = ox_hi + 1 - ox_lo;
                        let src = ix_at(ox_lo) as usize;
                        cs[dst_off + ox_lo..dst_off + ox_lo + n]
                            .copy_from_slice(&xs[src_off + src..src_off + src + n]);
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            cs[dst_off + ox] = xs[src_off + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold `[C*kh*kw, OH*OW]` gradients back onto an input of shape `in_shape`.
pub fn col2im<F: Scalar>(
    cols: &Array2<F>,
    in_shape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(w, kw, stride, pad);
    let mut out = ArrayD::<F>::zeros(IxDyn(in_shape));
    let os = out.as_slice_mut().expect("contiguous");
    let cs = cols.as_slice().expect("contiguous cols");
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let row_off = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let dst_off = (ch * h + iy as usize) * w;
                    let src_off = row_off + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        os[dst_off + ix as usize] += cs[src_off + ox];
                    }
                }
            }
        }
    }
    out
}

/// Returns the convolution output and the unfolded column matrix (kept for
/// the backward pass).
pub fn conv2d_forward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    b: &ArrayD<F>,
    stride: usize,
    pad: usize,
) -> (ArrayD<F>, Array2<F>) {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
    assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,kh,kw]");
    assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = out_extent(xs[1], kh, stride, pad);
    let ow = out_extent(xs[2], kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((oc, ws[1] * kh * kw))
        .expect("weight reshape");
    let mut out = w_mat.dot(&cols); // [O, OH*OW]
    let bv = b.view().into_dimensionality::<ndarray::Ix1>().expect("bias 1-d");
    for (mut row, &bias) in out.rows_mut().into_iter().zip(bv.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    let out = out
        .into_shape_with_order(IxDyn(&[oc, oh, ow]))
        .expect("output reshape");
    (out, cols)
}

/// Gradients w.r.t. input, weight and bias. Input/weight gradients are
/// computed only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    g_out: &ArrayD<F>,
    in_shape: &[usize],
    w: &ArrayD<F>,
    cols: &Array2<F>,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>, ArrayD<F>) {
    let ws = w.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let ckk = ws[1] * kh * kw;
    let spatial = g_out.len() / oc;
    let g_mat = g_out
        .view()
        .into_shape_with_order((oc, spatial))
        .expect("grad reshape");

    let mut gb = ndarray::Array1::<F>::zeros(oc);
    for (i, row) in g_mat.rows().into_iter().enumerate() {
        let mut s = F::zero();
        for &v in row.iter() {
            s += v;
        }
        gb[i] = s;
    }

    let gw = if need_gw {
        let gw_mat = g_mat.dot(&cols.t()); // [O, CKK]
        Some(
            gw_mat
                .into_shape_with_order(IxDyn(&[oc, ws[1], kh, kw]))
                .expect("gw reshape"),
        )
    } else {
        None
    };

    let gx = if need_gx {
        let w_mat = w
            .view()
            .into_shape_with_order((oc, ckk))
            .expect("weight reshape");
        let g_cols = w_mat.t().dot(&g_mat); // [CKK, OH*OW]
        Some(col2im(&g_cols, in_shape, kh, kw, stride, pad))
    } else {
        None
    };

    (gx, gw, gb.into_dyn())
}
