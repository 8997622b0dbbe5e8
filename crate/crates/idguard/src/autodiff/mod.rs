//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are dynamic-dimension `ndarray` tensors holding one sample each
//! (no batch axis); the trainer parallelizes across samples and reduces
//! gradients in a fixed order, which keeps whole runs bit-deterministic.
//! Stop-gradient is [`Tape::detach`]: the value re-enters the tape as a
//! constant leaf, so no gradient can flow through it by construction.

mod conv;

pub use conv::{col2im, im2col};

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    Silu(Var),
    Tanh(Var),
    Clamp {
        x: Var,
        lo: F,
        hi: F,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Array2<F>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: F,
        mean: Vec<F>,
        inv_std: Vec<F>,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    UpsampleNearest2(Var),
    GlobalAvgPool(Var),
    ConcatC(Var, Var),
    BroadcastChw {
        v: Var,
        h: usize,
        w: usize,
    },
    Shift2d {
        x: Var,
        dy: i64,
        dx: i64,
    },
    SliceVec {
        x: Var,
        start: usize,
        len: usize,
    },
    RowsSum {
        table: Var,
        ids: Vec<usize>,
    },
    Mse(Var, Var),
    BceLogits {
        logits: Var,
        targets: Array1<F>,
    },
    CeLogits {
        logits: Var,
        target: usize,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<F: Scalar> {
    by_node: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient of a leaf, or zeros of the given shape when no gradient
    /// reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<F> {
        match self.by_node[v.0].as_ref() {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Extract a 0-dim scalar node's value.
    pub fn scalar(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "scalar() on non-scalar node");
        val[IxDyn(&[])]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: ArrayD<F>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: F) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Stop-gradient: the value continues forward, the graph edge does not.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.tanh());
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    /// `w [out,in] · x [in] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as1(self.value(x));
        let wv = as2(self.value(w));
        let bv = as1(self.value(b));
        assert_eq!(wv.ncols(), xv.len(), "linear dims");
        assert_eq!(wv.nrows(), bv.len(), "linear bias dims");
        let value = (wv.dot(&xv) + bv).into_dyn();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    /// 2-D convolution, NCHW single sample: `x [C,H,W]`, `w [O,C,kh,kw]`,
    /// `b [O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (value, cols) = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// Group normalization over `[C,H,W]` with affine parameters `[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: F) -> Var {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        assert_eq!(shape.len(), 3, "group_norm expects [C,H,W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        let gsize = (c / groups) * h * w;
        let xs = xv.as_slice().expect("contiguous");
        let mut mean = vec![F::zero(); groups];
        let mut inv_std = vec![F::zero(); groups];
        let mut out = xv.clone();
        let gv = as1(self.value(gamma)).to_owned();
        let bv = as1(self.value(beta)).to_owned();
        {
            let os = out.as_slice_mut().expect("contiguous");
            let n = F::from_f64(gsize as f64);
            for g in 0..groups {
                let base = g * gsize;
                let sl = &xs[base..base + gsize];
                let mut s = F::zero();
                for &v in sl {
                    s += v;
                }
                let mu = s / n;
                let mut var = F::zero();
                for &v in sl {
                    let d = v - mu;
                    var += d * d;
                }
                var = var / n;
                let istd = F::one() / (var + eps).sqrt();
                mean[g] = mu;
                inv_std[g] = istd;
                let ch_per_g = c / groups;
                for cc in 0..ch_per_g {
                    let ch = g * ch_per_g + cc;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let off = base + cc * h * w;
                    for i in 0..h * w {
                        let xh = (xs[off + i] - mu) * istd;
                        os[off + i] = ga * xh + be;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
                mean,
                inv_std,
            },
            rg,
        )
    }

    /// Per-channel affine modulation: `y[c] = x[c] * (1 + scale[c]) + shift[c]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let c = shape[0];
        let sc = as1(self.value(scale)).to_owned();
        let sh = as1(self.value(shift)).to_owned();
        assert_eq!(sc.len(), c);
        assert_eq!(sh.len(), c);
        let hw = shape[1] * shape[2];
        let mut out = xv.clone();
        {
            let os = out.as_slice_mut().expect("contiguous");
            let xs = xv.as_slice().expect("contiguous");
            for ch in 0..c {
                let m = F::one() + sc[ch];
                let a = sh[ch];
                for i in 0..hw {
                    os[ch * hw + i] = xs[ch * hw + i] * m + a;
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(out, Op::Film { x, scale, shift }, rg)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[[ch, y, xx]];
                    out[[ch, 2 * y, 2 * xx]] = v;
                    out[[ch, 2 * y, 2 * xx + 1]] = v;
                    out[[ch, 2 * y + 1, 2 * xx]] = v;
                    out[[ch, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::UpsampleNearest2(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let n = F::from_f64((h * w) as f64);
        let mut out = Array1::zeros(c);
        let xs = xv.as_slice().expect("contiguous");
        for ch in 0..c {
            let mut s = F::zero();
            for &v in &xs[ch * h * w..(ch + 1) * h * w] {
                s += v;
            }
            out[ch] = s / n;
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), rg)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        assert_eq!(av.shape()[1..], bv.shape()[1..], "concat_c spatial dims");
        let value = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).expect("concat");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatC(a, b), rg)
    }

    /// Replicate a `[C]` vector over an `h x w` grid.
    pub fn broadcast_chw(&mut self, v: Var, h: usize, w: usize) -> Var {
        let vv = as1(self.value(v)).to_owned();
        let c = vv.len();
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ch in 0..c {
            out.index_axis_mut(Axis(0), ch).fill(vv[ch]);
        }
        let rg = self.rg(v);
        self.push(out, Op::BroadcastChw { v, h, w }, rg)
    }

    /// Integer translation with zero fill.
    pub fn shift2d(&mut self, x: Var, dy: i64, dx: i64) -> Var {
        let xv = &self.nodes[x.0].value;
        let value = shift_image(xv, dy, dx);
        let rg = self.rg(x);
        self.push(value, Op::Shift2d { x, dy, dx }, rg)
    }

    pub fn slice_vec(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = as1(self.value(x));
        assert!(start + len <= xv.len(), "slice_vec out of range");
        let value = xv.slice(ndarray::s![start..start + len]).to_owned().into_dyn();
        let rg = self.rg(x);
        self.push(value, Op::SliceVec { x, start, len }, rg)
    }

    /// Sum of selected rows of `table [V,D]` -> `[D]`.
    pub fn rows_sum(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = as2(self.value(table));
        assert!(!ids.is_empty(), "rows_sum needs at least one row");
        let d = tv.ncols();
        let mut out = Array1::zeros(d);
        for &id in ids {
            assert!(id < tv.nrows(), "row id out of range");
            out += &tv.row(id);
        }
        let rg = self.rg(table);
        self.push(
            out.into_dyn(),
            Op::RowsSum {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Mean squared error over all elements -> 0-dim scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mse shape");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = F::from_f64(av.len() as f64);
        let mut s = F::zero();
        for (x, y) in av.iter().zip(bv.iter()) {
            let d = *x - *y;
            s += d * d;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), s / n);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mse(a, b), rg)
    }

    /// Mean-over-bits binary cross entropy against constant 0/1 targets,
    /// computed in the numerically stable logits form.
    pub fn bce_logits(&mut self, logits: Var, targets: &Array1<F>) -> Var {
        let lv = as1(self.value(logits));
        assert_eq!(lv.len(), targets.len(), "bce length");
        let n = F::from_f64(lv.len() as f64);
        let mut s = F::zero();
        for (x, t) in lv.iter().zip(targets.iter()) {
            // softplus(x) - t*x, with softplus(x) = max(x,0) + ln(1+e^{-|x|})
            let sp = x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln();
            s += sp - *t * *x;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), s / n);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::BceLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        )
    }

    /// Softmax cross entropy of a logit vector against a class index.
    pub fn ce_logits(&mut self, logits: Var, target: usize) -> Var {
        let lv = as1(self.value(logits));
        assert!(target < lv.len(), "ce target out of range");
        let m = lv.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut lse = F::zero();
        for &x in lv.iter() {
            lse += (x - m).exp();
        }
        let lse = lse.ln() + m;
        let value = ArrayD::from_elem(IxDyn(&[]), lse - lv[target]);
        let rg = self.rg(logits);
        self.push(value, Op::CeLogits { logits, target }, rg)
    }

    /// Reverse pass from a 0-dim scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(
            self.nodes[loss.0].value.ndim(),
            0,
            "backward seed must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            if !matches!(self.nodes[i].op, Op::Leaf) {
                // interior node: gradient no longer needed
                grads[i] = None;
            } else {
                grads[i] = Some(g);
            }
        }
        Gradients { by_node: grads }
    }

    fn backward_node(&self, idx: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.mapv(|v| -v));
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, g.mapv(|v| v * *c));
            }
            Op::Silu(a) => {
                let xv = &self.nodes[a.0].value;
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(xv).for_each(|gv, &x| {
                    let s = sigmoid(x);
                    *gv = *gv * (s * (F::one() + x * (F::one() - s)));
                });
                self.accum(grads, *a, gx);
            }
            Op::Tanh(a) => {
                let yv = &node.value;
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(yv).for_each(|gv, &y| {
                    *gv = *gv * (F::one() - y * y);
                });
                self.accum(grads, *a, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(xv).for_each(|gv, &v| {
                    if v <= *lo || v >= *hi {
                        *gv = F::zero();
                    }
                });
                self.accum(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let xv = as1(self.value(*x)).to_owned();
                let wv = as2(self.value(*w)).to_owned();
                let gv = as1(g);
                if self.rg(*w) {
                    // outer product g ⊗ x
                    let mut gw = Array2::zeros((wv.nrows(), wv.ncols()));
                    for i in 0..wv.nrows() {
                        let gi = gv[i];
                        for j in 0..wv.ncols() {
                            gw[[i, j]] = gi * xv[j];
                        }
                    }
                    self.accum(grads, *w, gw.into_dyn());
                }
                if self.rg(*b) {
                    self.accum(grads, *b, gv.to_owned().into_dyn());
                }
                if self.rg(*x) {
                    let gx = wv.t().dot(&gv);
                    self.accum(grads, *x, gx.into_dyn());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (gx, gw, gb) = conv::conv2d_backward(
                    g,
                    self.value(*x).shape(),
                    self.value(*w),
                    cols,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(gw) = gw {
                    self.accum(grads, *w, gw);
                }
                if self.rg(*b) {
                    self.accum(grads, *b, gb);
                }
                if let Some(gx) = gx {
                    self.accum(grads, *x, gx);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps: _,
                mean,
                inv_std,
            } => {
                let xv = &self.nodes[x.0].value;
                let shape = xv.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let xs = xv.as_slice().expect("contiguous");
                let gs = g.as_slice().expect("contiguous");
                let gv = as1(self.value(*gamma)).to_owned();
                let ch_per_g = c / groups;
                let gsize = ch_per_g * h * w;
                let hw = h * w;

                let mut ggamma = Array1::<F>::zeros(c);
                let mut gbeta = Array1::<F>::zeros(c);
                let mut gx = vec![F::zero(); xs.len()];
                let n = F::from_f64(gsize as f64);
                for gi in 0..*groups {
                    let base = gi * gsize;
                    let mu = mean[gi];
                    let istd = inv_std[gi];
                    // accumulate the two reduction terms over the group
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for cc in 0..ch_per_g {
                        let ch = gi * ch_per_g + cc;
                        let ga = gv[ch];
                        let off = base + cc * hw;
                        for i in 0..hw {
                            let xh = (xs[off + i] - mu) * istd;
                            let dy = gs[off + i];
                            gbeta[ch] += dy;
                            ggamma[ch] += dy * xh;
                            let dxh = dy * ga;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh;
                        }
                    }
                    let m_dxhat = sum_dxhat / n;
                    let m_dxhat_xhat = sum_dxhat_xhat / n;
                    for cc in 0..ch_per_g {
                        let ch = gi * ch_per_g + cc;
                        let ga = gv[ch];
                        let off = base + cc * hw;
                        for i in 0..hw {
                            let xh = (xs[off + i] - mu) * istd;
                            let dxh = gs[off + i] * ga;
                            gx[off + i] = istd * (dxh - m_dxhat - xh * m_dxhat_xhat);
                        }
                    }
                }
                if self.rg(*gamma) {
                    self.accum(grads, *gamma, ggamma.into_dyn());
                }
                if self.rg(*beta) {
                    self.accum(grads, *beta, gbeta.into_dyn());
                }
                if self.rg(*x) {
                    let gx = ArrayD::from_shape_vec(IxDyn(&[c, h, w]), gx).expect("shape");
                    self.accum(grads, *x, gx);
                }
            }
            Op::Film { x, scale, shift } => {
                let xv = &self.nodes[x.0].value;
                let shape = xv.shape();
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                let xs = xv.as_slice().expect("contiguous");
                let gs = g.as_slice().expect("contiguous");
                let sc = as1(self.value(*scale)).to_owned();
                let mut gscale = Array1::<F>::zeros(c);
                let mut gshift = Array1::<F>::zeros(c);
                let mut gx = vec![F::zero(); xs.len()];
                for ch in 0..c {
                    let m = F::one() + sc[ch];
                    for i in 0..hw {
                        let dy = gs[ch * hw + i];
                        gscale[ch] += dy * xs[ch * hw + i];
                        gshift[ch] += dy;
                        gx[ch * hw + i] = dy * m;
                    }
                }
                if self.rg(*scale) {
                    self.accum(grads, *scale, gscale.into_dyn());
                }
                if self.rg(*shift) {
                    self.accum(grads, *shift, gshift.into_dyn());
                }
                if self.rg(*x) {
                    let gx = ArrayD::from_shape_vec(xv.raw_dim(), gx).expect("shape");
                    self.accum(grads, *x, gx);
                }
            }
            Op::UpsampleNearest2(x) => {
                let xv = &self.nodes[x.0].value;
                let shape = xv.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut gx = ArrayD::zeros(xv.raw_dim());
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[[ch, y, xx]] = g[[ch, 2 * y, 2 * xx]]
                                + g[[ch, 2 * y, 2 * xx + 1]]
                                + g[[ch, 2 * y + 1, 2 * xx]]
                                + g[[ch, 2 * y + 1, 2 * xx + 1]];
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let xv = &self.nodes[x.0].value;
                let shape = xv.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let n = F::from_f64((h * w) as f64);
                let gvec = as1(g);
                let mut gx = ArrayD::zeros(xv.raw_dim());
                for ch in 0..c {
                    gx.index_axis_mut(Axis(0), ch).fill(gvec[ch] / n);
                }
                self.accum(grads, *x, gx);
            }
            Op::ConcatC(a, b) => {
                let ca = self.value(*a).shape()[0];
                let ga = g.slice_axis(Axis(0), ndarray::Slice::from(0..ca)).to_owned();
                let gb = g.slice_axis(Axis(0), ndarray::Slice::from(ca..)).to_owned();
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::BroadcastChw { v, h, w } => {
                let c = self.value(*v).len();
                let mut gv = Array1::zeros(c);
                for ch in 0..c {
                    let mut s = F::zero();
                    for y in 0..*h {
                        for xx in 0..*w {
                            s += g[[ch, y, xx]];
                        }
                    }
                    gv[ch] = s;
                }
                self.accum(grads, *v, gv.into_dyn());
            }
            Op::Shift2d { x, dy, dx } => {
                let gx = shift_image(g, -dy, -dx);
                self.accum(grads, *x, gx);
            }
            Op::SliceVec { x, start, len } => {
                let xv = as1(self.value(*x));
                let mut gx = Array1::zeros(xv.len());
                let gvec = as1(g);
                for i in 0..*len {
                    gx[start + i] = gvec[i];
                }
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::RowsSum { table, ids } => {
                let tv = as2(self.value(*table));
                let mut gt = Array2::zeros((tv.nrows(), tv.ncols()));
                let gvec = as1(g);
                for &id in ids {
                    let mut row = gt.row_mut(id);
                    row += &gvec;
                }
                self.accum(grads, *table, gt.into_dyn());
            }
            Op::Mse(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let n = F::from_f64(av.len() as f64);
                let gs = g[IxDyn(&[])];
                let coeff = gs * F::from_f64(2.0) / n;
                if self.rg(*a) {
                    let ga = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| coeff * (x - y));
                    self.accum(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| -coeff * (x - y));
                    self.accum(grads, *b, gb);
                }
            }
            Op::BceLogits { logits, targets } => {
                let lv = as1(self.value(*logits));
                let n = F::from_f64(lv.len() as f64);
                let gs = g[IxDyn(&[])];
                let mut gl = Array1::zeros(lv.len());
                for i in 0..lv.len() {
                    gl[i] = gs * (sigmoid(lv[i]) - targets[i]) / n;
                }
                self.accum(grads, *logits, gl.into_dyn());
            }
            Op::CeLogits { logits, target } => {
                let lv = as1(self.value(*logits));
                let m = lv.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut exps: Vec<F> = lv.iter().map(|&x| (x - m).exp()).collect();
                let z: F = exps.iter().fold(F::zero(), |a, &b| a + b);
                for e in exps.iter_mut() {
                    *e = *e / z;
                }
                let gs = g[IxDyn(&[])];
                let mut gl = Array1::zeros(lv.len());
                for i in 0..lv.len() {
                    let onehot = if i == *target { F::one() } else { F::zero() };
                    gl[i] = gs * (exps[i] - onehot);
                }
                self.accum(grads, *logits, gl.into_dyn());
            }
        }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<F>>], v: Var, g: ArrayD<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn as1<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    a.view().into_dimensionality().expect("expected 1-d tensor")
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality().expect("expected 2-d tensor")
}

fn shift_image<F: Scalar>(x: &ArrayD<F>, dy: i64, dx: i64) -> ArrayD<F> {
    let shape = x.shape();
    assert_eq!(shape.len(), 3);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = ArrayD::zeros(x.raw_dim());
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for xx in 0..w {
                let sx = xx as i64 - dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out[[ch, y, xx]] = x[[ch, sy as usize, sx as usize]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
