//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every differentiable computation in the crate (backbone, gates, query
//! attention, predictors, losses, decoder) is expressed as tape ops so that
//! one backward pass yields gradients for all parameters, and so that the
//! finite-difference harness can verify any composite end to end.
//!
//! Values are `f64` dense arrays. Scalars are zero-dimensional arrays.
//! Parameters enter as shared leaves (`Arc`-backed, no copy per tape);
//! data enters as constants that never accumulate gradients.

pub mod conv;
pub mod fd;

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use self::conv::{col2im, conv2d_forward, im2col};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Val {
    Own(ArrayD<f64>),
    Shared(Arc<ArrayD<f64>>),
}

impl Val {
    fn get(&self) -> &ArrayD<f64> {
        match self {
            Val::Own(a) => a,
            Val::Shared(a) => a,
        }
    }
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Tensor times a 0-d scalar variable.
    MulScalar(Var, Var),
    /// Tensor plus a 0-d scalar variable, broadcast.
    AddScalar(Var, Var),
    /// `(r x c) + (c)` broadcast over rows.
    AddRowBias(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    /// 1-d dot 1-d -> 0-d.
    Dot(Var, Var),
    /// `(r x c) . (c)` -> `(r)`.
    MatVec(Var, Var),
    Sum(Var),
    Mean(Var),
    /// Column-wise mean over rows: `(r x c)` -> `(c)`.
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    Row(Var, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    /// Concatenate 0-d and 1-d inputs into one vector.
    Concat1d(Vec<Var>),
    LogSumExp(Var),
    /// Row-wise x / max(||x||, eps).
    RowsL2Normalize(Var, f64),
    /// Mean stable BCE of sigmoid(logits) against constant targets.
    BceWithLogitsMean { logits: Var, targets: ArrayD<f64> },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        /// im2col matrix cached at forward time for the backward pass.
        cols: Array2<f64>,
    },
    /// `(C,H,W)` -> `(H*W, C)` row-major over spatial positions.
    ChwToTokens(Var),
    UpsampleNearest2(Var),
    CropHw(Var, usize, usize),
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    /// `1 - (2*sum(p*t)+s) / (sum(p)+sum(t)+s)` against constant target.
    DiceLossFromProbs { probs: Var, target: ArrayD<f64>, smooth: f64 },
    Reshape(Var),
}

struct Node {
    val: Val,
    op: Op,
    needs_grad: bool,
}

/// Flat computation tape. Build forward, then call [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros of `shape` when the node was never reached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }

    /// Move the gradient for `v` out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn scalar(x: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), x)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, val: ArrayD<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => self.parents_of(&op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { val: Val::Own(val), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn parents_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::AddScalar(a, b)
            | Op::AddRowBias(a, b)
            | Op::Matmul(a, b)
            | Op::Dot(a, b)
            | Op::MatVec(a, b)
            | Op::ConcatChannels(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::GatherRows(a, _)
            | Op::Row(a, _)
            | Op::SliceCols(a, _, _)
            | Op::LogSumExp(a)
            | Op::RowsL2Normalize(a, _)
            | Op::ChwToTokens(a)
            | Op::UpsampleNearest2(a)
            | Op::CropHw(a, _, _)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatCols(vs) | Op::Concat1d(vs) => vs.clone(),
            Op::BceWithLogitsMean { logits, .. } => vec![*logits],
            Op::DiceLossFromProbs { probs, .. } => vec![*probs],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
        }
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        self.nodes[v.0].val.get()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.ndim(), 0, "scalar_value on non-scalar node");
        *a.first().expect("empty scalar node")
    }

    /// Grad-carrying input owned by the tape.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Grad-carrying input shared with external storage (no copy).
    pub fn leaf_shared(&mut self, value: Arc<ArrayD<f64>>) -> Var {
        self.nodes.push(Node { val: Val::Shared(value), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(scalar(x))
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).ndim(), 0, "mul_scalar expects 0-d scalar");
        let sv = self.scalar_value(s);
        let v = self.value(a).mapv(|x| x * sv);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).ndim(), 0, "add_scalar expects 0-d scalar");
        let sv = self.scalar_value(s);
        let v = self.value(a).mapv(|x| x + sv);
        self.push(v, Op::AddScalar(a, s))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        assert_eq!(xs.len(), 2, "add_row_bias expects matrix");
        assert_eq!(bs, vec![xs[1]], "add_row_bias bias length");
        let bv = self.value(b).clone();
        let mut v = self.value(x).clone();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        for mut row in v.view_mut().into_dimensionality::<Ix2>().unwrap().rows_mut() {
            row += &b1;
        }
        self.push(v, Op::AddRowBias(x, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_f);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = as2(self.value(a)).t().to_owned().into_dyn();
        self.push(v, Op::Transpose(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = as1(self.value(a));
        let bv = as1(self.value(b));
        assert_eq!(av.len(), bv.len(), "dot length");
        self.push(scalar(av.dot(&bv)), Op::Dot(a, b))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        let mv = as2(self.value(m));
        let vv = as1(self.value(v));
        assert_eq!(mv.ncols(), vv.len(), "matvec dims");
        let out = mv.dot(&vv).into_dyn();
        self.push(out, Op::MatVec(m, v))
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(scalar(self.value(a).sum()), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        self.push(scalar(self.value(a).sum() / n), Op::Mean(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = as2(self.value(a));
        let v = (m.sum_axis(Axis(0)) / m.nrows() as f64).into_dyn();
        self.push(v, Op::MeanRows(a))
    }

    // -- indexing / layout ---------------------------------------------------

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = as2(self.value(a));
        let mut out = Array2::zeros((idx.len(), m.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).assign(&m.row(i));
        }
        self.push(out.into_dyn(), Op::GatherRows(a, idx.to_vec()))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let m = as2(self.value(a));
        let v = m.row(i).to_owned().into_dyn();
        self.push(v, Op::Row(a, i))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = as2(self.value(a));
        let v = m.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<Array2<f64>> = parts.iter().map(|p| as2(self.value(*p)).to_owned()).collect();
        let rows = views[0].nrows();
        let total: usize = views.iter().map(|v| v.ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut at = 0;
        for v in &views {
            out.slice_mut(ndarray::s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(out.into_dyn(), Op::ConcatCols(parts.to_vec()))
    }

    /// Concatenate scalars and vectors into one 1-d vector.
    pub fn concat_1d(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            match v.ndim() {
                0 => data.push(*v.first().unwrap()),
                1 => data.extend(v.iter().copied()),
                d => panic!("concat_1d expects 0-d or 1-d parts, got {d}-d"),
            }
        }
        self.push(Array1::from(data).into_dyn(), Op::Concat1d(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(v, Op::Reshape(a))
    }

    // -- softmax family ------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = as2(self.value(a));
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let v = as1(self.value(a));
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = v.iter().map(|x| (x - mx).exp()).sum();
        self.push(scalar(mx + s.ln()), Op::LogSumExp(a))
    }

    pub fn rows_l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let m = as2(self.value(a));
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|x| x / n);
        }
        self.push(out.into_dyn(), Op::RowsL2Normalize(a, eps))
    }

    // -- losses --------------------------------------------------------------

    /// Mean over elements of `max(z,0) - z*t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &ArrayD<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce shape");
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(targets.iter())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(scalar(total / n), Op::BceWithLogitsMean { logits, targets: targets.clone() })
    }

    /// Soft Dice loss of probabilities against a constant mask.
    pub fn dice_loss(&mut self, probs: Var, target: &ArrayD<f64>, smooth: f64) -> Var {
        let p = self.value(probs);
        assert_eq!(p.shape(), target.shape(), "dice shape");
        let inter: f64 = p.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
        let denom = p.sum() + target.sum() + smooth;
        let v = 1.0 - (2.0 * inter + smooth) / denom;
        self.push(scalar(v), Op::DiceLossFromProbs { probs, target: target.clone(), smooth })
    }

    // -- spatial -------------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let x = self.value(input).view().into_dimensionality::<Ix3>().expect("conv input 3-d");
        let w = self.value(weight);
        assert_eq!(w.ndim(), 4, "conv weight 4-d");
        let k = w.shape()[2];
        let cols = im2col(&x, k, stride, pad);
        let out = conv2d_forward(&x, w, &as1(self.value(bias)), stride, pad, &cols);
        self.push(out.into_dyn(), Op::Conv2d { input, weight, bias, stride, pad, cols })
    }

    /// `(C,H,W)` feature map to `(H*W, C)` token matrix, row-major spatial.
    pub fn chw_to_tokens(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix3>().expect("chw 3-d");
        let (c, h, w) = x.dim();
        let mut out = Array2::zeros((h * w, c));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[hi * w + wi, ci]] = x[[ci, hi, wi]];
                }
            }
        }
        self.push(out.into_dyn(), Op::ChwToTokens(a))
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix3>().expect("upsample 3-d");
        let (c, h, w) = x.dim();
        let mut out = ndarray::Array3::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[[ci, hi, wi]];
                    out[[ci, 2 * hi, 2 * wi]] = v;
                    out[[ci, 2 * hi, 2 * wi + 1]] = v;
                    out[[ci, 2 * hi + 1, 2 * wi]] = v;
                    out[[ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
        self.push(out.into_dyn(), Op::UpsampleNearest2(a))
    }

    pub fn crop_hw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix3>().expect("crop 3-d");
        let v = x.slice(ndarray::s![.., ..h, ..w]).to_owned().into_dyn();
        self.push(v, Op::CropHw(a, h, w))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let xa = self.value(a).view().into_dimensionality::<Ix3>().expect("concat 3-d");
        let xb = self.value(b).view().into_dimensionality::<Ix3>().expect("concat 3-d");
        assert_eq!(xa.dim().1, xb.dim().1, "concat_channels height");
        assert_eq!(xa.dim().2, xb.dim().2, "concat_channels width");
        let v = ndarray::concatenate(Axis(0), &[xa.view(), xb.view()]).unwrap().into_dyn();
        self.push(v, Op::ConcatChannels(a, b))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix3>().expect("pool 3-d");
        let (c, h, w) = x.dim();
        let mut out = Array1::zeros(c);
        for ci in 0..c {
            out[ci] = x.index_axis(Axis(0), ci).sum() / (h * w) as f64;
        }
        self.push(out.into_dyn(), Op::GlobalAvgPool(a))
    }

    // -- backward ------------------------------------------------------------

    /// Backpropagate from a 0-d scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).ndim(), 0, "backward target must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            // Leaves keep their accumulated grad; everything else hands it down.
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], p: Var, delta: ArrayD<f64>) {
        if !self.nodes[p.0].needs_grad {
            return;
        }
        match &mut grads[p.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let val = self.nodes[i].val.get();
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * self.value(*b));
                self.accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.mapv(|x| x * c)),
            Op::MulScalar(a, s) => {
                let sv = self.scalar_value(*s);
                self.accumulate(grads, *a, g.mapv(|x| x * sv));
                let ds: f64 = g.iter().zip(self.value(*a).iter()).map(|(x, y)| x * y).sum();
                self.accumulate(grads, *s, scalar(ds));
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *s, scalar(g.sum()));
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let gm = as2(g);
                self.accumulate(grads, *b, gm.sum_axis(Axis(0)).into_dyn());
            }
            Op::Matmul(a, b) => {
                let gm = as2(g);
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                self.accumulate(grads, *a, gm.dot(&bv.t()).into_dyn());
                self.accumulate(grads, *b, av.t().dot(&gm).into_dyn());
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, as2(g).t().to_owned().into_dyn());
            }
            Op::Sigmoid(a) => {
                let d = g * &val.mapv(|y| y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g * &val.mapv(|y| 1.0 - y * y);
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g * &mask);
            }
            Op::SoftmaxRows(a) => {
                let y = as2(val);
                let gm = as2(g);
                let mut out = Array2::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = gm.row(r);
                    let s = gr.dot(&yr);
                    for c in 0..y.ncols() {
                        out[[r, c]] = yr[c] * (gr[c] - s);
                    }
                }
                self.accumulate(grads, *a, out.into_dyn());
            }
            Op::Dot(a, b) => {
                let gs = *g.first().unwrap();
                self.accumulate(grads, *a, self.value(*b).mapv(|x| x * gs));
                self.accumulate(grads, *b, self.value(*a).mapv(|x| x * gs));
            }
            Op::MatVec(m, v) => {
                let gv = as1(g);
                let mv = as2(self.value(*m));
                let vv = as1(self.value(*v));
                let mut dm = Array2::zeros(mv.raw_dim());
                for r in 0..mv.nrows() {
                    for c in 0..mv.ncols() {
                        dm[[r, c]] = gv[r] * vv[c];
                    }
                }
                self.accumulate(grads, *m, dm.into_dyn());
                self.accumulate(grads, *v, mv.t().dot(&gv).into_dyn());
            }
            Op::Sum(a) => {
                let gs = *g.first().unwrap();
                let d = ArrayD::from_elem(self.value(*a).raw_dim(), gs);
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gs = *g.first().unwrap() / n;
                let d = ArrayD::from_elem(self.value(*a).raw_dim(), gs);
                self.accumulate(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let m = as2(self.value(*a));
                let gv = as1(g);
                let r = m.nrows() as f64;
                let mut d = Array2::zeros(m.raw_dim());
                for mut row in d.rows_mut() {
                    row.assign(&gv.mapv(|x| x / r));
                }
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::GatherRows(a, idx) => {
                let m = as2(self.value(*a));
                let gm = as2(g);
                let mut d = Array2::zeros(m.raw_dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &gm.row(k);
                }
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::Row(a, i) => {
                let m = as2(self.value(*a));
                let gv = as1(g);
                let mut d = Array2::zeros(m.raw_dim());
                d.row_mut(*i).assign(&gv);
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::SliceCols(a, start, len) => {
                let m = as2(self.value(*a));
                let gm = as2(g);
                let mut d = Array2::zeros(m.raw_dim());
                d.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&gm);
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::ConcatCols(parts) => {
                let gm = as2(g);
                let mut at = 0;
                for p in parts {
                    let w = as2(self.value(*p)).ncols();
                    let d = gm.slice(ndarray::s![.., at..at + w]).to_owned().into_dyn();
                    self.accumulate(grads, *p, d);
                    at += w;
                }
            }
            Op::Concat1d(parts) => {
                let gv = as1(g);
                let mut at = 0;
                for p in parts {
                    let v = self.value(*p);
                    if v.ndim() == 0 {
                        self.accumulate(grads, *p, scalar(gv[at]));
                        at += 1;
                    } else {
                        let l = v.len();
                        let d = gv.slice(ndarray::s![at..at + l]).to_owned().into_dyn();
                        self.accumulate(grads, *p, d);
                        at += l;
                    }
                }
            }
            Op::LogSumExp(a) => {
                let x = as1(self.value(*a));
                let lse = *val.first().unwrap();
                let gs = *g.first().unwrap();
                let d = x.mapv(|xi| gs * (xi - lse).exp()).into_dyn();
                self.accumulate(grads, *a, d);
            }
            Op::RowsL2Normalize(a, eps) => {
                let x = as2(self.value(*a));
                let y = as2(val);
                let gm = as2(g);
                let mut d = Array2::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    let xr = x.row(r);
                    let n = xr.dot(&xr).sqrt();
                    let gr = gm.row(r);
                    if n > *eps {
                        let yr = y.row(r);
                        let s = gr.dot(&yr);
                        for c in 0..x.ncols() {
                            d[[r, c]] = (gr[c] - yr[c] * s) / n;
                        }
                    } else {
                        for c in 0..x.ncols() {
                            d[[r, c]] = gr[c] / eps;
                        }
                    }
                }
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let z = self.value(*logits);
                let n = z.len() as f64;
                let gs = *g.first().unwrap();
                let mut d = z.mapv(sigmoid_f);
                d -= targets;
                d.mapv_inplace(|x| x * gs / n);
                self.accumulate(grads, *logits, d);
            }
            Op::DiceLossFromProbs { probs, target, smooth } => {
                let p = self.value(*probs);
                let gs = *g.first().unwrap();
                let inter: f64 = p.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
                let num = 2.0 * inter + smooth;
                let den = p.sum() + target.sum() + smooth;
                // d/dp_i of -(num/den) = -(2*t_i*den - num) / den^2
                let mut out = ArrayD::zeros(p.raw_dim());
                for ((o, &t), _) in out.iter_mut().zip(target.iter()).zip(p.iter()) {
                    *o = gs * -(2.0 * t * den - num) / (den * den);
                }
                self.accumulate(grads, *probs, out);
            }
            Op::Conv2d { input, weight, bias, stride, pad, cols } => {
                let x = self.value(*input).view().into_dimensionality::<Ix3>().unwrap();
                let w = self.value(*weight);
                let (oc, ic, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let go = g.view().into_dimensionality::<Ix3>().unwrap();
                let (_, oh, ow) = go.dim();
                // flatten upstream grad to (OC, OH*OW)
                let mut gmat = Array2::zeros((oc, oh * ow));
                for c in 0..oc {
                    for h in 0..oh {
                        for wd in 0..ow {
                            gmat[[c, h * ow + wd]] = go[[c, h, wd]];
                        }
                    }
                }
                let wmat = w
                    .view()
                    .into_shape_with_order((oc, ic * k * k))
                    .unwrap()
                    .to_owned();
                // dW = g * cols^T, reshaped back to (OC, IC, k, k)
                let dw = gmat.dot(&cols.t());
                let dw4 = dw.into_shape_with_order(IxDyn(&[oc, ic, k, k])).unwrap();
                self.accumulate(grads, *weight, dw4);
                // db = row sums of g
                self.accumulate(grads, *bias, gmat.sum_axis(Axis(1)).into_dyn());
                // dX = col2im(W^T * g)
                let dcols = wmat.t().dot(&gmat);
                let dx = col2im(&dcols, x.dim(), k, *stride, *pad, (oh, ow));
                self.accumulate(grads, *input, dx.into_dyn());
            }
            Op::ChwToTokens(a) => {
                let x = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = x.dim();
                let gm = as2(g);
                let mut d = ndarray::Array3::zeros((c, h, w));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            d[[ci, hi, wi]] = gm[[hi * w + wi, ci]];
                        }
                    }
                }
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::UpsampleNearest2(a) => {
                let x = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = x.dim();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut d = ndarray::Array3::zeros((c, h, w));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            d[[ci, hi, wi]] = gv[[ci, 2 * hi, 2 * wi]]
                                + gv[[ci, 2 * hi, 2 * wi + 1]]
                                + gv[[ci, 2 * hi + 1, 2 * wi]]
                                + gv[[ci, 2 * hi + 1, 2 * wi + 1]];
                        }
                    }
                }
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::CropHw(a, h, w) => {
                let x = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut d = ndarray::Array3::zeros(x.dim());
                d.slice_mut(ndarray::s![.., ..*h, ..*w]).assign(&gv);
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.value(*a).shape()[0];
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let da = gv.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn();
                let db = gv.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::GlobalAvgPool(a) => {
                let x = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = x.dim();
                let gv = as1(g);
                let mut d = ndarray::Array3::zeros((c, h, w));
                for ci in 0..c {
                    d.index_axis_mut(Axis(0), ci).fill(gv[ci] / (h * w) as f64);
                }
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::Reshape(a) => {
                let d = g
                    .clone()
                    .into_shape_with_order(self.value(*a).raw_dim())
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
        }
    }
}

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d value")
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-d value")
}
