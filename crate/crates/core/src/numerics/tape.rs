//! Reverse-mode gradient tape over dense row-major matrices.
//!
//! The op set is closed: every op the losses need has a hand-written
//! vector-Jacobian product below, and nothing else can be recorded. Values are
//! always `f64`; single-precision training rounds parameters between steps
//! rather than inside a loss evaluation.

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a blocked multi-head attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnSpec {
    pub heads: usize,
    /// Query rows per block.
    pub q_len: usize,
    /// Key/value rows per block.
    pub k_len: usize,
    /// Keys and values are a single block shared by every query block.
    pub shared_kv: bool,
    pub scale: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    BlockMatMulT { a: Var, b: Var, len: usize },
    BlockTranspose { a: Var, len: usize },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Rows { a: Var, start: usize },
    Gather { a: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows { a: Var, probs: Mat },
    LayerNormRows { a: Var, xhat: Mat, inv_std: Vec<f64> },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    RowSum(Var),
    WeightedSum { a: Var, weights: Mat },
    Relu(Var),
    ClampMin { a: Var, floor: f64 },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<Mat> },
    RowBilinear { x: Var, t: Var, out_dim: usize },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients indexed by [`Var`]; `None` where no gradient reached the node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when it received none.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Matrix product; small operands skip the packed GEMM path, whose setup
/// dominates at these sizes.
fn mm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    let (m, k) = a.dim();
    let n = b.ncols();
    assert_eq!(k, b.nrows(), "matmul: inner dimensions");
    if m * n * k > 32_768 {
        return a.dot(&b);
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().expect("standard layout"), b.as_slice().expect("standard layout"));
    let mut out = vec![0.0; m * n];
    for (a_row, out_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
        for (&x, b_row) in a_row.iter().zip(b.chunks_exact(n.max(1))) {
            if x != 0.0 {
                for (o, &y) in out_row.iter_mut().zip(b_row) {
                    *o += x * y;
                }
            }
        }
    }
    Mat::from_shape_vec((m, n), out).expect("product shape")
}

fn softmax_rows_in_place(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Same value, cut off from the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = mm(self.value(a).view(), self.value(b).view());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = mm(self.value(a).view(), self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    /// Per block of `len` rows: `a_blk · b_blkᵀ`, stacked into `(blocks·len) × len`.
    pub fn block_matmul_t(&mut self, a: Var, b: Var, len: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.nrows(), bv.nrows());
        assert_eq!(av.nrows() % len, 0);
        let blocks = av.nrows() / len;
        let mut out = Mat::zeros((av.nrows(), len));
        for blk in 0..blocks {
            let r = blk * len..(blk + 1) * len;
            let prod = mm(av.slice(s![r.clone(), ..]), bv.slice(s![r.clone(), ..]).t());
            out.slice_mut(s![r, ..]).assign(&prod);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::BlockMatMulT { a, b, len }, ng)
    }

    /// Transpose each `len × len` block of a `(blocks·len) × len` matrix.
    pub fn block_transpose(&mut self, a: Var, len: usize) -> Var {
        let value = block_transpose(self.value(a), len);
        let ng = self.ng(a);
        self.push(value, Op::BlockTranspose { a, len }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().cloned().collect();
        let value = Mat::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Broadcast-add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + &self.value(row).row(0);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let shape = self.shape(a);
        let k = self.constant(Mat::from_elem(shape, c));
        self.add(a, k)
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Rows { a, start }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), index);
        let ng = self.ng(a);
        self.push(value, Op::Gather { a, index: index.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column mismatch in concat_rows");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        softmax_rows_in_place(&mut value);
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let probs = value.mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows { a, probs }, ng)
    }

    /// Per-row layer normalization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(xhat.clone(), Op::LayerNormRows { a, xhat, inv_std }, ng)
    }

    /// Scale each row to unit L2 norm. Zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(value, Op::L2NormalizeRows { a, norms }, ng)
    }

    /// `n × m → n × 1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// `Σ a ∘ weights` as a 1×1 node.
    pub fn weighted_sum(&mut self, a: Var, weights: Mat) -> Var {
        assert_eq!(self.value(a).dim(), weights.dim());
        let total = (self.value(a) * &weights).sum();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), total), Op::WeightedSum { a, weights }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let n = (shape.0 * shape.1) as f64;
        self.weighted_sum(a, Mat::from_elem(shape, 1.0 / n))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// `max(a, floor)` with zero gradient on the clamped side.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|v| v.max(floor));
        let ng = self.ng(a);
        self.push(value, Op::ClampMin { a, floor }, ng)
    }

    /// Blocked multi-head scaled dot-product attention.
    ///
    /// `q` holds `blocks·q_len` rows; `k`/`v` hold `blocks·k_len` rows, or
    /// `k_len` rows when `shared_kv`. Columns split evenly across heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(kv.ncols(), d, "attention: key width");
        assert_eq!(vv.ncols(), d, "attention: value width");
        assert_eq!(d % spec.heads, 0, "attention: heads must divide width");
        assert_eq!(qv.nrows() % spec.q_len, 0, "attention: query rows");
        let blocks = qv.nrows() / spec.q_len;
        let kv_rows = if spec.shared_kv { spec.k_len } else { blocks * spec.k_len };
        assert_eq!(kv.nrows(), kv_rows, "attention: key rows");
        assert_eq!(vv.nrows(), kv_rows, "attention: value rows");
        let dh = d / spec.heads;
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(blocks * spec.heads);
        for b in 0..blocks {
            let qr = b * spec.q_len..(b + 1) * spec.q_len;
            let kr = if spec.shared_kv { 0..spec.k_len } else { b * spec.k_len..(b + 1) * spec.k_len };
            for h in 0..spec.heads {
                let c = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qr.clone(), c.clone()]);
                let kh = kv.slice(s![kr.clone(), c.clone()]);
                let vh = vv.slice(s![kr.clone(), c.clone()]);
                let mut p = mm(qh, kh.t()) * spec.scale;
                softmax_rows_in_place(&mut p);
                out.slice_mut(s![qr.clone(), c]).assign(&mm(p.view(), vh));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, spec, probs }, ng)
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, ordered
    /// block-major then head.
    pub fn attention_probs(&self, node: Var) -> Option<&[Mat]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out[b, q] = Σ_j t[b, j] · x[b, j·out_dim + q]`
    pub fn row_bilinear(&mut self, x: Var, t: Var, out_dim: usize) -> Var {
        let (xv, tv) = (self.value(x), self.value(t));
        assert_eq!(xv.nrows(), tv.nrows());
        assert_eq!(xv.ncols(), tv.ncols() * out_dim);
        let mut out = Mat::zeros((xv.nrows(), out_dim));
        for b in 0..xv.nrows() {
            for j in 0..tv.ncols() {
                let tj = tv[[b, j]];
                for q in 0..out_dim {
                    out[[b, q]] += tj * xv[[b, j * out_dim + q]];
                }
            }
        }
        let ng = self.ng(x) || self.ng(t);
        self.push(out, Op::RowBilinear { x, t, out_dim }, ng)
    }

    /// Back-propagate from a 1×1 node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, mm(g.view(), self.value(*b).t()));
                acc(*b, mm(self.value(*a).t(), g.view()));
            }
            Op::MatMulT(a, b) => {
                acc(*a, mm(g.view(), self.value(*b).view()));
                acc(*b, mm(g.t(), self.value(*a).view()));
            }
            Op::BlockMatMulT { a, b, len } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Mat::zeros(av.dim());
                let mut gb = Mat::zeros(bv.dim());
                for blk in 0..av.nrows() / len {
                    let r = blk * len..(blk + 1) * len;
                    let gblk = g.slice(s![r.clone(), ..]);
                    ga.slice_mut(s![r.clone(), ..]).assign(&mm(gblk, bv.slice(s![r.clone(), ..])));
                    gb.slice_mut(s![r.clone(), ..]).assign(&mm(gblk.t(), av.slice(s![r, ..])));
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::BlockTranspose { a, len } => acc(*a, block_transpose(g, *len)),
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Reshape(a) => {
                let shape = self.value(*a).dim();
                let flat: Vec<f64> = g.iter().cloned().collect();
                acc(*a, Mat::from_shape_vec(shape, flat).expect("reshape grad"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Rows { a, start } => {
                let mut ga = Mat::zeros(self.value(*a).dim());
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, ga);
            }
            Op::Gather { a, index } => {
                let mut ga = Mat::zeros(self.value(*a).dim());
                for (r, &src) in index.iter().enumerate() {
                    let mut dst = ga.row_mut(src);
                    dst += &g.row(r);
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    acc(*p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g * y;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yrow, |gr, &yr| *gr -= dot * yr);
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows { a, probs } => {
                let mut ga = g.clone();
                for (mut row, prow) in ga.rows_mut().into_iter().zip(probs.rows()) {
                    let total = row.sum();
                    row.zip_mut_with(&prow, |gr, &pr| *gr -= total * pr);
                }
                acc(*a, ga);
            }
            Op::LayerNormRows { a, xhat, inv_std } => {
                let n = xhat.ncols() as f64;
                let mut ga = Mat::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mean_g = gr.sum() / n;
                    let mean_gx = gr.dot(&xr) / n;
                    for c in 0..xhat.ncols() {
                        ga[[r, c]] = inv_std[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                    }
                }
                acc(*a, ga);
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = &node.value;
                let mut ga = Mat::zeros(y.dim());
                for r in 0..y.nrows() {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let dot = gr.dot(&yr);
                    for c in 0..y.ncols() {
                        ga[[r, c]] = (gr[c] - dot * yr[c]) / norms[r];
                    }
                }
                acc(*a, ga);
            }
            Op::RowSum(a) => {
                let shape = self.value(*a).dim();
                let mut ga = Mat::zeros(shape);
                for (mut row, gv) in ga.rows_mut().into_iter().zip(g.column(0)) {
                    row.fill(*gv);
                }
                acc(*a, ga);
            }
            Op::WeightedSum { a, weights } => acc(*a, weights * g[[0, 0]]),
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(*a), |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0
                    }
                });
                acc(*a, ga);
            }
            Op::ClampMin { a, floor } => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(*a), |gv, &x| {
                    if x < *floor {
                        *gv = 0.0
                    }
                });
                acc(*a, ga);
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dh = d / spec.heads;
                let blocks = qv.nrows() / spec.q_len;
                let mut gq = Mat::zeros(qv.dim());
                let mut gk = Mat::zeros(kv.dim());
                let mut gv = Mat::zeros(vv.dim());
                for b in 0..blocks {
                    let qr = b * spec.q_len..(b + 1) * spec.q_len;
                    let kr = if spec.shared_kv { 0..spec.k_len } else { b * spec.k_len..(b + 1) * spec.k_len };
                    for h in 0..spec.heads {
                        let c = h * dh..(h + 1) * dh;
                        let p = &probs[b * spec.heads + h];
                        let go = g.slice(s![qr.clone(), c.clone()]);
                        let vh = vv.slice(s![kr.clone(), c.clone()]);
                        let mut gvs = gv.slice_mut(s![kr.clone(), c.clone()]);
                        gvs += &mm(p.t(), go);
                        let gp = mm(go, vh.t());
                        let mut gs = &gp * p;
                        for (mut row, prow) in gs.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = row.sum();
                            row.zip_mut_with(&prow, |x, &pr| *x -= dot * pr);
                        }
                        gs *= spec.scale;
                        let kh = kv.slice(s![kr.clone(), c.clone()]);
                        let qh = qv.slice(s![qr.clone(), c.clone()]);
                        let mut gqs = gq.slice_mut(s![qr.clone(), c.clone()]);
                        gqs += &mm(gs.view(), kh);
                        let mut gks = gk.slice_mut(s![kr.clone(), c.clone()]);
                        gks += &mm(gs.t(), qh);
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::RowBilinear { x, t, out_dim } => {
                let (xv, tv) = (self.value(*x), self.value(*t));
                let mut gx = Mat::zeros(xv.dim());
                let mut gt = Mat::zeros(tv.dim());
                for b in 0..xv.nrows() {
                    for j in 0..tv.ncols() {
                        let tj = tv[[b, j]];
                        let mut acc_t = 0.0;
                        for q in 0..*out_dim {
                            let gbq = g[[b, q]];
                            gx[[b, j * out_dim + q]] = tj * gbq;
                            acc_t += gbq * xv[[b, j * out_dim + q]];
                        }
                        gt[[b, j]] = acc_t;
                    }
                }
                acc(*x, gx);
                acc(*t, gt);
            }
        }
    }
}

fn block_transpose(a: &Mat, len: usize) -> Mat {
    assert_eq!(a.ncols(), len);
    assert_eq!(a.nrows() % len, 0);
    let mut out = Mat::zeros(a.dim());
    for blk in 0..a.nrows() / len {
        let r = blk * len..(blk + 1) * len;
        out.slice_mut(s![r.clone(), ..]).assign(&a.slice(s![r, ..]).t());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Mat) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = build(&mut tape, x);
        let grads = tape.backward(y);
        let analytic = grads.get_or_zeros(x, x0.dim());
        let h = 1e-6;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let eval = |m: Mat| {
                let mut t = Tape::new();
                let xv = t.param(m);
                let out = build(&mut t, xv);
                t.scalar(out)
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "idx {idx}: fd {fd} vs analytic {an}");
        }
    }

    fn probe(rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |(r, c)| ((r * 7 + c * 3) as f64 * 0.37).sin())
    }

    #[test]
    fn layer_norm_grad() {
        fd_check(
            |t, x| {
                let y = t.layer_norm_rows(x, 1e-5);
                t.weighted_sum(y, probe(3, 4))
            },
            probe(3, 4) * 2.0 + 0.3,
        );
    }

    #[test]
    fn log_softmax_and_l2_grad() {
        fd_check(
            |t, x| {
                let n = t.l2_normalize_rows(x);
                let y = t.log_softmax_rows(n);
                t.weighted_sum(y, probe(2, 5))
            },
            probe(2, 5) + 0.1,
        );
    }

    #[test]
    fn attention_grad_all_inputs() {
        let spec = AttnSpec { heads: 2, q_len: 3, k_len: 2, shared_kv: false, scale: 0.7 };
        fd_check(
            move |t, x| {
                let q = t.rows(x, 0, 6);
                let k = t.rows(x, 6, 4);
                let v = t.rows(x, 10, 4);
                let o = t.attention(q, k, v, spec);
                t.weighted_sum(o, probe(6, 4))
            },
            probe(14, 4),
        );
    }

    #[test]
    fn shared_attention_and_block_ops_grad() {
        let spec = AttnSpec { heads: 1, q_len: 2, k_len: 3, shared_kv: true, scale: 1.3 };
        fd_check(
            move |t, x| {
                let q = t.rows(x, 0, 4);
                let kv = t.rows(x, 4, 3);
                let o = t.attention(q, kv, kv, spec);
                let sim = t.block_matmul_t(q, o, 2);
                let tr = t.block_transpose(sim, 2);
                let r = t.reshape(tr, 2, 4);
                t.weighted_sum(r, probe(2, 4))
            },
            probe(7, 3),
        );
    }

    #[test]
    fn bilinear_grad() {
        fd_check(
            |t, x| {
                let xs = t.rows(x, 0, 2);
                let tail = t.rows(x, 2, 2);
                let tail = t.reshape(tail, 4, 2);
                let ts = t.rows(tail, 0, 2);
                let out = t.row_bilinear(xs, ts, 2);
                t.weighted_sum(out, probe(2, 2))
            },
            probe(4, 4),
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(array![[1000.0, 1001.0], [-5.0, 3.0]]);
        let y = t.softmax_rows(x);
        for row in t.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
