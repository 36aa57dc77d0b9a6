//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the recipe
//! for its backward rule. Node ids grow monotonically, so the tape is always
//! in topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Gradients of trainable leaves accumulate across `backward` calls until
//! [`Tape::zero_grad`] is called.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::float::{self, Float};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, Float),
    Exp(Var),
    Log(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows(Var),
    MaskedLseRows(Var, Vec<Float>),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    WeightedSum(Var, Vec<Float>),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn numeric(op: &'static str, detail: &str) -> Error {
    Error::Numeric {
        op,
        detail: detail.into(),
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(numeric(op, "non-finite input"))
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

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; its gradient is kept after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[M×K] · b[K×P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, p) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * p];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, p);
        let value = Tensor::new(&[m, p], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a[M×K] · b[P×K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul_nt")?;
        let (p, k2) = tb.dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * p];
        gemm_nt_acc(ta.data(), tb.data(), &mut out, m, k, p);
        let value = Tensor::new(&[m, p], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(Float, Float) -> Float,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector `b[P]` to every row of `x[.., P]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let p = tb.numel();
        if tb.rank() != 1 || tx.shape().last() != Some(&p) {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        if p > 0 {
            for row in data.chunks_mut(p) {
                for (v, &bv) in row.iter_mut().zip(tb.data()) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    pub fn scalar_mul(&mut self, x: Var, s: Float) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(tx.shape(), data).expect("same shape");
        self.unary(x, value, Op::ScalarMul(x, s))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(numeric("exp", "NaN input"));
        }
        let data = tx.data().iter().map(|&v| float::exp(v)).collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.unary(x, value, Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_finite("log", tx)?;
        if tx.data().iter().any(|&v| v <= 0.0) {
            return Err(numeric("log", "non-positive input"));
        }
        let data = tx.data().iter().map(|&v| float::ln(v)).collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.unary(x, value, Op::Log(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(tx.shape(), data).expect("same shape");
        self.unary(x, value, Op::Relu(x))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_finite("softmax_rows", tx)?;
        let cols = tx.shape().last().copied().unwrap_or(1);
        let mut data = tx.data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.unary(x, value, Op::SoftmaxRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = float::sum(self.value(x).data());
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(numeric("mean", "empty tensor"));
        }
        let s = (float::sum(tx.data()) as f64 / tx.numel() as f64) as Float;
        Ok(self.unary(x, Tensor::scalar(s), Op::Mean(x)))
    }

    /// `Σ_k w_k x_k` over the flattened tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<Float>) -> Result<Var> {
        let tx = self.value(x);
        if weights.len() != tx.numel() {
            return Err(Error::Shape {
                op: "weighted_sum",
                left: tx.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = float::dot(tx.data(), &weights);
        Ok(self.unary(x, Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    // ---- row-structured ops ---------------------------------------------

    /// Scales every row of `x[N×D]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2("l2_normalize_rows")?;
        let mut data = tx.data().to_vec();
        for i in 0..n {
            let row = &mut data[i * d..(i + 1) * d];
            let norm = float::norm(row);
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateRow { row: i });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let value = Tensor::new(&[n, d], data)?;
        Ok(self.unary(x, value, Op::L2NormalizeRows(x)))
    }

    /// Per-row `log Σ_k c_k exp(x_k)` with non-negative multiplicities `c`
    /// (`c_k = 0` excludes an entry), max-subtracted. Output shape `[R]`.
    ///
    /// Every row must have at least one positive multiplicity.
    pub fn masked_logsumexp_rows(&mut self, x: Var, counts: Vec<Float>) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("masked_logsumexp_rows")?;
        if counts.len() != r * c {
            return Err(Error::Shape {
                op: "masked_logsumexp_rows",
                left: vec![r, c],
                right: vec![counts.len()],
            });
        }
        if counts.iter().any(|&k| !(k >= 0.0) || !k.is_finite()) {
            return Err(numeric("masked_logsumexp_rows", "negative multiplicity"));
        }
        check_finite("masked_logsumexp_rows", tx)?;
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let m = &counts[i * c..(i + 1) * c];
            out.push(masked_lse(row, m).ok_or_else(|| {
                numeric("masked_logsumexp_rows", "row with empty mask")
            })?);
        }
        let value = Tensor::new(&[r], out)?;
        Ok(self.unary(x, value, Op::MaskedLseRows(x, counts)))
    }

    /// Picks flat elements of `x`. Output shape `[indices.len()]`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let mut out = Vec::with_capacity(indices.len());
        for &i in &indices {
            out.push(*tx.data().get(i).ok_or(Error::IndexOutOfRange {
                what: "gather",
                index: i,
                bound: tx.numel(),
            })?);
        }
        let value = Tensor::new(&[indices.len()], out)?;
        Ok(self.unary(x, value, Op::Gather(x, indices)))
    }

    /// Rows of `x[R×C]` in the given order (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("select_rows")?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            if i >= r {
                return Err(Error::IndexOutOfRange {
                    what: "select_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(&[rows.len(), c], out)?;
        Ok(self.unary(x, value, Op::SelectRows(x, rows)))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Shape {
            op: "concat_rows",
            left: vec![],
            right: vec![],
        })?;
        let (_, c) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            let (r, c2) = tp.dims2("concat_rows")?;
            if c2 != c {
                return Err(shape_err("concat_rows", self.value(first), tp));
            }
            rows += r;
            out.extend_from_slice(tp.data());
        }
        let value = Tensor::new(&[rows, c], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    // ---- convolution ----------------------------------------------------

    /// 2-D convolution. `input[B,C,H,W]`, `weight[O,C,KH,KW]`, `bias[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(input), self.value(weight));
        let geo = ConvGeometry::new(tx, tw, spec)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geo.o] {
                return Err(shape_err("conv2d", tw, self.value(b)));
            }
        }
        let mut out = vec![0.0; geo.b * geo.o * geo.l()];
        let mut col = vec![0.0; geo.ckk() * geo.l()];
        for bi in 0..geo.b {
            geo.im2col(&tx.data()[bi * geo.in_size()..(bi + 1) * geo.in_size()], &mut col);
            let ob = &mut out[bi * geo.o * geo.l()..(bi + 1) * geo.o * geo.l()];
            gemm_acc(tw.data(), &col, ob, geo.o, geo.ckk(), geo.l());
            if let Some(b) = bias {
                let tb = self.value(b);
                for (oc, chunk) in ob.chunks_mut(geo.l()).enumerate() {
                    let bv = tb.data()[oc];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::new(&[geo.b, geo.o, geo.ho, geo.wo], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    /// Mean over the spatial dimensions: `[B,C,H,W] → [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [b, c, h, w] = tx.shape()[..] else {
            return Err(Error::Shape {
                op: "global_avg_pool",
                left: tx.shape().to_vec(),
                right: vec![],
            });
        };
        let hw = h * w;
        if hw == 0 {
            return Err(numeric("global_avg_pool", "empty spatial extent"));
        }
        let out = tx
            .data()
            .chunks(hw)
            .map(|ch| (float::sum(ch) as f64 / hw as f64) as Float)
            .collect();
        let value = Tensor::new(&[b, c], out)?;
        Ok(self.unary(x, value, Op::GlobalAvgPool(x)))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar `loss` into every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        if !self.requires_grad(loss) {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<Float>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let val = |v: Var| &nodes[v.0].value;
        // Accumulate into an input's gradient buffer, allocating on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [Float])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let p = val(*b).shape()[1];
                acc(*a, &mut |ga| gemm_nt_acc(g, val(*b).data(), ga, m, p, k));
                acc(*b, &mut |gb| gemm_tn_acc(val(*a).data(), g, gb, m, k, p));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let p = val(*b).shape()[0];
                acc(*a, &mut |ga| gemm_acc(g, val(*b).data(), ga, m, p, k));
                acc(*b, &mut |gb| gemm_tn_acc(g, val(*a).data(), gb, m, p, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let p = val(*b).numel();
                acc(*b, &mut |gb| {
                    if p > 0 {
                        for row in g.chunks(p) {
                            add_into(gb, row);
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((d, gi), bv) in ga.iter_mut().zip(g).zip(tb) {
                        *d += gi * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, gi), av) in gb.iter_mut().zip(g).zip(ta) {
                        *d += gi * av;
                    }
                });
            }
            Op::ScalarMul(x, s) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s));
            }
            Op::Exp(x) => {
                acc(*x, &mut |gx| {
                    for ((d, gi), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y;
                    }
                });
            }
            Op::Log(x) => {
                let tx = val(*x).data();
                acc(*x, &mut |gx| {
                    for ((d, gi), xv) in gx.iter_mut().zip(g).zip(tx) {
                        *d += gi / xv;
                    }
                });
            }
            Op::Relu(x) => {
                let tx = val(*x).data();
                acc(*x, &mut |gx| {
                    for ((d, gi), xv) in gx.iter_mut().zip(g).zip(tx) {
                        if *xv > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let cols = out.shape().last().copied().unwrap_or(1);
                acc(*x, &mut |gx| {
                    if cols == 0 {
                        return;
                    }
                    for ((dr, gr), sr) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        let inner = float::dot(gr, sr);
                        for ((d, gi), si) in dr.iter_mut().zip(gr).zip(sr) {
                            *d += si * (gi - inner);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as Float;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::WeightedSum(x, w) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(w).for_each(|(d, wi)| *d += g[0] * wi));
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::L2NormalizeRows(x) => {
                let tx = val(*x);
                let d = tx.shape()[1];
                acc(*x, &mut |gx| {
                    if d == 0 {
                        return;
                    }
                    for (((dr, gr), yr), xr) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(out.data().chunks(d))
                        .zip(tx.data().chunks(d))
                    {
                        let norm = float::norm(xr);
                        let proj = float::dot(yr, gr);
                        for ((dv, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += (gi - yi * proj) / norm;
                        }
                    }
                });
            }
            Op::MaskedLseRows(x, mask) => {
                let tx = val(*x);
                let c = tx.shape()[1];
                acc(*x, &mut |gx| {
                    if c == 0 {
                        return;
                    }
                    for (i, (dr, xr)) in gx.chunks_mut(c).zip(tx.data().chunks(c)).enumerate() {
                        let lse = out.data()[i];
                        let m = &mask[i * c..(i + 1) * c];
                        for ((dv, &xv), &cnt) in dr.iter_mut().zip(xr).zip(m) {
                            if cnt > 0.0 {
                                *dv += g[i] * cnt * float::exp(xv - lse);
                            }
                        }
                    }
                });
            }
            Op::Gather(x, idx) => {
                acc(*x, &mut |gx| {
                    for (gi, &i) in g.iter().zip(idx) {
                        gx[i] += gi;
                    }
                });
            }
            Op::SelectRows(x, rows) => {
                let c = val(*x).shape()[1];
                acc(*x, &mut |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    let slice = &g[offset..offset + n];
                    acc(p, &mut |gp| add_into(gp, slice));
                    offset += n;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (tx, tw) = (val(*input), val(*weight));
                let geo = ConvGeometry::new(tx, tw, *spec).expect("validated in forward");
                let (ol, l, ckk) = (geo.o * geo.l(), geo.l(), geo.ckk());
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for gbatch in g.chunks(ol) {
                            for (oc, ch) in gbatch.chunks(l).enumerate() {
                                gb[oc] += ch.iter().sum::<Float>();
                            }
                        }
                    });
                }
                let mut col = vec![0.0; ckk * l];
                if nodes[weight.0].requires_grad {
                    acc(*weight, &mut |gw| {
                        for bi in 0..geo.b {
                            geo.im2col(&tx.data()[bi * geo.in_size()..(bi + 1) * geo.in_size()], &mut col);
                            gemm_nt_acc(&g[bi * ol..(bi + 1) * ol], &col, gw, geo.o, l, ckk);
                        }
                    });
                }
                acc(*input, &mut |gx| {
                    for bi in 0..geo.b {
                        col.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn_acc(tw.data(), &g[bi * ol..(bi + 1) * ol], &mut col, geo.o, ckk, l);
                        geo.col2im_add(&col, &mut gx[bi * geo.in_size()..(bi + 1) * geo.in_size()]);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                acc(*x, &mut |gx| {
                    for (dch, gi) in gx.chunks_mut(hw).zip(g) {
                        let v = gi / hw as Float;
                        dch.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [Float], src: &[Float]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Max-subtracted softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [Float]) {
    let m = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = float::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `log Σ_k counts[k]·exp(row[k])`; `None` if every count is zero.
pub fn masked_lse(row: &[Float], counts: &[Float]) -> Option<Float> {
    let m = row
        .iter()
        .zip(counts)
        .filter(|(_, &k)| k > 0.0)
        .map(|(&v, _)| v)
        .fold(Float::NEG_INFINITY, Float::max);
    if m == Float::NEG_INFINITY {
        return None;
    }
    let s: f64 = row
        .iter()
        .zip(counts)
        .filter(|(_, &k)| k > 0.0)
        .map(|(&v, &k)| k as f64 * libm::exp((v - m) as f64))
        .sum();
    Some((m as f64 + libm::log(s)) as Float)
}

struct ConvGeometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeometry {
    fn new(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Result<Self> {
        let ([b, c, h, wd], [o, c2, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(shape_err("conv2d", x, w));
        };
        let (b, c, h, wd, o, c2, kh, kw) = (*b, *c, *h, *wd, *o, *c2, *kh, *kw);
        let s = spec.stride;
        let p = spec.padding;
        if c != c2 || s == 0 || kh == 0 || kw == 0 || h + 2 * p < kh || wd + 2 * p < kw {
            return Err(shape_err("conv2d", x, w));
        }
        Ok(Self {
            b,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho: (h + 2 * p - kh) / s + 1,
            wo: (wd + 2 * p - kw) / s + 1,
            spec,
        })
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn in_size(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Visits `(col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let l = self.l();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    for oh in 0..self.ho {
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        for ow in 0..self.wo {
                            let iw = ow as isize * s + kj as isize - p;
                            if iw < 0 || iw >= self.w as isize {
                                continue;
                            }
                            f(
                                r * l + oh * self.wo + ow,
                                (c * self.h + ih as usize) * self.w + iw as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[Float], col: &mut [Float]) {
        col.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|ci, xi| col[ci] = x[xi]);
    }

    fn col2im_add(&self, col: &[Float], dx: &mut [Float]) {
        self.for_each_tap(|ci, xi| dx[xi] += col[ci]);
    }
}
