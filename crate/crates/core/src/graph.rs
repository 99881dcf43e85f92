//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the
//! information its backward pass needs. [`Graph::backward`] walks the
//! tape once in reverse order, so each recorded op is visited exactly
//! once. Parameters enter the tape as leaves through [`Graph::param`];
//! their gradients are added back into the [`ParamStore`] by
//! [`Gradients::accumulate`].
//!
//! Elementwise binary ops broadcast only over leading dimensions: the
//! right operand's shape must equal the left operand's shape or a suffix
//! of it (a bias row added to every row of a matrix, for instance).

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanAxis1(Var),
    RowSum(Var),
    SelectRows(Var, Vec<usize>),
    Tokenize {
        x: Var,
        value_emb: Var,
        id_emb: Var,
        cls: Option<Var>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

fn rank3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(op, s, &[0, 0, 0])),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).tensor.clone();
        self.push(value, Op::Param(id))
    }

    /// A constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Batched matmul `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k) = rank3("bmm", self.value(a))?;
        let (batch2, r, c) = rank3("bmm", self.value(b))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if batch != batch2 || k != kb {
            return Err(Error::shape("bmm", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let a_b = &ad[i * m * k..(i + 1) * m * k];
                let b_b = &bd[i * k * n..(i + 1) * k * n];
                let o = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt_acc(a_b, b_b, o, m, k, n);
                } else {
                    gemm_acc(a_b, b_b, o, m, k, n);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm { a, b, trans_b },
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcasts(av.shape(), bv.shape()) {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let bd = bv.data();
        let bl = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    /// Softmax over the last dimension, with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.last_dim();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data).unwrap();
        self.push(t, Op::Softmax(a))
    }

    /// Normalizes each row over the last dimension (population variance,
    /// epsilon [`LAYER_NORM_EPS`]) then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + s[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", self.shape(a), shape))?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a)))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rank2("slice_cols", self.value(a))?;
        if start + len > c {
            return Err(Error::shape("slice_cols", self.shape(a), &[start + len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x: a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (r, _) = rank2("concat_cols", self.value(parts[0]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = rank2("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Mean over the middle axis: `[a,b,c] -> [a,c]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let (a, b, c) = rank3("mean_axis1", self.value(x))?;
        let src = self.value(x).data();
        let mut data = vec![0.0; a * c];
        for i in 0..a {
            for j in 0..b {
                let row = &src[(i * b + j) * c..(i * b + j + 1) * c];
                for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / b as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::new(vec![a, c], data)?, Op::MeanAxis1(x)))
    }

    /// Sum over columns: `[r,c] -> [r,1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("row_sum", self.value(x))?;
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .map(|row| row.iter().sum())
            .collect();
        Ok(self.push(Tensor::new(vec![r, 1], data)?, Op::RowSum(x)))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = rank2("select_rows", self.value(x))?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::shape("select_rows", self.shape(x), &[i]));
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], data)?,
            Op::SelectRows(x, rows.to_vec()),
        ))
    }

    /// Lifts each covariate of `x [n,d]` to a token of width `D`:
    /// `token_j = x_j * value_emb[j] + id_emb[j]`, with an optional
    /// `cls [D]` token prepended. Output is `[n*(d+cls), D]`.
    pub fn tokenize(
        &mut self,
        x: Var,
        value_emb: Var,
        id_emb: Var,
        cls: Option<Var>,
    ) -> Result<Var> {
        let (n, d) = rank2("tokenize", self.value(x))?;
        let (dv, width) = rank2("tokenize", self.value(value_emb))?;
        if dv != d {
            return Err(Error::shape("tokenize", self.shape(x), self.shape(value_emb)));
        }
        if self.shape(id_emb) != [d, width] {
            return Err(Error::shape("tokenize", self.shape(value_emb), self.shape(id_emb)));
        }
        if let Some(c) = cls {
            if self.shape(c) != [width] {
                return Err(Error::shape("tokenize", &[width], self.shape(c)));
            }
        }
        let off = usize::from(cls.is_some());
        let s = d + off;
        let mut data = vec![0.0; n * s * width];
        let xv = self.value(x).data();
        let ve = self.value(value_emb).data();
        let ie = self.value(id_emb).data();
        for i in 0..n {
            if let Some(c) = cls {
                data[i * s * width..(i * s + 1) * width].copy_from_slice(self.value(c).data());
            }
            for j in 0..d {
                let xij = xv[i * d + j];
                let base = (i * s + j + off) * width;
                for k in 0..width {
                    data[base + k] = xij * ve[j * width + k] + ie[j * width + k];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![n * s, width], data)?,
            Op::Tokenize {
                x,
                value_emb,
                id_emb,
                cls,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[]));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward, then adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate(self, store);
        Ok(grads)
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                gemm_nt_acc(gd, bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                gemm_tn_acc(av.data(), gd, &mut db, m, k, n);
                acc_data(grads, *a, av.shape(), da);
                acc_data(grads, *b, bv.shape(), db);
            }
            Op::Bmm { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for t in 0..batch {
                    let g_b = &gd[t * m * n..(t + 1) * m * n];
                    let a_b = &av.data()[t * m * k..(t + 1) * m * k];
                    let b_b = &bv.data()[t * k * n..(t + 1) * k * n];
                    let da_b = &mut da[t * m * k..(t + 1) * m * k];
                    let db_b = &mut db[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        gemm_acc(g_b, b_b, da_b, m, n, k);
                        gemm_tn_acc(g_b, a_b, db_b, m, n, k);
                    } else {
                        gemm_nt_acc(g_b, b_b, da_b, m, n, k);
                        gemm_tn_acc(a_b, g_b, db_b, m, k, n);
                    }
                }
                acc_data(grads, *a, av.shape(), da);
                acc_data(grads, *b, bv.shape(), db);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc_data(grads, *a, g.shape(), gd.to_vec());
                let bv = self.value(*b);
                let mut db = vec![0.0; bv.len()];
                let bl = db.len();
                for (idx, &v) in gd.iter().enumerate() {
                    db[idx % bl] += sign * v;
                }
                acc_data(grads, *b, bv.shape(), db);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let bl = bv.len();
                let (ad, bd) = (av.data(), bv.data());
                let da = gd.iter().enumerate().map(|(idx, &v)| v * bd[idx % bl]).collect();
                let mut db = vec![0.0; bl];
                for (idx, &v) in gd.iter().enumerate() {
                    db[idx % bl] += v * ad[idx];
                }
                acc_data(grads, *a, av.shape(), da);
                acc_data(grads, *b, bv.shape(), db);
            }
            Op::Scale(a, c) => {
                acc_data(grads, *a, g.shape(), gd.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) => acc_data(grads, *a, g.shape(), gd.to_vec()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&v, &xi)| if xi > 0.0 { v } else { 0.0 })
                    .collect();
                acc_data(grads, *a, g.shape(), d);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&v, &yi)| v * (1.0 - yi * yi)).collect();
                acc_data(grads, *a, g.shape(), d);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&v, &xi)| 2.0 * v * xi).collect();
                acc_data(grads, *a, g.shape(), d);
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&v, &yi)| 0.5 * v / yi).collect();
                acc_data(grads, *a, g.shape(), d);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc_data(grads, *a, g.shape(), d);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gainv = self.value(*gain).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; d];
                let mut dshift = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                        dshift[j] += gr[j];
                        dxhat[j] = gr[j] * gainv[j];
                        sum_dh += dxhat[j];
                        sum_dh_h += dxhat[j] * hr[j];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] = is / df * (df * dxhat[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                acc_data(grads, *x, g.shape(), dx);
                acc_data(grads, *gain, &[d], dgain);
                acc_data(grads, *shift, &[d], dshift);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                acc_data(grads, *a, &shape, gd.to_vec());
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = gd[j * r + i];
                    }
                }
                acc_data(grads, *a, &[r, c], d);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.value.shape()[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc_data(grads, *x, &[r, c], d);
            }
            Op::ConcatCols(parts) => {
                let r = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut d = Vec::with_capacity(r * w);
                    for i in 0..r {
                        d.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                    }
                    acc_data(grads, p, &[r, w], d);
                    off += w;
                }
            }
            Op::MeanAxis1(x) => {
                let shape = self.shape(*x).to_vec();
                let (a, b, c) = (shape[0], shape[1], shape[2]);
                let inv = 1.0 / b as f64;
                let mut d = vec![0.0; a * b * c];
                for i in 0..a {
                    for j in 0..b {
                        for k in 0..c {
                            d[(i * b + j) * c + k] = gd[i * c + k] * inv;
                        }
                    }
                }
                acc_data(grads, *x, &shape, d);
            }
            Op::RowSum(x) => {
                let shape = self.shape(*x).to_vec();
                let c = shape[1];
                let d = (0..shape[0] * c).map(|idx| gd[idx / c]).collect();
                acc_data(grads, *x, &shape, d);
            }
            Op::SelectRows(x, rows) => {
                let shape = self.shape(*x).to_vec();
                let c = shape[1];
                let mut d = vec![0.0; shape[0] * c];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[k * c + j];
                    }
                }
                acc_data(grads, *x, &shape, d);
            }
            Op::Tokenize {
                x,
                value_emb,
                id_emb,
                cls,
            } => {
                let xv = self.value(*x);
                let (n, dfeat) = (xv.shape()[0], xv.shape()[1]);
                let width = self.shape(*value_emb)[1];
                let off = usize::from(cls.is_some());
                let s = dfeat + off;
                let ve = self.value(*value_emb).data();
                let mut dx = vec![0.0; n * dfeat];
                let mut dve = vec![0.0; dfeat * width];
                let mut die = vec![0.0; dfeat * width];
                let mut dcls = vec![0.0; width];
                for i in 0..n {
                    if cls.is_some() {
                        let gr = &gd[i * s * width..(i * s + 1) * width];
                        for (o, v) in dcls.iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                    for j in 0..dfeat {
                        let xij = xv.data()[i * dfeat + j];
                        let gr = &gd[(i * s + j + off) * width..(i * s + j + off + 1) * width];
                        let mut dot = 0.0;
                        for k in 0..width {
                            dve[j * width + k] += gr[k] * xij;
                            die[j * width + k] += gr[k];
                            dot += gr[k] * ve[j * width + k];
                        }
                        dx[i * dfeat + j] = dot;
                    }
                }
                acc_data(grads, *x, &[n, dfeat], dx);
                acc_data(grads, *value_emb, &[dfeat, width], dve);
                acc_data(grads, *id_emb, &[dfeat, width], die);
                if let Some(c) = cls {
                    acc_data(grads, *c, &[width], dcls);
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).len();
                acc_data(grads, *a, &shape, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).len();
                acc_data(grads, *a, &shape, vec![gd[0] / n as f64; n]);
            }
        }
    }
}

fn acc_data(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data).unwrap()),
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate(&self, graph: &Graph, store: &mut ParamStore) {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }
}

/// Forward-only row softmax of a plain tensor (last dimension).
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let s = g.softmax(v);
    g.value(s).clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(Tensor::eye(2));
        let out = g.matmul(a, i).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_examples() {
        let z = t2(&[&[0.0, 0.0], &[1000.0, 0.0]]);
        let s = softmax_rows(&z);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.row(1)[0] - 1.0).abs() < 1e-9 && s.row(1)[1].abs() < 1e-9);

        // exp(1), exp(2), exp(3) normalized, computed by hand.
        let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let total: f64 = e.iter().sum();
        let s = softmax_rows(&t2(&[&[1.0, 2.0, 3.0]]));
        for (j, expected) in [0.0900, 0.2447, 0.6652].iter().enumerate() {
            assert!((s.row(0)[j] - expected).abs() < 5e-5);
            assert!((s.row(0)[j] - e[j] / total).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_only_over_leading_dims() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let ok = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let bad = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.add(x, ok).unwrap();
        assert_eq!(g.value(y).row(2), &[1.0, 2.0]);
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[3.0, 3.0, 3.0], &[-1.0, 1.0, 0.0]]));
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let shift = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, shift).unwrap();
        assert_eq!(g.value(y).row(0), &[0.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.constant(t2(&[&[-1.0, 1.0]]));
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let shift = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, shift).unwrap();
        let out = g.value(y).row(0);
        assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
