//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied while building a forward pass.
//! Parameter nodes borrow their values from a [`ParamStore`] so large tables
//! (word embeddings) are never copied per sample. `backward` walks the tape
//! in reverse and accumulates parameter gradients into a caller-owned
//! [`Grads`], which lets several per-sample graphs share one accumulator.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    GatherParamRows(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MaskMul(Var, Array2<f64>),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    LogFloor(Var, f64),
    LogSumExpRows(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Select(Var, Vec<(usize, usize)>),
}

struct Node {
    op: Op,
    value: Option<Array2<f64>>,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a.view(),
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn row_input(&mut self, values: &[f64]) -> Var {
        let a = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.input(a)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn gather_param_rows(&mut self, id: ParamId, rows: Vec<usize>) -> Var {
        let table = self.store.value(id);
        let mut out = Array2::zeros((rows.len(), table.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&table.row(r));
        }
        self.push(Op::GatherParamRows(id, rows), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(Op::Add(a, b), out)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = &self.value(a) + &self.value(row);
        self.push(Op::AddRow(a, row), out)
    }

    /// Multiplies every row of `a` elementwise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = &self.value(a) * &self.value(row);
        self.push(Op::MulRow(a, row), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).mapv(|v| v * factor);
        self.push(Op::Scale(a, factor), out)
    }

    /// `a + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let out = &self.value(a) + c;
        self.push(Op::AddConst(a), out)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let out = &self.value(a) * &mask;
        self.push(Op::MaskMul(a, mask), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for mut row in out.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Row-wise standardisation without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut out = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(Op::LayerNormRows(a, inv_std), out)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(Op::L2NormalizeRows(a, norms), out)
    }

    /// `ln(max(a, floor))`; entries at or below the floor pass no gradient.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).mapv(|v| v.max(floor).ln());
        self.push(Op::LogFloor(a, floor), out)
    }

    /// Row-wise log-sum-exp, producing an m×1 column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            out[[i, 0]] = max + sum.ln();
        }
        self.push(Op::LogSumExpRows(a), out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Op::SumAll(a), Array2::from_elem((1, 1), total))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows(a, start, len), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols(a, start, len), out)
    }

    /// Gathers the listed `(row, col)` entries into a 1×k row.
    pub fn select(&mut self, a: Var, entries: Vec<(usize, usize)>) -> Var {
        let x = self.value(a);
        let vals: Vec<f64> = entries.iter().map(|&(r, c)| x[[r, c]]).collect();
        let out = Array2::from_shape_vec((1, vals.len()), vals).expect("select shape");
        self.push(Op::Select(a, entries), out)
    }

    /// Back-propagates the given output gradients and accumulates parameter
    /// gradients into `grads`. Returns the gradient reaching each `Input`
    /// node in `wrt` (zeros when unreached).
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)], grads: &mut Grads, wrt: &[Var]) -> Vec<Array2<f64>> {
        let mut adj: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        for (v, g) in seeds {
            accumulate(&mut adj, *v, g.view());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    adj[idx] = Some(dy);
                }
                Op::Param(id) => {
                    let shape = self.store.value(*id).dim();
                    grads.accumulate(*id, shape, dy.view());
                }
                Op::GatherParamRows(id, rows) => {
                    let shape = self.store.value(*id).dim();
                    grads.scatter_rows(*id, shape, rows, dy.view());
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    accumulate_owned(&mut adj, *a, da);
                    accumulate_owned(&mut adj, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.dot(&self.value(*b));
                    let db = dy.t().dot(&self.value(*a));
                    accumulate_owned(&mut adj, *a, da);
                    accumulate_owned(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, dy.view());
                    accumulate_owned(&mut adj, *a, dy);
                }
                Op::AddRow(a, row) => {
                    let drow = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate_owned(&mut adj, *row, drow);
                    accumulate_owned(&mut adj, *a, dy);
                }
                Op::MulRow(a, row) => {
                    let drow = (&dy * &self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let da = &dy * &self.value(*row);
                    accumulate_owned(&mut adj, *row, drow);
                    accumulate_owned(&mut adj, *a, da);
                }
                Op::Mul(a, b) => {
                    let da = &dy * &self.value(*b);
                    let db = &dy * &self.value(*a);
                    accumulate_owned(&mut adj, *a, da);
                    accumulate_owned(&mut adj, *b, db);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate_owned(&mut adj, *a, dy.mapv(|v| v * f));
                }
                Op::AddConst(a) => accumulate_owned(&mut adj, *a, dy),
                Op::MaskMul(a, mask) => accumulate_owned(&mut adj, *a, &dy * mask),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut da = dy;
                    da.zip_mut_with(&x, |g, &xv| *g *= gelu_grad(xv));
                    accumulate_owned(&mut adj, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut da = Array2::zeros(y.dim());
                    for ((yr, gr), mut dr) in y.rows().into_iter().zip(dy.rows()).zip(da.rows_mut()) {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate_owned(&mut adj, *a, da);
                }
                Op::LayerNormRows(a, inv_std) => {
                    let xhat = node.value.as_ref().expect("layernorm value");
                    let n = xhat.ncols() as f64;
                    let mut da = Array2::zeros(xhat.dim());
                    for (i, ((xr, gr), mut dr)) in xhat
                        .rows()
                        .into_iter()
                        .zip(dy.rows())
                        .zip(da.rows_mut())
                        .enumerate()
                    {
                        let mean_g = gr.sum() / n;
                        let mean_gx: f64 = xr.iter().zip(gr.iter()).map(|(x, g)| x * g).sum::<f64>() / n;
                        for ((d, &xv), &gv) in dr.iter_mut().zip(xr.iter()).zip(gr.iter()) {
                            *d = inv_std[i] * (gv - mean_g - xv * mean_gx);
                        }
                    }
                    accumulate_owned(&mut adj, *a, da);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = node.value.as_ref().expect("l2 value");
                    let mut da = Array2::zeros(y.dim());
                    for (i, ((yr, gr), mut dr)) in y.rows().into_iter().zip(dy.rows()).zip(da.rows_mut()).enumerate() {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *d = (gv - yv * dot) / norms[i];
                        }
                    }
                    accumulate_owned(&mut adj, *a, da);
                }
                Op::LogFloor(a, floor) => {
                    let x = self.value(*a);
                    let mut da = dy;
                    da.zip_mut_with(&x, |g, &xv| *g = if xv > *floor { *g / xv } else { 0.0 });
                    accumulate_owned(&mut adj, *a, da);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let lse = node.value.as_ref().expect("lse value");
                    let mut da = Array2::zeros(x.dim());
                    for (i, (xr, mut dr)) in x.rows().into_iter().zip(da.rows_mut()).enumerate() {
                        for (d, &xv) in dr.iter_mut().zip(xr.iter()) {
                            *d = dy[[i, 0]] * (xv - lse[[i, 0]]).exp();
                        }
                    }
                    accumulate_owned(&mut adj, *a, da);
                }
                Op::SumAll(a) => {
                    let shape = self.shape(*a);
                    accumulate_owned(&mut adj, *a, Array2::from_elem(shape, dy[[0, 0]]));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        let part = dy.slice(s![start..start + rows, ..]);
                        accumulate(&mut adj, p, part);
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.shape(p).1;
                        let part = dy.slice(s![.., start..start + cols]);
                        accumulate(&mut adj, p, part);
                        start += cols;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    da.slice_mut(s![*start..*start + *len, ..]).assign(&dy);
                    accumulate_owned(&mut adj, *a, da);
                }
                Op::SliceCols(a, start, len) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    da.slice_mut(s![.., *start..*start + *len]).assign(&dy);
                    accumulate_owned(&mut adj, *a, da);
                }
                Op::Select(a, entries) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    for (k, &(r, c)) in entries.iter().enumerate() {
                        da[[r, c]] += dy[[0, k]];
                    }
                    accumulate_owned(&mut adj, *a, da);
                }
            }
        }
        wrt.iter()
            .map(|v| adj[v.0].clone().unwrap_or_else(|| Array2::zeros(self.shape(*v))))
            .collect()
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], v: Var, g: ArrayView2<'_, f64>) {
    match &mut adj[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g.to_owned()),
    }
}

fn accumulate_owned(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut adj[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
