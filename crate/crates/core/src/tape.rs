//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass. Leaves are either
//! constants (data, frozen weights) or trainable parameters identified by a
//! [`ParamId`]. Nodes that do not depend on any trainable leaf are never
//! visited during the backward sweep, so frozen towers cost nothing there.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::ParamId;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row groups over which attention is computed independently.
pub type Groups = Rc<Vec<Vec<usize>>>;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    QuickGelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Groups,
        heads: usize,
        probs: Vec<Mat>,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanGroups(Var, Vec<Vec<usize>>),
    L2Normalize(Var, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters are recorded as constants.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked without being tied to a parameter.
    pub fn watched(&mut self, value: Mat) -> Var {
        let ng = !self.no_grad;
        self.push(value, Op::Leaf, ng)
    }

    pub fn param(&mut self, id: ParamId, value: &Mat, trainable: bool) -> Var {
        if trainable && !self.no_grad {
            self.push(value.clone(), Op::Param(id), true)
        } else {
            self.push(value.clone(), Op::Leaf, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulBT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let out = self.value(a) * &c;
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, c), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        let mut xhat = Mat::zeros((n, c));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(1.702 * x));
        let ng = self.ng(a);
        self.push(out, Op::QuickGelu(a), ng)
    }

    /// Multi-head scaled dot-product attention, computed independently
    /// within each row group. With `causal`, a row attends only to rows at
    /// or before its own position inside the group.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Groups,
        heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, c) = qv.dim();
        assert_eq!(c % heads, 0, "width must divide into heads");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((n, c));
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for g in groups.iter() {
            let qg = qv.select(Axis(0), g);
            let kg = kv.select(Axis(0), g);
            let vg = vv.select(Axis(0), g);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = qg.slice(cols).dot(&kg.slice(cols).t());
                sc.mapv_inplace(|x| x * scale);
                softmax_rows(&mut sc, causal);
                let o = sc.dot(&vg.slice(cols));
                for (r, &row) in g.iter().enumerate() {
                    out.slice_mut(s![row, h * dh..(h + 1) * dh])
                        .assign(&o.row(r));
                }
                probs.push(sc);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// Row `g` of the output is the mean of the rows listed in `groups[g]`.
    pub fn mean_groups(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros((groups.len(), av.ncols()));
        for (gi, g) in groups.iter().enumerate() {
            let mut row = out.row_mut(gi);
            for &r in g {
                row += &av.row(r);
            }
            row.mapv_inplace(|x| x / g.len() as f64);
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanGroups(a, groups), ng)
    }

    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let norms: Vec<f64> = av
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let mut out = av.clone();
        for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|x| x / n);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2Normalize(a, norms), ng)
    }

    /// Propagates `seed` (the gradient of some scalar with respect to
    /// `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: Mat) -> Gradients {
        assert_eq!(seed.dim(), self.value(output).dim(), "seed shape");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params
                    .entry(*id)
                    .and_modify(|acc: &mut Mat| *acc += g)
                    .or_insert_with(|| g.clone());
            }
        }
        Gradients { nodes: grads, params }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |v: Var, d: Mat, grads: &mut [Option<Mat>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()), grads);
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g), grads);
                }
            }
            Op::MatMulBT(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    acc(*b, g.t().dot(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                if self.ng(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g * *s, grads),
            Op::MulConst(a, c) => acc(*a, g * c, grads),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.ng(*gain) {
                    acc(*gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
                if self.ng(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gain);
                    let c = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d = dr.sum();
                        let sum_dx = dr.dot(&xr);
                        let is = inv_std[r];
                        Zip::from(dx.row_mut(r)).and(&dr).and(&xr).for_each(|o, &d, &xh| {
                            *o = is / c * (c * d - sum_d - xh * sum_dx);
                        });
                    }
                    acc(*x, dx, grads);
                }
            }
            Op::QuickGelu(a) => {
                let mut d = self.value(*a).mapv(|x| {
                    let sg = sigmoid(1.702 * x);
                    sg + 1.702 * x * sg * (1.0 - sg)
                });
                d *= g;
                acc(*a, d, grads);
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let c = qv.ncols();
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(qv.dim());
                let mut dk = Mat::zeros(kv.dim());
                let mut dv = Mat::zeros(vv.dim());
                let mut pi = 0;
                for grp in groups.iter() {
                    let qg = qv.select(Axis(0), grp);
                    let kg = kv.select(Axis(0), grp);
                    let vg = vv.select(Axis(0), grp);
                    let gg = g.select(Axis(0), grp);
                    for h in 0..*heads {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let p = &probs[pi];
                        pi += 1;
                        let go = gg.slice(cols);
                        let dvh = p.t().dot(&go);
                        let dp = go.dot(&vg.slice(cols).t());
                        let mut ds = p * &dp;
                        for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let tot: f64 = dsr.sum();
                            Zip::from(&mut dsr).and(&pr).for_each(|o, &pv| *o -= pv * tot);
                        }
                        ds.mapv_inplace(|x| x * scale);
                        let dqh = ds.dot(&kg.slice(cols));
                        let dkh = ds.t().dot(&qg.slice(cols));
                        for (r, &row) in grp.iter().enumerate() {
                            let sl = s![row, h * dh..(h + 1) * dh];
                            dq.slice_mut(sl).scaled_add(1.0, &dqh.row(r));
                            dk.slice_mut(sl).scaled_add(1.0, &dkh.row(r));
                            dv.slice_mut(sl).scaled_add(1.0, &dvh.row(r));
                        }
                    }
                }
                acc(*q, dq, grads);
                acc(*k, dk, grads);
                acc(*v, dv, grads);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.ng(*p) {
                        acc(*p, g.slice(s![start..start + n, ..]).to_owned(), grads);
                    }
                    start += n;
                }
            }
            Op::GatherRows(a, idx) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(*a, d, grads);
                }
            }
            Op::MeanGroups(a, groups) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                for (gi, grp) in groups.iter().enumerate() {
                    let share = g.row(gi).mapv(|x| x / grp.len() as f64);
                    for &r in grp {
                        let mut row = d.row_mut(r);
                        row += &share;
                    }
                }
                acc(*a, d, grads);
            }
            Op::L2Normalize(a, norms) => {
                let y = &self.nodes[i].value;
                let mut d = Mat::zeros(y.dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = yr.dot(&gr);
                    Zip::from(d.row_mut(r)).and(&gr).and(&yr).for_each(|o, &gv, &yv| {
                        *o = (gv - yv * proj) / norms[r];
                    });
                }
                acc(*a, d, grads);
            }
        }
    }
}

pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: BTreeMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient with respect to any recorded node, if it was reached.
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Mat> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Mat> {
        self.params
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(m: &mut Mat, causal: bool) {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let max = row
            .iter()
            .take(limit)
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (j, x) in row.iter_mut().enumerate() {
            if j < limit {
                *x = (*x - max).exp();
                sum += *x;
            } else {
                *x = 0.0;
            }
        }
        row.mapv_inplace(|x| x / sum);
    }
}
