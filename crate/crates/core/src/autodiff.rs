//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the ids of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates adjoints. Row vectors are `1 x d` matrices and
//! scalars are `1 x 1`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Cosine {
        a: Var,
        b: Var,
    },
    LnClamp(Var, f64),
    Sum(Var),
    Pick(Var, usize, usize),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Computation tape. Borrowed leaves let parameter tensors enter the graph
/// without copies.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn norm(x: ArrayView2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf borrowing its value.
    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        let t =
            Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row vector shape");
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Divides every entry of `a` by the `1 x 1` node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let d = self.scalar(s);
        let v = self.value(a) / d;
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::DivScalar(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start, end), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start, end), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Cosine similarity of two row vectors, as a `1 x 1` node. Both inputs
    /// must be nonzero; callers check this before building the node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let c = (av * bv).sum() / (norm(av.view()) * norm(bv.view()));
        let rg = self.rg(a) || self.rg(b);
        self.push(Array2::from_elem((1, 1), c), Op::Cosine { a, b }, rg)
    }

    /// `ln(max(x, eps))` elementwise.
    pub fn ln_clamp(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(eps).ln());
        let rg = self.rg(a);
        self.push(v, Op::LnClamp(a, eps), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Extracts entry `(r, c)` as a `1 x 1` node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a)[[r, c]]);
        let rg = self.rg(a);
        self.push(v, Op::Pick(a, r, c), rg)
    }

    /// Sum of a list of `1 x 1` nodes.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let row = self.concat_cols(parts);
        self.sum(row)
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.value(output).raw_dim()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let y = node.value.get();
            let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, dy.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&dy));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, -&dy);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *a, dy.clone());
                    if self.rg(*row) {
                        acc(&mut grads, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &dy * self.value(*b));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, &dy * self.value(*a));
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, &dy * *s),
                Op::DivScalar(a, s) => {
                    let d = self.scalar(*s);
                    if self.rg(*a) {
                        acc(&mut grads, *a, &dy / d);
                    }
                    if self.rg(*s) {
                        let g = -(&dy * self.value(*a)).sum() / (d * d);
                        acc(&mut grads, *s, Array2::from_elem((1, 1), g));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, dy.t().to_owned()),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let r = self.value(*p).nrows();
                        if self.rg(*p) {
                            acc(
                                &mut grads,
                                *p,
                                dy.slice(s![offset..offset + r, ..]).to_owned(),
                            );
                        }
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).ncols();
                        if self.rg(*p) {
                            acc(
                                &mut grads,
                                *p,
                                dy.slice(s![.., offset..offset + c]).to_owned(),
                            );
                        }
                        offset += c;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let mut g = Array2::zeros(self.value(*a).raw_dim());
                    g.slice_mut(s![*start..*end, ..]).assign(&dy);
                    acc(&mut grads, *a, g);
                }
                Op::SliceCols(a, start, end) => {
                    let mut g = Array2::zeros(self.value(*a).raw_dim());
                    g.slice_mut(s![.., *start..*end]).assign(&dy);
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let mut g = y * &dy;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = grow.sum();
                        grow.zip_mut_with(&yrow, |gv, yv| *gv -= yv * dot);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = y.mapv(f64::exp);
                    let mut g = dy.clone();
                    for ((mut grow, dyrow), smrow) in
                        g.rows_mut().into_iter().zip(dy.rows()).zip(sm.rows())
                    {
                        let total: f64 = dyrow.sum();
                        grow.zip_mut_with(&smrow, |gv, sv| *gv -= sv * total);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*gamma) {
                        acc(
                            &mut grads,
                            *gamma,
                            (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if self.rg(*beta) {
                        acc(&mut grads, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        let dxhat = &dy * self.value(*gamma);
                        let cols = dxhat.ncols() as f64;
                        let mut g = Array2::zeros(dxhat.raw_dim());
                        for r in 0..dxhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_dh: f64 = dh.sum();
                            let sum_dh_xh: f64 = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                            let inv = inv_std[r];
                            for c in 0..dxhat.ncols() {
                                g[[r, c]] =
                                    inv / cols * (cols * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                            }
                        }
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Gelu(a) => {
                    let mut g = self.value(*a).mapv(gelu_grad);
                    g *= &dy;
                    acc(&mut grads, *a, g);
                }
                Op::Cosine { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let na = norm(av.view());
                    let nb = norm(bv.view());
                    let c = y[[0, 0]];
                    let d = dy[[0, 0]];
                    if self.rg(*a) {
                        let g = (bv / (na * nb) - av * (c / (na * na))) * d;
                        acc(&mut grads, *a, g);
                    }
                    if self.rg(*b) {
                        let g = (av / (na * nb) - bv * (c / (nb * nb))) * d;
                        acc(&mut grads, *b, g);
                    }
                }
                Op::LnClamp(a, eps) => {
                    let mut g = self
                        .value(*a)
                        .mapv(|x| if x > *eps { 1.0 / x } else { 0.0 });
                    g *= &dy;
                    acc(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let g = Array2::from_elem(self.value(*a).raw_dim(), dy[[0, 0]]);
                    acc(&mut grads, *a, g);
                }
                Op::Pick(a, r, c) => {
                    let mut g = Array2::zeros(self.value(*a).raw_dim());
                    g[[*r, *c]] = dy[[0, 0]];
                    acc(&mut grads, *a, g);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(out)/d(leaf) for a graph builder.
    fn check<F>(input: Tensor, build: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(input.raw_dim()));
        let h = 1e-6;
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let eval = |delta: f64| {
                let mut t = input.clone();
                t[[r, c]] += delta;
                let mut g = Graph::new();
                let x = g.param(t);
                let out = build(&mut g, x);
                g.scalar(out)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic[[r, c]];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "entry ({r},{c}): fd {fd} vs analytic {an}"
            );
        }
    }

    fn weights(g: &mut Graph, rows: usize, cols: usize) -> Var {
        let t = Array2::from_shape_fn((rows, cols), |(r, c)| ((r * cols + c) as f64 * 0.37).sin());
        g.constant(t)
    }

    #[test]
    fn matmul_softmax_chain() {
        let input = array![[0.3, -0.2, 0.5], [0.1, 0.9, -0.4]];
        check(input, |g, x| {
            let w = weights(g, 3, 4);
            let y = g.matmul(x, w);
            let p = g.softmax_rows(y);
            let l = g.ln_clamp(p, 1e-8);
            let picked = g.pick(l, 1, 2);
            let other = g.pick(p, 0, 3);
            g.add_scalars(&[picked, other])
        });
    }

    #[test]
    fn layer_norm_gelu() {
        let input = array![[0.3, -0.2, 0.5, 1.1], [0.1, 0.9, -0.4, 0.0]];
        check(input, |g, x| {
            let gamma = g.constant(array![[1.0, 0.5, -0.3, 2.0]]);
            let beta = g.constant(array![[0.1, 0.0, 0.2, -0.1]]);
            let y = g.layer_norm(x, gamma, beta);
            let z = g.gelu(y);
            let w = weights(g, 2, 4);
            let m = g.mul(z, w);
            g.sum(m)
        });
    }

    #[test]
    fn layer_norm_params() {
        let gamma = array![[1.0, 0.5, -0.3]];
        check(gamma, |g, gm| {
            let x = weights(g, 3, 3);
            let beta = g.constant(array![[0.0, 0.1, 0.2]]);
            let y = g.layer_norm(x, gm, beta);
            let w = weights(g, 3, 3);
            let y = g.mul(y, w);
            g.sum(y)
        });
    }

    #[test]
    fn cosine_and_division() {
        let input = array![[0.3, -0.2, 0.5]];
        check(input, |g, x| {
            let b = g.constant(array![[0.1, 0.7, -0.2]]);
            let c = g.cosine(x, b);
            let tau = g.constant(array![[0.4]]);
            g.div_scalar(c, tau)
        });
        let tau = array![[0.4]];
        check(tau, |g, t| {
            let a = g.constant(array![[0.3, -0.2, 0.5]]);
            let b = g.constant(array![[0.1, 0.7, -0.2]]);
            let c = g.cosine(a, b);
            g.div_scalar(c, t)
        });
    }

    #[test]
    fn slicing_concat_transpose_logsoftmax() {
        let input = array![
            [0.3, -0.2, 0.5, 0.8],
            [0.1, 0.9, -0.4, 0.2],
            [1.0, 0.0, 0.3, -0.7]
        ];
        check(input, |g, x| {
            let a = g.slice_cols(x, 0, 2);
            let b = g.slice_rows(x, 1, 3);
            let b = g.slice_cols(b, 0, 2);
            let bt = g.transpose(b);
            let ab = g.matmul(a, bt);
            let c = g.concat_rows(&[ab, a]);
            let d = g.concat_cols(&[c, c]);
            let ls = g.log_softmax_rows(d);
            let row = g.slice_rows(ls, 0, 1);
            let bias = g.slice_cols(row, 0, 4);
            let e = g.add_row(d, bias);
            let f = g.scale(e, 0.5);
            let h = g.sub(f, d);
            g.mean(h)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(array![[1.0, 2.0]]);
        let p = g.param(array![[3.0, 4.0]]);
        let s = g.mul(c, p);
        let out = g.sum(s);
        let grads = g.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &array![[1.0, 2.0]]);
    }
}
