//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on the tape is a `rows × cols` matrix of `f64`. Rows are batch
//! elements, columns are features. A forward pass records one node per
//! operation; [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints. Nodes that cannot reach a trainable parameter or a
//! gradient-tracked input are skipped on the way back, so frozen sub-networks
//! cost nothing beyond their forward evaluation.

use crate::params::{ParamId, ParameterStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Concat(Var, Var),
    Slice(Var, usize),
    Sum(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// A single-use computation graph.
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: Vec<Option<Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_cache: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on a non-scalar node");
        n.value[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked data.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant: value length does not match shape");
        self.push(rows, cols, value, Op::Constant, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    pub fn fill(&mut self, rows: usize, cols: usize, x: f64) -> Var {
        self.constant(rows, cols, vec![x; rows * cols])
    }

    /// Data whose gradient is wanted (input-gradient checks).
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "input: value length does not match shape");
        self.push(rows, cols, value, Op::Input, true)
    }

    /// Leaf for a stored parameter. Repeated calls within one tape return the
    /// same node, so gradients from every use land in one place. Frozen
    /// parameters enter as untracked leaves.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if self.param_cache.len() <= id.index() {
            self.param_cache.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_cache[id.index()] {
            return v;
        }
        let (rows, cols) = store.matrix_shape(id);
        let v = self.push(rows, cols, store.values(id).to_vec(), Op::Param(id), !store.is_frozen(id));
        self.param_cache[id.index()] = Some(v);
        v
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[a.0];
        let (rows, cols, tracked) = (n.rows, n.cols, n.tracked);
        let value = n.value.iter().map(|&x| f(x)).collect();
        self.push(rows, cols, value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!((na.rows, na.cols), (nb.rows, nb.cols), "elementwise op on mismatched shapes {:?}", op);
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let (rows, cols, tracked) = (na.rows, na.cols, na.tracked || nb.tracked);
        self.push(rows, cols, value, op, tracked)
    }

    /// `[r×k] · [k×c] → [r×c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.cols, nb.rows, "matmul inner dimension mismatch");
        let (r, k, c) = (na.rows, na.cols, nb.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let x = na.value[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &nb.value[p * c..(p + 1) * c];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let tracked = na.tracked || nb.tracked;
        self.push(r, c, out, Op::MatMul(a, b), tracked)
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[bias.0]);
        assert_eq!((nb.rows, nb.cols), (1, na.cols), "bias must be 1×cols");
        let mut out = na.value.clone();
        for row in out.chunks_mut(na.cols) {
            for (o, &b) in row.iter_mut().zip(&nb.value) {
                *o += b;
            }
        }
        let (rows, cols, tracked) = (na.rows, na.cols, na.tracked || nb.tracked);
        self.push(rows, cols, out, Op::AddBias(a, bias), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, 1.0, c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.rows, nb.rows, "concat row mismatch");
        let (r, ca, cb) = (na.rows, na.cols, nb.cols);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&na.value[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&nb.value[i * cb..(i + 1) * cb]);
        }
        let tracked = na.tracked || nb.tracked;
        self.push(r, ca + cb, out, Op::Concat(a, b), tracked)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let na = &self.nodes[a.0];
        assert!(start + len <= na.cols, "slice_cols out of range");
        let (r, c) = (na.rows, na.cols);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&na.value[i * c + start..i * c + start + len]);
        }
        let tracked = na.tracked;
        self.push(r, len, out, Op::Slice(a, start), tracked)
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let na = &self.nodes[a.0];
        let s = na.value.iter().sum();
        let tracked = na.tracked;
        self.push(1, 1, vec![s], Op::Sum(a), tracked)
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let out = &self.nodes[output.0];
        assert_eq!((out.rows, out.cols), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match node.op {
                Op::Constant | Op::Input | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let (r, k, c) = (na.rows, na.cols, nb.cols);
                    if na.tracked {
                        let ga = slot(&mut grads, a, r * k);
                        for i in 0..r {
                            let grow = &g[i * c..(i + 1) * c];
                            for p in 0..k {
                                let brow = &nb.value[p * c..(p + 1) * c];
                                ga[i * k + p] += dot(grow, brow);
                            }
                        }
                    }
                    if nb.tracked {
                        let gb = slot(&mut grads, b, k * c);
                        for i in 0..r {
                            let grow = &g[i * c..(i + 1) * c];
                            for p in 0..k {
                                let x = na.value[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, &d) in gb[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                    *o += x * d;
                                }
                            }
                        }
                    }
                }
                Op::AddBias(a, bias) => {
                    let c = node.cols;
                    if self.nodes[a.0].tracked {
                        axpy(slot(&mut grads, a, g.len()), 1.0, &g);
                    }
                    if self.nodes[bias.0].tracked {
                        let gb = slot(&mut grads, bias, c);
                        for row in g.chunks(c) {
                            for (o, &d) in gb.iter_mut().zip(row) {
                                *o += d;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].tracked {
                        axpy(slot(&mut grads, a, g.len()), 1.0, &g);
                    }
                    if self.nodes[b.0].tracked {
                        axpy(slot(&mut grads, b, g.len()), 1.0, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].tracked {
                        axpy(slot(&mut grads, a, g.len()), 1.0, &g);
                    }
                    if self.nodes[b.0].tracked {
                        axpy(slot(&mut grads, b, g.len()), -1.0, &g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].tracked {
                        let ga = slot(&mut grads, a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * vb[i];
                        }
                    }
                    if self.nodes[b.0].tracked {
                        let gb = slot(&mut grads, b, g.len());
                        for i in 0..g.len() {
                            gb[i] += g[i] * va[i];
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].tracked {
                        let ga = slot(&mut grads, a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] / vb[i];
                        }
                    }
                    if self.nodes[b.0].tracked {
                        let gb = slot(&mut grads, b, g.len());
                        for i in 0..g.len() {
                            gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                        }
                    }
                }
                Op::Affine(a, s) => axpy(slot(&mut grads, a, g.len()), s, &g),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = slot(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = slot(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = slot(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = slot(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(x[i]);
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let ga = slot(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = slot(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
                Op::Square(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = slot(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += 2.0 * g[i] * x[i];
                    }
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.nodes[a.0].cols, self.nodes[b.0].cols);
                    let r = node.rows;
                    if self.nodes[a.0].tracked {
                        let ga = slot(&mut grads, a, r * ca);
                        for i in 0..r {
                            axpy(&mut ga[i * ca..(i + 1) * ca], 1.0, &g[i * (ca + cb)..i * (ca + cb) + ca]);
                        }
                    }
                    if self.nodes[b.0].tracked {
                        let gb = slot(&mut grads, b, r * cb);
                        for i in 0..r {
                            axpy(&mut gb[i * cb..(i + 1) * cb], 1.0, &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                        }
                    }
                }
                Op::Slice(a, start) => {
                    let c = self.nodes[a.0].cols;
                    let (r, len) = (node.rows, node.cols);
                    let ga = slot(&mut grads, a, r * c);
                    for i in 0..r {
                        axpy(&mut ga[i * c + start..i * c + start + len], 1.0, &g[i * len..(i + 1) * len]);
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    let ga = slot(&mut grads, a, n);
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }

        Gradients { grads }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, &d) in y.iter_mut().zip(x) {
        *o += a * d;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tracked leaf; `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into a flat buffer laid out like the store.
    pub fn accumulate_params(&self, tape: &Tape, store: &ParameterStore, flat: &mut [f64]) {
        for (i, node) in tape.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                let range = store.range(*id);
                axpy(&mut flat[range], 1.0, g);
            }
        }
    }
}
