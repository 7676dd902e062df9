use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::TensorError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Broadcast(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Softplus(Var),
    LogSumExp(Var, usize),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols(Var, usize),
    Clamp(Var, f64, f64),
    Detach,
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Tape of recorded operations. Node ids are assigned in creation order, so
/// every parent precedes its children and a reverse sweep is a valid
/// topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn bcast_dim(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize), TensorError> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            left: vec![a.0, a.1],
            right: vec![b.0, b.1],
        }),
    }
}

#[inline]
fn bidx(rows: usize, cols: usize, i: usize, j: usize) -> usize {
    (if rows == 1 { 0 } else { i }) * cols + if cols == 1 { 0 } else { j }
}

/// Sums a `[r, c]` gradient down to the `[ra, ca]` operand it was broadcast from.
fn reduce_to(g: &[f64], r: usize, c: usize, ra: usize, ca: usize) -> Vec<f64> {
    if ra == r && ca == c {
        return g.to_vec();
    }
    let mut out = vec![0.0; ra * ca];
    for i in 0..r {
        for j in 0..c {
            out[bidx(ra, ca, i, j)] += g[i * c + j];
        }
    }
    out
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { op, rows, cols, value });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf. Leaves receive gradients (see [`Graph::grad`]) but are
    /// not optimizer parameters.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        let (r, c) = t.dims2()?;
        Ok(self.push(Op::Leaf, r, c, t.data().to_vec()))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, 1, 1, vec![v])
    }

    /// Loads a parameter from the store. Repeated calls return the same node,
    /// so shared parameters accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.value(id);
        let (r, c) = t.dims2().expect("parameters are at most 2-d");
        let v = self.push(Op::Param, r, c, t.data().to_vec());
        self.params.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone())
    }

    /// Value of a `[1, 1]` node.
    pub fn item(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "item() on non-scalar node");
        n.value[0]
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        make: fn(Var, Var) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let (r, c) = bcast_dim(op, (ra, ca), (rb, cb))?;
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = Vec::with_capacity(r * c);
        if ra == rb && ca == cb {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..r {
                for j in 0..c {
                    out.push(f(av[bidx(ra, ca, i, j)], bv[bidx(rb, cb, i, j)]));
                }
            }
        }
        Ok(self.push(make(a, b), r, c, out))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(a);
        let (r, c) = (n.rows, n.cols);
        let out = n.value.iter().map(|&x| f(x)).collect();
        self.push(op, r, c, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    /// Elementwise division; the divisor must be strictly positive.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.node(b).value.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "div",
                detail: format!("non-positive divisor {bad}"),
            });
        }
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), m, n, out))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.node(a).value.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), stable_sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `log(1 + exp(x))`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), stable_softplus)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let c = self.scalar(s);
        self.add(a, c)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Identity in the forward pass, blocks gradient in the backward pass.
    pub fn detach(&mut self, a: Var) -> Var {
        self.unary(a, Op::Detach, |x| x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        self.push(Op::Sum(a), 1, 1, vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        self.push(Op::Mean(a), 1, 1, vec![s])
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        let v = &self.node(a).value;
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, &x) in out.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                Ok(self.push(Op::SumAxis(a, 0), 1, c, out))
            }
            1 => {
                let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
                Ok(self.push(Op::SumAxis(a, 1), r, 1, out))
            }
            _ => Err(TensorError::Axis { op: "sum_axis", axis }),
        }
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        let s = self.sum_axis(a, axis)?;
        let n = if axis == 0 { r } else { c };
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Expands size-1 dimensions to `(rows, cols)`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let (ra, ca) = self.shape(a);
        let ok = (ra == rows || ra == 1) && (ca == cols || ca == 1);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                left: vec![ra, ca],
                right: vec![rows, cols],
            });
        }
        let v = &self.node(a).value;
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(v[bidx(ra, ca, i, j)]);
            }
        }
        Ok(self.push(Op::Broadcast(a), rows, cols, out))
    }

    /// Stabilized `log(sum(exp(a)))` along `axis`, keeping the axis as size 1.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        let v = &self.node(a).value;
        match axis {
            0 => {
                let out = (0..c)
                    .map(|j| {
                        let col: Vec<f64> = (0..r).map(|i| v[i * c + j]).collect();
                        super::log_sum_exp_slice(&col)
                    })
                    .collect();
                Ok(self.push(Op::LogSumExp(a, 0), 1, c, out))
            }
            1 => {
                let out = (0..r)
                    .map(|i| super::log_sum_exp_slice(&v[i * c..(i + 1) * c]))
                    .collect();
                Ok(self.push(Op::LogSumExp(a, 1), r, 1, out))
            }
            _ => Err(TensorError::Axis {
                op: "log_sum_exp",
                axis,
            }),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = &self.node(a).value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(Op::Transpose(a), c, r, out)
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, end],
            });
        }
        let w = end - start;
        let v = &self.node(a).value;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        Ok(self.push(Op::SliceCols(a, start), r, w, out))
    }

    /// Reverse sweep from a scalar root. A graph supports exactly one sweep;
    /// a second call is rejected.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let (r, c) = self.shape(root);
        if r * c != 1 {
            return Err(TensorError::NonScalarRoot(vec![r, c]));
        }
        if self.grads.is_some() {
            return Err(TensorError::BackwardTwice);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (r, c) = (node.rows, node.cols);
            let out = &node.value;
            match node.op {
                Op::Leaf | Op::Param | Op::Detach => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let (ra, ca) = self.shape(a);
                    let (rb, cb) = self.shape(b);
                    let ga = reduce_to(&g, r, c, ra, ca);
                    let mut gb = reduce_to(&g, r, c, rb, cb);
                    if matches!(node.op, Op::Sub(..)) {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let (ra, ca) = self.shape(a);
                    let (rb, cb) = self.shape(b);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut full_a = vec![0.0; r * c];
                    let mut full_b = vec![0.0; r * c];
                    let is_div = matches!(node.op, Op::Div(..));
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            let x = av[bidx(ra, ca, i, j)];
                            let y = bv[bidx(rb, cb, i, j)];
                            if is_div {
                                full_a[k] = g[k] / y;
                                full_b[k] = -g[k] * x / (y * y);
                            } else {
                                full_a[k] = g[k] * y;
                                full_b[k] = g[k] * x;
                            }
                        }
                    }
                    let ga = reduce_to(&full_a, r, c, ra, ca);
                    let gb = reduce_to(&full_b, r, c, rb, cb);
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(a);
                    let n = c;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::Exp(a) => {
                    let ga = g.iter().zip(out).map(|(g, o)| g * o).collect();
                    acc(&mut grads, a, ga);
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = g.iter().zip(av).map(|(g, x)| g / x).collect();
                    acc(&mut grads, a, ga);
                }
                Op::Neg(a) => acc(&mut grads, a, g.iter().map(|x| -x).collect()),
                Op::Scale(a, s) => acc(&mut grads, a, g.iter().map(|x| x * s).collect()),
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut grads, a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut grads, a, vec![g[0] / n as f64; n]);
                }
                Op::SumAxis(a, axis) => {
                    let (ra, ca) = self.shape(a);
                    let mut ga = vec![0.0; ra * ca];
                    for i in 0..ra {
                        for j in 0..ca {
                            ga[i * ca + j] = if axis == 0 { g[j] } else { g[i] };
                        }
                    }
                    acc(&mut grads, a, ga);
                }
                Op::Broadcast(a) => {
                    let (ra, ca) = self.shape(a);
                    acc(&mut grads, a, reduce_to(&g, r, c, ra, ca));
                }
                Op::Sigmoid(a) => {
                    let ga = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                    acc(&mut grads, a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect();
                    acc(&mut grads, a, ga);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = g.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    acc(&mut grads, a, ga);
                }
                Op::Square(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = g.iter().zip(av).map(|(g, x)| 2.0 * g * x).collect();
                    acc(&mut grads, a, ga);
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = g.iter().zip(av).map(|(g, &x)| g * stable_sigmoid(x)).collect();
                    acc(&mut grads, a, ga);
                }
                Op::LogSumExp(a, axis) => {
                    let (ra, ca) = self.shape(a);
                    let av = &self.nodes[a.0].value;
                    let mut ga = vec![0.0; ra * ca];
                    for i in 0..ra {
                        for j in 0..ca {
                            let o = if axis == 0 { j } else { i };
                            let w = (av[i * ca + j] - out[o]).exp();
                            ga[i * ca + j] = if w == 0.0 { 0.0 } else { g[o] * w };
                        }
                    }
                    acc(&mut grads, a, ga);
                }
                Op::Transpose(a) => {
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] = g[i * c + j];
                        }
                    }
                    acc(&mut grads, a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (ra, ca) = self.shape(a);
                    let mut ga = vec![0.0; ra * ca];
                    for i in 0..r {
                        ga[i * ca + start..i * ca + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    acc(&mut grads, a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[a.0].value;
                    let ga = g
                        .iter()
                        .zip(av)
                        .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, a, ga);
                }
            }
            // Keep the gradient for leaves and parameters so it can be queried.
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param) {
                grads[idx] = Some(g);
            }
        }
        // The root's own gradient is all-ones by definition.
        if grads[root.0].is_none() {
            grads[root.0] = Some(vec![1.0]);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the backward root with respect to a leaf or parameter
    /// node, or the root itself. `None` before `backward` or if unreachable.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let n = self.node(v);
        grads[v.0].as_ref().map(|g| Tensor::matrix(n.rows, n.cols, g.clone()))
    }

    /// Gradients for every parameter in `store`; parameters the root does not
    /// depend on get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros(store);
        if let Some(grads) = &self.grads {
            for (&id, &v) in &self.params {
                if let Some(g) = &grads[v.0] {
                    out.get_mut(id).data_mut().copy_from_slice(g);
                }
            }
        }
        out
    }

    /// Parameters loaded into this graph.
    pub fn loaded_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}
