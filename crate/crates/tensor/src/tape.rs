use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Softmax { input: Var, axis: usize, mask: Option<Vec<bool>> },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so every operation's inputs precede
/// it and a single reverse sweep is a valid backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`.
    ///
    /// Nodes that require a gradient but were not reached by the loss get an
    /// all-zero tensor; nodes that never required one are an error.
    pub fn get(&self, var: Var) -> Result<Tensor> {
        if !self.requires[var.0] {
            return Err(TensorError::Detached);
        }
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(&shape)),
        }
    }

    /// Number of nodes whose backward rule ran.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Output shape of a suffix-broadcast binary op: the shorter operand's shape
/// must equal the trailing dimensions of the longer one.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    long.ends_with(short).then(|| long.to_vec())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` for `a: [m, k]`, `b: [m, n]`.
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(var).dims2().ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: self.shape(var).to_vec(),
            rhs: vec![0, 0],
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: vec![m, k], rhs: vec![k2, n] });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`, the natural form for `x · Wᵀ` with `W` stored `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul_nt", lhs: vec![m, k], rhs: vec![n, k2] });
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch { op: name, lhs: sa, rhs: sb })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = shape.iter().product();
        let out = (0..n).map(|i| f(av[i % av.len()], bv[i % bv.len()])).collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Elementwise sum; the shorter operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Softmax along `axis`. Where `mask` is given, `false` entries are
    /// excluded: they act as `-inf` logits and receive exactly zero
    /// probability and zero gradient.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(TensorError::ShapeMismatch { op: "softmax_masked", lhs: shape, rhs: vec![m.len()] });
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let keep = |j: usize| mask.is_none_or(|m| m[idx(j)]);
                let max = (0..len).filter(|&j| keep(j)).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::AllMaskedRow { row: o * inner + i });
                }
                let mut total = 0.0;
                for j in (0..len).filter(|&j| keep(j)) {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in (0..len).filter(|&j| keep(j)) {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input: x, axis, mask: mask.map(<[bool]>::to_vec) }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::ShapeMismatch { op: "concat", lhs: vec![], rhs: vec![] })?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + j) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.requires_grad(x);
        let op = if mean { Op::Mean { input: x, axis } } else { Op::Sum { input: x, axis } };
        Ok(self.push(Tensor::new(out_shape, out)?, op, rg))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(TensorError::Detached);
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            visited,
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().1;
                if wants(*a) {
                    accumulate(grads, *a, matmul_nt_raw(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, *b, matmul_tn_raw(val(*a), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().0;
                if wants(*a) {
                    accumulate(grads, *a, matmul_raw(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, *b, matmul_tn_raw(g, val(*a), m, n, k));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (la, lb) = (av.len(), bv.len());
                if wants(*a) {
                    let mut ga = vec![0.0; la];
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % la] += match node.op {
                            Op::Mul(..) => gi * bv[i % lb],
                            _ => *gi,
                        };
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; lb];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % lb] += match node.op {
                            Op::Mul(..) => gi * av[i % la],
                            Op::Sub(..) => -gi,
                            _ => *gi,
                        };
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let gx = g.iter().zip(val(*x)).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect();
                    accumulate(grads, *x, gx);
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().map(|gi| gi * c).collect());
                }
            }
            Op::Softmax { input, axis, mask } => {
                if wants(*input) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis).unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| y[base + j * inner] * g[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                let kept = mask.as_ref().is_none_or(|m| m[p]);
                                if kept {
                                    gx[p] = y[p] * (g[p] - dot);
                                }
                            }
                        }
                    }
                    accumulate(grads, *input, gx);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis).unwrap();
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    if wants(*v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            gv.extend_from_slice(&g[start..start + chunk]);
                        }
                        accumulate(grads, *v, gv);
                    }
                    offset += chunk;
                }
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                if wants(*input) {
                    let shape = self.nodes[input.0].value.shape();
                    let (outer, len, inner) = axis_split(shape, *axis).unwrap();
                    let factor = match node.op {
                        Op::Mean { .. } => 1.0 / len as f64,
                        _ => 1.0,
                    };
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] = g[o * inner + i] * factor;
                            }
                        }
                    }
                    accumulate(grads, *input, gx);
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                if wants(*x) {
                    let len = self.nodes[x.0].value.len();
                    let factor = match node.op {
                        Op::MeanAll(_) => 1.0 / len as f64,
                        _ => 1.0,
                    };
                    accumulate(grads, *x, vec![g[0] * factor; len]);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_entry_gets_zero_probability() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.7, 100.0]));
        let y = tape.softmax_masked(x, 0, Some(&[true, false])).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let err = tape.softmax_masked(x, 1, Some(&[true, true, false, false])).unwrap_err();
        assert!(matches!(err, TensorError::AllMaskedRow { row: 1 }));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-3.0, 3.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(tape.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn broadcast_requires_suffix() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 3]));
        let bias = tape.constant(Tensor::zeros(&[3]));
        let bad = tape.constant(Tensor::zeros(&[4]));
        let sum = tape.add(a, bias).unwrap();
        assert_eq!(tape.shape(sum), &[4, 3]);
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn sum_of_linear_map_gradient_is_input_on_every_row() {
        // loss = sum(W x): dloss/dW[r, c] = x[c] for every row r
        let mut tape = Tape::new();
        let w = tape.param(t(&[3, 2], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        let x = tape.constant(t(&[2, 1], &[2.0, -7.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -7.0, 2.0, -7.0, 2.0, -7.0]);
    }

    #[test]
    fn equal_operands_give_zero_gradient_at_minimum() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let d = tape.sub(a, b).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(p), Err(TensorError::NonScalarLoss(_))));

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros(&[2]));
        let loss = tape.sum_all(c);
        assert!(matches!(tape.backward(loss), Err(TensorError::Detached)));
    }

    #[test]
    fn constant_inputs_have_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(p, c).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 4.0]);
        assert!(matches!(grads.get(c), Err(TensorError::Detached)));
    }

    #[test]
    fn each_node_is_visited_once() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, 2.0]));
        let a = tape.mul(p, p).unwrap();
        let b = tape.add(a, p).unwrap();
        let c = tape.mul(b, a).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        // p, a, b, c, loss
        assert_eq!(grads.nodes_visited(), 5);
    }
}
