//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! The tape is rebuilt on every forward pass (dynamic graph): operations push
//! nodes carrying the forward value and enough saved state to run their
//! backward rule. Trainable parameters live outside the tape in a
//! [`ParamStore`]; each forward pass leases them in as leaves, and
//! [`Tape::param_gradients`] collects their gradients back out after
//! [`Tape::backward`].
//!
//! Tensors are immutable values; a tape is single-owner. Parallel evaluation
//! across windows is done by giving each worker its own tape.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::{DftBasis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }

    /// Rebuild an id from a dense index; valid only for indices that came
    /// from the same store's registration order.
    pub fn from_index(index: usize) -> Self {
        ParamId(index)
    }
}

/// Named trainable tensors, registered once at model construction and kept
/// across tape rebuilds. Registration order is the stable parameter order
/// used by gradients, the optimizer, and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total scalar parameter count.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.values.len(), "snapshot size mismatch");
        self.values.clone_from_slice(snapshot);
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.axpy(1.0, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.frobenius_norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    Recip(Var),
    ClampMin(Var, f64),
    ClampMax(Var, f64),
    SoftmaxRows(Var),
    Dropout(Var, Tensor),
    Sum(Var),
    SumSquares(Var),
    ScaleByScalar(Var, Var),
    DivByScalar(Var, Var),
    RowSums(Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    Reshape(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    DftRe(Var, Rc<DftBasis>),
    DftIm(Var, Rc<DftBasis>),
    InverseDftReal(Var, Var, Rc<DftBasis>),
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::ClampMin(..) => "clamp_min",
            Op::ClampMax(..) => "clamp_max",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Dropout(..) => "dropout",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::ScaleByScalar(..) => "scale_by_scalar",
            Op::DivByScalar(..) => "div_by_scalar",
            Op::RowSums(..) => "row_sums",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleCols(..) => "scale_cols",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::DftRe(..) => "dft_re",
            Op::DftIm(..) => "dft_im",
            Op::InverseDftReal(..) => "inverse_dft_real",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Reverse-mode computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    dft_cache: HashMap<usize, Rc<DftBasis>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(id)
    }

    fn basis(&mut self, n: usize) -> Rc<DftBasis> {
        self.dft_cache
            .entry(n)
            .or_insert_with(|| Rc::new(DftBasis::new(n)))
            .clone()
    }

    /// First node holding a non-finite value, in forward order.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.label()))
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Lease a parameter onto the tape; its gradient is collected by
    /// [`Tape::param_gradients`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Leaf { param: Some(id) })
    }

    // ── elementwise and structural ops ──────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.mul_elem(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `out[i,j] = a[i,j] + bias[j]`; bias has `a.cols()` elements.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[bias.0].value;
        if bv.len() != av.cols() {
            return Err(CoreError::Shape(format!(
                "row broadcast: bias len {} vs {} columns",
                bv.len(),
                av.cols()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = av.clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += bv.data()[j];
            }
        }
        Ok(self.push(out, Op::AddRowBroadcast(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.nodes[a.0]
            .value
            .map(|x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::LeakyRelu(a, alpha))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::recip);
        self.push(v, Op::Recip(a))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(min));
        self.push(v, Op::ClampMin(a, min))
    }

    pub fn clamp_max(&mut self, a: Var, max: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.min(max));
        self.push(v, Op::ClampMax(a, max))
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(av.shape());
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out.data_mut()[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out.data_mut()[i * n + j] /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and
    /// survivors are scaled by `1/(1-p)`. Eval mode is handled by the caller
    /// simply not inserting this op.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::Config(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        let av = &self.nodes[a.0].value;
        let keep = 1.0 - p;
        let mask = Tensor::from_fn(av.shape(), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let v = av.mul_elem(&mask)?;
        Ok(self.push(v, Op::Dropout(a, mask)))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(v, Op::Sum(a))
    }

    /// Squared Frobenius norm, as a `[1]` tensor.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.nodes[a.0].value.frobenius_norm_sq());
        self.push(v, Op::SumSquares(a))
    }

    /// `a * s` where `s` is a single-element node.
    pub fn scale_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.expect_scalar(s)?;
        let v = self.nodes[a.0].value.scale(sv);
        Ok(self.push(v, Op::ScaleByScalar(a, s)))
    }

    /// `a / s` where `s` is a single-element node.
    pub fn div_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.expect_scalar(s)?;
        let v = self.nodes[a.0].value.scale(1.0 / sv);
        Ok(self.push(v, Op::DivByScalar(a, s)))
    }

    /// Per-row sums, `[m,n] -> [m,1]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.row_sums();
        self.push(v, Op::RowSums(a))
    }

    /// `out[i,j] = a[i,j] * d[i]` with `d` of shape `[m,1]`.
    pub fn scale_rows(&mut self, a: Var, d: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let dv = &self.nodes[d.0].value;
        if dv.len() != av.rows() {
            return Err(CoreError::Shape(format!(
                "scale_rows: {} scales vs {} rows",
                dv.len(),
                av.rows()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = av.clone();
        for i in 0..m {
            let c = dv.data()[i];
            for x in &mut out.data_mut()[i * n..(i + 1) * n] {
                *x *= c;
            }
        }
        Ok(self.push(out, Op::ScaleRows(a, d)))
    }

    /// `out[i,j] = a[i,j] * d[j]` with `d` of `a.cols()` elements.
    pub fn scale_cols(&mut self, a: Var, d: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let dv = &self.nodes[d.0].value;
        if dv.len() != av.cols() {
            return Err(CoreError::Shape(format!(
                "scale_cols: {} scales vs {} columns",
                dv.len(),
                av.cols()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = av.clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] *= dv.data()[j];
            }
        }
        Ok(self.push(out, Op::ScaleCols(a, d)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.nodes[a.0].value.reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Select rows of `a` by index; backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(CoreError::Shape(format!(
                "gather_rows: index {} out of {} rows",
                bad,
                av.rows()
            )));
        }
        let v = av.gather_rows(&idx);
        Ok(self.push(v, Op::GatherRows(a, Rc::new(idx))))
    }

    // ── DFT ops (linear maps via cached cos/sin bases) ──────────────────

    /// Real part of the unnormalized forward DFT over the last axis.
    pub fn dft_re(&mut self, a: Var) -> Result<Var> {
        let basis = self.basis(self.nodes[a.0].value.cols());
        let v = self.nodes[a.0].value.matmul(&basis.cos)?;
        Ok(self.push(v, Op::DftRe(a, basis)))
    }

    /// Imaginary part of the unnormalized forward DFT over the last axis.
    pub fn dft_im(&mut self, a: Var) -> Result<Var> {
        let basis = self.basis(self.nodes[a.0].value.cols());
        let v = self.nodes[a.0].value.matmul(&basis.sin)?.scale(-1.0);
        Ok(self.push(v, Op::DftIm(a, basis)))
    }

    /// Real part of the inverse DFT (divides by the length).
    pub fn inverse_dft_real(&mut self, re: Var, im: Var) -> Result<Var> {
        let n = self.nodes[re.0].value.cols();
        if self.nodes[im.0].value.shape() != self.nodes[re.0].value.shape() {
            return Err(CoreError::Shape(
                "inverse_dft_real: real/imag shape mismatch".into(),
            ));
        }
        let basis = self.basis(n);
        let mut out = self.nodes[re.0].value.matmul(&basis.cos)?;
        self.nodes[im.0].value.matmul_acc(&basis.sin, -1.0, &mut out);
        let v = out.scale(1.0 / n as f64);
        Ok(self.push(v, Op::InverseDftReal(re, im, basis)))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss node. The full gradient is computed
    /// through a fresh adjoint buffer and accumulated into each node's
    /// persistent grad, so repeated calls add up (the caller zeroes between
    /// optimizer steps by rebuilding the tape).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(CoreError::Shape(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            apply_backward(&self.nodes, i, &g, &mut adjoints);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.axpy(1.0, &g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Accumulate leased-parameter gradients into a [`Gradients`] aligned
    /// with `store`.
    pub fn param_gradients(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for node in &self.nodes {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, &node.grad) {
                out.grads[id.index()].axpy(1.0, g);
            }
        }
        out
    }

    fn expect_scalar(&self, s: Var) -> Result<f64> {
        let t = &self.nodes[s.0].value;
        if t.len() != 1 {
            return Err(CoreError::Shape(format!(
                "expected scalar node, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Propagate the adjoint of node `i` to its children. Children always
/// precede their parent on the tape; node values are read-only here and all
/// writes go to the adjoint buffer.
fn apply_backward(nodes: &[Node], i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let value_of = |v: &Var| &nodes[v.0].value;
    let node = &nodes[i];
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            ensure_adj(nodes, adj, a).axpy(1.0, g);
            ensure_adj(nodes, adj, b).axpy(1.0, g);
        }
        Op::Sub(a, b) => {
            ensure_adj(nodes, adj, a).axpy(1.0, g);
            ensure_adj(nodes, adj, b).axpy(-1.0, g);
        }
        Op::Mul(a, b) => {
            let da = g.mul_elem(value_of(b)).expect("mul backward");
            let db = g.mul_elem(value_of(a)).expect("mul backward");
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
            ensure_adj(nodes, adj, b).axpy(1.0, &db);
        }
        Op::AddRowBroadcast(a, bias) => {
            ensure_adj(nodes, adj, a).axpy(1.0, g);
            let (m, n) = (g.rows(), g.cols());
            let gb = ensure_adj(nodes, adj, bias);
            for i in 0..m {
                for j in 0..n {
                    gb.data_mut()[j] += g.data()[i * n + j];
                }
            }
        }
        Op::Scale(a, c) => {
            ensure_adj(nodes, adj, a).axpy(*c, g);
        }
        Op::MatMul(a, b) => {
            crate::tensor::acc_nt_scaled(g, value_of(b), 1.0, ensure_adj(nodes, adj, a));
            crate::tensor::acc_tn_scaled(value_of(a), g, 1.0, ensure_adj(nodes, adj, b));
        }
        Op::Transpose(a) => {
            let gt = g.transpose();
            ensure_adj(nodes, adj, a).axpy(1.0, &gt);
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            let da = Tensor::from_fn(y.shape(), |k| {
                let yv = y.data()[k];
                g.data()[k] * yv * (1.0 - yv)
            });
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
        }
        Op::Tanh(a) => {
            let y = &node.value;
            let da = Tensor::from_fn(y.shape(), |k| {
                let yv = y.data()[k];
                g.data()[k] * (1.0 - yv * yv)
            });
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
        }
        Op::LeakyRelu(a, alpha) => {
            let x = value_of(a);
            let da = Tensor::from_fn(x.shape(), |k| {
                g.data()[k] * if x.data()[k] > 0.0 { 1.0 } else { *alpha }
            });
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
        }
        Op::Sqrt(a) => {
            let y = &node.value;
            let da = Tensor::from_fn(y.shape(), |k| g.data()[k] * 0.5 / y.data()[k]);
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
        }
        Op::Recip(a) => {
            let y = &node.value;
            let da = Tensor::from_fn(y.shape(), |k| {
                let yv = y.data()[k];
                -g.data()[k] * yv * yv
            });
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
        }
        Op::ClampMin(a, min) => {
            let x = value_of(a);
            let da = Tensor::from_fn(x.shape(), |k| {
                if x.data()[k] > *min {
                    g.data()[k]
                } else {
                    0.0
                }
            });
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
        }
        Op::ClampMax(a, max) => {
            let x = value_of(a);
            let da = Tensor::from_fn(x.shape(), |k| {
                if x.data()[k] < *max {
                    g.data()[k]
                } else {
                    0.0
                }
            });
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
        }
        Op::SoftmaxRows(a) => {
            // dx = y * (g - <g, y>_row)
            let y = &node.value;
            let (m, n) = (y.rows(), y.cols());
            let mut da = Tensor::zeros(y.shape());
            for r in 0..m {
                let yr = &y.data()[r * n..(r + 1) * n];
                let gr = &g.data()[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..n {
                    da.data_mut()[r * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
        }
        Op::Dropout(a, mask) => {
            let da = g.mul_elem(mask).expect("dropout backward");
            ensure_adj(nodes, adj, a).axpy(1.0, &da);
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            let ga = ensure_adj(nodes, adj, a);
            for v in ga.data_mut() {
                *v += gv;
            }
        }
        Op::SumSquares(a) => {
            let gv = g.data()[0];
            let x = value_of(a);
            ensure_adj(nodes, adj, a).axpy(2.0 * gv, x);
        }
        Op::ScaleByScalar(a, s) => {
            let sv = value_of(s).data()[0];
            let dot: f64 = g
                .data()
                .iter()
                .zip(value_of(a).data())
                .map(|(&gv, &av)| gv * av)
                .sum();
            ensure_adj(nodes, adj, a).axpy(sv, g);
            ensure_adj(nodes, adj, s).data_mut()[0] += dot;
        }
        Op::DivByScalar(a, s) => {
            let sv = value_of(s).data()[0];
            let dot: f64 = g
                .data()
                .iter()
                .zip(value_of(a).data())
                .map(|(&gv, &av)| gv * av)
                .sum();
            ensure_adj(nodes, adj, a).axpy(1.0 / sv, g);
            ensure_adj(nodes, adj, s).data_mut()[0] += -dot / (sv * sv);
        }
        Op::RowSums(a) => {
            let (m, n) = {
                let x = value_of(a);
                (x.rows(), x.cols())
            };
            let ga = ensure_adj(nodes, adj, a);
            for i in 0..m {
                let gv = g.data()[i];
                for v in &mut ga.data_mut()[i * n..(i + 1) * n] {
                    *v += gv;
                }
            }
        }
        Op::ScaleRows(a, d) => {
            let x = value_of(a);
            let dv = value_of(d);
            let (m, n) = (x.rows(), x.cols());
            {
                let ga = ensure_adj(nodes, adj, a);
                for i in 0..m {
                    let c = dv.data()[i];
                    for j in 0..n {
                        ga.data_mut()[i * n + j] += g.data()[i * n + j] * c;
                    }
                }
            }
            let gd = ensure_adj(nodes, adj, d);
            for i in 0..m {
                let mut s = 0.0;
                for j in 0..n {
                    s += g.data()[i * n + j] * x.data()[i * n + j];
                }
                gd.data_mut()[i] += s;
            }
        }
        Op::ScaleCols(a, d) => {
            let x = value_of(a);
            let dv = value_of(d);
            let (m, n) = (x.rows(), x.cols());
            {
                let ga = ensure_adj(nodes, adj, a);
                for i in 0..m {
                    for j in 0..n {
                        ga.data_mut()[i * n + j] += g.data()[i * n + j] * dv.data()[j];
                    }
                }
            }
            let gd = ensure_adj(nodes, adj, d);
            for i in 0..m {
                for j in 0..n {
                    gd.data_mut()[j] += g.data()[i * n + j] * x.data()[i * n + j];
                }
            }
        }
        Op::Reshape(a) => {
            let shape = value_of(a).shape().to_vec();
            let gr = g.reshaped(shape).expect("reshape backward");
            ensure_adj(nodes, adj, a).axpy(1.0, &gr);
        }
        Op::GatherRows(a, idx) => {
            let n = g.cols();
            let ga = ensure_adj(nodes, adj, a);
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..n {
                    ga.data_mut()[i * n + j] += g.data()[r * n + j];
                }
            }
        }
        Op::DftRe(a, basis) => {
            g.matmul_acc(&basis.cos, 1.0, ensure_adj(nodes, adj, a));
        }
        Op::DftIm(a, basis) => {
            g.matmul_acc(&basis.sin, -1.0, ensure_adj(nodes, adj, a));
        }
        Op::InverseDftReal(re, im, basis) => {
            let inv_n = 1.0 / basis.n as f64;
            g.matmul_acc(&basis.cos, inv_n, ensure_adj(nodes, adj, re));
            g.matmul_acc(&basis.sin, -inv_n, ensure_adj(nodes, adj, im));
        }
    }
}

/// Adjoint slot for `v`, created as zeros of the node's shape on first use.
fn ensure_adj<'a>(nodes: &[Node], adj: &'a mut [Option<Tensor>], v: &Var) -> &'a mut Tensor {
    adj[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn square_gradient() {
        // loss = x^2 at x = 3 -> dloss/dx = 6
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
        assert!((tape.grad(loss).unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!((tape.value(y).data()[0] - 0.5).abs() < 1e-15);
        assert!((tape.grad(x).unwrap().data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradient_closed_form() {
        // loss = sum(A . B), B = [[5, 7]] col vec? Use A: [2,1], B: [1,2].
        // d loss / d A[0,0] = sum of B row = 12.
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2], vec![5.0, 7.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!((tape.grad(a).unwrap().data()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1000.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        assert!((v.at(0, 0) - 0.5).abs() < 1e-12);
        assert!((v.at(1, 0) - 1.0).abs() < 1e-12);
        assert!(v.at(1, 1).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_form_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![2.0_f64.ln(), 0.0]).unwrap());
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        assert!((v.at(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((v.at(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(x, 0.2);
        assert!((tape.value(y).data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn frobenius_norm_sq_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 0.0]).unwrap());
        let y = tape.sum_squares(x);
        assert!((tape.value(y).data()[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_reproducible() {
        let x = Tensor::from_fn(&[4, 8], |i| i as f64 + 1.0);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let d = tape.dropout(v, 0.5, &mut rng).unwrap();
            tape.value(d).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn param_gradients_collect_by_id() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let y = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let grads = tape.param_gradients(&store);
        assert!((grads.get(w).data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn dft_ops_match_plain_transform() {
        let x = Tensor::from_fn(&[2, 6], |i| (i as f64 * 0.37).sin());
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let re = tape.dft_re(v).unwrap();
        let im = tape.dft_im(v).unwrap();
        let spec = crate::tensor::dft(&x);
        for (a, b) in tape.value(re).data().iter().zip(spec.real.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(im).data().iter().zip(spec.imag.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = tape.inverse_dft_real(re, im).unwrap();
        for (a, b) in tape.value(back).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
