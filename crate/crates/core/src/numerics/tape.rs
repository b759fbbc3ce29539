//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive applied through a [`Tape`] appends one node holding its
//! output value and the indices of its inputs. [`Tape::backward`] walks the
//! nodes in exact reverse order of recording and returns [`Gradients`] for
//! every node that the loss depends on, including parameter leaves.
//!
//! A tape is single-threaded. Independent examples each get their own tape
//! and their gradients are reduced afterwards.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::matmul_raw;
use super::{ParamId, ParamStore, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalarVar(usize, usize),
    Concat(Vec<usize>, usize),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    GatherRows(usize, Vec<usize>),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Softmax(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive applications.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    record: bool,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value, if it
    /// contributed to the loss.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.nodes.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    /// A tape that records everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that only evaluates; backward is unavailable.
    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(record: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            record,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if self.record {
            op
        } else {
            match op {
                Op::Param(id) => Op::Param(id),
                _ => Op::Leaf,
            }
        };
        nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> Result<R, TensorError> {
        let i = self.idx(v)?;
        Ok(f(&self.nodes.borrow()[i].value))
    }

    pub fn value(&self, v: Var) -> Result<Tensor, TensorError> {
        self.with(v, Tensor::clone)
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>, TensorError> {
        self.with(v, |t| t.shape().to_vec())
    }

    /// The single value of a one-element variable.
    pub fn item(&self, v: Var) -> Result<f64, TensorError> {
        self.with(v, Tensor::item)?
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads a parameter as a leaf. Repeated loads of the same id on one
    /// tape return the same variable.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            if ta.shape() != tb.shape() {
                return Err(TensorError::Shape {
                    op,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            ta.zip(tb, f)
        };
        Ok(self.push(value, make(ia, ib)))
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(&Tensor) -> Result<Tensor, TensorError>,
        make: impl FnOnce(usize) -> Op,
    ) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let value = f(&self.nodes.borrow()[ia].value)?;
        Ok(self.push(value, make(ia)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[ia].value.matmul(&nodes[ib].value)?
        };
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of an `[m, n]`
    /// matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(row)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            let (m, n) = ta.dims2()?;
            let ok =
                matches!(tb.shape(), [k] if *k == n) || matches!(tb.shape(), [1, k] if *k == n);
            if !ok {
                return Err(TensorError::Shape {
                    op: "add_row",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let mut out = ta.data().to_vec();
            for r in 0..m {
                for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                    *o += b;
                }
            }
            Tensor::from_raw(vec![m, n], out)
        };
        Ok(self.push(value, Op::AddRow(ia, ib)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(a, |t| Ok(t.map(|v| v * c)), |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(a, |t| Ok(t.map(|v| v + c)), Op::AddScalar)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (ia, is) = (self.idx(a)?, self.idx(s)?);
        let value = {
            let nodes = self.nodes.borrow();
            let sv = nodes[is].value.item()?;
            nodes[ia].value.map(|v| v * sv)
        };
        Ok(self.push(value, Op::MulScalarVar(ia, is)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty("concat"));
        }
        let idxs = parts
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>, _>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[idxs[0]].value.shape().to_vec();
            if axis >= first.len() {
                return Err(TensorError::Axis { axis, shape: first });
            }
            let mut total = 0;
            for &i in &idxs {
                let s = nodes[i].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(TensorError::Shape {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for &i in &idxs {
                    let t = &nodes[i].value;
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_raw(shape, out)
        };
        Ok(self.push(value, Op::Concat(idxs, axis)))
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(
        &self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            let shape = t.shape();
            if axis >= shape.len() || start + len > shape[axis] {
                return Err(TensorError::Axis {
                    axis,
                    shape: shape.to_vec(),
                });
            }
            let (outer, size, inner) = axis_split(shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * size * inner + start * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut new_shape = shape.to_vec();
            new_shape[axis] = len;
            Tensor::from_raw(new_shape, out)
        };
        Ok(self.push(
            value,
            Op::Narrow {
                input: ia,
                axis,
                start,
            },
        ))
    }

    /// Selects rows of an `[m, n]` matrix; indices may repeat.
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            let (m, n) = t.dims2()?;
            let mut out = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                if r >= m {
                    return Err(TensorError::Index { index: r, len: m });
                }
                out.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
            }
            Tensor::from_raw(vec![rows.len(), n], out)
        };
        Ok(self.push(value, Op::GatherRows(ia, rows.to_vec())))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Tensor::transpose, Op::Transpose)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.unary(
            a,
            |t| {
                if shape.iter().product::<usize>() != t.len() {
                    return Err(TensorError::DataLength {
                        shape: shape.to_vec(),
                        len: t.len(),
                    });
                }
                Ok(t.reshaped(shape.to_vec()))
            },
            Op::Reshape,
        )
    }

    pub fn relu(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |t| Ok(t.map(|v| v.max(0.0))), Op::Relu)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |t| Ok(t.map(sigmoid)), Op::Sigmoid)
    }

    pub fn exp(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |t| Ok(t.map(f64::exp)), Op::Exp)
    }

    pub fn ln(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |t| Ok(t.map(f64::ln)), Op::Ln)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |t| Ok(t.map(f64::sqrt)), Op::Sqrt)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.unary(
            a,
            |t| Ok(t.map(|v| v.clamp(lo, hi))),
            |i| Op::Clamp(i, lo, hi),
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |t| Ok(Tensor::scalar(t.data().iter().sum())), Op::Sum)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(
            a,
            |t| {
                if t.is_empty() {
                    return Err(TensorError::Empty("mean"));
                }
                Ok(Tensor::scalar(
                    t.data().iter().sum::<f64>() / t.len() as f64,
                ))
            },
            Op::Mean,
        )
    }

    /// Column-wise mean of an `[m, n]` matrix, shape `[1, n]`.
    pub fn mean_rows(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(
            a,
            |t| {
                let (m, n) = t.dims2()?;
                if m == 0 {
                    return Err(TensorError::Empty("mean_rows"));
                }
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for (o, v) in out.iter_mut().zip(&t.data()[r * n..(r + 1) * n]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Ok(Tensor::from_raw(vec![1, n], out))
            },
            Op::MeanRows,
        )
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(
            a,
            |t| {
                let n = *t.shape().last().ok_or(TensorError::Empty("softmax"))?;
                if n == 0 {
                    return Err(TensorError::Empty("softmax"));
                }
                let mut out = Vec::with_capacity(t.len());
                for row in t.data().chunks(n) {
                    out.extend(softmax_slice(row));
                }
                Ok(Tensor::from_raw(t.shape().to_vec(), out))
            },
            Op::Softmax,
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let li = self.idx(loss)?;
        if !self.record {
            return Err(TensorError::NotRecording);
        }
        let nodes = self.nodes.borrow();
        if nodes[li].value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: nodes[li].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::filled(nodes[li].value.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = ta.dims2()?;
                    let (_, n) = tb.dims2()?;
                    let bt = tb.transpose()?;
                    let da = matmul_raw(g.data(), bt.data(), m, n, k);
                    let at = ta.transpose()?;
                    let db = matmul_raw(at.data(), g.data(), k, m, n);
                    acc(&mut grads, *a, Tensor::from_raw(vec![m, k], da));
                    acc(&mut grads, *b, Tensor::from_raw(vec![k, n], db));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip(val(*b), |x, y| x * y));
                    acc(&mut grads, *b, g.zip(val(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    acc(&mut grads, *a, g.zip(tb, |x, y| x / y));
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(gv, (x, y))| -gv * x / (y * y))
                        .collect();
                    acc(&mut grads, *b, Tensor::from_raw(tb.shape().to_vec(), db));
                }
                Op::AddRow(a, b) => {
                    let (m, n) = g.dims2()?;
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (d, v) in db.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += v;
                        }
                    }
                    acc(
                        &mut grads,
                        *b,
                        Tensor::from_raw(val(*b).shape().to_vec(), db),
                    );
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|v| v * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::MulScalarVar(a, s) => {
                    let sv = val(*s).item()?;
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(&mut grads, *a, g.map(|v| v * sv));
                    acc(
                        &mut grads,
                        *s,
                        Tensor::from_raw(val(*s).shape().to_vec(), vec![ds]),
                    );
                }
                Op::Concat(parts, axis) => {
                    let (outer, _, inner) = axis_split(g.shape(), *axis);
                    let mut offset = 0;
                    let total = g.shape()[*axis] * inner;
                    for &p in parts {
                        let ps = val(p).shape().to_vec();
                        let chunk = ps[*axis] * inner;
                        let mut out = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            out.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        offset += chunk;
                        acc(&mut grads, p, Tensor::from_raw(ps, out));
                    }
                }
                Op::Narrow { input, axis, start } => {
                    let in_shape = val(*input).shape().to_vec();
                    let (outer, size, inner) = axis_split(&in_shape, *axis);
                    let len = g.shape()[*axis];
                    let mut out = vec![0.0; in_shape.iter().product()];
                    for o in 0..outer {
                        let dst = o * size * inner + start * inner;
                        let src = o * len * inner;
                        out[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    acc(&mut grads, *input, Tensor::from_raw(in_shape, out));
                }
                Op::GatherRows(a, rows) => {
                    let in_shape = val(*a).shape().to_vec();
                    let n = in_shape[1];
                    let mut out = vec![0.0; in_shape.iter().product()];
                    for (r, &src) in rows.iter().enumerate() {
                        for (d, v) in out[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(&g.data()[r * n..(r + 1) * n])
                        {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_raw(in_shape, out));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()?),
                Op::Reshape(a) => acc(&mut grads, *a, g.reshaped(val(*a).shape().to_vec())),
                Op::Relu(a) => acc(
                    &mut grads,
                    *a,
                    g.zip(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
                ),
                Op::Sigmoid(a) => acc(
                    &mut grads,
                    *a,
                    g.zip(&node.value, |gv, y| gv * y * (1.0 - y)),
                ),
                Op::Exp(a) => acc(&mut grads, *a, g.zip(&node.value, |gv, y| gv * y)),
                Op::Ln(a) => acc(&mut grads, *a, g.zip(val(*a), |gv, x| gv / x)),
                Op::Sqrt(a) => acc(&mut grads, *a, g.zip(&node.value, |gv, y| gv / (2.0 * y))),
                Op::Clamp(a, lo, hi) => acc(
                    &mut grads,
                    *a,
                    g.zip(val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 }),
                ),
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc(&mut grads, *a, Tensor::filled(val(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let ta = val(*a);
                    let gv = g.data()[0] / ta.len() as f64;
                    acc(&mut grads, *a, Tensor::filled(ta.shape(), gv));
                }
                Op::MeanRows(a) => {
                    let (m, n) = val(*a).dims2()?;
                    let mut out = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        out.extend(g.data().iter().map(|v| v / m as f64));
                    }
                    acc(&mut grads, *a, Tensor::from_raw(vec![m, n], out));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap_or(&1);
                    let mut out = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    }
                    acc(&mut grads, *a, Tensor::from_raw(y.shape().to_vec(), out));
                }
            }
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate().take(li + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params.insert(*id, g.clone());
            }
        }
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into the
    /// store's grad fields. Repeated calls accumulate.
    pub fn backward_into(
        &self,
        loss: Var,
        store: &mut ParamStore,
    ) -> Result<Gradients, TensorError> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads, 1.0);
        Ok(grads)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = x.iter().map(|v| (v - max).exp()).sum();
    x.iter().map(move |v| (v - max).exp() / total)
}
