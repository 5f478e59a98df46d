//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends
//! one node holding its output value; because nodes only reference earlier
//! nodes, insertion order is already a topological order and
//! [`Tape::backward`] simply walks the list in reverse.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{axpy, dot, matmul, matmul_t};
use super::params::ParamStore;
use super::tensor::{check_shape, Tensor};
use crate::error::{Error, Result};
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds accepted by [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// `a · b`; `b` must be a matrix.
    Matmul,
    Add,
    Mul,
    Concat,
    Tanh,
    Sigmoid,
    SoftmaxLastDim,
    Log,
    Sum,
    Mean,
    /// Slice `[start, start + len)` of the last dimension.
    Slice { start: usize, len: usize },
    /// Row `id` of a `[rows × cols]` table.
    EmbedLookup { id: usize },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMulT { a: Var, b: Var, n: usize, k: usize, o: usize },
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    Add(Var, Var),
    AddRow { a: Var, b: Var, m: usize },
    Mul(Var, Var),
    MulRows { a: Var, s: Var, m: usize },
    Scale(Var, T),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { a: Var, cols: usize },
    Log { a: Var, floor: T },
    Sum(Var),
    Mean(Var),
    SumRows { a: Var, m: usize },
    Slice { a: Var, cols: usize, start: usize, len: usize },
    Row { a: Var, row: usize, cols: usize },
    Gather { a: Var, idx: Vec<usize> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMulT { a, b, .. }
            | Op::MatMul { a, b, .. }
            | Op::AddRow { a, b, .. }
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::MulRows { a, s: b, .. } => vec![*a, *b],
            Op::Concat(v) | Op::Stack(v) => v.clone(),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax { a, .. }
            | Op::Log { a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows { a, .. }
            | Op::Slice { a, .. }
            | Op::Row { a, .. }
            | Op::Gather { a, .. } => vec![*a],
        }
    }
}

struct Node<T> {
    value: Arc<Vec<T>>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    track_params: bool,
    consumed: Cell<bool>,
    clamped: Cell<usize>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
    params: Vec<(String, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    /// Gradients of parameter leaves keyed by parameter name. A parameter
    /// bound more than once contributes the sum over its bindings.
    pub fn params(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.leaves.get(id).map(|g| (name.as_str(), g.as_slice())))
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [k] => Some((1, k)),
        [r, c] => Some((r, c)),
        _ => None,
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax with the per-row maximum subtracted before exponentiation.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            track_params: true,
            consumed: Cell::new(false),
            clamped: Cell::new(0),
        }
    }

    /// Tape whose parameters are bound as constants; no gradients flow.
    pub fn no_grad() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Number of `log` inputs clamped to the floor so far.
    pub fn clamped_logs(&self) -> usize {
        self.clamped.get()
    }

    fn push(&self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let inputs = op.inputs();
        if cfg!(debug_assertions) && !value.iter().all(|x| x.is_finite()) {
            let finite_inputs = inputs
                .iter()
                .all(|v| nodes[v.0].value.iter().all(|x| x.is_finite()));
            assert!(!finite_inputs, "non-finite output from finite inputs in {op:?}: {:?} -> {:?}", inputs.iter().map(|v| nodes[v.0].value.iter().map(|x| x.as_f64()).collect::<Vec<_>>()).collect::<Vec<_>>(), value.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
        }
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            shape,
            op,
            requires_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Arc<Vec<T>>, shape: Vec<usize>, requires_grad: bool, param: Option<String>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated iff the tensor requires grad.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shared_data(), t.shape().to_vec(), t.requires_grad(), None)
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        check_shape(&shape, data.len())?;
        Ok(self.push_leaf(Arc::new(data), shape, false, None))
    }

    pub fn vector(&self, data: Vec<T>) -> Result<Var> {
        self.constant(vec![data.len()], data)
    }

    /// Binds a named parameter from `store`.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        let track = self.track_params && t.requires_grad();
        Ok(self.push_leaf(t.shared_data(), t.shape().to_vec(), track, Some(name.to_owned())))
    }

    pub fn value(&self, v: Var) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    /// First element of `v`; intended for scalars.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("tape shapes are consistent")
    }

    /// Generic entry point over the primitive set.
    pub fn forward_op(&self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::BadShape {
                    op: "forward_op arity",
                    shape: vec![inputs.len(), n],
                })
            }
        };
        match kind {
            OpKind::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Tanh => {
                arity(1)?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::SoftmaxLastDim => {
                arity(1)?;
                Ok(self.softmax(inputs[0]))
            }
            OpKind::Log => {
                arity(1)?;
                Ok(self.log(inputs[0]))
            }
            OpKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::Slice { start, len } => {
                arity(1)?;
                self.slice(inputs[0], start, len)
            }
            OpKind::EmbedLookup { id } => {
                arity(1)?;
                self.embed_lookup(inputs[0], id)
            }
        }
    }

    fn read(&self, v: Var) -> (Arc<Vec<T>>, Vec<usize>) {
        let nodes = self.nodes.borrow();
        (Arc::clone(&nodes[v.0].value), nodes[v.0].shape.clone())
    }

    /// `a · bᵀ` where `b` is `[o × k]` or `[k]` and `a` is `[n × k]` or `[k]`.
    /// With a vector `b` the result drops its trailing axis; with a vector
    /// `a` the leading one.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ash) = self.read(a);
        let (bv, bsh) = self.read(b);
        let ((n, k), (o, kb)) = match (as_matrix(&ash), as_matrix(&bsh)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(shape_err("matmul_t", &ash, &bsh)),
        };
        if k != kb {
            return Err(shape_err("matmul_t", &ash, &bsh));
        }
        let shape = match (ash.len(), bsh.len()) {
            (2, 2) => vec![n, o],
            (1, 2) => vec![o],
            (2, 1) => vec![n],
            _ => vec![1],
        };
        let out = matmul_t(&av, &bv, n, k, o);
        Ok(self.push(out, shape, Op::MatMulT { a, b, n, k, o }))
    }

    /// `a · b` with `a` `[n × k]` or `[k]` and `b` `[k × m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ash) = self.read(a);
        let (bv, bsh) = self.read(b);
        let (n, k) = as_matrix(&ash).ok_or_else(|| shape_err("matmul", &ash, &bsh))?;
        let (kb, m) = match *bsh {
            [r, c] => (r, c),
            _ => return Err(shape_err("matmul", &ash, &bsh)),
        };
        if k != kb {
            return Err(shape_err("matmul", &ash, &bsh));
        }
        let shape = if ash.len() == 2 { vec![n, m] } else { vec![m] };
        let out = matmul(&av, &bv, n, k, m);
        Ok(self.push(out, shape, Op::MatMul { a, b, n, k, m }))
    }

    /// Elementwise sum; a vector `b` broadcasts over the rows of a matrix `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ash) = self.read(a);
        let (bv, bsh) = self.read(b);
        if ash == bsh {
            let out = av.iter().zip(bv.iter()).map(|(x, y)| *x + *y).collect();
            return Ok(self.push(out, ash, Op::Add(a, b)));
        }
        match (&*ash, &*bsh) {
            (&[_, m], &[mb]) if m == mb => {
                let mut out = av.as_ref().clone();
                for row in out.chunks_exact_mut(m) {
                    row.iter_mut().zip(bv.iter()).for_each(|(x, y)| *x += *y);
                }
                Ok(self.push(out, ash, Op::AddRow { a, b, m }))
            }
            _ => Err(shape_err("add", &ash, &bsh)),
        }
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ash) = self.read(a);
        let (bv, bsh) = self.read(b);
        if ash != bsh {
            return Err(shape_err("mul", &ash, &bsh));
        }
        let out = av.iter().zip(bv.iter()).map(|(x, y)| *x * *y).collect();
        Ok(self.push(out, ash, Op::Mul(a, b)))
    }

    /// Scales row `i` of `[n × m]` matrix `a` by `s[i]`.
    pub fn scale_rows(&self, a: Var, s: Var) -> Result<Var> {
        let (av, ash) = self.read(a);
        let (sv, ssh) = self.read(s);
        let (n, m) = match *ash {
            [n, m] => (n, m),
            _ => return Err(shape_err("scale_rows", &ash, &ssh)),
        };
        if ssh != [n] {
            return Err(shape_err("scale_rows", &ash, &ssh));
        }
        let mut out = av.as_ref().clone();
        for (row, &k) in out.chunks_exact_mut(m).zip(sv.iter()) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        Ok(self.push(out, ash, Op::MulRows { a, s, m }))
    }

    pub fn scale(&self, a: Var, k: T) -> Var {
        let (av, ash) = self.read(a);
        let out = av.iter().map(|x| *x * k).collect();
        self.push(out, ash, Op::Scale(a, k))
    }

    /// Concatenates vectors.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat inputs"));
        }
        let mut out = Vec::new();
        for &p in parts {
            let (v, sh) = self.read(p);
            if sh.len() != 1 {
                return Err(shape_err("concat", &sh, &[]));
            }
            out.extend_from_slice(&v);
        }
        let len = out.len();
        Ok(self.push(out, vec![len], Op::Concat(parts.to_vec())))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(Error::Empty("stack inputs"))?;
        let width_shape = self.shape(*first);
        if width_shape.len() != 1 {
            return Err(shape_err("stack", &width_shape, &[]));
        }
        let mut out = Vec::with_capacity(rows.len() * width_shape[0]);
        for &r in rows {
            let (v, sh) = self.read(r);
            if sh != width_shape {
                return Err(shape_err("stack", &width_shape, &sh));
            }
            out.extend_from_slice(&v);
        }
        Ok(self.push(out, vec![rows.len(), width_shape[0]], Op::Stack(rows.to_vec())))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let (av, ash) = self.read(a);
        let out = av.iter().map(|x| x.tanh()).collect();
        self.push(out, ash, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let (av, ash) = self.read(a);
        let out = av.iter().map(|&x| stable_sigmoid(x)).collect();
        self.push(out, ash, Op::Sigmoid(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self, a: Var) -> Var {
        let (av, ash) = self.read(a);
        let cols = *ash.last().expect("shapes are nonempty");
        let out = softmax_rows(&av, cols);
        self.push(out, ash, Op::Softmax { a, cols })
    }

    /// Natural log with inputs floored at `1e-12`; floored entries are
    /// counted in [`Tape::clamped_logs`] and pass no gradient.
    pub fn log(&self, a: Var) -> Var {
        self.log_floor(a, T::lit(1e-12))
    }

    pub fn log_floor(&self, a: Var, floor: T) -> Var {
        let (av, ash) = self.read(a);
        let mut clamped = 0;
        let out = av
            .iter()
            .map(|&x| {
                if x > floor {
                    x.ln()
                } else {
                    clamped += 1;
                    floor.ln()
                }
            })
            .collect();
        self.clamped.set(self.clamped.get() + clamped);
        self.push(out, ash, Op::Log { a, floor })
    }

    pub fn sum(&self, a: Var) -> Var {
        let (av, _) = self.read(a);
        let s = super::kernels::dot(&av, &vec![T::one(); av.len()]);
        self.push(vec![s], vec![1], Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let (av, _) = self.read(a);
        let s = dot(&av, &vec![T::one(); av.len()]) / T::from_usize(av.len()).unwrap();
        self.push(vec![s], vec![1], Op::Mean(a))
    }

    /// Column sums of a `[n × m]` matrix.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let (av, ash) = self.read(a);
        let m = match *ash {
            [_, m] => m,
            _ => return Err(shape_err("sum_rows", &ash, &[])),
        };
        let mut out = vec![T::zero(); m];
        for row in av.chunks_exact(m) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += *x);
        }
        Ok(self.push(out, vec![m], Op::SumRows { a, m }))
    }

    /// Slice `[start, start + len)` of the last dimension.
    pub fn slice(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (av, ash) = self.read(a);
        let cols = *ash.last().expect("shapes are nonempty");
        if len == 0 || start + len > cols {
            return Err(Error::BadShape {
                op: "slice",
                shape: vec![start, len, cols],
            });
        }
        let out = av
            .chunks_exact(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(out, shape, Op::Slice { a, cols, start, len }))
    }

    /// Row `row` of a matrix as a vector.
    pub fn row(&self, a: Var, row: usize) -> Result<Var> {
        let (av, ash) = self.read(a);
        let (rows, cols) = match *ash {
            [r, c] if row < r => (r, c),
            _ => {
                return Err(Error::BadShape {
                    op: "row",
                    shape: ash.clone(),
                })
            }
        };
        debug_assert!(row < rows);
        let out = av[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(out, vec![cols], Op::Row { a, row, cols }))
    }

    /// Row `id` of an embedding table.
    pub fn embed_lookup(&self, table: Var, id: usize) -> Result<Var> {
        let sh = self.shape(table);
        match *sh {
            [rows, _] if id < rows => self.row(table, id),
            [rows, _] => Err(Error::TokenOutOfRange { id, size: rows }),
            _ => Err(shape_err("embed_lookup", &sh, &[])),
        }
    }

    /// Flat-index gather into a vector.
    pub fn gather(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let (av, ash) = self.read(a);
        if idx.is_empty() {
            return Err(Error::Empty("gather indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.len()) {
            return Err(Error::BadShape {
                op: "gather",
                shape: vec![bad, av.len()],
            });
        }
        let out = idx.iter().map(|&i| av[i]).collect();
        let _ = ash;
        Ok(self.push(out, vec![idx.len()], Op::Gather { a, idx: idx.to_vec() }))
    }

    /// Reverse sweep from scalar `loss`. May run once per tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { leaves: HashMap::new(), params: Vec::new() };

        fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        out.params.push((name.clone(), id));
                    }
                    out.leaves.insert(id, g);
                }
                Op::MatMulT { a, b, n, k, o } => {
                    let (n, k, o) = (*n, *k, *o);
                    let av = Arc::clone(&nodes[a.0].value);
                    let bv = Arc::clone(&nodes[b.0].value);
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for (da_row, g_row) in da.chunks_exact_mut(k).zip(g.chunks_exact(o)) {
                            for (&gij, b_row) in g_row.iter().zip(bv.chunks_exact(k)) {
                                axpy(da_row, gij, b_row);
                            }
                        }
                    }
                    if let Some(db) = slot(&mut grads, &nodes, *b) {
                        for (a_row, g_row) in av.chunks_exact(k).zip(g.chunks_exact(o)).take(n) {
                            for (db_row, &gij) in db.chunks_exact_mut(k).zip(g_row) {
                                axpy(db_row, gij, a_row);
                            }
                        }
                    }
                }
                Op::MatMul { a, b, n, k, m } => {
                    let (n, k, m) = (*n, *k, *m);
                    let av = Arc::clone(&nodes[a.0].value);
                    let bv = Arc::clone(&nodes[b.0].value);
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for (da_row, g_row) in da.chunks_exact_mut(k).zip(g.chunks_exact(m)) {
                            for (d, b_row) in da_row.iter_mut().zip(bv.chunks_exact(m)) {
                                *d += dot(g_row, b_row);
                            }
                        }
                    }
                    if let Some(db) = slot(&mut grads, &nodes, *b) {
                        for (a_row, g_row) in av.chunks_exact(k).zip(g.chunks_exact(m)).take(n) {
                            for (db_row, &aik) in db.chunks_exact_mut(m).zip(a_row) {
                                axpy(db_row, aik, g_row);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(d) = slot(&mut grads, &nodes, v) {
                            d.iter_mut().zip(&g).for_each(|(d, g)| *d += *g);
                        }
                    }
                }
                Op::AddRow { a, b, m } => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, g)| *d += *g);
                    }
                    if let Some(db) = slot(&mut grads, &nodes, *b) {
                        for g_row in g.chunks_exact(*m) {
                            db.iter_mut().zip(g_row).for_each(|(d, g)| *d += *g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = Arc::clone(&nodes[a.0].value);
                    let bv = Arc::clone(&nodes[b.0].value);
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for ((d, g), b) in da.iter_mut().zip(&g).zip(bv.iter()) {
                            *d += *g * *b;
                        }
                    }
                    if let Some(db) = slot(&mut grads, &nodes, *b) {
                        for ((d, g), a) in db.iter_mut().zip(&g).zip(av.iter()) {
                            *d += *g * *a;
                        }
                    }
                }
                Op::MulRows { a, s, m } => {
                    let av = Arc::clone(&nodes[a.0].value);
                    let sv = Arc::clone(&nodes[s.0].value);
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for ((d_row, g_row), &k) in da.chunks_exact_mut(*m).zip(g.chunks_exact(*m)).zip(sv.iter()) {
                            axpy(d_row, k, g_row);
                        }
                    }
                    if let Some(ds) = slot(&mut grads, &nodes, *s) {
                        for ((d, g_row), a_row) in ds.iter_mut().zip(g.chunks_exact(*m)).zip(av.chunks_exact(*m)) {
                            *d += dot(g_row, a_row);
                        }
                    }
                }
                Op::Scale(a, k) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, g)| *d += *g * *k);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        if let Some(dp) = slot(&mut grads, &nodes, p) {
                            dp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, g)| *d += *g);
                        }
                        offset += len;
                    }
                }
                Op::Stack(rows) => {
                    let width = node.shape[1];
                    for (&r, g_row) in rows.iter().zip(g.chunks_exact(width)) {
                        if let Some(dr) = slot(&mut grads, &nodes, r) {
                            dr.iter_mut().zip(g_row).for_each(|(d, g)| *d += *g);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for ((d, g), y) in da.iter_mut().zip(&g).zip(y.iter()) {
                            *d += *g * (T::one() - *y * *y);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for ((d, g), y) in da.iter_mut().zip(&g).zip(y.iter()) {
                            *d += *g * *y * (T::one() - *y);
                        }
                    }
                }
                Op::Softmax { a, cols } => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for ((d_row, g_row), y_row) in
                            da.chunks_exact_mut(*cols).zip(g.chunks_exact(*cols)).zip(y.chunks_exact(*cols))
                        {
                            let inner = dot(g_row, y_row);
                            for ((d, g), y) in d_row.iter_mut().zip(g_row).zip(y_row) {
                                *d += *y * (*g - inner);
                            }
                        }
                    }
                }
                Op::Log { a, floor } => {
                    let av = Arc::clone(&nodes[a.0].value);
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for ((d, g), x) in da.iter_mut().zip(&g).zip(av.iter()) {
                            if *x > *floor {
                                *d += *g / *x;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        let share = g[0] / T::from_usize(da.len()).unwrap();
                        da.iter_mut().for_each(|d| *d += share);
                    }
                }
                Op::SumRows { a, m } => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for d_row in da.chunks_exact_mut(*m) {
                            d_row.iter_mut().zip(&g).for_each(|(d, g)| *d += *g);
                        }
                    }
                }
                Op::Slice { a, cols, start, len } => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for (d_row, g_row) in da.chunks_exact_mut(*cols).zip(g.chunks_exact(*len)) {
                            d_row[*start..*start + *len]
                                .iter_mut()
                                .zip(g_row)
                                .for_each(|(d, g)| *d += *g);
                        }
                    }
                }
                Op::Row { a, row, cols } => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da[row * cols..(row + 1) * cols]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, g)| *d += *g);
                    }
                }
                Op::Gather { a, idx } => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for (&i, g) in idx.iter().zip(&g) {
                            da[i] += *g;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
