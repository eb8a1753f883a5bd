//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Parameters live in a [`ParamStore`] and are bound onto the tape per pass;
//! [`Tape::backward`] walks the record in reverse, returns the gradients of
//! all leaves that require them and clears the tape.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(TensorError::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Samples entries uniformly from `[-scale, scale]`.
    pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Surfaces NaN/Inf as an error.
    pub fn validate(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(TensorError::NonFinite(format!("element {i} of {:?}", self.shape))),
            None => Ok(()),
        }
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(TensorError::Shape(format!("{what}: expected 2-D, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

/// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Parameters and optimizer
// ---------------------------------------------------------------------------

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Frozen parameters are bound as constants and never updated.
    pub trainable: bool,
}

/// Named parameter registry. Every tensor is registered exactly once.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::Contract(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.len()];
        self.params.push(Param { name: name.to_string(), value, grad, trainable });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the parameter gradients carried by `grads`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.params {
            let p = &mut self.params[id.0];
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Replaces values from `other`, which must hold the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Shape(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| TensorError::Contract(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(TensorError::Shape(format!(
                    "{}: {:?} vs {:?}",
                    p.name,
                    p.value.shape(),
                    src.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One bias-corrected Adam update; `step` is the 1-based update count.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamMoments,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(TensorError::Shape(format!(
            "adam: param {} grad {} m {} v {}",
            param.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let t = step.max(1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every trainable tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let moments = store.iter().map(|(_, p)| AdamMoments::new(p.value.len())).collect();
        Self { cfg, step: 0, moments }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> &AdamMoments {
        &self.moments[id.0]
    }

    /// Applies the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        for (i, p) in store.params.iter_mut().enumerate() {
            if p.trainable {
                adam_step(p.value.data_mut(), &p.grad, &mut self.moments[i], &self.cfg, self.step)?;
            }
        }
        store.zero_grad();
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Dropout { input: Var, mask: Vec<f64> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    SqDist(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad = true`.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }
}

/// Records one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    train: bool,
    dropout_rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Evaluation-mode tape (dropout is the identity).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            train: false,
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode tape; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self { train: true, dropout_rng: ChaCha8Rng::seed_from_u64(seed), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.train
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter, reusing the binding within this pass.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.bound.insert(id, v);
        v
    }

    // -- binary --------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_matrix("matmul lhs")?;
        let (k2, n) = self.value(b).as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(TensorError::Shape(format!("matmul: [{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(TensorError::Shape(format!(
                "add_bias: {:?} + {:?}",
                self.value(x).shape(),
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Matrix of squared Euclidean distances between rows of `a` and rows of `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.value(a).as_matrix("sq_dist lhs")?;
        let (n, d2) = self.value(b).as_matrix("sq_dist rhs")?;
        if d != d2 {
            return Err(TensorError::Shape(format!("sq_dist: width {d} vs {d2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..d).map(|k| (av[i * d + k] - bv[j * d + k]).powi(2)).sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::SqDist(a, b), rg))
    }

    // -- unary ---------------------------------------------------------------

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let value = Tensor { shape: src.shape.clone(), data: src.data.iter().map(|&v| f(v)).collect() };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).as_matrix("transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Shape(format!("concat: axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !ok {
                return Err(TensorError::Shape(format!("concat: {base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut shape = base;
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(Tensor { shape, data }, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Slice { input: x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Shape(format!("reduce: axis {axis} of {shape:?}")));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..alen {
                let base = (o * alen + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= alen as f64);
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(x);
        let op = if mean { Op::MeanAxis { input: x, axis } } else { Op::SumAxis { input: x, axis } };
        Ok(self.push(Tensor { shape: out_shape, data }, op, rg))
    }

    /// Sum along `axis`; the axis is kept with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`; the axis is kept with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Shape(format!("softmax: axis {axis} of {shape:?}")));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * alen + a) * inner + i;
                let max = (0..alen).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..alen).map(|a| (src[idx(a)] - max).exp()).sum();
                let lz = z.ln();
                for a in 0..alen {
                    let shifted = src[idx(a)] - max;
                    out[idx(a)] = if log { shifted - lz } else { shifted.exp() / z };
                }
            }
        }
        let rg = self.rg(x);
        let op = if log { Op::LogSoftmax { input: x, axis } } else { Op::Softmax { input: x, axis } };
        Ok(self.push(Tensor { shape, data: out }, op, rg))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Standardizes each row over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let n = self.value(x).cols();
        let src = self.value(x);
        let mut data = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.len() / n);
        for row in src.data.chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| (v - mu) * is));
        }
        let shape = src.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::LayerNorm { input: x, inv_std }, rg)
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.dropout_rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let src = self.value(x);
        let data = src.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor { shape: src.shape.clone(), data };
        let rg = self.rg(x);
        self.push(value, Op::Dropout { input: x, mask }, rg)
    }

    /// Gathers rows of a `V×D` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).as_matrix("embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding: no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Shape(format!("embedding: id {bad} >= vocab {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data },
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).as_matrix("l2_normalize_rows")?;
        let src = self.value(x);
        let mut norms = Vec::with_capacity(src.rows());
        let mut data = Vec::with_capacity(src.len());
        for row in src.data.chunks(n) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let shape = src.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::L2NormalizeRows { input: x, norms }, rg))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.bound.clear();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                op => propagate(op, &node.value, &g, &nodes, &mut grads),
            }
        }

        let mut out = Gradients::default();
        for (i, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
            match node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((id, g)),
                _ => {}
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn propagate(op: &Op, out: &Tensor, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[1];
            acc(grads, nodes, *a, |ga| gemm_nt(g, &val(*b).data, ga, m, n, k));
            acc(grads, nodes, *b, |gb| gemm_tn(&val(*a).data, g, gb, m, k, n));
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            acc(grads, nodes, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / bv[i];
                }
            });
            acc(grads, nodes, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        Op::AddBias(x, b) => {
            let n = val(*b).len();
            acc(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            acc(grads, nodes, *b, |gb| {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                }
            });
        }
        Op::Scale(x, f) => {
            acc(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += f * q));
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            acc(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
        }
        Op::Transpose(x) => {
            let (m, n) = (val(*x).shape[0], val(*x).shape[1]);
            acc(grads, nodes, *x, |gx| {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(&out.shape, *axis);
            let mut offset = 0;
            for v in inputs {
                let len = val(*v).shape[*axis];
                acc(grads, nodes, *v, |gv| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            gv[dst + i] += g[src + i];
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let (outer, alen, inner) = axis_split(&val(*input).shape, *axis);
            let len = out.shape[*axis];
            acc(grads, nodes, *input, |gx| {
                for o in 0..outer {
                    let dst = o * alen * inner + start * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        gx[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::Sum(x) => {
            acc(grads, nodes, *x, |gx| gx.iter_mut().for_each(|p| *p += g[0]));
        }
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            acc(grads, nodes, *x, |gx| gx.iter_mut().for_each(|p| *p += g[0] / n));
        }
        Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
            let (outer, alen, inner) = axis_split(&val(*input).shape, *axis);
            let f = if matches!(op, Op::MeanAxis { .. }) { 1.0 / alen as f64 } else { 1.0 };
            acc(grads, nodes, *input, |gx| {
                for o in 0..outer {
                    for a in 0..alen {
                        for i in 0..inner {
                            gx[(o * alen + a) * inner + i] += f * g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Softmax { input, axis } => {
            let (outer, alen, inner) = axis_split(&out.shape, *axis);
            let y = &out.data;
            acc(grads, nodes, *input, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * alen + a) * inner + i;
                        let dot: f64 = (0..alen).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..alen {
                            gx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { input, axis } => {
            let (outer, alen, inner) = axis_split(&out.shape, *axis);
            let y = &out.data;
            acc(grads, nodes, *input, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * alen + a) * inner + i;
                        let gsum: f64 = (0..alen).map(|a| g[idx(a)]).sum();
                        for a in 0..alen {
                            gx[idx(a)] += g[idx(a)] - y[idx(a)].exp() * gsum;
                        }
                    }
                }
            });
        }
        Op::LayerNorm { input, inv_std } => {
            let n = out.cols();
            acc(grads, nodes, *input, |gx| {
                for (r, is) in inv_std.iter().enumerate() {
                    let yr = &out.data[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] += is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            });
        }
        Op::Dropout { input, mask } => {
            acc(grads, nodes, *input, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            });
        }
        Op::Sigmoid(x) => {
            acc(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    let s = out.data[i];
                    gx[i] += g[i] * s * (1.0 - s);
                }
            });
        }
        Op::Tanh(x) => {
            acc(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    let t = out.data[i];
                    gx[i] += g[i] * (1.0 - t * t);
                }
            });
        }
        Op::Relu(x) => {
            let xv = &val(*x).data;
            acc(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = out.cols();
            acc(grads, nodes, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::L2NormalizeRows { input, norms } => {
            let n = out.cols();
            acc(grads, nodes, *input, |gx| {
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &out.data[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                    }
                }
            });
        }
        Op::SqDist(a, b) => {
            let (m, d) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[0];
            let (av, bv) = (&val(*a).data, &val(*b).data);
            acc(grads, nodes, *a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        let w = 2.0 * g[i * n + j];
                        for k in 0..d {
                            ga[i * d + k] += w * (av[i * d + k] - bv[j * d + k]);
                        }
                    }
                }
            });
            acc(grads, nodes, *b, |gb| {
                for i in 0..m {
                    for j in 0..n {
                        let w = 2.0 * g[i * n + j];
                        for k in 0..d {
                            gb[j * d + k] -= w * (av[i * d + k] - bv[j * d + k]);
                        }
                    }
                }
            });
        }
    }
}
