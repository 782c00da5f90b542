use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is expanded to the left operand's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Same shape.
    Full,
    /// Right operand is `rows × 1`; one value per row.
    PerRow,
    /// Right operand is `1 × cols` (or a length-`cols` vector); one value per column.
    PerCol,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    MulScalar,
    Scale,
    AddConst,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
    Pow,
    Min,
    Max,
    Clamp,
    Softmax,
    Sum,
    SumAxis,
    MeanAxis,
    LogSumExp,
    GatherCols,
    SliceRows,
    ConcatRows,
    GroupMax,
    Interpolate,
    Reshape,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Scale => "scale",
            OpKind::AddConst => "add_const",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Sqrt => "sqrt",
            OpKind::Pow => "pow",
            OpKind::Min => "min",
            OpKind::Max => "max",
            OpKind::Clamp => "clamp",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::LogSumExp => "logsumexp",
            OpKind::GatherCols => "gather_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GroupMax => "group_max",
            OpKind::Interpolate => "interpolate",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 31] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::MulScalar,
    OpKind::Scale,
    OpKind::AddConst,
    OpKind::Sigmoid,
    OpKind::Relu,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Abs,
    OpKind::Sqrt,
    OpKind::Pow,
    OpKind::Min,
    OpKind::Max,
    OpKind::Clamp,
    OpKind::Softmax,
    OpKind::Sum,
    OpKind::SumAxis,
    OpKind::MeanAxis,
    OpKind::LogSumExp,
    OpKind::GatherCols,
    OpKind::SliceRows,
    OpKind::ConcatRows,
    OpKind::GroupMax,
    OpKind::Interpolate,
    OpKind::Reshape,
];

/// Element-wise operation selector for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Relu,
    Scale(f64),
    Log,
    Exp,
    Abs,
    Min,
    Max,
}

/// Backward-rule fault injection, used to prove the gradient checker catches
/// a broken rule. Thread-local so concurrent tests do not interfere.
pub mod fault {
    use super::OpKind;
    use std::cell::Cell;

    thread_local! {
        static FLIPPED: Cell<Option<OpKind>> = const { Cell::new(None) };
    }

    /// Negates every gradient produced by the backward rule of `kind` on this
    /// thread until [`clear`] is called.
    pub fn flip_sign(kind: OpKind) {
        FLIPPED.with(|f| f.set(Some(kind)));
    }

    pub fn clear() {
        FLIPPED.with(|f| f.set(None));
    }

    pub(crate) fn active() -> Option<OpKind> {
        FLIPPED.with(|f| f.get())
    }
}

#[derive(Clone, Copy, Debug)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Bin, Var, Var, Broadcast),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Unary(Unary, Var),
    Pow(Var, f64),
    Select { a: Var, b: Var, take_a: Vec<bool>, max: bool },
    Clamp(Var, f64, f64),
    Softmax { axis: usize, x: Var },
    Sum(Var),
    SumAxis { x: Var, axis: usize, mean: bool },
    LogSumExp(Var),
    GatherCols(Var, Vec<usize>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GroupMax(Var, Vec<usize>),
    Interpolate { x: Var, idx: Arc<Vec<usize>>, w: Arc<Vec<f64>>, k: usize },
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Binary(Bin::Add, ..) => OpKind::Add,
            Op::Binary(Bin::Sub, ..) => OpKind::Sub,
            Op::Binary(Bin::Mul, ..) => OpKind::Mul,
            Op::Binary(Bin::Div, ..) => OpKind::Div,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(..) => OpKind::AddConst,
            Op::Unary(Unary::Sigmoid, _) => OpKind::Sigmoid,
            Op::Unary(Unary::Relu, _) => OpKind::Relu,
            Op::Unary(Unary::Exp, _) => OpKind::Exp,
            Op::Unary(Unary::Log, _) => OpKind::Log,
            Op::Unary(Unary::Abs, _) => OpKind::Abs,
            Op::Unary(Unary::Sqrt, _) => OpKind::Sqrt,
            Op::Pow(..) => OpKind::Pow,
            Op::Select { max: false, .. } => OpKind::Min,
            Op::Select { max: true, .. } => OpKind::Max,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sum(..) => OpKind::Sum,
            Op::SumAxis { mean: false, .. } => OpKind::SumAxis,
            Op::SumAxis { mean: true, .. } => OpKind::MeanAxis,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::GatherCols(..) => OpKind::GatherCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GroupMax(..) => OpKind::GroupMax,
            Op::Interpolate { .. } => OpKind::Interpolate,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass. Nodes are appended in evaluation
/// order, so the append order is a topological order and backward walks it in
/// reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fingerprint: Option<u64>,
}

/// Gradients of a scalar with respect to every node of the graph it came from.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when `v` is unreachable from the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// One gradient per parameter in `store`; parameters the loss never touched get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                out[id.index()] = g.clone();
            }
        }
        out
    }
}

fn fnv_mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3)
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 2 {
        (shape[0], shape[1])
    } else {
        (1, shape[0])
    }
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Full);
    }
    let (r, c) = as_2d(a);
    match b {
        [br, 1] if *br == r => Some(Broadcast::PerRow),
        [1, bc] if *bc == c => Some(Broadcast::PerCol),
        [bc] if *bc == c && a.len() == 2 => Some(Broadcast::PerCol),
        _ => None,
    }
}

#[inline]
fn bidx(bc: Broadcast, i: usize, j: usize, cols: usize) -> usize {
    match bc {
        Broadcast::Full => i * cols + j,
        Broadcast::PerRow => i,
        Broadcast::PerCol => j,
    }
}

/// `a (m×k) · b (k×n)`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
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
    out
}

/// `g (m×n) · bᵀ` where `b` is `k×n`; result `m×k`.
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result `k×n`.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
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
    out
}

fn sigmoid(x: f64) -> f64 {
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

    /// A graph that also hashes every piecewise branch taken (ReLU signs,
    /// max-pool winners, min/max picks, clamp hits, recorded selections).
    /// Finite-difference checks use it to detect steps that straddle a kink.
    pub fn with_fingerprint() -> Self {
        Self {
            fingerprint: Some(0xcbf2_9ce4_8422_2325),
            ..Self::default()
        }
    }

    pub fn fingerprint(&self) -> Option<u64> {
        self.fingerprint
    }

    /// Mixes externally made discrete choices (e.g. top-k indices) into the fingerprint.
    pub fn record_decision(&mut self, choices: &[usize]) {
        if let Some(h) = self.fingerprint.as_mut() {
            for &c in choices {
                *h = fnv_mix(*h, c as u64 + 1);
            }
            *h = fnv_mix(*h, u64::MAX);
        }
    }

    fn record_bits(&mut self, bits: impl Iterator<Item = bool>) {
        if let Some(h) = self.fingerprint.as_mut() {
            let mut acc = *h;
            for b in bits {
                acc = fnv_mix(acc, b as u64 + 7);
            }
            *h = fnv_mix(acc, u64::MAX - 1);
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls within one graph return
    /// the same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Makes later `param(id)` calls return `v` instead of a fresh leaf.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    fn binary(&mut self, kind: Bin, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        };
        let bc = broadcast_kind(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::shape(name, self.shape(a), self.shape(b)))?;
        let (r, c) = as_2d(self.shape(a));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if let Bin::Div = kind {
            if bv.iter().any(|&x| x == 0.0) {
                return Err(Error::domain("div", "division by zero"));
            }
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = av[i * c + j];
                let y = bv[bidx(bc, i, j, c)];
                out.push(match kind {
                    Bin::Add => x + y,
                    Bin::Sub => x - y,
                    Bin::Mul => x * y,
                    Bin::Div => x / y,
                });
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary(kind, a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    /// `a * s` where `s` is a single-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x += c);
        let rg = self.rg(a);
        self.push(t, Op::AddConst(a), rg)
    }

    /// `c - a`, element-wise.
    pub fn rsub_const(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_const(n, c)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        match kind {
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::domain("log", format!("non-positive input {bad}")));
                }
            }
            Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
                    return Err(Error::domain("sqrt", format!("negative input {bad}")));
                }
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
        };
        let mut t = x.clone();
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        if matches!(kind, Unary::Relu | Unary::Abs) && self.fingerprint.is_some() {
            let bits: Vec<bool> = self.value(a).data().iter().map(|&v| v > 0.0).collect();
            self.record_bits(bits.into_iter());
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::Unary(kind, a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a).expect("abs is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    /// `a^p` for a constant exponent `p ≥ 0`; inputs must be non-negative.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        if p < 0.0 || !p.is_finite() {
            return Err(Error::invalid("pow", format!("exponent {p} unsupported")));
        }
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::domain("pow", format!("negative base {bad}")));
        }
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.powf(p));
        let rg = self.rg(a);
        Ok(self.push(t, Op::Pow(a, p), rg))
    }

    fn select(&mut self, a: Var, b: Var, max: bool) -> Result<Var> {
        let name = if max { "max" } else { "min" };
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        // ties resolve to the first operand
        let take_a: Vec<bool> = av
            .iter()
            .zip(bv)
            .map(|(x, y)| if max { x >= y } else { x <= y })
            .collect();
        let out: Vec<f64> = take_a
            .iter()
            .zip(av.iter().zip(bv))
            .map(|(&t, (x, y))| if t { *x } else { *y })
            .collect();
        let shape = self.shape(a).to_vec();
        self.record_bits(take_a.iter().copied());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Select { a, b, take_a, max }, rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.select(a, b, false)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.select(a, b, true)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        if self.fingerprint.is_some() {
            let bits: Vec<bool> = self
                .value(a)
                .data()
                .iter()
                .map(|&v| (lo..=hi).contains(&v))
                .collect();
            self.record_bits(bits.into_iter());
        }
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    /// Dispatches one of the element-wise kinds; binary kinds take two inputs.
    pub fn elementwise(&mut self, kind: ElementwiseKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            ElementwiseKind::Add
            | ElementwiseKind::Sub
            | ElementwiseKind::Mul
            | ElementwiseKind::Min
            | ElementwiseKind::Max => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(
                "elementwise",
                format!("{kind:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        let a = inputs[0];
        match kind {
            ElementwiseKind::Add => self.add(a, inputs[1]),
            ElementwiseKind::Sub => self.sub(a, inputs[1]),
            ElementwiseKind::Mul => self.mul(a, inputs[1]),
            ElementwiseKind::Min => self.minimum(a, inputs[1]),
            ElementwiseKind::Max => self.maximum(a, inputs[1]),
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseKind::Relu => Ok(self.relu(a)),
            ElementwiseKind::Scale(c) => Ok(self.scale(a, c)),
            ElementwiseKind::Log => self.log(a),
            ElementwiseKind::Exp => Ok(self.exp(a)),
            ElementwiseKind::Abs => Ok(self.abs(a)),
        }
    }

    /// Softmax along `axis` (1: across the columns of each row; 0: across the
    /// rows of each column). A 1-D input is a single row and takes axis 0 or 1.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(a, axis, None)
    }

    /// Softmax where entries with `keep[i] == false` are excluded and output
    /// exactly zero. A group with every entry excluded is rejected.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = as_2d(&shape);
        let axis = if shape.len() == 1 { 1 } else { axis };
        if axis > 1 {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range")));
        }
        if let Some(k) = keep {
            if k.len() != r * c {
                return Err(Error::shape("softmax", &shape, &[k.len()]));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let (groups, glen) = if axis == 1 { (r, c) } else { (c, r) };
        for g in 0..groups {
            let at = |t: usize| if axis == 1 { g * c + t } else { t * c + g };
            let kept = |t: usize| keep.map_or(true, |k| k[at(t)]);
            let mut mx = f64::NEG_INFINITY;
            let mut any = false;
            for t in 0..glen {
                if kept(t) {
                    any = true;
                    let v = x[at(t)];
                    mx = if v.is_nan() || mx.is_nan() { f64::NAN } else { mx.max(v) };
                }
            }
            if !any {
                return Err(Error::invalid("softmax", "every entry of a group is masked"));
            }
            let mut s = 0.0;
            for t in 0..glen {
                if kept(t) {
                    let e = (x[at(t)] - mx).exp();
                    out[at(t)] = e;
                    s += e;
                }
            }
            for t in 0..glen {
                out[at(t)] /= s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { axis, x: a }, rg))
    }

    /// Sum of all entries, as a length-1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || axis > 1 {
            return Err(Error::invalid(
                "reduce_axis",
                format!("needs a matrix and axis 0/1, got {shape:?} axis {axis}"),
            ));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.value(a).data();
        let (out, oshape) = if axis == 1 {
            let mut o = vec![0.0; r];
            for i in 0..r {
                o[i] = x[i * c..(i + 1) * c].iter().sum();
                if mean {
                    o[i] /= c as f64;
                }
            }
            (o, [r, 1])
        } else {
            let mut o = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    o[j] += x[i * c + j];
                }
            }
            if mean {
                o.iter_mut().for_each(|v| *v /= r as f64);
            }
            (o, [1, c])
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::SumAxis { x: a, axis, mean }, rg))
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean along `axis`, keeping it as a size-1 dimension.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Numerically stable `ln Σ exp(x)` over all entries.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.iter().map(|v| (v - mx).exp()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(mx + s.ln()), Op::LogSumExp(a), rg)
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = as_2d(&shape);
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(
                "gather_cols",
                format!("column {bad} out of range for {shape:?}"),
            ));
        }
        let x = self.value(a).data();
        let n = idx.len();
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            for (t, &j) in idx.iter().enumerate() {
                out[i * n + t] = row[j];
            }
        }
        let oshape: Vec<usize> = if shape.len() == 2 { vec![r, n] } else { vec![n] };
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::GatherCols(a, idx.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start >= end || end > shape[0] {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{end} invalid for {shape:?}"),
            ));
        }
        let c = shape[1];
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[end - start, c], data)?, Op::SliceRows(a, start), rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "nothing to concatenate"))?;
        let c = as_2d(self.shape(*first)).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            let (pr, pc) = as_2d(s);
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Max over consecutive column groups of width `group`: `r × (m·group)` → `r × m`.
    /// Ties go to the lowest column, which also receives the gradient.
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = as_2d(&shape);
        if group == 0 || c % group != 0 {
            return Err(Error::invalid(
                "group_max",
                format!("{c} columns not divisible into groups of {group}"),
            ));
        }
        let m = c / group;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * m];
        let mut arg = vec![0usize; r * m];
        for i in 0..r {
            for g in 0..m {
                let base = i * c + g * group;
                let mut best = base;
                for t in base + 1..base + group {
                    if x[t] > x[best] {
                        best = t;
                    }
                }
                out[i * m + g] = x[best];
                arg[i * m + g] = best;
            }
        }
        self.record_decision(&arg);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, m], out)?, Op::GroupMax(a, arg), rg))
    }

    /// Weighted gather of columns: output column `p` is
    /// `Σ_t w[p·k + t] · x[:, idx[p·k + t]]`. Weights are constants.
    pub fn interpolate(&mut self, a: Var, idx: Vec<usize>, w: Vec<f64>, k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = as_2d(&shape);
        if k == 0 || idx.len() != w.len() || idx.len() % k != 0 {
            return Err(Error::invalid("interpolate", "index/weight layout mismatch"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid("interpolate", format!("column {bad} out of range")));
        }
        let n = idx.len() / k;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            for p in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += w[p * k + t] * row[idx[p * k + t]];
                }
                out[i * n + p] = s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[r, n], out)?,
            Op::Interpolate {
                x: a,
                idx: Arc::new(idx),
                w: Arc::new(w),
                k,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let flipped = fault::active();
        let mut pending: Vec<(Var, Tensor)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.local_grads(node, &g, &mut pending);
                if flipped == Some(node.op.kind()) {
                    for (_, t) in pending.iter_mut() {
                        t.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                }
                for (v, t) in pending.drain(..) {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(a, b)| *a += b),
                        slot => *slot = Some(t),
                    }
                }
            }
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| p.index());
        Ok(Gradients {
            grads,
            params,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor, out: &mut Vec<(Var, Tensor)>) {
        let gd = g.data();
        let shaped = |like: Var, data: Vec<f64>| {
            Tensor::new(self.shape(like), data).expect("gradient matches input shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    out.push((*a, shaped(*a, mm_nt(gd, self.value(*b).data(), m, n, k))));
                }
                if self.rg(*b) {
                    out.push((*b, shaped(*b, mm_tn(self.value(*a).data(), gd, m, k, n))));
                }
            }
            Op::Transpose(a) => {
                let t = g.transpose();
                out.push((*a, shaped(*a, t.into_data())));
            }
            Op::Binary(kind, a, b, bc) => {
                let (r, c) = as_2d(node.value.shape());
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let da: Vec<f64> = match kind {
                        Bin::Add | Bin::Sub => gd.to_vec(),
                        Bin::Mul | Bin::Div => {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                for j in 0..c {
                                    let y = bv[bidx(*bc, i, j, c)];
                                    let gv = gd[i * c + j];
                                    d.push(if let Bin::Mul = kind { gv * y } else { gv / y });
                                }
                            }
                            d
                        }
                    };
                    out.push((*a, shaped(*a, da)));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..r {
                        for j in 0..c {
                            let t = bidx(*bc, i, j, c);
                            let gv = gd[i * c + j];
                            db[t] += match kind {
                                Bin::Add => gv,
                                Bin::Sub => -gv,
                                Bin::Mul => gv * av[i * c + j],
                                Bin::Div => -gv * av[i * c + j] / (bv[t] * bv[t]),
                            };
                        }
                    }
                    out.push((*b, shaped(*b, db)));
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.rg(*a) {
                    out.push((*a, shaped(*a, gd.iter().map(|v| v * sv).collect())));
                }
                if self.rg(*s) {
                    let ds: f64 = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    out.push((*s, shaped(*s, vec![ds])));
                }
            }
            Op::Scale(a, c) => out.push((*a, shaped(*a, gd.iter().map(|v| v * c).collect()))),
            Op::AddConst(a) | Op::Reshape(a) => out.push((*a, shaped(*a, gd.to_vec()))),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d: Vec<f64> = (0..gd.len())
                    .map(|i| {
                        gd[i]
                            * match kind {
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Relu => (x[i] > 0.0) as u8 as f64,
                                Unary::Exp => y[i],
                                Unary::Log => 1.0 / x[i],
                                Unary::Abs => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else if x[i] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sqrt => 0.5 / y[i],
                            }
                    })
                    .collect();
                out.push((*a, shaped(*a, d)));
            }
            Op::Pow(a, p) => {
                let x = self.value(*a).data();
                let d = (0..gd.len())
                    .map(|i| {
                        if *p == 0.0 {
                            0.0
                        } else {
                            gd[i] * p * x[i].powf(p - 1.0)
                        }
                    })
                    .collect();
                out.push((*a, shaped(*a, d)));
            }
            Op::Select { a, b, take_a, .. } => {
                if self.rg(*a) {
                    let d = gd.iter().zip(take_a).map(|(v, &t)| if t { *v } else { 0.0 }).collect();
                    out.push((*a, shaped(*a, d)));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(take_a).map(|(v, &t)| if t { 0.0 } else { *v }).collect();
                    out.push((*b, shaped(*b, d)));
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(v, xv)| if (*lo..=*hi).contains(xv) { *v } else { 0.0 })
                    .collect();
                out.push((*a, shaped(*a, d)));
            }
            Op::Softmax { axis, x } => {
                let (r, c) = as_2d(node.value.shape());
                let y = node.value.data();
                let mut d = vec![0.0; r * c];
                let (groups, glen) = if *axis == 1 { (r, c) } else { (c, r) };
                for grp in 0..groups {
                    let at = |t: usize| if *axis == 1 { grp * c + t } else { t * c + grp };
                    let dot: f64 = (0..glen).map(|t| y[at(t)] * gd[at(t)]).sum();
                    for t in 0..glen {
                        d[at(t)] = y[at(t)] * (gd[at(t)] - dot);
                    }
                }
                out.push((*x, shaped(*x, d)));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                out.push((*a, shaped(*a, vec![gd[0]; n])));
            }
            Op::SumAxis { x, axis, mean } => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut d = vec![0.0; r * c];
                let div = if *mean {
                    if *axis == 1 {
                        c as f64
                    } else {
                        r as f64
                    }
                } else {
                    1.0
                };
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = if *axis == 1 { gd[i] } else { gd[j] } / div;
                    }
                }
                out.push((*x, shaped(*x, d)));
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a).data();
                let l = node.value.data()[0];
                let d = x.iter().map(|v| gd[0] * (v - l).exp()).collect();
                out.push((*a, shaped(*a, d)));
            }
            Op::GatherCols(a, idx) => {
                let (r, c) = as_2d(self.shape(*a));
                let n = idx.len();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for (t, &j) in idx.iter().enumerate() {
                        d[i * c + j] += gd[i * n + t];
                    }
                }
                out.push((*a, shaped(*a, d)));
            }
            Op::SliceRows(a, start) => {
                let s = self.shape(*a);
                let c = s[1];
                let mut d = vec![0.0; s[0] * c];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                out.push((*a, shaped(*a, d)));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        out.push((p, shaped(p, gd[off..off + n].to_vec())));
                    }
                    off += n;
                }
            }
            Op::GroupMax(a, arg) => {
                let mut d = vec![0.0; self.value(*a).len()];
                for (o, &src) in arg.iter().enumerate() {
                    d[src] += gd[o];
                }
                out.push((*a, shaped(*a, d)));
            }
            Op::Interpolate { x, idx, w, k } => {
                let (r, c) = as_2d(self.shape(*x));
                let n = idx.len() / k;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for p in 0..n {
                        let gv = gd[i * n + p];
                        for t in 0..*k {
                            d[i * c + idx[p * k + t]] += w[p * k + t] * gv;
                        }
                    }
                }
                out.push((*x, shaped(*x, d)));
            }
        }
    }
}
