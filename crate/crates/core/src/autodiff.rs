//! Reverse-mode automatic differentiation over scalar expression graphs.
//!
//! A [`Tape`] is an append-only Wengert list. Every recorded node keeps its
//! primal value together with the local partial derivatives with respect to
//! its operands, so [`Tape::backward`] is a single reverse sweep of
//! multiply-accumulate steps.
//!
//! Two fused n-ary nodes keep neural-network forward passes compact:
//! [`OpKind::Affine`] (`b + Σ wᵢ·xᵢ` over tape operands) and
//! [`OpKind::ConstDot`] (`b + Σ wᵢ·cᵢ` with constant `cᵢ`).
//!
//! [`Var`] wraps a node reference with operator overloading, and the [`Real`]
//! trait lets model code be written once and evaluated either on plain `f64`
//! or on the tape.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Ln,
    Exp,
    Sin,
    Cos,
    Sqrt,
    Tanh,
    Softplus,
    Square,
    Abs,
    Relu,
    /// `x + aux`
    AddConst,
    /// `x · aux`
    MulConst,
    /// Operands `[b, w₁..w_k, x₁..x_k]`, value `b + Σ wᵢ·xᵢ`.
    Affine,
    /// Operands `[b, w₁..w_k]` with constant coefficients, value `b + Σ wᵢ·cᵢ`.
    /// Only constructible through [`Tape::dot_const`].
    ConstDot,
}

impl OpKind {
    /// Every kind that takes tape operands, in a stable order.
    pub const COMPUTED: [OpKind; 19] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Ln,
        OpKind::Exp,
        OpKind::Sin,
        OpKind::Cos,
        OpKind::Sqrt,
        OpKind::Tanh,
        OpKind::Softplus,
        OpKind::Square,
        OpKind::Abs,
        OpKind::Relu,
        OpKind::AddConst,
        OpKind::MulConst,
        OpKind::Affine,
        OpKind::ConstDot,
    ];

    fn fixed_arity(self) -> Option<usize> {
        match self {
            OpKind::Leaf => Some(0),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => Some(2),
            OpKind::Affine | OpKind::ConstDot => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op:?} of non-positive value {value}")]
    Domain { op: OpKind, value: f64 },
    #[error("{op:?} expects {expected} operands, got {got}")]
    Arity { op: OpKind, expected: String, got: usize },
    #[error("{0:?} requires an auxiliary constant")]
    MissingAux(OpKind),
    #[error("{0:?} cannot be recorded through apply()")]
    Unsupported(OpKind),
    #[error("node {index} is not on this tape (length {len})")]
    UnknownNode { index: usize, len: usize },
}

/// Position of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef(u32);

impl NodeRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
struct Node {
    kind: OpKind,
    value: f64,
    aux: f64,
    start: u32,
    end: u32,
}

#[derive(Debug, Default)]
struct Store {
    nodes: Vec<Node>,
    operands: Vec<u32>,
    partials: Vec<f64>,
}

impl Store {
    fn push(&mut self, kind: OpKind, value: f64, aux: f64, ops: &[(u32, f64)]) -> NodeRef {
        let start = self.operands.len() as u32;
        for &(o, p) in ops {
            self.operands.push(o);
            self.partials.push(p);
        }
        let end = self.operands.len() as u32;
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            kind,
            value,
            aux,
            start,
            end,
        });
        NodeRef(idx)
    }

    fn value(&self, n: u32) -> f64 {
        self.nodes[n as usize].value
    }
}

/// Append-only record of one loss evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    store: RefCell<Store>,
}

/// Adjoints of every node with respect to one root.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    adjoints: Vec<f64>,
    leaves: Vec<bool>,
}

impl GradientVector {
    /// d(root)/d(node). Nodes recorded after the root have adjoint 0.
    pub fn wrt(&self, node: NodeRef) -> f64 {
        self.adjoints.get(node.index()).copied().unwrap_or(0.0)
    }

    /// Adjoints for a list of nodes (typically the weight leaves).
    pub fn collect(&self, nodes: &[NodeRef]) -> Vec<f64> {
        nodes.iter().map(|&n| self.wrt(n)).collect()
    }

    /// `(leaf, adjoint)` for every leaf on the tape.
    pub fn leaf_entries(&self) -> impl Iterator<Item = (NodeRef, f64)> + '_ {
        self.leaves
            .iter()
            .enumerate()
            .filter(|(_, &is_leaf)| is_leaf)
            .map(|(i, _)| (NodeRef(i as u32), self.adjoints[i]))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn abs_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            store: RefCell::new(Store {
                nodes: Vec::with_capacity(nodes),
                operands: Vec::with_capacity(nodes * 4),
                partials: Vec::with_capacity(nodes * 4),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.store.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        let s = self.store.get_mut();
        s.nodes.clear();
        s.operands.clear();
        s.partials.clear();
    }

    pub fn leaf(&self, value: f64) -> NodeRef {
        self.store.borrow_mut().push(OpKind::Leaf, value, 0.0, &[])
    }

    pub fn var(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            node: self.leaf(value),
        }
    }

    pub fn wrap(&self, node: NodeRef) -> Var<'_> {
        Var { tape: self, node }
    }

    pub fn value(&self, node: NodeRef) -> f64 {
        self.store.borrow().nodes[node.index()].value
    }

    pub fn kind(&self, node: NodeRef) -> OpKind {
        self.store.borrow().nodes[node.index()].kind
    }

    /// Operand references of a node, in recording order.
    pub fn operands(&self, node: NodeRef) -> Vec<NodeRef> {
        let s = self.store.borrow();
        let n = &s.nodes[node.index()];
        s.operands[n.start as usize..n.end as usize]
            .iter()
            .map(|&o| NodeRef(o))
            .collect()
    }

    /// Records `kind` applied to `operands`.
    pub fn apply(&self, kind: OpKind, operands: &[NodeRef], aux: Option<f64>) -> Result<NodeRef, AdError> {
        let len = self.len();
        if let Some(bad) = operands.iter().find(|o| o.index() >= len) {
            return Err(AdError::UnknownNode {
                index: bad.index(),
                len,
            });
        }
        match kind {
            OpKind::Leaf | OpKind::ConstDot => return Err(AdError::Unsupported(kind)),
            OpKind::Affine => {
                if operands.len().is_multiple_of(2) {
                    return Err(AdError::Arity {
                        op: kind,
                        expected: "an odd count 2k+1".into(),
                        got: operands.len(),
                    });
                }
                let k = operands.len() / 2;
                return Ok(self.affine_nodes(operands[0], &operands[1..=k], &operands[k + 1..]));
            }
            _ => {}
        }
        let arity = kind.fixed_arity().unwrap_or(0);
        if operands.len() != arity {
            return Err(AdError::Arity {
                op: kind,
                expected: arity.to_string(),
                got: operands.len(),
            });
        }
        if matches!(kind, OpKind::AddConst | OpKind::MulConst) && aux.is_none() {
            return Err(AdError::MissingAux(kind));
        }
        let mut s = self.store.borrow_mut();
        let a = operands[0].0;
        let x = s.value(a);
        let c = aux.unwrap_or(0.0);
        let node = match kind {
            OpKind::Add => {
                let b = operands[1].0;
                let y = s.value(b);
                s.push(kind, x + y, 0.0, &[(a, 1.0), (b, 1.0)])
            }
            OpKind::Sub => {
                let b = operands[1].0;
                let y = s.value(b);
                s.push(kind, x - y, 0.0, &[(a, 1.0), (b, -1.0)])
            }
            OpKind::Mul => {
                let b = operands[1].0;
                let y = s.value(b);
                s.push(kind, x * y, 0.0, &[(a, y), (b, x)])
            }
            OpKind::Div => {
                let b = operands[1].0;
                let y = s.value(b);
                s.push(kind, x / y, 0.0, &[(a, 1.0 / y), (b, -x / (y * y))])
            }
            OpKind::Neg => s.push(kind, -x, 0.0, &[(a, -1.0)]),
            OpKind::Ln => {
                if !(x > 0.0) {
                    return Err(AdError::Domain { op: kind, value: x });
                }
                s.push(kind, x.ln(), 0.0, &[(a, 1.0 / x)])
            }
            OpKind::Sqrt => {
                if !(x > 0.0) {
                    return Err(AdError::Domain { op: kind, value: x });
                }
                let r = x.sqrt();
                s.push(kind, r, 0.0, &[(a, 0.5 / r)])
            }
            OpKind::Exp => {
                let e = x.exp();
                s.push(kind, e, 0.0, &[(a, e)])
            }
            OpKind::Sin => s.push(kind, x.sin(), 0.0, &[(a, x.cos())]),
            OpKind::Cos => s.push(kind, x.cos(), 0.0, &[(a, -x.sin())]),
            OpKind::Tanh => {
                let th = x.tanh();
                s.push(kind, th, 0.0, &[(a, 1.0 - th * th)])
            }
            OpKind::Softplus => s.push(kind, softplus(x), 0.0, &[(a, sigmoid(x))]),
            OpKind::Square => s.push(kind, x * x, 0.0, &[(a, 2.0 * x)]),
            OpKind::Abs => s.push(kind, x.abs(), 0.0, &[(a, abs_grad(x))]),
            OpKind::Relu => {
                let (v, g) = if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) };
                s.push(kind, v, 0.0, &[(a, g)])
            }
            OpKind::AddConst => s.push(kind, x + c, c, &[(a, 1.0)]),
            OpKind::MulConst => s.push(kind, x * c, c, &[(a, c)]),
            OpKind::Leaf | OpKind::Affine | OpKind::ConstDot => unreachable!(),
        };
        Ok(node)
    }

    fn unary(&self, kind: OpKind, a: NodeRef, aux: Option<f64>) -> NodeRef {
        self.apply(kind, &[a], aux)
            .expect("infallible unary op on a valid node")
    }

    fn binary(&self, kind: OpKind, a: NodeRef, b: NodeRef) -> NodeRef {
        self.apply(kind, &[a, b], None).expect("binary op on valid nodes")
    }

    fn affine_nodes(&self, bias: NodeRef, weights: &[NodeRef], inputs: &[NodeRef]) -> NodeRef {
        assert_eq!(weights.len(), inputs.len(), "affine: length mismatch");
        let mut s = self.store.borrow_mut();
        let mut ops = Vec::with_capacity(1 + 2 * weights.len());
        let mut value = s.value(bias.0);
        ops.push((bias.0, 1.0));
        for (w, x) in weights.iter().zip(inputs) {
            let xv = s.value(x.0);
            value += s.value(w.0) * xv;
            ops.push((w.0, xv));
        }
        for (w, x) in weights.iter().zip(inputs) {
            ops.push((x.0, s.value(w.0)));
        }
        s.push(OpKind::Affine, value, 0.0, &ops)
    }

    /// `bias + Σ weightsᵢ · coeffsᵢ` with constant coefficients.
    pub fn dot_const(&self, bias: NodeRef, weights: &[NodeRef], coeffs: &[f64]) -> NodeRef {
        assert_eq!(weights.len(), coeffs.len(), "dot_const: length mismatch");
        let mut s = self.store.borrow_mut();
        let mut ops = Vec::with_capacity(1 + weights.len());
        let mut value = s.value(bias.0);
        ops.push((bias.0, 1.0));
        for (w, &c) in weights.iter().zip(coeffs) {
            value += s.value(w.0) * c;
            ops.push((w.0, c));
        }
        s.push(OpKind::ConstDot, value, 0.0, &ops)
    }

    /// Adjoints of every node with respect to `root`, by one reverse sweep.
    pub fn backward(&self, root: NodeRef) -> GradientVector {
        let s = self.store.borrow();
        let n = s.nodes.len();
        assert!(root.index() < n, "backward: root not on tape");
        let mut adj = vec![0.0; n];
        adj[root.index()] = 1.0;
        for i in (0..=root.index()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &s.nodes[i];
            for j in node.start as usize..node.end as usize {
                adj[s.operands[j] as usize] += a * s.partials[j];
            }
        }
        let leaves = s.nodes.iter().map(|nd| nd.kind == OpKind::Leaf).collect();
        GradientVector { adjoints: adj, leaves }
    }

    /// Recomputes every primal value from the leaves using only each node's
    /// kind and operands.
    pub fn reevaluate(&self) -> Vec<f64> {
        let s = self.store.borrow();
        let mut vals: Vec<f64> = Vec::with_capacity(s.nodes.len());
        for node in &s.nodes {
            let ops = &s.operands[node.start as usize..node.end as usize];
            let parts = &s.partials[node.start as usize..node.end as usize];
            let arg = |k: usize| vals[ops[k] as usize];
            let v = match node.kind {
                OpKind::Leaf => node.value,
                OpKind::Add => arg(0) + arg(1),
                OpKind::Sub => arg(0) - arg(1),
                OpKind::Mul => arg(0) * arg(1),
                OpKind::Div => arg(0) / arg(1),
                OpKind::Neg => -arg(0),
                OpKind::Ln => arg(0).ln(),
                OpKind::Exp => arg(0).exp(),
                OpKind::Sin => arg(0).sin(),
                OpKind::Cos => arg(0).cos(),
                OpKind::Sqrt => arg(0).sqrt(),
                OpKind::Tanh => arg(0).tanh(),
                OpKind::Softplus => softplus(arg(0)),
                OpKind::Square => arg(0) * arg(0),
                OpKind::Abs => arg(0).abs(),
                OpKind::Relu => arg(0).max(0.0),
                OpKind::AddConst => arg(0) + node.aux,
                OpKind::MulConst => arg(0) * node.aux,
                OpKind::Affine => {
                    let k = ops.len() / 2;
                    (0..k).fold(arg(0), |acc, i| acc + arg(1 + i) * arg(1 + k + i))
                }
                OpKind::ConstDot => (1..ops.len()).fold(arg(0), |acc, i| acc + arg(i) * parts[i]),
            };
            vals.push(v);
        }
        vals
    }

    /// Primal values as currently stored.
    pub fn values(&self) -> Vec<f64> {
        self.store.borrow().nodes.iter().map(|n| n.value).collect()
    }
}

/// A node on a specific tape, with arithmetic operators.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    node: NodeRef,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {})", self.node.index(), self.value())
    }
}

impl<'t> Var<'t> {
    pub fn node(self) -> NodeRef {
        self.node
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> f64 {
        self.tape.value(self.node)
    }

    fn same_tape(self, other: Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn lift(self, node: NodeRef) -> Var<'t> {
        Var { tape: self.tape, node }
    }

    fn un(self, kind: OpKind) -> Var<'t> {
        self.lift(self.tape.unary(kind, self.node, None))
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl<'t> $trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.same_tape(rhs);
                self.lift(self.tape.binary($kind, self.node, rhs.node))
            }
        }
    };
}

var_binop!(Add, add, OpKind::Add);
var_binop!(Sub, sub, OpKind::Sub);
var_binop!(Mul, mul, OpKind::Mul);
var_binop!(Div, div, OpKind::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.un(OpKind::Neg)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.lift(self.tape.unary(OpKind::AddConst, self.node, Some(rhs)))
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self + (-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.lift(self.tape.unary(OpKind::MulConst, self.node, Some(rhs)))
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self * (1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        (-rhs) + self
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let num = rhs.tape.var(self);
        num / rhs
    }
}

/// Scalar arithmetic shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living in the same context as `self`.
    fn constant_like(&self, v: f64) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn softplus(self) -> Self;
    fn square(self) -> Self;
    fn abs(self) -> Self;
    fn relu(self) -> Self;
    fn try_ln(self) -> Result<Self, AdError>;
    fn try_sqrt(self) -> Result<Self, AdError>;
    /// `bias + Σ weightsᵢ · inputsᵢ`.
    fn affine(bias: Self, weights: &[Self], inputs: &[Self]) -> Self;
    /// `bias + Σ weightsᵢ · inputsᵢ` with constant inputs.
    fn affine_const(bias: Self, weights: &[Self], inputs: &[f64]) -> Self;
}

impl Real for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn constant_like(&self, v: f64) -> f64 {
        v
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn sin(self) -> f64 {
        f64::sin(self)
    }
    fn cos(self) -> f64 {
        f64::cos(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn softplus(self) -> f64 {
        softplus(self)
    }
    fn square(self) -> f64 {
        self * self
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn relu(self) -> f64 {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn try_ln(self) -> Result<f64, AdError> {
        if self > 0.0 {
            Ok(self.ln())
        } else {
            Err(AdError::Domain {
                op: OpKind::Ln,
                value: self,
            })
        }
    }
    fn try_sqrt(self) -> Result<f64, AdError> {
        if self > 0.0 {
            Ok(self.sqrt())
        } else {
            Err(AdError::Domain {
                op: OpKind::Sqrt,
                value: self,
            })
        }
    }
    fn affine(bias: f64, weights: &[f64], inputs: &[f64]) -> f64 {
        weights.iter().zip(inputs).fold(bias, |acc, (w, x)| acc + w * x)
    }
    fn affine_const(bias: f64, weights: &[f64], inputs: &[f64]) -> f64 {
        Self::affine(bias, weights, inputs)
    }
}

impl<'t> Real for Var<'t> {
    fn value(&self) -> f64 {
        Var::value(*self)
    }
    fn constant_like(&self, v: f64) -> Var<'t> {
        self.tape.var(v)
    }
    fn exp(self) -> Self {
        self.un(OpKind::Exp)
    }
    fn sin(self) -> Self {
        self.un(OpKind::Sin)
    }
    fn cos(self) -> Self {
        self.un(OpKind::Cos)
    }
    fn tanh(self) -> Self {
        self.un(OpKind::Tanh)
    }
    fn softplus(self) -> Self {
        self.un(OpKind::Softplus)
    }
    fn square(self) -> Self {
        self.un(OpKind::Square)
    }
    fn abs(self) -> Self {
        self.un(OpKind::Abs)
    }
    fn relu(self) -> Self {
        self.un(OpKind::Relu)
    }
    fn try_ln(self) -> Result<Self, AdError> {
        let n = self.tape.apply(OpKind::Ln, &[self.node], None)?;
        Ok(self.lift(n))
    }
    fn try_sqrt(self) -> Result<Self, AdError> {
        let n = self.tape.apply(OpKind::Sqrt, &[self.node], None)?;
        Ok(self.lift(n))
    }
    fn affine(bias: Self, weights: &[Self], inputs: &[Self]) -> Self {
        let w: Vec<NodeRef> = weights.iter().map(|v| v.node).collect();
        let x: Vec<NodeRef> = inputs.iter().map(|v| v.node).collect();
        bias.lift(bias.tape.affine_nodes(bias.node, &w, &x))
    }
    fn affine_const(bias: Self, weights: &[Self], inputs: &[f64]) -> Self {
        let w: Vec<NodeRef> = weights.iter().map(|v| v.node).collect();
        bias.lift(bias.tape.dot_const(bias.node, &w, inputs))
    }
}
