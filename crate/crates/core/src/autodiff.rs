//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to its
//! [`Tape`]. [`Tape::backward`] replays the nodes in reverse record order,
//! visiting each exactly once. A tape supports one backward pass per
//! generation; [`Tape::reset`] starts a new generation and invalidates every
//! handle issued before it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any tensor that requires grad")]
    Detached,
    #[error("backward already ran on this tape; call reset() first")]
    AlreadyBackpropagated,
    #[error("handle belongs to tape generation {handle}, tape is at {tape}")]
    StaleHandle { handle: u64, tape: u64 },
    #[error("handles from different tapes were combined")]
    ForeignTape,
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Backward rule: given the output gradient, the input values, the output
/// value and which inputs need a gradient, return one optional gradient per
/// input.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeState {
    generation: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    grads: Option<Vec<Option<Tensor>>>,
}

/// Operation record for one forward/backward pass. Not `Sync`: a tape is
/// owned by exactly one thread.
#[derive(Default)]
pub struct Tape {
    state: RefCell<TapeState>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    generation: u64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that takes no part in differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    /// Differentiable leaf bound to a stored parameter; repeated calls with
    /// the same id return the same node so shared weights accumulate.
    pub fn param<'t>(&'t self, store: &ParamStore, id: ParamId) -> Var<'t> {
        let existing = self.state.borrow().params.get(&id).copied();
        if let Some(node) = existing {
            return self.handle(node);
        }
        let var = self.leaf(store.get(id).clone());
        self.state.borrow_mut().params.insert(id, var.id);
        var
    }

    pub fn len(&self) -> usize {
        self.state.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generation(&self) -> u64 {
        self.state.borrow().generation
    }

    /// Drops every node and gradient; outstanding handles become stale.
    pub fn reset(&self) {
        let mut s = self.state.borrow_mut();
        s.generation += 1;
        s.nodes.clear();
        s.params.clear();
        s.grads = None;
    }

    fn handle(&self, id: usize) -> Var<'_> {
        Var {
            tape: self,
            id,
            generation: self.generation(),
        }
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut s = self.state.borrow_mut();
        s.nodes.push(node);
        Var {
            tape: self,
            id: s.nodes.len() - 1,
            generation: s.generation,
        }
    }

    /// Records an operation. `backward` is dropped when no input requires a
    /// gradient.
    pub(crate) fn record<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        for v in inputs {
            v.check(self)?;
        }
        let requires_grad = {
            let s = self.state.borrow();
            inputs.iter().any(|v| s.nodes[v.id].requires_grad)
        };
        Ok(self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        }))
    }

    /// Propagates d`loss`/d(node) to every differentiable node reachable
    /// from `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        loss.check(self)?;
        let mut s = self.state.borrow_mut();
        if s.grads.is_some() {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let root = &s.nodes[loss.id];
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(AutodiffError::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &s.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> =
                node.inputs.iter().map(|&i| s.nodes[i].value.clone()).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| s.nodes[i].requires_grad)
                .collect();
            let input_grads = backward(&g, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(ig) = ig else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(ig.shape(), s.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            // Interior gradients are only kept for leaves.
            grads[id] = None;
        }
        for (id, slot) in grads.iter_mut().enumerate() {
            if !s.nodes[id].inputs.is_empty() || !s.nodes[id].requires_grad {
                *slot = None;
            }
        }
        s.grads = Some(grads);
        Ok(())
    }

    /// Gradient of a differentiable leaf after [`Tape::backward`].
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        var.check(self).ok()?;
        let s = self.state.borrow();
        s.grads.as_ref()?.get(var.id)?.clone()
    }

    /// Gradients for every parameter of `store` used on this tape, in store
    /// order. Unused parameters get `None`.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let s = self.state.borrow();
        let Some(grads) = s.grads.as_ref() else {
            return vec![None; store.len()];
        };
        store
            .ids()
            .map(|id| {
                let node = *s.params.get(&id)?;
                grads
                    .get(node)
                    .cloned()
                    .flatten()
                    .or_else(|| Some(Tensor::zeros(s.nodes[node].value.shape())))
            })
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn check(&self, tape: &Tape) -> Result<()> {
        if !std::ptr::eq(self.tape, tape) {
            return Err(AutodiffError::ForeignTape);
        }
        let current = tape.generation();
        if self.generation != current {
            return Err(AutodiffError::StaleHandle {
                handle: self.generation,
                tape: current,
            });
        }
        Ok(())
    }

    pub(crate) fn val(&self) -> Result<Rc<Tensor>> {
        self.check(self.tape)?;
        Ok(self.tape.state.borrow().nodes[self.id].value.clone())
    }

    /// Shared reference to the recorded value. Panics on a stale handle.
    pub fn value_rc(&self) -> Rc<Tensor> {
        if let Err(e) = self.check(self.tape) {
            panic!("{e}");
        }
        self.tape.state.borrow().nodes[self.id].value.clone()
    }

    pub fn value(&self) -> Tensor {
        (*self.value_rc()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.state.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.state.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn unary(
        self,
        value: Tensor,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Result<Var<'t>> {
        self.tape.record(
            &[self],
            value,
            Box::new(move |g, ins, out, _| vec![Some(backward(g, &ins[0], out))]),
        )
    }

    // ----- elementwise -----------------------------------------------------

    /// Broadcasting sum (the ⊕ of feature maps and residual links).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.val()?, other.val()?);
        let out = tensor::broadcast_binary(&a, &b, |x, y| x + y)?;
        self.tape.record(
            &[self, other],
            out,
            Box::new(|g, ins, _, needs| {
                vec![
                    needs[0].then(|| tensor::sum_to_shape(g, ins[0].shape())),
                    needs[1].then(|| tensor::sum_to_shape(g, ins[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.val()?, other.val()?);
        let out = tensor::broadcast_binary(&a, &b, |x, y| x - y)?;
        self.tape.record(
            &[self, other],
            out,
            Box::new(|g, ins, _, needs| {
                vec![
                    needs[0].then(|| tensor::sum_to_shape(g, ins[0].shape())),
                    needs[1].then(|| tensor::sum_to_shape(&g.map(|x| -x), ins[1].shape())),
                ]
            }),
        )
    }

    /// Broadcasting elementwise product (⊗).
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.val()?, other.val()?);
        let out = tensor::broadcast_binary(&a, &b, |x, y| x * y)?;
        self.tape.record(
            &[self, other],
            out,
            Box::new(|g, ins, _, needs| {
                let (a, b) = (&ins[0], &ins[1]);
                let ga = needs[0].then(|| {
                    let eb = tensor::expand_to(b, g.shape());
                    tensor::sum_to_shape(&g.zip_map(&eb, |x, y| x * y), a.shape())
                });
                let gb = needs[1].then(|| {
                    let ea = tensor::expand_to(a, g.shape());
                    tensor::sum_to_shape(&g.zip_map(&ea, |x, y| x * y), b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.val()?, other.val()?);
        let out = tensor::broadcast_binary(&a, &b, |x, y| x / y)?;
        self.tape.record(
            &[self, other],
            out,
            Box::new(|g, ins, _, needs| {
                let (a, b) = (&ins[0], &ins[1]);
                let eb = tensor::expand_to(b, g.shape());
                let ga = needs[0]
                    .then(|| tensor::sum_to_shape(&g.zip_map(&eb, |x, y| x / y), a.shape()));
                let gb = needs[1].then(|| {
                    let ea = tensor::expand_to(a, g.shape());
                    let mut t = g.zip_map(&ea, |x, y| x * y);
                    for (v, &d) in t.data_mut().iter_mut().zip(eb.data()) {
                        *v = -*v / (d * d);
                    }
                    tensor::sum_to_shape(&t, b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let out = self.val()?.map(|x| x * factor);
        self.unary(out, move |g, _, _| g.map(|x| x * factor))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let out = self.val()?.map(|x| x + c);
        self.unary(out, |g, _, _| g.clone())
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let out = self.val()?.map(f64::exp);
        self.unary(out, |g, _, y| g.zip_map(y, |g, y| g * y))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        let out = self.val()?.map(f64::ln);
        self.unary(out, |g, x, _| g.zip_map(x, |g, x| g / x))
    }

    pub fn square(self) -> Result<Var<'t>> {
        let out = self.val()?.map(|x| x * x);
        self.unary(out, |g, x, _| g.zip_map(x, |g, x| 2.0 * g * x))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let out = self.val()?.map(f64::sqrt);
        self.unary(out, |g, _, y| g.zip_map(y, |g, y| 0.5 * g / y))
    }

    // ----- shape -----------------------------------------------------------

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.val()?.reshape(shape)?;
        self.unary(out, |g, x, _| {
            g.reshape(x.shape()).expect("reshape backward preserves length")
        })
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = tensor::permute(&*self.val()?, axes)?;
        let inverse = tensor::inverse_permutation(axes);
        self.unary(out, move |g, _, _| {
            tensor::permute(g, &inverse).expect("valid inverse permutation")
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                msg: format!("rank {rank} < 2"),
            }
            .into());
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Shape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.val()).collect::<Result<_>>()?;
        let rank = values[0].rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank }.into());
        }
        for v in &values[1..] {
            let ok = v.rank() == rank
                && (0..rank).all(|d| d == axis || v.shape()[d] == values[0].shape()[d]);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    msg: format!("{:?} vs {:?} along axis {axis}", values[0].shape(), v.shape()),
                }
                .into());
            }
        }
        let outer: usize = values[0].shape()[..axis].iter().product();
        let inner: usize = values[0].shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = values[0].shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let out = Tensor::new(shape, data)?;
        tape.record(
            parts,
            out,
            Box::new(move |g, ins, _, needs| {
                let mut grads = Vec::with_capacity(ins.len());
                let mut offset = 0;
                for (k, x) in ins.iter().enumerate() {
                    let e = extents[k];
                    if needs[k] {
                        let mut d = Vec::with_capacity(x.len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + e * inner]);
                        }
                        grads.push(Some(Tensor::new(x.shape(), d).expect("concat slice")));
                    } else {
                        grads.push(None);
                    }
                    offset += e;
                }
                grads
            }),
        )
    }

    // ----- linear algebra --------------------------------------------------

    /// Matrix product, plain (`M×K · K×N`) or batched (`B×M×K · B×K×N`).
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.val()?, other.val()?);
        let out = tensor::matmul(&a, &b)?;
        self.tape.record(
            &[self, other],
            out,
            Box::new(|g, ins, _, needs| {
                let (a, b) = (&ins[0], &ins[1]);
                let (batch, m, k, n) = match a.shape() {
                    &[m, k] => (1, m, k, b.shape()[1]),
                    &[bs, m, k] => (bs, m, k, b.shape()[2]),
                    _ => unreachable!("matmul shapes validated in forward"),
                };
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; a.len()];
                    for i in 0..batch {
                        tensor::gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &b.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut d[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    Tensor::new(a.shape(), d).expect("dA shape")
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; b.len()];
                    for i in 0..batch {
                        tensor::gemm(
                            k,
                            m,
                            n,
                            &a.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &mut d[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    Tensor::new(b.shape(), d).expect("dB shape")
                });
                vec![ga, gb]
            }),
        )
    }

    // ----- reductions ------------------------------------------------------

    pub fn reduce(self, op: ReduceOp, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        let x = self.val()?;
        let plan = ReducePlan::new(x.shape(), axes)?;
        let (out, argmax) = plan.forward(&x, op);
        let out_shape = plan.out_shape(keep_dims);
        let out = out.reshape(out_shape)?;
        self.tape.record(
            &[self],
            out,
            Box::new(move |g, ins, _, _| vec![Some(plan.backward(g, ins[0].shape(), op, &argmax))]),
        )
    }

    pub fn sum(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Sum, axes, keep_dims)
    }

    pub fn mean(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Mean, axes, keep_dims)
    }

    pub fn max(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Max, axes, keep_dims)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes, false)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean(&axes, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Gradient goes to the first (lowest flat index) maximum.
    Max,
}

/// Splits a shape into kept and reduced axes and maps flat indices between
/// the input and the reduced output.
struct ReducePlan {
    in_shape: Vec<usize>,
    reduced: Vec<bool>,
    out_len: usize,
    group: usize,
}

impl ReducePlan {
    fn new(shape: &[usize], axes: &[usize]) -> tensor::Result<Self> {
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::InvalidAxis { axis: a, rank });
            }
            reduced[a] = true;
        }
        let out_len = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .product();
        let group = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&e, _)| e)
            .product();
        Ok(Self {
            in_shape: shape.to_vec(),
            reduced,
            out_len,
            group,
        })
    }

    fn out_shape(&self, keep_dims: bool) -> Vec<usize> {
        self.in_shape
            .iter()
            .zip(&self.reduced)
            .filter_map(|(&e, &r)| match (r, keep_dims) {
                (true, true) => Some(1),
                (true, false) => None,
                (false, _) => Some(e),
            })
            .collect()
    }

    /// Output flat index of every input element, in input order.
    fn out_index(&self) -> Vec<usize> {
        let rank = self.in_shape.len();
        let mut out_strides = vec![0; rank];
        let mut s = 1;
        for d in (0..rank).rev() {
            if !self.reduced[d] {
                out_strides[d] = s;
                s *= self.in_shape[d];
            }
        }
        let n: usize = self.in_shape.iter().product();
        let mut idx = vec![0usize; rank];
        let mut o = 0usize;
        let mut map = Vec::with_capacity(n);
        for _ in 0..n {
            map.push(o);
            for d in (0..rank).rev() {
                idx[d] += 1;
                o += out_strides[d];
                if idx[d] < self.in_shape[d] {
                    break;
                }
                o -= out_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        map
    }

    fn forward(&self, x: &Tensor, op: ReduceOp) -> (Tensor, Vec<usize>) {
        let map = self.out_index();
        let mut out = vec![
            match op {
                ReduceOp::Max => f64::NEG_INFINITY,
                _ => 0.0,
            };
            self.out_len
        ];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (&o, &v) in map.iter().zip(x.data()) {
                    out[o] += v;
                }
                if op == ReduceOp::Mean {
                    let inv = 1.0 / self.group as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceOp::Max => {
                argmax = vec![usize::MAX; self.out_len];
                for (i, (&o, &v)) in map.iter().zip(x.data()).enumerate() {
                    // strict comparison keeps the lowest index on ties
                    if argmax[o] == usize::MAX || v > out[o] {
                        out[o] = v;
                        argmax[o] = i;
                    }
                }
            }
        }
        (Tensor::new([self.out_len], out).expect("reduce out"), argmax)
    }

    fn backward(&self, g: &Tensor, in_shape: &[usize], op: ReduceOp, argmax: &[usize]) -> Tensor {
        let n: usize = in_shape.iter().product();
        let mut d = vec![0.0; n];
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let scale = if op == ReduceOp::Mean {
                    1.0 / self.group as f64
                } else {
                    1.0
                };
                for (i, &o) in self.out_index().iter().enumerate() {
                    d[i] = g.data()[o] * scale;
                }
            }
            ReduceOp::Max => {
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] += g.data()[o];
                }
            }
        }
        Tensor::new(in_shape, d).expect("reduce grad")
    }
}
