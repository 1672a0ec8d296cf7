use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels::{self, Conv1dGeom, Conv2dGeom, GroupNormStats, PadMode, PoolMode};
use super::{invalid, mismatch, Real, Result, Tensor, TensorError};

/// How the right operand of a binary op maps onto the left operand's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[n, c]` against `[n, c, h, w]`.
    Channel,
    /// `[n, 1, h, w]` against `[n, c, h, w]`.
    Spatial,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: Conv2dGeom,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: Conv1dGeom,
    },
    GlobalPool {
        x: usize,
        mode: PoolMode,
        arg: Vec<u32>,
    },
    ChannelPool {
        x: usize,
        mode: PoolMode,
        arg: Vec<u32>,
    },
    Pool2 {
        x: usize,
        mode: PoolMode,
        arg: Vec<u32>,
    },
    Upsample {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Scale {
        x: usize,
        k: T,
    },
    SoftmaxFirst {
        a: usize,
        b: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
    },
    Slice {
        x: usize,
        lo: usize,
    },
    Interleave {
        a: usize,
        b: usize,
    },
    Exchange {
        a: usize,
        b: usize,
        parity: usize,
    },
    Reshape {
        x: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        group_size: usize,
        stats: GroupNormStats<T>,
    },
    Sum {
        x: usize,
    },
    BceDice {
        pred: usize,
        target: usize,
    },
}

enum Value<T> {
    Dense(Tensor<T>),
    Meta(Vec<usize>),
}

impl<T: Real> Value<T> {
    fn shape(&self) -> &[usize] {
        match self {
            Value::Dense(t) => t.shape(),
            Value::Meta(s) => s,
        }
    }

    fn dense(&self) -> &Tensor<T> {
        match self {
            Value::Dense(t) => t,
            Value::Meta(_) => panic!("dense value requested from a shape-only tape"),
        }
    }
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Records are kept in creation order, which is a valid topological order;
/// [`Tape::backward`] walks them in reverse. A tape built with
/// [`Tape::shape_only`] propagates shapes and counts operations without
/// touching any data.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    meta: bool,
    flops: Cell<u64>,
    macs: Cell<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            meta: false,
            flops: Cell::new(0),
            macs: Cell::new(0),
        }
    }

    pub fn shape_only() -> Self {
        Self {
            meta: true,
            ..Self::new()
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.meta
    }

    /// Floating-point operations recorded so far (convolutions as
    /// 2·multiply-accumulate, other ops one per output element).
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Convolution multiply-accumulates recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    fn count_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let value = if self.meta {
            Value::Meta(value.shape().to_vec())
        } else {
            Value::Dense(value)
        };
        self.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        })
    }

    /// A leaf that only carries a shape. On a dense tape it is zero-filled.
    pub fn shaped_leaf(&self, shape: &[usize], requires_grad: bool) -> Var<'_, T> {
        if self.meta {
            self.push(Node {
                value: Value::Meta(shape.to_vec()),
                op: Op::Leaf,
                requires_grad,
            })
        } else {
            self.leaf(Tensor::zeros(shape), requires_grad)
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Record an op: `compute` runs only on dense tapes.
    fn record(
        &self,
        shape: Vec<usize>,
        flops: u64,
        inputs: &[usize],
        compute: impl FnOnce(&[Node<T>]) -> (Vec<T>, Op<T>),
    ) -> Var<'_, T> {
        self.flops.set(self.flops.get() + flops);
        if self.meta {
            return self.push(Node {
                value: Value::Meta(shape),
                op: Op::Leaf,
                requires_grad: false,
            });
        }
        let (data, op, requires_grad) = {
            let nodes = self.nodes.borrow();
            let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
            let (data, op) = compute(&nodes);
            (data, op, requires_grad)
        };
        let value = Tensor::new(shape, data).expect("kernel produced the inferred shape");
        self.push(Node {
            value: Value::Dense(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        })
    }

    /// Reverse-mode sweep from a scalar `loss`, returning gradients for every
    /// leaf that requires them.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.meta {
            return Err(TensorError::MetaTape);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        let mut leaves = Vec::new();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaves.push((id, Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")));
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
        }
        leaves.sort_by_key(|(id, _)| *id);
        Ok(Gradients { leaves })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| nodes[i].value.dense();
    let out = val(id);
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let need_input = nodes[*x].requires_grad;
            let cg = kernels::conv2d_backward(val(*x).data(), val(*w).data(), g, geom, need_input);
            if need_input {
                accumulate(nodes, grads, *x, cg.input);
            }
            accumulate(nodes, grads, *w, cg.weight);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, cg.bias);
            }
        }
        Op::Conv1d { x, w, b, geom } => {
            let (gx, gw, gb) = kernels::conv1d_backward(val(*x).data(), val(*w).data(), g, geom);
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *w, gw);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::GlobalPool { x, mode, arg } => {
            let xv = val(*x);
            let hw: usize = xv.shape()[2..].iter().product();
            let mut gx = vec![T::zero(); xv.numel()];
            let scale = T::one() / T::lit(hw as f64);
            for (p, &gv) in g.iter().enumerate() {
                match mode {
                    PoolMode::Avg => gx[p * hw..(p + 1) * hw].iter_mut().for_each(|e| *e = gv * scale),
                    PoolMode::Max => gx[p * hw + arg[p] as usize] = gv,
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::ChannelPool { x, mode, arg } => {
            let xv = val(*x);
            let (n, c) = (xv.shape()[0], xv.shape()[1]);
            let hw: usize = xv.shape()[2..].iter().product();
            let mut gx = vec![T::zero(); xv.numel()];
            let scale = T::one() / T::lit(c as f64);
            for ni in 0..n {
                for i in 0..hw {
                    let gv = g[ni * hw + i];
                    match mode {
                        PoolMode::Avg => (0..c).for_each(|ch| gx[(ni * c + ch) * hw + i] = gv * scale),
                        PoolMode::Max => gx[(ni * c + arg[ni * hw + i] as usize) * hw + i] = gv,
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Pool2 { x, mode, arg } => {
            let xv = val(*x);
            let mut gx = vec![T::zero(); xv.numel()];
            match mode {
                PoolMode::Max => {
                    for (o, &gv) in g.iter().enumerate() {
                        gx[arg[o] as usize] += gv;
                    }
                }
                PoolMode::Avg => {
                    let [n, c, h, w] = xv.dims4();
                    let (oh, ow) = (h / 2, w / 2);
                    let q = T::lit(0.25);
                    for p in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(p * oh + oy) * ow + ox] * q;
                                let base = p * h * w + 2 * oy * w + 2 * ox;
                                for i in [base, base + 1, base + w, base + w + 1] {
                                    gx[i] += gv;
                                }
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Upsample { x } => {
            let [n, c, h, w] = val(*x).dims4();
            accumulate(nodes, grads, *x, kernels::upsample2x_backward(g, n * c, h, w));
        }
        Op::Sigmoid { x } => {
            let gx = out.data().iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Relu { x } => {
            let gx = val(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Add { a, b, bcast } => {
            accumulate(nodes, grads, *a, g.to_vec());
            let gb = reduce_broadcast(g, out.shape(), *bcast, |_| T::one());
            accumulate(nodes, grads, *b, gb);
        }
        Op::Mul { a, b, bcast } => {
            let (av, bv) = (val(*a), val(*b));
            let shape = out.shape();
            if nodes[*a].requires_grad {
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * bv.data()[broadcast_index(i, shape, *bcast)])
                    .collect();
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = reduce_broadcast(g, shape, *bcast, |i| av.data()[i]);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale { x, k } => {
            accumulate(nodes, grads, *x, g.iter().map(|&gv| gv * *k).collect());
        }
        Op::SoftmaxFirst { a, b } => {
            let d: Vec<T> = out.data().iter().zip(g).map(|(&p, &gv)| gv * p * (T::one() - p)).collect();
            accumulate(nodes, grads, *b, d.iter().map(|&v| -v).collect());
            accumulate(nodes, grads, *a, d);
        }
        Op::Concat { parts } => {
            let shape = out.shape();
            let (n, ctot) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let mut offset = 0;
            for &(pid, c) in parts {
                if nodes[pid].requires_grad {
                    let mut gp = Vec::with_capacity(n * c * inner);
                    for ni in 0..n {
                        let start = (ni * ctot + offset) * inner;
                        gp.extend_from_slice(&g[start..start + c * inner]);
                    }
                    accumulate(nodes, grads, pid, gp);
                }
                offset += c;
            }
        }
        Op::Slice { x, lo } => {
            let xs = val(*x).shape();
            let (n, c) = (xs[0], xs[1]);
            let inner: usize = xs[2..].iter().product();
            let cs = out.shape()[1];
            let mut gx = vec![T::zero(); val(*x).numel()];
            for ni in 0..n {
                let dst = (ni * c + lo) * inner;
                gx[dst..dst + cs * inner].copy_from_slice(&g[ni * cs * inner..(ni + 1) * cs * inner]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Interleave { a, b } => {
            let shape = out.shape();
            let (n, c2) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let c = c2 / 2;
            let mut ga = Vec::with_capacity(n * c * inner);
            let mut gb = Vec::with_capacity(n * c * inner);
            for ni in 0..n {
                for ch in 0..c {
                    let src = (ni * c2 + 2 * ch) * inner;
                    ga.extend_from_slice(&g[src..src + inner]);
                    gb.extend_from_slice(&g[src + inner..src + 2 * inner]);
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Exchange { a, b, parity } => {
            let shape = out.shape();
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let mut ga = vec![T::zero(); g.len()];
            let mut gb = vec![T::zero(); g.len()];
            for ni in 0..n {
                for ch in 0..c {
                    let r = (ni * c + ch) * inner..(ni * c + ch + 1) * inner;
                    let dst = if ch % 2 == *parity { &mut ga } else { &mut gb };
                    dst[r.clone()].copy_from_slice(&g[r]);
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, g.to_vec()),
        Op::GroupNorm {
            x,
            gamma,
            beta,
            group_size,
            stats,
        } => {
            let xv = val(*x);
            let (n, c) = (xv.shape()[0], xv.shape()[1]);
            let hw: usize = xv.shape()[2..].iter().product();
            let (gx, gg, gbt) =
                kernels::group_norm_backward(xv.data(), val(*gamma).data(), g, stats, n, c, hw, *group_size);
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *gamma, gg);
            accumulate(nodes, grads, *beta, gbt);
        }
        Op::Sum { x } => {
            accumulate(nodes, grads, *x, vec![g[0]; val(*x).numel()]);
        }
        Op::BceDice { pred, target } => {
            let gp = kernels::bce_dice_backward(val(*pred).data(), val(*target).data(), g[0]);
            accumulate(nodes, grads, *pred, gp);
        }
    }
}

/// Index into the (possibly broadcast) right operand for flat output index `i`.
#[inline]
fn broadcast_index(i: usize, shape: &[usize], bcast: Broadcast) -> usize {
    match bcast {
        Broadcast::Same => i,
        Broadcast::Channel => {
            let hw = shape[2] * shape[3];
            i / hw
        }
        Broadcast::Spatial => {
            let (c, hw) = (shape[1], shape[2] * shape[3]);
            let n = i / (c * hw);
            n * hw + i % hw
        }
    }
}

/// Sum `g · factor(i)` over the broadcast dimensions onto the right operand.
fn reduce_broadcast<T: Real>(g: &[T], shape: &[usize], bcast: Broadcast, factor: impl Fn(usize) -> T) -> Vec<T> {
    match bcast {
        Broadcast::Same => g.iter().enumerate().map(|(i, &gv)| gv * factor(i)).collect(),
        Broadcast::Channel => {
            let hw = shape[2] * shape[3];
            (0..shape[0] * shape[1])
                .map(|p| {
                    let mut acc = T::zero();
                    for i in p * hw..(p + 1) * hw {
                        acc += g[i] * factor(i);
                    }
                    acc
                })
                .collect()
        }
        Broadcast::Spatial => {
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut out = vec![T::zero(); n * hw];
            for ni in 0..n {
                for ch in 0..c {
                    for j in 0..hw {
                        let i = (ni * c + ch) * hw + j;
                        out[ni * hw + j] += g[i] * factor(i);
                    }
                }
            }
            out
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    leaves: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves
            .binary_search_by_key(&var.id, |(id, _)| *id)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn rank4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match s {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(mismatch(op, "rank", format!("expected N x C x H x W, got {s:?}"))),
    }
}

fn at_least_rank2(op: &'static str, s: &[usize]) -> Result<()> {
    if s.len() < 2 {
        return Err(mismatch(op, "rank", format!("expected at least N x C, got {s:?}")));
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Borrow the concrete value. Panics on a shape-only tape.
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.dense())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "operands recorded on different tapes");
    }

    /// Zero-padded 2-D cross-correlation.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, padding: usize) -> Result<Self> {
        self.conv2d_padded(weight, bias, stride, padding, PadMode::Zeros)
    }

    pub fn conv2d_padded(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        self.same_tape(&weight);
        let [n, cin, h, w] = rank4(OP, &self.shape())?;
        let ws = weight.shape();
        let [cout, wcin, k, k2] = rank4(OP, &ws)?;
        if wcin != cin {
            return Err(mismatch(OP, "input channels", format!("input has {cin}, weight expects {wcin}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(mismatch(OP, "kernel size", format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(invalid(OP, format!("stride must be 1 or 2, got {stride}")));
        }
        if let Some(b) = bias {
            self.same_tape(&b);
            if b.shape() != [cout] {
                return Err(mismatch(OP, "bias", format!("expected [{cout}], got {:?}", b.shape())));
            }
        }
        let oh = kernels::conv_out_extent(h, k, stride, padding)
            .ok_or_else(|| mismatch(OP, "height", format!("kernel {k} does not fit height {h} with padding {padding}")))?;
        let ow = kernels::conv_out_extent(w, k, stride, padding)
            .ok_or_else(|| mismatch(OP, "width", format!("kernel {k} does not fit width {w} with padding {padding}")))?;
        if mode == PadMode::Replicate && (h == 0 || w == 0) {
            return Err(invalid(OP, "replicate padding of an empty map"));
        }
        let geom = Conv2dGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            padding,
            mode,
        };
        let macs = (n * cout * cin * k * k * oh * ow) as u64;
        self.tape.count_macs(macs);
        let flops = 2 * macs;
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.tape.record(vec![n, cout, oh, ow], flops, &inputs, |nodes| {
            let out = kernels::conv2d_forward(
                nodes[self.id].value.dense().data(),
                nodes[weight.id].value.dense().data(),
                bias.map(|b| nodes[b.id].value.dense().data()),
                &geom,
            );
            (
                out,
                Op::Conv2d {
                    x: self.id,
                    w: weight.id,
                    b: bias.map(|b| b.id),
                    geom,
                },
            )
        }))
    }

    /// Zero-padded 1-D cross-correlation of `[n, cin, len]`.
    pub fn conv1d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, padding: usize) -> Result<Self> {
        const OP: &str = "conv1d";
        self.same_tape(&weight);
        let (n, cin, len) = match self.shape().as_slice() {
            &[n, c, l] => (n, c, l),
            s => return Err(mismatch(OP, "rank", format!("expected N x C x L, got {s:?}"))),
        };
        let (cout, wcin, k) = match weight.shape().as_slice() {
            &[o, i, k] => (o, i, k),
            s => return Err(mismatch(OP, "rank", format!("weight must be Cout x Cin x k, got {s:?}"))),
        };
        if wcin != cin {
            return Err(mismatch(OP, "input channels", format!("input has {cin}, weight expects {wcin}")));
        }
        if k % 2 == 0 {
            return Err(mismatch(OP, "kernel size", format!("kernel must be odd, got {k}")));
        }
        if len + 2 * padding < k {
            return Err(mismatch(OP, "length", format!("kernel {k} does not fit length {len}")));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(mismatch(OP, "bias", format!("expected [{cout}], got {:?}", b.shape())));
            }
        }
        let geom = Conv1dGeom {
            n,
            cin,
            len,
            cout,
            k,
            padding,
        };
        let lo = geom.out_len();
        let macs = (n * cout * cin * k * lo) as u64;
        self.tape.count_macs(macs);
        let flops = 2 * macs;
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.tape.record(vec![n, cout, lo], flops, &inputs, |nodes| {
            let out = kernels::conv1d_forward(
                nodes[self.id].value.dense().data(),
                nodes[weight.id].value.dense().data(),
                bias.map(|b| nodes[b.id].value.dense().data()),
                &geom,
            );
            (
                out,
                Op::Conv1d {
                    x: self.id,
                    w: weight.id,
                    b: bias.map(|b| b.id),
                    geom,
                },
            )
        }))
    }

    /// Global pooling over all spatial positions: `[n, c, ...] → [n, c]`.
    pub fn global_pool(self, mode: PoolMode) -> Result<Self> {
        let s = self.shape();
        at_least_rank2("global_pool", &s)?;
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        if hw == 0 {
            return Err(invalid("global_pool", "empty spatial extent"));
        }
        Ok(self.tape.record(vec![n, c], (n * c) as u64, &[self.id], |nodes| {
            let (out, arg) = kernels::global_pool_spatial(nodes[self.id].value.dense().data(), n * c, hw, mode);
            (out, Op::GlobalPool { x: self.id, mode, arg })
        }))
    }

    /// Pooling across channels: `[n, c, h, w] → [n, 1, h, w]`.
    pub fn channel_pool(self, mode: PoolMode) -> Result<Self> {
        let [n, c, h, w] = rank4("channel_pool", &self.shape())?;
        if c == 0 {
            return Err(invalid("channel_pool", "no channels"));
        }
        Ok(self.tape.record(vec![n, 1, h, w], (n * h * w) as u64, &[self.id], |nodes| {
            let (out, arg) = kernels::channel_pool(nodes[self.id].value.dense().data(), n, c, h * w, mode);
            (out, Op::ChannelPool { x: self.id, mode, arg })
        }))
    }

    /// 2x2 window, stride 2.
    pub fn pool2x2(self, mode: PoolMode) -> Result<Self> {
        const OP: &str = "pool2x2";
        let [n, c, h, w] = rank4(OP, &self.shape())?;
        if h % 2 != 0 {
            return Err(mismatch(OP, "height", format!("2x2 window needs an even extent, got {h}")));
        }
        if w % 2 != 0 {
            return Err(mismatch(OP, "width", format!("2x2 window needs an even extent, got {w}")));
        }
        let shape = vec![n, c, h / 2, w / 2];
        let numel = (n * c * h * w / 4) as u64;
        Ok(self.tape.record(shape, numel, &[self.id], |nodes| {
            let (out, arg) = kernels::pool2x2(nodes[self.id].value.dense().data(), n * c, h, w, mode);
            (out, Op::Pool2 { x: self.id, mode, arg })
        }))
    }

    /// ×2 bilinear upsampling with half-pixel centers.
    pub fn upsample2x(self) -> Result<Self> {
        let [n, c, h, w] = rank4("upsample2x", &self.shape())?;
        if h == 0 || w == 0 {
            return Err(invalid("upsample2x", "empty spatial extent"));
        }
        let shape = vec![n, c, 2 * h, 2 * w];
        Ok(self.tape.record(shape, (n * c * 4 * h * w) as u64, &[self.id], |nodes| {
            let out = kernels::upsample2x(nodes[self.id].value.dense().data(), n * c, h, w);
            (out, Op::Upsample { x: self.id })
        }))
    }

    fn unary(self, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Self {
        let shape = self.shape();
        let numel = shape.iter().product::<usize>() as u64;
        self.tape.record(shape, numel, &[self.id], |nodes| {
            let out = nodes[self.id].value.dense().data().iter().map(|&v| f(v)).collect();
            (out, op(self.id))
        })
    }

    pub fn sigmoid(self) -> Self {
        self.unary(kernels::sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn relu(self) -> Self {
        self.unary(|v| v.max(T::zero()), |x| Op::Relu { x })
    }

    pub fn scale(self, k: T) -> Self {
        self.unary(move |v| v * k, move |x| Op::Scale { x, k })
    }

    /// Decide how `rhs` broadcasts against `lhs`; the full-shape operand comes first.
    fn broadcast_plan(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Option<Broadcast>> {
        if lhs == rhs {
            return Ok(Some(Broadcast::Same));
        }
        if let (&[n, c, _, _], &[n2, c2]) = (lhs, rhs) {
            if n == n2 && c == c2 {
                return Ok(Some(Broadcast::Channel));
            }
        }
        if let (&[n, _, h, w], &[n2, 1, h2, w2]) = (lhs, rhs) {
            if n == n2 && h == h2 && w == w2 {
                return Ok(Some(Broadcast::Spatial));
            }
        }
        if Self::broadcast_plan_rev(lhs, rhs) {
            return Ok(None);
        }
        Err(mismatch(op, "broadcast", format!("cannot combine {lhs:?} with {rhs:?}")))
    }

    fn broadcast_plan_rev(lhs: &[usize], rhs: &[usize]) -> bool {
        matches!((rhs, lhs), (&[n, c, _, _], &[n2, c2]) if n == n2 && c == c2)
            || matches!((rhs, lhs), (&[n, _, h, w], &[n2, 1, h2, w2]) if n == n2 && h == h2 && w == w2)
    }

    fn binary(self, other: Self, op: &'static str, mul: bool) -> Result<Self> {
        self.same_tape(&other);
        let (ls, rs) = (self.shape(), other.shape());
        let Some(bcast) = Self::broadcast_plan(op, &ls, &rs)? else {
            return other.binary(self, op, mul);
        };
        let numel = ls.iter().product::<usize>() as u64;
        let (a, b) = (self.id, other.id);
        let shape = ls.clone();
        Ok(self.tape.record(ls, numel, &[a, b], |nodes| {
            let (av, bv) = (nodes[a].value.dense().data(), nodes[b].value.dense().data());
            let out = av
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bv[broadcast_index(i, &shape, bcast)];
                    if mul {
                        x * y
                    } else {
                        x + y
                    }
                })
                .collect();
            let op = if mul { Op::Mul { a, b, bcast } } else { Op::Add { a, b, bcast } };
            (out, op)
        }))
    }

    /// Elementwise sum; also accepts an `[n, c]` channel vector or an
    /// `[n, 1, h, w]` spatial map against an `[n, c, h, w]` operand.
    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", false)
    }

    /// Elementwise product with the same broadcast patterns as [`Var::add`].
    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", true)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.add(other.scale(-T::one()))
    }

    /// Two-way softmax over corresponding elements of `self` and `other`.
    /// The two returned tensors sum to one elementwise.
    pub fn softmax_pair(self, other: Self) -> Result<(Self, Self)> {
        self.same_tape(&other);
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(mismatch("softmax_pair", "shape", format!("{ls:?} vs {rs:?}")));
        }
        let first = |a: Self, b: Self| {
            let numel = ls.iter().product::<usize>() as u64;
            a.tape.record(ls.clone(), numel, &[a.id, b.id], |nodes| {
                let (av, bv) = (nodes[a.id].value.dense().data(), nodes[b.id].value.dense().data());
                let out = av.iter().zip(bv).map(|(&x, &y)| kernels::softmax_pair_first(x, y)).collect();
                (out, Op::SoftmaxFirst { a: a.id, b: b.id })
            })
        };
        Ok((first(self, other), first(other, self)))
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat(parts: &[Self]) -> Result<Self> {
        const OP: &str = "concat";
        let first = parts.first().ok_or_else(|| invalid(OP, "no operands"))?;
        let s0 = first.shape();
        at_least_rank2(OP, &s0)?;
        let mut ctot = 0;
        let mut meta = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(mismatch(OP, "non-channel extents", format!("{s0:?} vs {s:?}")));
            }
            ctot += s[1];
            meta.push((p.id, s[1]));
        }
        let mut shape = s0.clone();
        shape[1] = ctot;
        let (n, inner) = (s0[0], s0[2..].iter().product::<usize>());
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.record(shape, 0, &ids, |nodes| {
            let mut out = Vec::with_capacity(n * ctot * inner);
            for ni in 0..n {
                for &(pid, c) in &meta {
                    let d = nodes[pid].value.dense().data();
                    out.extend_from_slice(&d[ni * c * inner..(ni + 1) * c * inner]);
                }
            }
            (out, Op::Concat { parts: meta.clone() })
        }))
    }

    /// Channels `[lo, hi)`.
    pub fn slice_channels(self, lo: usize, hi: usize) -> Result<Self> {
        let s = self.shape();
        at_least_rank2("slice_channels", &s)?;
        if lo >= hi || hi > s[1] {
            return Err(mismatch("slice_channels", "channels", format!("range {lo}..{hi} of {}", s[1])));
        }
        let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
        let mut shape = s.clone();
        shape[1] = hi - lo;
        Ok(self.tape.record(shape, 0, &[self.id], |nodes| {
            let d = nodes[self.id].value.dense().data();
            let mut out = Vec::with_capacity(n * (hi - lo) * inner);
            for ni in 0..n {
                out.extend_from_slice(&d[(ni * c + lo) * inner..(ni * c + hi) * inner]);
            }
            (out, Op::Slice { x: self.id, lo })
        }))
    }

    /// Split into the first and second half of the channels.
    pub fn split_half(self) -> Result<(Self, Self)> {
        let s = self.shape();
        at_least_rank2("split_half", &s)?;
        let c = s[1];
        if !c.is_multiple_of(2) || c == 0 {
            return Err(mismatch("split_half", "channels", format!("need an even channel count, got {c}")));
        }
        Ok((self.slice_channels(0, c / 2)?, self.slice_channels(c / 2, c)?))
    }

    /// Alternate channels: `self[i]` lands at `2i`, `other[i]` at `2i + 1`.
    pub fn interleave(self, other: Self) -> Result<Self> {
        self.same_tape(&other);
        let (ls, rs) = (self.shape(), other.shape());
        at_least_rank2("interleave", &ls)?;
        if ls != rs {
            return Err(mismatch("interleave", "shape", format!("{ls:?} vs {rs:?}")));
        }
        let (n, c, inner) = (ls[0], ls[1], ls[2..].iter().product::<usize>());
        let mut shape = ls.clone();
        shape[1] = 2 * c;
        let (a, b) = (self.id, other.id);
        Ok(self.tape.record(shape, 0, &[a, b], |nodes| {
            let (av, bv) = (nodes[a].value.dense().data(), nodes[b].value.dense().data());
            let mut out = Vec::with_capacity(2 * n * c * inner);
            for ni in 0..n {
                for ch in 0..c {
                    let r = (ni * c + ch) * inner..(ni * c + ch + 1) * inner;
                    out.extend_from_slice(&av[r.clone()]);
                    out.extend_from_slice(&bv[r]);
                }
            }
            (out, Op::Interleave { a, b })
        }))
    }

    /// Channel `c` comes from `self` when `c % 2 == parity`, else from `other`.
    pub fn exchange_channels(self, other: Self, parity: usize) -> Result<Self> {
        self.same_tape(&other);
        let (ls, rs) = (self.shape(), other.shape());
        at_least_rank2("exchange_channels", &ls)?;
        if ls != rs {
            return Err(mismatch("exchange_channels", "shape", format!("{ls:?} vs {rs:?}")));
        }
        let (n, c, inner) = (ls[0], ls[1], ls[2..].iter().product::<usize>());
        let (a, b) = (self.id, other.id);
        let parity = parity % 2;
        Ok(self.tape.record(ls, 0, &[a, b], |nodes| {
            let (av, bv) = (nodes[a].value.dense().data(), nodes[b].value.dense().data());
            let mut out = Vec::with_capacity(av.len());
            for ni in 0..n {
                for ch in 0..c {
                    let r = (ni * c + ch) * inner..(ni * c + ch + 1) * inner;
                    out.extend_from_slice(if ch % 2 == parity { &av[r] } else { &bv[r] });
                }
            }
            (out, Op::Exchange { a, b, parity })
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let s = self.shape();
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(mismatch("reshape", "element count", format!("{s:?} -> {shape:?}")));
        }
        Ok(self.tape.record(shape.to_vec(), 0, &[self.id], |nodes| {
            (nodes[self.id].value.dense().data().to_vec(), Op::Reshape { x: self.id })
        }))
    }

    /// Group normalization over `group_size` consecutive channels with a
    /// per-channel affine transform.
    pub fn group_norm(self, gamma: Self, beta: Self, group_size: usize) -> Result<Self> {
        const OP: &str = "group_norm";
        let s = self.shape();
        let [n, c, h, w] = rank4(OP, &s)?;
        if group_size == 0 || c % group_size != 0 {
            return Err(mismatch(OP, "channels", format!("{c} channels do not split into groups of {group_size}")));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(mismatch(OP, "affine", format!("scale/shift must be [{c}]")));
        }
        let numel = (n * c * h * w) as u64;
        let (x, g, b) = (self.id, gamma.id, beta.id);
        Ok(self.tape.record(s, numel, &[x, g, b], |nodes| {
            let (out, stats) = kernels::group_norm(
                nodes[x].value.dense().data(),
                nodes[g].value.dense().data(),
                nodes[b].value.dense().data(),
                n,
                c,
                h * w,
                group_size,
            );
            (
                out,
                Op::GroupNorm {
                    x,
                    gamma: g,
                    beta: b,
                    group_size,
                    stats,
                },
            )
        }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Self {
        let numel = self.shape().iter().product::<usize>() as u64;
        self.tape.record(Vec::new(), numel, &[self.id], |nodes| {
            (vec![nodes[self.id].value.dense().sum()], Op::Sum { x: self.id })
        })
    }

    /// Mean binary cross-entropy plus soft dice against a fixed `target`.
    pub fn bce_dice(self, target: Self) -> Result<Self> {
        self.same_tape(&target);
        let (ps, ts) = (self.shape(), target.shape());
        if ps != ts {
            return Err(mismatch("bce_dice", "shape", format!("prediction {ps:?} vs target {ts:?}")));
        }
        if target.requires_grad() {
            return Err(invalid("bce_dice", "target must be a constant"));
        }
        let (p, t) = (self.id, target.id);
        Ok(self.tape.record(Vec::new(), 0, &[p, t], |nodes| {
            let (loss, _, _) = kernels::bce_dice(nodes[p].value.dense().data(), nodes[t].value.dense().data());
            (vec![loss], Op::BceDice { pred: p, target: t })
        }))
    }
}
