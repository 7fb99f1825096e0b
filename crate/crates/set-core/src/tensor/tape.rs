//! The recording tape: forward ops append nodes, `backward` replays them in
//! reverse. Node order is topological by construction (operands always
//! precede their consumers).

use super::{broadcast_shape, reduce_to_shape, strides_of, BroadcastMap, Tensor};
use crate::error::TensorError;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Exp(TensorId),
    Sqrt(TensorId),
    Square(TensorId),
    Relu(TensorId),
    Silu(TensorId),
    ClampMin(TensorId, f64),
    Matmul(TensorId, TensorId),
    SwapAxes(TensorId, usize, usize),
    Reshape(TensorId),
    ConcatLast(Vec<TensorId>),
    IndexSelect {
        src: TensorId,
        axis: usize,
        indices: Vec<usize>,
    },
    SumAxis {
        src: TensorId,
        axis: usize,
    },
    MeanAxis {
        src: TensorId,
        axis: usize,
    },
    SumAll(TensorId),
    SoftmaxLast(TensorId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Single-writer op recorder. Values are immutable once written.
pub struct Tape {
    nodes: Vec<Node>,
}

type Ids = Result<TensorId, TensorError>;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an external tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &Tensor) -> TensorId {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Ids {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    pub fn constant_tensor(&mut self, tensor: &Tensor) -> TensorId {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            false,
        )
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(Op::Leaf, vec![1], vec![value], false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        let numel: usize = shape.iter().product();
        self.push(Op::Leaf, shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    /// Copy a node out as a standalone tensor, grad included when present.
    pub fn extract(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        let mut t = Tensor::from_vec(node.shape.clone(), node.data.clone()).expect("node shape");
        if let Some(g) = &node.grad {
            t.set_grad(g.clone());
        }
        t.with_requires_grad(node.requires_grad)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite value produced by op {:?}",
            op
        );
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary<F: Fn(f64, f64) -> f64>(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: F,
    ) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape =
            broadcast_shape(sa, sb).ok_or_else(|| TensorError::IncompatibleBroadcast {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })?;
        let _ = op_name;
        let numel: usize = out_shape.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; numel];
        if sa == out_shape.as_slice() && sb == out_shape.as_slice() {
            for i in 0..numel {
                out[i] = f(da[i], db[i]);
            }
        } else {
            let ma = BroadcastMap::new(sa, &out_shape);
            let mb = BroadcastMap::new(sb, &out_shape);
            for (i, o) in out.iter_mut().enumerate() {
                *o = f(da[ma.src_index(i)], db[mb.src_index(i)]);
            }
        }
        Ok((out_shape, out))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Ids {
        let (shape, data) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), shape, data, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Ids {
        let (shape, data) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), shape, data, rg))
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Ids {
        let (shape, data) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), shape, data, rg))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Ids {
        let (shape, data) = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Div(a, b), shape, data, rg))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Ids {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(Op::Scale(a, c), shape, data, rg))
    }

    pub fn neg(&mut self, a: TensorId) -> Ids {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Ids {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(Op::AddScalar(a), shape, data, rg))
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, a: TensorId, f: F) -> (Vec<usize>, Vec<f64>, bool) {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        (self.shape(a).to_vec(), data, self.requires(a))
    }

    pub fn exp(&mut self, a: TensorId) -> Ids {
        let (shape, data, rg) = self.unary(a, f64::exp);
        Ok(self.push(Op::Exp(a), shape, data, rg))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Ids {
        let (shape, data, rg) = self.unary(a, f64::sqrt);
        Ok(self.push(Op::Sqrt(a), shape, data, rg))
    }

    pub fn square(&mut self, a: TensorId) -> Ids {
        let (shape, data, rg) = self.unary(a, |x| x * x);
        Ok(self.push(Op::Square(a), shape, data, rg))
    }

    pub fn relu(&mut self, a: TensorId) -> Ids {
        let (shape, data, rg) = self.unary(a, |x| x.max(0.0));
        Ok(self.push(Op::Relu(a), shape, data, rg))
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&mut self, a: TensorId) -> Ids {
        let (shape, data, rg) = self.unary(a, |x| x * sigmoid(x));
        Ok(self.push(Op::Silu(a), shape, data, rg))
    }

    /// Elementwise `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: TensorId, floor: f64) -> Ids {
        let (shape, data, rg) = self.unary(a, |x| x.max(floor));
        Ok(self.push(Op::ClampMin(a, floor), shape, data, rg))
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Batched matrix product over the last two dimensions; leading batch
    /// extents broadcast.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Ids {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let r = sb[sb.len() - 1];
        let (lead_a, lead_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch =
            broadcast_shape(lead_a, lead_b).ok_or_else(|| TensorError::IncompatibleBroadcast {
                lhs: sa.clone(),
                rhs: sb.clone(),
            })?;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[p, r]);
        let nbatch: usize = batch.iter().product();
        let map_a = BroadcastMap::new(lead_a, &batch);
        let map_b = BroadcastMap::new(lead_b, &batch);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; nbatch * p * r];
        for bi in 0..nbatch {
            let ao = map_a.src_index(bi) * p * q;
            let bo = map_b.src_index(bi) * q * r;
            let oo = bi * p * r;
            for i in 0..p {
                let arow = &da[ao + i * q..ao + (i + 1) * q];
                let orow = &mut out[oo + i * r..oo + (i + 1) * r];
                for (k, &av) in arow.iter().enumerate() {
                    let brow = &db[bo + k * r..bo + (k + 1) * r];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += av * bv;
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), out_shape, out, rg))
    }

    /// Exchange two axes (materializes the permuted layout).
    pub fn swap_axes(&mut self, a: TensorId, ax0: usize, ax1: usize) -> Ids {
        let shape = self.shape(a).to_vec();
        for &ax in &[ax0, ax1] {
            if ax >= shape.len() {
                return Err(TensorError::AxisOutOfRange { axis: ax, shape });
            }
        }
        let data = swap_axes_data(self.data(a), &shape, ax0, ax1);
        let mut out_shape = shape;
        out_shape.swap(ax0, ax1);
        let rg = self.requires(a);
        Ok(self.push(Op::SwapAxes(a, ax0, ax1), out_shape, data, rg))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: TensorId) -> Ids {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(TensorError::AxisOutOfRange {
                axis: 1,
                shape: self.shape(a).to_vec(),
            });
        }
        self.swap_axes(a, rank - 2, rank - 1)
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Ids {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel(a) {
            return Err(TensorError::DataLength {
                shape: new_shape,
                len: self.numel(a),
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(Op::Reshape(a), new_shape, data, rg))
    }

    /// Concatenate along the last axis; all other extents must agree.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Ids {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument(
                "concat_last needs at least one input".into(),
            ));
        }
        let first = self.shape(parts[0]).to_vec();
        let rank = first.len();
        let mut last_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || s[..rank - 1] != first[..rank - 1] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            last_total += s[rank - 1];
        }
        let lead: usize = first[..rank - 1].iter().product();
        let mut out_shape = first.clone();
        out_shape[rank - 1] = last_total;
        let mut out = vec![0.0; lead * last_total];
        let mut offset = 0usize;
        for &p in parts {
            let w = self.shape(p)[rank - 1];
            let src = self.data(p);
            for row in 0..lead {
                out[row * last_total + offset..row * last_total + offset + w]
                    .copy_from_slice(&src[row * w..(row + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::ConcatLast(parts.to_vec()), out_shape, out, rg))
    }

    /// Gather slices along `axis` by index (with repetition allowed).
    pub fn index_select(&mut self, a: TensorId, axis: usize, indices: &[usize]) -> Ids {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let extent = shape[axis];
        for &ix in indices {
            if ix >= extent {
                return Err(TensorError::IndexOutOfRange { index: ix, extent });
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let src = self.data(a);
        let mut out = vec![0.0; outer * indices.len() * inner];
        for o in 0..outer {
            for (k, &ix) in indices.iter().enumerate() {
                let s = (o * extent + ix) * inner;
                let d = (o * indices.len() + k) * inner;
                out[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let rg = self.requires(a);
        Ok(self.push(
            Op::IndexSelect {
                src: a,
                axis,
                indices: indices.to_vec(),
            },
            out_shape,
            out,
            rg,
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    fn reduce_axis(
        &mut self,
        a: TensorId,
        axis: usize,
        keepdim: bool,
        mean: bool,
    ) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..extent {
                let base = (o * extent + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let denom = extent as f64;
            for v in out.iter_mut() {
                *v /= denom;
            }
        }
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        Ok((out_shape, out))
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize, keepdim: bool) -> Ids {
        let (shape, data) = self.reduce_axis(a, axis, keepdim, false)?;
        let rg = self.requires(a);
        Ok(self.push(Op::SumAxis { src: a, axis }, shape, data, rg))
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize, keepdim: bool) -> Ids {
        let (shape, data) = self.reduce_axis(a, axis, keepdim, true)?;
        let rg = self.requires(a);
        Ok(self.push(Op::MeanAxis { src: a, axis }, shape, data, rg))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Ids {
        let total: f64 = self.data(a).iter().sum();
        let rg = self.requires(a);
        Ok(self.push(Op::SumAll(a), vec![1], vec![total], rg))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Ids {
        let n = self.numel(a);
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_last(&mut self, a: TensorId) -> Ids {
        let shape = self.shape(a).to_vec();
        let k = *shape.last().ok_or(TensorError::AxisOutOfRange {
            axis: 0,
            shape: vec![],
        })?;
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        if k > 0 {
            for row in 0..src.len() / k {
                let r = &src[row * k..(row + 1) * k];
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (i, &x) in r.iter().enumerate() {
                    let e = (x - max).exp();
                    out[row * k + i] = e;
                    denom += e;
                }
                for v in &mut out[row * k..(row + 1) * k] {
                    *v /= denom;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::SoftmaxLast(a), shape, out, rg))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep seeding `d(loss)/d(loss) = 1`. Populates `grad`
    /// on every node that requires grad and lies on the path to `loss`;
    /// requires-grad leaves off the path get zero gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.clone().expect("checked above");
            self.propagate(i, &grad);
        }
        // leaves that never received a contribution still report zeros
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: TensorId, contribution: &[f64]) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    fn accumulate_reduced(&mut self, target: TensorId, grad: &[f64], out_shape: &[usize]) {
        if !self.requires(target) {
            return;
        }
        let reduced = reduce_to_shape(grad, out_shape, self.shape(target));
        self.accumulate(target, &reduced);
    }

    fn propagate(&mut self, node_idx: usize, grad: &[f64]) {
        let out_shape = self.nodes[node_idx].shape.clone();
        // Ops dispatch on a borrowed enum; clone the small identifying data.
        match &self.nodes[node_idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_reduced(a, grad, &out_shape);
                self.accumulate_reduced(b, grad, &out_shape);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_reduced(a, grad, &out_shape);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate_reduced(b, &neg, &out_shape);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let mb = BroadcastMap::new(self.shape(b), &out_shape);
                    let db = self.data(b);
                    let ga: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * db[mb.src_index(i)])
                        .collect();
                    self.accumulate_reduced(a, &ga, &out_shape);
                }
                if self.requires(b) {
                    let ma = BroadcastMap::new(self.shape(a), &out_shape);
                    let da = self.data(a);
                    let gb: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * da[ma.src_index(i)])
                        .collect();
                    self.accumulate_reduced(b, &gb, &out_shape);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let mb = BroadcastMap::new(self.shape(b), &out_shape);
                if self.requires(a) {
                    let db = self.data(b);
                    let ga: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g / db[mb.src_index(i)])
                        .collect();
                    self.accumulate_reduced(a, &ga, &out_shape);
                }
                if self.requires(b) {
                    let ma = BroadcastMap::new(self.shape(a), &out_shape);
                    let (da, db) = (self.data(a), self.data(b));
                    let gb: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| {
                            let bv = db[mb.src_index(i)];
                            -g * da[ma.src_index(i)] / (bv * bv)
                        })
                        .collect();
                    self.accumulate_reduced(b, &gb, &out_shape);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let ga: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(a, &ga);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(a, grad);
            }
            Op::Exp(a) => {
                let a = *a;
                let out = &self.nodes[node_idx].data;
                let ga: Vec<f64> = grad.iter().zip(out).map(|(g, y)| g * y).collect();
                self.accumulate(a, &ga);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let out = &self.nodes[node_idx].data;
                let ga: Vec<f64> = grad.iter().zip(out).map(|(g, y)| g / (2.0 * y)).collect();
                self.accumulate(a, &ga);
            }
            Op::Square(a) => {
                let a = *a;
                let src = self.data(a);
                let ga: Vec<f64> = grad.iter().zip(src).map(|(g, x)| 2.0 * x * g).collect();
                self.accumulate(a, &ga);
            }
            Op::Relu(a) => {
                let a = *a;
                let src = self.data(a);
                let ga: Vec<f64> = grad
                    .iter()
                    .zip(src)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::ClampMin(a, floor) => {
                let (a, floor) = (*a, *floor);
                let src = self.data(a);
                let ga: Vec<f64> = grad
                    .iter()
                    .zip(src)
                    .map(|(g, &x)| if x > floor { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Silu(a) => {
                let a = *a;
                let src = self.data(a);
                let ga: Vec<f64> = grad
                    .iter()
                    .zip(src)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                self.backward_matmul(a, b, grad, &out_shape);
            }
            Op::SwapAxes(a, ax0, ax1) => {
                let (a, ax0, ax1) = (*a, *ax0, *ax1);
                let ga = swap_axes_data(grad, &out_shape, ax0, ax1);
                self.accumulate(a, &ga);
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accumulate(a, grad);
            }
            Op::ConcatLast(parts) => {
                let parts = parts.clone();
                let rank = out_shape.len();
                let total = out_shape[rank - 1];
                let lead: usize = out_shape[..rank - 1].iter().product();
                let mut offset = 0usize;
                for p in parts {
                    let w = self.shape(p)[rank - 1];
                    if self.requires(p) {
                        let mut gp = vec![0.0; lead * w];
                        for row in 0..lead {
                            gp[row * w..(row + 1) * w].copy_from_slice(
                                &grad[row * total + offset..row * total + offset + w],
                            );
                        }
                        self.accumulate(p, &gp);
                    }
                    offset += w;
                }
            }
            Op::IndexSelect { src, axis, indices } => {
                let (src, axis) = (*src, *axis);
                let indices = indices.clone();
                if self.requires(src) {
                    let src_shape = self.shape(src).to_vec();
                    let extent = src_shape[axis];
                    let outer: usize = src_shape[..axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let mut gs = vec![0.0; self.numel(src)];
                    for o in 0..outer {
                        for (k, &ix) in indices.iter().enumerate() {
                            let d = (o * extent + ix) * inner;
                            let s = (o * indices.len() + k) * inner;
                            for i in 0..inner {
                                gs[d + i] += grad[s + i];
                            }
                        }
                    }
                    self.accumulate(src, &gs);
                }
            }
            Op::SumAxis { src, axis } | Op::MeanAxis { src, axis } => {
                let is_mean = matches!(self.nodes[node_idx].op, Op::MeanAxis { .. });
                let (src, axis) = (*src, *axis);
                if self.requires(src) {
                    let src_shape = self.shape(src).to_vec();
                    let extent = src_shape[axis];
                    let outer: usize = src_shape[..axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let factor = if is_mean { 1.0 / extent as f64 } else { 1.0 };
                    let mut gs = vec![0.0; self.numel(src)];
                    for o in 0..outer {
                        for k in 0..extent {
                            let base = (o * extent + k) * inner;
                            for i in 0..inner {
                                gs[base + i] = grad[o * inner + i] * factor;
                            }
                        }
                    }
                    self.accumulate(src, &gs);
                }
            }
            Op::SumAll(a) => {
                let a = *a;
                if self.requires(a) {
                    let gs = vec![grad[0]; self.numel(a)];
                    self.accumulate(a, &gs);
                }
            }
            Op::SoftmaxLast(a) => {
                let a = *a;
                if self.requires(a) {
                    let out = self.nodes[node_idx].data.clone();
                    let k = *out_shape.last().expect("softmax rank");
                    let mut gs = vec![0.0; out.len()];
                    if k > 0 {
                        for row in 0..out.len() / k {
                            let o = &out[row * k..(row + 1) * k];
                            let g = &grad[row * k..(row + 1) * k];
                            let dot: f64 = o.iter().zip(g).map(|(y, gg)| y * gg).sum();
                            for i in 0..k {
                                gs[row * k + i] = o[i] * (g[i] - dot);
                            }
                        }
                    }
                    self.accumulate(a, &gs);
                }
            }
        }
    }

    fn backward_matmul(&mut self, a: TensorId, b: TensorId, grad: &[f64], out_shape: &[usize]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let r = sb[sb.len() - 1];
        let batch = &out_shape[..out_shape.len() - 2];
        let nbatch: usize = batch.iter().product();
        let map_a = BroadcastMap::new(&sa[..sa.len() - 2], batch);
        let map_b = BroadcastMap::new(&sb[..sb.len() - 2], batch);
        if self.requires(a) {
            // dA = g @ B^T, accumulated over broadcast batches
            let db = self.data(b);
            let mut ga = vec![0.0; self.numel(a)];
            for bi in 0..nbatch {
                let ao = map_a.src_index(bi) * p * q;
                let bo = map_b.src_index(bi) * q * r;
                let go = bi * p * r;
                for i in 0..p {
                    for k in 0..q {
                        let brow = &db[bo + k * r..bo + (k + 1) * r];
                        let grow = &grad[go + i * r..go + (i + 1) * r];
                        let mut s = 0.0;
                        for (bv, gv) in brow.iter().zip(grow) {
                            s += bv * gv;
                        }
                        ga[ao + i * q + k] += s;
                    }
                }
            }
            self.accumulate(a, &ga);
        }
        if self.requires(b) {
            // dB = A^T @ g
            let da = self.data(a);
            let mut gb = vec![0.0; self.numel(b)];
            for bi in 0..nbatch {
                let ao = map_a.src_index(bi) * p * q;
                let bo = map_b.src_index(bi) * q * r;
                let go = bi * p * r;
                for k in 0..q {
                    for i in 0..p {
                        let av = da[ao + i * q + k];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &grad[go + i * r..go + (i + 1) * r];
                        let brow = &mut gb[bo + k * r..bo + (k + 1) * r];
                        for (o, gv) in brow.iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
            }
            self.accumulate(b, &gb);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn swap_axes_data(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let in_strides = strides_of(shape);
    let mut src_strides = in_strides.clone();
    src_strides.swap(ax0, ax1);
    let mut out = vec![0.0; data.len()];
    let ndim = shape.len();
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0usize;
        for d in (0..ndim).rev() {
            let c = rem % out_shape[d];
            rem /= out_shape[d];
            src += c * src_strides[d];
        }
        *o = data[src];
    }
    out
}
