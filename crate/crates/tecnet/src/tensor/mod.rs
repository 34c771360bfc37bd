//! Minimal deterministic reverse-mode autodiff engine.
//!
//! Supplies exactly the operations the forecasting networks need: 2-D
//! convolution (stride, dilation, zero padding), transposed convolution,
//! elementwise math, channel concatenation/slicing, reductions, Gaussian
//! blur, Adam, and a finite-difference gradient oracle.
//!
//! Graphs are built define-by-run. Every op records a backward node when at
//! least one operand is tracked; `backward` replays nodes in reverse creation
//! order, so gradients are deterministic given the graph. Tensors and graphs
//! are single-threaded (`Rc`); independent graphs may live on separate
//! threads.

mod adam;
mod blur;
mod conv;
mod element;
mod error;
mod fdiff;
mod init;

pub use adam::AdamState;
pub use blur::gaussian_blur;
pub use conv::ConvSpec;
pub use element::Element;
pub use error::{TensorError, TensorResult};
pub use fdiff::finite_diff_grad;
pub use init::ParamRng;

pub(crate) use conv::ConvParts;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Backward rule for one recorded operation. `out_grads` holds the gradient
/// accumulated for each output (None when no consumer contributed); `want[i]`
/// tells whether input `i` needs a gradient at all, letting expensive
/// branches (e.g. the image gradient of a convolution over constant data) be
/// skipped.
pub(crate) trait OpBackward<E: Element> {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        want: &[bool],
    ) -> Vec<Option<Vec<E>>>;
}

pub(crate) struct Node<E: Element> {
    id: u64,
    inputs: Vec<Tensor<E>>,
    out_grads: RefCell<Vec<Option<Vec<E>>>>,
    op: Box<dyn OpBackward<E>>,
}

struct TensorInner<E: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    origin: Option<(Rc<Node<E>>, usize)>,
    requires_grad: bool,
}

/// N-dimensional real array with optional gradient tracking; the substrate
/// of all network math. Cloning is cheap (shared storage).
pub struct Tensor<E: Element = f32> {
    inner: Rc<TensorInner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("tracked", &self.tracked())
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<E>,
        origin: Option<(Rc<Node<E>>, usize)>,
        requires_grad: bool,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                origin,
                requires_grad,
            }),
        }
    }

    /// Constant tensor from raw row-major data. Carries no backward node.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> TensorResult<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                got: data.len(),
            });
        }
        Ok(Self::new_inner(shape.to_vec(), data, None, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_inner(shape.to_vec(), vec![E::zero(); numel(shape)], None, false)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::new_inner(shape.to_vec(), vec![value; numel(shape)], None, false)
    }

    pub fn scalar(value: E) -> Self {
        Self::new_inner(vec![1], vec![value], None, false)
    }

    /// Trainable leaf: gradients accumulate here during `backward`.
    pub fn param(shape: &[usize], data: Vec<E>) -> TensorResult<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                got: data.len(),
            });
        }
        Ok(Self::new_inner(shape.to_vec(), data, None, true))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when gradients flow through this tensor (leaf or op output).
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.origin.is_some()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// Gradient accumulated on this leaf by the last `backward`, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn replace_grad(&self, g: Vec<E>) {
        debug_assert_eq!(g.len(), self.numel());
        *self.inner.grad.borrow_mut() = Some(g);
    }

    /// Untracked copy of this tensor's current values.
    pub fn detached(&self) -> Tensor<E> {
        Self::new_inner(self.inner.shape.clone(), self.to_vec(), None, false)
    }

    /// Same data reinterpreted under a new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> TensorResult<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                got: self.numel(),
            });
        }
        let out = self.to_vec();
        Ok(unary_op(
            self,
            shape.to_vec(),
            out,
            ReshapeOp {
                in_shape: self.shape().to_vec(),
            },
        ))
    }

    fn accumulate_grad(&self, g: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => axpy(acc, g),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar root. Populates `grad` on every
    /// tracked leaf reachable from the root; gradients accumulate additively
    /// across fan-out, in reverse creation order (deterministic).
    pub fn backward(&self) -> TensorResult<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.shape().to_vec(),
            });
        }
        if self.inner.requires_grad {
            self.accumulate_grad(&[E::one()]);
        }
        let Some((root_node, root_slot)) = self.inner.origin.as_ref() else {
            return Ok(());
        };
        root_node.out_grads.borrow_mut()[*root_slot] = Some(vec![E::one()]);

        // Collect reachable nodes; node ids increase with creation order, so
        // descending id order is a valid reverse topological order.
        let mut stack = vec![Rc::clone(root_node)];
        let mut seen = std::collections::HashSet::new();
        let mut nodes: Vec<Rc<Node<E>>> = Vec::new();
        seen.insert(root_node.id);
        while let Some(n) = stack.pop() {
            for input in &n.inputs {
                if let Some((src, _)) = input.inner.origin.as_ref() {
                    if seen.insert(src.id) {
                        stack.push(Rc::clone(src));
                    }
                }
            }
            nodes.push(n);
        }
        nodes.sort_by(|a, b| b.id.cmp(&a.id));

        for node in nodes {
            let out_grads = std::mem::take(&mut *node.out_grads.borrow_mut());
            if out_grads.iter().all(Option::is_none) {
                continue;
            }
            let want: Vec<bool> = node.inputs.iter().map(Tensor::tracked).collect();
            let input_grads = node.op.backward(&node.inputs, &out_grads, &want);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.len(), input.numel());
                if input.inner.requires_grad {
                    input.accumulate_grad(&g);
                }
                if let Some((src, slot)) = input.inner.origin.as_ref() {
                    let mut slots = src.out_grads.borrow_mut();
                    match slots[*slot].as_mut() {
                        Some(acc) => axpy(acc, &g),
                        None => slots[*slot] = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn axpy<E: Element>(acc: &mut [E], g: &[E]) {
    debug_assert_eq!(acc.len(), g.len());
    for (a, &b) in acc.iter_mut().zip(g.iter()) {
        *a += b;
    }
}

/// Record a single-output op. Returns a constant when no input is tracked.
pub(crate) fn make_output<E: Element>(
    op: impl OpBackward<E> + 'static,
    inputs: Vec<Tensor<E>>,
    shape: Vec<usize>,
    data: Vec<E>,
) -> Tensor<E> {
    if !inputs.iter().any(Tensor::tracked) {
        return Tensor::new_inner(shape, data, None, false);
    }
    let node = Rc::new(Node {
        id: fresh_id(),
        inputs,
        out_grads: RefCell::new(vec![None]),
        op: Box::new(op),
    });
    Tensor::new_inner(shape, data, Some((node, 0)), false)
}

/// Record a multi-output op (e.g. a recurrent step emitting output and cell
/// state). All outputs share one node; backward fires once with whichever
/// output gradients arrived.
pub(crate) fn make_outputs<E: Element>(
    op: impl OpBackward<E> + 'static,
    inputs: Vec<Tensor<E>>,
    outs: Vec<(Vec<usize>, Vec<E>)>,
) -> Vec<Tensor<E>> {
    if !inputs.iter().any(Tensor::tracked) {
        return outs
            .into_iter()
            .map(|(shape, data)| Tensor::new_inner(shape, data, None, false))
            .collect();
    }
    let node = Rc::new(Node {
        id: fresh_id(),
        inputs,
        out_grads: RefCell::new(vec![None; outs.len()]),
        op: Box::new(op),
    });
    outs.into_iter()
        .enumerate()
        .map(|(i, (shape, data))| Tensor::new_inner(shape, data, Some((Rc::clone(&node), i)), false))
        .collect()
}

fn unary_op<E: Element>(
    x: &Tensor<E>,
    shape: Vec<usize>,
    data: Vec<E>,
    op: impl OpBackward<E> + 'static,
) -> Tensor<E> {
    make_output(op, vec![x.clone()], shape, data)
}

fn check_same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> TensorResult<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

struct AddOp;
impl<E: Element> OpBackward<E> for AddOp {
    fn backward(
        &self,
        _inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let mk = |w: bool| if w { Some(g.clone()) } else { None };
        vec![mk(want[0]), mk(want[1])]
    }
}

struct SubOp;
impl<E: Element> OpBackward<E> for SubOp {
    fn backward(
        &self,
        _inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let ga = want[0].then(|| g.clone());
        let gb = want[1].then(|| g.iter().map(|&v| -v).collect());
        vec![ga, gb]
    }
}

struct MulOp;
impl<E: Element> OpBackward<E> for MulOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let ga = want[0].then(|| {
            let b = inputs[1].data();
            g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect()
        });
        let gb = want[1].then(|| {
            let a = inputs[0].data();
            g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect()
        });
        vec![ga, gb]
    }
}

struct ScaleOp<E: Element> {
    factor: E,
}
impl<E: Element> OpBackward<E> for ScaleOp<E> {
    fn backward(
        &self,
        _inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        _want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        vec![Some(g.iter().map(|&v| v * self.factor).collect())]
    }
}

struct SigmoidOp;
impl<E: Element> OpBackward<E> for SigmoidOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        _want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let x = inputs[0].data();
        let gx = g
            .iter()
            .zip(x.iter())
            .map(|(&gv, &xv)| {
                let s = sigmoid_scalar(xv);
                gv * s * (E::one() - s)
            })
            .collect();
        vec![Some(gx)]
    }
}

struct TanhOp;
impl<E: Element> OpBackward<E> for TanhOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        _want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let x = inputs[0].data();
        let gx = g
            .iter()
            .zip(x.iter())
            .map(|(&gv, &xv)| {
                let t = xv.tanh();
                gv * (E::one() - t * t)
            })
            .collect();
        vec![Some(gx)]
    }
}

struct AbsOp;
impl<E: Element> OpBackward<E> for AbsOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        _want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let x = inputs[0].data();
        // Subgradient at 0 is 0.
        let gx = g
            .iter()
            .zip(x.iter())
            .map(|(&gv, &xv)| {
                if xv > E::zero() {
                    gv
                } else if xv < E::zero() {
                    -gv
                } else {
                    E::zero()
                }
            })
            .collect();
        vec![Some(gx)]
    }
}

struct ReshapeOp {
    in_shape: Vec<usize>,
}
impl<E: Element> OpBackward<E> for ReshapeOp {
    fn backward(
        &self,
        _inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        _want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        debug_assert_eq!(numel(&self.in_shape), out_grads[0].as_ref().unwrap().len());
        vec![Some(out_grads[0].as_ref().unwrap().clone())]
    }
}

pub(crate) fn sigmoid_scalar<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> TensorResult<Tensor<E>> {
        check_same_shape(self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(make_output(
            AddOp,
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            data,
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> TensorResult<Tensor<E>> {
        check_same_shape(self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(make_output(
            SubOp,
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            data,
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> TensorResult<Tensor<E>> {
        check_same_shape(self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(make_output(
            MulOp,
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            data,
        ))
    }

    pub fn scale(&self, factor: E) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x * factor).collect();
        unary_op(self, self.shape().to_vec(), data, ScaleOp { factor })
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        unary_op(self, self.shape().to_vec(), data, SigmoidOp)
    }

    pub fn tanh(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.tanh()).collect();
        unary_op(self, self.shape().to_vec(), data, TanhOp)
    }

    pub fn abs_val(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        unary_op(self, self.shape().to_vec(), data, AbsOp)
    }
}

// ---------------------------------------------------------------------------
// Channel concat / slice (rank-4 [B, C, H, W])
// ---------------------------------------------------------------------------

fn rank4<E: Element>(t: &Tensor<E>) -> TensorResult<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::Rank {
            expected: 4,
            shape: s.to_vec(),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

struct ConcatChannelsOp {
    ca: usize,
}
impl<E: Element> OpBackward<E> for ConcatChannelsOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let [b, ca, h, w] = rank4(&inputs[0]).unwrap();
        let cb = rank4(&inputs[1]).unwrap()[1];
        debug_assert_eq!(ca, self.ca);
        let plane = h * w;
        let mut ga = want[0].then(|| vec![E::zero(); b * ca * plane]);
        let mut gb = want[1].then(|| vec![E::zero(); b * cb * plane]);
        for bi in 0..b {
            let src = &g[bi * (ca + cb) * plane..(bi + 1) * (ca + cb) * plane];
            if let Some(ga) = ga.as_mut() {
                ga[bi * ca * plane..(bi + 1) * ca * plane].copy_from_slice(&src[..ca * plane]);
            }
            if let Some(gb) = gb.as_mut() {
                gb[bi * cb * plane..(bi + 1) * cb * plane].copy_from_slice(&src[ca * plane..]);
            }
        }
        vec![ga, gb]
    }
}

struct SliceChannelsOp {
    start: usize,
    len: usize,
}
impl<E: Element> OpBackward<E> for SliceChannelsOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        _want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let [b, c, h, w] = rank4(&inputs[0]).unwrap();
        let plane = h * w;
        let mut gx = vec![E::zero(); b * c * plane];
        for bi in 0..b {
            let dst = &mut gx[(bi * c + self.start) * plane..(bi * c + self.start + self.len) * plane];
            dst.copy_from_slice(&g[bi * self.len * plane..(bi + 1) * self.len * plane]);
        }
        vec![Some(gx)]
    }
}

impl<E: Element> Tensor<E> {
    /// `a` occupies channels `[0, Ca)`, `b` the remainder.
    pub fn concat_channels(&self, other: &Tensor<E>) -> TensorResult<Tensor<E>> {
        let [b0, ca, h0, w0] = rank4(self)?;
        let [b1, cb, h1, w1] = rank4(other)?;
        if b0 != b1 {
            return Err(TensorError::AxisMismatch {
                axis: "batch",
                left: b0,
                right: b1,
            });
        }
        if h0 != h1 {
            return Err(TensorError::AxisMismatch {
                axis: "height",
                left: h0,
                right: h1,
            });
        }
        if w0 != w1 {
            return Err(TensorError::AxisMismatch {
                axis: "width",
                left: w0,
                right: w1,
            });
        }
        let plane = h0 * w0;
        let mut data = Vec::with_capacity(b0 * (ca + cb) * plane);
        {
            let a = self.data();
            let b = other.data();
            for bi in 0..b0 {
                data.extend_from_slice(&a[bi * ca * plane..(bi + 1) * ca * plane]);
                data.extend_from_slice(&b[bi * cb * plane..(bi + 1) * cb * plane]);
            }
        }
        Ok(make_output(
            ConcatChannelsOp { ca },
            vec![self.clone(), other.clone()],
            vec![b0, ca + cb, h0, w0],
            data,
        ))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> TensorResult<Tensor<E>> {
        let [b, c, h, w] = rank4(self)?;
        if start + len > c {
            return Err(TensorError::ChannelRange {
                start,
                len,
                channels: c,
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        {
            let x = self.data();
            for bi in 0..b {
                data.extend_from_slice(&x[(bi * c + start) * plane..(bi * c + start + len) * plane]);
            }
        }
        Ok(unary_op(
            self,
            vec![b, len, h, w],
            data,
            SliceChannelsOp { start, len },
        ))
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

struct SumAllOp;
impl<E: Element> OpBackward<E> for SumAllOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        _want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap()[0];
        vec![Some(vec![g; inputs[0].numel()])]
    }
}

struct MeanAllOp;
impl<E: Element> OpBackward<E> for MeanAllOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        _want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let n = inputs[0].numel();
        let g = out_grads[0].as_ref().unwrap()[0] / E::from_f64(n as f64);
        vec![Some(vec![g; n])]
    }
}

impl<E: Element> Tensor<E> {
    /// Sum of all elements (f64 accumulation for a stable value).
    pub fn sum_all(&self) -> Tensor<E> {
        let s: f64 = self.data().iter().map(|v| v.to_f64()).sum();
        unary_op(self, vec![1], vec![E::from_f64(s)], SumAllOp)
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = self.numel().max(1);
        let s: f64 = self.data().iter().map(|v| v.to_f64()).sum();
        unary_op(
            self,
            vec![1],
            vec![E::from_f64(s / n as f64)],
            MeanAllOp,
        )
    }
}

// ---------------------------------------------------------------------------
// Frame stacking ([B,C,H,W] x T -> [B,T,C,H,W])
// ---------------------------------------------------------------------------

struct StackTimeOp {
    frame: usize,
}
impl<E: Element> OpBackward<E> for StackTimeOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let t = inputs.len();
        let [b, c, h, w] = rank4(&inputs[0]).unwrap();
        debug_assert_eq!(self.frame, c * h * w);
        let frame = self.frame;
        (0..t)
            .map(|ti| {
                want[ti].then(|| {
                    let mut gi = vec![E::zero(); b * frame];
                    for bi in 0..b {
                        gi[bi * frame..(bi + 1) * frame]
                            .copy_from_slice(&g[(bi * t + ti) * frame..(bi * t + ti + 1) * frame]);
                    }
                    gi
                })
            })
            .collect()
    }
}

/// Stack per-step frames `[B,C,H,W]` along a new time axis: `[B,T,C,H,W]`.
pub fn stack_time<E: Element>(frames: &[Tensor<E>]) -> TensorResult<Tensor<E>> {
    if frames.is_empty() {
        return Err(TensorError::EmptyInput("stack_time"));
    }
    let [b, c, h, w] = rank4(&frames[0])?;
    for f in frames {
        check_same_shape(&frames[0], f)?;
    }
    let t = frames.len();
    let frame = c * h * w;
    let mut data = vec![E::zero(); b * t * frame];
    for (ti, f) in frames.iter().enumerate() {
        let fd = f.data();
        for bi in 0..b {
            data[(bi * t + ti) * frame..(bi * t + ti + 1) * frame]
                .copy_from_slice(&fd[bi * frame..(bi + 1) * frame]);
        }
    }
    Ok(make_output(
        StackTimeOp { frame },
        frames.to_vec(),
        vec![b, t, c, h, w],
        data,
    ))
}
