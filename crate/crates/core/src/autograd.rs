//! Reverse-mode differentiation on an explicit, single-use tape.
//!
//! A [`Var`] is a value plus an optional handle into a [`Tape`]. Operations on
//! vars compute their result eagerly; when at least one input lives on a tape
//! the result is appended to that tape together with a [`Backward`] rule.
//! Vars created with [`Var::constant`] never touch a tape, so inference code
//! paths record nothing.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, aligned with `inputs`. Entries whose
    /// `needs_grad` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[Rc<Tensor<T>>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    parents: Vec<Option<usize>>,
    inputs: Vec<Rc<Tensor<T>>>,
    output: Rc<Tensor<T>>,
    op: Option<Box<dyn Backward<T>>>,
}

/// Append-only record of operations; nodes are stored in creation order, so
/// parents always precede children.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf (a parameter or an input we want
    /// gradients for).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        let id = self.push(Node { parents: Vec::new(), inputs: Vec::new(), output: value.clone(), op: None });
        Var { value, node: Some((self, id)) }
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape may be swept once.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        let root = match loss.node {
            Some((tape, id)) if std::ptr::eq(tape, self) => id,
            _ => return Err(Error::Contract("backward: loss is not recorded on this tape".into())),
        };
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!("backward on non-scalar of shape {:?}", loss.value.shape())));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract("backward called twice on the same tape".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::full(loss.value.shape().to_vec(), T::one())?);
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let Some(op) = &node.op else {
                leaves.insert(id, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let input_grads = op.backward(&node.inputs, &node.output, &g, &needs)?;
            debug_assert_eq!(input_grads.len(), node.parents.len(), "{} returned wrong arity", op.name());
            for (parent, ig) in node.parents.iter().zip(input_grads) {
                let (Some(pid), Some(ig)) = (parent, ig) else { continue };
                debug_assert_eq!(ig.shape(), nodes[*pid].output.shape(), "{} grad shape", op.name());
                match &mut grads[*pid] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of the swept loss with respect to every reachable leaf.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.node.and_then(|(_, id)| self.leaves.get(&id))
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        var.node.and_then(|(_, id)| self.leaves.remove(&id))
    }
}

/// A value that may participate in a tape.
#[derive(Clone)]
pub struct Var<'t, T: Scalar> {
    value: Rc<Tensor<T>>,
    node: Option<(&'t Tape<T>, usize)>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self { value: Rc::new(value), node: None }
    }

    pub fn constant_rc(value: Rc<Tensor<T>>) -> Self {
        Self { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<T>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Records `output = op(inputs)` on the tape of the first tracked input.
    /// Untracked inputs are treated as constants.
    pub fn record(inputs: &[&Var<'t, T>], output: Tensor<T>, op: impl Backward<T> + 'static) -> Self {
        debug_assert!(
            !inputs.iter().all(|v| v.value.all_finite()) || output.all_finite(),
            "{} produced non-finite values from finite inputs",
            op.name()
        );
        let tape = inputs.iter().find_map(|v| v.node.map(|(t, _)| t));
        let output = Rc::new(output);
        let Some(tape) = tape else {
            return Self { value: output, node: None };
        };
        let parents = inputs
            .iter()
            .map(|v| {
                v.node.map(|(t, id)| {
                    assert!(std::ptr::eq(t, tape), "operands recorded on different tapes");
                    id
                })
            })
            .collect();
        let node = Node {
            parents,
            inputs: inputs.iter().map(|v| v.value.clone()).collect(),
            output: output.clone(),
            op: Some(Box::new(op)),
        };
        let id = tape.push(node);
        Self { value: output, node: Some((tape, id)) }
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Self) -> Result<Self> {
        let out = self.value.add(&other.value)?;
        Ok(Self::record(&[self, other], out, AddOp))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let out = self.value.sub(&other.value)?;
        Ok(Self::record(&[self, other], out, SubOp))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let out = self.value.mul(&other.value)?;
        Ok(Self::record(&[self, other], out, MulOp))
    }

    pub fn scale(&self, c: T) -> Self {
        Self::record(&[self], self.value.scale(c), ScaleOp(c))
    }

    pub fn relu(&self) -> Self {
        Self::record(&[self], self.value.relu(), LeakyReluOp(T::zero()))
    }

    pub fn leaky_relu(&self, alpha: T) -> Self {
        Self::record(&[self], self.value.leaky_relu(alpha), LeakyReluOp(alpha))
    }

    pub fn sigmoid(&self) -> Self {
        Self::record(&[self], self.value.sigmoid(), SigmoidOp)
    }

    pub fn tanh(&self) -> Self {
        Self::record(&[self], self.value.tanh(), TanhOp)
    }

    /// Clamp with a pass-through gradient strictly inside `(lo, hi)`.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        Self::record(&[self], self.value.clamp(lo, hi), ClampOp(lo, hi))
    }

    pub fn add_per_sample(&self, b: &Self) -> Result<Self> {
        let out = self.value.add_per_sample(&b.value)?;
        Ok(Self::record(&[self, b], out, AddPerSampleOp))
    }

    // ---- linear algebra / layout ----

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let out = self.value.matmul(&other.value)?;
        Ok(Self::record(&[self, other], out, MatMulOp))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out = self.value.reshape(shape)?;
        Ok(Self::record(&[self], out, ReshapeOp))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        let out = self.value.transpose(a, b)?;
        Ok(Self::record(&[self], out, TransposeOp(a, b)))
    }

    pub fn t(&self) -> Result<Self> {
        if self.value.ndim() != 2 {
            return shape_err(format!("t() needs a matrix, got {:?}", self.shape()));
        }
        self.transpose(0, 1)
    }

    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value.as_ref()).collect();
        let out = Tensor::concat_channels(&values)?;
        let widths = parts.iter().map(|p| p.shape()[1]).collect();
        Ok(Self::record(parts, out, ConcatOp(widths)))
    }

    pub fn softmax(&self) -> Result<Self> {
        let out = self.value.softmax_last()?;
        Ok(Self::record(&[self], out, SoftmaxOp))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Self {
        Self::record(&[self], self.value.sum(), SumOp)
    }

    pub fn mean(&self) -> Result<Self> {
        let out = self.value.mean()?;
        Ok(Self::record(&[self], out, MeanOp))
    }
}

struct AddOp;
impl<T: Scalar> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

struct SubOp;
impl<T: Scalar> Backward<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))])
    }
}

struct MulOp;
impl<T: Scalar> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.mul(&x[1])?), Some(g.mul(&x[0])?)])
    }
}

struct ScaleOp<T>(T);
impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.scale(self.0))])
    }
}

struct LeakyReluOp<T>(T);
impl<T: Scalar> Backward<T> for LeakyReluOp<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, x: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let alpha = self.0;
        Ok(vec![Some(g.zip_map(&x[0], |g, x| if x > T::zero() { g } else { alpha * g })?)])
    }
}

struct SigmoidOp;
impl<T: Scalar> Backward<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[Rc<Tensor<T>>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.zip_map(y, |g, y| g * y * (T::one() - y))?)])
    }
}

struct TanhOp;
impl<T: Scalar> Backward<T> for TanhOp {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, _: &[Rc<Tensor<T>>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.zip_map(y, |g, y| g * (T::one() - y * y))?)])
    }
}

struct ClampOp<T>(T, T);
impl<T: Scalar> Backward<T> for ClampOp<T> {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn backward(&self, x: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (lo, hi) = (self.0, self.1);
        Ok(vec![Some(g.zip_map(&x[0], |g, x| if x > lo && x < hi { g } else { T::zero() })?)])
    }
}

struct AddPerSampleOp;
impl<T: Scalar> Backward<T> for AddPerSampleOp {
    fn name(&self) -> &'static str {
        "add_per_sample"
    }
    fn backward(&self, x: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let b = &x[1];
        let mut gb = Tensor::zeros(b.shape().to_vec())?;
        for chunk in g.data().chunks(b.len().max(1)) {
            for (acc, &v) in gb.data_mut().iter_mut().zip(chunk) {
                *acc += v;
            }
        }
        Ok(vec![Some(g.clone()), Some(gb)])
    }
}

struct MatMulOp;
impl<T: Scalar> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (&x[0], &x[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        // dA = dY * B^T, dB = A^T * dY, using strided views instead of copies
        let mut da = vec![T::zero(); m * k];
        T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
        let mut db = vec![T::zero(); k * n];
        T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
        Ok(vec![Some(Tensor::from_vec([m, k], da)?), Some(Tensor::from_vec([k, n], db)?)])
    }
}

struct ReshapeOp;
impl<T: Scalar> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, x: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.reshape(x[0].shape().to_vec())?)])
    }
}

struct TransposeOp(usize, usize);
impl<T: Scalar> Backward<T> for TransposeOp {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.transpose(self.0, self.1)?)])
    }
}

struct ConcatOp(Vec<usize>);
impl<T: Scalar> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, _: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(g.split_channels(&self.0)?.into_iter().map(Some).collect())
    }
}

struct SoftmaxOp;
impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, _: &[Rc<Tensor<T>>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let width = *y.shape().last().expect("softmax output has an axis");
        let mut out = g.clone();
        if width > 0 {
            for ((o, yr), gr) in out.data_mut().chunks_mut(width).zip(y.data().chunks(width)).zip(g.data().chunks(width)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

struct SumOp;
impl<T: Scalar> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, x: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(x[0].shape().to_vec(), g.item()?)?)])
    }
}

struct MeanOp;
impl<T: Scalar> Backward<T> for MeanOp {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, x: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let n = T::from_usize(x[0].len()).expect("count representable");
        Ok(vec![Some(Tensor::full(x[0].shape().to_vec(), g.item()? / n)?)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(v(&[3], &[1.0, -2.0, 0.5]));
        let loss = x.mul(&x).unwrap().sum();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros([4, 5]).unwrap());
        let grads = tape.backward(&x.mean().unwrap()).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|&g| g == 1.0 / 20.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones([3]).unwrap());
        let loss = x.sum().add(&x.sum()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn contract_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([2]).unwrap());
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::Contract(_))));
        let other = Tape::<f64>::new();
        assert!(matches!(other.backward(&loss), Err(Error::Contract(_))));
        let c = Var::<f64>::constant(Tensor::scalar(1.0));
        assert!(matches!(other.backward(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_record_nothing() {
        let tape = Tape::<f32>::new();
        let a = Var::constant(Tensor::ones([2, 2]).unwrap());
        let b = a.matmul(&a).unwrap().relu().sum();
        assert!(!b.is_tracked());
        assert!(tape.is_empty());
        let x = tape.leaf(Tensor::ones([2, 2]).unwrap());
        let _ = x.matmul(&a).unwrap();
        assert_eq!(tape.len(), 2);
    }

    #[test]
    fn parents_precede_children() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(v(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.matmul(&x.t().unwrap()).unwrap().softmax().unwrap().sum();
        let nodes = tape.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            assert!(node.parents.iter().flatten().all(|&p| p < id));
        }
        drop(nodes);
        assert!(y.is_tracked());
    }

    #[test]
    fn matmul_gradient_closed_form() {
        let tape = Tape::new();
        let a = tape.leaf(v(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(v(&[2, 1], &[3.0, 4.0]));
        let loss = a.matmul(&b).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.get(&b).unwrap().data(), &[1.0, 2.0]);
    }
}
