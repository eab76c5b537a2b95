use std::rc::Rc;

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Elementwise smooth-L1 of a difference: quadratic inside `|d| < 1`.
pub fn smooth_l1_elem<T: Scalar>(d: T) -> T {
    if d.abs() < T::one() {
        T::lit(0.5) * d * d
    } else {
        d.abs() - T::lit(0.5)
    }
}

/// Derivative of [`smooth_l1_elem`]: `d` inside, `sign(d)` outside.
pub fn smooth_l1_grad<T: Scalar>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}

/// Mean smooth-L1 over all elements between `pred` and `target`.
pub fn smooth_l1_tensor<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.expect_same_shape(target)?;
    if pred.is_empty() {
        return Err(Error::Domain("smooth_l1 of empty tensors".into()));
    }
    let total: T = pred.data().iter().zip(target.data()).map(|(&p, &t)| smooth_l1_elem(t - p)).sum();
    Ok(total / T::from_usize(pred.len()).expect("count"))
}

struct SmoothL1Op;

impl<T: Scalar> Backward<T> for SmoothL1Op {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, x: &[Rc<Tensor<T>>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (pred, target) = (&x[0], &x[1]);
        let scale = g.item()? / T::from_usize(pred.len()).expect("count");
        // d = target - pred, so dL/dpred = -grad(d) and dL/dtarget = grad(d)
        let dt = target.zip_map(pred, |t, p| smooth_l1_grad(t - p) * scale)?;
        let dp = needs[0].then(|| dt.scale(-T::one()));
        Ok(vec![dp, needs[1].then_some(dt)])
    }
}

/// Differentiable mean smooth-L1 loss.
pub fn smooth_l1<'t, T: Scalar>(pred: &Var<'t, T>, target: &Var<'t, T>) -> Result<Var<'t, T>> {
    let value = smooth_l1_tensor(pred.value(), target.value())?;
    Ok(Var::record(&[pred, target], Tensor::scalar(value), SmoothL1Op))
}
