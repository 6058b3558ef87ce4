use crate::{Error, Result, Scalar, Tensor};

/// Mean squared error and its gradient `2(pred − target)/N` with respect to `pred`.
/// The loss value is accumulated in `f64`.
pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            expected: pred.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::EmptyInput("mse_loss"));
    }
    let mut acc = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.as_f64() - t.as_f64();
        acc += d * d;
    }
    let k = S::lit(2.0 / n as f64);
    let grad = pred.zip_map(target, "mse_loss", |p, t| k * (p - t))?;
    Ok((acc / n as f64, grad))
}
