use crate::tensor::global_l2_norm;
use crate::{Error, Result, Scalar, Tensor};

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the factor applied (1 when already within bounds).
pub fn clip_grad_norm<S: Scalar>(grads: &mut [&mut Tensor<S>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidConfig(format!("max_norm {max_norm} must be positive")));
    }
    if grads.is_empty() {
        return Ok(1.0);
    }
    let views: Vec<&Tensor<S>> = grads.iter().map(|g| &**g).collect();
    let norm = global_l2_norm(&views)?;
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let s = S::lit(scale);
    for g in grads.iter_mut() {
        g.scale_inplace(s);
    }
    Ok(scale)
}
