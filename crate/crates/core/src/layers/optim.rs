use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One SGD step with L2 weight decay and heavy-ball momentum:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`. Gradients are cleared afterwards.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, lr: f64, weight_decay: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if weight_decay < 0.0 || !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!(
            "weight decay {weight_decay} / momentum {momentum} out of range"
        )));
    }
    let (lr, wd, mu) = (T::lit(lr), T::lit(weight_decay), T::lit(momentum));
    for (_, p) in params.iter_mut() {
        if p.trainable {
            let vel = p
                .velocity
                .get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            for ((w, &g), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(vel.data_mut().iter_mut())
            {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        p.grad.fill(T::zero());
    }
    Ok(())
}
