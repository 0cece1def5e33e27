//! Plain SGD and the warm-up learning-rate rule.

use applenet_core::tensor::{Gradients, Parameters};
use applenet_core::{Error, Result};

/// Learning rate of 1-based `epoch`: `warmup_rate` for the first
/// `warmup_epochs`, then constant `base_rate`.
pub fn lr_schedule(epoch: usize, base_rate: f64, warmup_rate: f64, warmup_epochs: usize) -> Result<f64> {
    if epoch < 1 {
        return Err(Error::Contract(format!("epochs are 1-based, got {epoch}")));
    }
    Ok(if epoch <= warmup_epochs { warmup_rate } else { base_rate })
}

/// `p <- p - lr * g` for every parameter with a gradient.
pub fn sgd_step(params: &mut Parameters, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Contract(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    for (id, g) in grads.iter() {
        let p = params.get_mut(id);
        if p.len() != g.len() {
            return Err(Error::Contract(format!(
                "gradient of length {} for parameter {:?} of shape {:?}",
                g.len(),
                id,
                p.shape()
            )));
        }
        p.data_mut().iter_mut().zip(g).for_each(|(x, d)| *x -= lr * d);
    }
    Ok(())
}
