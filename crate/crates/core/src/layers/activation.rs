use crate::error::Result;
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct ReluCache {
    mask: Vec<bool>,
}

pub fn relu_forward(x: &Tensor) -> (Tensor, ReluCache) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    (x.map(|v| v.max(0.0)), ReluCache { mask })
}

pub fn relu_backward(cache: &ReluCache, dy: &Tensor) -> Result<Tensor> {
    if dy.len() != cache.mask.len() {
        return Err(crate::Error::shape(
            "relu_backward",
            format!("{} grads for {} activations", dy.len(), cache.mask.len()),
        ));
    }
    let mut dx = dy.clone();
    for (d, &m) in dx.data_mut().iter_mut().zip(&cache.mask) {
        if !m {
            *d = 0.0;
        }
    }
    Ok(dx)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
