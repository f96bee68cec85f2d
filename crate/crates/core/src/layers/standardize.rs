use crate::error::{Error, Result};
use crate::numerics::Tensor;

const EPS: f64 = 1e-5;

/// Rescales every row to zero mean and unit variance.
#[derive(Clone, Debug)]
pub struct StandardizeCache {
    yhat: Tensor,
    inv_std: Vec<f64>,
}

pub fn standardize_forward(x: &Tensor) -> (Tensor, StandardizeCache) {
    let (n, d) = (x.rows(), x.cols());
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = y.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        inv_std.push(s);
    }
    (y.clone(), StandardizeCache { yhat: y, inv_std })
}

pub fn standardize_backward(cache: &StandardizeCache, dy: &Tensor) -> Result<Tensor> {
    if !dy.same_shape(&cache.yhat) {
        return Err(Error::shape(
            "standardize_backward",
            format!("dy {:?} vs {:?}", dy.shape(), cache.yhat.shape()),
        ));
    }
    let d = dy.cols() as f64;
    let mut dx = dy.clone();
    for r in 0..dy.rows() {
        let yh = cache.yhat.row(r);
        let g = dy.row(r);
        let mg = g.iter().sum::<f64>() / d;
        let mgy = g.iter().zip(yh).map(|(a, b)| a * b).sum::<f64>() / d;
        let s = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (g[j] - mg - yh[j] * mgy);
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, RngState};

    #[test]
    fn rows_are_standardised() {
        let x = Tensor::from_rows(&[[1.0, 3.0], [10.0, 10.0]]).unwrap();
        let (y, _) = standardize_forward(&x);
        assert!((y.get(0, 0) + 1.0).abs() < 1e-4 && (y.get(0, 1) - 1.0).abs() < 1e-4);
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngState::new(6);
        let x = rng.uniform_tensor(&[4, 7], -2.0, 2.0);
        let probe = rng.uniform_tensor(&[4, 7], -1.0, 1.0);
        let (_, cache) = standardize_forward(&x);
        let dx = standardize_backward(&cache, &probe).unwrap();
        let num = finite_diff_grad(|x| standardize_forward(x).0.dot(&probe).unwrap(), &x, 1e-6);
        assert!(max_relative_error(&dx, &num, 1e-7) < 1e-5);
    }
}
