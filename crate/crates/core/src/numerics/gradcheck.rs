use super::Tensor;

/// Central-difference gradient of a scalar function:
/// `(f(x + h·e_j) − f(x − h·e_j)) / 2h` for every element `j`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for j in 0..x.len() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[j] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[j] = orig;
        grad.data_mut()[j] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// reporting huge relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst element-wise [`relative_error`] between two tensors.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| t.sq_norm(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::vector(vec![0.3, -1.0, 8.0]);
        let g = finite_diff_grad(|_| 7.0, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_product() {
        let x = Tensor::vector(vec![3.0, 5.0]);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[1], &x, 1e-5);
        assert!((g.data()[0] - 5.0).abs() < 1e-6);
        assert!((g.data()[1] - 3.0).abs() < 1e-6);
    }
}
