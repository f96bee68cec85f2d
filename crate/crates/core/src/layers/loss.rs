//! Losses return `(value, gradient)`, with the value averaged over the batch
//! and the gradient taken with respect to that averaged value.

use super::activation::sigmoid;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check_rows(op: &'static str, logits: &Tensor, n: usize) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != n {
        return Err(Error::shape(
            op,
            format!("logits {:?} for {n} rows", logits.shape()),
        ));
    }
    Ok(())
}

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mask = vec![true; labels.len()];
    let (loss, grad) = masked_softmax_xent(logits, labels, &mask)?;
    Ok((loss, grad))
}

/// Cross-entropy over the rows where `mask` is set, divided by the full
/// batch size. Unmasked rows get zero gradient and their labels are ignored.
pub fn masked_softmax_xent(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<(f64, Tensor)> {
    check_rows("softmax_xent", logits, labels.len())?;
    if mask.len() != labels.len() {
        return Err(Error::shape("softmax_xent", "mask length differs from labels"));
    }
    let (n, k) = (logits.rows(), logits.cols());
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for r in 0..n {
        if !mask[r] {
            continue;
        }
        let l = labels[r];
        if l >= k {
            return Err(Error::shape("softmax_xent", format!("label {l} of {k} classes")));
        }
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += lse - row[l];
        let g = grad.row_mut(r);
        for j in 0..k {
            g[j] = (row[j] - lse).exp() / n as f64;
        }
        g[l] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `Σ‖pred − target‖² / B`.
pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let diff = pred.sub(target)?;
    let n = pred.rows().max(1) as f64;
    Ok((diff.sq_norm() / n, diff.scale(2.0 / n)))
}

/// Elementwise binary cross-entropy with logits, summed over features and
/// over rows weighted by `row_weight`, then divided by the row count.
pub fn sigmoid_bce(logits: &Tensor, targets: &Tensor, row_weight: &[f64]) -> Result<(f64, Tensor)> {
    if !logits.same_shape(targets) {
        return Err(Error::shape(
            "sigmoid_bce",
            format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape()),
        ));
    }
    check_rows("sigmoid_bce", logits, row_weight.len())?;
    let (n, k) = (logits.rows(), logits.cols());
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for r in 0..n {
        let w = row_weight[r];
        if w == 0.0 {
            continue;
        }
        for j in 0..k {
            let (x, y) = (logits.get(r, j), targets.get(r, j));
            // max(x,0) − xy + log(1 + e^{−|x|})
            loss += w * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p());
            grad.set(r, j, w * (sigmoid(x) - y) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}
