use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities below this are clamped before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_logits<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 || logits.dim(0) != targets.len() {
        return Err(Error::shape("logits", &[targets.len(), 0], logits.shape()));
    }
    let c = logits.dim(1);
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::OutOfRange {
            what: "target class",
            detail: format!("{t} not in [0, {c})"),
        });
    }
    Ok((logits.dim(0), c))
}

/// Numerically stable softmax of one row, in `f64`.
pub fn softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, c) = check_logits(logits, targets)?;
    let mut grad = Tensor::zeros(vec![n, c]);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let p = softmax(logits.sample(i));
        total += -p[t].max(LOG_FLOOR).ln();
        let g = grad.sample_mut(i);
        for (j, (gj, pj)) in g.iter_mut().zip(&p).enumerate() {
            let y = if j == t { 1.0 } else { 0.0 };
            *gj = T::lit((pj - y) / n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

/// Top-`k` class indices of a row, ties broken by the lower index.
pub fn top_k<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Number of rows whose target is among the `k` largest logits.
pub fn topk_hits<T: Real>(logits: &Tensor<T>, targets: &[usize], k: usize) -> Result<usize> {
    let (_, c) = check_logits(logits, targets)?;
    if k == 0 || k > c {
        return Err(Error::OutOfRange {
            what: "k",
            detail: format!("{k} not in [1, {c}]"),
        });
    }
    Ok(targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = logits.sample(i);
            let above = row.iter().enumerate().filter(|&(j, &v)| v > row[t] || (v == row[t] && j < t)).count();
            above < k
        })
        .count())
}
