use super::{shape_err, NetError, Scalar};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Weighted binary cross-entropy on logits, averaged over the batch.
/// Returns the loss and d(loss)/d(logit).
pub fn bce_with_logits<T: Scalar>(logits: &[T], targets: &[T], pos_weight: f64) -> Result<(f64, Vec<T>), NetError> {
    if logits.len() != targets.len() || logits.is_empty() {
        return shape_err(format!("{} logits vs {} targets", logits.len(), targets.len()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        let (z, y) = (z.as_f64(), y.as_f64());
        let w = if y == 1.0 {
            pos_weight
        } else if y == 0.0 {
            1.0
        } else {
            return Err(NetError::InvalidTarget(y));
        };
        // softplus(z) - y z, with softplus(z) - z == softplus(-z)
        loss += w * if y == 1.0 { softplus(-z) } else { softplus(z) };
        grad.push(T::of(w * (sigmoid(z) - y) / n));
    }
    Ok((loss / n, grad))
}

/// Mean squared error and its gradient with respect to `x`.
pub fn mse<T: Scalar>(x: &[T], target: &[T]) -> Result<(f64, Vec<T>), NetError> {
    if x.len() != target.len() || x.is_empty() {
        return shape_err(format!("{} values vs {} targets", x.len(), target.len()));
    }
    let n = x.len() as f64;
    let mut loss = 0.0;
    let grad = x
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            loss += d * d;
            T::of(2.0 * d / n)
        })
        .collect();
    Ok((loss / n, grad))
}
