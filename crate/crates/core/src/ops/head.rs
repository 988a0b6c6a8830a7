//! Classifier head kernels: fully-connected layer and softmax cross-entropy.

use crate::element::Element;
use crate::error::{Error, Result};

/// y = W x + b for one sample. `w` is (classes, c) row-major.
pub fn linear_forward_one<E: Element>(x: &[E], w: &[E], b: &[E], y: &mut [E]) {
    let c = x.len();
    for (k, yv) in y.iter_mut().enumerate() {
        let mut acc = b[k];
        for (wv, xv) in w[k * c..(k + 1) * c].iter().zip(x) {
            acc += *wv * *xv;
        }
        *yv = acc;
    }
}

/// Accumulates dW += dy (x) x, db += dy, dx += W^T dy for one sample.
pub fn linear_backward_one<E: Element>(
    x: &[E],
    w: &[E],
    dy: &[E],
    dw: &mut [E],
    db: &mut [E],
    dx: &mut [E],
) {
    let c = x.len();
    for (k, g) in dy.iter().enumerate() {
        db[k] += *g;
        let wr = &w[k * c..(k + 1) * c];
        let dwr = &mut dw[k * c..(k + 1) * c];
        for i in 0..c {
            dwr[i] += *g * x[i];
            dx[i] += *g * wr[i];
        }
    }
}

/// Mean cross-entropy with max-subtracted log-softmax.
/// Returns the loss and the softmax probabilities (saved for backward).
pub fn softmax_xent_forward<E: Element>(
    logits: &[E],
    n: usize,
    classes: usize,
    labels: &[usize],
) -> Result<(E, Vec<E>)> {
    if labels.len() != n {
        return Err(Error::data(format!("{} labels for {} samples", labels.len(), n)));
    }
    let mut probs = vec![E::zero(); n * classes];
    let mut total = E::zero();
    for i in 0..n {
        let label = labels[i];
        if label >= classes {
            return Err(Error::data(format!(
                "label {label} out of range [0, {classes}) at sample {i}"
            )));
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let mx = row.iter().cloned().fold(E::neg_infinity(), E::max);
        let mut denom = E::zero();
        for (p, z) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
            let e = (*z - mx).exp();
            *p = e;
            denom += e;
        }
        for p in &mut probs[i * classes..(i + 1) * classes] {
            *p = *p / denom;
        }
        // loss_i = log(sum exp(z - mx)) - (z_y - mx)
        total += denom.ln() - (row[label] - mx);
    }
    Ok((total / E::from_f64(n as f64), probs))
}

/// dlogits += g * (probs - onehot) / n.
pub fn softmax_xent_backward<E: Element>(
    probs: &[E],
    labels: &[usize],
    n: usize,
    classes: usize,
    g: E,
    dlogits: &mut [E],
) {
    let scale = g / E::from_f64(n as f64);
    for i in 0..n {
        for k in 0..classes {
            let one = if k == labels[i] { E::one() } else { E::zero() };
            dlogits[i * classes + k] += scale * (probs[i * classes + k] - one);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        for classes in [2usize, 10, 100] {
            let logits = vec![0.3f64; classes];
            let (loss, _) = softmax_xent_forward(&logits, 1, classes, &[0]).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_correct_logit_is_stable() {
        let mut logits = vec![0.0f64; 10];
        logits[3] = 1000.0;
        let (loss, probs) = softmax_xent_forward(&logits, 1, 10, &[3]).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-9, "loss {loss}");
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn matches_high_precision_oracle() {
        let mut seed = 0xA5A5A5A5u64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 10.0 - 5.0
        };
        let (n, classes) = (7usize, 13usize);
        let logits: Vec<f64> = (0..n * classes).map(|_| next()).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 5) % classes).collect();
        let (loss, _) = softmax_xent_forward(&logits, n, classes, &labels).unwrap();

        // Oracle: direct formula with explicit log-sum-exp per row.
        let mut want = 0.0f64;
        for i in 0..n {
            let row = &logits[i * classes..(i + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            want += lse - row[labels[i]];
        }
        want /= n as f64;
        assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
    }

    #[test]
    fn out_of_range_label_names_sample() {
        let err = softmax_xent_forward(&[0.0f64; 6], 2, 3, &[1, 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sample 1"), "{msg}");
    }
}
