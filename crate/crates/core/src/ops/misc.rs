//! Elementwise kernels: ReLU, inverted dropout, channel concatenation copies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;

pub fn relu_forward<E: Element>(x: &[E], y: &mut [E]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = if *xv > E::zero() { *xv } else { E::zero() };
    }
}

pub fn relu_forward_inplace<E: Element>(y: &mut [E]) {
    for v in y.iter_mut() {
        if *v < E::zero() {
            *v = E::zero();
        }
    }
}

/// g *= (out > 0). Uses the op's own output, which is valid because
/// relu(x) > 0 exactly where x > 0.
pub fn relu_backward_inplace<E: Element>(g: &mut [E], out: &[E]) {
    for (gv, ov) in g.iter_mut().zip(out) {
        // negated so a NaN output also zeroes the gradient
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(*ov > E::zero()) {
            *gv = E::zero();
        }
    }
}

/// Keep-mask for inverted dropout; position-indexed so the mask is independent
/// of how the apply loop is chunked.
pub fn dropout_mask(numel: usize, rate: f64, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..numel).map(|_| if rng.random::<f64>() < rate { 0u8 } else { 1u8 }).collect()
}

/// Survivors are rescaled by 1/(1-rate) so eval mode is the identity.
pub fn dropout_apply_inplace<E: Element>(y: &mut [E], mask: &[u8], rate: f64) {
    let scale = E::from_f64(1.0 / (1.0 - rate));
    for (v, m) in y.iter_mut().zip(mask) {
        *v = if *m == 0 { E::zero() } else { *v * scale };
    }
}

pub fn dropout_backward_inplace<E: Element>(g: &mut [E], mask: &[u8], rate: f64) {
    let scale = E::from_f64(1.0 / (1.0 - rate));
    for (gv, m) in g.iter_mut().zip(mask) {
        *gv = if *m == 0 { E::zero() } else { *gv * scale };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_basic() {
        let mut y = vec![0.0f64; 3];
        relu_forward(&[-1.0, 0.0, 2.0], &mut y);
        assert_eq!(y, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let mut y = vec![9.0f64; 4];
        relu_forward(&[-3.0, -0.5, -1e9, -1e-9], &mut y);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropout_mask_statistics() {
        // 10^6 ones at rate 0.2: mean near 1, zero fraction near 0.2.
        let n = 1_000_000;
        let mask = dropout_mask(n, 0.2, 42);
        let mut y = vec![1.0f64; n];
        dropout_apply_inplace(&mut y, &mask, 0.2);
        let mean = y.iter().sum::<f64>() / n as f64;
        let zero_frac = y.iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
        assert!((0.995..=1.005).contains(&mean), "mean {mean}");
        assert!((0.198..=0.202).contains(&zero_frac), "zeros {zero_frac}");
    }

    #[test]
    fn dropout_mask_is_deterministic() {
        assert_eq!(dropout_mask(1000, 0.5, 7), dropout_mask(1000, 0.5, 7));
        assert_ne!(dropout_mask(1000, 0.5, 7), dropout_mask(1000, 0.5, 8));
    }
}
