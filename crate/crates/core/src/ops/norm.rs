//! Batch normalization over NCHW views: batch statistics, normalization, backward.

use crate::element::Element;
use crate::par::{for_each_chunk_mut, map_indexed};
use crate::tensor::ViewInfo;

/// Per-channel mean and biased variance over (N, H, W), two-pass.
pub fn channel_stats<E: Element>(x: &[E], v: &ViewInfo) -> (Vec<E>, Vec<E>) {
    let hw = v.hw();
    let count = E::from_f64((v.n * hw) as f64);
    let stats = map_indexed(v.c, |c| {
        let mut sum = E::zero();
        for n in 0..v.n {
            let start = (n * v.c_total + v.c_off + c) * hw;
            for xv in &x[start..start + hw] {
                sum += *xv;
            }
        }
        let mean = sum / count;
        let mut sq = E::zero();
        for n in 0..v.n {
            let start = (n * v.c_total + v.c_off + c) * hw;
            for xv in &x[start..start + hw] {
                let d = *xv - mean;
                sq += d * d;
            }
        }
        (mean, sq / count)
    });
    stats.into_iter().unzip()
}

/// y = gamma * (x - mean) * inv_std + beta. `y` is contiguous (N, C, HW), overwritten.
pub fn normalize<E: Element>(
    x: &[E],
    v: &ViewInfo,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    beta: &[E],
    y: &mut [E],
) {
    let hw = v.hw();
    let c = v.c;
    debug_assert_eq!(y.len(), v.n * c * hw);
    for_each_chunk_mut(y, hw, |i, y_plane| {
        let (n, ch) = (i / c, i % c);
        let scale = gamma[ch] * inv_std[ch];
        let shift = beta[ch] - mean[ch] * scale;
        let start = (n * v.c_total + v.c_off + ch) * hw;
        for (yv, xv) in y_plane.iter_mut().zip(&x[start..start + hw]) {
            *yv = *xv * scale + shift;
        }
    });
}

/// Backward for training mode (batch statistics).
///
/// `dy` is contiguous (N, C, HW). `dx` is contiguous and accumulated into;
/// `dgamma`/`dbeta` are accumulated per channel.
#[allow(clippy::too_many_arguments)]
pub fn backward_train<E: Element>(
    x: &[E],
    v: &ViewInfo,
    dy: &[E],
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    dgamma: &mut [E],
    dbeta: &mut [E],
    dx: &mut [E],
) {
    let hw = v.hw();
    let c = v.c;
    let m = E::from_f64((v.n * hw) as f64);
    // Per-channel reductions: s1 = sum dy, s2 = sum dy * xhat.
    let sums: Vec<(E, E)> = map_indexed(c, |ch| {
        let mu = mean[ch];
        let inv = inv_std[ch];
        let mut s1 = E::zero();
        let mut s2 = E::zero();
        for n in 0..v.n {
            let xs = (n * v.c_total + v.c_off + ch) * hw;
            let ys = (n * c + ch) * hw;
            for (xv, dyv) in x[xs..xs + hw].iter().zip(&dy[ys..ys + hw]) {
                let xhat = (*xv - mu) * inv;
                s1 += *dyv;
                s2 += *dyv * xhat;
            }
        }
        (s1, s2)
    });
    for ch in 0..c {
        dbeta[ch] += sums[ch].0;
        dgamma[ch] += sums[ch].1;
    }
    for_each_chunk_mut(dx, hw, |i, dx_plane| {
        let (n, ch) = (i / c, i % c);
        let (s1, s2) = sums[ch];
        let mu = mean[ch];
        let inv = inv_std[ch];
        let coef = gamma[ch] * inv;
        let s1m = s1 / m;
        let s2m = s2 / m;
        let xs = (n * v.c_total + v.c_off + ch) * hw;
        let ys = (n * c + ch) * hw;
        for ((dxv, xv), dyv) in dx_plane.iter_mut().zip(&x[xs..xs + hw]).zip(&dy[ys..ys + hw]) {
            let xhat = (*xv - mu) * inv;
            *dxv += coef * (*dyv - s1m - xhat * s2m);
        }
    });
}

/// Backward for eval mode (running statistics are constants).
#[allow(clippy::too_many_arguments)]
pub fn backward_eval<E: Element>(
    x: &[E],
    v: &ViewInfo,
    dy: &[E],
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    dgamma: &mut [E],
    dbeta: &mut [E],
    dx: &mut [E],
) {
    let hw = v.hw();
    let c = v.c;
    let sums: Vec<(E, E)> = map_indexed(c, |ch| {
        let mu = mean[ch];
        let inv = inv_std[ch];
        let mut s1 = E::zero();
        let mut s2 = E::zero();
        for n in 0..v.n {
            let xs = (n * v.c_total + v.c_off + ch) * hw;
            let ys = (n * c + ch) * hw;
            for (xv, dyv) in x[xs..xs + hw].iter().zip(&dy[ys..ys + hw]) {
                s1 += *dyv;
                s2 += *dyv * (*xv - mu) * inv;
            }
        }
        (s1, s2)
    });
    for ch in 0..c {
        dbeta[ch] += sums[ch].0;
        dgamma[ch] += sums[ch].1;
    }
    for_each_chunk_mut(dx, hw, |i, dx_plane| {
        let (n, ch) = (i / c, i % c);
        let coef = gamma[ch] * inv_std[ch];
        let ys = (n * c + ch) * hw;
        for (dxv, dyv) in dx_plane.iter_mut().zip(&dy[ys..ys + hw]) {
            *dxv += coef * *dyv;
        }
    });
}
