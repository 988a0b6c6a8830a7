//! Pooling kernels over one batch element's channel slab.

use crate::element::Element;
use crate::error::{Error, Result};

/// Output extents of a pooling window; errors when the input is smaller than the window.
pub fn pool_out(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::config("pool stride must be positive"));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::config(format!(
            "pool window {k}x{k} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

/// 2x2 average pooling, stride 2.
pub fn avg2_forward_one<E: Element>(x: &[E], c: usize, h: usize, w: usize, y: &mut [E]) {
    let (oh, ow) = ((h - 2) / 2 + 1, (w - 2) / 2 + 1);
    let quarter = E::from_f64(0.25);
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let yp = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let (r, cc) = (i * 2, j * 2);
                yp[i * ow + j] = (xp[r * w + cc]
                    + xp[r * w + cc + 1]
                    + xp[(r + 1) * w + cc]
                    + xp[(r + 1) * w + cc + 1])
                    * quarter;
            }
        }
    }
}

pub fn avg2_backward_one<E: Element>(dy: &[E], c: usize, h: usize, w: usize, dx: &mut [E]) {
    let (oh, ow) = ((h - 2) / 2 + 1, (w - 2) / 2 + 1);
    let quarter = E::from_f64(0.25);
    for ch in 0..c {
        let dyp = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dxp = &mut dx[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = dyp[i * ow + j] * quarter;
                let (r, cc) = (i * 2, j * 2);
                dxp[r * w + cc] += g;
                dxp[r * w + cc + 1] += g;
                dxp[(r + 1) * w + cc] += g;
                dxp[(r + 1) * w + cc + 1] += g;
            }
        }
    }
}

/// Max pooling with argmax recording (flat index within the slab) for backward.
#[allow(clippy::too_many_arguments)]
pub fn max_forward_one<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    y: &mut [E],
    argmax: &mut [u32],
) {
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = E::neg_infinity();
                let mut best_idx = 0usize;
                for ki in 0..k {
                    for kj in 0..k {
                        let ih = (i * stride + ki) as isize - pad as isize;
                        let iw = (j * stride + kj) as isize - pad as isize;
                        if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                            continue;
                        }
                        let v = xp[ih as usize * w + iw as usize];
                        if v > best {
                            best = v;
                            best_idx = ch * h * w + ih as usize * w + iw as usize;
                        }
                    }
                }
                let o = (ch * oh + i) * ow + j;
                y[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}

pub fn max_backward_one<E: Element>(dy: &[E], argmax: &[u32], dx: &mut [E]) {
    for (g, idx) in dy.iter().zip(argmax) {
        dx[*idx as usize] += *g;
    }
}

/// Global average pooling to a (C) vector.
pub fn global_avg_forward_one<E: Element>(x: &[E], c: usize, hw: usize, y: &mut [E]) {
    let inv = E::from_f64(1.0 / hw as f64);
    for ch in 0..c {
        let mut acc = E::zero();
        for v in &x[ch * hw..(ch + 1) * hw] {
            acc += *v;
        }
        y[ch] = acc * inv;
    }
}

pub fn global_avg_backward_one<E: Element>(dy: &[E], c: usize, hw: usize, dx: &mut [E]) {
    let inv = E::from_f64(1.0 / hw as f64);
    for ch in 0..c {
        let g = dy[ch] * inv;
        for v in &mut dx[ch * hw..(ch + 1) * hw] {
            *v += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_of_quad() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let mut y = vec![0.0];
        avg2_forward_one(&x, 1, 2, 2, &mut y);
        assert_eq!(y[0], 2.5);
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let x = vec![0.7f64; 2 * 6 * 6];
        let mut y = vec![0.0; 2 * 3 * 3];
        avg2_forward_one(&x, 2, 6, 6, &mut y);
        assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let mut ym = vec![0.0; 2 * 3 * 3];
        let mut idx = vec![0u32; 2 * 3 * 3];
        max_forward_one(&x, 2, 6, 6, 2, 2, 0, &mut ym, &mut idx);
        assert!(ym.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let mut yg = vec![0.0; 2];
        global_avg_forward_one(&x, 2, 36, &mut yg);
        assert!(yg.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn matches_window_loop_oracle() {
        // 1x2x6x6 random slab against a direct window scan.
        let mut seed = 0x9E3779B97F4A7C15u64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x: Vec<f64> = (0..2 * 36).map(|_| next()).collect();
        let mut avg = vec![0.0; 2 * 9];
        avg2_forward_one(&x, 2, 6, 6, &mut avg);
        let mut mx = vec![0.0; 2 * 16];
        let mut idx = vec![0u32; 2 * 16];
        max_forward_one(&x, 2, 6, 6, 3, 1, 0, &mut mx, &mut idx);
        for ch in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += x[(ch * 6 + i * 2 + di) * 6 + j * 2 + dj];
                        }
                    }
                    assert!((avg[(ch * 3 + i) * 3 + j] - s / 4.0).abs() < 1e-12);
                }
            }
            for i in 0..4 {
                for j in 0..4 {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..3 {
                        for dj in 0..3 {
                            best = best.max(x[(ch * 6 + i + di) * 6 + j + dj]);
                        }
                    }
                    assert!((mx[(ch * 4 + i) * 4 + j] - best).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn window_too_large_rejected() {
        assert!(pool_out(2, 2, 3, 2, 0).is_err());
    }
}
