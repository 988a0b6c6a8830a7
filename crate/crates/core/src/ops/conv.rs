//! Direct 2-D cross-correlation, forward and backward, over one batch element.
#![allow(clippy::needless_range_loop)] // strided index loops read clearer here
//!
//! There is no kernel flip and no bias term. Kernels operate on one batch
//! element's contiguous channel slab so the interpreter can hand out disjoint
//! sub-slices of a shared block buffer.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::par::for_each_chunk_mut;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("conv stride must be positive"));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw {
            return Err(Error::config(format!(
                "conv kernel {}x{} larger than padded input {}x{}",
                kh, kw, span_h, span_w
            )));
        }
        let out_h = (span_h - kh) / stride + 1;
        let out_w = (span_w - kw) / stride + 1;
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("conv output would be empty"));
        }
        Ok(ConvGeom { cin, cout, h, w, kh, kw, stride, pad, out_h, out_w })
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kh * self.kw
    }

    /// Range of output columns whose input column `ow*stride + kj - pad` is in bounds.
    #[inline]
    fn ow_range(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad { 0 } else { (self.pad - kj).div_ceil(self.stride) };
        // largest ow with ow*stride + kj - pad <= w-1
        let hi_num = self.w + self.pad;
        let hi = if hi_num > kj {
            (((hi_num - kj - 1) / self.stride) + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(self.out_w), hi)
    }
}

/// y[co, oh, ow] = sum_{ci, ki, kj} w[co, ci, ki, kj] * x[ci, oh*s + ki - p, ow*s + kj - p]
///
/// `x` is one batch element (`cin*h*w`), `y` one batch element (`cout*out_h*out_w`).
/// `y` is overwritten.
pub fn forward_one<E: Element>(x: &[E], weight: &[E], g: &ConvGeom, y: &mut [E]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(weight.len(), g.weight_len());
    debug_assert_eq!(y.len(), g.cout * g.out_h * g.out_w);
    let ohw = g.out_h * g.out_w;
    for_each_chunk_mut(y, ohw, |co, y_co| {
        for v in y_co.iter_mut() {
            *v = E::zero();
        }
        for ci in 0..g.cin {
            let x_ci = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = weight[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                    let (lo, hi) = g.ow_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih as usize >= g.h {
                            continue;
                        }
                        let x_row = &x_ci[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let y_row = &mut y_co[oh * g.out_w..(oh + 1) * g.out_w];
                        if g.stride == 1 {
                            let x_base = (lo + kj) - g.pad;
                            for (yv, xv) in
                                y_row[lo..hi].iter_mut().zip(&x_row[x_base..x_base + (hi - lo)])
                            {
                                *yv += wv * *xv;
                            }
                        } else {
                            for ow in lo..hi {
                                let iw = ow * g.stride + kj - g.pad;
                                y_row[ow] += wv * x_row[iw];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates dL/dx for one batch element: dx += W^T * dy (correlation transpose).
pub fn backward_input_one<E: Element>(dy: &[E], weight: &[E], g: &ConvGeom, dx: &mut [E]) {
    debug_assert_eq!(dy.len(), g.cout * g.out_h * g.out_w);
    debug_assert_eq!(dx.len(), g.cin * g.h * g.w);
    let hw = g.h * g.w;
    for_each_chunk_mut(dx, hw, |ci, dx_ci| {
        for co in 0..g.cout {
            let dy_co = &dy[co * g.out_h * g.out_w..(co + 1) * g.out_h * g.out_w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = weight[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                    let (lo, hi) = g.ow_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih as usize >= g.h {
                            continue;
                        }
                        let dx_row = &mut dx_ci[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let dy_row = &dy_co[oh * g.out_w..(oh + 1) * g.out_w];
                        if g.stride == 1 {
                            let x_base = (lo + kj) - g.pad;
                            for (dxv, dyv) in dx_row[x_base..x_base + (hi - lo)]
                                .iter_mut()
                                .zip(&dy_row[lo..hi])
                            {
                                *dxv += wv * *dyv;
                            }
                        } else {
                            for ow in lo..hi {
                                let iw = ow * g.stride + kj - g.pad;
                                dx_row[iw] += wv * dy_row[ow];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates dL/dW contributions of one batch element: dw += dy (x) x.
pub fn backward_weight_one<E: Element>(x: &[E], dy: &[E], g: &ConvGeom, dw: &mut [E]) {
    debug_assert_eq!(dw.len(), g.weight_len());
    let per_co = g.cin * g.kh * g.kw;
    for_each_chunk_mut(dw, per_co, |co, dw_co| {
        let dy_co = &dy[co * g.out_h * g.out_w..(co + 1) * g.out_h * g.out_w];
        for ci in 0..g.cin {
            let x_ci = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let (lo, hi) = g.ow_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = E::zero();
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih as usize >= g.h {
                            continue;
                        }
                        let x_row = &x_ci[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let dy_row = &dy_co[oh * g.out_w..(oh + 1) * g.out_w];
                        if g.stride == 1 {
                            let x_base = (lo + kj) - g.pad;
                            for (dyv, xv) in
                                dy_row[lo..hi].iter().zip(&x_row[x_base..x_base + (hi - lo)])
                            {
                                acc += *dyv * *xv;
                            }
                        } else {
                            for ow in lo..hi {
                                let iw = ow * g.stride + kj - g.pad;
                                acc += dy_row[ow] * x_row[iw];
                            }
                        }
                    }
                    dw_co[(ci * g.kh + ki) * g.kw + kj] += acc;
                }
            }
        }
    });
}
