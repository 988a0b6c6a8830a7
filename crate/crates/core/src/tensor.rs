//! Dense 4-D tensors in NCHW layout with an optional same-shape gradient buffer.

use crate::element::Element;
use crate::error::{Error, Result};

/// Extents (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Spatial extents match (channel counts may differ).
    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.n == other.n && self.h == other.h && self.w == other.w
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self)
    }
}

#[derive(Clone, Debug)]
pub struct Tensor<E: Element> {
    pub shape: Shape,
    pub data: Vec<E>,
    pub grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![E::zero(); shape.numel()], grad: None }
    }

    pub fn filled(shape: Shape, v: E) -> Self {
        Tensor { shape, data: vec![v; shape.numel()], grad: None }
    }

    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.idx(n, c, h, w)]
    }

    pub fn ensure_grad(&mut self) -> &mut Vec<E> {
        let n = self.numel();
        self.grad.get_or_insert_with(|| vec![E::zero(); n])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// A channel-range window into a NCHW buffer that may hold more channels than the view.
///
/// Element (n, c, y, x) of the view lives at
/// `data[((n * c_total + c_off + c) * hw) + y * w + x]`.
/// For every fixed batch index the view is one contiguous slab of `c * hw` elements,
/// which is what the kernels operate on.
#[derive(Clone, Copy, Debug)]
pub struct ViewInfo {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub c_off: usize,
    pub c_total: usize,
}

impl ViewInfo {
    pub fn contiguous(shape: Shape) -> Self {
        ViewInfo { n: shape.n, c: shape.c, h: shape.h, w: shape.w, c_off: 0, c_total: shape.c }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.n, self.c, self.h, self.w)
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn is_contiguous(&self) -> bool {
        self.c_off == 0 && self.c_total == self.c
    }

    /// Offset of batch element `n`'s slab start within the underlying buffer.
    #[inline]
    pub fn slab_start(&self, n: usize) -> usize {
        (n * self.c_total + self.c_off) * self.hw()
    }

    pub fn slab_len(&self) -> usize {
        self.c * self.hw()
    }

    /// Borrow the slab for one batch element.
    #[inline]
    pub fn slab<'a, E>(&self, data: &'a [E], n: usize) -> &'a [E] {
        let s = self.slab_start(n);
        &data[s..s + self.slab_len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let r = Tensor::<f64>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 7]);
        assert!(r.is_err());
    }

    #[test]
    fn view_slab_addressing() {
        // Buffer with 4 total channels, view of channels 1..3.
        let shape = Shape::new(2, 4, 1, 2);
        let data: Vec<f64> = (0..shape.numel()).map(|i| i as f64).collect();
        let v = ViewInfo { n: 2, c: 2, h: 1, w: 2, c_off: 1, c_total: 4 };
        let slab0 = v.slab(&data, 0);
        assert_eq!(slab0, &[2.0, 3.0, 4.0, 5.0]);
        let slab1 = v.slab(&data, 1);
        assert_eq!(slab1, &[10.0, 11.0, 12.0, 13.0]);
    }
}
