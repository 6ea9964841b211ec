//! im2col / col2im helpers for 2-D cross-correlation and pooling geometry.

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

/// Spatial geometry of one convolution: input extent, kernel, stride, padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

impl ConvGeometry {
    /// Returns `None` when the kernel does not fit in the (padded) input.
    pub fn new(
        channels: usize,
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        if stride == 0 || k_h == 0 || k_w == 0 {
            return None;
        }
        let (out_h, pad_top, out_w, pad_left) = match padding {
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return None;
                }
                ((in_h - k_h) / stride + 1, 0, (in_w - k_w) / stride + 1, 0)
            }
            Padding::Same => {
                let (oh, pt) = same_padding(in_h, k_h, stride);
                let (ow, pl) = same_padding(in_w, k_w, stride);
                (oh, pt, ow, pl)
            }
        };
        Some(ConvGeometry {
            channels,
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    /// Source index into a `C×H×W` image for column entry `(row, col)`, or
    /// `None` when it lands in the zero padding.
    #[inline]
    fn source(&self, row: usize, col: usize) -> Option<usize> {
        let c = row / (self.k_h * self.k_w);
        let ki = (row / self.k_w) % self.k_h;
        let kj = row % self.k_w;
        let oy = col / self.out_w;
        let ox = col % self.out_w;
        let y = (oy * self.stride + ki).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad_left)?;
        if y >= self.in_h || x >= self.in_w {
            return None;
        }
        Some((c * self.in_h + y) * self.in_w + x)
    }

    /// Unfolds one image into a `patch_len × out_len` matrix.
    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        debug_assert_eq!(image.len(), self.in_len());
        debug_assert_eq!(cols.len(), self.patch_len() * self.out_len());
        let out_len = self.out_len();
        for row in 0..self.patch_len() {
            let dst = &mut cols[row * out_len..(row + 1) * out_len];
            for (col, d) in dst.iter_mut().enumerate() {
                *d = self.source(row, col).map_or(T::zero(), |i| image[i]);
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into an image.
    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let out_len = self.out_len();
        for row in 0..self.patch_len() {
            let src = &cols[row * out_len..(row + 1) * out_len];
            for (col, &v) in src.iter().enumerate() {
                if let Some(i) = self.source(row, col) {
                    image[i] = image[i] + v;
                }
            }
        }
    }
}
