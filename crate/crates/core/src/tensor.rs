//! Dense `N×C×H×W` f32 tensors and the im2col machinery behind convolutions.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "{} values cannot form a {n}x{c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn from_f64(shape: [usize; 4], data: &[f64]) -> Result<Self> {
        Tensor::from_vec(shape[0], shape[1], shape[2], shape[3], data.iter().map(|&v| v as f32).collect())
    }

    /// Stacks per-sample buffers of identical `c×h×w` shape.
    pub fn stack(samples: &[&[f32]], c: usize, h: usize, w: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        for s in samples {
            if s.len() != c * h * w {
                return Err(Error::shape("stacked sample has the wrong size"));
            }
            data.extend_from_slice(s);
        }
        Tensor::from_vec(samples.len(), c, h, w, data)
    }

    /// Channel concatenation of two tensors with equal batch and spatial size.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                a.shape(),
                b.shape()
            )));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Ok(Tensor {
            n: a.n,
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        })
    }

    /// First `c` channels of every sample.
    pub fn leading_channels(&self, c: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.n * c * self.plane());
        for i in 0..self.n {
            data.extend_from_slice(&self.sample(i)[..c * self.plane()]);
        }
        Tensor {
            n: self.n,
            c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Output side length of a convolution.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Unfolds one `c×h×w` sample into a `(c·k·k) × (oh·ow)` row-major matrix
/// with zero padding.
pub fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<f32> {
    let oh = conv_out(h, k, stride, pad).expect("kernel fits");
    let ow = conv_out(w, k, stride, pad).expect("kernel fits");
    let cols = oh * ow;
    let mut out = vec![0.0f32; c * k * k * cols];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
pub fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<f32> {
    let oh = conv_out(h, k, stride, pad).expect("kernel fits");
    let ow = conv_out(w, k, stride, pad).expect("kernel fits");
    let n_cols = oh * ow;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `C = alpha·op(A)·op(B) + beta·C` for row-major buffers, where `op`
/// optionally transposes. `A` is `m×k` after `op`, `B` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index the kernel touches lies
    // inside the three buffers for the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
