//! Convolution and pooling kernels over NCHW buffers.
//!
//! Convolutions are lowered to matrix products: `im2col` builds one row per
//! output location (sample-major, then row, then column) holding the
//! receptive field flattened channel-major, so that a kernel bank stored as
//! `[out_channels, in_channels * kh * kw]` multiplies it directly.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::Network("kernel dims and stride must be >= 1".into()));
        }
        let (ph, pw) = (in_h + 2 * pad, in_w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeom {
            in_c,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Receptive field size (fan-in of one output channel).
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    /// Input offset (within one sample) feeding patch column `k` at output
    /// location (`oy`, `ox`), or `None` when it falls in the padding.
    #[inline]
    fn source(&self, k: usize, oy: usize, ox: usize) -> Option<usize> {
        let c = k / (self.kh * self.kw);
        let r = k % (self.kh * self.kw);
        let (ky, kx) = (r / self.kw, r % self.kw);
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some((c * self.in_h + y as usize) * self.in_w + x as usize)
        }
    }
}

/// `input` is `[batch, in_c, in_h, in_w]` flattened; returns `[batch * positions, patch_len]`.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64], batch: usize) -> Vec<f64> {
    let k_len = g.patch_len();
    let pos = g.positions();
    let mut out = vec![0.0; batch * pos * k_len];
    let in_len = g.in_len();
    for b in 0..batch {
        let sample = &input[b * in_len..(b + 1) * in_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * pos + oy * g.out_w + ox) * k_len;
                let dst = &mut out[row..row + k_len];
                if g.pad == 0 {
                    // Fast path: every tap is in bounds.
                    let mut k = 0;
                    for c in 0..g.in_c {
                        for ky in 0..g.kh {
                            let base = (c * g.in_h + oy * g.stride + ky) * g.in_w + ox * g.stride;
                            dst[k..k + g.kw].copy_from_slice(&sample[base..base + g.kw]);
                            k += g.kw;
                        }
                    }
                } else {
                    for (k, v) in dst.iter_mut().enumerate() {
                        if let Some(src) = g.source(k, oy, ox) {
                            *v = sample[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], batch: usize) -> Vec<f64> {
    let k_len = g.patch_len();
    let pos = g.positions();
    let in_len = g.in_len();
    let mut out = vec![0.0; batch * in_len];
    for b in 0..batch {
        let sample = &mut out[b * in_len..(b + 1) * in_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * pos + oy * g.out_w + ox) * k_len;
                let src = &cols[row..row + k_len];
                if g.pad == 0 {
                    let mut k = 0;
                    for c in 0..g.in_c {
                        for ky in 0..g.kh {
                            let base = (c * g.in_h + oy * g.stride + ky) * g.in_w + ox * g.stride;
                            for (d, s) in sample[base..base + g.kw].iter_mut().zip(&src[k..k + g.kw]) {
                                *d += s;
                            }
                            k += g.kw;
                        }
                    }
                } else {
                    for (k, v) in src.iter().enumerate() {
                        if let Some(dst) = g.source(k, oy, ox) {
                            sample[dst] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[batch * positions, channels]` -> `[batch, channels, positions]`.
pub(crate) fn positions_to_nchw(x: &[f64], batch: usize, positions: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for s in 0..positions {
            let row = &x[(b * positions + s) * channels..(b * positions + s + 1) * channels];
            for (c, v) in row.iter().enumerate() {
                out[(b * channels + c) * positions + s] = *v;
            }
        }
    }
    out
}

/// `[batch, channels, positions]` -> `[batch * positions, channels]`.
pub(crate) fn nchw_to_positions(x: &[f64], batch: usize, positions: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let plane = &x[(b * channels + c) * positions..(b * channels + c + 1) * positions];
            for (s, v) in plane.iter().enumerate() {
                out[(b * positions + s) * channels + c] = *v;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(c: usize, in_h: usize, in_w: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Network("pool size must be >= 1".into()));
        }
        if k > in_h || k > in_w {
            return Err(Error::shape(format!("pool {k} larger than input {in_h}x{in_w}")));
        }
        Ok(PoolGeom {
            c,
            in_h,
            in_w,
            k,
            out_h: in_h / k,
            out_w: in_w / k,
        })
    }

    pub fn in_len(&self) -> usize {
        self.c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.c * self.out_h * self.out_w
    }
}

/// Non-overlapping max pooling (window = stride = k, floor). Returns the pooled
/// values and, per output, the input offset that won (first maximum on ties).
pub(crate) fn maxpool(g: &PoolGeom, input: &[f64], batch: usize) -> (Vec<f64>, Vec<u32>) {
    let out_len = g.out_len();
    let in_len = g.in_len();
    let mut out = vec![0.0; batch * out_len];
    let mut arg = vec![0u32; batch * out_len];
    for b in 0..batch {
        for c in 0..g.c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..g.k {
                        for dx in 0..g.k {
                            let i = (c * g.in_h + oy * g.k + dy) * g.in_w + ox * g.k + dx;
                            let v = input[b * in_len + i];
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    let o = b * out_len + (c * g.out_h + oy) * g.out_w + ox;
                    out[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(g: &PoolGeom, grad_out: &[f64], argmax: &[u32], batch: usize) -> Vec<f64> {
    let out_len = g.out_len();
    let in_len = g.in_len();
    let mut grad_in = vec![0.0; batch * in_len];
    for b in 0..batch {
        for o in 0..out_len {
            grad_in[b * in_len + argmax[b * out_len + o] as usize] += grad_out[b * out_len + o];
        }
    }
    grad_in
}

/// Single-output-channel 2-D cross-correlation.
///
/// `input` is `[C, H, W]` (or `[H, W]` for one channel), `kernel` is
/// `[C, kh, kw]` (or `[kh, kw]`). Output is `[out_h, out_w]` with
/// `out = floor((in + 2 * padding - kernel) / stride) + 1`.
pub fn conv2d_eval(input: &Tensor, kernel: &Tensor, bias: f64, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w) = match input.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("conv input must be [C,H,W], got {s:?}"))),
    };
    let (kc, kh, kw) = match kernel.shape() {
        [kh, kw] => (1, *kh, *kw),
        [kc, kh, kw] => (*kc, *kh, *kw),
        s => return Err(Error::shape(format!("kernel must be [C,kh,kw], got {s:?}"))),
    };
    if kc != c {
        return Err(Error::shape(format!("input has {c} channels, kernel has {kc}")));
    }
    let g = ConvGeom::new(c, h, w, kh, kw, stride, padding)?;
    let cols = im2col(&g, input.data(), 1);
    let mut out = vec![bias; g.positions()];
    matmul_nt(&cols, kernel.data(), g.positions(), g.patch_len(), 1, &mut out, true);
    let t = Tensor::new(vec![g.out_h, g.out_w], out)?;
    t.check_finite("conv2d_eval")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple loop, independent of the im2col path.
    fn naive_conv(input: &Tensor, kernel: &Tensor, bias: f64, stride: usize, pad: usize) -> Vec<f64> {
        let [c, h, w] = input.shape().try_into().unwrap();
        let [_, kh, kw] = kernel.shape().try_into().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![bias; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                out[oy * ow + ox] += input.data()[(ch * h + y as usize) * w + x as usize]
                                    * kernel.data()[(ch * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_on_ones_input() {
        let x = Tensor::full(&[3, 3], 1.0);
        let k = Tensor::full(&[2, 2], 1.0);
        let y = conv2d_eval(&x, &k, 0.0, 1, 0).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::from_fn(&[4, 5], |i| (i as f64).sin());
        let k = Tensor::full(&[1, 1], 1.0);
        let y = conv2d_eval(&x, &k, 0.0, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let x = Tensor::zeros(&[2, 2]);
        let k = Tensor::zeros(&[3, 3]);
        assert!(matches!(conv2d_eval(&x, &k, 0.0, 1, 0), Err(Error::Shape(_))));
        assert!(conv2d_eval(&x, &k, 0.0, 1, 1).is_ok());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[3, 2, 2]);
        assert!(conv2d_eval(&x, &k, 0.0, 1, 0).is_err());
    }

    #[test]
    fn matches_naive_loop_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let c = rng.gen_range(1..4);
            let h = rng.gen_range(3..9);
            let w = rng.gen_range(3..9);
            let kh = rng.gen_range(1..=3.min(h));
            let kw = rng.gen_range(1..=3.min(w));
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            let x = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
            let k = Tensor::from_fn(&[c, kh, kw], |_| rng.gen_range(-1.0..1.0));
            let b = rng.gen_range(-1.0..1.0);
            let got = conv2d_eval(&x, &k, b, stride, pad).unwrap();
            let want = naive_conv(&x, &k, b, stride, pad);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom::new(2, 5, 6, 3, 2, 2, 1).unwrap();
        let batch = 2;
        let x: Vec<f64> = (0..batch * g.in_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..batch * g.positions() * g.patch_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let lhs: f64 = im2col(&g, &x, batch).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&g, &y, batch)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let g = PoolGeom::new(1, 2, 4, 2).unwrap();
        let x = [1.0, 3.0, 5.0, 5.0, 2.0, 0.0, 5.0, 1.0];
        let (y, arg) = maxpool(&g, &x, 1);
        assert_eq!(y, vec![3.0, 5.0]);
        assert_eq!(arg, vec![1, 2]);
        let back = maxpool_backward(&g, &[1.0, 2.0], &arg, 1);
        assert_eq!(back, vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
