//! 2-D convolution with optional batch normalization and ReLU.
//!
//! Forward and backward passes are exact (no approximation); batch-statistic
//! reductions always run in a fixed order so results do not depend on the
//! rayon thread count.

use rayon::prelude::*;

use super::{conv_out_dim, Activation, ShapeError};
use crate::tensor::Tensor;

/// Per-channel standardization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::filled(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// (out_channels, in_channels, k_h, k_w)
    pub kernel: Tensor,
    /// (out_channels)
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub bn: Option<BatchNorm>,
    pub activation: Activation,
}

/// Values saved by a training-mode forward pass for the backward pass.
#[derive(Debug)]
pub struct ConvCache {
    input: Tensor,
    /// Normalized pre-scale activations, present when BN is enabled.
    xhat: Option<Tensor>,
    inv_std: Option<Vec<f64>>,
    relu_mask: Option<Vec<bool>>,
    out_shape: [usize; 4],
}

#[derive(Debug)]
pub struct ConvGrads {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub bn_scale: Option<Tensor>,
    pub bn_shift: Option<Tensor>,
}

impl ConvGrads {
    /// Gradient tensors in the same order as [`ConvLayer::params`].
    pub fn flat(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.kernel, &self.bias];
        if let Some(s) = &self.bn_scale {
            v.push(s);
        }
        if let Some(s) = &self.bn_shift {
            v.push(s);
        }
        v
    }
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        batch_norm: bool,
        activation: Activation,
    ) -> Self {
        Self {
            kernel: Tensor::zeros(&[out_channels, in_channels, kernel.0, kernel.1]),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
            bn: if batch_norm {
                Some(BatchNorm::new(out_channels))
            } else {
                None
            },
            activation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    /// Kernel + bias + (scale, shift) when batch norm is present.
    pub fn learnable_count(&self) -> usize {
        let oc = self.out_channels();
        self.kernel.numel() + oc + if self.bn.is_some() { 2 * oc } else { 0 }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.kernel, &self.bias];
        if let Some(bn) = &self.bn {
            v.push(&bn.scale);
            v.push(&bn.shift);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.kernel, &mut self.bias];
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.scale);
            v.push(&mut bn.shift);
        }
        v
    }

    /// Learnable parameters plus BN running statistics, in checkpoint order.
    pub fn state_tensors(&self) -> Vec<&Tensor> {
        let mut v = self.params();
        if let Some(bn) = &self.bn {
            v.push(&bn.running_mean);
            v.push(&bn.running_var);
        }
        v
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.kernel, &mut self.bias];
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.scale);
            v.push(&mut bn.shift);
            v.push(&mut bn.running_mean);
            v.push(&mut bn.running_var);
        }
        v
    }

    fn check_input(&self, input: &Tensor) -> Result<[usize; 4], ShapeError> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(ShapeError::TensorMismatch {
                expected: vec![0, self.in_channels(), 0, 0],
                got: s.to_vec(),
            });
        }
        if s[1] != self.in_channels() {
            return Err(ShapeError::ChannelMismatch {
                expected: self.in_channels(),
                got: s[1],
            });
        }
        let (kh, kw) = self.kernel_size();
        let oh = conv_out_dim(s[2], kh, self.padding, self.stride)?;
        let ow = conv_out_dim(s[3], kw, self.padding, self.stride)?;
        Ok([s[0], self.out_channels(), oh, ow])
    }

    /// Raw convolution plus bias; no normalization or activation.
    fn convolve(&self, input: &Tensor, out_shape: [usize; 4]) -> Tensor {
        let [_batch, oc_n, oh, ow] = out_shape;
        let (in_c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
        let (kh, kw) = self.kernel_size();
        let (stride, padding) = (self.stride, self.padding);
        let kdata = self.kernel.data();
        let bdata = self.bias.data();
        let idata = input.data();

        let mut out = Tensor::zeros(&out_shape);
        // Each (batch, out-channel) plane is computed independently.
        out.data_mut()
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(plane, out_plane)| {
                let b = plane / oc_n;
                let oc = plane % oc_n;
                out_plane.fill(bdata[oc]);
                for ic in 0..in_c {
                    let in_plane = &idata[(b * in_c + ic) * h * w..(b * in_c + ic + 1) * h * w];
                    let kbase = (oc * in_c + ic) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = kdata[kbase + ky * kw + kx];
                            gather_rows(
                                out_plane, in_plane, wgt, oh, ow, h, w, ky, kx, stride, padding,
                            );
                        }
                    }
                }
            });
        out
    }

    /// Training-mode forward pass: BN uses batch statistics and updates the
    /// running statistics; the cache holds everything backward needs.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, ConvCache), ShapeError> {
        let out_shape = self.check_input(input)?;
        let [batch, oc_n, oh, ow] = out_shape;
        let mut z = self.convolve(input, out_shape);

        let mut xhat = None;
        let mut inv_std = None;
        if let Some(bn) = &mut self.bn {
            let plane = oh * ow;
            let n = (batch * plane) as f64;
            let mut xh = Tensor::zeros(&out_shape);
            let mut inv = vec![0.0; oc_n];
            let zdata = z.data_mut();
            let xdata = xh.data_mut();
            for c in 0..oc_n {
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for b in 0..batch {
                    let base = (b * oc_n + c) * plane;
                    for &v in &zdata[base..base + plane] {
                        sum += v;
                        sumsq += v * v;
                    }
                }
                let mean = sum / n;
                let var = (sumsq / n - mean * mean).max(0.0);
                let istd = 1.0 / (var + bn.eps).sqrt();
                inv[c] = istd;
                let (scale, shift) = (bn.scale.data()[c], bn.shift.data()[c]);
                for b in 0..batch {
                    let base = (b * oc_n + c) * plane;
                    for i in base..base + plane {
                        let hnorm = (zdata[i] - mean) * istd;
                        xdata[i] = hnorm;
                        zdata[i] = scale * hnorm + shift;
                    }
                }
                let m = bn.momentum;
                bn.running_mean.data_mut()[c] = (1.0 - m) * bn.running_mean.data()[c] + m * mean;
                bn.running_var.data_mut()[c] = (1.0 - m) * bn.running_var.data()[c] + m * var;
            }
            xhat = Some(xh);
            inv_std = Some(inv);
        }

        let mut relu_mask = None;
        if self.activation == Activation::Relu {
            let mut mask = vec![false; z.numel()];
            for (v, m) in z.data_mut().iter_mut().zip(mask.iter_mut()) {
                if *v > 0.0 {
                    *m = true;
                } else {
                    *v = 0.0;
                }
            }
            relu_mask = Some(mask);
        }

        let cache = ConvCache {
            input: input.clone(),
            xhat,
            inv_std,
            relu_mask,
            out_shape,
        };
        Ok((z, cache))
    }

    /// Inference forward pass: BN uses running statistics; nothing is cached.
    pub fn forward_infer(&self, input: &Tensor) -> Result<Tensor, ShapeError> {
        let out_shape = self.check_input(input)?;
        let [batch, oc_n, oh, ow] = out_shape;
        let mut z = self.convolve(input, out_shape);
        if let Some(bn) = &self.bn {
            let plane = oh * ow;
            let zdata = z.data_mut();
            for c in 0..oc_n {
                let inv = 1.0 / (bn.running_var.data()[c] + bn.eps).sqrt();
                let mean = bn.running_mean.data()[c];
                let (scale, shift) = (bn.scale.data()[c], bn.shift.data()[c]);
                for b in 0..batch {
                    let base = (b * oc_n + c) * plane;
                    for v in &mut zdata[base..base + plane] {
                        *v = scale * (*v - mean) * inv + shift;
                    }
                }
            }
        }
        if self.activation == Activation::Relu {
            for v in z.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(z)
    }

    /// Gradients of a scalar loss w.r.t. input and every learnable parameter,
    /// given the gradient w.r.t. this layer's output.
    pub fn backward(&self, cache: &ConvCache, grad_out: &Tensor) -> Result<(Tensor, ConvGrads), ShapeError> {
        let [batch, oc_n, oh, ow] = cache.out_shape;
        if grad_out.shape() != [batch, oc_n, oh, ow] {
            return Err(ShapeError::TensorMismatch {
                expected: cache.out_shape.to_vec(),
                got: grad_out.shape().to_vec(),
            });
        }
        let plane = oh * ow;

        // Through ReLU.
        let mut gz = grad_out.clone();
        if let Some(mask) = &cache.relu_mask {
            for (g, &m) in gz.data_mut().iter_mut().zip(mask.iter()) {
                if !m {
                    *g = 0.0;
                }
            }
        }

        // Through batch normalization (batch-statistics variant).
        let mut bn_scale_grad = None;
        let mut bn_shift_grad = None;
        if let Some(bn) = &self.bn {
            let xhat = cache.xhat.as_ref().expect("bn cache");
            let inv_std = cache.inv_std.as_ref().expect("bn cache");
            let n = (batch * plane) as f64;
            let mut gscale = Tensor::zeros(&[oc_n]);
            let mut gshift = Tensor::zeros(&[oc_n]);
            let gdata = gz.data_mut();
            let xdata = xhat.data();
            for c in 0..oc_n {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for b in 0..batch {
                    let base = (b * oc_n + c) * plane;
                    for i in base..base + plane {
                        sum_g += gdata[i];
                        sum_gx += gdata[i] * xdata[i];
                    }
                }
                gscale.data_mut()[c] = sum_gx;
                gshift.data_mut()[c] = sum_g;
                let k = bn.scale.data()[c] * inv_std[c];
                let mean_g = sum_g / n;
                let mean_gx = sum_gx / n;
                for b in 0..batch {
                    let base = (b * oc_n + c) * plane;
                    for i in base..base + plane {
                        gdata[i] = k * (gdata[i] - mean_g - xdata[i] * mean_gx);
                    }
                }
            }
            bn_scale_grad = Some(gscale);
            bn_shift_grad = Some(gshift);
        }

        // Through the convolution itself.
        let input = &cache.input;
        let (in_c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
        let (kh, kw) = self.kernel_size();
        let (stride, padding) = (self.stride, self.padding);
        let idata = input.data();
        let gzdata = gz.data();

        let mut gkernel = Tensor::zeros(&[oc_n, in_c, kh, kw]);
        let mut gbias = Tensor::zeros(&[oc_n]);
        {
            let gb = gbias.data_mut();
            // Disjoint per-out-channel slices; batch accumulation stays ordered.
            gkernel
                .data_mut()
                .par_chunks_mut(in_c * kh * kw)
                .zip(gb.par_iter_mut())
                .enumerate()
                .for_each(|(oc, (gk_slice, gb_c))| {
                    for b in 0..batch {
                        let gplane = &gzdata[(b * oc_n + oc) * plane..(b * oc_n + oc + 1) * plane];
                        *gb_c += gplane.iter().sum::<f64>();
                        for ic in 0..in_c {
                            let iplane = &idata[(b * in_c + ic) * h * w..(b * in_c + ic + 1) * h * w];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    gk_slice[(ic * kh + ky) * kw + kx] += correlate_rows(
                                        gplane, iplane, oh, ow, h, w, ky, kx, stride, padding,
                                    );
                                }
                            }
                        }
                    }
                });
        }

        let mut gin = Tensor::zeros(&[batch, in_c, h, w]);
        let kdata = self.kernel.data();
        gin.data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(pidx, gin_plane)| {
                let b = pidx / in_c;
                let ic = pidx % in_c;
                for oc in 0..oc_n {
                    let gplane = &gzdata[(b * oc_n + oc) * plane..(b * oc_n + oc + 1) * plane];
                    let kbase = (oc * in_c + ic) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = kdata[kbase + ky * kw + kx];
                            scatter_rows(
                                gin_plane, gplane, wgt, oh, ow, h, w, ky, kx, stride, padding,
                            );
                        }
                    }
                }
            });

        Ok((
            gin,
            ConvGrads {
                kernel: gkernel,
                bias: gbias,
                bn_scale: bn_scale_grad,
                bn_shift: bn_shift_grad,
            },
        ))
    }
}

/// Valid output-column range for a kernel column offset:
/// ix = ox*stride + kx - padding must land in [0, w).
#[inline]
fn col_range(ow: usize, w: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let off = kx as isize - padding as isize;
    let lo = if off < 0 {
        ((-off) as usize + stride - 1) / stride
    } else {
        0
    };
    let hi_ix = w as isize - 1 - off;
    if hi_ix < 0 {
        return (0, 0);
    }
    let hi = ((hi_ix as usize) / stride + 1).min(ow);
    (lo.min(hi), hi)
}

/// out[oy][ox] += wgt * img[oy*stride+ky-p][ox*stride+kx-p] over valid positions.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gather_rows(
    out_plane: &mut [f64],
    in_plane: &[f64],
    wgt: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) {
    let (lo, hi) = col_range(ow, w, kx, stride, padding);
    if lo >= hi {
        return;
    }
    let yoff = ky as isize - padding as isize;
    let xoff = kx as isize - padding as isize;
    for oy in 0..oh {
        let iy = oy as isize * stride as isize + yoff;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let ibase = (iy as usize * w) as isize + lo as isize * stride as isize + xoff;
        let ibase = ibase as usize;
        let dst = &mut out_plane[oy * ow + lo..oy * ow + hi];
        if stride == 1 {
            let src = &in_plane[ibase..ibase + (hi - lo)];
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += wgt * s;
            }
        } else {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += wgt * in_plane[ibase + i * stride];
            }
        }
    }
}

/// grad_in[oy*stride+ky-p][ox*stride+kx-p] += wgt * grad_out[oy][ox] over valid
/// positions; the transpose of [`gather_rows`].
#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_rows(
    gin_plane: &mut [f64],
    gout_plane: &[f64],
    wgt: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) {
    let (lo, hi) = col_range(ow, w, kx, stride, padding);
    if lo >= hi {
        return;
    }
    let yoff = ky as isize - padding as isize;
    let xoff = kx as isize - padding as isize;
    for oy in 0..oh {
        let iy = oy as isize * stride as isize + yoff;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let ibase = ((iy as usize * w) as isize + lo as isize * stride as isize + xoff) as usize;
        let src = &gout_plane[oy * ow + lo..oy * ow + hi];
        if stride == 1 {
            let dst = &mut gin_plane[ibase..ibase + (hi - lo)];
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += wgt * s;
            }
        } else {
            for (i, s) in src.iter().enumerate() {
                gin_plane[ibase + i * stride] += wgt * s;
            }
        }
    }
}

/// Sum over valid positions of gplane[oy][ox] * iplane[iy][ix]; the kernel
/// gradient inner product.
#[allow(clippy::too_many_arguments)]
#[inline]
fn correlate_rows(
    gplane: &[f64],
    iplane: &[f64],
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) -> f64 {
    let (lo, hi) = col_range(ow, w, kx, stride, padding);
    if lo >= hi {
        return 0.0;
    }
    let yoff = ky as isize - padding as isize;
    let xoff = kx as isize - padding as isize;
    let mut acc = 0.0;
    for oy in 0..oh {
        let iy = oy as isize * stride as isize + yoff;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let ibase = ((iy as usize * w) as isize + lo as isize * stride as isize + xoff) as usize;
        let grow = &gplane[oy * ow + lo..oy * ow + hi];
        if stride == 1 {
            let irows = &iplane[ibase..ibase + (hi - lo)];
            for (g, v) in grow.iter().zip(irows.iter()) {
                acc += g * v;
            }
        } else {
            for (i, g) in grow.iter().enumerate() {
                acc += g * iplane[ibase + i * stride];
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_conv(in_c: usize, out_c: usize, k: usize) -> ConvLayer {
        ConvLayer::new(in_c, out_c, (k, k), 1, 0, false, Activation::None)
    }

    #[test]
    fn all_ones_window_sums() {
        // 3x3 ones through a 2x2 ones kernel: each of the 4 windows sums to 4.
        let mut layer = plain_conv(1, 1, 2);
        layer.kernel = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let input = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let (out, _) = layer.forward_train(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn identity_one_by_one_kernel() {
        let mut layer = plain_conv(1, 1, 1);
        layer.kernel = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let out = layer.forward_infer(&input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn table_conv1_output_extent() {
        // 32 kernels of 5x5 over a 3x224x224 input give 32x220x220.
        let layer = plain_conv(3, 32, 5);
        let input = Tensor::zeros(&[1, 3, 224, 224]);
        let out = layer.forward_infer(&input).unwrap();
        assert_eq!(out.shape(), &[1, 32, 220, 220]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let layer = plain_conv(3, 4, 3);
        let input = Tensor::zeros(&[1, 2, 8, 8]);
        assert!(matches!(
            layer.forward_infer(&input),
            Err(ShapeError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut layer = ConvLayer::new(2, 3, (3, 3), 1, 0, true, Activation::Relu);
        layer.kernel = Tensor::filled(&[3, 2, 3, 3], 0.1);
        let input = Tensor::filled(&[1, 2, 5, 5], 0.5);
        let (out, cache) = layer.forward_train(&input).unwrap();
        let gout = Tensor::zeros(out.shape());
        let (gin, grads) = layer.backward(&cache, &gout).unwrap();
        assert!(gin.data().iter().all(|&v| v == 0.0));
        assert!(grads.kernel.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_convolution_passes_gradient_through() {
        let mut layer = plain_conv(1, 1, 1);
        layer.kernel = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![0.3, -0.4, 0.9, 1.2]).unwrap();
        let (_, cache) = layer.forward_train(&input).unwrap();
        let gout = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (gin, _) = layer.backward(&cache, &gout).unwrap();
        assert_eq!(gin.data(), gout.data());
    }

    #[test]
    fn bn_train_output_targets_shift_and_scale() {
        let mut layer = ConvLayer::new(1, 2, (1, 1), 1, 0, true, Activation::None);
        layer.kernel = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, -0.5]).unwrap();
        let bn = layer.bn.as_mut().unwrap();
        bn.scale = Tensor::from_vec(&[2], vec![2.0, 0.7]).unwrap();
        bn.shift = Tensor::from_vec(&[2], vec![-1.0, 3.0]).unwrap();
        // ample input variance keeps the eps term in the BN denominator
        // negligible against the 1e-5 check below
        let data: Vec<f64> = (0..2 * 6 * 6).map(|i| (i as f64 * 0.37).sin() * 10.0).collect();
        let mut input = Tensor::zeros(&[2, 1, 6, 6]);
        input.data_mut().copy_from_slice(&data);
        let (out, _) = layer.forward_train(&input).unwrap();
        let plane = 36;
        for c in 0..2 {
            let mut vals = Vec::new();
            for b in 0..2 {
                let base = (b * 2 + c) * plane;
                vals.extend_from_slice(&out.data()[base..base + plane]);
            }
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let scale = layer.bn.as_ref().unwrap().scale.data()[c];
            let shift = layer.bn.as_ref().unwrap().shift.data()[c];
            assert!((mean - shift).abs() < 1e-6, "mean {mean} vs shift {shift}");
            assert!((var - scale * scale).abs() < 1e-5, "var {var} vs scale^2");
        }
    }

    #[test]
    fn padded_stride_two_matches_naive() {
        // Cross-check the sliced loops against a direct quadruple loop.
        let mut layer = ConvLayer::new(2, 3, (3, 3), 2, 1, false, Activation::None);
        let kvals: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        layer.kernel = Tensor::from_vec(&[3, 2, 3, 3], kvals).unwrap();
        layer.bias = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let ivals: Vec<f64> = (0..2 * 2 * 5 * 5).map(|i| ((i * 11 % 17) as f64) * 0.25).collect();
        let input = Tensor::from_vec(&[2, 2, 5, 5], ivals).unwrap();
        let out = layer.forward_infer(&input).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3, 3]);

        let mut expect = Tensor::zeros(&[2, 3, 3, 3]);
        for b in 0..2 {
            for oc in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = layer.bias.data()[oc];
                        for ic in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                        acc += layer.kernel.at4(oc, ic, ky, kx)
                                            * input.at4(b, ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let i = expect.idx4(b, oc, oy, ox);
                        expect.data_mut()[i] = acc;
                    }
                }
            }
        }
        for (a, e) in out.data().iter().zip(expect.data().iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
