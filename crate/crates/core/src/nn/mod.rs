//! Minimal trainable neural-network engine: layer forward/backward passes,
//! losses, and the shape arithmetic they share.

mod conv;
mod fc;
mod pool;
mod softmax;

pub use conv::{BatchNorm, ConvCache, ConvGrads, ConvLayer};
pub use fc::{FcCache, FcGrads, FcLayer};
pub use pool::{maxpool_backward, maxpool_forward, PoolCache};
pub use softmax::{softmax, softmax_cross_entropy};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape {shape:?} does not hold {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("expected tensor shape {expected:?}, got {got:?}")]
    TensorMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("kernel {kernel} exceeds padded input {input}+2*{padding}")]
    KernelExceedsInput { input: usize, kernel: usize, padding: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Whether a pass uses batch statistics (training) or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// Geometry of one convolution/pooling dimension pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeSpec {
    pub w_in: usize,
    pub w_k: usize,
    pub w_p: usize,
    pub w_s: usize,
    pub h_in: usize,
    pub h_k: usize,
    pub h_p: usize,
    pub h_s: usize,
}

impl ShapeSpec {
    pub fn square(input: usize, kernel: usize, padding: usize, stride: usize) -> Self {
        Self {
            w_in: input,
            w_k: kernel,
            w_p: padding,
            w_s: stride,
            h_in: input,
            h_k: kernel,
            h_p: padding,
            h_s: stride,
        }
    }
}

/// Output extent of one spatial dimension: floor((in - k + 2p) / s) + 1.
///
/// Flooring drops trailing pixels when the stride does not divide evenly.
pub fn conv_out_dim(input: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize, ShapeError> {
    if kernel == 0 || stride == 0 {
        return Err(ShapeError::InvalidGeometry(format!(
            "kernel {kernel} and stride {stride} must be >= 1"
        )));
    }
    if input + 2 * padding < kernel {
        return Err(ShapeError::KernelExceedsInput {
            input,
            kernel,
            padding,
        });
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// Output (width, height) of a layer described by `spec`.
pub fn output_shape(spec: &ShapeSpec) -> Result<(usize, usize), ShapeError> {
    let w = conv_out_dim(spec.w_in, spec.w_k, spec.w_p, spec.w_s)?;
    let h = conv_out_dim(spec.h_in, spec.h_k, spec.h_p, spec.h_s)?;
    Ok((w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1_width() {
        // 224 through a 5x5 stride-1 kernel with no padding
        let spec = ShapeSpec::square(224, 5, 0, 1);
        assert_eq!(output_shape(&spec).unwrap(), (220, 220));
    }

    #[test]
    fn pooling_floors_odd_input() {
        // 13 through a 2x2 stride-2 window drops the trailing row/column
        let spec = ShapeSpec::square(13, 2, 0, 2);
        assert_eq!(output_shape(&spec).unwrap(), (6, 6));
    }

    #[test]
    fn identity_kernel_preserves_extent() {
        for n in [1usize, 2, 7, 224] {
            let spec = ShapeSpec::square(n, 1, 0, 1);
            assert_eq!(output_shape(&spec).unwrap(), (n, n));
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let spec = ShapeSpec::square(3, 5, 0, 1);
        assert!(matches!(
            output_shape(&spec),
            Err(ShapeError::KernelExceedsInput { .. })
        ));
        // padding can rescue it: 3 + 2*1 = 5
        let spec = ShapeSpec::square(3, 5, 1, 1);
        assert_eq!(output_shape(&spec).unwrap(), (1, 1));
    }
}
