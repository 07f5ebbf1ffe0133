//! Max pooling with argmax routing for the backward pass.

use super::{conv_out_dim, ShapeError};
use crate::tensor::Tensor;

/// Flat input index of the winning element per output position.
#[derive(Debug)]
pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: [usize; 4],
    out_shape: [usize; 4],
}

/// Window maximum over each channel plane. Ties go to the first element in
/// row-major window order so the backward pass is deterministic.
pub fn maxpool_forward(
    input: &Tensor,
    size: usize,
    stride: usize,
) -> Result<(Tensor, PoolCache), ShapeError> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(ShapeError::TensorMismatch {
            expected: vec![0, 0, 0, 0],
            got: s.to_vec(),
        });
    }
    let [batch, ch, h, w] = [s[0], s[1], s[2], s[3]];
    let oh = conv_out_dim(h, size, 0, stride)?;
    let ow = conv_out_dim(w, size, 0, stride)?;

    let mut out = Tensor::zeros(&[batch, ch, oh, ow]);
    let mut argmax = vec![0usize; batch * ch * oh * ow];
    let idata = input.data();
    let odata = out.data_mut();

    let mut oi = 0;
    for b in 0..batch {
        for c in 0..ch {
            let plane_base = (b * ch + c) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = plane_base + y0 * w + x0;
                    for ky in 0..size {
                        let row = plane_base + (y0 + ky) * w + x0;
                        for kx in 0..size {
                            let v = idata[row + kx];
                            if v > best {
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    odata[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }

    Ok((
        out,
        PoolCache {
            argmax,
            in_shape: [batch, ch, h, w],
            out_shape: [batch, ch, oh, ow],
        },
    ))
}

/// Routes each output gradient to its argmax position; all other positions
/// receive zero.
pub fn maxpool_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor, ShapeError> {
    if grad_out.shape() != cache.out_shape {
        return Err(ShapeError::TensorMismatch {
            expected: cache.out_shape.to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let mut gin = Tensor::zeros(&cache.in_shape);
    let gdata = gin.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(cache.argmax.iter()) {
        gdata[idx] += g;
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_window_takes_max() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, cache) = maxpool_forward(&input, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);

        let gout = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let gin = maxpool_backward(&cache, &gout).unwrap();
        assert_eq!(gin.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn tie_breaks_to_first_in_row_major_order() {
        let input = Tensor::filled(&[1, 1, 2, 2], 7.0);
        let (_, cache) = maxpool_forward(&input, 2, 2).unwrap();
        let gout = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let gin = maxpool_backward(&cache, &gout).unwrap();
        assert_eq!(gin.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn halves_even_extent() {
        let input = Tensor::zeros(&[1, 32, 216, 216]);
        let (out, _) = maxpool_forward(&input, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 32, 108, 108]);
    }

    #[test]
    fn floors_odd_extent() {
        // 13x13 through a 2x2 stride-2 window drops the last row/column.
        let mut input = Tensor::zeros(&[1, 128, 13, 13]);
        input.data_mut()[12] = 99.0; // in the dropped column of the first row
        let (out, _) = maxpool_forward(&input, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 128, 6, 6]);
        assert!(out.data().iter().all(|&v| v != 99.0));
    }

    #[test]
    fn window_larger_than_input_rejected() {
        let input = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(maxpool_forward(&input, 3, 1).is_err());
    }
}
