//! Fully connected (affine) layer; input of any rank is flattened per sample.

use super::ShapeError;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FcLayer {
    /// (out_features, in_features)
    pub weights: Tensor,
    /// (out_features)
    pub bias: Tensor,
}

#[derive(Debug)]
pub struct FcCache {
    input: Tensor,
}

#[derive(Debug)]
pub struct FcGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl FcLayer {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn learnable_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    fn check(&self, input: &Tensor) -> Result<(usize, usize), ShapeError> {
        let shape = input.shape();
        if shape.is_empty() {
            return Err(ShapeError::TensorMismatch {
                expected: vec![0, self.in_features()],
                got: shape.to_vec(),
            });
        }
        let batch = shape[0];
        let per_sample: usize = shape[1..].iter().product();
        if per_sample != self.in_features() {
            return Err(ShapeError::TensorMismatch {
                expected: vec![batch, self.in_features()],
                got: shape.to_vec(),
            });
        }
        Ok((batch, per_sample))
    }

    /// output(b, o) = sum_i weights(o, i) * input(b, i) + bias(o)
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, FcCache), ShapeError> {
        let (batch, n_in) = self.check(input)?;
        let n_out = self.out_features();
        let mut out = Tensor::zeros(&[batch, n_out]);
        let idata = input.data();
        let wdata = self.weights.data();
        let odata = out.data_mut();
        for b in 0..batch {
            let row = &idata[b * n_in..(b + 1) * n_in];
            for o in 0..n_out {
                let wrow = &wdata[o * n_in..(o + 1) * n_in];
                let mut acc = self.bias.data()[o];
                for (x, w) in row.iter().zip(wrow.iter()) {
                    acc += x * w;
                }
                odata[b * n_out + o] = acc;
            }
        }
        Ok((
            out,
            FcCache {
                input: input.clone(),
            },
        ))
    }

    pub fn backward(&self, cache: &FcCache, grad_out: &Tensor) -> Result<(Tensor, FcGrads), ShapeError> {
        let (batch, n_in) = self.check(&cache.input)?;
        let n_out = self.out_features();
        if grad_out.shape() != [batch, n_out] {
            return Err(ShapeError::TensorMismatch {
                expected: vec![batch, n_out],
                got: grad_out.shape().to_vec(),
            });
        }
        let idata = cache.input.data();
        let gdata = grad_out.data();
        let wdata = self.weights.data();

        let mut gw = Tensor::zeros(&[n_out, n_in]);
        let mut gb = Tensor::zeros(&[n_out]);
        let mut gin = Tensor::zeros(cache.input.shape());
        {
            let gwd = gw.data_mut();
            let gbd = gb.data_mut();
            let gid = gin.data_mut();
            for b in 0..batch {
                let irow = &idata[b * n_in..(b + 1) * n_in];
                let grow = &gdata[b * n_out..(b + 1) * n_out];
                let gin_row = &mut gid[b * n_in..(b + 1) * n_in];
                for (o, &g) in grow.iter().enumerate() {
                    gbd[o] += g;
                    let wrow = &wdata[o * n_in..(o + 1) * n_in];
                    let gwrow = &mut gwd[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        gwrow[i] += g * irow[i];
                        gin_row[i] += g * wrow[i];
                    }
                }
            }
        }
        Ok((gin, FcGrads { weights: gw, bias: gb }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_fc_learnable_count() {
        // 512 inputs to 9 classes: 512*9 + 9 = 4617
        let layer = FcLayer::new(512, 9);
        assert_eq!(layer.learnable_count(), 4617);
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mut layer = FcLayer::new(3, 3);
        for i in 0..3 {
            let idx = i * 3 + i;
            layer.weights.data_mut()[idx] = 1.0;
        }
        let input = Tensor::from_vec(&[1, 3], vec![0.5, -1.5, 2.0]).unwrap();
        let (out, _) = layer.forward(&input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn flattens_image_shaped_input() {
        let layer = FcLayer::new(2 * 2 * 2, 4);
        let input = Tensor::zeros(&[3, 2, 2, 2]);
        let (out, _) = layer.forward(&input).unwrap();
        assert_eq!(out.shape(), &[3, 4]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let layer = FcLayer::new(4, 2);
        let input = Tensor::zeros(&[1, 5]);
        assert!(layer.forward(&input).is_err());
    }
}
