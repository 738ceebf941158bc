//! Reference kernels for the directional transpose convolution decoder.
//!
//! Everything here is CPU, dense and unoptimized beyond loop order. The `f64`
//! paths are what the gradient checks run on.

mod decoder;
mod directional;
mod gradcheck;
mod tconv3x3;
mod tensor;
mod weights;

pub use decoder::{
    decoder_block_backward, decoder_block_forward, parity_check, BaselineBank, DecoderBlock,
    DecoderBlockParams, DecoderGrads,
};
pub use directional::{
    dir_tconv1d, dir_tconv1d_backward, dir_tconv1d_strided, Direction, Filter1D, DEFAULT_RADIUS,
};
pub use gradcheck::{adjoint_check, finite_diff_at, finite_diff_check, linearity_check, GradCheckReport};
pub use tconv3x3::{tconv3x3, tconv3x3_backward, TConv3x3};
pub use tensor::{Scalar, Tensor4};
pub use weights::{read_decoder, read_tensor, write_decoder, write_tensor};

use crate::error::Result;

/// Gradients of a scalar loss with respect to a layer's input and its
/// flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub input: Tensor4<f64>,
    pub params: Vec<f64>,
}

/// A differentiable `f64` operator with a flat parameter vector, so the
/// gradient checks can treat every layer the same way.
pub trait Layer {
    /// Output dims for a given input dims, or an error if the input does not fit.
    fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 4]>;

    fn forward(&self, x: &Tensor4<f64>) -> Result<Tensor4<f64>>;

    /// Gradients of `<forward(x), upstream>`.
    fn backward(&self, x: &Tensor4<f64>, upstream: &Tensor4<f64>) -> Result<Gradients>;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// True when `forward` is linear in `x`.
    fn is_linear(&self) -> bool;
}

/// One directional filter applied to every channel plane independently.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalTConv {
    pub filter: Filter1D<f64>,
    pub stride: usize,
}

impl Layer for DirectionalTConv {
    fn output_dims(&self, d: [usize; 4]) -> Result<[usize; 4]> {
        if self.stride != 1 && self.stride != 2 {
            return Err(crate::Error::config(format!("unsupported stride {}", self.stride)));
        }
        Ok([d[0], d[1], d[2] * self.stride, d[3] * self.stride])
    }

    fn forward(&self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        let od = self.output_dims(x.dims)?;
        let mut y = Tensor4::zeros(od);
        for n in 0..x.batch() {
            for c in 0..x.channels() {
                let plane =
                    dir_tconv1d_strided(x.plane(n, c), x.height(), x.width(), &self.filter, self.stride)?;
                y.plane_mut(n, c).copy_from_slice(&plane);
            }
        }
        Ok(y)
    }

    fn backward(&self, x: &Tensor4<f64>, u: &Tensor4<f64>) -> Result<Gradients> {
        if u.dims != self.output_dims(x.dims)? {
            return Err(crate::Error::geometry("upstream gradient has the wrong dims"));
        }
        let mut input = Tensor4::zeros(x.dims);
        let mut params = vec![0.0; self.filter.taps().len()];
        for n in 0..x.batch() {
            for c in 0..x.channels() {
                let (gx, gk) = dir_tconv1d_backward(
                    x.plane(n, c),
                    x.height(),
                    x.width(),
                    &self.filter,
                    self.stride,
                    u.plane(n, c),
                )?;
                input.plane_mut(n, c).copy_from_slice(&gx);
                params.iter_mut().zip(gk).for_each(|(p, g)| *p += g);
            }
        }
        Ok(Gradients { input, params })
    }

    fn params(&self) -> Vec<f64> {
        self.filter.taps().to_vec()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.filter.taps().len() {
            return Err(crate::Error::config("wrong number of taps"));
        }
        self.filter.taps_mut().copy_from_slice(p);
        Ok(())
    }

    fn is_linear(&self) -> bool {
        true
    }
}
