//! Standard 3x3 transpose convolution, the layer the directional bank replaces.
//!
//! Weights are `(C_in, C_out, 3, 3)`, padding 1 and output padding `s - 1`, so
//! an `H x W` input maps to `sH x sW`:
//!
//! ```text
//! y[n, o, s*i + a - 1, s*j + b - 1] += x[n, c, i, j] * w[c, o, a, b]
//! ```

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor4};
use super::{Gradients, Layer};
use crate::error::{Error, Result};

fn check(x: &Tensor4<impl Scalar>, w: &Tensor4<impl Scalar>, stride: usize) -> Result<()> {
    if stride != 1 && stride != 2 {
        return Err(Error::config(format!("unsupported stride {stride} (1 or 2)")));
    }
    if w.dims[2] != 3 || w.dims[3] != 3 {
        return Err(Error::geometry(format!("weights {:?} are not 3x3", w.dims)));
    }
    if w.dims[0] != x.channels() {
        return Err(Error::geometry(format!(
            "weights expect {} input channels, input has {}",
            w.dims[0],
            x.channels()
        )));
    }
    Ok(())
}

/// Visits every `(input offset, output offset, weight offset)` triple for one
/// `(input channel, output channel)` plane pair.
#[inline]
fn for_each_tap(h: usize, w: usize, s: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = ((h * s) as i64, (w * s) as i64);
    for i in 0..h {
        for j in 0..w {
            for a in 0..3i64 {
                let r = (s * i) as i64 + a - 1;
                if r < 0 || r >= oh {
                    continue;
                }
                for b in 0..3i64 {
                    let c = (s * j) as i64 + b - 1;
                    if c < 0 || c >= ow {
                        continue;
                    }
                    f(i * w + j, (r * ow + c) as usize, (a * 3 + b) as usize);
                }
            }
        }
    }
}

pub fn tconv3x3<T: Scalar>(x: &Tensor4<T>, weights: &Tensor4<T>, stride: usize) -> Result<Tensor4<T>> {
    check(x, weights, stride)?;
    let (n, cin, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    let cout = weights.dims[1];
    let mut y = Tensor4::zeros([n, cout, h * stride, w * stride]);
    let plane = y.plane_len();
    if plane == 0 {
        return Ok(y);
    }
    y.data.par_chunks_mut(plane).enumerate().for_each(|(idx, out)| {
        let (b, o) = (idx / cout, idx % cout);
        for c in 0..cin {
            let xin = x.plane(b, c);
            let k = &weights.data[(c * cout + o) * 9..(c * cout + o + 1) * 9];
            for_each_tap(h, w, stride, |pi, po, pk| {
                out[po] = out[po] + xin[pi] * k[pk];
            });
        }
    });
    Ok(y)
}

/// Gradients of `<tconv3x3(x, w, s), u>` with respect to `x` and `w`.
pub fn tconv3x3_backward<T: Scalar>(
    x: &Tensor4<T>,
    weights: &Tensor4<T>,
    stride: usize,
    upstream: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check(x, weights, stride)?;
    let (n, cin, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    let cout = weights.dims[1];
    if upstream.dims != [n, cout, h * stride, w * stride] {
        return Err(Error::geometry(format!(
            "upstream gradient {:?} does not match output {:?}",
            upstream.dims,
            [n, cout, h * stride, w * stride]
        )));
    }
    let mut gx = Tensor4::zeros(x.dims);
    let mut gw = Tensor4::zeros(weights.dims);
    for b in 0..n {
        for c in 0..cin {
            let xin = x.plane(b, c);
            for o in 0..cout {
                let u = upstream.plane(b, o);
                let base = (c * cout + o) * 9;
                let k = &weights.data[base..base + 9];
                let gxp = &mut gx.data[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                let gk = &mut gw.data[base..base + 9];
                for_each_tap(h, w, stride, |pi, po, pk| {
                    gxp[pi] = gxp[pi] + u[po] * k[pk];
                    gk[pk] = gk[pk] + xin[pi] * u[po];
                });
            }
        }
    }
    Ok((gx, gw))
}

/// Layer wrapper over [`tconv3x3`].
#[derive(Debug, Clone, PartialEq)]
pub struct TConv3x3 {
    pub weights: Tensor4<f64>,
    pub stride: usize,
}

impl Layer for TConv3x3 {
    fn output_dims(&self, d: [usize; 4]) -> Result<[usize; 4]> {
        check(&Tensor4::<f64>::zeros([0, d[1], 0, 0]), &self.weights, self.stride)?;
        Ok([d[0], self.weights.dims[1], d[2] * self.stride, d[3] * self.stride])
    }

    fn forward(&self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        tconv3x3(x, &self.weights, self.stride)
    }

    fn backward(&self, x: &Tensor4<f64>, u: &Tensor4<f64>) -> Result<Gradients> {
        let (input, gw) = tconv3x3_backward(x, &self.weights, self.stride, u)?;
        Ok(Gradients {
            input,
            params: gw.data,
        })
    }

    fn params(&self) -> Vec<f64> {
        self.weights.data.clone()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.weights.data.len() {
            return Err(Error::config("wrong number of weights"));
        }
        self.weights.data.copy_from_slice(p);
        Ok(())
    }

    fn is_linear(&self) -> bool {
        true
    }
}
