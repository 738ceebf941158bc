//! Four-direction decoder block.
//!
//! ```text
//! x (C_in) -> 1x1 reduce -> z (C_mid)
//!          -> four banks of C_mid/4 directional filters each, over all of z
//!          -> concat [horizontal, vertical, forward diag, backward diag]
//!          -> max(0, .) -> 1x1 expand -> y (C_out)
//! ```
//!
//! Output `o` of direction `d` sums one `2r + 1` tap filter per input channel,
//! so the four banks together hold `C_mid * C_mid * (2r + 1)` taps, the same
//! as a `C_mid -> C_mid` bank of 3x3 kernels when `r = 4`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::directional::{input_grad_add, scatter_add, tap_grad_add, Direction, Filter1D};
use super::tensor::{Scalar, Tensor4};
use super::{Gradients, Layer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockParams<T = f64> {
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub radius: usize,
    pub stride: usize,
    /// `c_mid x c_in`, row-major.
    pub reduce: Vec<T>,
    /// `[direction][output][input channel]`, `4 * (c_mid / 4) * c_mid` filters.
    pub taps: Vec<Filter1D<T>>,
    /// `c_out x c_mid`, row-major.
    pub expand: Vec<T>,
}

/// Channel shape of a 3x3 transpose convolution bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineBank {
    pub c_in: usize,
    pub c_out: usize,
}

impl BaselineBank {
    pub fn param_count(&self) -> usize {
        9 * self.c_in * self.c_out
    }
}

impl<T: Scalar> DecoderBlockParams<T> {
    pub fn zeros(c_in: usize, c_mid: usize, c_out: usize, radius: usize, stride: usize) -> Result<Self> {
        if c_mid == 0 || !c_mid.is_multiple_of(4) {
            return Err(Error::config(format!(
                "C_mid must be a positive multiple of 4, got {c_mid}"
            )));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if radius == 0 {
            return Err(Error::config("filter radius must be at least 1"));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::config(format!("unsupported stride {stride} (1 or 2)")));
        }
        let q = c_mid / 4;
        let mut taps = Vec::with_capacity(c_mid * c_mid);
        for d in Direction::ALL {
            for _ in 0..q * c_mid {
                taps.push(Filter1D::new(d, vec![T::zero(); 2 * radius + 1])?);
            }
        }
        Ok(DecoderBlockParams {
            c_in,
            c_mid,
            c_out,
            radius,
            stride,
            reduce: vec![T::zero(); c_mid * c_in],
            taps,
            expand: vec![T::zero(); c_out * c_mid],
        })
    }

    /// Every weight drawn uniformly from `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        radius: usize,
        stride: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(c_in, c_mid, c_out, radius, stride)?;
        let flat: Vec<T> = (0..p.param_count())
            .map(|_| T::from(rng.random_range(-scale..scale)).unwrap())
            .collect();
        p.set_flat(&flat)?;
        Ok(p)
    }

    /// Filters per direction.
    pub fn per_direction(&self) -> usize {
        self.c_mid / 4
    }

    pub fn filter(&self, d: usize, o: usize, c: usize) -> &Filter1D<T> {
        &self.taps[(d * self.per_direction() + o) * self.c_mid + c]
    }

    /// Taps in the four directional banks.
    pub fn directional_param_count(&self) -> usize {
        self.taps.len() * (2 * self.radius + 1)
    }

    pub fn param_count(&self) -> usize {
        self.reduce.len() + self.directional_param_count() + self.expand.len()
    }

    /// Reduce weights, then taps in `[d][o][c][tap]` order, then expand weights.
    pub fn flat(&self) -> Vec<T> {
        let mut v = self.reduce.clone();
        for f in &self.taps {
            v.extend_from_slice(f.taps());
        }
        v.extend_from_slice(&self.expand);
        v
    }

    pub fn set_flat(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::config(format!(
                "decoder block has {} parameters, got {}",
                self.param_count(),
                v.len()
            )));
        }
        let (reduce, rest) = v.split_at(self.reduce.len());
        let (taps, expand) = rest.split_at(self.directional_param_count());
        self.reduce.copy_from_slice(reduce);
        let n = 2 * self.radius + 1;
        for (f, chunk) in self.taps.iter_mut().zip(taps.chunks_exact(n)) {
            f.taps_mut().copy_from_slice(chunk);
        }
        self.expand.copy_from_slice(expand);
        Ok(())
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.c_in {
            return Err(Error::geometry(format!(
                "decoder block expects {} channels, input has {}",
                self.c_in,
                x.channels()
            )));
        }
        Ok(())
    }
}

/// True iff the four directional banks hold exactly as many parameters as
/// the 3x3 bank they replace.
pub fn parity_check<T: Scalar>(params: &DecoderBlockParams<T>, baseline: BaselineBank) -> bool {
    params.directional_param_count() == baseline.param_count()
}

/// `out[m] = sum_c w[m][c] * inp[c]` over planes of one batch item.
fn mix<T: Scalar>(w: &[T], inp: &[T], plane: usize, cin: usize, out: &mut [T]) {
    for (m, dst) in out.chunks_exact_mut(plane).enumerate() {
        dst.fill(T::zero());
        for c in 0..cin {
            let a = w[m * cin + c];
            if a == T::zero() {
                continue;
            }
            for (d, &s) in dst.iter_mut().zip(&inp[c * plane..(c + 1) * plane]) {
                *d = *d + a * s;
            }
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace<T> {
    z: Tensor4<T>,
    v: Tensor4<T>,
}

fn forward_trace<T: Scalar>(x: &Tensor4<T>, p: &DecoderBlockParams<T>) -> Result<(Tensor4<T>, Trace<T>)> {
    p.check_input(x)?;
    let (n, h, w) = (x.batch(), x.height(), x.width());
    let s = p.stride;
    let mut z = Tensor4::zeros([n, p.c_mid, h, w]);
    let mut v = Tensor4::zeros([n, p.c_mid, h * s, w * s]);
    let mut y = Tensor4::zeros([n, p.c_out, h * s, w * s]);
    let (pin, pout) = (h * w, h * w * s * s);
    let q = p.per_direction();
    for b in 0..n {
        let xb = &x.data[b * p.c_in * pin..(b + 1) * p.c_in * pin];
        mix(&p.reduce, xb, pin, p.c_in, &mut z.data[b * p.c_mid * pin..(b + 1) * p.c_mid * pin]);
        for d in 0..4 {
            for o in 0..q {
                let m = d * q + o;
                let dst = &mut v.data[(b * p.c_mid + m) * pout..(b * p.c_mid + m + 1) * pout];
                for c in 0..p.c_mid {
                    scatter_add(z.plane(b, c), h, w, p.filter(d, o, c), s, dst);
                }
            }
        }
        let a: Vec<T> = v.data[b * p.c_mid * pout..(b + 1) * p.c_mid * pout]
            .iter()
            .map(|&t| t.max(T::zero()))
            .collect();
        mix(&p.expand, &a, pout, p.c_mid, &mut y.data[b * p.c_out * pout..(b + 1) * p.c_out * pout]);
    }
    Ok((y, Trace { z, v }))
}

pub fn decoder_block_forward<T: Scalar>(x: &Tensor4<T>, params: &DecoderBlockParams<T>) -> Result<Tensor4<T>> {
    forward_trace(x, params).map(|(y, _)| y)
}

/// Gradients of `<decoder_block_forward(x, p), u>`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads<T = f64> {
    pub input: Tensor4<T>,
    /// Same layout as [`DecoderBlockParams::flat`].
    pub params: Vec<T>,
}

pub fn decoder_block_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &DecoderBlockParams<T>,
    upstream: &Tensor4<T>,
) -> Result<DecoderGrads<T>> {
    let (y, Trace { z, v }) = forward_trace(x, p)?;
    if upstream.dims != y.dims {
        return Err(Error::geometry(format!(
            "upstream gradient {:?} does not match output {:?}",
            upstream.dims, y.dims
        )));
    }
    let (n, h, w) = (x.batch(), x.height(), x.width());
    let s = p.stride;
    let (pin, pout) = (h * w, h * w * s * s);
    let q = p.per_direction();
    let ntaps = 2 * p.radius + 1;
    let mut g_reduce = vec![T::zero(); p.reduce.len()];
    let mut g_taps = vec![T::zero(); p.directional_param_count()];
    let mut g_expand = vec![T::zero(); p.expand.len()];
    let mut gx = Tensor4::zeros(x.dims);
    let mut gv = vec![T::zero(); p.c_mid * pout];
    let mut gz = vec![T::zero(); p.c_mid * pin];
    for b in 0..n {
        // expand stage: y = E a, a = relu(v)
        for o in 0..p.c_out {
            let u = upstream.plane(b, o);
            for m in 0..p.c_mid {
                let vm = v.plane(b, m);
                let mut acc = T::zero();
                for (&uu, &vv) in u.iter().zip(vm) {
                    acc = acc + uu * vv.max(T::zero());
                }
                g_expand[o * p.c_mid + m] = g_expand[o * p.c_mid + m] + acc;
            }
        }
        let et: Vec<T> = (0..p.c_mid * p.c_out)
            .map(|i| p.expand[(i % p.c_out) * p.c_mid + i / p.c_out])
            .collect();
        mix(&et, &upstream.data[b * p.c_out * pout..(b + 1) * p.c_out * pout], pout, p.c_out, &mut gv);
        for (g, &vv) in gv.iter_mut().zip(&v.data[b * p.c_mid * pout..(b + 1) * p.c_mid * pout]) {
            if vv <= T::zero() {
                *g = T::zero();
            }
        }
        // directional stage
        gz.fill(T::zero());
        for d in 0..4 {
            for o in 0..q {
                let m = d * q + o;
                let gvm = &gv[m * pout..(m + 1) * pout];
                for c in 0..p.c_mid {
                    let f = p.filter(d, o, c);
                    input_grad_add(gvm, h, w, f, s, &mut gz[c * pin..(c + 1) * pin]);
                    let k = ((d * q + o) * p.c_mid + c) * ntaps;
                    tap_grad_add(z.plane(b, c), gvm, h, w, f, s, &mut g_taps[k..k + ntaps]);
                }
            }
        }
        // reduce stage: z = R x
        for m in 0..p.c_mid {
            let gzm = &gz[m * pin..(m + 1) * pin];
            for c in 0..p.c_in {
                let xc = x.plane(b, c);
                let mut acc = T::zero();
                for (&g, &xx) in gzm.iter().zip(xc) {
                    acc = acc + g * xx;
                }
                g_reduce[m * p.c_in + c] = g_reduce[m * p.c_in + c] + acc;
            }
        }
        let rt: Vec<T> = (0..p.c_in * p.c_mid)
            .map(|i| p.reduce[(i % p.c_mid) * p.c_in + i / p.c_mid])
            .collect();
        mix(&rt, &gz, pin, p.c_mid, &mut gx.data[b * p.c_in * pin..(b + 1) * p.c_in * pin]);
    }
    let mut params = g_reduce;
    params.extend(g_taps);
    params.extend(g_expand);
    Ok(DecoderGrads { input: gx, params })
}

/// Layer wrapper over the decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock(pub DecoderBlockParams<f64>);

impl Layer for DecoderBlock {
    fn output_dims(&self, d: [usize; 4]) -> Result<[usize; 4]> {
        if d[1] != self.0.c_in {
            return Err(Error::geometry("input channel count does not match the block"));
        }
        Ok([d[0], self.0.c_out, d[2] * self.0.stride, d[3] * self.0.stride])
    }

    fn forward(&self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        decoder_block_forward(x, &self.0)
    }

    fn backward(&self, x: &Tensor4<f64>, u: &Tensor4<f64>) -> Result<Gradients> {
        let g = decoder_block_backward(x, &self.0, u)?;
        Ok(Gradients {
            input: g.input,
            params: g.params,
        })
    }

    fn params(&self) -> Vec<f64> {
        self.0.flat()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.0.set_flat(p)
    }

    fn is_linear(&self) -> bool {
        false
    }
}
