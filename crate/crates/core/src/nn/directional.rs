//! Directional 1D transpose convolution.
//!
//! A filter of `2r + 1` taps runs along one line direction `I = (I_h, I_w)`:
//!
//! ```text
//! y[i, j] = sum_{t=-r..=r} x[i + I_h*t, j + I_w*t] * k[r - t]
//! ```
//!
//! with zero padding outside the input. That is the gather form and keeps the
//! input size. The strided form scatters every input pixel instead,
//!
//! ```text
//! y[s*i - I_h*t, s*j - I_w*t] += x[i, j] * k[r - t]
//! ```
//!
//! producing an `sH x sW` output; at `s = 1` both forms are the same map.

use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Line direction of a 1D filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// `(0, 1)`
    Horizontal,
    /// `(1, 0)`
    Vertical,
    /// `(1, 1)`
    ForwardDiagonal,
    /// `(-1, 1)`
    BackwardDiagonal,
}

impl Direction {
    /// All four, in decoder concatenation order.
    pub const ALL: [Direction; 4] = [
        Direction::Horizontal,
        Direction::Vertical,
        Direction::ForwardDiagonal,
        Direction::BackwardDiagonal,
    ];

    /// `(I_h, I_w)`.
    pub fn indicator(self) -> (i64, i64) {
        match self {
            Direction::Horizontal => (0, 1),
            Direction::Vertical => (1, 0),
            Direction::ForwardDiagonal => (1, 1),
            Direction::BackwardDiagonal => (-1, 1),
        }
    }

    pub fn from_indicator(ih: i64, iw: i64) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.indicator() == (ih, iw))
            .ok_or_else(|| Error::config(format!("({ih}, {iw}) is not a filter direction")))
    }
}

pub const DEFAULT_RADIUS: usize = 4;

/// `2r + 1` taps along a direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter1D<T = f64> {
    pub direction: Direction,
    taps: Vec<T>,
}

impl<T: Scalar> Filter1D<T> {
    pub fn new(direction: Direction, taps: Vec<T>) -> Result<Self> {
        if taps.len() < 3 || taps.len().is_multiple_of(2) {
            return Err(Error::config(format!(
                "a 1D filter needs 2r+1 taps with r >= 1, got {}",
                taps.len()
            )));
        }
        Ok(Filter1D { direction, taps })
    }

    /// Only the center tap is 1.
    pub fn identity(direction: Direction, radius: usize) -> Self {
        let mut taps = vec![T::zero(); 2 * radius.max(1) + 1];
        taps[radius.max(1)] = T::one();
        Filter1D { direction, taps }
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn taps(&self) -> &[T] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [T] {
        &mut self.taps
    }
}

fn check_plane<T>(x: &[T], h: usize, w: usize) -> Result<()> {
    if x.len() != h * w {
        return Err(Error::geometry(format!(
            "plane of {} values is not {h}x{w}",
            x.len()
        )));
    }
    Ok(())
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::config(format!("unsupported stride {stride} (1 or 2)")))
    }
}

/// Gather form at stride 1; output is `h x w`.
pub fn dir_tconv1d<T: Scalar>(x: &[T], h: usize, w: usize, filter: &Filter1D<T>) -> Result<Vec<T>> {
    check_plane(x, h, w)?;
    let (ih, iw) = filter.direction.indicator();
    let r = filter.radius() as i64;
    let k = filter.taps();
    let (hi, wi) = (h as i64, w as i64);
    let mut y = vec![T::zero(); h * w];
    for i in 0..hi {
        for j in 0..wi {
            let mut acc = T::zero();
            for t in -r..=r {
                let (a, b) = (i + ih * t, j + iw * t);
                if a >= 0 && a < hi && b >= 0 && b < wi {
                    acc = acc + x[(a * wi + b) as usize] * k[(r - t) as usize];
                }
            }
            y[(i * wi + j) as usize] = acc;
        }
    }
    Ok(y)
}

/// Scatter form with stride `s` in `{1, 2}`; output is `s*h x s*w`,
/// contributions that land outside it are dropped.
pub fn dir_tconv1d_strided<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    filter: &Filter1D<T>,
    stride: usize,
) -> Result<Vec<T>> {
    check_plane(x, h, w)?;
    check_stride(stride)?;
    let mut y = vec![T::zero(); h * w * stride * stride];
    scatter_add(x, h, w, filter, stride, &mut y);
    Ok(y)
}

/// Accumulates the strided scatter of `x` into `y` (`s*h x s*w`).
pub(crate) fn scatter_add<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    filter: &Filter1D<T>,
    stride: usize,
    y: &mut [T],
) {
    let (ih, iw) = filter.direction.indicator();
    let r = filter.radius() as i64;
    let k = filter.taps();
    let s = stride as i64;
    let (oh, ow) = (h as i64 * s, w as i64 * s);
    // Each output then receives its terms in ascending t, the same order the
    // gather form sums them, so both forms round identically at stride 1.
    let rows: Box<dyn Iterator<Item = i64>> = if ih < 0 {
        Box::new((0..h as i64).rev())
    } else {
        Box::new(0..h as i64)
    };
    for i in rows {
        for j in 0..w as i64 {
            let v = x[(i * w as i64 + j) as usize];
            if v == T::zero() {
                continue;
            }
            for t in -r..=r {
                let (a, b) = (s * i - ih * t, s * j - iw * t);
                if a >= 0 && a < oh && b >= 0 && b < ow {
                    let o = (a * ow + b) as usize;
                    y[o] = y[o] + v * k[(r - t) as usize];
                }
            }
        }
    }
}

/// Adjoint with respect to the input: maps an output-space gradient `u`
/// (`s*h x s*w`) back to input space (`h x w`), accumulating into `gx`.
pub(crate) fn input_grad_add<T: Scalar>(
    u: &[T],
    h: usize,
    w: usize,
    filter: &Filter1D<T>,
    stride: usize,
    gx: &mut [T],
) {
    let (ih, iw) = filter.direction.indicator();
    let r = filter.radius() as i64;
    let k = filter.taps();
    let s = stride as i64;
    let (oh, ow) = (h as i64 * s, w as i64 * s);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let mut acc = T::zero();
            for t in -r..=r {
                let (a, b) = (s * i - ih * t, s * j - iw * t);
                if a >= 0 && a < oh && b >= 0 && b < ow {
                    acc = acc + u[(a * ow + b) as usize] * k[(r - t) as usize];
                }
            }
            let o = (i * w as i64 + j) as usize;
            gx[o] = gx[o] + acc;
        }
    }
}

/// Gradient with respect to the taps, accumulated into `gk` (`2r + 1`).
pub(crate) fn tap_grad_add<T: Scalar>(
    x: &[T],
    u: &[T],
    h: usize,
    w: usize,
    filter: &Filter1D<T>,
    stride: usize,
    gk: &mut [T],
) {
    let (ih, iw) = filter.direction.indicator();
    let r = filter.radius() as i64;
    let s = stride as i64;
    let (oh, ow) = (h as i64 * s, w as i64 * s);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let v = x[(i * w as i64 + j) as usize];
            if v == T::zero() {
                continue;
            }
            for t in -r..=r {
                let (a, b) = (s * i - ih * t, s * j - iw * t);
                if a >= 0 && a < oh && b >= 0 && b < ow {
                    let g = &mut gk[(r - t) as usize];
                    *g = *g + v * u[(a * ow + b) as usize];
                }
            }
        }
    }
}

/// Gradients of `<dir_tconv1d_strided(x, k, s), u>` with respect to `x` and
/// the taps.
pub fn dir_tconv1d_backward<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    filter: &Filter1D<T>,
    stride: usize,
    upstream: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    check_plane(x, h, w)?;
    check_stride(stride)?;
    check_plane(upstream, h * stride, w * stride)?;
    let mut gx = vec![T::zero(); h * w];
    let mut gk = vec![T::zero(); filter.taps().len()];
    input_grad_add(upstream, h, w, filter, stride, &mut gx);
    tap_grad_add(x, upstream, h, w, filter, stride, &mut gk);
    Ok((gx, gk))
}
