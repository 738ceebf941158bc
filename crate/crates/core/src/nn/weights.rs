//! Weight export through the `RFR1` container, `f64` payload.
//!
//! A tensor is stored as `width = dims[3]`, `height = dims[2]`,
//! `channels = dims[0] * dims[1]`, with `{"role", "dims"}` in the trailer.
//! A decoder block is stored flat (`height = channels = 1`) in
//! [`DecoderBlockParams::flat`] order with its shape in the trailer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::decoder::DecoderBlockParams;
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::rfr::{Payload, RfrFile};

#[derive(Debug, Serialize, Deserialize)]
struct TensorTrailer {
    role: String,
    dims: [usize; 4],
}

pub fn write_tensor(path: &Path, role: &str, t: &Tensor4<f64>) -> Result<()> {
    RfrFile {
        width: t.dims[3] as u32,
        height: t.dims[2] as u32,
        channels: (t.dims[0] * t.dims[1]) as u32,
        payload: Payload::F64(t.data.clone()),
        trailer: serde_json::to_value(TensorTrailer {
            role: role.to_string(),
            dims: t.dims,
        })?,
    }
    .write(path)
}

/// Returns the role and the tensor.
pub fn read_tensor(path: &Path) -> Result<(String, Tensor4<f64>)> {
    let f = RfrFile::read(path)?;
    let tr: TensorTrailer = serde_json::from_value(f.trailer)?;
    let Payload::F64(data) = f.payload else {
        return Err(Error::data("weight payload must be f64"));
    };
    Ok((tr.role, Tensor4::from_vec(tr.dims, data)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct DecoderTrailer {
    role: String,
    c_in: usize,
    c_mid: usize,
    c_out: usize,
    radius: usize,
    stride: usize,
}

const DECODER_ROLE: &str = "decoder_block";

pub fn write_decoder(path: &Path, p: &DecoderBlockParams<f64>) -> Result<()> {
    let flat = p.flat();
    RfrFile {
        width: flat.len() as u32,
        height: 1,
        channels: 1,
        payload: Payload::F64(flat),
        trailer: serde_json::to_value(DecoderTrailer {
            role: DECODER_ROLE.into(),
            c_in: p.c_in,
            c_mid: p.c_mid,
            c_out: p.c_out,
            radius: p.radius,
            stride: p.stride,
        })?,
    }
    .write(path)
}

pub fn read_decoder(path: &Path) -> Result<DecoderBlockParams<f64>> {
    let f = RfrFile::read(path)?;
    let tr: DecoderTrailer = serde_json::from_value(f.trailer)?;
    if tr.role != DECODER_ROLE {
        return Err(Error::data(format!("expected role {DECODER_ROLE}, found {}", tr.role)));
    }
    let Payload::F64(data) = f.payload else {
        return Err(Error::data("weight payload must be f64"));
    };
    let mut p = DecoderBlockParams::zeros(tr.c_in, tr.c_mid, tr.c_out, tr.radius, tr.stride)?;
    p.set_flat(&data)?;
    Ok(p)
}
