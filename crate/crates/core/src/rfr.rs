//! The `RFR1` raster container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! "RFR1" | u32 width | u32 height | u32 channels | u32 dtype
//! payload: channels * height * width values, channel-major, row-major
//! JSON trailer (UTF-8)
//! u64 trailer length in bytes
//! ```
//!
//! dtype 0 is `f32`; dtype 1 (`f64`) is used for exported weights.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geo::TileSpec;
use crate::render::Raster;

pub const MAGIC: &[u8; 4] = b"RFR1";
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            c => Err(Error::data(format!("unsupported RFR1 dtype code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }
}

/// Decoded container with an uninterpreted JSON trailer.
#[derive(Debug, Clone, PartialEq)]
pub struct RfrFile {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub payload: Payload,
    pub trailer: Value,
}

impl RfrFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let expected = self.width as usize * self.height as usize * self.channels as usize;
        if self.payload.len() != expected {
            return Err(Error::data(format!(
                "payload has {} values, header declares {expected}",
                self.payload.len()
            )));
        }
        let trailer = serde_json::to_vec(&self.trailer)?;
        let dtype = self.payload.dtype();
        let mut out = Vec::with_capacity(HEADER_LEN + expected * dtype.width() + trailer.len() + 8);
        out.extend_from_slice(MAGIC);
        for v in [self.width, self.height, self.channels, dtype as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out.extend_from_slice(&trailer);
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 8 || &bytes[..4] != MAGIC {
            return Err(Error::data("not an RFR1 file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (width, height, channels) = (u32_at(4), u32_at(8), u32_at(12));
        let dtype = DType::from_code(u32_at(16))?;
        let trailer_len =
            u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
        let count = width as usize * height as usize * channels as usize;
        let payload_end = HEADER_LEN + count * dtype.width();
        if payload_end.checked_add(trailer_len).and_then(|n| n.checked_add(8)) != Some(bytes.len()) {
            return Err(Error::data("RFR1 length fields do not match file size"));
        }
        let body = &bytes[HEADER_LEN..payload_end];
        let payload = match dtype {
            DType::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        let trailer = serde_json::from_slice(&bytes[payload_end..payload_end + trailer_len])?;
        Ok(RfrFile {
            width,
            height,
            channels,
            payload,
            trailer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Trailer of a raster container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterTrailer {
    pub tile: TileSpec,
    pub channel_names: Vec<String>,
    /// Config and seeds that produced the raster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Value>,
}

pub fn encode_raster(raster: &Raster, provenance: Option<Value>) -> Result<Vec<u8>> {
    raster.validate()?;
    let trailer = RasterTrailer {
        tile: raster.tile.clone(),
        channel_names: raster.channel_names.clone(),
        provenance,
    };
    RfrFile {
        width: raster.tile.width,
        height: raster.tile.height,
        channels: raster.channels as u32,
        payload: Payload::F32(raster.data.clone()),
        trailer: serde_json::to_value(trailer)?,
    }
    .encode()
}

pub fn decode_raster(bytes: &[u8]) -> Result<(Raster, Option<Value>)> {
    let file = RfrFile::decode(bytes)?;
    let trailer: RasterTrailer = serde_json::from_value(file.trailer)?;
    let Payload::F32(data) = file.payload else {
        return Err(Error::data("raster payload must be f32"));
    };
    if trailer.tile.width != file.width || trailer.tile.height != file.height {
        return Err(Error::data("trailer tile size disagrees with header"));
    }
    let raster = Raster {
        tile: trailer.tile,
        channels: file.channels as usize,
        data,
        channel_names: trailer.channel_names,
    };
    raster.validate()?;
    Ok((raster, trailer.provenance))
}

pub fn write_raster(path: &Path, raster: &Raster, provenance: Option<Value>) -> Result<()> {
    std::fs::write(path, encode_raster(raster, provenance)?)?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<(Raster, Option<Value>)> {
    decode_raster(&std::fs::read(path)?)
}
