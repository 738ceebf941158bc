//! 8-bit PNG export of masks, previews and agreement maps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::extract::{Mask, TriState, TriStateRaster};
use crate::geo::TileSpec;
use crate::render::Raster;

fn write_gray<W: Write>(w: W, width: u32, height: u32, pixels: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(w, width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(pixels)?;
    writer.finish()?;
    Ok(())
}

/// Road pixels 255, background 0.
pub fn encode_mask<W: Write>(w: W, mask: &Mask) -> Result<()> {
    let px: Vec<u8> = mask.iter().map(|b| if b { 255 } else { 0 }).collect();
    write_gray(w, mask.tile.width, mask.tile.height, &px)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    encode_mask(BufWriter::new(File::create(path)?), mask)
}

/// Reads a grayscale (or RGB/RGBA, first channel used) PNG as a mask over
/// `tile`; values above 127 are road.
pub fn read_mask(path: &Path, tile: &TileSpec) -> Result<Mask> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    if info.width != tile.width || info.height != tile.height {
        return Err(Error::geometry(format!(
            "{}: image is {}x{}, tile {} is {}x{}",
            path.display(),
            info.width,
            info.height,
            tile.tile_id,
            tile.width,
            tile.height
        )));
    }
    let stride = info.color_type.samples();
    let values: Vec<bool> = buf[..info.buffer_size()]
        .chunks_exact(stride)
        .map(|px| px[0] > 127)
        .collect();
    Mask::from_bools(tile, &values)
}

/// Min-max scaled grayscale preview of one channel. A constant channel
/// renders black.
pub fn write_preview(path: &Path, raster: &Raster, channel: usize) -> Result<()> {
    if channel >= raster.channels {
        return Err(Error::config(format!("raster has no channel {channel}")));
    }
    let ch = raster.channel(channel);
    let (lo, hi) = ch
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let px: Vec<u8> = ch
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    write_gray(
        BufWriter::new(File::create(path)?),
        raster.tile.width,
        raster.tile.height,
        &px,
    )
}

/// Palette index of each class: 0 transparent, 1 green, 2 red.
pub fn tristate_index(c: TriState) -> u8 {
    match c {
        TriState::Neutral => 0,
        TriState::Confirmed => 1,
        TriState::Unconfirmed => 2,
    }
}

/// Paletted PNG: confirmed green, unconfirmed red, neutral transparent.
pub fn encode_tristate<W: Write>(w: W, r: &TriStateRaster) -> Result<()> {
    let mut enc = png::Encoder::new(w, r.tile.width, r.tile.height);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(vec![0, 0, 0, 0, 200, 0, 220, 0, 0]);
    enc.set_trns(vec![0, 255, 255]);
    let mut writer = enc.write_header()?;
    let px: Vec<u8> = r.classes.iter().map(|&c| tristate_index(c)).collect();
    writer.write_image_data(&px)?;
    writer.finish()?;
    Ok(())
}

pub fn write_tristate(path: &Path, r: &TriStateRaster) -> Result<()> {
    encode_tristate(BufWriter::new(File::create(path)?), r)
}
