//! PFM (float) and 8-bit PNG image files.

use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    PfmColor,
    PfmGray,
    Png8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageHeader {
    pub format: ImageFormat,
    pub width: usize,
    pub height: usize,
    /// Negative means little-endian payload.
    pub scale: f32,
}

impl ImageHeader {
    pub fn channels(&self) -> usize {
        match self.format {
            ImageFormat::PfmGray => 1,
            ImageFormat::PfmColor | ImageFormat::Png8 => 3,
        }
    }

    pub fn little_endian(&self) -> bool {
        self.scale < 0.0
    }
}

/// Splits off the next whitespace-delimited token, returning it and the rest.
fn next_token(buf: &[u8]) -> Option<(&[u8], &[u8])> {
    let start = buf.iter().position(|b| !b.is_ascii_whitespace())?;
    let rest = &buf[start..];
    let len = rest
        .iter()
        .position(|b| b.is_ascii_whitespace())
        .unwrap_or(rest.len());
    Some((&rest[..len], &rest[len..]))
}

fn parse_token<T: std::str::FromStr>(tok: &[u8], what: &str) -> Result<T> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("invalid {what}: {:?}", String::from_utf8_lossy(tok))))
}

/// Parses the three header lines; returns the header and the payload offset.
fn parse_header(bytes: &[u8]) -> Result<(ImageHeader, usize)> {
    let missing = || Error::Parse("truncated PFM header".into());
    let (magic, rest) = next_token(bytes).ok_or_else(missing)?;
    let format = match magic {
        b"PF" => ImageFormat::PfmColor,
        b"Pf" => ImageFormat::PfmGray,
        _ => {
            return Err(Error::Parse(format!(
                "bad PFM magic {:?}",
                String::from_utf8_lossy(magic)
            )))
        }
    };
    let (w, rest) = next_token(rest).ok_or_else(missing)?;
    let (h, rest) = next_token(rest).ok_or_else(missing)?;
    let (s, rest) = next_token(rest).ok_or_else(missing)?;
    let width: usize = parse_token(w, "width")?;
    let height: usize = parse_token(h, "height")?;
    let scale: f32 = parse_token(s, "scale")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!("non-positive dimensions {width}x{height}")));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Parse(format!("invalid scale {scale}")));
    }
    // Exactly one whitespace byte separates the scale from the payload.
    if rest.is_empty() {
        return Err(missing());
    }
    let offset = bytes.len() - rest.len() + 1;
    Ok((
        ImageHeader {
            format,
            width,
            height,
            scale,
        },
        offset,
    ))
}

pub fn read_pfm_header(path: impl AsRef<Path>) -> Result<ImageHeader> {
    let path = path.as_ref();
    let mut head = Vec::with_capacity(128);
    File::open(path)
        .and_then(|f| f.take(256).read_to_end(&mut head))
        .map_err(|e| Error::io(path, e))?;
    parse_header(&head).map(|(h, _)| h)
}

/// Reads a PFM file into a top-to-bottom tensor.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (header, offset) = parse_header(&bytes)?;
    let (w, h, c) = (header.width, header.height, header.channels());
    let row_floats = w * c;
    let payload = &bytes[offset..];
    if payload.len() < h * row_floats * 4 {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("payload has {} bytes, need {}", payload.len(), h * row_floats * 4),
            ),
        ));
    }
    let le = header.little_endian();
    let mut data = vec![0.0f32; h * row_floats];
    for (file_row, chunk) in payload.chunks_exact(row_floats * 4).take(h).enumerate() {
        let dst = &mut data[(h - 1 - file_row) * row_floats..][..row_floats];
        for (d, b) in dst.iter_mut().zip(chunk.chunks_exact(4)) {
            let b = [b[0], b[1], b[2], b[3]];
            *d = if le {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Parse(format!("non-finite sample {v} in {}", path.display())));
    }
    Tensor::from_vec(h, w, c, data)
}

/// Writes a little-endian PFM (scale -1).
pub fn write_pfm(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let magic = match tensor.channels() {
        3 => "PF",
        1 => "Pf",
        c => return Err(Error::UnsupportedChannels(c)),
    };
    let (w, h) = (tensor.width(), tensor.height());
    let mut bytes = Vec::with_capacity(32 + tensor.data().len() * 4);
    bytes.extend_from_slice(format!("{magic}\n{w} {h}\n-1.0\n").as_bytes());
    let row_floats = w * tensor.channels();
    for row in tensor.data().chunks_exact(row_floats).rev() {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes an sRGB-tagged 8-bit RGB PNG. Values are clamped to [0, 1]; a
/// single-channel tensor is written as gray replicated to RGB.
pub fn write_png(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let c = tensor.channels();
    if c != 1 && c != 3 {
        return Err(Error::UnsupportedChannels(c));
    }
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut rgb = Vec::with_capacity(tensor.pixels() * 3);
    for px in tensor.data().chunks_exact(c) {
        if c == 3 {
            rgb.extend(px.iter().map(|&v| quantize(v)));
        } else {
            rgb.extend([quantize(px[0]); 3]);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        tensor.width() as u32,
        tensor.height() as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&rgb).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}
