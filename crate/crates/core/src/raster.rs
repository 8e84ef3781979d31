//! 8-bit rasters and their canonical PNG encoding.
//!
//! The encoder settings are pinned (fixed row filter, fixed deflate level, no
//! timestamps), so identical pixels plus identical text chunks always give
//! identical bytes.

use sha2::{Digest, Sha256};
use std::io::Cursor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
    #[error("pixel buffer of {len} bytes does not match {width}x{height}x{channels}")]
    BadBuffer { len: usize, width: u32, height: u32, channels: u32 },
}

/// Grayscale luminance raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        GrayImage { width, height, pixels: vec![value; width as usize * height as usize] }
    }

    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if pixels.len() != width as usize * height as usize {
            return Err(RasterError::BadBuffer { len: pixels.len(), width, height, channels: 1 });
        }
        Ok(GrayImage { width, height, pixels })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let w = self.width as usize;
        &self.pixels[y as usize * w..(y as usize + 1) * w]
    }

    /// SHA-256 over dimensions and pixels; independent of container encoding.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.pixels);
        hex::encode(h.finalize())
    }

    /// Replicates luminance into three channels.
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn encode_png(&self, text: &[(&str, &str)]) -> Result<Vec<u8>, RasterError> {
        encode(self.width, self.height, png::ColorType::Grayscale, &self.pixels, text)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let (width, height, color, data) = decode(bytes)?;
        let pixels = match color {
            png::ColorType::Grayscale => data,
            png::ColorType::Rgb => data
                .chunks_exact(3)
                .map(|p| {
                    if p[0] == p[1] && p[1] == p[2] {
                        Ok(p[0])
                    } else {
                        Err(RasterError::Unsupported("colour image where grayscale expected".into()))
                    }
                })
                .collect::<Result<_, _>>()?,
            other => return Err(RasterError::Unsupported(format!("{other:?}"))),
        };
        GrayImage::from_raw(width, height, pixels)
    }
}

/// Interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn encode_png(&self, text: &[(&str, &str)]) -> Result<Vec<u8>, RasterError> {
        encode(self.width, self.height, png::ColorType::Rgb, &self.pixels, text)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let (width, height, color, pixels) = decode(bytes)?;
        if color != png::ColorType::Rgb {
            return Err(RasterError::Unsupported(format!("{color:?}")));
        }
        Ok(RgbImage { width, height, pixels })
    }
}

fn encode(width: u32, height: u32, color: png::ColorType, data: &[u8], text: &[(&str, &str)]) -> Result<Vec<u8>, RasterError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Fast);
        enc.set_filter(png::Filter::Up);
        for (k, v) in text {
            enc.add_text_chunk((*k).to_string(), (*v).to_string())?;
        }
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(u32, u32, png::ColorType, Vec<u8>), RasterError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RasterError::Unsupported("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(RasterError::Unsupported(format!("bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, info.color_type, buf))
}

/// Reads the tEXt chunk `key` from a PNG, if present.
pub fn png_text(bytes: &[u8], key: &str) -> Result<Option<String>, RasterError> {
    let reader = png::Decoder::new(Cursor::new(bytes)).read_info()?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == key)
        .map(|c| c.text.clone()))
}
