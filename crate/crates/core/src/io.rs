//! PNG reading and writing for images, label maps and probability maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{io_err, DarcError, Result};
use crate::plane::{ImagePlane, InstanceLabelMap};

fn png_err(path: &Path) -> impl Fn(String) -> DarcError + '_ {
    move |reason| DarcError::Png {
        path: path.to_path_buf(),
        reason,
    }
}

struct Raw {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    bytes: Vec<u8>,
}

fn decode(path: &Path) -> Result<Raw> {
    let err = png_err(path);
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| err("image too large".into()))?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(|e| err(e.to_string()))?;
    bytes.truncate(info.buffer_size());
    Ok(Raw {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

fn samples(raw: &Raw) -> Vec<f32> {
    match raw.depth {
        BitDepth::Sixteen => raw
            .bytes
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        _ => raw.bytes.iter().map(|&b| b as f32 / 255.0).collect(),
    }
}

/// Reads an image as RGB in `[0, 1]`; grayscale is replicated, alpha dropped.
pub fn read_image(path: &Path) -> Result<ImagePlane> {
    let raw = decode(path)?;
    let vals = samples(&raw);
    let (h, w) = (raw.height, raw.width);
    let stride = match raw.color {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(png_err(path)("unexpanded palette".into())),
    };
    let mut hwc = Vec::with_capacity(h * w * 3);
    for px in vals.chunks_exact(stride) {
        if stride < 3 {
            hwc.extend_from_slice(&[px[0]; 3]);
        } else {
            hwc.extend_from_slice(&px[..3]);
        }
    }
    ImagePlane::from_interleaved(h, w, 3, &hwc)
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let err = png_err(path);
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| err(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| err(e.to_string()))?;
    writer.finish().map_err(|e| err(e.to_string()))
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG (gray for one channel, RGB for three).
pub fn write_image(path: &Path, img: &ImagePlane) -> Result<()> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let color = match c {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        _ => return Err(DarcError::InvalidImage(format!("cannot write {c} channels"))),
    };
    let mut bytes = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(to_u8(img.get(ch, y, x)));
            }
        }
    }
    encode(path, w, h, color, BitDepth::Eight, &bytes)
}

/// Writes a probability map as an 8-bit grayscale PNG.
pub fn write_probability(path: &Path, height: usize, width: usize, probs: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = probs.iter().map(|&p| to_u8(p)).collect();
    encode(path, width, height, ColorType::Grayscale, BitDepth::Eight, &bytes)
}

/// Reads instance ids from an 8- or 16-bit grayscale PNG.
pub fn read_labels(path: &Path) -> Result<InstanceLabelMap> {
    let raw = decode(path)?;
    if raw.color != ColorType::Grayscale {
        return Err(png_err(path)(format!(
            "label maps must be grayscale, found {:?}",
            raw.color
        )));
    }
    let labels = match raw.depth {
        BitDepth::Sixteen => raw
            .bytes
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
            .collect(),
        _ => raw.bytes.iter().map(|&b| b as u32).collect(),
    };
    InstanceLabelMap::new(raw.height, raw.width, labels)
}

/// Writes instance ids as a 16-bit grayscale PNG.
pub fn write_labels(path: &Path, labels: &InstanceLabelMap) -> Result<()> {
    if labels.max_label() > u16::MAX as u32 {
        return Err(DarcError::OutOfRange(format!(
            "instance id {} does not fit in 16 bits",
            labels.max_label()
        )));
    }
    let bytes: Vec<u8> = labels
        .labels()
        .iter()
        .flat_map(|&l| (l as u16).to_be_bytes())
        .collect();
    encode(
        path,
        labels.width(),
        labels.height(),
        ColorType::Grayscale,
        BitDepth::Sixteen,
        &bytes,
    )
}
