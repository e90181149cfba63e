use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Ignore sentinel assumed when a label PNG carries no metadata chunk.
pub const DEFAULT_IGNORE_VALUE: u32 = 255;

const IGNORE_KEY: &str = "pancut:ignore_value";

/// Integer label per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub ignore_value: u32,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, ignore_value: u32) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map has {} entries, expected {height}x{width}",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels, ignore_value })
    }

    pub fn filled(height: usize, width: usize, value: u32, ignore_value: u32) -> Self {
        Self { height, width, labels: vec![value; height * width], ignore_value }
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }
}

/// Writes a single-channel 16-bit PNG; the ignore value rides along in a
/// `tEXt` chunk so that [`load_label_map`] restores it exactly.
pub fn save_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if map.labels.len() != map.height * map.width || map.height == 0 || map.width == 0 {
        return Err(Error::Shape(format!("cannot save a {}x{} label map", map.height, map.width)));
    }
    if let Some(bad) = map.labels.iter().find(|&&l| l > u32::from(u16::MAX)) {
        return Err(Error::Range(format!("label {bad} does not fit in 16 bits")));
    }
    if map.ignore_value > u32::from(u16::MAX) {
        return Err(Error::Range(format!("ignore value {} does not fit in 16 bits", map.ignore_value)));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    encoder
        .add_text_chunk(IGNORE_KEY.to_string(), map.ignore_value.to_string())
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut writer = encoder.write_header().map_err(|e| png_error(path, e))?;
    let bytes: Vec<u8> = map.labels.iter().flat_map(|&l| (l as u16).to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))
}

fn png_error(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a label PNG: 16- or 8-bit grayscale, or an 8-bit palette image whose
/// indices are taken as labels (the usual layout of VOC ground truth).
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let undecodable = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(undecodable)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(undecodable)?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let bytes = &buf[..frame.buffer_size()];
    let labels: Vec<u32> = match (frame.color_type, frame.bit_depth) {
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => {
            bytes.chunks_exact(2).map(|c| u32::from(u16::from_be_bytes([c[0], c[1]]))).collect()
        }
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {
            bytes.iter().map(|&b| u32::from(b)).collect()
        }
        (color, depth) => {
            return Err(Error::Format(format!(
                "{}: label maps must be 8/16-bit grayscale or 8-bit indexed, got {color:?} {depth:?}",
                path.display()
            )))
        }
    };
    let _ = reader.finish();
    let ignore_value = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|chunk| chunk.keyword == IGNORE_KEY)
        .map(|chunk| {
            chunk.text.trim().parse::<u32>().map_err(|_| {
                Error::Format(format!("{}: malformed ignore value `{}`", path.display(), chunk.text))
            })
        })
        .transpose()?
        .unwrap_or(DEFAULT_IGNORE_VALUE);
    LabelMap::new(height, width, labels, ignore_value)
}
