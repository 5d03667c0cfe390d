//! 8-bit PNG output: grayscale images, indexed masks and RGB contour
//! overlays.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};
use urveda::metrics::{boundary_points, SegmentationMask};
use urveda::Tensor;

use crate::error::{CliError, Context, Result};

/// Contour colour of each foreground class; background is black. None of
/// them is a gray level, so contours never coincide with image pixels.
pub const CLASS_COLORS: [[u8; 3]; 7] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
];

pub fn class_color(class: usize) -> [u8; 3] {
    if class == 0 {
        CLASS_COLORS[0]
    } else {
        CLASS_COLORS[1 + (class - 1) % (CLASS_COLORS.len() - 1)]
    }
}

/// `[0, 1]` intensity to an 8-bit gray level.
pub fn gray8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = 3 * (r * self.width + c);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = 3 * (r * self.width + c);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

fn plane(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [1, h, w] => Ok((h, w)),
        ref s => Err(CliError::Data(format!("expected a 1×H×W image, got {s:?}"))),
    }
}

/// Grayscale copy of `image` with each class's boundary pixels painted in
/// its colour. With `edges`, edge strength first tints the image towards
/// yellow.
pub fn overlay(image: &Tensor, mask: &SegmentationMask, edges: Option<&Tensor>) -> Result<RgbImage> {
    let (h, w) = plane(image)?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(CliError::Data(format!(
            "mask {}×{} does not match image {h}×{w}",
            mask.height(),
            mask.width()
        )));
    }
    if let Some(e) = edges {
        if plane(e)? != (h, w) {
            return Err(CliError::Data("edge map does not match image".into()));
        }
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for (i, &v) in image.data().iter().enumerate() {
        let g = gray8(v);
        match edges {
            Some(e) => {
                let t = e.data()[i].clamp(0.0, 1.0);
                let up = (g as f64 + t * (255.0 - g as f64)).round() as u8;
                let down = (g as f64 * (1.0 - t)).round() as u8;
                data.extend([up, up, down]);
            }
            None => data.extend([g, g, g]),
        }
    }
    let mut out = RgbImage { height: h, width: w, data };
    for class in 1..mask.classes() {
        for (r, c) in boundary_points(&mask.binary(class as u8)) {
            out.set(r, c, class_color(class));
        }
    }
    Ok(out)
}

fn encoder<'a>(path: &Path, h: usize, w: usize, color: ColorType) -> Result<png::Encoder<'a, BufWriter<std::fs::File>>> {
    let file = std::fs::File::create(path).context(path.display())?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    Ok(enc)
}

fn finish(path: &Path, enc: png::Encoder<'_, BufWriter<std::fs::File>>, data: &[u8]) -> Result<()> {
    let png_err = |e: png::EncodingError| CliError::Data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn write_gray(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = plane(image)?;
    let data: Vec<u8> = image.data().iter().map(|&v| gray8(v)).collect();
    finish(path, encoder(path, h, w, ColorType::Grayscale)?, &data)
}

/// Palette image whose pixel indices are the class labels.
pub fn write_mask(path: &Path, mask: &SegmentationMask) -> Result<()> {
    let mut enc = encoder(path, mask.height(), mask.width(), ColorType::Indexed)?;
    enc.set_palette((0..mask.classes()).flat_map(class_color).collect::<Vec<u8>>());
    finish(path, enc, mask.labels())
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    finish(path, encoder(path, image.height, image.width, ColorType::Rgb)?, &image.data)
}

/// Reads an 8-bit indexed or grayscale PNG as class labels.
pub fn read_mask(path: &Path, classes: usize) -> Result<SegmentationMask> {
    let file = std::fs::File::open(path).context(path.display())?;
    let bad = |m: String| CliError::Data(format!("{}: {m}", path.display()));
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != BitDepth::Eight || !matches!(info.color_type, ColorType::Indexed | ColorType::Grayscale) {
        return Err(bad(format!("{:?} {:?} is not an 8-bit label image", info.color_type, info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let labels: Vec<u8> = buf[..info.buffer_size()]
        .chunks(info.line_size)
        .flat_map(|row| row[..w].to_vec())
        .collect();
    SegmentationMask::new(h, w, classes, labels).map_err(|e| bad(e.to_string()))
}
