//! PNG output for images, label maps and activation heatmaps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::pseudo::{Cam, ReliableLabel, IGNORE};

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

/// 256-entry RGB palette: 0 black, 255 white, class ids on evenly spaced hues.
pub fn label_palette(num_classes: usize) -> Vec<u8> {
    let mut pal = vec![0u8; 256 * 3];
    for c in 1..=num_classes.min(254) {
        let h = (c - 1) as f64 / num_classes as f64 * 6.0;
        let x = 1.0 - ((h % 2.0) - 1.0).abs();
        let (r, g, b) = match h as usize {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            4 => (x, 0.0, 1.0),
            _ => (1.0, 0.0, x),
        };
        pal[c * 3..c * 3 + 3].copy_from_slice(&[(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]);
    }
    pal[IGNORE as usize * 3..].copy_from_slice(&[255, 255, 255]);
    pal
}

pub fn write_label_png(path: &Path, label: &ReliableLabel, num_classes: usize) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, label.width as u32, label.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(label_palette(num_classes));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&label.labels).map_err(png_err)?;
    Ok(())
}

/// Grayscale heatmap of one CAM channel, each token drawn as a
/// `factor × factor` square.
pub fn write_heatmap_png(path: &Path, cam: &Cam, class: usize, factor: usize) -> Result<()> {
    let (h, w) = (cam.grid_h * factor, cam.grid_w * factor);
    let ch = cam.channel(class);
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = ch[(y / factor) * cam.grid_w + x / factor];
            px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&px).map_err(png_err)?;
    Ok(())
}

pub fn write_image_png(path: &Path, image: &Image) -> Result<()> {
    let px: Vec<u8> = image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&px).map_err(png_err)?;
    Ok(())
}

/// Reads an 8-bit RGB or RGBA PNG; alpha is dropped.
pub fn read_image_png(path: &Path) -> Result<Image> {
    let mut decoder = png::Decoder::new(File::open(path)?);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("only 8-bit PNG images are supported".into()));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Format(format!("unsupported PNG colour type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let p = &row[x * stride..x * stride + stride];
            let rgb = if stride >= 3 { [p[0], p[1], p[2]] } else { [p[0]; 3] };
            data.extend(rgb.iter().map(|&v| v as f64 / 255.0));
        }
    }
    Image::new(h, w, data)
}
