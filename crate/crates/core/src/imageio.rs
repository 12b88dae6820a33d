//! Minimal PGM/PNG writers for masks, overlays and reconstruction strips.

use std::fs;
use std::io;
use std::path::Path;

/// Binary PGM (P5), 8-bit.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> io::Result<()> {
    fs::write(path, encode_pgm(width, height, pixels))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(io::Error::other)?;
        writer.write_image_data(pixels).map_err(io::Error::other)?;
    }
    Ok(buf)
}

pub fn encode_png_gray(width: usize, height: usize, pixels: &[u8]) -> io::Result<Vec<u8>> {
    assert_eq!(pixels.len(), width * height);
    encode_png(width, height, png::ColorType::Grayscale, pixels)
}

/// Interleaved RGB, 3 bytes per pixel.
pub fn encode_png_rgb(width: usize, height: usize, pixels: &[u8]) -> io::Result<Vec<u8>> {
    assert_eq!(pixels.len(), 3 * width * height);
    encode_png(width, height, png::ColorType::Rgb, pixels)
}

/// Map an intensity in [0,1] to a byte, clamping out-of-range values.
pub fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}
