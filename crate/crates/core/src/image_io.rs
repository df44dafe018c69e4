//! 8-bit PNG reading and writing.
//!
//! Images live in memory as `[3, H, W]` tensors with values `pixel / 255`.
//! Quantization to 8 bits happens exactly once, on write; [`quantize`]
//! reproduces it in memory so metrics can be computed on what lands on disk.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The image as it will read back after an 8-bit round trip.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| to_u8(v) as f64 / 255.0).expect("quantized values are finite")
}

pub fn to_rgb(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.chw("to_rgb")?;
    if c != 3 {
        return Err(Error::dim("to_rgb", format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    let plane = h * w;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    }))
}

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    to_rgb(image)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes an `H × W` map with values in `[0, 1]` as 8-bit grayscale.
pub fn save_gray_png(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::dim("save_gray_png", format!("{} values for {h}x{w}", values.len())));
    }
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(values[y as usize * w + x as usize])]));
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a boolean mask as a 1-bit grayscale PNG (true = white).
pub fn save_mask_png(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::dim("save_mask_png", format!("{} values for {h}x{w}", mask.len())));
    }
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let io_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&packed).map_err(io_err)?;
    writer.finish().map_err(io_err)
}

/// Reads a grayscale PNG of any bit depth as values in `[0, 1]`.
pub fn load_gray_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok((g.pixels().map(|p| p[0] as f64 / 255.0).collect(), h, w))
}

/// Horizontal flip of a `[C, H, W]` image.
pub fn mirror(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw("mirror")?;
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = d[row + w - 1 - x];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}
