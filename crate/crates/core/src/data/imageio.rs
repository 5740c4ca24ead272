//! 8-bit RGB PNG input/output.
//!
//! Disk bytes map to tensor values by v = byte/255; export clamps to [0,1]
//! and quantizes with round-half-up, so disk -> tensor -> disk round-trips
//! losslessly for 8-bit data.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Decodes an 8-bit RGB image into a (1, 3, h, w) tensor with values in
/// [0,1]. Other color types are rejected rather than converted.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)?;
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: expected 8-bit RGB, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (y, row) in rgb.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                data[(c * h + y) * w + x] = T::from_f64(px.0[c] as f64 / 255.0);
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

/// Writes a (1, 3, h, w) tensor as an 8-bit RGB PNG. Values are clamped to
/// [0,1] and quantized with round(v*255) half-up.
pub fn save_image<T: Scalar>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    let shape = tensor.shape();
    if shape.n != 1 || shape.c != 3 {
        return Err(Error::shape("save_image", "(1,3,h,w)", shape));
    }
    let (h, w) = (shape.h, shape.w);
    let mut img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let raw = tensor.at(0, c, y, x).as_f64().clamp(0.0, 1.0);
                *v = (raw * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}
