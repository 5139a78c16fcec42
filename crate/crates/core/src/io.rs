//! PNG ⇄ tensor conversion. On-disk images are 8-bit; tensors hold `[0, 1]`.

use std::path::Path;

pub use image::{GrayImage, RgbImage};
use image::Luma;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

/// Rounds to the nearest 8-bit level after clamping to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (_, h, w) = t.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([quantize(t.get(0, y, x)), quantize(t.get(1, y, x)), quantize(t.get(2, y, x))])
    })
}

/// Quantizes a `[0, 1]` tensor to 8 bits and back, as a PNG round trip would.
pub fn round_trip_8bit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| quantize(v) as f32 / 255.0)
}

/// Binary mask tensor → 0/255 grayscale image.
pub fn mask_to_gray(mask: &Tensor<f32>) -> GrayImage {
    let (_, h, w) = mask.shape();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.get(0, y as usize, x as usize) >= 0.5 { 255 } else { 0 }])
    })
}

/// Arbitrary single-channel float map → 8-bit grayscale.
pub fn plane_to_gray(t: &Tensor<f32>) -> GrayImage {
    let (_, h, w) = t.shape();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([quantize(t.get(0, y as usize, x as usize))]))
}

/// Strict 0/255 mask → `{0, 1}` tensor. Any other level is an error.
pub fn gray_to_mask(img: &GrayImage) -> std::result::Result<Tensor<f32>, String> {
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for (x, y, p) in img.enumerate_pixels() {
        match p.0[0] {
            0 => data.push(0.0),
            255 => data.push(1.0),
            v => return Err(format!("mask value {v} at ({x}, {y}); only 0 and 255 are allowed")),
        }
    }
    Ok(Tensor::from_vec(1, h as usize, w as usize, data).expect("mask dims"))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn load_image_tensor(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&load_rgb(path)?))
}

/// Loads a mask PNG; it must be single-channel with values in {0, 255}.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::InvalidArgument(format!(
                "{}: mask must be an 8-bit single-channel PNG, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    gray_to_mask(&gray).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Decodes any supported image to an RGB tensor.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Reads only the header for the image dimensions `(width, height)`.
pub fn image_dimensions(bytes: &[u8]) -> std::result::Result<(u32, u32), String> {
    image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .into_dimensions()
        .map_err(|e| e.to_string())
}

pub fn encode_tensor_png(t: &Tensor<f32>) -> Vec<u8> {
    encode_png_rgb(&tensor_to_rgb(t))
}

pub fn encode_mask_png(mask: &Tensor<f32>) -> Vec<u8> {
    encode_png_gray(&mask_to_gray(mask))
}

pub fn decode_mask_png(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    match img {
        image::DynamicImage::ImageLuma8(g) => gray_to_mask(&g),
        other => Err(format!("mask must be an 8-bit single-channel PNG, found {:?}", other.color())),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_tensor_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    save_rgb(&tensor_to_rgb(t), path)
}

pub fn encode_png_rgb(img: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("PNG encoding to memory");
    buf.into_inner()
}

pub fn encode_png_gray(img: &GrayImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("PNG encoding to memory");
    buf.into_inner()
}
