//! PNG <-> array conversion. Images are CHW `f32` in [0, 1]; masks are HW `f32` in {0, 1}.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

pub fn load_rgb(path: &Path, size: (usize, usize)) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (h, w) = size;
    let img = if img.dimensions() != (w as u32, h as u32) {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(rgb_to_array(&img))
}

/// Loads a single-channel mask, resizes it and binarizes at 0.5.
pub fn load_mask(path: &Path, size: (usize, usize)) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (h, w) = size;
    let img = if img.dimensions() != (w as u32, h as u32) {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        if img.get_pixel(x as u32, y as u32)[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn array_to_rgb(image: ArrayView3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| to_u8(image[[c, y as usize, x as usize]]);
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_rgb(path: &Path, image: ArrayView3<f32>) -> Result<()> {
    array_to_rgb(image)
        .save(path)
        .map_err(|e| Error::image(path, e))
}

pub fn save_mask(path: &Path, mask: ArrayView2<f32>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] >= 0.5 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resampling of a CHW image, align-corners = false.
pub fn resize_bilinear(image: ArrayView3<f32>, size: (usize, usize)) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let (oh, ow) = size;
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let mut out = Array3::zeros((c, oh, ow));
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let top = image[[ch, y0, x0]] * (1.0 - tx) + image[[ch, y0, x1]] * tx;
                let bot = image[[ch, y1, x0]] * (1.0 - tx) + image[[ch, y1, x1]] * tx;
                out[[ch, y, x]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}
