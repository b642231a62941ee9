//! PNG conversion for `(3, H, W)` / `(1, H, W)` tensors with values in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn chw<T: Scalar>(t: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    match t.shape() {
        [c, h, w] if *c == channels => Ok((*h, *w)),
        [1, c, h, w] if *c == channels => Ok((*h, *w)),
        s => Err(Error::Shape(format!(
            "expected a ({channels}, H, W) image tensor, got {s:?}"
        ))),
    }
}

pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (h, w) = chw(t, 3)?;
    let d = t.data();
    let plane = h * w;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([
            to_u8(d[p].as_f64()),
            to_u8(d[plane + p].as_f64()),
            to_u8(d[2 * plane + p].as_f64()),
        ])
    }))
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = T::from_f64(px[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("buffer sized from image")
}

/// 8-bit grayscale; values are scaled by 255.
pub fn tensor_to_gray<T: Scalar>(t: &Tensor<T>) -> Result<GrayImage> {
    let (h, w) = chw(t, 1)?;
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(d[y as usize * w + x as usize].as_f64())])
    }))
}

pub fn gray_to_tensor<T: Scalar>(img: &GrayImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| T::from_f64(p[0] as f64 / 255.0)).collect();
    Tensor::from_vec(&[1, h, w], data).expect("buffer sized from image")
}

/// 16-bit grayscale, for probability maps.
pub fn save_gray16<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = chw(t, 1)?;
    let d = t.data();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = d[y as usize * w + x as usize].as_f64().clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn save_rgb<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?.save(path).map_err(|e| Error::image(path, e))
}

pub fn save_gray<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    tensor_to_gray(t)?.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn load_gray<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(gray_to_tensor(&img.to_luma8()))
}

/// Bilinear resize of a `(C, H, W)` tensor (half-pixel centers).
pub fn resize<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("resize expects (C, H, W), got {s:?}"))),
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidDimension("resize to or from an empty image".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(t.clone());
    }
    let d = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = axis(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis(ox, w, out_w);
                let v = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push(T::from_f64(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}
