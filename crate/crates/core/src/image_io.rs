//! Image loading and small pixel utilities. Images are `[1, c, h, w]` f32
//! tensors with values in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Load an image as luminance (1 channel) or RGB (3 channels).
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(from_dynamic(&img))
}

pub fn from_dynamic(img: &DynamicImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let mut t = Tensor::zeros(&[1, 3, h, w]);
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                t.plane_mut(0, c)[y as usize * w + x as usize] = p.0[c];
            }
        }
        t
    } else {
        let g = img.to_luma32f();
        Tensor::from_vec(&[1, 1, h, w], g.into_raw())
    }
}

/// Save channel 0 (or luminance of RGB) as an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_gray_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let lum = luminance(t);
    let (_, _, h, w) = lum.dims4();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = lum.data()[y as usize * w + x as usize].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `0.299 R + 0.587 G + 0.114 B` for 3-channel inputs; 1-channel inputs
/// are returned as-is.
pub fn luminance<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = t.dims4();
    match c {
        1 => t.clone(),
        3 => {
            let (kr, kg, kb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
            let mut out = Tensor::zeros(&[n, 1, h, w]);
            for i in 0..n {
                let (r, g, b) = (t.plane(i, 0), t.plane(i, 1), t.plane(i, 2));
                for (p, o) in out.plane_mut(i, 0).iter_mut().enumerate() {
                    *o = kr * r[p] + kg * g[p] + kb * b[p];
                }
            }
            out
        }
        _ => {
            let inv = T::one() / T::from_usize(c).unwrap();
            let mut out = Tensor::zeros(&[n, 1, h, w]);
            for i in 0..n {
                for ch in 0..c {
                    let src = t.plane(i, ch).to_vec();
                    for (o, v) in out.plane_mut(i, 0).iter_mut().zip(src) {
                        *o += v * inv;
                    }
                }
            }
            out
        }
    }
}

/// Adapt a `[n, c, h, w]` image to `channels`: RGB to luminance, gray
/// replicated to three channels.
pub fn to_channels(t: &Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = t.dims4();
    match (c, channels) {
        (a, b) if a == b => Ok(t.clone()),
        (3, 1) => Ok(luminance(t)),
        (1, 3) => {
            let mut out = Tensor::zeros(&[n, 3, h, w]);
            for i in 0..n {
                for ch in 0..3 {
                    out.plane_mut(i, ch).copy_from_slice(t.plane(i, 0));
                }
            }
            Ok(out)
        }
        _ => Err(Error::Config(format!("cannot convert a {c}-channel image to {channels} channels"))),
    }
}

/// Zero mean, unit variance per channel (and per batch item).
pub fn standardize<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (n, c, _, _) = t.dims4();
    let mut out = t.clone();
    let eps = T::lit(1e-6);
    for i in 0..n {
        for ch in 0..c {
            let plane = out.plane_mut(i, ch);
            let len = T::from_usize(plane.len()).unwrap();
            let mean = plane.iter().copied().sum::<T>() / len;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
            let inv = T::one() / (var.sqrt() + eps);
            plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }
    out
}

/// Separable Gaussian blur with replicate borders, kernel radius `ceil(3σ)`.
pub fn gaussian_blur(t: &Tensor<f32>, sigma: f32) -> Tensor<f32> {
    if sigma <= 0.0 {
        return t.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let (n, c, h, w) = t.dims4();
    let mut out = t.clone();
    for i in 0..n {
        for ch in 0..c {
            let src = t.plane(i, ch);
            let mut tmp = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let sx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += kv * src[y * w + sx];
                    }
                    tmp[y * w + x] = acc;
                }
            }
            let dst = out.plane_mut(i, ch);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                        acc += kv * tmp[sy * w + x];
                    }
                    dst[y * w + x] = acc;
                }
            }
        }
    }
    out
}

/// Bilinear resize of a `[1, c, h, w]` image (pixel-center aligned).
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (_, c, h, w) = t.dims4();
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = Tensor::zeros(&[1, c, out_h, out_w]);
    for y in 0..out_h {
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
            let taps = crate::nn::bilinear_taps::<f32>(fx, fy, h, w);
            for ch in 0..c {
                out.plane_mut(0, ch)[y * out_w + x] = taps.sample(t.plane(0, ch));
            }
        }
    }
    out
}

/// Crop `[1, c, h, w]` to the window at `(x0, y0)` of size `ch x cw`.
pub fn crop(t: &Tensor<f32>, x0: usize, y0: usize, crop_h: usize, crop_w: usize) -> Tensor<f32> {
    let (_, c, h, w) = t.dims4();
    assert!(x0 + crop_w <= w && y0 + crop_h <= h, "crop out of bounds");
    let mut out = Tensor::zeros(&[1, c, crop_h, crop_w]);
    for ch in 0..c {
        let src = t.plane(0, ch);
        let dst = out.plane_mut(0, ch);
        for y in 0..crop_h {
            dst[y * crop_w..(y + 1) * crop_w].copy_from_slice(&src[(y0 + y) * w + x0..(y0 + y) * w + x0 + crop_w]);
        }
    }
    out
}
