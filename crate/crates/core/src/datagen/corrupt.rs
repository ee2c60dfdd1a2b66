//! Common image corruptions at severities L0 (identity) through L5.
//!
//! All transforms act on images in the `[0, 1]` range and return images in
//! that range with the same shape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    CropResize,
    JpegLike,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::CropResize,
        CorruptionKind::JpegLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::CropResize => "crop_resize",
            CorruptionKind::JpegLike => "jpeg_like",
        }
    }
}

pub const MAX_SEVERITY: u8 = 5;

const NOISE_STD: [f32; 5] = [5.0, 10.0, 15.0, 20.0, 25.0];
const BLUR_SIGMA: [f32; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
const CROP_FACTOR: [f32; 5] = [0.9, 0.8, 0.7, 0.6, 0.5];
const JPEG_QUALITY: [u32; 5] = [90, 80, 70, 60, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::Config(format!(
                "severity must be in 0..={MAX_SEVERITY}, got {severity}"
            )));
        }
        Ok(Self { kind, severity })
    }
}

/// Applies a corruption. `seed` drives the noise corruption only.
pub fn corrupt(image: &Image, spec: CorruptionSpec, seed: u64) -> Result<Image> {
    if spec.severity > MAX_SEVERITY {
        return Err(Error::Config(format!("unknown severity {}", spec.severity)));
    }
    if spec.severity == 0 {
        return Ok(image.clone());
    }
    let level = spec.severity as usize - 1;
    Ok(match spec.kind {
        CorruptionKind::GaussianNoise => gaussian_noise(image, NOISE_STD[level] / 255.0, seed),
        CorruptionKind::GaussianBlur => gaussian_blur(image, BLUR_SIGMA[level]),
        CorruptionKind::CropResize => crop_resize(image, CROP_FACTOR[level]),
        CorruptionKind::JpegLike => jpeg_like(image, JPEG_QUALITY[level]),
    })
}

fn map_pixels(image: &Image, pixels: Vec<f32>) -> Image {
    Image {
        height: image.height,
        width: image.width,
        pixels,
    }
}

pub fn gaussian_noise(image: &Image, std: f32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let pixels = image
        .pixels
        .iter()
        .map(|&p| (p + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    map_pixels(image, pixels)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(index: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = index.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

pub fn gaussian_blur(image: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|k| (-(k * k) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (image.height, image.width);
    let mut rows = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            rows[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * image.pixels[r * w + reflect(c as isize + i as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let v: f32 = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * rows[reflect(r as isize + i as isize - radius, h) * w + c])
                .sum();
            out[r * w + c] = v.clamp(0.0, 1.0);
        }
    }
    map_pixels(image, out)
}

/// Bilinear resampling with half-pixel centres.
fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(dh * dw);
    let (ry, rx) = (sh as f32 / dh as f32, sw as f32 / dw as f32);
    for r in 0..dh {
        let y = ((r as f32 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f32);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(sh - 1);
        for c in 0..dw {
            let x = ((c as f32 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f32);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(sw - 1);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Centre crop to `factor` of each side, then resize back.
pub fn crop_resize(image: &Image, factor: f32) -> Image {
    let (h, w) = (image.height, image.width);
    let ch = ((h as f32 * factor).round() as usize).clamp(1, h);
    let cw = ((w as f32 * factor).round() as usize).clamp(1, w);
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    let mut crop = Vec::with_capacity(ch * cw);
    for r in top..top + ch {
        crop.extend_from_slice(&image.pixels[r * w + left..r * w + left + cw]);
    }
    let pixels = resize_bilinear(&crop, ch, cw, h, w)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    map_pixels(image, pixels)
}

#[rustfmt::skip]
const LUMA_QUANT: [u32; 64] = [
    16, 11, 10, 16,  24,  40,  51,  61,
    12, 12, 14, 19,  26,  58,  60,  55,
    14, 13, 16, 24,  40,  57,  69,  56,
    14, 17, 22, 29,  51,  87,  80,  62,
    18, 22, 37, 56,  68, 109, 103,  77,
    24, 35, 55, 64,  81, 104, 113,  92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103,  99,
];

/// Luminance quantization table scaled to `quality` with the IJG rule.
pub fn quant_table(quality: u32) -> [f32; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut table = [0.0f32; 64];
    for (t, &base) in table.iter_mut().zip(&LUMA_QUANT) {
        *t = ((base * scale + 50) / 100).clamp(1, 255) as f32;
    }
    table
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut basis = [[0.0f64; 8]; 8];
    for (u, row) in basis.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    basis
}

/// Block-DCT quantization round trip of the JPEG luminance path: level
/// shift, 8x8 orthonormal DCT, quantize, dequantize, inverse DCT. Edges
/// that do not fill a block are padded by replication.
pub fn jpeg_like(image: &Image, quality: u32) -> Image {
    let table = quant_table(quality);
    let basis = dct_basis();
    let (h, w) = (image.height, image.width);
    let (bh, bw) = (h.div_ceil(8), w.div_ceil(8));
    let mut out = vec![0.0f32; h * w];
    for by in 0..bh {
        for bx in 0..bw {
            let mut block = [[0.0f64; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let r = (by * 8 + y).min(h - 1);
                    let c = (bx * 8 + x).min(w - 1);
                    *v = image.pixels[r * w + c] as f64 * 255.0 - 128.0;
                }
            }
            let mut coeff = [[0.0f64; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut s = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            s += basis[u][y] * basis[v][x] * block[y][x];
                        }
                    }
                    let q = table[u * 8 + v] as f64;
                    coeff[u][v] = (s / q).round() * q;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let (r, c) = (by * 8 + y, bx * 8 + x);
                    if r >= h || c >= w {
                        continue;
                    }
                    let mut s = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            s += basis[u][y] * basis[v][x] * coeff[u][v];
                        }
                    }
                    out[r * w + c] = (((s + 128.0) / 255.0) as f32).clamp(0.0, 1.0);
                }
            }
        }
    }
    map_pixels(image, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::real::sample_real;

    fn mse(a: &Image, b: &Image) -> f64 {
        a.pixels
            .iter()
            .zip(&b.pixels)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64
    }

    fn unit_images(n: usize) -> Vec<Image> {
        sample_real(77, n).into_iter().map(|s| s.image.to_unit_range()).collect()
    }

    #[test]
    fn severity_zero_is_identity() {
        let img = &unit_images(1)[0];
        for kind in CorruptionKind::ALL {
            let out = corrupt(img, CorruptionSpec { kind, severity: 0 }, 1).unwrap();
            assert_eq!(
                out.pixels.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
                img.pixels.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn invalid_severity() {
        assert!(CorruptionSpec::new(CorruptionKind::JpegLike, 6).is_err());
        let img = Image::filled(16, 16, 0.5);
        let bad = CorruptionSpec { kind: CorruptionKind::GaussianBlur, severity: 9 };
        assert!(matches!(corrupt(&img, bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn noise_variance_matches_level_one() {
        let img = Image::filled(16, 16, 0.5);
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 1).unwrap();
        let values: Vec<f64> = (0..100)
            .flat_map(|i| corrupt(&img, spec, i).unwrap().pixels)
            .map(|p| p as f64)
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        let expected = (5.0f64 / 255.0).powi(2);
        assert!((var / expected - 1.0).abs() < 0.2, "variance ratio {}", var / expected);
    }

    #[test]
    fn jpeg_second_pass_changes_less() {
        for img in unit_images(20) {
            let once = jpeg_like(&img, 50);
            let twice = jpeg_like(&once, 50);
            assert!(mse(&twice, &once) < mse(&once, &img));
        }
    }

    #[test]
    fn shape_range_and_monotone_distortion() {
        let images = unit_images(100);
        for kind in CorruptionKind::ALL {
            let mut previous = -1.0f64;
            for severity in 0..=MAX_SEVERITY {
                let spec = CorruptionSpec { kind, severity };
                let mut total = 0.0;
                for (i, img) in images.iter().enumerate() {
                    let out = corrupt(img, spec, i as u64).unwrap();
                    assert!(out.same_shape(img));
                    assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
                    total += mse(&out, img);
                }
                let avg = total / images.len() as f64;
                assert!(avg >= previous, "{kind:?} L{severity}: {avg} < {previous}");
                previous = avg;
            }
        }
    }

    #[test]
    fn constant_images_survive_blur_and_crop() {
        let img = Image::filled(16, 16, 0.25);
        for out in [gaussian_blur(&img, 5.0), crop_resize(&img, 0.5), jpeg_like(&img, 90)] {
            for p in &out.pixels {
                assert!((p - 0.25).abs() < 1e-2, "{p}");
            }
        }
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-7, 4), 1);
        assert_eq!(reflect(0, 1), 0);
    }
}
