use crate::error::{Error, Result};
use crate::tensor::Image;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;

/// Peak signal-to-noise ratio in dB for images on `[0, 1]`. Identical
/// images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean SSIM over all 8x8 windows (stride 1) with uniform weighting and the
/// usual constants for a dynamic range of 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::shape(
            format!("at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{}x{}", a.height, a.width),
        ));
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=a.height - SSIM_WINDOW {
        for left in 0..=a.width - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
            for r in top..top + SSIM_WINDOW {
                for c in left..left + SSIM_WINDOW {
                    let x = a.get(r, c) as f64;
                    let y = b.get(r, c) as f64;
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_real;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 1.0)).unwrap(), 0.0);
        let b = Image::filled(4, 4, 0.4);
        // mse = 0.01
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &Image::filled(2, 2, 0.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let img = sample_real(4, 1)[0].image.to_unit_range();
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        let binary = Image::new(
            16,
            16,
            (0..256).map(|i| if (i / 16 + i % 16 / 3) % 2 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let inverted = Image::new(16, 16, binary.pixels.iter().map(|p| 1.0 - p).collect()).unwrap();
        assert!(ssim(&binary, &inverted).unwrap() < 0.0);
        assert!(ssim(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 0.0)).is_err());
    }

    #[test]
    fn symmetric_metrics() {
        let s = sample_real(5, 2);
        let (a, b) = (s[0].image.to_unit_range(), s[1].image.to_unit_range());
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }
}
