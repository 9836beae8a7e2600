//! RGB image buffer with the operations the pipeline needs: bilinear
//! sampling, PSNR, the coarse-to-fine Gaussian filter, and 8-bit PNG I/O.
//!
//! Values live in [0, 1] as f64. Pixel `(x, y)` covers the unit square with
//! center at `(x + 0.5, y + 0.5)`, matching the camera model.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, RGB interleaved, length `width * height * 3`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous image coordinates; pixel centers sit at
    /// integer + 0.5. Coordinates are clamped to the valid interior.
    pub fn bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let x = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Round-trip through 8-bit quantization. The dataset generator applies
    /// this so in-memory images equal their PNG encoding exactly.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            let q = (*v * 255.0).round().clamp(0.0, 255.0);
            *v = q / 255.0;
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != width * height * 3 {
            return Err(Error::input("from_rgb8: byte length mismatch"));
        }
        Ok(Image {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_rgb8();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized to dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, format!("png write failed: {e}")))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::format(path, format!("png read failed: {e}")))?
            .to_rgb8();
        Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]; identical images
/// return the cap (default path uses 100 dB).
pub fn psnr(rendered: &Image, reference: &Image) -> Result<f64> {
    psnr_capped(rendered, reference, 100.0)
}

pub fn psnr_capped(rendered: &Image, reference: &Image, cap: f64) -> Result<f64> {
    if rendered.width != reference.width || rendered.height != reference.height {
        return Err(Error::input(format!(
            "psnr: shape mismatch {}x{} vs {}x{}",
            rendered.width, rendered.height, reference.width, reference.height
        )));
    }
    let n = rendered.data.len() as f64;
    let mse: f64 = rendered
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

/// Separable Gaussian filter with kernel radius `ceil(3 sigma)` and reflect
/// padding. Below one pixel the filter is disabled and the original image is
/// returned unchanged.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma < 1.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv_two_s2 = 1.0 / (2.0 * sigma * sigma);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 * inv_two_s2).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let reflect = |i: i64, n: i64| -> usize {
        let mut i = i;
        // Mirror without repeating the edge sample.
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * n - 2 - i;
            }
        }
        i as usize
    };

    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sx = reflect(x + ki as i64 - radius, w);
                let px = img.get(sx, y);
                for c in 0..3 {
                    acc[c] += k * px[c];
                }
            }
            tmp.set(x as usize, y, acc);
        }
    }
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..img.width {
            let mut acc = [0.0; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sy = reflect(y + ki as i64 - radius, h);
                let px = tmp.get(x, sy);
                for c in 0..3 {
                    acc[c] += k * px[c];
                }
            }
            out.set(x, y as usize, acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);

        let b = Image::filled(8, 8, [0.4, 0.6, 0.8]);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "got {got}");

        let c = Image::new(4, 8);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let mut rng = crate::rng::rng_from_seed(5);
        use rand::Rng;
        let mut a = Image::new(16, 12);
        let mut b = Image::new(16, 12);
        for v in a.data.iter_mut() {
            *v = rng.gen::<f64>();
        }
        for v in b.data.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let mut acc = 0.0;
        for i in 0..a.data.len() {
            let d = a.data[i] - b.data[i];
            acc += d * d;
        }
        let mse = acc / a.data.len() as f64;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn blur_below_cutoff_is_identity() {
        let mut rng = crate::rng::rng_from_seed(6);
        use rand::Rng;
        let mut img = Image::new(9, 7);
        for v in img.data.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let out = gaussian_blur(&img, 0.5);
        assert_eq!(out, img);
    }

    #[test]
    fn blur_constant_unchanged() {
        let img = Image::filled(16, 16, [0.25, 0.5, 0.75]);
        let out = gaussian_blur(&img, 3.0);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_impulse_peak_matches_analytic() {
        // 2-D Gaussian peak of a unit impulse: 1 / (2 pi sigma^2).
        let sigma = 2.0;
        let mut img = Image::new(33, 33);
        img.set(16, 16, [1.0, 1.0, 1.0]);
        let out = gaussian_blur(&img, sigma);
        let center = out.get(16, 16)[0];
        let expect = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let rel = (center - expect).abs() / expect;
        assert!(rel < 0.05, "center {center} expect {expect}");
    }

    #[test]
    fn bilinear_at_centers_matches_get() {
        let mut img = Image::new(4, 3);
        img.set(2, 1, [0.1, 0.2, 0.3]);
        let s = img.bilinear(2.5, 1.5);
        assert_eq!(s, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn quantize_round_trip_u8() {
        let mut rng = crate::rng::rng_from_seed(9);
        use rand::Rng;
        let mut img = Image::new(5, 5);
        for v in img.data.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let q = img.quantized();
        let bytes = q.to_rgb8();
        let back = Image::from_rgb8(5, 5, &bytes).unwrap();
        assert_eq!(q, back);
    }
}
