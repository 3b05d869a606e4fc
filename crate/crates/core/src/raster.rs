//! Multi-channel image grids with values nominally in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{invalid, shape_err, Result};
use crate::mask::{BBox, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if data.len() != width * height * channels {
            return Err(shape_err(
                "image",
                format!("{width}x{height}x{channels} needs {} values, got {}", width * height * channels, data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, px: &[f64]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(px);
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn crop(&self, b: &BBox) -> Result<Image> {
        let (x0, y0, x1, y1) = b.as_usize();
        if x1 > self.width || y1 > self.height {
            return Err(invalid(format!("crop {b:?} outside {}x{} image", self.width, self.height)));
        }
        Ok(Image::from_fn(x1 - x0, y1 - y0, self.channels, |x, y, c| {
            self.get(x + x0, y + y0, c)
        }))
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// integer + 0.5); returns `None` outside the frame.
    pub fn sample_bilinear(&self, fx: f64, fy: f64, out: &mut [f64]) -> bool {
        let sx = fx - 0.5;
        let sy = fy - 0.5;
        if sx < -0.5 || sy < -0.5 || sx > self.width as f64 - 0.5 || sy > self.height as f64 - 0.5 {
            return false;
        }
        let sx = sx.clamp(0.0, (self.width - 1) as f64);
        let sy = sy.clamp(0.0, (self.height - 1) as f64);
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = sx - x0 as f64;
        let ty = sy - y0 as f64;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
            let bot = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
            *o = top * (1.0 - ty) + bot * ty;
        }
        true
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::zeros(width, height, self.channels);
        let mut px = vec![0.0; self.channels];
        let (rx, ry) = (self.width as f64 / width as f64, self.height as f64 / height as f64);
        for y in 0..height {
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * rx).clamp(0.5, self.width as f64 - 0.5);
                let fy = ((y as f64 + 0.5) * ry).clamp(0.5, self.height as f64 - 0.5);
                self.sample_bilinear(fx, fy, &mut px);
                out.set_pixel(x, y, &px);
            }
        }
        out
    }

    /// Writes binary PPM (3 channels) or PGM (1 channel); values clamp to
    /// `[0, 1]` and round to 8 bits.
    pub fn save_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            3 => {
                let img = RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                    let p = self.pixel(x as usize, y as usize);
                    Rgb([q(p[0]), q(p[1]), q(p[2])])
                });
                img.save_with_format(path, ImageFormat::Pnm)?;
            }
            1 => {
                let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                    Luma([q(self.get(x as usize, y as usize, 0))])
                });
                img.save_with_format(path, ImageFormat::Pnm)?;
            }
            c => return Err(invalid(format!("cannot write a {c}-channel image as PNM"))),
        }
        Ok(())
    }

    pub fn load_pnm(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().channel_count() == 1 {
            let g = img.to_luma8();
            Image::new(w, h, 1, g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        } else {
            let rgb = img.to_rgb8();
            Image::new(w, h, 3, rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
    }

    /// Quantizes to the 8-bit grid used by the on-disk formats.
    pub fn quantized(&self) -> Image {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }
}

/// Peak signal-to-noise ratio on unit-range images, optionally restricted to
/// cells where `region` is at least 0.5. Identical inputs are capped at 99 dB.
pub fn psnr(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(shape_err("psnr", "image dimensions differ"));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if region.is_some_and(|m| m.get(x, y) < 0.5) {
                continue;
            }
            for c in 0..a.channels {
                let d = a.get(x, y, c) - b.get(x, y, c);
                se += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(invalid("psnr over an empty region"));
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: isize = 3;
const SSIM_SIGMA: f64 = 1.5;

/// Mean SSIM over channels with a 7×7 Gaussian window (σ = 1.5, clamped
/// borders), averaged over `region` cells when given.
pub fn ssim(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(shape_err("ssim", "image dimensions differ"));
    }
    let taps: Vec<f64> = (-SSIM_RADIUS..=SSIM_RADIUS)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let norm: f64 = taps.iter().sum::<f64>().powi(2);
    let (w, h) = (a.width as isize, a.height as isize);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if region.is_some_and(|m| m.get(x as usize, y as usize) < 0.5) {
                continue;
            }
            for c in 0..a.channels {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (j, ty) in taps.iter().enumerate() {
                    let yy = (y + j as isize - SSIM_RADIUS).clamp(0, h - 1) as usize;
                    for (i, tx) in taps.iter().enumerate() {
                        let xx = (x + i as isize - SSIM_RADIUS).clamp(0, w - 1) as usize;
                        let wt = tx * ty / norm;
                        let (va, vb) = (a.get(xx, yy, c), b.get(xx, yy, c));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(invalid("ssim over an empty region"));
    }
    Ok(total / count as f64)
}
