use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// An 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidShape { op: "raster", msg: format!("{channels} channels (expected 1 or 3)") });
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidShape {
                op: "raster",
                msg: format!("{width}x{height}x{channels} needs {} bytes, got {}", width * height * channels, data.len()),
            });
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// True if the `w x h` window with top-left corner `(left, top)` lies inside the image.
    pub fn contains(&self, left: i64, top: i64, w: usize, h: usize) -> bool {
        left >= 0 && top >= 0 && left as usize + w <= self.width && top as usize + h <= self.height
    }

    /// `[3, h, w]` window scaled to `[0, 1]`; gray images are replicated to
    /// three channels. `None` when the window leaves the image.
    pub fn window(&self, left: i64, top: i64, w: usize, h: usize) -> Option<Vec<f32>> {
        if !self.contains(left, top, w, h) {
            return None;
        }
        let (left, top) = (left as usize, top as usize);
        let mut out = vec![0.0f32; 3 * w * h];
        for c in 0..3 {
            let src_c = if self.channels == 1 { 0 } else { c };
            for y in 0..h {
                let row = (top + y) * self.width;
                for x in 0..w {
                    out[(c * h + y) * w + x] = self.data[(row + left + x) * self.channels + src_c] as f32 / 255.0;
                }
            }
        }
        Some(out)
    }

    /// Mirror image around the vertical axis: column `x` moves to `width - 1 - x`.
    pub fn flip_horizontal(&self) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            let row = &self.data[y * self.width * c..(y + 1) * self.width * c];
            for px in row.chunks_exact(c).rev() {
                data.extend_from_slice(px);
            }
        }
        Self { width: self.width, height: self.height, channels: c, data }
    }

    /// Reads PNG or PNM. Gray images stay single-channel; anything with
    /// color is converted to 8-bit RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Ok(match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self { width: w as usize, height: h as usize, channels: 1, data: g.into_raw() }
            }
            other if !other.color().has_color() => {
                let g = other.to_luma8();
                let (w, h) = g.dimensions();
                Self { width: w as usize, height: h as usize, channels: 1, data: g.into_raw() }
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self { width: w as usize, height: h as usize, channels: 3, data: rgb.into_raw() }
            }
        })
    }

    /// Writes in the format implied by the extension (png, pgm, ppm, pnm).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        let img = if self.channels == 1 {
            DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, self.data.clone()).expect("sized at construction"))
        } else {
            DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, self.data.clone()).expect("sized at construction"))
        };
        img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}
