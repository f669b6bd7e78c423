//! Pixel containers and PNG I/O.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use panofill_autograd::{Element, Tensor};

use crate::error::{Error, Result};

/// Row-major 2D grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-pixel integer labels (3-class or plane-wise).
pub type LabelMap = Grid<u8>;

/// Binary map; for inpainting masks, 1 marks a missing pixel.
pub type BinaryMask = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch { what: "grid data", expected: vec![height * width], got: vec![data.len()] });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Nearest-neighbour downsampling by an integer factor, sampling the
    /// pixel nearest each output cell's centre.
    pub fn downsample_nearest(&self, factor: usize) -> Self {
        assert!(factor >= 1 && self.height.is_multiple_of(factor) && self.width.is_multiple_of(factor), "factor must divide the grid");
        let off = factor / 2;
        Self::from_fn(self.height / factor, self.width / factor, |i, j| self.get(i * factor + off, j * factor + off))
    }
}

impl Grid<u8> {
    /// Number of non-zero cells.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Fraction of non-zero cells.
    pub fn ratio(&self) -> f64 {
        self.count_nonzero() as f64 / self.data.len() as f64
    }

    /// As a `(1, 1, H, W)` tensor of the raw values.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64)).collect())
            .expect("grid length")
    }

    /// Single-channel 8-bit PNG with values written verbatim.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img: GrayImage = ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length matches dimensions");
        img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Binary mask stored as 0/255.
    pub fn save_mask_png(&self, path: &Path) -> Result<()> {
        self.map(|v| if v != 0 { 255 } else { 0 }).save_png(path)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.into_luma8();
        let (w, h) = img.dimensions();
        Self::from_vec(h as usize, w as usize, img.into_raw())
    }

    /// Mask PNG (any non-zero value means missing).
    pub fn load_mask_png(path: &Path) -> Result<Self> {
        Ok(Self::load_png(path)?.map(|v| u8::from(v >= 128)))
    }
}

/// RGB image on [0, 1], stored channel-major (3 x H x W).
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Panorama {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for c in 0..3 {
            data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = rgb[c]);
        }
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for i in 0..height {
            for j in 0..width {
                let rgb = f(i, j);
                for c in 0..3 {
                    data[c * hw + i * width + j] = rgb[c];
                }
            }
        }
        Self { height, width, data }
    }

    pub fn from_planes(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch { what: "panorama data", expected: vec![3, height, width], got: vec![data.len()] });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f32) {
        self.data[(channel * self.height + row) * self.width + col] = v;
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        [self.get(0, row, col), self.get(1, row, col), self.get(2, row, col)]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64)).collect())
            .expect("panorama length")
    }

    /// From a `(1, 3, H, W)` (or `(3, H, W)`) tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [1, 3, h, w] | [3, h, w] => (*h, *w),
            _ => return Err(Error::ShapeMismatch { what: "panorama tensor", expected: vec![1, 3, 0, 0], got: s.to_vec() }),
        };
        Self::from_planes(h, w, t.data().iter().map(|v| v.f64() as f32).collect())
    }

    /// 8-bit quantization used for PNG output.
    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(quantize))
        })
    }

    /// The image after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect() }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.into_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, |i, j| {
            let Rgb(p) = *img.get_pixel(j as u32, i as u32);
            p.map(|v| v as f32 / 255.0)
        }))
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
