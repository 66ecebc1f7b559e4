use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// An RGB image stored channel-major (`[3, H, W]`), values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(alloc::format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(core::iter::repeat_n(c, height * width));
        }
        Image { height, width, data }
    }

    /// Interprets a `[3, H, W]` or `[1, 3, H, W]` tensor as an image.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(Error::Shape(alloc::format!("expected [3, H, W] image tensor, got {s:?}"))),
        };
        Ok(Image { height: h, width: w, data: t.data().to_vec() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    /// `[1, 3, H, W]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone())
    }

    /// Stacks images into a `[N, 3, H, W]` batch.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Input("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for im in images {
            if im.height != h || im.width != w {
                return Err(Error::Shape(alloc::format!(
                    "batch mixes {h}x{w} and {}x{} images",
                    im.height,
                    im.width
                )));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new(&[images.len(), 3, h, w], data))
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(alloc::format!(
                "images differ in size: {}x{} vs {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            )));
        }
        Ok(())
    }
}
