//! Classical vision kernels: grayscale images, Canny edges, Horn–Schunck
//! optical flow and backward warping.

mod canny;
mod flow;
mod warp;

pub use canny::{
    canny, gaussian_blur, gaussian_kernel, sobel, CannyParams, EdgeMap, MAGNITUDE_QUANTUM,
};
pub use flow::{optical_flow, FlowField, FlowParams};
pub(crate) use warp::warp_flow;
pub use warp::{warp, warp_frame, warp_gray};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

/// Luma weights for RGB to grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::contract(format!(
                "gray image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("gray image contains non-finite values"));
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data).expect("finite generator")
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    /// Grayscale view of a frame: luma for three channels, the single
    /// channel for one, the channel mean otherwise.
    pub fn from_frame(frame: &LatentGrid) -> Self {
        let (c, h, w) = frame.shape();
        let mut data = vec![0.0; h * w];
        match c {
            3 => {
                for (ch, &k) in LUMA.iter().enumerate() {
                    for (o, v) in data.iter_mut().zip(frame.plane(ch)) {
                        *o += k * v;
                    }
                }
            }
            _ => {
                for ch in 0..c {
                    for (o, v) in data.iter_mut().zip(frame.plane(ch)) {
                        *o += v / c as f64;
                    }
                }
            }
        }
        Self::new(w, h, data).expect("frame values are finite")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixel with coordinates clamped to the border.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }

    pub fn same_dims(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_latent(&self) -> LatentGrid {
        LatentGrid::from_vec(1, self.height, self.width, self.data.clone()).expect("valid dims")
    }
}
