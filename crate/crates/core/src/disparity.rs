use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Per-pixel horizontal displacement in pixels, left-image reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "disparity data has {} values for {height}x{width}",
            data.len()
        );
        Ok(DisparityMap {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, v: f32) -> Self {
        DisparityMap {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Batch item `n` of a single-channel tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        ensure!(s.c() == 1, "disparity tensor must have 1 channel, got {s}");
        ensure!(n < s.n(), "batch index {n} out of range for {s}");
        let plane = s.plane();
        let data = t.data()[n * plane..(n + 1) * plane]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        DisparityMap::new(s.h(), s.w(), data)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data)
            .expect("extents agree by construction")
    }

    /// Pixels with finite, non-negative disparity.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.data.iter().map(|v| v.is_finite() && *v >= 0.0).collect()
    }
}

/// Stacks per-sample maps into an `(N, 1, H, W)` tensor.
pub fn stack<T: Scalar>(maps: &[&DisparityMap]) -> Result<Tensor<T>> {
    ensure!(!maps.is_empty(), "cannot stack zero disparity maps");
    let (h, w) = (maps[0].height, maps[0].width);
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        ensure!(
            m.height == h && m.width == w,
            "disparity maps differ in size: {}x{} vs {h}x{w}",
            m.height,
            m.width
        );
        data.extend(m.data.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(Shape::new(maps.len(), 1, h, w), data)
}
