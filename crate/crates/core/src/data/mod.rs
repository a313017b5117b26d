//! Stereo samples, the synthetic generator, file codecs and resizing.

mod dataset;
mod pfm;
mod pnm;
mod resize;
mod synth;

pub use dataset::{load_dataset, write_dataset};
pub use pfm::{read_pfm, read_pfm_disparity, write_pfm, write_pfm_disparity};
pub use pnm::{disparity_to_pgm, read_pnm, write_pnm};
pub use resize::{resize_disparity, resize_nearest};
pub use synth::{check_correspondence, gen_synthetic_pair, SynthConfig};

use crate::disparity::DisparityMap;
use crate::tensor::Tensor;

/// A rectified pair with left-referenced ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// `(1, C, H, W)`, values in `[0, 1]`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub gt_disp: DisparityMap,
    /// `true` where the left pixel is visible in both views.
    pub visible: Vec<bool>,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.gt_disp.height
    }

    pub fn width(&self) -> usize {
        self.gt_disp.width
    }
}
