//! Reference implementations shared by the integration and acceptance
//! tests. Everything here is written as plainly as possible and avoids the
//! library's kernels, so agreement means something.

#![allow(dead_code)]

pub mod grad_cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shiftconv::data::{gen_synthetic_pair, StereoSample, SynthConfig};
use shiftconv::{Graph, Result, Shape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::uniform(Shape(shape), -1.0, 1.0, &mut rng(seed))
}

/// Direct six-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.shape().0;
    let [co, ci2, kh, kw] = w.shape().0;
    assert_eq!(ci, ci2);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Tensor::zeros(Shape::new(n, co, ho, wo));
    for bn in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(bn, i, iy as usize, ix as usize) * w.at(o, i, ky, kx);
                            }
                        }
                    }
                    y.set(bn, o, oy, ox, acc);
                }
            }
        }
    }
    y
}

/// Transposed convolution by zero stuffing: insert `stride - 1` zeros
/// between input samples, pad by `k - 1 - pad`, then correlate with the
/// spatially flipped kernel whose in/out axes are swapped.
pub fn zero_stuff_deconv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.shape().0;
    let [ci2, co, kh, kw] = w.shape().0;
    assert_eq!(ci, ci2);
    let (sh, sw) = ((h - 1) * stride + 1, (wd - 1) * stride + 1);
    let mut stuffed = Tensor::zeros(Shape::new(n, ci, sh, sw));
    for bn in 0..n {
        for c in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    stuffed.set(bn, c, y * stride, xx * stride, x.at(bn, c, y, xx));
                }
            }
        }
    }
    let mut flipped = Tensor::zeros(Shape::new(co, ci, kh, kw));
    for i in 0..ci {
        for o in 0..co {
            for ky in 0..kh {
                for kx in 0..kw {
                    flipped.set(o, i, kh - 1 - ky, kw - 1 - kx, w.at(i, o, ky, kx));
                }
            }
        }
    }
    assert_eq!(kh, kw);
    naive_conv(&stuffed, &flipped, b, 1, kh - 1 - pad)
}

/// `sum(y * r)` for a fixed random `r`: a scalar whose gradient with
/// respect to `y` is dense and O(1).
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = rand_t(g.shape(y).0, seed ^ 0x5eed);
    let m = g.mul_const(y, &r)?;
    Ok(g.sum(m))
}

pub fn random_coords(numel: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..count.min(numel)).map(|_| r.gen_range(0..numel)).collect()
}

/// A pair showing one textured plane at constant integer disparity `d`.
pub fn constant_disparity_pair(d: usize, width: usize, height: usize, channels: usize, seed: u64) -> StereoSample {
    gen_synthetic_pair(&SynthConfig {
        width,
        height,
        channels,
        num_shapes: 0,
        disp_min: 0,
        disp_max: 0,
        background_disp: d,
        seed,
    })
    .unwrap()
}
