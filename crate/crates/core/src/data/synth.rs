use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StereoSample;
use crate::disparity::DisparityMap;
use crate::error::{ensure, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (colour).
    pub channels: usize,
    pub num_shapes: usize,
    pub disp_min: usize,
    pub disp_max: usize,
    pub background_disp: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 128,
            height: 64,
            channels: 3,
            num_shapes: 4,
            disp_min: 4,
            disp_max: 24,
            background_disp: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.width >= 2 && self.height >= 1,
            "synthetic image must be at least 2x1"
        );
        ensure!(
            self.channels == 1 || self.channels == 3,
            "channels must be 1 or 3, got {}",
            self.channels
        );
        ensure!(
            self.disp_min <= self.disp_max && 2 * self.disp_max < self.width,
            "need 0 <= disp_min <= disp_max < width/2 (got {}..{} for width {})",
            self.disp_min,
            self.disp_max,
            self.width
        );
        ensure!(
            2 * self.background_disp < self.width,
            "background_disp {} must be < width/2",
            self.background_disp
        );
        Ok(())
    }
}

/// A fronto-parallel textured layer.
struct Layer {
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
    disp: i64,
    seed: u64,
    base: [f64; 3],
}

impl Layer {
    fn covers(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, c: usize) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64 ^ ((c as u64) << 56))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise with lattice spacing `cell`, in `[0, 1)`.
fn value_noise(seed: u64, x: i64, y: i64, c: usize, cell: i64) -> f64 {
    let (gx, fx) = (x.div_euclid(cell), x.rem_euclid(cell) as f64 / cell as f64);
    let (gy, fy) = (y.div_euclid(cell), y.rem_euclid(cell) as f64 / cell as f64);
    let v00 = lattice(seed, gx, gy, c);
    let v10 = lattice(seed, gx + 1, gy, c);
    let v01 = lattice(seed, gx, gy + 1, c);
    let v11 = lattice(seed, gx + 1, gy + 1, c);
    let top = v00 + (v10 - v00) * fx;
    let bot = v01 + (v11 - v01) * fx;
    top + (bot - top) * fy
}

/// Texture value of `layer` at left-view coordinates `(x, y)`, quantised to
/// 8 bits so samples survive a PNM round trip unchanged.
fn texture(layer: &Layer, x: i64, y: i64, c: usize) -> f32 {
    let coarse = value_noise(layer.seed, x, y, c, 8) - 0.5;
    let fine = value_noise(layer.seed.wrapping_add(1), x, y, c, 2) - 0.5;
    let grain = lattice(layer.seed.wrapping_add(2), x, y, c) - 0.5;
    let v = layer.base[c] + 0.45 * coarse + 0.3 * fine + 0.15 * grain;
    let q = (v.clamp(0.0, 1.0) * 255.0).round();
    q as f32 / 255.0
}

/// Renders a textured background plane and `num_shapes` textured rectangles
/// at random integer disparities into both views, back to front.
///
/// A layer with disparity `d` that shows texture value `t(x, y)` at left
/// column `x` shows the same value at right column `x - d`, so every pixel
/// visible in both views satisfies `left[x] == right[x - gt[x]]` exactly.
pub fn gen_synthetic_pair(cfg: &SynthConfig) -> Result<StereoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as i64, cfg.height as i64);
    let base = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let g: f64 = rng.gen_range(0.25..0.75);
        [g, rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)]
    };

    let mut layers = vec![Layer {
        x0: i64::MIN / 4,
        x1: i64::MAX / 4,
        y0: i64::MIN / 4,
        y1: i64::MAX / 4,
        disp: cfg.background_disp as i64,
        seed: rng.gen(),
        base: base(&mut rng),
    }];
    let mut shapes = Vec::with_capacity(cfg.num_shapes);
    for _ in 0..cfg.num_shapes {
        let sw = rng.gen_range((w / 8).max(1)..=(w / 3).max(1));
        let sh = rng.gen_range((h / 6).max(1)..=(h / 2).max(1));
        let x0 = rng.gen_range(-sw / 2..w);
        let y0 = rng.gen_range(-sh / 2..h);
        shapes.push(Layer {
            x0,
            x1: x0 + sw,
            y0,
            y1: y0 + sh,
            disp: rng.gen_range(cfg.disp_min..=cfg.disp_max) as i64,
            seed: rng.gen(),
            base: base(&mut rng),
        });
    }
    // nearer layers (larger disparity) are painted later
    shapes.sort_by_key(|l| l.disp);
    layers.extend(shapes);

    let c = cfg.channels;
    let plane = (w * h) as usize;
    let mut left = vec![0f32; c * plane];
    let mut right = vec![0f32; c * plane];
    let mut gt = vec![0f32; plane];
    let mut owner_left = vec![0usize; plane];
    let mut owner_right = vec![0usize; plane];

    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let lo = (0..layers.len())
                .rev()
                .find(|&k| layers[k].covers(x, y))
                .unwrap_or(0);
            owner_left[i] = lo;
            gt[i] = layers[lo].disp as f32;
            for ch in 0..c {
                left[ch * plane + i] = texture(&layers[lo], x, y, ch);
            }
            let ro = (0..layers.len())
                .rev()
                .find(|&k| layers[k].covers(x + layers[k].disp, y))
                .unwrap_or(0);
            owner_right[i] = ro;
            for ch in 0..c {
                right[ch * plane + i] = texture(&layers[ro], x + layers[ro].disp, y, ch);
            }
        }
    }

    let visible = (0..plane)
        .map(|i| {
            let x = (i as i64) % w;
            let sx = x - gt[i] as i64;
            sx >= 0 && owner_right[i - (x - sx) as usize] == owner_left[i]
        })
        .collect();

    let shape = Shape::new(1, c, cfg.height, cfg.width);
    Ok(StereoSample {
        left: Tensor::from_vec(shape, left)?,
        right: Tensor::from_vec(shape, right)?,
        gt_disp: DisparityMap::new(cfg.height, cfg.width, gt)?,
        visible,
    })
}

/// Number of visible pixels violating `left[x] == right[x - round(gt[x])]`.
pub fn check_correspondence(s: &StereoSample) -> usize {
    let sh = s.left.shape();
    let (c, h, w) = (sh.c(), sh.h(), sh.w());
    let mut bad = 0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !s.visible[i] {
                continue;
            }
            let sx = x as i64 - s.gt_disp.data[i].round() as i64;
            if sx < 0 || sx >= w as i64 {
                bad += 1;
                continue;
            }
            if (0..c).any(|ch| s.left.at(0, ch, y, x) != s.right.at(0, ch, y, sx as usize)) {
                bad += 1;
            }
        }
    }
    bad
}
