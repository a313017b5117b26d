//! Cost-volume construction: shift concatenation, the learned matching-clue
//! convolution in both orderings, the fixed 1-D correlation baseline and the
//! disparity-guided auto-shift convolution used by the refinement head.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::disparity::DisparityMap;
use crate::error::{ensure, Error, Result};
use crate::tensor::Scalar;

/// Negative slope applied after every learned conv except disparity heads.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Offsets around the guide disparity visited by [`auto_shift_conv`].
pub const REFINE_DELTAS: [i32; 5] = [-2, -1, 0, 1, 2];

/// Filters of the auto-shift matching conv.
pub const REFINE_MATCH_FILTERS: usize = 8;

/// Where the matching-clue convolution sits relative to the scale concat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftVariant {
    /// One shared conv per shifted pair, then concatenate the results.
    ConvPerScaleThenConcat,
    /// Concatenate every shifted pair, then one wide conv.
    ConcatAllThenConv,
}

impl fmt::Display for ShiftVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftVariant::ConvPerScaleThenConcat => "conv-then-concat",
            ShiftVariant::ConcatAllThenConv => "concat-then-conv",
        })
    }
}

impl FromStr for ShiftVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-then-concat" | "ConvPerScaleThenConcat" => Ok(ShiftVariant::ConvPerScaleThenConcat),
            "concat-then-conv" | "ConcatAllThenConv" => Ok(ShiftVariant::ConcatAllThenConv),
            _ => Err(Error::Config(format!("unknown shift variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftConvConfig {
    /// Largest displacement at feature-map scale.
    pub maxdisp: usize,
    /// Matching-clue filters per scale.
    pub clue_filters: usize,
    pub variant: ShiftVariant,
    pub both_directions: bool,
    /// Share one filter bank across scales (conv-then-concat only).
    pub share_weights: bool,
}

impl Default for ShiftConvConfig {
    fn default() -> Self {
        ShiftConvConfig {
            maxdisp: 40,
            clue_filters: 16,
            variant: ShiftVariant::ConvPerScaleThenConcat,
            both_directions: true,
            share_weights: true,
        }
    }
}

impl ShiftConvConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.maxdisp >= 1, "maxdisp must be >= 1");
        ensure!(self.clue_filters >= 1, "clue_filters must be >= 1");
        Ok(())
    }

    /// Displacements in channel-group order: `+0, +1, .., +maxdisp`, then
    /// `-1, .., -maxdisp` when both directions are enabled. Group `k` of the
    /// output always belongs to `scales()[k]`.
    pub fn scales(&self) -> Vec<isize> {
        let m = self.maxdisp as isize;
        let mut s: Vec<isize> = (0..=m).collect();
        if self.both_directions {
            s.extend((1..=m).map(|d| -d));
        }
        s
    }

    pub fn scale_count(&self) -> usize {
        if self.both_directions {
            2 * self.maxdisp + 1
        } else {
            self.maxdisp + 1
        }
    }

    pub fn out_channels(&self) -> usize {
        self.clue_filters * self.scale_count()
    }

    /// `(weight shape, bias length)` of each filter bank for `c` input
    /// channels per view.
    pub fn bank_shapes(&self, c: usize) -> Vec<([usize; 4], usize)> {
        let f = self.clue_filters;
        let s = self.scale_count();
        match self.variant {
            ShiftVariant::ConvPerScaleThenConcat if self.share_weights => {
                vec![([f, 2 * c, 3, 3], f)]
            }
            ShiftVariant::ConvPerScaleThenConcat => vec![([f, 2 * c, 3, 3], f); s],
            ShiftVariant::ConcatAllThenConv => vec![([f * s, 2 * c * s, 3, 3], f * s)],
        }
    }
}

/// A convolution filter bank recorded in a graph.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub w: Var,
    pub b: Option<Var>,
}

impl ConvParams {
    /// 3x3 "same" convolution followed by the leaky activation.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.apply_linear(g, x)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }

    pub fn apply_linear<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let k = g.shape(self.w).0[2];
        g.conv2d(x, self.w, self.b, 1, k / 2)
    }
}

/// Pairs one view, shifted by `d`, with the other.
///
/// `d >= 0`: the left map sliced from column `d` (zero fill on the right)
/// followed by the right map. `d < 0`: the right map shifted right by `|d|`
/// (zero fill on the left) followed by the left map. Output is `(N, 2C, H, W)`.
pub fn shift_concat<T: Scalar>(g: &mut Graph<T>, left: Var, right: Var, d: isize) -> Result<Var> {
    let (ls, rs) = (g.shape(left), g.shape(right));
    ensure!(ls == rs, "shift_concat: left {ls} and right {rs} differ");
    if d >= 0 {
        let shifted = g.hslice_pad(left, d)?;
        g.concat_channels(&[shifted, right])
    } else {
        let shifted = g.hslice_pad(right, d)?;
        g.concat_channels(&[shifted, left])
    }
}

/// The shift convolution layer: `(N, C, H, W)` pair to `(N, F*S, H, W)`
/// matching-cost volume.
pub fn shift_conv_layer<T: Scalar>(
    g: &mut Graph<T>,
    left: Var,
    right: Var,
    cfg: &ShiftConvConfig,
    banks: &[ConvParams],
) -> Result<Var> {
    cfg.validate()?;
    let s = g.shape(left);
    ensure!(
        s == g.shape(right),
        "shift_conv_layer: left {s} and right {} differ",
        g.shape(right)
    );
    ensure!(
        cfg.maxdisp < s.w(),
        "shift_conv_layer: maxdisp {} must be < width {}",
        cfg.maxdisp,
        s.w()
    );
    let expected = cfg.bank_shapes(s.c());
    ensure!(
        banks.len() == expected.len(),
        "shift_conv_layer: {} filter banks given, {:?} needs {}",
        banks.len(),
        cfg.variant,
        expected.len()
    );
    for (i, (bank, (ws, bl))) in banks.iter().zip(&expected).enumerate() {
        ensure!(
            g.shape(bank.w).0 == *ws,
            "shift_conv_layer: bank {i} weight {} expected {:?}",
            g.shape(bank.w),
            ws
        );
        if let Some(b) = bank.b {
            ensure!(
                g.shape(b).numel() == *bl,
                "shift_conv_layer: bank {i} bias has {} entries, expected {bl}",
                g.shape(b).numel()
            );
        }
    }

    let scales = cfg.scales();
    let mut pairs = Vec::with_capacity(scales.len());
    for &d in &scales {
        pairs.push(shift_concat(g, left, right, d)?);
    }
    match cfg.variant {
        ShiftVariant::ConvPerScaleThenConcat => {
            let mut groups = Vec::with_capacity(pairs.len());
            for (k, &p) in pairs.iter().enumerate() {
                let bank = if cfg.share_weights { banks[0] } else { banks[k] };
                groups.push(bank.apply(g, p)?);
            }
            g.concat_channels(&groups)
        }
        ShiftVariant::ConcatAllThenConv => {
            let all = g.concat_channels(&pairs)?;
            banks[0].apply(g, all)
        }
    }
}

/// Per-pixel guided matching on the full-resolution images: for each
/// `delta` in [`REFINE_DELTAS`] the right image is warped by
/// `base_disp + delta`, paired with the left image and passed through one
/// shared conv bank; the branch outputs are summed.
pub fn auto_shift_conv<T: Scalar>(
    g: &mut Graph<T>,
    left_img: Var,
    right_img: Var,
    base_disp: &[&DisparityMap],
    bank: &ConvParams,
) -> Result<Var> {
    let s = g.shape(left_img);
    ensure!(
        s == g.shape(right_img),
        "auto_shift_conv: left {s} and right {} differ",
        g.shape(right_img)
    );
    for d in base_disp {
        ensure!(
            d.height == s.h() && d.width == s.w(),
            "auto_shift_conv: guide disparity {}x{} does not match images {}x{}",
            d.height,
            d.width,
            s.h(),
            s.w()
        );
    }
    let mut total: Option<Var> = None;
    for delta in REFINE_DELTAS {
        let shifted: Vec<DisparityMap> = base_disp
            .iter()
            .map(|m| DisparityMap {
                height: m.height,
                width: m.width,
                data: m.data.iter().map(|&v| v + delta as f32).collect(),
            })
            .collect();
        let refs: Vec<&DisparityMap> = shifted.iter().collect();
        let warped = g.warp_horizontal(right_img, &refs)?;
        let pair = g.concat_channels(&[warped, left_img])?;
        let branch = bank.apply(g, pair)?;
        total = Some(match total {
            None => branch,
            Some(t) => g.add(t, branch)?,
        });
    }
    Ok(total.expect("non-empty delta set"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn scale_order_and_counts() {
        let cfg = ShiftConvConfig {
            maxdisp: 3,
            ..Default::default()
        };
        assert_eq!(cfg.scales(), vec![0, 1, 2, 3, -1, -2, -3]);
        assert_eq!(cfg.scale_count(), 7);
        let one_way = ShiftConvConfig {
            both_directions: false,
            ..cfg
        };
        assert_eq!(one_way.scales(), vec![0, 1, 2, 3]);
        assert_eq!(one_way.scale_count(), 4);
    }

    #[test]
    fn shift_concat_definition() {
        let mut g = Graph::<f32>::new();
        let l = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = g.leaf(Tensor::full(Shape::new(1, 1, 1, 4), 9.0));
        let p = shift_concat(&mut g, l, r, 1).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0, 4.0, 0.0, 9.0, 9.0, 9.0, 9.0]);
        let p0 = shift_concat(&mut g, l, r, 0).unwrap();
        assert_eq!(g.value(p0).data(), &[1.0, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]);
        let n = shift_concat(&mut g, l, r, -1).unwrap();
        assert_eq!(g.value(n).data(), &[0.0, 9.0, 9.0, 9.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(shift_concat(&mut g, l, r, 4).is_err());
    }

    #[test]
    fn shift_conv_layer_rejects_wrong_bank() {
        let mut g = Graph::<f32>::new();
        let cfg = ShiftConvConfig {
            maxdisp: 2,
            clue_filters: 4,
            ..Default::default()
        };
        let l = g.leaf(Tensor::zeros(Shape::new(1, 3, 4, 8)));
        let w = g.leaf(Tensor::zeros(Shape::new(4, 3, 3, 3)));
        let err = shift_conv_layer(&mut g, l, l, &cfg, &[ConvParams { w, b: None }]).unwrap_err();
        assert!(err.to_string().contains("bank 0"), "{err}");
        assert!(shift_conv_layer(&mut g, l, l, &cfg, &[]).is_err());
    }

    #[test]
    fn correlation_dot_product() {
        let mut g = Graph::<f32>::new();
        let l = g.leaf(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![3.0, 4.0]).unwrap());
        let r = g.leaf(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap());
        let c = g.correlation_1d(l, r, 0).unwrap();
        assert_eq!(g.value(c).data(), &[5.5]);
        assert!(g.correlation_1d(l, r, 1).is_err());
    }

    #[test]
    fn warp_constant_matches_hslice() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 2, 2, 4), data).unwrap());
        let zero = DisparityMap::constant(2, 4, 0.0);
        let id = g.warp_horizontal(x, &[&zero]).unwrap();
        assert_eq!(g.value(id).data(), g.value(x).data());
        let two = DisparityMap::constant(2, 4, 2.0);
        let w = g.warp_horizontal(x, &[&two]).unwrap();
        let h = g.hslice_pad(x, -2).unwrap();
        assert_eq!(g.value(w).data(), g.value(h).data());
        // 1.5 rounds away from zero to 2
        let half = DisparityMap::constant(2, 4, 1.5);
        let wh = g.warp_horizontal(x, &[&half]).unwrap();
        assert_eq!(g.value(wh).data(), g.value(h).data());
        let bad = DisparityMap::constant(3, 4, 0.0);
        assert!(g.warp_horizontal(x, &[&bad]).is_err());
    }
}
