//! The full stereo network: shared-weight feature extraction, cost volume,
//! encoder, six-block decoder with skip connections and the guided
//! refinement head.
//!
//! Parameter names are stable and double as checkpoint keys:
//!
//! | prefix            | layers                                          |
//! |-------------------|-------------------------------------------------|
//! | `feat.conv1..4`   | feature extraction, shared by both views        |
//! | `shift.bank{k}`   | matching-clue conv bank(s)                      |
//! | `encode.redir`    | left-feature redirection conv                   |
//! | `encode.conv5..8` | encoder convs, each followed by 2x2 max pooling |
//! | `decode.up{i}`    | transposed convs, `i` in `1..=6`                |
//! | `decode.smooth{i}`| smoothing convs after each skip concat          |
//! | `decode.small`    | small-map disparity head (linear)               |
//! | `decode.coarse`   | full-resolution disparity head (linear)         |
//! | `refine.*`        | auto-shift match bank and the 16/32/1 head      |

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::disparity::DisparityMap;
use crate::error::{ensure, Error, Result};
use crate::matching::{
    self, ConvParams, ShiftConvConfig, LEAKY_SLOPE, REFINE_MATCH_FILTERS,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

/// Which operator builds the matching-cost volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostVolumeKind {
    ShiftConv,
    Correlation,
}

impl fmt::Display for CostVolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostVolumeKind::ShiftConv => "shiftconv",
            CostVolumeKind::Correlation => "corr",
        })
    }
}

impl FromStr for CostVolumeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shiftconv" => Ok(CostVolumeKind::ShiftConv),
            "corr" | "correlation" => Ok(CostVolumeKind::Correlation),
            _ => Err(Error::Config(format!("unknown cost volume `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub image_channels: usize,
    pub feat_channels: [usize; 4],
    pub redir_channels: usize,
    pub encode_channels: [usize; 4],
    pub decode_channels: [usize; 6],
    pub shift: ShiftConvConfig,
    pub cost_volume: CostVolumeKind,
    pub refine_enabled: bool,
    pub small_map_scale: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_channels: 3,
            feat_channels: [32, 32, 64, 64],
            redir_channels: 32,
            encode_channels: [128, 256, 512, 512],
            decode_channels: [256, 128, 64, 32, 16, 16],
            shift: ShiftConvConfig::default(),
            cost_volume: CostVolumeKind::ShiftConv,
            refine_enabled: true,
            small_map_scale: 4,
        }
    }
}

/// Total downsampling between the image and the bottleneck.
pub const BOTTLENECK_FACTOR: usize = 64;

impl NetworkConfig {
    /// Narrow widths that train on one CPU core in minutes.
    pub fn desk() -> Self {
        NetworkConfig {
            image_channels: 3,
            feat_channels: [16, 16, 32, 32],
            redir_channels: 16,
            encode_channels: [64, 64, 96, 96],
            decode_channels: [96, 64, 32, 32, 16, 16],
            shift: ShiftConvConfig {
                maxdisp: 8,
                clue_filters: 8,
                ..ShiftConvConfig::default()
            },
            ..NetworkConfig::default()
        }
    }

    /// Smallest sensible widths, for gradient checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            image_channels: 1,
            feat_channels: [2, 2, 2, 2],
            redir_channels: 2,
            encode_channels: [2, 2, 2, 2],
            decode_channels: [2, 2, 2, 2, 2, 2],
            shift: ShiftConvConfig {
                maxdisp: 2,
                clue_filters: 2,
                ..ShiftConvConfig::default()
            },
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        ensure!(self.image_channels >= 1, "image_channels must be >= 1");
        ensure!(
            self.small_map_scale.is_power_of_two() && self.small_map_scale <= 32,
            "small_map_scale {} must be a power of two in 1..=32",
            self.small_map_scale
        );
        let all = self
            .feat_channels
            .iter()
            .chain(&self.encode_channels)
            .chain(&self.decode_channels)
            .chain(std::iter::once(&self.redir_channels));
        for &c in all {
            ensure!(c >= 1, "channel widths must be >= 1");
        }
        Ok(())
    }

    pub fn cost_volume_channels(&self) -> usize {
        match self.cost_volume {
            CostVolumeKind::ShiftConv => self.shift.out_channels(),
            CostVolumeKind::Correlation => self.shift.maxdisp + 1,
        }
    }

    /// Decoder block (0-based) whose output sits at `1 / small_map_scale`.
    pub fn small_block(&self) -> usize {
        5 - self.small_map_scale.trailing_zeros() as usize
    }

    /// Channels of the skip tensor concatenated in decoder block `i`.
    fn skip_channels(&self, i: usize) -> usize {
        match i {
            0 => self.encode_channels[2],
            1 => self.encode_channels[1],
            2 => self.encode_channels[0],
            3 => self.feat_channels[3],
            4 => self.feat_channels[3],
            _ => self.image_channels,
        }
    }

    /// Every parameter with its shape and initialisation fan-in.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let s = &mut specs;
        let f = self.feat_channels;
        push_conv(s, "feat.conv1", f[0], self.image_channels);
        push_conv(s, "feat.conv2", f[1], f[0]);
        push_conv(s, "feat.conv3", f[2], f[1]);
        push_conv(s, "feat.conv4", f[3], f[2]);

        if self.cost_volume == CostVolumeKind::ShiftConv {
            for (k, (ws, bl)) in self.shift.bank_shapes(f[3]).into_iter().enumerate() {
                conv_custom(s, &format!("shift.bank{k}"), ws, bl);
            }
        }

        let e = self.encode_channels;
        push_conv(s, "encode.redir", self.redir_channels, f[3]);
        push_conv(s, "encode.conv5", e[0], self.cost_volume_channels() + self.redir_channels);
        push_conv(s, "encode.conv6", e[1], e[0]);
        push_conv(s, "encode.conv7", e[2], e[1]);
        push_conv(s, "encode.conv8", e[3], e[2]);

        let mut ch = e[3];
        for i in 0..6 {
            let dc = self.decode_channels[i];
            // stride-2 4x4 deconv: each output sees (4/2)^2 taps per input channel
            s.push(ParamSpec::weight(format!("decode.up{}.w", i + 1), [ch, dc, 4, 4], ch * 4));
            s.push(ParamSpec::bias(format!("decode.up{}.b", i + 1), dc));
            push_conv(s, &format!("decode.smooth{}", i + 1), dc, dc + self.skip_channels(i));
            ch = dc;
        }
        push_conv(s, "decode.small", 1, self.decode_channels[self.small_block()]);
        push_conv(s, "decode.coarse", 1, self.decode_channels[5]);

        push_conv(s, "refine.match", REFINE_MATCH_FILTERS, 2 * self.image_channels);
        push_conv(s, "refine.conv1", 16, REFINE_MATCH_FILTERS + 1);
        push_conv(s, "refine.conv2", 32, 16);
        push_conv(s, "refine.conv3", 1, 32);
        specs
    }

    pub fn shapes(&self) -> Vec<(String, Shape)> {
        self.layout()
            .into_iter()
            .map(|p| (p.name, Shape(p.shape)))
            .collect()
    }
}

fn push_conv(specs: &mut Vec<ParamSpec>, name: &str, co: usize, ci: usize) {
    conv_custom(specs, name, [co, ci, 3, 3], co);
}

fn conv_custom(specs: &mut Vec<ParamSpec>, name: &str, ws: [usize; 4], bl: usize) {
    let fan_in = ws[1] * ws[2] * ws[3];
    specs.push(ParamSpec::weight(format!("{name}.w"), ws, fan_in));
    specs.push(ParamSpec::bias(format!("{name}.b"), bl));
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    /// `None` for biases.
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    fn weight(name: String, shape: [usize; 4], fan_in: usize) -> Self {
        ParamSpec {
            name,
            shape,
            fan_in: Some(fan_in),
        }
    }
    fn bias(name: String, len: usize) -> Self {
        ParamSpec {
            name,
            shape: [len, 1, 1, 1],
            fan_in: None,
        }
    }
}

/// Gaussian weights with variance `2 / fan_in`, zero biases.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for spec in cfg.layout() {
        let shape = Shape(spec.shape);
        let t = match spec.fan_in {
            Some(fan_in) => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
            None => Tensor::zeros(shape),
        };
        store.insert(spec.name, t);
    }
    store
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Full-resolution disparity from the decoder.
    pub coarse: Var,
    /// Disparity at `1 / small_map_scale`, in small-map pixel units.
    pub small: Var,
    pub refined: Option<Var>,
    pub cost_volume: Var,
    pub left_feat: Var,
    pub right_feat: Var,
    pub skip_half: Var,
    pub skip_quarter: Var,
    pub encoder_skips: [Var; 3],
}

/// Outputs of [`feature_extract`].
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// `/4` feature map.
    pub feat: Var,
    /// Last `/2` activation.
    pub skip_half: Var,
    /// `/4` activation (the pooled feature map).
    pub skip_quarter: Var,
}

fn bank(p: &Bound, name: &str) -> Result<ConvParams> {
    Ok(ConvParams {
        w: p.var(&format!("{name}.w"))?,
        b: p.opt(&format!("{name}.b")),
    })
}

/// conv1 -> conv2 -> pool -> conv3 -> conv4 -> pool.
pub fn feature_extract<T: Scalar>(g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Features> {
    let s = g.shape(image);
    ensure!(
        s.h() % 4 == 0 && s.w() % 4 == 0,
        "feature_extract: extents {}x{} must be divisible by 4",
        s.h(),
        s.w()
    );
    let x = bank(p, "feat.conv1")?.apply(g, image)?;
    let x = bank(p, "feat.conv2")?.apply(g, x)?;
    let x = g.maxpool2(x)?;
    let x = bank(p, "feat.conv3")?.apply(g, x)?;
    let half = bank(p, "feat.conv4")?.apply(g, x)?;
    let feat = g.maxpool2(half)?;
    Ok(Features {
        feat,
        skip_half: half,
        skip_quarter: feat,
    })
}

/// Builds the matching-cost volume from the two `/4` feature maps.
pub fn cost_volume<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &NetworkConfig,
    left: Var,
    right: Var,
) -> Result<Var> {
    match cfg.cost_volume {
        CostVolumeKind::ShiftConv => {
            let banks = (0..cfg.shift.bank_shapes(1).len())
                .map(|k| bank(p, &format!("shift.bank{k}")))
                .collect::<Result<Vec<_>>>()?;
            matching::shift_conv_layer(g, left, right, &cfg.shift, &banks)
        }
        CostVolumeKind::Correlation => g.correlation_1d(left, right, cfg.shift.maxdisp),
    }
}

/// Returns the bottleneck and the pooled activations at `/8, /16, /32`.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cost_volume: Var,
    left_feat: Var,
) -> Result<(Var, [Var; 3])> {
    let (cs, fs) = (g.shape(cost_volume), g.shape(left_feat));
    ensure!(
        cs.h() == fs.h() && cs.w() == fs.w() && cs.n() == fs.n(),
        "encode: cost volume {cs} and left features {fs} differ spatially"
    );
    ensure!(
        cs.h() % 16 == 0 && cs.w() % 16 == 0,
        "encode: extents {}x{} must be divisible by 16",
        cs.h(),
        cs.w()
    );
    let redir = bank(p, "encode.redir")?.apply(g, left_feat)?;
    let mut x = g.concat_channels(&[cost_volume, redir])?;
    let mut skips = Vec::with_capacity(3);
    for name in ["encode.conv5", "encode.conv6", "encode.conv7", "encode.conv8"] {
        let y = bank(p, name)?.apply(g, x)?;
        x = g.maxpool2(y)?;
        skips.push(x);
    }
    skips.pop();
    Ok((x, [skips[0], skips[1], skips[2]]))
}

/// Six upsampling blocks. Returns `(final state, coarse, small)`.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &NetworkConfig,
    bottleneck: Var,
    encoder_skips: [Var; 3],
    skip_quarter: Var,
    skip_half: Var,
    left_image: Var,
) -> Result<(Var, Var, Var)> {
    let skips = [
        encoder_skips[2],
        encoder_skips[1],
        encoder_skips[0],
        skip_quarter,
        skip_half,
        left_image,
    ];
    let mut x = bottleneck;
    let mut small = None;
    for (i, &skip) in skips.iter().enumerate() {
        let up = bank(p, &format!("decode.up{}", i + 1))?;
        let u = g.conv_transpose2d(x, up.w, up.b, 2, 1)?;
        let u = g.leaky_relu(u, LEAKY_SLOPE);
        let (us, ss) = (g.shape(u), g.shape(skip));
        ensure!(
            us.h() == ss.h() && us.w() == ss.w(),
            "decode: block {} upsampled to {us} but skip is {ss}",
            i + 1
        );
        let cat = g.concat_channels(&[u, skip])?;
        x = bank(p, &format!("decode.smooth{}", i + 1))?.apply(g, cat)?;
        if i == cfg.small_block() {
            small = Some(bank(p, "decode.small")?.apply_linear(g, x)?);
        }
    }
    let coarse = bank(p, "decode.coarse")?.apply_linear(g, x)?;
    Ok((x, coarse, small.expect("small block within 0..6")))
}

/// Nearest upsampling of the small map by `scale`, converted to full-image
/// pixel units.
pub fn guide_disparity<T: Scalar>(small: &Tensor<T>, scale: usize) -> Result<Vec<DisparityMap>> {
    let s = small.shape();
    let (h, w) = (s.h() * scale, s.w() * scale);
    (0..s.n())
        .map(|n| {
            let m = DisparityMap::from_tensor(small, n)?;
            let mut data = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    data.push(m.at(y / scale, x / scale) * scale as f32);
                }
            }
            DisparityMap::new(h, w, data)
        })
        .collect()
}

/// Auto-shift matching on the images guided by the small map, concatenated
/// with the coarse map and passed through the 16/32/1 head.
pub fn refine_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &NetworkConfig,
    coarse: Var,
    small: Option<Var>,
    left_img: Var,
    right_img: Var,
) -> Result<Var> {
    let small = small.ok_or_else(|| Error::contract("refine_forward: small disparity missing"))?;
    let guides = guide_disparity(g.value(small), cfg.small_map_scale)?;
    let refs: Vec<&DisparityMap> = guides.iter().collect();
    let matching = matching::auto_shift_conv(g, left_img, right_img, &refs, &bank(p, "refine.match")?)?;
    let x = g.concat_channels(&[matching, coarse])?;
    let x = bank(p, "refine.conv1")?.apply(g, x)?;
    let x = bank(p, "refine.conv2")?.apply(g, x)?;
    bank(p, "refine.conv3")?.apply_linear(g, x)
}

/// End-to-end forward pass for a batch of stereo pairs.
pub fn forward_full<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &NetworkConfig,
    left: Var,
    right: Var,
) -> Result<ForwardOutputs> {
    cfg.validate()?;
    let s = g.shape(left);
    ensure!(
        s == g.shape(right),
        "forward_full: left {s} and right {} differ",
        g.shape(right)
    );
    ensure!(
        s.c() == cfg.image_channels,
        "forward_full: images have {} channels, config expects {}",
        s.c(),
        cfg.image_channels
    );
    ensure!(
        s.h() % BOTTLENECK_FACTOR == 0 && s.w() % BOTTLENECK_FACTOR == 0,
        "forward_full: extents {}x{} must be divisible by {BOTTLENECK_FACTOR}",
        s.h(),
        s.w()
    );
    let lf = feature_extract(g, p, left)?;
    let rf = feature_extract(g, p, right)?;
    let cv = cost_volume(g, p, cfg, lf.feat, rf.feat)?;
    let (bottleneck, enc) = encode(g, p, cv, lf.feat)?;
    let (_, coarse, small) = decode(g, p, cfg, bottleneck, enc, lf.skip_quarter, lf.skip_half, left)?;
    let refined = if cfg.refine_enabled {
        Some(refine_forward(g, p, cfg, coarse, Some(small), left, right)?)
    } else {
        None
    };
    Ok(ForwardOutputs {
        coarse,
        small,
        refined,
        cost_volume: cv,
        left_feat: lf.feat,
        right_feat: rf.feat,
        skip_half: lf.skip_half,
        skip_quarter: lf.skip_quarter,
        encoder_skips: enc,
    })
}

/// Stateless wrapper bundling a config with its parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub cfg: NetworkConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(cfg: NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, rng);
        Ok(Network { cfg, params })
    }

    pub fn from_params(cfg: NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&cfg.shapes())?;
        Ok(Network { cfg, params })
    }

    /// Forward without gradient tracking. Returns the graph so callers can
    /// read any output.
    pub fn infer(&self, left: Tensor<T>, right: Tensor<T>) -> Result<(Graph<T>, ForwardOutputs)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let l = g.constant(left);
        let r = g.constant(right);
        let out = forward_full(&mut g, &p, &self.cfg, l, r)?;
        Ok((g, out))
    }

    /// Best available prediction (refined when enabled) for batch item 0.
    pub fn predict(&self, left: Tensor<T>, right: Tensor<T>) -> Result<DisparityMap> {
        let (g, out) = self.infer(left, right)?;
        DisparityMap::from_tensor(g.value(out.refined.unwrap_or(out.coarse)), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_names_are_unique() {
        let cfg = NetworkConfig::desk();
        let names: Vec<String> = cfg.layout().into_iter().map(|p| p.name).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }

    #[test]
    fn small_block_tracks_scale() {
        let mut cfg = NetworkConfig::tiny();
        assert_eq!(cfg.small_block(), 3);
        cfg.small_map_scale = 1;
        assert_eq!(cfg.small_block(), 5);
        cfg.small_map_scale = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shared_bank_count_independent_of_maxdisp() {
        let mut cfg = NetworkConfig::tiny();
        let count = |c: &NetworkConfig| {
            c.layout()
                .iter()
                .filter(|p| p.name.starts_with("shift."))
                .map(|p| p.shape.iter().product::<usize>())
                .sum::<usize>()
        };
        let a = count(&cfg);
        cfg.shift.maxdisp = 5;
        assert_eq!(count(&cfg), a);
        cfg.shift.variant = matching::ShiftVariant::ConcatAllThenConv;
        let b = count(&cfg);
        cfg.shift.maxdisp = 2;
        assert!(count(&cfg) < b);
    }

    #[test]
    fn tiny_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::<f32>::new(NetworkConfig::tiny(), &mut rng).unwrap();
        let l = Tensor::uniform(Shape::new(1, 1, 64, 128), 0.0, 1.0, &mut rng);
        let r = Tensor::uniform(Shape::new(1, 1, 64, 128), 0.0, 1.0, &mut rng);
        let (g, out) = net.infer(l, r).unwrap();
        assert_eq!(g.shape(out.coarse), Shape::new(1, 1, 64, 128));
        assert_eq!(g.shape(out.small), Shape::new(1, 1, 16, 32));
        assert_eq!(g.shape(out.refined.unwrap()), Shape::new(1, 1, 64, 128));
        assert_eq!(g.shape(out.left_feat), Shape::new(1, 2, 16, 32));
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::<f32>::new(NetworkConfig::tiny(), &mut rng).unwrap();
        let l = Tensor::zeros(Shape::new(1, 1, 64, 96));
        let err = net.infer(l.clone(), l).unwrap_err();
        assert!(err.to_string().contains("divisible by 64"), "{err}");
    }
}
