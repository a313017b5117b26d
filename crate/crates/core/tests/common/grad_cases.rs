//! Gradient-check cases, one per differentiable operation. Each case
//! builds a random problem from `seed` and checks the gradient with respect
//! to every tensor input.

use rand::Rng;

use shiftconv::disparity::DisparityMap;
use shiftconv::losses::{loss1, loss2, LossConfig};
use shiftconv::matching::{auto_shift_conv, shift_concat, shift_conv_layer, ConvParams};
use shiftconv::network::{forward_full, init_params};
use shiftconv::{grad_check_smooth, GradCheck, Graph, NetworkConfig, ParamStore, Result, ShiftConvConfig};
use shiftconv::{ShiftVariant, Shape, Tensor, Var};

use super::{rand_t, random_coords, rng, weighted_sum};

pub const STEP: f64 = 1e-5;

pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> Result<Vec<GradCheck>>,
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Checks `f` with respect to each of `inputs` in turn, holding the others
/// constant.
fn each_input(inputs: &[Tensor<f64>], coords: Option<usize>, seed: u64, f: &Builder) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let pick = coords.map(|c| random_coords(inputs[k].shape().numel(), c, seed + k as u64));
        let r = grad_check_smooth(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { x } else { g.constant(t.clone()) })
                    .collect();
                f(g, &vars)
            },
            &inputs[k],
            STEP,
            pick.as_deref(),
        )?;
        out.push(r);
    }
    Ok(out)
}

fn conv2d(seed: u64) -> Result<Vec<GradCheck>> {
    let stride = 1 + (seed % 2) as usize;
    let inputs = [
        rand_t([2, 3, 6, 7], seed),
        rand_t([4, 3, 3, 3], seed + 1),
        rand_t([1, 4, 1, 1], seed + 2),
    ];
    each_input(&inputs, None, seed, &|g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
        weighted_sum(g, y, seed)
    })
}

fn conv_transpose2d(seed: u64) -> Result<Vec<GradCheck>> {
    let inputs = [
        rand_t([1, 3, 4, 5], seed),
        rand_t([3, 2, 4, 4], seed + 1),
        rand_t([1, 2, 1, 1], seed + 2),
    ];
    each_input(&inputs, None, seed, &|g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
        weighted_sum(g, y, seed)
    })
}

fn maxpool2d(seed: u64) -> Result<Vec<GradCheck>> {
    each_input(&[rand_t([2, 2, 6, 8], seed)], None, seed, &|g, v| {
        let y = g.maxpool2(v[0])?;
        weighted_sum(g, y, seed)
    })
}

fn leaky_relu(seed: u64) -> Result<Vec<GradCheck>> {
    each_input(&[rand_t([1, 2, 5, 5], seed)], None, seed, &|g, v| {
        let y = g.leaky_relu(v[0], 0.1);
        weighted_sum(g, y, seed)
    })
}

fn concat(seed: u64) -> Result<Vec<GradCheck>> {
    let inputs = [rand_t([1, 2, 3, 4], seed), rand_t([1, 3, 3, 4], seed + 1)];
    each_input(&inputs, None, seed, &|g, v| {
        let y = g.concat_channels(&[v[0], v[1]])?;
        weighted_sum(g, y, seed)
    })
}

fn hslice_pad(seed: u64) -> Result<Vec<GradCheck>> {
    let d = rng(seed).gen_range(-3isize..=3);
    each_input(&[rand_t([1, 2, 3, 6], seed)], None, seed, &|g, v| {
        let y = g.hslice_pad(v[0], d)?;
        weighted_sum(g, y, seed)
    })
}

fn shift_concat_case(seed: u64) -> Result<Vec<GradCheck>> {
    let d = rng(seed).gen_range(-3isize..=3);
    let inputs = [rand_t([1, 2, 3, 6], seed), rand_t([1, 2, 3, 6], seed + 1)];
    each_input(&inputs, None, seed, &|g, v| {
        let y = shift_concat(g, v[0], v[1], d)?;
        weighted_sum(g, y, seed)
    })
}

fn shift_conv(variant: ShiftVariant, seed: u64) -> Result<Vec<GradCheck>> {
    let cfg = ShiftConvConfig {
        maxdisp: 2,
        clue_filters: 3,
        variant,
        both_directions: true,
        share_weights: true,
    };
    let c = 2;
    let (ws, bl) = cfg.bank_shapes(c)[0];
    let inputs = [
        rand_t([1, c, 4, 8], seed),
        rand_t([1, c, 4, 8], seed + 1),
        rand_t(ws, seed + 2),
        rand_t([1, bl, 1, 1], seed + 3),
    ];
    each_input(&inputs, Some(40), seed, &|g, v| {
        let bank = ConvParams { w: v[2], b: Some(v[3]) };
        let y = shift_conv_layer(g, v[0], v[1], &cfg, &[bank])?;
        weighted_sum(g, y, seed)
    })
}

fn shift_conv_then_concat(seed: u64) -> Result<Vec<GradCheck>> {
    shift_conv(ShiftVariant::ConvPerScaleThenConcat, seed)
}

fn shift_concat_then_conv(seed: u64) -> Result<Vec<GradCheck>> {
    shift_conv(ShiftVariant::ConcatAllThenConv, seed)
}

fn correlation_1d(seed: u64) -> Result<Vec<GradCheck>> {
    let inputs = [rand_t([1, 3, 3, 8], seed), rand_t([1, 3, 3, 8], seed + 1)];
    each_input(&inputs, None, seed, &|g, v| {
        let y = g.correlation_1d(v[0], v[1], 3)?;
        weighted_sum(g, y, seed)
    })
}

fn random_guide(h: usize, w: usize, max: i32, seed: u64) -> DisparityMap {
    let mut r = rng(seed);
    DisparityMap::new(h, w, (0..h * w).map(|_| r.gen_range(0..=max) as f32).collect()).unwrap()
}

fn auto_shift(seed: u64) -> Result<Vec<GradCheck>> {
    let guide = random_guide(6, 10, 3, seed);
    let inputs = [
        rand_t([1, 1, 6, 10], seed),
        rand_t([1, 1, 6, 10], seed + 1),
        rand_t([8, 2, 3, 3], seed + 2),
        rand_t([1, 8, 1, 1], seed + 3),
    ];
    each_input(&inputs, Some(40), seed, &|g, v| {
        let bank = ConvParams { w: v[2], b: Some(v[3]) };
        let y = auto_shift_conv(g, v[0], v[1], &[&guide], &bank)?;
        weighted_sum(g, y, seed)
    })
}

fn smooth_l1(seed: u64) -> Result<Vec<GradCheck>> {
    let x = Tensor::uniform(Shape::new(1, 1, 4, 6), -3.0, 3.0, &mut rng(seed));
    each_input(&[x], None, seed, &|g, v| {
        let y = g.smooth_l1(v[0]);
        weighted_sum(g, y, seed)
    })
}

fn random_gt(h: usize, w: usize, seed: u64) -> DisparityMap {
    let mut r = rng(seed);
    let data = (0..h * w)
        .map(|i| if i % 7 == 3 { f32::NAN } else { r.gen_range(0.0..4.0) })
        .collect();
    DisparityMap::new(h, w, data).unwrap()
}

fn loss1_case(seed: u64) -> Result<Vec<GradCheck>> {
    let gt = random_gt(4, 6, seed);
    let pred = Tensor::uniform(Shape::new(1, 1, 4, 6), 0.0, 4.0, &mut rng(seed + 1));
    let cfg = LossConfig {
        alpha1: 0.3,
        ..LossConfig::default()
    };
    let inputs = [pred, rand_t([2, 1, 3, 3], seed + 2)];
    each_input(&inputs, None, seed, &|g, v| loss1(g, v[0], &[&gt], &[v[1]], &cfg))
}

fn loss2_case(seed: u64) -> Result<Vec<GradCheck>> {
    let gt = random_gt(4, 8, seed);
    let gt_small = random_gt(2, 4, seed + 1);
    let cfg = LossConfig {
        alpha2: 0.5,
        beta2: 0.3,
        ..LossConfig::default()
    };
    let inputs = [
        Tensor::uniform(Shape::new(1, 1, 4, 8), 0.0, 4.0, &mut rng(seed + 2)),
        Tensor::uniform(Shape::new(1, 1, 2, 4), 0.0, 4.0, &mut rng(seed + 3)),
        rand_t([2, 1, 3, 3], seed + 4),
    ];
    each_input(&inputs, None, seed, &|g, v| {
        loss2(g, v[0], &[&gt], v[1], &[&gt_small], &[v[2]], &cfg)
    })
}

/// Stage-2 loss of the tiny network, differentiated with respect to three
/// parameter tensors chosen by `seed` and the left image.
fn full_network(seed: u64) -> Result<Vec<GradCheck>> {
    let cfg = NetworkConfig::tiny();
    let params: ParamStore<f64> = init_params(&cfg, &mut rng(seed));
    let names: Vec<String> = cfg.layout().into_iter().map(|p| p.name).collect();
    let (h, w) = (64, 64);
    let left = Tensor::uniform(Shape::new(1, 1, h, w), 0.0, 1.0, &mut rng(seed + 1));
    let right = Tensor::uniform(Shape::new(1, 1, h, w), 0.0, 1.0, &mut rng(seed + 2));
    let s = cfg.small_map_scale;
    let gt = random_gt(h, w, seed + 3);
    let gt_small = random_gt(h / s, w / s, seed + 4);
    let loss_cfg = LossConfig::default();

    let mut out = Vec::new();
    let mut r = rng(seed + 5);
    let mut targets: Vec<Option<String>> = (0..3).map(|_| Some(names[r.gen_range(0..names.len())].clone())).collect();
    targets.push(None);
    for (k, target) in targets.into_iter().enumerate() {
        let point = match &target {
            Some(n) => params.get(n)?.clone(),
            None => left.clone(),
        };
        let coords = random_coords(point.shape().numel(), 6, seed + 10 + k as u64);
        let res = grad_check_smooth(
            |g, x| {
                let mut p = params.bind(g, false);
                let l = match &target {
                    Some(n) => {
                        p.insert(n.clone(), x);
                        g.constant(left.clone())
                    }
                    None => x,
                };
                let rt = g.constant(right.clone());
                let o = forward_full(g, &p, &cfg, l, rt)?;
                let refined = o.refined.expect("tiny config refines");
                loss2(g, refined, &[&gt], o.small, &[&gt_small], &p.weights(), &loss_cfg)
            },
            &point,
            STEP,
            Some(&coords),
        )?;
        out.push(res);
    }
    Ok(out)
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "conv2d", run: conv2d },
        Case { name: "transposed_conv2d", run: conv_transpose2d },
        Case { name: "maxpool2d", run: maxpool2d },
        Case { name: "leaky_relu", run: leaky_relu },
        Case { name: "concat", run: concat },
        Case { name: "hslice_pad", run: hslice_pad },
        Case { name: "shift_concat", run: shift_concat_case },
        Case { name: "shift_conv_layer/conv-then-concat", run: shift_conv_then_concat },
        Case { name: "shift_conv_layer/concat-then-conv", run: shift_concat_then_conv },
        Case { name: "correlation_1d", run: correlation_1d },
        Case { name: "auto_shift_conv", run: auto_shift },
        Case { name: "smooth_l1", run: smooth_l1 },
        Case { name: "loss1", run: loss1_case },
        Case { name: "loss2", run: loss2_case },
        Case { name: "full_network", run: full_network },
    ]
}

/// Worst relative error over the checks of one case, plus how many
/// coordinates were compared and excluded.
pub fn summarize(checks: &[GradCheck]) -> (f64, usize, usize) {
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let checked = checks.iter().map(|c| c.checked).sum();
    let excluded = checks.iter().map(|c| c.excluded).sum();
    (worst, checked, excluded)
}
