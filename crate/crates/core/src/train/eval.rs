use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::StereoSample;
use crate::disparity::DisparityMap;
use crate::error::{ensure, Result};
use crate::losses::{d1_rate, epe, D1_THRESHOLD};
use crate::matching::ShiftVariant;
use crate::network::{CostVolumeKind, Network};
use crate::tensor::{Shape, Tensor};

use super::trainer::Trainer;
use super::TrainConfig;

/// Warm-up forwards discarded before timing.
pub const WARMUP_RUNS: usize = 2;

/// Mean wall time in seconds of `reps` forwards after the warm-up runs.
pub fn time_forward(net: &Network<f32>, left: &Tensor<f32>, right: &Tensor<f32>, reps: usize) -> Result<f64> {
    ensure!(reps >= 1, "need at least one timed run");
    for _ in 0..WARMUP_RUNS {
        net.infer(left.clone(), right.clone())?;
    }
    let mut total = 0.0;
    for _ in 0..reps {
        let (l, r) = (left.clone(), right.clone());
        let t0 = Instant::now();
        let out = net.infer(l, r)?;
        total += t0.elapsed().as_secs_f64();
        drop(out);
    }
    Ok(total / reps as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub index: usize,
    pub epe: f64,
    /// Fraction of pixels off by more than the D1 threshold.
    pub d1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub mean_epe: f64,
    pub mean_d1: f64,
    /// Mean forward wall time in seconds.
    pub forward_secs: f64,
}

/// Scores `pred[i]` against `samples[i].gt_disp` over pixels with valid
/// ground truth.
pub fn score(preds: &[DisparityMap], samples: &[StereoSample]) -> Result<(Vec<SampleEval>, f64, f64)> {
    ensure!(
        !samples.is_empty() && preds.len() == samples.len(),
        "need one prediction per sample ({} vs {})",
        preds.len(),
        samples.len()
    );
    let rows: Vec<SampleEval> = preds
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(index, (p, s))| {
            Ok(SampleEval {
                index,
                epe: epe(p, &s.gt_disp, None)?,
                d1: d1_rate(p, &s.gt_disp, None, D1_THRESHOLD)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean_epe = rows.iter().map(|r| r.epe).sum::<f64>() / n;
    let mean_d1 = rows.iter().map(|r| r.d1).sum::<f64>() / n;
    Ok((rows, mean_epe, mean_d1))
}

/// EPE/D1 of the network's best output on every sample plus forward timing
/// on the first one. The network is only read.
pub fn evaluate(net: &Network<f32>, samples: &[StereoSample], timing_reps: usize) -> Result<EvalReport> {
    ensure!(!samples.is_empty(), "evaluation set is empty");
    let preds: Vec<DisparityMap> = samples
        .iter()
        .map(|s| net.predict(s.left.clone(), s.right.clone()))
        .collect::<Result<_>>()?;
    let (rows, mean_epe, mean_d1) = score(&preds, samples)?;
    let forward_secs = time_forward(net, &samples[0].left, &samples[0].right, timing_reps)?;
    Ok(EvalReport {
        samples: rows,
        mean_epe,
        mean_d1,
        forward_secs,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:>6}  {:>9}  {:>7}\n", "sample", "EPE", "D1 %");
        for r in &self.samples {
            let _ = writeln!(s, "{:>6}  {:>9.4}  {:>7.2}", r.index, r.epe, 100.0 * r.d1);
        }
        let _ = writeln!(s, "{:>6}  {:>9.4}  {:>7.2}", "mean", self.mean_epe, 100.0 * self.mean_d1);
        let _ = writeln!(s, "forward: {:.2} ms", 1e3 * self.forward_secs);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,epe,d1\n");
        for r in &self.samples {
            let _ = writeln!(s, "{},{},{}", r.index, r.epe, r.d1);
        }
        let _ = writeln!(s, "mean,{},{}", self.mean_epe, self.mean_d1);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `None` for the correlation baseline.
    pub variant: Option<ShiftVariant>,
    /// Matching-clue filters; 0 for the correlation baseline.
    pub filters: usize,
    pub iterations: u64,
    pub seed: u64,
    pub forward_secs: f64,
    pub epe: f64,
}

impl AblationRow {
    pub fn label(&self) -> String {
        match self.variant {
            Some(v) => v.to_string(),
            None => "correlation".to_string(),
        }
    }
}

pub const ABLATION_FILTERS: [usize; 3] = [8, 12, 16];

/// Network variants compared by the ablation, in report order.
pub fn ablation_matrix(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for variant in [ShiftVariant::ConvPerScaleThenConcat, ShiftVariant::ConcatAllThenConv] {
        for f in ABLATION_FILTERS {
            let mut c = base.clone();
            c.net.cost_volume = CostVolumeKind::ShiftConv;
            c.net.shift.variant = variant;
            c.net.shift.clue_filters = f;
            out.push(c);
        }
    }
    let mut c = base.clone();
    c.net.cost_volume = CostVolumeKind::Correlation;
    out.push(c);
    for c in &mut out {
        c.net.refine_enabled = false;
        c.stage1_iters = base.ablate_iters;
        c.checkpoint_every = 0;
    }
    out
}

/// Trains every matrix cell for `ablate_iters` stage-1 iterations from the
/// same seed on `train`, then scores the coarse map on `test`.
pub fn ablation_suite(
    cfg: &TrainConfig,
    train: &[StereoSample],
    test: &[StereoSample],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for c in ablation_matrix(cfg) {
        let mut t = Trainer::new(c.clone())?;
        t.run_stage(1, train, |_| {}, |_| Ok(()))?;
        let report = evaluate(&t.net, test, c.timing_reps)?;
        let row = AblationRow {
            variant: (c.net.cost_volume == CostVolumeKind::ShiftConv).then_some(c.net.shift.variant),
            filters: match c.net.cost_volume {
                CostVolumeKind::ShiftConv => c.net.shift.clue_filters,
                CostVolumeKind::Correlation => 0,
            },
            iterations: t.iteration,
            seed: c.seed,
            forward_secs: report.forward_secs,
            epe: report.mean_epe,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<18}  {:>7}  {:>10}  {:>8}\n",
        "variant", "filters", "time (ms)", "EPE"
    );
    for r in rows {
        let filters = if r.variant.is_some() { r.filters.to_string() } else { "-".into() };
        let _ = writeln!(
            s,
            "{:<18}  {:>7}  {:>10.2}  {:>8.4}",
            r.label(),
            filters,
            1e3 * r.forward_secs,
            r.epe
        );
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,filters,iterations,seed,time_s,epe\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.label(),
            r.filters,
            r.iterations,
            r.seed,
            r.forward_secs,
            r.epe
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub input: Shape,
    pub coarse: Shape,
    pub small: Shape,
    pub forward_secs: f64,
    pub reps: usize,
}

/// Times forwards of a freshly initialised network on random images of
/// `bench_height` x `bench_width`.
pub fn bench(cfg: &TrainConfig, reps: usize) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Network::<f32>::new(cfg.net.clone(), &mut rng)?;
    let shape = Shape::new(1, cfg.net.image_channels, cfg.bench_height, cfg.bench_width);
    let left = Tensor::uniform(shape, 0.0, 1.0, &mut rng);
    let right = Tensor::uniform(shape, 0.0, 1.0, &mut rng);
    let (g, out) = net.infer(left.clone(), right.clone())?;
    let (coarse, small) = (g.shape(out.coarse), g.shape(out.small));
    drop(g);
    let forward_secs = time_forward(&net, &left, &right, reps)?;
    Ok(BenchReport {
        input: shape,
        coarse,
        small,
        forward_secs,
        reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_zero() {
        let gt = DisparityMap::new(2, 2, vec![1.0, 2.0, f32::INFINITY, 4.0]).unwrap();
        let s = StereoSample {
            left: Tensor::zeros(Shape::new(1, 1, 2, 2)),
            right: Tensor::zeros(Shape::new(1, 1, 2, 2)),
            gt_disp: gt.clone(),
            visible: vec![true; 4],
        };
        let (rows, e, d) = score(&[gt], &[s]).unwrap();
        assert_eq!((rows[0].epe, e, d), (0.0, 0.0, 0.0));
    }

    #[test]
    fn matrix_has_seven_cells_with_shared_budget() {
        let cfg = TrainConfig::default();
        let m = ablation_matrix(&cfg);
        assert_eq!(m.len(), 7);
        assert!(m.iter().all(|c| c.seed == cfg.seed && c.stage1_iters == cfg.ablate_iters));
        assert_eq!(m[6].net.cost_volume, CostVolumeKind::Correlation);
    }
}
