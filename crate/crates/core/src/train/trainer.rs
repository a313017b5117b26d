use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{resize_disparity, StereoSample};
use crate::disparity::DisparityMap;
use crate::error::{ensure, Error, Result};
use crate::losses::{epe, loss1, loss2};
use crate::network::{forward_full, Network};
use crate::tensor::{Shape, Tensor};

use super::checkpoint::Checkpoint;
use super::optim::{lr_schedule, Adam};
use super::TrainConfig;

/// One progress record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLine {
    /// Completed iterations.
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    /// Training-batch EPE of the stage's output map.
    pub epe: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} lr={:e} loss={:.6} epe={:.4}",
            self.iter, self.lr, self.loss, self.epe
        )
    }
}

/// Permutation of `0..n` used for `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Dataset index for batch slot `slot` of iteration `iter`. The dataset is
/// walked epoch by epoch, so it never runs out.
pub fn sample_index(seed: u64, iter: u64, slot: usize, batch: usize, n: usize) -> usize {
    let k = iter * batch as u64 + slot as u64;
    let (epoch, pos) = (k / n as u64, (k % n as u64) as usize);
    epoch_order(seed, epoch, n)[pos]
}

/// Stacks same-sized images along the batch axis.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("stack_images: empty batch"))?
        .shape();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for t in images {
        let s = t.shape();
        ensure!(
            s.n() == 1 && s.c() == first.c() && s.h() == first.h() && s.w() == first.w(),
            "stack_images: {s} does not match {first}"
        );
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(images.len(), first.c(), first.h(), first.w()), data)
}

/// Whether a parameter is updated in `stage`. Stage 1 trains neither the
/// refinement head nor the small-map head, which its loss does not see.
pub fn trains_in_stage(name: &str, stage: u8) -> bool {
    stage == 2 || !(name.starts_with("refine.") || name.starts_with("decode.small."))
}

/// Mutable training state: network, optimizer and iteration counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network<f32>,
    pub adam: Adam,
    /// Completed iterations over all stages.
    pub iteration: u64,
    pub stage: u8,
}

impl Trainer {
    /// Fresh initialisation from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::new(cfg.net.clone(), &mut rng)?;
        Ok(Trainer {
            cfg,
            net,
            adam: Adam::new(),
            iteration: 0,
            stage: 1,
        })
    }

    pub fn from_checkpoint(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let stored = ckpt.network_config()?;
        if stored != cfg.net {
            return Err(Error::Config(format!(
                "checkpoint network {stored:?} does not match configured network {:?}",
                cfg.net
            )));
        }
        let params = ckpt.params()?;
        let adam = ckpt.optimizer(&params)?;
        Ok(Trainer {
            net: Network::from_params(cfg.net.clone(), params)?,
            cfg,
            adam,
            iteration: ckpt.iteration,
            stage: ckpt.stage,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(self.iteration, self.stage, &self.net.cfg, &self.net.params, &self.adam)
    }

    /// Iteration count at which `stage` ends.
    pub fn stage_end(&self, stage: u8) -> u64 {
        match stage {
            1 => self.cfg.stage1_iters,
            _ => self.cfg.stage1_iters + self.cfg.stage2_iters,
        }
    }

    /// One forward/backward/update on the batch chosen for the current
    /// iteration.
    pub fn step(&mut self, stage: u8, samples: &[StereoSample]) -> Result<LogLine> {
        ensure!(stage == 1 || stage == 2, "stage must be 1 or 2, got {stage}");
        ensure!(!samples.is_empty(), "training set is empty");
        let b = self.cfg.batch_size;
        let batch: Vec<&StereoSample> = (0..b)
            .map(|j| &samples[sample_index(self.cfg.seed, self.iteration, j, b, samples.len())])
            .collect();
        let left = stack_images(&batch.iter().map(|s| &s.left).collect::<Vec<_>>())?;
        let right = stack_images(&batch.iter().map(|s| &s.right).collect::<Vec<_>>())?;
        let gts: Vec<&DisparityMap> = batch.iter().map(|s| &s.gt_disp).collect();

        let mut g = Graph::new();
        let p = self.net.params.bind(&mut g, true);
        let l = g.constant(left);
        let r = g.constant(right);
        let mut ncfg = self.net.cfg.clone();
        ncfg.refine_enabled = stage == 2;
        let out = forward_full(&mut g, &p, &ncfg, l, r)?;
        let weights = p.weights_where(|n| trains_in_stage(n, stage));
        let (loss, pred) = if stage == 1 {
            (loss1(&mut g, out.coarse, &gts, &weights, &self.cfg.loss)?, out.coarse)
        } else {
            let s = ncfg.small_map_scale;
            let small: Vec<DisparityMap> = gts
                .iter()
                .map(|d| resize_disparity(d, d.height / s, d.width / s))
                .collect::<Result<_>>()?;
            let small_refs: Vec<&DisparityMap> = small.iter().collect();
            let refined = out.refined.expect("refine enabled in stage 2");
            let loss = loss2(&mut g, refined, &gts, out.small, &small_refs, &weights, &self.cfg.loss)?;
            (loss, refined)
        };
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {}",
                self.iteration
            )));
        }
        let mut batch_epe = 0.0;
        for (i, gt) in gts.iter().enumerate() {
            batch_epe += epe(&DisparityMap::from_tensor(g.value(pred), i)?, gt, None)?;
        }
        batch_epe /= b as f64;

        g.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, &var) in p.iter() {
            if trains_in_stage(name, stage) {
                let gv = match g.grad(var) {
                    Some(gv) => gv.to_vec(),
                    None => vec![0.0; g.shape(var).numel()],
                };
                grads.insert(name.clone(), gv);
            }
        }
        let lr = lr_schedule(self.iteration, &self.cfg);
        self.adam
            .step(&mut self.net.params, &grads, lr)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("iteration {}: {m}", self.iteration)),
                other => other,
            })?;
        self.iteration += 1;
        self.stage = stage;
        Ok(LogLine {
            iter: self.iteration,
            lr,
            loss: loss_value,
            epe: batch_epe,
        })
    }

    /// Steps until the iteration counter reaches the end of `stage`.
    /// `on_log` sees every `log_every`-th line and `on_checkpoint` every
    /// `checkpoint_every`-th state.
    pub fn run_stage(
        &mut self,
        stage: u8,
        samples: &[StereoSample],
        mut on_log: impl FnMut(&LogLine),
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<Vec<LogLine>> {
        let end = self.stage_end(stage);
        let mut lines = Vec::new();
        while self.iteration < end {
            let line = self.step(stage, samples)?;
            let k = self.cfg.log_every;
            if k > 0 && (line.iter % k == 0 || line.iter == end) {
                on_log(&line);
            }
            let c = self.cfg.checkpoint_every;
            if c > 0 && line.iter % c == 0 {
                on_checkpoint(&self.checkpoint()?)?;
            }
            lines.push(line);
        }
        self.stage = stage;
        Ok(lines)
    }
}
