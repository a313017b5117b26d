//! Flat `key = value` configuration files.

use std::path::PathBuf;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{ensure, Error, Result};
use crate::losses::LossConfig;
use crate::network::NetworkConfig;

/// Where training and evaluation samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Dir(PathBuf),
    /// `count` generator samples with seeds `synth.seed + i`.
    Synth { cfg: SynthConfig, count: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Iterations at `base_lr` before halving starts.
    pub warm_iters: u64,
    /// Iterations between halvings.
    pub decay_period: u64,
    pub lr_floor: f64,
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: u64,
    /// Periodic checkpoint interval; 0 disables.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    pub loss: LossConfig,
    pub net: NetworkConfig,
    pub data: DataSource,
    /// Stage-1 iterations per ablation row.
    pub ablate_iters: u64,
    pub bench_height: usize,
    pub bench_width: usize,
    /// Timed forwards after the two warm-up runs.
    pub timing_reps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2e-4,
            warm_iters: 100_000,
            decay_period: 50_000,
            lr_floor: 3e-5,
            stage1_iters: 2_000,
            stage2_iters: 500,
            batch_size: 1,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs"),
            loss: LossConfig::default(),
            net: NetworkConfig::desk(),
            data: DataSource::Synth {
                cfg: SynthConfig::default(),
                count: 4,
            },
            ablate_iters: 200,
            bench_height: 384,
            bench_width: 768,
            timing_reps: 10,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value `{v}` for `{key}`")))
}

fn parse_list<const N: usize>(line: usize, key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v
        .split(',')
        .map(|s| parse(line, key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("line {line}: `{key}` needs exactly {N} values")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: `{key}` expects a boolean, got `{v}`"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr_floor > 0.0 && self.base_lr >= self.lr_floor,
            "need base_lr >= lr_floor > 0"
        );
        ensure!(self.decay_period > 0, "decay_period must be positive");
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(self.timing_reps >= 10, "timing_reps must be >= 10");
        self.loss.validate()?;
        self.net.validate()?;
        if let DataSource::Synth { cfg, count } = &self.data {
            cfg.validate()?;
            ensure!(*count >= 1, "synth_count must be >= 1");
            ensure!(
                cfg.channels == self.net.image_channels,
                "synthetic images have {} channels but the network expects {}",
                cfg.channels,
                self.net.image_channels
            );
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut synth = match &self.data {
            DataSource::Synth { cfg, count } => (cfg.clone(), *count),
            DataSource::Dir(_) => (SynthConfig::default(), 4),
        };
        let mut root: Option<PathBuf> = match &self.data {
            DataSource::Dir(p) => Some(p.clone()),
            _ => None,
        };
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`")))?;
            let net = &mut self.net;
            match key {
                "base_lr" => self.base_lr = parse(n, key, value)?,
                "warm_iters" => self.warm_iters = parse(n, key, value)?,
                "decay_period" => self.decay_period = parse(n, key, value)?,
                "lr_floor" => self.lr_floor = parse(n, key, value)?,
                "stage1_iters" => self.stage1_iters = parse(n, key, value)?,
                "stage2_iters" => self.stage2_iters = parse(n, key, value)?,
                "batch_size" => self.batch_size = parse(n, key, value)?,
                "seed" => self.seed = parse(n, key, value)?,
                "log_every" => self.log_every = parse(n, key, value)?,
                "checkpoint_every" => self.checkpoint_every = parse(n, key, value)?,
                "out_dir" => self.out_dir = PathBuf::from(value),
                "alpha1" => self.loss.alpha1 = parse(n, key, value)?,
                "alpha2" => self.loss.alpha2 = parse(n, key, value)?,
                "beta2" => self.loss.beta2 = parse(n, key, value)?,
                "image_channels" => net.image_channels = parse(n, key, value)?,
                "feat_channels" => net.feat_channels = parse_list(n, key, value)?,
                "redir_channels" => net.redir_channels = parse(n, key, value)?,
                "encode_channels" => net.encode_channels = parse_list(n, key, value)?,
                "decode_channels" => net.decode_channels = parse_list(n, key, value)?,
                "maxdisp" => net.shift.maxdisp = parse(n, key, value)?,
                "clue_filters" => net.shift.clue_filters = parse(n, key, value)?,
                "variant" => net.shift.variant = value.parse()?,
                "both_directions" => net.shift.both_directions = parse_bool(n, key, value)?,
                "share_weights" => net.shift.share_weights = parse_bool(n, key, value)?,
                "cost_volume" => net.cost_volume = value.parse()?,
                "refine" => net.refine_enabled = parse_bool(n, key, value)?,
                "small_map_scale" => net.small_map_scale = parse(n, key, value)?,
                "data_root" => root = Some(PathBuf::from(value)),
                "synth_count" => synth.1 = parse(n, key, value)?,
                "synth_width" => synth.0.width = parse(n, key, value)?,
                "synth_height" => synth.0.height = parse(n, key, value)?,
                "synth_channels" => synth.0.channels = parse(n, key, value)?,
                "synth_shapes" => synth.0.num_shapes = parse(n, key, value)?,
                "synth_disp_min" => synth.0.disp_min = parse(n, key, value)?,
                "synth_disp_max" => synth.0.disp_max = parse(n, key, value)?,
                "synth_background_disp" => synth.0.background_disp = parse(n, key, value)?,
                "synth_seed" => synth.0.seed = parse(n, key, value)?,
                "ablate_iters" => self.ablate_iters = parse(n, key, value)?,
                "bench_height" => self.bench_height = parse(n, key, value)?,
                "bench_width" => self.bench_width = parse(n, key, value)?,
                "timing_reps" => self.timing_reps = parse(n, key, value)?,
                _ => return Err(Error::Config(format!("line {n}: unknown key `{key}`"))),
            }
        }
        self.data = match root {
            Some(p) => DataSource::Dir(p),
            None => DataSource::Synth {
                cfg: synth.0,
                count: synth.1,
            },
        };
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
