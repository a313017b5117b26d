use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shiftconv::data::{
    disparity_to_pgm, read_pnm, resize_disparity, resize_nearest, write_dataset, write_pfm_disparity,
    SynthConfig,
};
use shiftconv::network::BOTTLENECK_FACTOR;
use shiftconv::train::{
    ablation_csv, ablation_suite, ablation_table, bench, epoch_order, evaluate, load_samples, synth_samples,
    Checkpoint, DataSource, TrainConfig, Trainer,
};
use shiftconv::{CostVolumeKind, Error, Result};

#[derive(Parser)]
#[command(name = "shiftconv", version, about = "Shift-convolution stereo matching")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic stereo dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        shapes: usize,
        #[arg(long, default_value_t = 4)]
        disp_min: usize,
        #[arg(long, default_value_t = 24)]
        disp_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run training stage 1 (coarse) or 2 (with refinement).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint. For stage 2 this may be a stage-1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start stage 2 from a fresh initialisation.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Report EPE, D1 and forward time of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Expected cost-volume kind of the checkpoint.
        #[arg(long)]
        costvol: Option<CostVolumeKind>,
        /// Write the CSV report here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Train and compare the cost-volume variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Predict a disparity map for one image pair.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Output path; `.pfm` writes raw values, anything else an 8-bit PGM.
        #[arg(long)]
        out: PathBuf,
        /// Disparity mapped to white in the PGM (default: 4 * maxdisp).
        #[arg(long)]
        disp_cap: Option<f32>,
    },
    /// Time forward passes at the configured bench resolution.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
    },
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    TrainConfig::from_text(&text)
}

fn run_train(stage: u8, config: &Path, resume: Option<&Path>, from_scratch: bool) -> Result<()> {
    let cfg = read_config(config)?;
    let samples = load_samples(&cfg.data)?;
    let default_init = cfg.out_dir.join("stage1.ckpt");
    let mut trainer = match (stage, resume) {
        (_, Some(p)) => {
            let ckpt = Checkpoint::load(p)?;
            if stage == 1 && ckpt.stage == 2 {
                return Err(Error::Config("cannot resume stage 1 from a stage-2 checkpoint".into()));
            }
            Trainer::from_checkpoint(cfg.clone(), &ckpt)?
        }
        (1, None) => Trainer::new(cfg.clone())?,
        (_, None) if from_scratch => {
            let mut t = Trainer::new(cfg.clone())?;
            t.iteration = cfg.stage1_iters;
            t
        }
        (_, None) if default_init.exists() => {
            Trainer::from_checkpoint(cfg.clone(), &Checkpoint::load(&default_init)?)?
        }
        _ => {
            return Err(Error::Config(format!(
                "stage 2 needs a stage-1 checkpoint (--resume, or {}) or --from-scratch",
                default_init.display()
            )))
        }
    };
    println!(
        "stage={stage} seed={} start_iter={} end_iter={} samples={}",
        cfg.seed,
        trainer.iteration,
        trainer.stage_end(stage),
        samples.len()
    );
    println!("data_order epoch=0 {:?}", epoch_order(cfg.seed, 0, samples.len()));
    let out_dir = cfg.out_dir.clone();
    trainer.run_stage(
        stage,
        &samples,
        |line| println!("{line}"),
        |ckpt| {
            let p = out_dir.join(format!("stage{stage}_iter{}.ckpt", ckpt.iteration));
            ckpt.save(&p)
        },
    )?;
    let path = out_dir.join(format!("stage{stage}.ckpt"));
    trainer.checkpoint()?.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, costvol: Option<CostVolumeKind>, csv: Option<&Path>, reps: usize) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let cfg = ckpt.network_config()?;
    if let Some(k) = costvol {
        if k != cfg.cost_volume {
            return Err(Error::Config(format!(
                "checkpoint uses the {} cost volume, not {k}",
                cfg.cost_volume
            )));
        }
    }
    let net = ckpt.network()?;
    let samples = load_samples(&DataSource::Dir(data.to_path_buf()))?;
    let report = evaluate(&net, &samples, reps)?;
    print!("{}", report.to_table());
    match csv {
        Some(p) => fs::write(p, report.to_csv())?,
        None => print!("\n{}", report.to_csv()),
    }
    Ok(())
}

fn run_ablate(config: &Path, csv: Option<&Path>) -> Result<()> {
    let cfg = read_config(config)?;
    let train = load_samples(&cfg.data)?;
    let test = match &cfg.data {
        // held-out pairs from the same generator
        DataSource::Synth { cfg: s, count } => synth_samples(
            &SynthConfig {
                seed: s.seed.wrapping_add(1_000_000),
                ..s.clone()
            },
            *count,
        )?,
        DataSource::Dir(_) => train.clone(),
    };
    let rows = ablation_suite(&cfg, &train, &test, |r| {
        eprintln!(
            "row {} filters={} seed={} iterations={} epe={:.4}",
            r.label(),
            r.filters,
            r.seed,
            r.iterations,
            r.epe
        )
    })?;
    print!("{}", ablation_table(&rows));
    match csv {
        Some(p) => fs::write(p, ablation_csv(&rows))?,
        None => print!("\n{}", ablation_csv(&rows)),
    }
    Ok(())
}

fn round_to_block(v: usize) -> usize {
    let b = BOTTLENECK_FACTOR;
    ((v + b / 2) / b).max(1) * b
}

fn run_infer(ckpt: &Path, left: &Path, right: &Path, out: &Path, disp_cap: Option<f32>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let net = ckpt.network()?;
    let cfg = &net.cfg;
    let l = read_pnm(&fs::read(left)?)?;
    let r = read_pnm(&fs::read(right)?)?;
    if l.shape() != r.shape() {
        return Err(Error::Config(format!("left {} and right {} differ", l.shape(), r.shape())));
    }
    let (h, w) = (l.shape().h(), l.shape().w());
    let (nh, nw) = (round_to_block(h), round_to_block(w));
    let pred = net.predict(resize_nearest(&l, nh, nw, false)?, resize_nearest(&r, nh, nw, false)?)?;
    let pred = resize_disparity(&pred, h, w)?;
    let bytes = if out.extension().is_some_and(|e| e == "pfm") {
        write_pfm_disparity(&pred)?
    } else {
        disparity_to_pgm(&pred, disp_cap.unwrap_or(4.0 * cfg.shift.maxdisp as f32))?
    };
    fs::write(out, bytes)?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen {
            out,
            count,
            width,
            height,
            channels,
            shapes,
            disp_min,
            disp_max,
            seed,
        } => {
            let cfg = SynthConfig {
                width,
                height,
                channels,
                num_shapes: shapes,
                disp_min,
                disp_max,
                seed,
                ..SynthConfig::default()
            };
            cfg.validate()?;
            write_dataset(&out, &synth_samples(&cfg, count)?)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Cmd::Train {
            stage,
            config,
            resume,
            from_scratch,
        } => run_train(stage, &config, resume.as_deref(), from_scratch),
        Cmd::Eval {
            ckpt,
            data,
            costvol,
            csv,
            reps,
        } => run_eval(&ckpt, &data, costvol, csv.as_deref(), reps),
        Cmd::Ablate { config, csv } => run_ablate(&config, csv.as_deref()),
        Cmd::Infer {
            ckpt,
            left,
            right,
            out,
            disp_cap,
        } => run_infer(&ckpt, &left, &right, &out, disp_cap),
        Cmd::Bench { config, reps } => {
            let cfg = read_config(&config)?;
            let r = bench(&cfg, reps.unwrap_or(cfg.timing_reps))?;
            println!(
                "input={} coarse={} small={} reps={} forward_ms={:.1}",
                r.input,
                r.coarse,
                r.small,
                r.reps,
                1e3 * r.forward_secs
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
