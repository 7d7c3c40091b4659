use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ogreg_core::config::{self, KeyValues, TrainConfig};
use ogreg_core::gradcheck::{self, CheckReport};
use ogreg_core::model::ModelConfig;
use ogreg_core::synthdata::{self, VideoSample};
use ogreg_core::train::{self, TrainData};
use ogreg_core::{checkpoint, flops, tempo, Rng, Tensor};

/// Stream keys matching the ones `train` uses for generated data, so that
/// `gen-data` and `eval --synthetic` reproduce a run's splits for its seed.
const TRAIN_STREAM: u64 = 0;
const VAL_STREAM: u64 = 1;

#[derive(Parser)]
#[command(
    name = "ogreg",
    version,
    about = "Glance/gaze video transformer toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a `key = value` config and write metrics plus the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-view top-1 of a checkpoint.
    Eval(EvalArgs),
    /// Export the frame-similarity matrix of one block as CSV and OGT1.
    Tempo {
        #[arg(long)]
        ckpt: PathBuf,
        /// OGT1 clip `[T,H,W,C]` or batch `[B,T,H,W,C]`.
        #[arg(long)]
        input: PathBuf,
        /// Block index in execution order, from 0.
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form multiply-accumulate counts for a model config.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also run the model once and require the tallies to agree.
        #[arg(long)]
        verify: bool,
    },
    /// Finite-difference gradient checks at double precision.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model config for the model scope; Tiny-desk when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic dataset as OGT1 clips plus a manifest.
    GenData(GenArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset dump, or a directory holding `val/`.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    synthetic: Option<Task>,
    /// Resample every clip to this many frames.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Frame height and width.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    val_per_class: usize,
    /// Tempo clips: one per listed speed.
    #[arg(long, value_delimiter = ',', default_values_t = synthdata::TEMPO_SPEEDS)]
    speeds: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Order,
    Tempo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Primitive,
    Block,
    Model,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> Result<bool> {
        set_threads()?;
        match cli.command {
            Command::Train { config, out } => train_cmd(&config, &out),
            Command::Eval(a) => eval_cmd(&a),
            Command::Tempo {
                ckpt,
                input,
                layer,
                out,
            } => tempo_cmd(&ckpt, &input, layer, &out),
            Command::Flops { config, verify } => flops_cmd(config.as_deref(), verify),
            Command::Gradcheck {
                scope,
                seed,
                config,
            } => gradcheck_cmd(scope, seed, config.as_deref()),
            Command::GenData(a) => gen_data_cmd(&a),
        }
    };
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn set_threads() -> Result<()> {
    let Ok(v) = std::env::var("OGREG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("OGREG_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn train_cmd(config: &Path, out: &Path) -> Result<bool> {
    let cfg = TrainConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let data = TrainData::load(&cfg)?;
    println!(
        "training on {} clips, validating on {}, {} epochs",
        data.train.len(),
        data.val.len(),
        cfg.epochs
    );
    println!("{}", train::METRICS_HEADER);
    let report = train::train(&cfg, &data, Some(out), &mut |row| println!("{}", row.csv()))?;
    println!(
        "best val top1 {:.6} at epoch {}; checkpoint in {}",
        report.best_val_top1,
        report.best_epoch,
        out.join(train::BEST_DIR).display()
    );
    Ok(true)
}

fn load_split(dir: &Path) -> Result<Vec<VideoSample>> {
    let dir = if dir.join(synthdata::MANIFEST).exists() {
        dir.to_path_buf()
    } else {
        dir.join("val")
    };
    synthdata::load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn eval_cmd(a: &EvalArgs) -> Result<bool> {
    let ckpt = checkpoint::load::<f32>(&a.ckpt)?;
    let m = &ckpt.model;
    let mut samples = match (&a.data, a.synthetic) {
        (Some(dir), _) => load_split(dir)?,
        (None, Some(Task::Order)) => {
            let rng = Rng::new(a.seed).split(VAL_STREAM);
            synthdata::gen_order_task(a.per_class, m.t_in, m.h_in, m.w_in, &rng)?
        }
        (None, Some(Task::Tempo)) => {
            bail!("the tempo task has no labels to score; use `tempo` instead")
        }
        (None, None) => bail!("pass --data DIR or --synthetic order"),
    };
    if let Some(t) = a.frames {
        samples = samples
            .iter()
            .map(|s| synthdata::resample_frames(s, t))
            .collect::<ogreg_core::Result<_>>()?;
    }
    let e = train::evaluate(m, &ckpt.params, &samples, a.batch_size)?;
    let paths: Vec<String> = e.pool_paths.iter().map(|p| format!("{p:?}")).collect();
    println!("clips {}", e.count);
    println!("frames {}", samples[0].num_frames());
    println!("loss {:.8}", e.loss);
    println!("top1 {:.6}", e.top1);
    println!("pool path {}", paths.join(", "));
    Ok(true)
}

fn tempo_cmd(ckpt: &Path, input: &Path, layer: usize, out: &Path) -> Result<bool> {
    let ckpt = checkpoint::load::<f64>(ckpt)?;
    let video: Tensor<f64> = ogreg_core::numerics::ogt::load(input)
        .with_context(|| format!("reading {}", input.display()))?;
    let video = tempo::prepare_input(&video)?;
    for (csv, bin) in tempo::export(&ckpt.model, &ckpt.params, &video, layer, out)? {
        println!("{}\n{}", csv.display(), bin.display());
    }
    Ok(true)
}

fn model_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => {
            let kv = KeyValues::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(config::model_from_kv(&kv)?)
        }
        None => Ok(ModelConfig::tiny_desk(2)),
    }
}

fn flops_cmd(config: Option<&Path>, verify: bool) -> Result<bool> {
    let m = model_config(config)?;
    let report = flops::count_flops(&m)?;
    println!("{report}");
    println!("attention matrix MACs {}", report.attention_matrix_macs());
    println!("projection MACs {}", report.projection_macs());
    if verify {
        let counted = flops::instrumented(&m, 0)?;
        if counted != report {
            println!(
                "instrumented tally disagrees: {} MACs",
                counted.total_macs()
            );
            return Ok(false);
        }
        println!("instrumented tally agrees");
    }
    Ok(true)
}

fn gradcheck_cmd(scope: Scope, seed: u64, config: Option<&Path>) -> Result<bool> {
    let (reports, tol) = match scope {
        Scope::Primitive => (gradcheck::primitive_suite(seed)?, gradcheck::PRIMITIVE_TOL),
        Scope::Block => (gradcheck::block_suite(seed)?, gradcheck::BLOCK_TOL),
        Scope::Model => {
            let m = model_config(config)?;
            let r = gradcheck::model_suite(&m, seed, gradcheck::MODEL_SAMPLE)?;
            (vec![r], gradcheck::MODEL_TOL)
        }
    };
    let mut ok = true;
    for r in &reports {
        let pass = r.max_rel_err < tol;
        ok &= pass;
        println!("{} {r}", if pass { "ok  " } else { "FAIL" });
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|r: &CheckReport| format!("{} at {:.3e}", r.component, r.max_rel_err))
        .unwrap_or_default();
    println!(
        "worst {worst}; tolerance {tol:.0e}: {}",
        if ok { "pass" } else { "fail" }
    );
    Ok(ok)
}

fn gen_data_cmd(a: &GenArgs) -> Result<bool> {
    let root = Rng::new(a.seed);
    let (t, s) = (a.frames, a.size);
    match a.task {
        Task::Order => {
            let train =
                synthdata::gen_order_task(a.train_per_class, t, s, s, &root.split(TRAIN_STREAM))?;
            let val = synthdata::gen_order_task(a.val_per_class, t, s, s, &root.split(VAL_STREAM))?;
            synthdata::dump_dataset(a.out.join("train"), &train)?;
            synthdata::dump_dataset(a.out.join("val"), &val)?;
            println!(
                "{} train and {} val clips in {}",
                train.len(),
                val.len(),
                a.out.display()
            );
        }
        Task::Tempo => {
            let clips = a
                .speeds
                .iter()
                .enumerate()
                .map(|(i, &v)| synthdata::gen_tempo_clip(v, t, s, s, &root.split(i as u64)))
                .collect::<ogreg_core::Result<Vec<_>>>()?;
            synthdata::dump_dataset(&a.out, &clips)?;
            println!("{} tempo clips in {}", clips.len(), a.out.display());
        }
    }
    Ok(true)
}
