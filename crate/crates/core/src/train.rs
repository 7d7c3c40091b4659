//! Training loop, evaluation and metrics persistence.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{DataSource, TrainConfig};
use crate::error::{Error, Result};
use crate::gaze::PoolPath;
use crate::model::{self, ModelConfig};
use crate::numerics::{Element, Graph, ParamSet, Rng};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::synthdata::{self, VideoSample};

pub const METRICS_HEADER: &str = "epoch,split,loss,top1,seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const BEST_DIR: &str = "best";

/// Random stream keys under the run seed.
const KEY_TRAIN_DATA: u64 = 0;
const KEY_VAL_DATA: u64 = 1;
const KEY_SHUFFLE: u64 = 2;
const KEY_DROP: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.8},{:.6},{:.3}",
            self.epoch, self.split, self.loss, self.top1, self.seconds
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub struct TrainData {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
}

impl TrainData {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let m = &cfg.model;
        match &cfg.data {
            DataSource::SyntheticOrder => {
                let root = Rng::new(cfg.seed);
                Ok(Self {
                    train: order_split(cfg.train_per_class, m, &root.split(KEY_TRAIN_DATA))?,
                    val: order_split(cfg.val_per_class, m, &root.split(KEY_VAL_DATA))?,
                })
            }
            DataSource::Dir(dir) => Ok(Self {
                train: synthdata::load_dataset(dir.join("train"))?,
                val: synthdata::load_dataset(dir.join("val"))?,
            }),
        }
    }
}

fn order_split(per_class: usize, m: &ModelConfig, rng: &Rng) -> Result<Vec<VideoSample>> {
    synthdata::gen_order_task(per_class, m.t_in, m.h_in, m.w_in, rng)
}

/// Result of scoring a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    pub count: usize,
    /// Distinct modulation pooling paths taken, in first-seen order.
    pub pool_paths: Vec<PoolPath>,
}

fn argmax<F: Element>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn correct<F: Element>(logits: &[F], k: usize, labels: &[usize]) -> usize {
    logits
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Single-view top-1 and mean cross-entropy. Batches are scored in parallel
/// and reduced in order, so the result does not depend on the thread count.
pub fn evaluate<F: Element>(
    model: &ModelConfig,
    params: &ParamSet<F>,
    samples: &[VideoSample],
    batch_size: usize,
) -> Result<Evaluation> {
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::Contract(
            "evaluate needs samples and a positive batch size".into(),
        ));
    }
    checkpoint::check_compatible(model, params)?;
    for s in samples {
        if s.label >= model.num_classes {
            return Err(Error::Contract(format!(
                "label {} outside {} classes",
                s.label, model.num_classes
            )));
        }
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let parts = idx
        .par_chunks(batch_size)
        .map(|chunk| -> Result<(f64, usize, Vec<Option<PoolPath>>)> {
            let (x, labels) = synthdata::batch::<F>(samples, chunk)?;
            let out = model::infer(model, params, &x)?;
            let mut g = Graph::<F>::new();
            let l = g.constant(out.logits.clone());
            let loss = g.cross_entropy(l, &labels, 0.0)?;
            let loss = g.value(loss).item().as_f64() * chunk.len() as f64;
            Ok((
                loss,
                correct(out.logits.elems(), model.num_classes, &labels),
                out.pool_paths,
            ))
        })
        .collect::<Vec<_>>();
    let (mut loss, mut hits, mut paths) = (0.0, 0, Vec::new());
    for p in parts {
        let (l, c, pp) = p?;
        loss += l;
        hits += c;
        for path in pp.into_iter().flatten() {
            if !paths.contains(&path) {
                paths.push(path);
            }
        }
    }
    let n = samples.len();
    Ok(Evaluation {
        loss: loss / n as f64,
        top1: hits as f64 / n as f64,
        count: n,
        pool_paths: paths,
    })
}

pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    /// Parameters at the best validation epoch.
    pub best: ParamSet<f32>,
    /// Parameters after the last epoch.
    pub last: ParamSet<f32>,
}

/// Trains in single precision. When `out` is given, writes `metrics.csv`,
/// `timing.csv`, `config.txt` and the best-validation checkpoint `best/`.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    out: Option<&Path>,
    on_row: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    let m = &cfg.model;
    let mut params = model::init_model::<f32>(m, cfg.seed)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &params,
    );
    let root = Rng::new(cfg.seed);
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;

    let start = Instant::now();
    let mut rows = Vec::new();
    let mut timing = String::from("epoch,split,seconds\n");
    let mut best: Option<(usize, f64, ParamSet<f32>)> = None;
    let mut global = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.split(KEY_SHUFFLE)
            .split(epoch as u64)
            .shuffle(&mut order);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = synthdata::batch::<f32>(&data.train, chunk)?;
            let mut drop_rng = root.split(KEY_DROP).split(global as u64);
            let mut g = Graph::<f32>::new();
            let b = g.bind(&params);
            let xv = g.constant(x);
            let non_finite = |e: Error| match e {
                Error::NonFinite { .. } | Error::Contract(_) => Error::NonFiniteLoss {
                    epoch,
                    step,
                    global_step: global,
                },
                other => other,
            };
            let fwd =
                model::model_forward(&mut g, &b, m, xv, Some(&mut drop_rng)).map_err(non_finite)?;
            let loss = g
                .cross_entropy(fwd.logits, &labels, cfg.label_smoothing)
                .map_err(non_finite)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(non_finite(Error::NonFinite { op: "loss" }));
            }
            loss_sum += lv * chunk.len() as f64;
            hits += correct(g.value(fwd.logits).elems(), m.num_classes, &labels);
            let grads = b.collect(&g.backward(loss)?);
            drop(g);
            opt.step(
                &mut params,
                &grads,
                lr_at(global, total, warmup, cfg.base_lr),
            )?;
            global += 1;
        }
        let train_secs = start.elapsed().as_secs_f64();
        let ev = evaluate(m, &params, &data.val, cfg.batch_size)?;
        let val_secs = start.elapsed().as_secs_f64();
        let shown = |s: f64| if cfg.wall_clock { s } else { 0.0 };
        let epoch_rows = [
            MetricsRow {
                epoch,
                split: Split::Train,
                loss: loss_sum / n as f64,
                top1: hits as f64 / n as f64,
                seconds: shown(train_secs),
            },
            MetricsRow {
                epoch,
                split: Split::Val,
                loss: ev.loss,
                top1: ev.top1,
                seconds: shown(val_secs),
            },
        ];
        timing.push_str(&format!(
            "{epoch},train,{train_secs:.3}\n{epoch},val,{val_secs:.3}\n"
        ));
        for r in &epoch_rows {
            on_row(r);
        }
        rows.extend(epoch_rows);

        let improved = best.as_ref().is_none_or(|(_, top, _)| ev.top1 > *top);
        if improved {
            if let Some(dir) = out {
                checkpoint::save(dir.join(BEST_DIR), m, &params)?;
            }
            best = Some((epoch, ev.top1, params.clone()));
        }
        if let Some(dir) = out {
            fs::write(dir.join(METRICS_FILE), metrics_csv(&rows))?;
            fs::write(dir.join(TIMING_FILE), &timing)?;
        }
    }
    let (best_epoch, best_val_top1, best) = best.expect("at least one epoch");
    Ok(TrainReport {
        rows,
        best_epoch,
        best_val_top1,
        best,
        last: params,
    })
}
