//! Frame-similarity (`A′`) export for one block of a trained model.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::glance::FrameSimilarity;
use crate::model::{self, ModelConfig};
use crate::numerics::{ogt, ParamSet, Tensor};

/// Accepts `[T,H,W,C]` or `[B,T,H,W,C]`; a one-frame clip is shown twice so
/// that the stem yields exactly one frame.
pub fn prepare_input(video: &Tensor<f64>) -> Result<Tensor<f64>> {
    let v = match video.rank() {
        4 => {
            let mut d = vec![1];
            d.extend_from_slice(video.dims());
            video.reshape(d)?
        }
        5 => video.clone(),
        _ => {
            return Err(Error::Format(format!(
                "tempo input must be [T,H,W,C] or [B,T,H,W,C], got {:?}",
                video.dims()
            )))
        }
    };
    if v.dims()[1] != 1 {
        return Ok(v);
    }
    let mut d = v.dims().to_vec();
    let per = v.numel() / d[0];
    d[1] = 2;
    let e = v.elems();
    let doubled = (0..d[0]).flat_map(|b| {
        let frame = &e[b * per..(b + 1) * per];
        frame.iter().chain(frame).copied()
    });
    Tensor::new(d, doubled.collect())
}

/// `A′` of block `layer` (execution order, from 0) for every sample.
pub fn frame_similarity_at(
    cfg: &ModelConfig,
    params: &ParamSet<f64>,
    video: &Tensor<f64>,
    layer: usize,
) -> Result<FrameSimilarity<f64>> {
    let blocks = cfg.num_blocks();
    if layer >= blocks {
        return Err(Error::LayerOutOfRange { layer, blocks });
    }
    let v = prepare_input(video)?;
    let out = model::infer(cfg, params, &v)?;
    FrameSimilarity::new(out.frame_similarity[layer].clone())
}

/// Row-major rows, comma separated, each value in shortest round-trip form.
pub fn to_csv(matrix: &[f64], frames: usize) -> String {
    matrix
        .chunks(frames)
        .map(|row| {
            row.iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn parse_csv(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .flat_map(|l| l.split(','))
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad CSV value `{v}`")))
        })
        .collect()
}

/// Writes `a_prime_<b>.csv` and `a_prime_<b>.ogt` per sample; returns the paths.
pub fn export(
    cfg: &ModelConfig,
    params: &ParamSet<f64>,
    video: &Tensor<f64>,
    layer: usize,
    out: impl AsRef<Path>,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    let a = frame_similarity_at(cfg, params, video, layer)?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let t = a.frames();
    let mut written = Vec::new();
    for b in 0..a.batch() {
        let m = a.matrix(b);
        let csv = out.join(format!("a_prime_{b}.csv"));
        let bin = out.join(format!("a_prime_{b}.ogt"));
        fs::write(&csv, to_csv(m, t))?;
        ogt::save(&bin, &Tensor::new([t, t], m.to_vec())?)?;
        written.push((csv, bin));
    }
    Ok(written)
}
