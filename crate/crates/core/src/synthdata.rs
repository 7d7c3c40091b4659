//! Synthetic clips: a temporal-order task and variable-tempo motion.
//!
//! Every clip shows a white square of side `H/4` over a static noise
//! background of amplitude 0.1. Frames are `[T, H, W, 3]` with values in `[0, 1]`.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{ogt, Element, Rng, Tensor};

pub const NOISE_AMPLITUDE: f64 = 0.1;
pub const CHANNELS: usize = 3;
pub const TEMPO_SPEEDS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Playback {
    /// Square moves left to right.
    Forward,
    /// The forward frames in reverse order.
    Reverse,
}

impl fmt::Display for Playback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Playback::Forward => "forward",
            Playback::Reverse => "reverse",
        })
    }
}

impl FromStr for Playback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Playback::Forward),
            "reverse" => Ok(Playback::Reverse),
            other => Err(Error::Format(format!("unknown playback `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub playback: Playback,
    pub speed: usize,
    pub start_row: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[T, H, W, 3]`
    pub frames: Tensor<f32>,
    pub label: usize,
    pub meta: SampleMeta,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let per = self.frames.numel() / self.num_frames();
        &self.frames.elems()[t * per..(t + 1) * per]
    }
}

/// Static background plus the square's row; drawn from `rng` in a fixed order.
struct Canvas {
    background: Vec<f32>,
    w: usize,
    side: usize,
    row: usize,
}

impl Canvas {
    fn new(h: usize, w: usize, rng: &mut Rng) -> Result<Self> {
        let side = h / 4;
        if side == 0 || side > w {
            return Err(Error::Config(format!(
                "frame {h}x{w} too small for the square"
            )));
        }
        let background = (0..h * w * CHANNELS)
            .map(|_| (NOISE_AMPLITUDE * rng.uniform()) as f32)
            .collect();
        let row = rng.below(h - side + 1);
        Ok(Self {
            background,
            w,
            side,
            row,
        })
    }

    fn draw(&self, col: usize, out: &mut Vec<f32>) {
        let start = out.len();
        out.extend_from_slice(&self.background);
        let frame = &mut out[start..];
        for y in self.row..self.row + self.side {
            let base = (y * self.w + col) * CHANNELS;
            frame[base..base + self.side * CHANNELS].fill(1.0);
        }
    }

    /// Column at path position `u ∈ [0, len]`.
    fn column(&self, u: usize, len: usize) -> usize {
        let travel = (self.w - self.side) as f64;
        (u as f64 * travel / len as f64).round() as usize
    }
}

/// `n_per_class` forward/reverse pairs, interleaved: even indices are class 0
/// (forward), odd indices the matching class 1 (reversed) clip.
pub fn gen_order_task(
    n_per_class: usize,
    t: usize,
    h: usize,
    w: usize,
    rng: &Rng,
) -> Result<Vec<VideoSample>> {
    if t < 4 {
        return Err(Error::Config(format!("order task needs T >= 4, got {t}")));
    }
    let mut out = Vec::with_capacity(2 * n_per_class);
    for pair in 0..n_per_class {
        let mut r = rng.split(pair as u64);
        let seed = r.seed();
        let canvas = Canvas::new(h, w, &mut r)?;
        let mut elems = Vec::with_capacity(t * h * w * CHANNELS);
        for i in 0..t {
            canvas.draw(canvas.column(i, t - 1), &mut elems);
        }
        let forward = Tensor::new([t, h, w, CHANNELS], elems)?;
        let meta = SampleMeta {
            playback: Playback::Forward,
            speed: 1,
            start_row: canvas.row,
            seed,
        };
        let reverse = reverse_frames(&forward)?;
        out.push(VideoSample {
            frames: forward,
            label: 0,
            meta,
        });
        out.push(VideoSample {
            frames: reverse,
            label: 1,
            meta: SampleMeta {
                playback: Playback::Reverse,
                ..meta
            },
        });
    }
    Ok(out)
}

fn reverse_frames(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let t = x.dims()[0];
    let per = x.numel() / t;
    let e = x.elems();
    let rev = (0..t)
        .rev()
        .flat_map(|i| e[i * per..(i + 1) * per].iter().copied())
        .collect();
    Tensor::new(x.dims().to_vec(), rev)
}

/// A left-to-right sweep at `speed_factor` steps per frame over a path of `T`
/// steps; once the path is complete the clip is static. The label is the
/// speed's index in [`TEMPO_SPEEDS`].
pub fn gen_tempo_clip(
    speed_factor: usize,
    t: usize,
    h: usize,
    w: usize,
    rng: &Rng,
) -> Result<VideoSample> {
    let label = TEMPO_SPEEDS
        .iter()
        .position(|&s| s == speed_factor)
        .ok_or_else(|| {
            Error::Config(format!(
                "speed factor {speed_factor} not in {TEMPO_SPEEDS:?}"
            ))
        })?;
    if t < *TEMPO_SPEEDS.last().expect("non-empty") {
        return Err(Error::Config(format!("tempo clip needs T >= 4, got {t}")));
    }
    let mut r = rng.clone();
    let seed = r.seed();
    let canvas = Canvas::new(h, w, &mut r)?;
    let mut elems = Vec::with_capacity(t * h * w * CHANNELS);
    for i in 0..t {
        canvas.draw(canvas.column((speed_factor * i).min(t), t), &mut elems);
    }
    Ok(VideoSample {
        frames: Tensor::new([t, h, w, CHANNELS], elems)?,
        label,
        meta: SampleMeta {
            playback: Playback::Forward,
            speed: speed_factor,
            start_row: canvas.row,
            seed,
        },
    })
}

/// Uniform temporal resampling to `frames` frames: output frame `i` is input
/// frame `⌊i·T/frames⌋`.
pub fn resample_frames(sample: &VideoSample, frames: usize) -> Result<VideoSample> {
    if frames == 0 {
        return Err(Error::Config("cannot resample to zero frames".into()));
    }
    let t = sample.num_frames();
    let mut dims = sample.frames.dims().to_vec();
    dims[0] = frames;
    let elems = (0..frames)
        .flat_map(|i| sample.frame(i * t / frames).iter().copied())
        .collect();
    Ok(VideoSample {
        frames: Tensor::new(dims, elems)?,
        ..sample.clone()
    })
}

/// Stacks the selected samples into `[B, T, H, W, 3]` plus labels.
pub fn batch<F: Element>(
    samples: &[VideoSample],
    indices: &[usize],
) -> Result<(Tensor<F>, Vec<usize>)> {
    let first = samples
        .get(
            *indices
                .first()
                .ok_or_else(|| Error::Contract("empty batch".into()))?,
        )
        .ok_or_else(|| Error::Contract("batch index out of range".into()))?;
    let mut dims = vec![indices.len()];
    dims.extend_from_slice(first.frames.dims());
    let mut elems = Vec::with_capacity(dims.iter().product());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Contract(format!("batch index {i} out of range")))?;
        if s.frames.dims() != first.frames.dims() {
            return Err(Error::mismatch(
                "batch",
                s.frames.dims(),
                first.frames.dims(),
            ));
        }
        elems.extend(s.frames.elems().iter().map(|&v| F::lit(v as f64)));
        labels.push(s.label);
    }
    Ok((Tensor::new(dims, elems)?, labels))
}

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "path,label,playback,speed,start_row,seed";

/// Writes one OGT1 file per sample plus `manifest.csv`.
pub fn dump_dataset(dir: impl AsRef<Path>, samples: &[VideoSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.ogt");
        ogt::save(dir.join(&name), &s.frames)?;
        let m = &s.meta;
        manifest.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            s.label, m.playback, m.speed, m.start_row, m.seed
        ));
    }
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<VideoSample>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", MANIFEST)));
    }
    let bad =
        |n: usize, what: &str| Error::Format(format!("{MANIFEST} line {}: bad {what}", n + 2));
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(n, "field count"));
            }
            let frames: Tensor<f32> = ogt::load(dir.join(f[0]))?;
            if frames.rank() != 4 || frames.dims()[3] != CHANNELS {
                return Err(Error::Format(format!(
                    "{}: expected [T,H,W,3], got {:?}",
                    f[0],
                    frames.dims()
                )));
            }
            Ok(VideoSample {
                frames,
                label: f[1].parse().map_err(|_| bad(n, "label"))?,
                meta: SampleMeta {
                    playback: f[2].parse()?,
                    speed: f[3].parse().map_err(|_| bad(n, "speed"))?,
                    start_row: f[4].parse().map_err(|_| bad(n, "start_row"))?,
                    seed: f[5].parse().map_err(|_| bad(n, "seed"))?,
                },
            })
        })
        .collect()
}
