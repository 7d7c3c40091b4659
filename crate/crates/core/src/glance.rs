//! Glance path: spatial-only downsampling attention (SoDA).
//!
//! Tokens are pooled spatially by the downsample ratio `s` (time is kept),
//! attended over the whole clip, then replicated back to full resolution
//! together with the value tensor:
//!
//! ```text
//! Z' = DR(Z);  Q, K, V = Z'W_Q, Z'W_K, Z'W_V
//! A  = softmax(Q Kᵀ / √d);  out = UR((A V) W_O) + UR(V)
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::ops::Conv3dSpec;
use crate::numerics::params::{self, Init, Scope};
use crate::numerics::{Direction, Element, Graph, Tensor, Var};

/// How DR/UR reduce and restore resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DrMode {
    /// Non-learnable `s×s` spatial mean pooling.
    #[default]
    MeanPool2d,
    /// Learnable depthwise `(1,s,s)` strided convolution.
    Conv2d,
    /// Learnable depthwise `(2,s,s)` strided convolution; halves time.
    Conv3d,
    /// Depthwise `(1,s,s)` then `(2,1,1)` strided convolutions; halves time.
    R2Plus1d,
}

impl DrMode {
    /// Temporal reduction factor applied by DR.
    pub fn time_ratio(self) -> usize {
        match self {
            DrMode::MeanPool2d | DrMode::Conv2d => 1,
            DrMode::Conv3d | DrMode::R2Plus1d => 2,
        }
    }

    pub fn is_learnable(self) -> bool {
        self != DrMode::MeanPool2d
    }
}

impl fmt::Display for DrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DrMode::MeanPool2d => "meanpool2d",
            DrMode::Conv2d => "conv2d",
            DrMode::Conv3d => "conv3d",
            DrMode::R2Plus1d => "r2plus1d",
        })
    }
}

impl FromStr for DrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meanpool2d" => Ok(DrMode::MeanPool2d),
            "conv2d" => Ok(DrMode::Conv2d),
            "conv3d" => Ok(DrMode::Conv3d),
            "r2plus1d" => Ok(DrMode::R2Plus1d),
            other => Err(Error::Config(format!("unknown dr_mode `{other}`"))),
        }
    }
}

pub const RATIOS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SodaConfig {
    pub channels: usize,
    pub heads: usize,
    pub ratio: usize,
    pub dr_mode: DrMode,
    pub qkv_bias: bool,
}

impl SodaConfig {
    pub fn new(channels: usize, heads: usize, ratio: usize) -> Self {
        Self {
            channels,
            heads,
            ratio,
            dr_mode: DrMode::MeanPool2d,
            qkv_bias: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !RATIOS.contains(&self.ratio) {
            return Err(Error::Config(format!(
                "downsample ratio {} not in {RATIOS:?}",
                self.ratio
            )));
        }
        Ok(())
    }

    /// Token grid `(T', H/s, W/s)` seen by attention for an input grid.
    pub fn reduced_grid(&self, grid: [usize; 3]) -> Result<[usize; 3]> {
        let [t, h, w] = grid;
        let (rt, s) = (self.dr_mode.time_ratio(), self.ratio);
        if h % s != 0 || w % s != 0 || t % rt != 0 {
            return Err(Error::shape(
                "dr",
                format!("grid {grid:?} not divisible by ratio {s} (time {rt})"),
            ));
        }
        Ok([t / rt, h / s, w / s])
    }
}

/// Registers `W_Q, W_K, W_V, W_O` (and DR kernels for learnable modes).
pub fn init_soda<F: Element>(init: &mut Init<'_, F>, cfg: &SodaConfig) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    // a key bias only shifts each softmax row by a constant, so it is omitted
    init.linear("q", c, c, cfg.qkv_bias)?;
    init.linear("k", c, c, false)?;
    init.linear("v", c, c, cfg.qkv_bias)?;
    init.linear("o", c, c, true)?;
    let s = cfg.ratio;
    // learnable DR kernels start as the equivalent mean pool
    match cfg.dr_mode {
        DrMode::MeanPool2d => {}
        DrMode::Conv2d => init.constant("dr.spatial", &[1, s, s, 1, c], 1.0 / (s * s) as f64)?,
        DrMode::Conv3d => {
            init.constant("dr.spatiotemporal", &[2, s, s, 1, c], 0.5 / (s * s) as f64)?
        }
        DrMode::R2Plus1d => {
            init.constant("dr.spatial", &[1, s, s, 1, c], 1.0 / (s * s) as f64)?;
            init.constant("dr.temporal", &[2, 1, 1, 1, c], 0.5)?;
        }
    }
    Ok(())
}

/// Reduces `[B,T,H,W,C]` to `[B,T',H/s,W/s,C]`.
pub fn dr<F: Element>(g: &mut Graph<F>, s: &Scope<'_>, cfg: &SodaConfig, x: Var) -> Result<Var> {
    let dims = video_dims(g.dims(x))?;
    cfg.reduced_grid([dims[1], dims[2], dims[3]])?;
    let (r, c) = (cfg.ratio, cfg.channels);
    match cfg.dr_mode {
        DrMode::MeanPool2d => g.resample_spatial(x, r, Direction::Down),
        DrMode::Conv2d => g.conv3d(
            x,
            s.get("dr.spatial")?,
            None,
            &Conv3dSpec::new([1, r, r], [0; 3], c),
        ),
        DrMode::Conv3d => g.conv3d(
            x,
            s.get("dr.spatiotemporal")?,
            None,
            &Conv3dSpec::new([2, r, r], [0; 3], c),
        ),
        DrMode::R2Plus1d => {
            let y = g.conv3d(
                x,
                s.get("dr.spatial")?,
                None,
                &Conv3dSpec::new([1, r, r], [0; 3], c),
            )?;
            g.conv3d(
                y,
                s.get("dr.temporal")?,
                None,
                &Conv3dSpec::new([2, 1, 1], [0; 3], c),
            )
        }
    }
}

/// Restores `[B,T',H/s,W/s,C]` to full resolution by nearest-neighbour replication.
pub fn ur<F: Element>(g: &mut Graph<F>, cfg: &SodaConfig, x: Var) -> Result<Var> {
    g.resample(x, cfg.dr_mode.time_ratio(), cfg.ratio, Direction::Up)
}

fn video_dims(dims: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(dims)
        .map_err(|_| Error::shape("soda", format!("expected [B,T,H,W,C], got {dims:?}")))
}

/// Attention state of one SoDA call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionContext {
    /// `[B, h, N', d]`
    pub q: Var,
    /// `[B, h, N', d]`
    pub k: Var,
    /// `[B, h, N', d]`
    pub v: Var,
    /// Row-stochastic token similarity `[B, h, N', N']`.
    pub attn: Var,
    /// Reduced token grid `(T', H/s, W/s)`.
    pub grid: [usize; 3],
}

impl AttentionContext {
    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }
}

/// SoDA over `x: [B,T,H,W,C]`; the output has the input's dims.
pub fn soda_forward<F: Element>(
    g: &mut Graph<F>,
    s: &Scope<'_>,
    cfg: &SodaConfig,
    x: Var,
) -> Result<(Var, AttentionContext)> {
    cfg.validate()?;
    let [b, t, h, w, c] = video_dims(g.dims(x))?;
    if c != cfg.channels {
        return Err(Error::mismatch("soda", g.dims(x), &[cfg.channels]));
    }
    let grid = cfg.reduced_grid([t, h, w])?;
    let n = grid.iter().product::<usize>();
    let (heads, d) = (cfg.heads, cfg.head_dim());
    let base = g.scope().to_string();
    let tag = |g: &mut Graph<F>, part: &str| g.set_scope(format!("{base}.{part}"));

    tag(g, "dr");
    let reduced = dr(g, s, cfg, x)?;
    let tokens = g.reshape(reduced, &[b, n, c])?;

    tag(g, "qkv");
    let q = params::linear(g, &s.pp("q"), tokens)?;
    let k = params::linear(g, &s.pp("k"), tokens)?;
    let v_flat = params::linear(g, &s.pp("v"), tokens)?;
    let split = |g: &mut Graph<F>, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[b, n, heads, d])?;
        g.permute(t, &[0, 2, 1, 3])
    };
    let q = split(g, q)?;
    let k = split(g, k)?;
    let v = split(g, v_flat)?;

    tag(g, "qk");
    let kt = g.permute(k, &[0, 1, 3, 2])?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    if !g.value(logits).is_finite() {
        return Err(Error::Contract("soda: non-finite attention logits".into()));
    }
    let attn = g.softmax_last(logits)?;

    tag(g, "av");
    let z = g.matmul(attn, v)?;
    let z = g.permute(z, &[0, 2, 1, 3])?;
    let z = g.reshape(z, &[b, n, c])?;

    tag(g, "proj");
    let z = params::linear(g, &s.pp("o"), z)?;
    // UR(Ẑ W_O) + UR(V) == UR(Ẑ W_O + V) exactly: replication is a copy
    let z = g.add(z, v_flat)?;
    let z = g.reshape(z, &[b, grid[0], grid[1], grid[2], c])?;
    let y = ur(g, cfg, z)?;
    g.set_scope(base);

    Ok((
        y,
        AttentionContext {
            q,
            k,
            v,
            attn,
            grid,
        },
    ))
}

/// Reduces the token similarity `A` to the frame similarity `A′: [B, T′, T′]`:
/// heads and query positions of frame `t` are averaged, key positions of
/// frame `t′` are summed.
pub fn frame_similarity<F: Element>(
    g: &mut Graph<F>,
    ctx: &AttentionContext,
    frames: usize,
) -> Result<Var> {
    let dims = g.dims(ctx.attn).to_vec();
    let [b, _, n, _] = <[usize; 4]>::try_from(dims.as_slice())
        .map_err(|_| Error::shape("frame_similarity", format!("attention dims {dims:?}")))?;
    if frames == 0 || n % frames != 0 {
        return Err(Error::shape(
            "frame_similarity",
            format!("{n} tokens not divisible into {frames} frames"),
        ));
    }
    if frames == 1 {
        // every row of A sums to one over the only frame
        return Ok(g.constant(Tensor::ones([b, 1, 1])?));
    }
    let per_frame = n / frames;
    let a = g.mean_axis(ctx.attn, 1)?;
    let a = g.reshape(a, &[b, frames, per_frame, frames, per_frame])?;
    // key positions are summed so rows stay stochastic; query positions averaged
    let a = g.mean_axis(a, 4)?;
    let a = g.scale(a, per_frame as f64)?;
    g.mean_axis(a, 2)
}

/// Frame similarity matrix values `[B, T, T]`, one row-stochastic matrix per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSimilarity<F: Element = f64>(pub Tensor<F>);

impl<F: Element> FrameSimilarity<F> {
    pub fn new(t: Tensor<F>) -> Result<Self> {
        match t.dims() {
            [_, a, b] if a == b => Ok(Self(t)),
            d => Err(Error::shape(
                "frame_similarity",
                format!("expected [B,T,T], got {d:?}"),
            )),
        }
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.0.dims()[1]
    }

    /// Row-major `T×T` matrix of sample `b`.
    pub fn matrix(&self, b: usize) -> &[F] {
        let t = self.frames();
        &self.0.elems()[b * t * t..(b + 1) * t * t]
    }

    /// Largest `|row sum − 1|` over all samples and rows.
    pub fn max_row_sum_error(&self) -> f64 {
        let t = self.frames();
        self.0
            .elems()
            .chunks_exact(t)
            .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamSet, Rng};

    fn setup(cfg: &SodaConfig, seed: u64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(seed);
        init_soda(&mut Init::new(&mut ps, &mut rng).pp("soda"), cfg).unwrap();
        ps
    }

    #[test]
    fn config_validation() {
        assert!(SodaConfig::new(8, 3, 1).validate().is_err());
        assert!(SodaConfig::new(8, 2, 3).validate().is_err());
        assert!(SodaConfig::new(8, 2, 8).validate().is_ok());
    }

    #[test]
    fn dr_ur_identity_and_constants() {
        let mut g = Graph::<f64>::new();
        let b = crate::numerics::Bindings::default();
        let s = b.scope("");
        let x = Rng::new(1)
            .normal_tensor::<f64>(&[1, 2, 4, 4, 3], 1.0)
            .unwrap();
        let xv = g.constant(x.clone());
        let cfg = SodaConfig::new(3, 1, 1);
        let y = dr(&mut g, &s, &cfg, xv).unwrap();
        assert_eq!(g.value(y), &x);
        let u = ur(&mut g, &cfg, y).unwrap();
        assert_eq!(g.value(u), &x);

        let c = Tensor::full([1, 3, 8, 8, 2], 0.375).unwrap();
        let cv = g.constant(c.clone());
        let cfg = SodaConfig::new(2, 1, 8);
        let d = dr(&mut g, &s, &cfg, cv).unwrap();
        assert_eq!(g.dims(d), &[1, 3, 1, 1, 2]);
        assert!(g.value(d).elems().iter().all(|&v| v == 0.375));
        let u = ur(&mut g, &cfg, d).unwrap();
        assert_eq!(g.value(u), &c);

        let one = g.constant(Tensor::from_fn([1, 1, 1, 1, 1], |_| 2.5).unwrap());
        let u = ur(&mut g, &SodaConfig::new(1, 1, 2), one).unwrap();
        assert_eq!(g.value(u).elems(), &[2.5; 4]);
        assert!(dr(&mut g, &s, &SodaConfig::new(3, 1, 8), xv).is_err());
    }

    #[test]
    fn stage_one_ratio_reduces_tokens_64x_and_keeps_time() {
        let cfg = SodaConfig::new(8, 1, 8);
        assert_eq!(cfg.reduced_grid([8, 16, 16]).unwrap(), [8, 2, 2]);
        assert_eq!((8 * 16 * 16) / (8 * 2 * 2), 64);
    }

    #[test]
    fn output_dims_match_input_for_every_ratio_and_mode() {
        for mode in [
            DrMode::MeanPool2d,
            DrMode::Conv2d,
            DrMode::Conv3d,
            DrMode::R2Plus1d,
        ] {
            for r in RATIOS {
                let cfg = SodaConfig {
                    dr_mode: mode,
                    ..SodaConfig::new(4, 2, r)
                };
                let ps = setup(&cfg, 3);
                let mut g = Graph::<f64>::new();
                let b = g.bind(&ps);
                let x = g.constant(
                    Rng::new(r as u64)
                        .normal_tensor(&[2, 4, 8, 8, 4], 1.0)
                        .unwrap(),
                );
                let (y, ctx) = soda_forward(&mut g, &b.scope("soda"), &cfg, x).unwrap();
                assert_eq!(g.dims(y), g.dims(x), "{mode} s={r}");
                assert_eq!(ctx.grid[0], 4 / mode.time_ratio());
            }
        }
    }

    #[test]
    fn identical_frames_give_uniform_frame_similarity() {
        let cfg = SodaConfig::new(4, 2, 2);
        let ps = setup(&cfg, 5);
        let frame = Rng::new(9)
            .normal_tensor::<f64>(&[1, 1, 4, 4, 4], 1.0)
            .unwrap();
        let t = 5;
        let clip = Tensor::from_fn([1, t, 4, 4, 4], |i| frame.elems()[i % 64]).unwrap();
        let mut g = Graph::<f64>::new();
        let b = g.bind(&ps);
        let x = g.constant(clip);
        let (_, ctx) = soda_forward(&mut g, &b.scope("soda"), &cfg, x).unwrap();
        let a = frame_similarity(&mut g, &ctx, t).unwrap();
        for &v in g.value(a).elems() {
            assert!((v - 1.0 / t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_similarity_is_one() {
        let cfg = SodaConfig::new(4, 1, 2);
        let ps = setup(&cfg, 6);
        let mut g = Graph::<f64>::new();
        let b = g.bind(&ps);
        let x = g.constant(Rng::new(2).normal_tensor(&[3, 1, 4, 4, 4], 1.0).unwrap());
        let (_, ctx) = soda_forward(&mut g, &b.scope("soda"), &cfg, x).unwrap();
        let a = frame_similarity(&mut g, &ctx, 1).unwrap();
        assert_eq!(g.dims(a), &[3, 1, 1]);
        assert!(g.value(a).elems().iter().all(|&v| v == 1.0));
        assert!(frame_similarity(&mut g, &ctx, 3).is_err());
    }

    #[test]
    fn non_finite_input_is_a_contract_error() {
        let cfg = SodaConfig::new(4, 1, 1);
        let ps = setup(&cfg, 1);
        let mut g = Graph::<f64>::new();
        g.set_finite_checks(false);
        let b = g.bind(&ps);
        let mut e = vec![0.5; 16];
        e[3] = f64::INFINITY;
        let x = g.constant(Tensor::new([1, 1, 2, 2, 4], e).unwrap());
        assert!(soda_forward(&mut g, &b.scope("soda"), &cfg, x).is_err());
    }
}
