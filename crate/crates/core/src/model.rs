//! Conv stem, glance/gaze blocks, hierarchical stages and the linear head.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gaze::{self, MdConvConfig, Modulation, Pattern};
use crate::glance::{self, DrMode, SodaConfig};
use crate::numerics::ops::Conv3dSpec;
use crate::numerics::params::{self, Bindings, Init, Scope};
use crate::numerics::{Element, Graph, ParamSet, Rng, Tensor, Var};

pub const STEM_KERNEL: [usize; 3] = [3, 7, 7];
pub const STEM_STRIDE: [usize; 3] = [2, 4, 4];
pub const STEM_PADDING: [usize; 3] = [1, 3, 3];
pub const TRANSITION_KERNEL: [usize; 3] = [1, 3, 3];
pub const TRANSITION_STRIDE: [usize; 3] = [1, 2, 2];
pub const TRANSITION_PADDING: [usize; 3] = [0, 1, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    pub ratio: usize,
}

/// What the stem sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputMode {
    #[default]
    Full,
    /// Frames are averaged (and the average repeated in time) before the stem,
    /// which removes all frame-order information.
    FrameMean,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Full => "full",
            InputMode::FrameMean => "frame_mean",
        })
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(InputMode::Full),
            "frame_mean" => Ok(InputMode::FrameMean),
            other => Err(Error::Config(format!("unknown input_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub t_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub dr_mode: DrMode,
    pub pattern: Pattern,
    pub mdconv_kernel: [usize; 3],
    /// `None` means depthwise.
    pub mdconv_groups: Option<usize>,
    pub qkv_bias: bool,
    pub drop_path: f64,
    pub input_mode: InputMode,
}

impl ModelConfig {
    /// 16×64×64 clips, four stages of widths 32..256.
    pub fn tiny_desk(num_classes: usize) -> Self {
        let depths = [1, 1, 2, 1];
        let dims = [32, 64, 128, 256];
        let heads = [1, 2, 4, 8];
        let ratios = [8, 4, 2, 1];
        Self {
            t_in: 16,
            h_in: 64,
            w_in: 64,
            in_channels: 3,
            stem_channels: 32,
            stages: (0..4)
                .map(|i| StageConfig {
                    depth: depths[i],
                    channels: dims[i],
                    heads: heads[i],
                    ratio: ratios[i],
                })
                .collect(),
            num_classes,
            mlp_ratio: 4,
            dr_mode: DrMode::MeanPool2d,
            pattern: Pattern::Dyn2d3d,
            mdconv_kernel: [3, 3, 3],
            mdconv_groups: None,
            qkv_bias: true,
            drop_path: 0.0,
            input_mode: InputMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.stem_channels != self.stages[0].channels {
            return bad(format!(
                "stem_channels {} must equal first stage channels {}",
                self.stem_channels, self.stages[0].channels
            ));
        }
        if self.t_in % 2 != 0 || self.h_in % 4 != 0 || self.w_in % 4 != 0 {
            return bad(format!(
                "input {}x{}x{} must have even T and H, W divisible by 4",
                self.t_in, self.h_in, self.w_in
            ));
        }
        if self.num_classes < 2 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return bad("num_classes >= 2, mlp_ratio >= 1 and in_channels >= 1 required".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.depth == 0 {
                return bad(format!("stage {i} has depth 0"));
            }
            let grid = self.stage_grid_at(i, self.t_in, self.h_in, self.w_in)?;
            let blk = self.block_config(i, 0)?;
            blk.soda.validate()?;
            blk.mdconv.validate()?;
            blk.soda.reduced_grid(grid)?;
        }
        Ok(())
    }

    /// Token grid `(T, H, W)` of stage `i` for an input of the given extents.
    pub fn stage_grid_at(&self, stage: usize, t: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        let f = 4 << stage;
        if t % 2 != 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(
                "model",
                format!("input {t}x{h}x{w} not divisible for stage {stage} (T by 2, H/W by {f})"),
            ));
        }
        Ok([t / 2, h / f, w / f])
    }

    pub fn stage_grids(&self) -> Result<Vec<[usize; 3]>> {
        (0..self.stages.len())
            .map(|i| self.stage_grid_at(i, self.t_in, self.h_in, self.w_in))
            .collect()
    }

    /// Frame count of `A′` at the training clip length.
    pub fn similarity_frames(&self) -> usize {
        (self.t_in / 2 / self.dr_mode.time_ratio()).max(1)
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    pub fn block_config(&self, stage: usize, _index: usize) -> Result<BlockConfig> {
        let st = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::Config(format!("stage {stage} out of range")))?;
        let c = st.channels;
        let soda = SodaConfig {
            channels: c,
            heads: st.heads,
            ratio: st.ratio,
            dr_mode: self.dr_mode,
            qkv_bias: self.qkv_bias,
        };
        let mdconv = MdConvConfig {
            channels: c,
            kernel: self.mdconv_kernel,
            groups: self.mdconv_groups.unwrap_or(c),
            pattern: self.pattern,
            train_frames: self.similarity_frames(),
        };
        Ok(BlockConfig {
            channels: c,
            mlp_ratio: self.mlp_ratio,
            soda,
            mdconv,
        })
    }

    /// `(stage, index, parameter prefix)` of every block in execution order.
    pub fn blocks(&self) -> Vec<(usize, usize, String)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            for j in 0..st.depth {
                out.push((i, j, block_prefix(i, j)));
            }
        }
        out
    }
}

pub fn block_prefix(stage: usize, index: usize) -> String {
    format!("stage{stage}.block{index}")
}

pub fn transition_prefix(stage: usize) -> String {
    format!("stage{stage}.down")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub mlp_ratio: usize,
    pub soda: SodaConfig,
    pub mdconv: MdConvConfig,
}

pub fn init_block<F: Element>(init: &mut Init<'_, F>, cfg: &BlockConfig) -> Result<()> {
    let c = cfg.channels;
    if cfg.soda.channels != c || cfg.mdconv.channels != c {
        return Err(Error::Config(
            "block, soda and mdconv channels differ".into(),
        ));
    }
    init.layer_norm("norm1", c)?;
    glance::init_soda(&mut init.pp("glance"), &cfg.soda)?;
    gaze::init_mdconv(&mut init.pp("gaze"), &cfg.mdconv)?;
    init.layer_norm("norm2", c)?;
    init.linear("ffn.fc1", c, cfg.mlp_ratio * c, true)?;
    init.linear("ffn.fc2", cfg.mlp_ratio * c, c, true)
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_model<F: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<F>> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let root = Rng::new(seed);
    let c0 = cfg.stem_channels;
    {
        let mut rng = root.split(0);
        let mut init = Init::new(&mut ps, &mut rng);
        let [kd, kh, kw] = STEM_KERNEL;
        let fan = kd * kh * kw * cfg.in_channels;
        init.normal(
            "stem.conv.w",
            &[kd, kh, kw, cfg.in_channels, c0],
            1.0 / (fan as f64).sqrt(),
        )?;
        init.zeros("stem.conv.b", &[c0])?;
        init.layer_norm("stem.norm", c0)?;
    }
    for (k, (i, j, prefix)) in cfg.blocks().into_iter().enumerate() {
        if i > 0 && j == 0 {
            let mut rng = root.split(1000 + i as u64);
            let mut init = Init::new(&mut ps, &mut rng);
            let mut t = init.pp(transition_prefix(i));
            let (cin, cout) = (cfg.stages[i - 1].channels, cfg.stages[i].channels);
            let fan = 9 * cin;
            t.normal("conv.w", &[1, 3, 3, cin, cout], 1.0 / (fan as f64).sqrt())?;
            t.zeros("conv.b", &[cout])?;
            t.layer_norm("norm", cout)?;
        }
        let mut rng = root.split(1 + k as u64);
        init_block(
            &mut Init::new(&mut ps, &mut rng).pp(&prefix),
            &cfg.block_config(i, j)?,
        )?;
    }
    let mut rng = root.split(2000);
    let last = cfg.stages.last().expect("validated").channels;
    Init::new(&mut ps, &mut rng).linear("head", last, cfg.num_classes, true)?;
    Ok(ps)
}

/// Zeroes every weight that feeds a block's residual branches: the glance
/// value and output projections, the gaze kernels and bias, and the second
/// FFN layer. Each block then computes the identity.
pub fn zero_branch_outputs<F: Element>(cfg: &ModelConfig, ps: &mut ParamSet<F>) -> Result<()> {
    const LEAVES: [&str; 10] = [
        "glance.v.w",
        "glance.v.b",
        "glance.o.w",
        "glance.o.b",
        "gaze.w2d",
        "gaze.w3d",
        "gaze.w_temporal",
        "gaze.b",
        "ffn.fc2.w",
        "ffn.fc2.b",
    ];
    for (_, _, prefix) in cfg.blocks() {
        for leaf in LEAVES {
            let name = format!("{prefix}.{leaf}");
            if let Some(t) = ps.get(&name) {
                let z = Tensor::zeros(t.dims().to_vec())?;
                ps.set(&name, z)?;
            }
        }
    }
    Ok(())
}

/// Stem convolution before its layer norm.
pub fn stem_conv<F: Element>(g: &mut Graph<F>, s: &Scope<'_>, v: Var) -> Result<Var> {
    let spec = Conv3dSpec::new(STEM_STRIDE, STEM_PADDING, 1);
    g.conv3d(v, s.get("conv.w")?, Some(s.get("conv.b")?), &spec)
}

/// `[B,T,H,W,3] → [B,T/2,H/4,W/4,C_emb]`.
pub fn patch_embed<F: Element>(g: &mut Graph<F>, s: &Scope<'_>, v: Var) -> Result<Var> {
    match g.dims(v) {
        &[_, t, h, w, _] if t % 2 == 0 && h % 4 == 0 && w % 4 == 0 => {}
        d => {
            return Err(Error::shape(
                "patch_embed",
                format!("input {d:?} needs even T and H, W divisible by 4"),
            ))
        }
    }
    let y = stem_conv(g, s, v)?;
    params::layer_norm(g, &s.pp("norm"), y)
}

/// Per-block values recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub prefix: String,
    /// `[B, T′, T′]`
    pub frame_similarity: Var,
    pub modulation: Option<Modulation>,
}

/// Multiplies each sample of `x` by `keep/(1−p)` with `keep ~ Bernoulli(1−p)`.
fn drop_path<F: Element>(g: &mut Graph<F>, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let b = g.dims(x)[0];
    let mut shape = vec![1; g.dims(x).len()];
    shape[0] = b;
    let mask = Tensor::from_fn(shape, |_| {
        if rng.uniform() >= p {
            F::lit(1.0 / (1.0 - p))
        } else {
            F::zero()
        }
    })?;
    let m = g.constant(mask);
    g.mul(x, m)
}

/// `z + glance(u) + gaze(u, A′)` then `+ FFN(LN(·))`, with `u = LN(z)`.
pub fn block_forward<F: Element>(
    g: &mut Graph<F>,
    s: &Scope<'_>,
    cfg: &BlockConfig,
    z: Var,
    drop: f64,
    mut rng: Option<&mut Rng>,
) -> Result<(Var, BlockTrace)> {
    let dims = g.dims(z).to_vec();
    if dims.len() != 5 || dims[4] != cfg.channels {
        return Err(Error::mismatch("block", &dims, &[cfg.channels]));
    }
    let base = g.scope().to_string();
    let u = params::layer_norm(g, &s.pp("norm1"), z)?;

    g.set_scope(format!("{base}.glance"));
    let (glance_out, ctx) = glance::soda_forward(g, &s.pp("glance"), &cfg.soda, u)?;
    let a = glance::frame_similarity(g, &ctx, ctx.grid[0])?;

    g.set_scope(format!("{base}.gaze"));
    let gaze_out = gaze::mdconv_forward(g, &s.pp("gaze"), &cfg.mdconv, u, Some(a))?;

    let gl = drop_path(g, glance_out, drop, rng.as_deref_mut())?;
    let gz = drop_path(g, gaze_out.y, drop, rng.as_deref_mut())?;
    let z1 = g.add(z, gl)?;
    let z1 = g.add(z1, gz)?;

    g.set_scope(format!("{base}.ffn"));
    let h = params::layer_norm(g, &s.pp("norm2"), z1)?;
    let h = params::linear(g, &s.pp("ffn.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = params::linear(g, &s.pp("ffn.fc2"), h)?;
    let h = drop_path(g, h, drop, rng)?;
    let out = g.add(z1, h)?;
    g.set_scope(base);
    Ok((
        out,
        BlockTrace {
            prefix: s.prefix().to_string(),
            frame_similarity: a,
            modulation: gaze_out.modulation,
        },
    ))
}

/// Stage transition: strided `(1,3,3)` conv then layer norm.
pub fn transition<F: Element>(g: &mut Graph<F>, s: &Scope<'_>, z: Var) -> Result<Var> {
    let spec = Conv3dSpec::new(TRANSITION_STRIDE, TRANSITION_PADDING, 1);
    let y = g.conv3d(z, s.get("conv.w")?, Some(s.get("conv.b")?), &spec)?;
    params::layer_norm(g, &s.pp("norm"), y)
}

/// Global mean over `(T,H,W)` followed by the linear classifier.
pub fn head<F: Element>(g: &mut Graph<F>, s: &Scope<'_>, z: Var) -> Result<Var> {
    let &[b, t, h, w, c] = g.dims(z) else {
        return Err(Error::shape(
            "head",
            format!("expected [B,T,H,W,C], got {:?}", g.dims(z)),
        ));
    };
    let flat = g.reshape(z, &[b, t * h * w, c])?;
    let pooled = g.mean_axis(flat, 1)?;
    params::linear(g, s, pooled)
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, num_classes]`
    pub logits: Var,
    pub blocks: Vec<BlockTrace>,
}

/// Full forward pass over `video: [B,T,H,W,C_in]`. Drop path is active only
/// when `train_rng` is given. MACs are tallied under `stem`, `<block>.glance.*`,
/// `<block>.gaze.*`, `<block>.ffn`, `stage<i>.down` and `head`.
pub fn model_forward<F: Element>(
    g: &mut Graph<F>,
    b: &Bindings,
    cfg: &ModelConfig,
    video: Var,
    mut train_rng: Option<&mut Rng>,
) -> Result<Forward> {
    let &[bs, t, h, w, c] = g.dims(video) else {
        return Err(Error::shape(
            "model",
            format!("expected [B,T,H,W,C], got {:?}", g.dims(video)),
        ));
    };
    if c != cfg.in_channels {
        return Err(Error::mismatch(
            "model input channels",
            g.dims(video),
            &[cfg.in_channels],
        ));
    }
    for i in 0..cfg.stages.len() {
        cfg.stage_grid_at(i, t, h, w)?;
    }
    let root = b.scope("");
    let outer = g.scope().to_string();
    let x = match cfg.input_mode {
        InputMode::Full => video,
        InputMode::FrameMean => {
            let m = g.mean_axis(video, 1)?;
            let m = g.reshape(m, &[bs, 1, h, w, c])?;
            g.resample(m, t, 1, crate::Direction::Up)?
        }
    };
    g.set_scope("stem");
    let mut z = patch_embed(g, &root.pp("stem"), x)?;

    let n_blocks = cfg.num_blocks();
    let mut traces = Vec::with_capacity(n_blocks);
    for (k, (i, j, prefix)) in cfg.blocks().into_iter().enumerate() {
        if i > 0 && j == 0 {
            let tp = transition_prefix(i);
            g.set_scope(tp.clone());
            z = transition(g, &root.pp(tp), z)?;
        }
        let rate = if n_blocks > 1 {
            cfg.drop_path * k as f64 / (n_blocks - 1) as f64
        } else {
            cfg.drop_path
        };
        g.set_scope(prefix.clone());
        let (out, trace) = block_forward(
            g,
            &root.pp(&prefix),
            &cfg.block_config(i, j)?,
            z,
            rate,
            train_rng.as_deref_mut(),
        )?;
        z = out;
        traces.push(trace);
    }
    g.set_scope("head");
    let logits = head(g, &root.pp("head"), z)?;
    g.set_scope(outer);
    Ok(Forward {
        logits,
        blocks: traces,
    })
}

/// Evaluation-only forward from plain tensors.
pub fn infer<F: Element>(
    cfg: &ModelConfig,
    ps: &ParamSet<F>,
    video: &Tensor<F>,
) -> Result<Inference<F>> {
    let mut g = Graph::new();
    let b = g.bind_frozen(ps);
    let v = g.constant(video.clone());
    let fwd = model_forward(&mut g, &b, cfg, v, None)?;
    Ok(Inference {
        logits: g.value(fwd.logits).clone(),
        frame_similarity: fwd
            .blocks
            .iter()
            .map(|t| g.value(t.frame_similarity).clone())
            .collect(),
        pool_paths: fwd
            .blocks
            .iter()
            .map(|t| t.modulation.map(|m| m.path))
            .collect(),
    })
}

#[derive(Clone, Debug)]
pub struct Inference<F: Element> {
    pub logits: Tensor<F>,
    /// One `[B, T′, T′]` tensor per block, in execution order.
    pub frame_similarity: Vec<Tensor<F>>,
    pub pool_paths: Vec<Option<gaze::PoolPath>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scaled-down config used by the unit tests.
    pub(crate) fn small() -> ModelConfig {
        let mut cfg = ModelConfig::tiny_desk(2);
        cfg.t_in = 4;
        cfg.h_in = 32;
        cfg.w_in = 32;
        cfg.stem_channels = 8;
        let dims = [8, 16, 16, 16];
        let ratios = [2, 2, 1, 1];
        for (i, st) in cfg.stages.iter_mut().enumerate() {
            st.depth = 1;
            st.channels = dims[i];
            st.heads = if i == 0 { 1 } else { 2 };
            st.ratio = ratios[i];
        }
        cfg
    }

    #[test]
    fn tiny_desk_grids() {
        let cfg = ModelConfig::tiny_desk(2);
        cfg.validate().unwrap();
        assert_eq!(
            cfg.stage_grids().unwrap(),
            vec![[8, 16, 16], [8, 8, 8], [8, 4, 4], [8, 2, 2]]
        );
        assert_eq!(cfg.similarity_frames(), 8);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::tiny_desk(2);
        cfg.h_in = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny_desk(2);
        cfg.stages[1].heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny_desk(2);
        cfg.stem_channels = 16;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stem_is_linear_before_norm() {
        let cfg = ModelConfig::tiny_desk(2);
        let ps = init_model::<f64>(&cfg, 0).unwrap();
        let mut g = Graph::<f64>::new();
        let b = g.bind_frozen(&ps);
        let s = b.scope("stem");
        let x = Rng::new(1)
            .uniform_tensor::<f64>(&[1, 16, 64, 64, 3], 0.0, 1.0)
            .unwrap();
        let xv = g.constant(x.clone());
        let x2 = g.constant(x.map(|v| 2.0 * v));
        let zero = g.constant(Tensor::zeros([1, 16, 64, 64, 3]).unwrap());
        let y = stem_conv(&mut g, &s, xv).unwrap();
        let y2 = stem_conv(&mut g, &s, x2).unwrap();
        let y0 = stem_conv(&mut g, &s, zero).unwrap();
        assert_eq!(g.dims(y), &[1, 8, 16, 16, 32]);
        assert!(g.value(y0).elems().iter().all(|&v| v == 0.0));
        assert!(g.value(y2).max_abs_diff(&g.value(y).map(|v| 2.0 * v)) < 1e-12);
        let e = patch_embed(&mut g, &s, xv).unwrap();
        assert_eq!(g.dims(e), &[1, 8, 16, 16, 32]);
    }

    #[test]
    fn zeroed_branches_make_blocks_identity() {
        let cfg = small();
        let mut ps = init_model::<f64>(&cfg, 3).unwrap();
        zero_branch_outputs(&cfg, &mut ps).unwrap();
        let bcfg = cfg.block_config(1, 0).unwrap();
        let mut g = Graph::<f64>::new();
        let b = g.bind_frozen(&ps);
        let z = g.constant(Rng::new(2).normal_tensor(&[2, 2, 4, 4, 16], 1.0).unwrap());
        let (y, _) = block_forward(&mut g, &b.scope("stage1.block0"), &bcfg, z, 0.0, None).unwrap();
        assert_eq!(g.value(y), g.value(z));
    }

    #[test]
    fn logits_shape_batch_permutation_and_determinism() {
        let cfg = small();
        let ps = init_model::<f64>(&cfg, 4).unwrap();
        let video = Rng::new(5)
            .uniform_tensor::<f64>(&[3, 4, 32, 32, 3], 0.0, 1.0)
            .unwrap();
        let out = infer(&cfg, &ps, &video).unwrap();
        assert_eq!(out.logits.dims(), &[3, 2]);
        assert_eq!(out.frame_similarity.len(), 4);
        assert_eq!(
            infer(&cfg, &init_model::<f64>(&cfg, 4).unwrap(), &video)
                .unwrap()
                .logits,
            out.logits
        );

        let per = video.numel() / 3;
        let e = video.elems();
        let swapped: Vec<f64> = [2, 0, 1]
            .iter()
            .flat_map(|&i| e[i * per..(i + 1) * per].to_vec())
            .collect();
        let swapped = Tensor::new(video.dims().to_vec(), swapped).unwrap();
        let out2 = infer(&cfg, &ps, &swapped).unwrap();
        let l = out.logits.elems();
        let l2 = out2.logits.elems();
        for (k, &i) in [2, 0, 1].iter().enumerate() {
            for c in 0..2 {
                assert!((l2[k * 2 + c] - l[i * 2 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_mean_mode_ignores_frame_order() {
        let mut cfg = small();
        cfg.input_mode = InputMode::FrameMean;
        let ps = init_model::<f64>(&cfg, 6).unwrap();
        let video = Rng::new(7)
            .uniform_tensor::<f64>(&[1, 4, 32, 32, 3], 0.0, 1.0)
            .unwrap();
        let per = video.numel() / 4;
        let e = video.elems();
        let rev: Vec<f64> = (0..4)
            .rev()
            .flat_map(|t| e[t * per..(t + 1) * per].to_vec())
            .collect();
        let rev = Tensor::new(video.dims().to_vec(), rev).unwrap();
        let a = infer(&cfg, &ps, &video).unwrap().logits;
        let b = infer(&cfg, &ps, &rev).unwrap().logits;
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn drop_path_only_in_training() {
        let mut cfg = small();
        cfg.drop_path = 0.5;
        let ps = init_model::<f64>(&cfg, 8).unwrap();
        let video = Rng::new(9)
            .uniform_tensor::<f64>(&[4, 4, 32, 32, 3], 0.0, 1.0)
            .unwrap();
        let eval = infer(&cfg, &ps, &video).unwrap().logits;
        let mut g = Graph::<f64>::new();
        let b = g.bind_frozen(&ps);
        let v = g.constant(video.clone());
        let mut rng = Rng::new(1);
        let fwd = model_forward(&mut g, &b, &cfg, v, Some(&mut rng)).unwrap();
        assert!(g.value(fwd.logits).max_abs_diff(&eval) > 0.0);
    }
}
