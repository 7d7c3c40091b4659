//! Gaze path: masked dynamic convolution (MDConv).
//!
//! A temporally masked "2D" kernel and a full 3D kernel are mixed per sample
//! by weights `(π2d, π3d)` predicted from the frame similarity `A′`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::ops::Conv3dSpec;
use crate::numerics::params::{self, Init, Scope};
use crate::numerics::{Element, Graph, Tensor, Var};

pub const MODULATION_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pattern {
    /// Per-sample mix of masked 2D and 3D kernels.
    #[default]
    Dyn2d3d,
    Only2d,
    Only3d,
    /// Static `π = (0.5, 0.5)`.
    Fixed5050,
    /// Spatial `(1,kh,kw)` conv followed by temporal `(kd,1,1)` conv.
    Factorized3d,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Dyn2d3d,
        Pattern::Only2d,
        Pattern::Only3d,
        Pattern::Fixed5050,
        Pattern::Factorized3d,
    ];
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Dyn2d3d => "dyn2d3d",
            Pattern::Only2d => "only2d",
            Pattern::Only3d => "only3d",
            Pattern::Fixed5050 => "fixed5050",
            Pattern::Factorized3d => "factorized3d",
        })
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mdconv pattern `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MdConvConfig {
    pub channels: usize,
    /// `(kd, kh, kw)`, `kd` odd.
    pub kernel: [usize; 3],
    pub groups: usize,
    pub pattern: Pattern,
    /// Frame count of `A′` during training; the modulation MLP input is `T_train²`.
    pub train_frames: usize,
}

impl MdConvConfig {
    /// Depthwise `3×3×3` with the dynamic pattern.
    pub fn new(channels: usize, train_frames: usize) -> Self {
        Self {
            channels,
            kernel: [3, 3, 3],
            groups: channels,
            pattern: Pattern::Dyn2d3d,
            train_frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [kd, kh, kw] = self.kernel;
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "mdconv kernel {:?} must have odd extents",
                self.kernel
            )));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by groups {}",
                self.channels, self.groups
            )));
        }
        if self.train_frames == 0 {
            return Err(Error::Config("mdconv train_frames must be positive".into()));
        }
        Ok(())
    }

    fn kernel_dims(&self, ext: [usize; 3]) -> [usize; 5] {
        [
            ext[0],
            ext[1],
            ext[2],
            self.channels / self.groups,
            self.channels,
        ]
    }
}

/// Binary temporal mask: ones on the central temporal slice only.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMask(Tensor<f64>);

impl KernelMask {
    /// Mask values `[kd, kh, kw]`.
    pub fn tensor(&self) -> &Tensor<f64> {
        &self.0
    }
}

pub fn build_mask(kd: usize, kh: usize, kw: usize) -> Result<KernelMask> {
    if kd % 2 == 0 {
        return Err(Error::Contract(format!(
            "mask temporal extent {kd} must be odd"
        )));
    }
    let centre = (kd - 1) / 2;
    let t = Tensor::from_fn([kd, kh, kw], |i| {
        if i / (kh * kw) == centre {
            1.0
        } else {
            0.0
        }
    })?;
    Ok(KernelMask(t))
}

pub fn init_mdconv<F: Element>(init: &mut Init<'_, F>, cfg: &MdConvConfig) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    let cin = c / cfg.groups;
    let [kd, kh, kw] = cfg.kernel;
    init.normal("w_in", &[c, c], 1.0 / (c as f64).sqrt())?;
    let std = |taps: usize| 1.0 / ((taps * cin) as f64).sqrt();
    match cfg.pattern {
        Pattern::Factorized3d => {
            init.normal("w_spatial", &cfg.kernel_dims([1, kh, kw]), std(kh * kw))?;
            init.normal("w_temporal", &cfg.kernel_dims([kd, 1, 1]), std(kd))?;
        }
        p => {
            if p != Pattern::Only3d {
                init.normal("w2d", &cfg.kernel_dims(cfg.kernel), std(kh * kw))?;
            }
            if p != Pattern::Only2d {
                init.normal("w3d", &cfg.kernel_dims(cfg.kernel), std(kd * kh * kw))?;
            }
        }
    }
    init.zeros("b", &[c])?;
    if cfg.pattern == Pattern::Dyn2d3d {
        let t2 = cfg.train_frames * cfg.train_frames;
        init.linear("mod.fc1", t2, MODULATION_HIDDEN, true)?;
        init.linear("mod.fc2", MODULATION_HIDDEN, 2, true)?;
    }
    Ok(())
}

/// How `A′` reached the modulation MLP's `T_train × T_train` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolPath {
    Identity,
    Resampled { from: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    /// `[B, 2]` rows `(π2d, π3d)`.
    pub pi: Var,
    pub path: PoolPath,
}

/// Predicts `(π2d, π3d)` per sample from `A′: [B, T′, T′]`.
pub fn modulation<F: Element>(
    g: &mut Graph<F>,
    s: &Scope<'_>,
    cfg: &MdConvConfig,
    a_prime: Var,
) -> Result<Modulation> {
    let dims = g.dims(a_prime).to_vec();
    let (b, t) = match dims.as_slice() {
        &[b, t, u] if t == u => (b, t),
        d => {
            return Err(Error::shape(
                "modulation",
                format!("expected [B,T,T], got {d:?}"),
            ))
        }
    };
    let tt = cfg.train_frames;
    let (pooled, path) = if t == tt {
        (a_prime, PoolPath::Identity)
    } else {
        (
            g.adaptive_pool2d(a_prime, tt, tt)?,
            PoolPath::Resampled { from: t },
        )
    };
    let flat = g.reshape(pooled, &[b, tt * tt])?;
    let h = params::linear(g, &s.pp("mod.fc1"), flat)?;
    let h = g.gelu(h)?;
    let logits = params::linear(g, &s.pp("mod.fc2"), h)?;
    let soft = g.softmax_last(logits)?;
    // π3d = 1 − π2d keeps the pair summing to one exactly in floating point
    let p2 = g.slice(soft, 1, 0, 1)?;
    let neg = g.scale(p2, -1.0)?;
    let one = g.constant(Tensor::ones([1, 1])?);
    let p3 = g.add(neg, one)?;
    let pi = g.concat(&[p2, p3], 1)?;
    Ok(Modulation { pi, path })
}

fn masked_2d<F: Element>(g: &mut Graph<F>, s: &Scope<'_>, cfg: &MdConvConfig) -> Result<Var> {
    let [kd, kh, kw] = cfg.kernel;
    let m = build_mask(kd, kh, kw)?.0.reshape([kd, kh, kw, 1, 1])?;
    let m = g.constant(m.cast());
    let w = s.get("w2d")?;
    g.mul(w, m)
}

fn same_spec(cfg: &MdConvConfig, ext: [usize; 3]) -> Conv3dSpec {
    Conv3dSpec::same(ext, cfg.groups)
}

/// Convolves each sample with `π2d·(M⊙W2d) + π3d·W3d` for `pi: [B, 2]`.
pub fn mixed_conv<F: Element>(
    g: &mut Graph<F>,
    s: &Scope<'_>,
    cfg: &MdConvConfig,
    z: Var,
    pi: Var,
) -> Result<Var> {
    let b = g.dims(z)[0];
    if g.dims(pi) != [b, 2] {
        return Err(Error::mismatch("mdconv pi", g.dims(pi), &[b, 2]));
    }
    let w2 = masked_2d(g, s, cfg)?;
    let w3 = s.get("w3d")?;
    let bias = s.get("b")?;
    let spec = same_spec(cfg, cfg.kernel);
    let mut outs = Vec::with_capacity(b);
    for i in 0..b {
        let zi = if b == 1 { z } else { g.slice(z, 0, i, 1)? };
        let row = g.slice(pi, 0, i, 1)?;
        let p2 = g.slice(row, 1, 0, 1)?;
        let p2 = g.reshape(p2, &[1, 1, 1, 1, 1])?;
        let p3 = g.slice(row, 1, 1, 1)?;
        let p3 = g.reshape(p3, &[1, 1, 1, 1, 1])?;
        let a = g.mul(w2, p2)?;
        let c = g.mul(w3, p3)?;
        let w = g.add(a, c)?;
        outs.push(g.conv3d(zi, w, Some(bias), &spec)?);
    }
    if b == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MdConvOutput {
    pub y: Var,
    /// Present for [`Pattern::Dyn2d3d`].
    pub modulation: Option<Modulation>,
}

/// MDConv over `z: [B,T,H,W,C]`; `a_prime` is required by the dynamic pattern.
pub fn mdconv_forward<F: Element>(
    g: &mut Graph<F>,
    s: &Scope<'_>,
    cfg: &MdConvConfig,
    z: Var,
    a_prime: Option<Var>,
) -> Result<MdConvOutput> {
    cfg.validate()?;
    match g.dims(z) {
        &[_, _, _, _, c] if c == cfg.channels => {}
        d => return Err(Error::mismatch("mdconv", d, &[cfg.channels])),
    }
    let base = g.scope().to_string();
    g.set_scope(format!("{base}.in_proj"));
    let zt = g.linear(z, s.get("w_in")?, None)?;

    let mut modulation = None;
    let pi = match cfg.pattern {
        Pattern::Dyn2d3d => {
            let a = a_prime.ok_or_else(|| Error::Contract("mdconv dyn2d3d requires A′".into()))?;
            g.set_scope(format!("{base}.modulation"));
            let m = modulation_checked(g, s, cfg, a, g.dims(z)[0])?;
            modulation = Some(m);
            Some(m.pi)
        }
        Pattern::Fixed5050 => {
            let b = g.dims(z)[0];
            Some(g.constant(Tensor::full([b, 2], F::lit(0.5))?))
        }
        _ => None,
    };

    g.set_scope(format!("{base}.conv"));
    let bias = s.get("b")?;
    let y = match (cfg.pattern, pi) {
        (_, Some(pi)) => mixed_conv(g, s, cfg, zt, pi)?,
        (Pattern::Only2d, None) => {
            let w = masked_2d(g, s, cfg)?;
            g.conv3d(zt, w, Some(bias), &same_spec(cfg, cfg.kernel))?
        }
        (Pattern::Only3d, None) => {
            g.conv3d(zt, s.get("w3d")?, Some(bias), &same_spec(cfg, cfg.kernel))?
        }
        (Pattern::Factorized3d, None) => {
            let [kd, kh, kw] = cfg.kernel;
            let y = g.conv3d(zt, s.get("w_spatial")?, None, &same_spec(cfg, [1, kh, kw]))?;
            g.conv3d(
                y,
                s.get("w_temporal")?,
                Some(bias),
                &same_spec(cfg, [kd, 1, 1]),
            )?
        }
        (p, None) => unreachable!("pattern {p} always has a mixing weight"),
    };
    g.set_scope(base);
    Ok(MdConvOutput { y, modulation })
}

fn modulation_checked<F: Element>(
    g: &mut Graph<F>,
    s: &Scope<'_>,
    cfg: &MdConvConfig,
    a: Var,
    batch: usize,
) -> Result<Modulation> {
    if g.dims(a).first() != Some(&batch) {
        return Err(Error::mismatch("mdconv A′ batch", g.dims(a), &[batch]));
    }
    modulation(g, s, cfg, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamSet, Rng};

    fn params(cfg: &MdConvConfig, seed: u64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(seed);
        init_mdconv(&mut Init::new(&mut ps, &mut rng), cfg).unwrap();
        ps
    }

    #[test]
    fn masks() {
        let m = build_mask(3, 3, 3).unwrap();
        let e = m.tensor().elems();
        assert!(e[..9].iter().all(|&v| v == 0.0));
        assert!(e[9..18].iter().all(|&v| v == 1.0));
        assert!(e[18..].iter().all(|&v| v == 0.0));
        assert!(build_mask(1, 3, 3)
            .unwrap()
            .tensor()
            .elems()
            .iter()
            .all(|&v| v == 1.0));
        assert_eq!(
            build_mask(5, 1, 1).unwrap().tensor().elems(),
            &[0.0, 0.0, 1.0, 0.0, 0.0]
        );
        assert!(matches!(build_mask(2, 3, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_mlp_gives_even_split() {
        let cfg = MdConvConfig::new(4, 3);
        let mut ps = params(&cfg, 1);
        for n in ["mod.fc1.w", "mod.fc2.w"] {
            let d = ps.get(n).unwrap().dims().to_vec();
            ps.set(n, Tensor::zeros(d).unwrap()).unwrap();
        }
        let mut g = Graph::<f64>::new();
        let b = g.bind(&ps);
        let a = g.constant(Rng::new(4).uniform_tensor(&[2, 3, 3], 0.0, 1.0).unwrap());
        let m = modulation(&mut g, &b.scope(""), &cfg, a).unwrap();
        assert_eq!(g.value(m.pi).elems(), &[0.5; 4]);
        assert_eq!(m.path, PoolPath::Identity);
    }

    #[test]
    fn constant_similarity_pools_to_same_pi() {
        let cfg = MdConvConfig::new(4, 3);
        let ps = params(&cfg, 2);
        let mut g = Graph::<f64>::new();
        let b = g.bind(&ps);
        let small = g.constant(Tensor::full([1, 3, 3], 0.25).unwrap());
        let big = g.constant(Tensor::full([1, 6, 6], 0.25).unwrap());
        let ms = modulation(&mut g, &b.scope(""), &cfg, small).unwrap();
        let mb = modulation(&mut g, &b.scope(""), &cfg, big).unwrap();
        assert_eq!(mb.path, PoolPath::Resampled { from: 6 });
        assert_eq!(g.value(ms.pi), g.value(mb.pi));
    }

    #[test]
    fn pi_sums_to_one_and_tracks_similarity() {
        let cfg = MdConvConfig::new(4, 4);
        let ps = params(&cfg, 3);
        let mut g = Graph::<f64>::new();
        let b = g.bind(&ps);
        let mut rng = Rng::new(8);
        let a1 = g.constant(rng.uniform_tensor(&[5, 4, 4], 0.0, 1.0).unwrap());
        let a2 = g.constant(rng.uniform_tensor(&[5, 4, 4], 0.0, 1.0).unwrap());
        let p1 = modulation(&mut g, &b.scope(""), &cfg, a1).unwrap().pi;
        let p2 = modulation(&mut g, &b.scope(""), &cfg, a2).unwrap().pi;
        for row in g.value(p1).elems().chunks(2) {
            assert_eq!(row[0] + row[1], 1.0);
            assert!((0.0..=1.0).contains(&row[0]) && (0.0..=1.0).contains(&row[1]));
        }
        assert_ne!(g.value(p1), g.value(p2));
    }

    #[test]
    fn every_pattern_preserves_dims() {
        for pattern in Pattern::ALL {
            let cfg = MdConvConfig {
                pattern,
                ..MdConvConfig::new(4, 3)
            };
            let ps = params(&cfg, 5);
            let mut g = Graph::<f64>::new();
            let b = g.bind(&ps);
            let z = g.constant(Rng::new(1).normal_tensor(&[2, 3, 4, 4, 4], 1.0).unwrap());
            let a = g.constant(Tensor::full([2, 3, 3], 1.0 / 3.0).unwrap());
            let out = mdconv_forward(&mut g, &b.scope(""), &cfg, z, Some(a)).unwrap();
            assert_eq!(g.dims(out.y), g.dims(z), "{pattern}");
            assert_eq!(out.modulation.is_some(), pattern == Pattern::Dyn2d3d);
            if pattern == Pattern::Dyn2d3d {
                assert!(mdconv_forward(&mut g, &b.scope(""), &cfg, z, None).is_err());
            }
        }
    }

    #[test]
    fn masked_kernel_gradient_vanishes_off_centre() {
        let cfg = MdConvConfig {
            pattern: Pattern::Only2d,
            ..MdConvConfig::new(2, 3)
        };
        let ps = params(&cfg, 6);
        let mut g = Graph::<f64>::new();
        let b = g.bind(&ps);
        let z = g.constant(Rng::new(2).normal_tensor(&[1, 3, 3, 3, 2], 1.0).unwrap());
        let out = mdconv_forward(&mut g, &b.scope(""), &cfg, z, None).unwrap();
        let loss = g.sum_all(out.y).unwrap();
        let grads = b.collect(&g.backward(loss).unwrap());
        let gw = grads.get("w2d").unwrap().elems();
        let slice = 9 * 2;
        assert!(gw[..slice]
            .iter()
            .chain(&gw[2 * slice..])
            .all(|&v| v == 0.0));
        assert!(gw[slice..2 * slice].iter().any(|&v| v != 0.0));
    }
}
