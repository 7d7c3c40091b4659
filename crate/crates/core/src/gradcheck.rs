//! Central finite-difference gradient checks at double precision.
//!
//! The numeric side only ever runs forward passes on fresh constant graphs,
//! so it shares nothing with the backward routines it checks.

use std::fmt;

use crate::error::Result;
use crate::gaze::{MdConvConfig, Pattern};
use crate::glance::SodaConfig;
use crate::model::{self, BlockConfig, ModelConfig};
use crate::numerics::ops::Conv3dSpec;
use crate::numerics::params::Init;
use crate::numerics::{Bindings, Direction, Graph, ParamSet, Rng, Tensor, Var};

pub const STEP: f64 = 1e-4;

/// `|analytic − numeric| / (|numeric| + 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub component: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max rel err {:.3e} over {} entries",
            self.component, self.max_rel_err, self.checked
        )
    }
}

/// Which scalar entries of the inputs to probe.
pub enum Probe<'a> {
    All,
    /// `count` entries drawn uniformly without replacement over all inputs.
    Sample {
        count: usize,
        rng: &'a mut Rng,
    },
}

/// Compares the graph gradient of a scalar loss against central differences.
///
/// `build` receives one leaf per input tensor and must return the loss.
pub fn check<B>(
    component: &str,
    inputs: &[Tensor<f64>],
    build: B,
    probe: Probe<'_>,
) -> Result<CheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &leaves)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|&v| grads.get(v)).collect();

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if let Probe::Sample { count, rng } = probe {
        rng.shuffle(&mut coords);
        coords.truncate(count);
        coords.sort_unstable();
    }

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, j) in &coords {
        let base = inputs[i].elems()[j];
        let bumped = |delta: f64| {
            let mut e = inputs[i].elems().to_vec();
            e[j] = base + delta;
            Tensor::new(inputs[i].dims().to_vec(), e)
        };
        work[i] = bumped(STEP)?;
        let up = eval(&work)?;
        work[i] = bumped(-STEP)?;
        let down = eval(&work)?;
        work[i] = inputs[i].clone();
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i].elems()[j], numeric));
    }
    Ok(CheckReport {
        component: component.to_string(),
        max_rel_err: worst,
        checked: coords.len(),
    })
}

/// `sum(weights ⊙ x)` with a fixed random weight tensor, so every output
/// entry contributes a distinct generic amount to the loss.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, rng: &mut Rng) -> Result<Var> {
    let w = rng.uniform_tensor::<f64>(g.dims(x), -1.0, 1.0)?;
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum_all(p)
}

/// Where GELU' vanishes the relative error measures only the truncation error
/// of the central difference, so test inputs keep this distance from the minimum.
const GELU_MARGIN: f64 = 0.05;
const GELU_ARGMIN: f64 = -0.752_461_422_071_016_3;

fn away_from_gelu_minimum(v: f64) -> f64 {
    let d = v - GELU_ARGMIN;
    if d.abs() < GELU_MARGIN {
        GELU_ARGMIN + GELU_MARGIN.copysign(d)
    } else {
        v
    }
}

/// Finite-difference checks for every differentiable primitive on random
/// instances of 10²–10³ entries.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let root = Rng::new(seed);
    let mut out = Vec::new();
    let mut case = |name: &str,
                    dims: &[&[usize]],
                    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let key = out.len() as u64;
        let mut rng = root.split(key);
        let mut inputs = dims
            .iter()
            .map(|d| rng.normal_tensor::<f64>(d, 1.0))
            .collect::<Result<Vec<_>>>()?;
        if name == "gelu" {
            inputs[0] = inputs[0].map(away_from_gelu_minimum);
        }
        let wseed = rng.split(u64::MAX);
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let y = f(g, v)?;
            weighted_sum(g, y, &mut wseed.clone())
        };
        out.push(check(name, &inputs, build, Probe::All)?);
        Ok(())
    };

    case("matmul", &[&[2, 6, 5], &[5, 7]], &|g, v| {
        g.matmul(v[0], v[1])
    })?;
    case("add (broadcast)", &[&[4, 5, 6], &[5, 1]], &|g, v| {
        g.add(v[0], v[1])
    })?;
    case("mul (broadcast)", &[&[4, 5, 6], &[1, 6]], &|g, v| {
        g.mul(v[0], v[1])
    })?;
    case("scale", &[&[10, 12]], &|g, v| g.scale(v[0], -1.75))?;
    case("gelu", &[&[10, 15]], &|g, v| g.gelu(v[0]))?;
    case("softmax_last", &[&[12, 9]], &|g, v| g.softmax_last(v[0]))?;
    case("layer_norm", &[&[12, 8], &[8], &[8]], &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    })?;
    case("reshape+permute", &[&[3, 4, 5, 2]], &|g, v| {
        let r = g.reshape(v[0], &[12, 10])?;
        let r = g.reshape(r, &[3, 4, 10])?;
        g.permute(r, &[2, 0, 1])
    })?;
    case(
        "conv3d dense",
        &[&[1, 4, 5, 5, 2], &[3, 3, 3, 2, 3], &[3]],
        &|g, v| g.conv3d(v[0], v[1], Some(v[2]), &Conv3dSpec::new([1; 3], [1; 3], 1)),
    )?;
    case(
        "conv3d strided",
        &[&[2, 4, 6, 6, 2], &[3, 3, 3, 2, 4], &[4]],
        &|g, v| {
            g.conv3d(
                v[0],
                v[1],
                Some(v[2]),
                &Conv3dSpec::new([2, 2, 2], [1, 1, 1], 1),
            )
        },
    )?;
    case(
        "conv3d depthwise",
        &[&[1, 4, 5, 5, 3], &[3, 3, 3, 1, 3], &[3]],
        &|g, v| g.conv3d(v[0], v[1], Some(v[2]), &Conv3dSpec::same([3, 3, 3], 3)),
    )?;
    case(
        "conv3d grouped",
        &[&[1, 3, 4, 4, 4], &[1, 3, 3, 2, 6]],
        &|g, v| g.conv3d(v[0], v[1], None, &Conv3dSpec::new([1, 1, 1], [0, 1, 1], 2)),
    )?;
    case("resample down", &[&[1, 4, 8, 8, 3]], &|g, v| {
        g.resample_spatial(v[0], 4, Direction::Down)
    })?;
    case("resample up", &[&[1, 3, 2, 3, 4]], &|g, v| {
        g.resample_spatial(v[0], 2, Direction::Up)
    })?;
    case("resample temporal", &[&[1, 4, 4, 4, 2]], &|g, v| {
        let d = g.resample(v[0], 2, 2, Direction::Down)?;
        g.resample(d, 2, 1, Direction::Up)
    })?;
    case("adaptive_pool2d", &[&[3, 7, 5]], &|g, v| {
        g.adaptive_pool2d(v[0], 3, 4)
    })?;
    case("mean_axis", &[&[3, 5, 7]], &|g, v| g.mean_axis(v[0], 1))?;
    case("slice+concat", &[&[4, 5, 6], &[2, 5, 6]], &|g, v| {
        let a = g.slice(v[0], 0, 1, 2)?;
        let b = g.slice(v[0], 2, 3, 3)?;
        let b = g.reshape(b, &[4, 5, 3])?;
        let c = g.concat(&[a, v[1]], 0)?;
        let c = g.slice(c, 2, 0, 3)?;
        g.concat(&[b, c], 0)
    })?;
    {
        let mut rng = root.split(1000);
        let logits = rng.normal_tensor::<f64>(&[16, 5], 1.5)?;
        let labels: Vec<usize> = (0..16).map(|i| (i * 3) % 5).collect();
        out.push(check(
            "cross_entropy",
            &[logits],
            |g, v| g.cross_entropy(v[0], &labels, 0.1),
            Probe::All,
        )?);
    }
    Ok(out)
}

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;
pub const MODEL_SAMPLE: usize = 50;

/// Block used by [`block_suite`]: 8 channels, 2 heads, downsample ratio 2.
pub fn block_config(pattern: Pattern, train_frames: usize) -> BlockConfig {
    let mut soda = SodaConfig::new(8, 2, 2);
    soda.qkv_bias = true;
    BlockConfig {
        channels: 8,
        mlp_ratio: 4,
        soda,
        mdconv: MdConvConfig {
            pattern,
            ..MdConvConfig::new(8, train_frames)
        },
    }
}

/// Every parameter and input entry of a block on a `[1,4,8,8,8]` input, with
/// the modulation pooling both at identity and resampling.
pub fn block_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let root = Rng::new(seed);
    let mut out = Vec::new();
    let cases = [
        ("block dyn2d3d", Pattern::Dyn2d3d, 4),
        ("block dyn2d3d pooled A'", Pattern::Dyn2d3d, 3),
        ("block factorized3d", Pattern::Factorized3d, 4),
    ];
    for (k, (name, pattern, frames)) in cases.into_iter().enumerate() {
        let cfg = block_config(pattern, frames);
        let mut rng = root.split(k as u64);
        let mut ps = ParamSet::<f64>::new();
        model::init_block(&mut Init::new(&mut ps, &mut rng), &cfg)?;
        let ps = perturb_zeros(&ps, &mut rng)?;
        let z = rng.normal_tensor::<f64>(&[1, 4, 8, 8, 8], 1.0)?;
        let names: Vec<String> = ps.names().map(str::to_string).collect();
        let mut inputs = vec![z];
        inputs.extend(ps.iter().map(|(_, t)| t.clone()));
        let wrng = rng.split(u64::MAX);
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let b = Bindings::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
            let (y, _) = model::block_forward(g, &b.scope(""), &cfg, v[0], 0.0, None)?;
            weighted_sum(g, y, &mut wrng.clone())
        };
        out.push(check(name, &inputs, build, Probe::All)?);
    }
    Ok(out)
}

/// Zero-initialized biases and shifts get small random values so that every
/// path carries a generic gradient.
fn perturb_zeros(ps: &ParamSet<f64>, rng: &mut Rng) -> Result<ParamSet<f64>> {
    let mut out = ParamSet::new();
    for (name, t) in ps.iter() {
        let t = if t.elems().iter().all(|&v| v == 0.0) {
            rng.normal_tensor(t.dims(), 0.1)?
        } else {
            t.clone()
        };
        out.insert(name, t)?;
    }
    Ok(out)
}

/// `count` parameter entries of a model drawn uniformly over all parameters.
pub fn model_suite(cfg: &ModelConfig, seed: u64, count: usize) -> Result<CheckReport> {
    let root = Rng::new(seed);
    let ps = perturb_zeros(&model::init_model::<f64>(cfg, seed)?, &mut root.split(0))?;
    let video = root.split(1).uniform_tensor::<f64>(
        &[1, cfg.t_in, cfg.h_in, cfg.w_in, cfg.in_channels],
        0.0,
        1.0,
    )?;
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = ps.iter().map(|(_, t)| t.clone()).collect();
    let wrng = root.split(2);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let b = Bindings::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let x = g.constant(video.clone());
        let fwd = model::model_forward(g, &b, cfg, x, None)?;
        weighted_sum(g, fwd.logits, &mut wrng.clone())
    };
    let mut prng = root.split(3);
    check(
        "model",
        &inputs,
        build,
        Probe::Sample {
            count,
            rng: &mut prng,
        },
    )
}
