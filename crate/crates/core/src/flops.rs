//! Closed-form multiply-accumulate counts, keyed by the same labels the graph
//! uses when it tallies executed MACs.
//!
//! Only matrix products and convolutions are counted. FLOPs are reported as
//! `2 × MACs`.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::Result;
use crate::gaze::{MdConvConfig, Pattern, MODULATION_HIDDEN};
use crate::glance::{DrMode, SodaConfig};
use crate::model::{self, block_prefix, transition_prefix, ModelConfig, STEM_KERNEL};
use crate::numerics::{Graph, Rng};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsReport {
    pub components: BTreeMap<String, u64>,
}

impl FlopsReport {
    fn add(&mut self, key: impl Into<String>, macs: u64) {
        if macs > 0 {
            *self.components.entry(key.into()).or_default() += macs;
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.components.values().sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    /// Sum over components whose label ends with `.{suffix}`.
    pub fn sum_suffix(&self, suffix: &str) -> u64 {
        let dotted = format!(".{suffix}");
        self.components
            .iter()
            .filter(|(k, _)| k.ends_with(&dotted))
            .map(|(_, v)| v)
            .sum()
    }

    /// `QKᵀ + AV` terms.
    pub fn attention_matrix_macs(&self) -> u64 {
        self.sum_suffix("qk") + self.sum_suffix("av")
    }

    /// QKV and output projection terms.
    pub fn projection_macs(&self) -> u64 {
        self.sum_suffix("qkv") + self.sum_suffix("proj")
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>16} {:>16}", "component", "MACs", "FLOPs")?;
        for (k, v) in &self.components {
            writeln!(f, "{k:<34} {v:>16} {:>16}", 2 * v)?;
        }
        write!(
            f,
            "{:<34} {:>16} {:>16}",
            "total",
            self.total_macs(),
            self.total_flops()
        )
    }
}

fn p(xs: &[usize]) -> u64 {
    xs.iter().map(|&x| x as u64).product()
}

/// SoDA terms for one sample on grid `(T, H, W)`, labelled `{prefix}.{part}`.
pub fn soda_macs(
    report: &mut FlopsReport,
    prefix: &str,
    cfg: &SodaConfig,
    grid: [usize; 3],
) -> Result<()> {
    let [tr, hr, wr] = cfg.reduced_grid(grid)?;
    let (c, s) = (cfg.channels, cfg.ratio);
    let n = p(&[tr, hr, wr]);
    let c64 = c as u64;
    let dr = match cfg.dr_mode {
        DrMode::MeanPool2d => 0,
        DrMode::Conv2d => p(&[tr, hr, wr, c, s, s]),
        DrMode::Conv3d => p(&[tr, hr, wr, c, 2, s, s]),
        DrMode::R2Plus1d => p(&[grid[0], hr, wr, c, s, s]) + p(&[tr, hr, wr, c, 2]),
    };
    report.add(format!("{prefix}.dr"), dr);
    report.add(format!("{prefix}.qkv"), 3 * n * c64 * c64);
    report.add(format!("{prefix}.qk"), n * n * c64);
    report.add(format!("{prefix}.av"), n * n * c64);
    report.add(format!("{prefix}.proj"), n * c64 * c64);
    Ok(())
}

/// MDConv terms for one sample whose `A′` has `frames` frames.
pub fn mdconv_macs(report: &mut FlopsReport, prefix: &str, cfg: &MdConvConfig, grid: [usize; 3]) {
    let n = p(&grid);
    let c = cfg.channels as u64;
    let cin = (cfg.channels / cfg.groups) as u64;
    let [kd, kh, kw] = cfg.kernel;
    report.add(format!("{prefix}.in_proj"), n * c * c);
    if cfg.pattern == Pattern::Dyn2d3d {
        let t2 = p(&[cfg.train_frames, cfg.train_frames]);
        report.add(
            format!("{prefix}.modulation"),
            t2 * MODULATION_HIDDEN as u64 + MODULATION_HIDDEN as u64 * 2,
        );
    }
    let taps = match cfg.pattern {
        Pattern::Factorized3d => p(&[kh, kw]) + kd as u64,
        _ => p(&[kd, kh, kw]),
    };
    report.add(format!("{prefix}.conv"), n * c * taps * cin);
}

/// Analytic MACs for one clip at the configured input extents.
pub fn count_flops(cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let mut r = FlopsReport::default();
    let grids = cfg.stage_grids()?;
    let [kd, kh, kw] = STEM_KERNEL;
    r.add(
        "stem",
        p(&grids[0]) * p(&[cfg.stem_channels, kd, kh, kw, cfg.in_channels]),
    );
    for (i, st) in cfg.stages.iter().enumerate() {
        let grid = grids[i];
        if i > 0 {
            let cin = cfg.stages[i - 1].channels;
            r.add(transition_prefix(i), p(&grid) * p(&[st.channels, 9, cin]));
        }
        for j in 0..st.depth {
            let b = cfg.block_config(i, j)?;
            let prefix = block_prefix(i, j);
            soda_macs(&mut r, &format!("{prefix}.glance"), &b.soda, grid)?;
            mdconv_macs(&mut r, &format!("{prefix}.gaze"), &b.mdconv, grid);
            let c = b.channels as u64;
            r.add(
                format!("{prefix}.ffn"),
                2 * p(&grid) * c * c * b.mlp_ratio as u64,
            );
        }
    }
    let last = cfg.stages.last().expect("validated").channels;
    r.add("head", p(&[last, cfg.num_classes]));
    Ok(r)
}

/// MACs tallied while actually running one random clip through the model.
pub fn instrumented(cfg: &ModelConfig, seed: u64) -> Result<FlopsReport> {
    let params = model::init_model::<f64>(cfg, seed)?;
    let video = Rng::new(seed).uniform_tensor::<f64>(
        &[1, cfg.t_in, cfg.h_in, cfg.w_in, cfg.in_channels],
        0.0,
        1.0,
    )?;
    let mut g = Graph::new();
    let b = g.bind_frozen(&params);
    let v = g.constant(video);
    model::model_forward(&mut g, &b, cfg, v, None)?;
    Ok(FlopsReport {
        components: g
            .macs()
            .iter()
            .filter(|(_, &v)| v > 0)
            .map(|(k, &v)| (k.clone(), v))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glance::RATIOS;

    #[test]
    fn tiny_desk_totals() {
        let r = count_flops(&ModelConfig::tiny_desk(2)).unwrap();
        assert_eq!(r.total_macs(), r.components.values().sum::<u64>());
        assert_eq!(r.components["stem"], 8 * 16 * 16 * 32 * 3 * 7 * 7 * 3);
        assert_eq!(r.components["stage0.block0.glance.qk"], 32 * 32 * 32);
        assert_eq!(r.total_flops(), 2 * r.total_macs());
    }

    #[test]
    fn attention_terms_scale_with_ratio() {
        let grid = [4, 16, 16];
        let at = |s: usize| {
            let mut r = FlopsReport::default();
            soda_macs(&mut r, "x", &SodaConfig::new(8, 2, s), grid).unwrap();
            r
        };
        let base = at(1);
        for s in RATIOS {
            let r = at(s);
            let s2 = (s * s) as u64;
            assert_eq!(
                r.attention_matrix_macs() * s2 * s2,
                base.attention_matrix_macs()
            );
            assert_eq!(r.projection_macs() * s2, base.projection_macs());
        }
    }
}
