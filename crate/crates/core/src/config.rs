//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, lists are comma separated.
//! Unknown keys are errors so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StageConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries
                .insert(key.to_string(), (n + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|(line, v)| {
                v.parse().map_err(|_| {
                    Error::Config(format!("line {line}: invalid value `{v}` for `{key}`"))
                })
            })
            .transpose()
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.entries
            .get(key)
            .map(|(line, v)| {
                v.split(',')
                    .map(|p| {
                        p.trim().parse().map_err(|_| {
                            Error::Config(format!(
                                "line {line}: invalid list item `{p}` for `{key}`"
                            ))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self
            .entries
            .iter()
            .find(|(k, _)| !known.contains(&k.as_str()))
        {
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

pub const MODEL_KEYS: [&str; 19] = [
    "model.t_in",
    "model.h_in",
    "model.w_in",
    "model.in_channels",
    "model.stem_channels",
    "model.depths",
    "model.dims",
    "model.heads",
    "model.ratios",
    "model.num_classes",
    "model.mlp_ratio",
    "model.dr_mode",
    "model.pattern",
    "model.mdconv_kernel",
    "model.mdconv_groups",
    "model.qkv_bias",
    "model.drop_path",
    "model.input_mode",
    "model.preset",
];

/// Model settings; `model.preset = tiny_desk` (the default) supplies every
/// value not given explicitly.
pub fn model_from_kv(kv: &KeyValues) -> Result<ModelConfig> {
    match kv.raw("model.preset").unwrap_or("tiny_desk") {
        "tiny_desk" => {}
        other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
    }
    let mut m = ModelConfig::tiny_desk(kv.get("model.num_classes")?.unwrap_or(2));
    kv.set("model.t_in", &mut m.t_in)?;
    kv.set("model.h_in", &mut m.h_in)?;
    kv.set("model.w_in", &mut m.w_in)?;
    kv.set("model.in_channels", &mut m.in_channels)?;
    kv.set("model.stem_channels", &mut m.stem_channels)?;
    kv.set("model.mlp_ratio", &mut m.mlp_ratio)?;
    kv.set("model.dr_mode", &mut m.dr_mode)?;
    kv.set("model.pattern", &mut m.pattern)?;
    kv.set("model.qkv_bias", &mut m.qkv_bias)?;
    kv.set("model.drop_path", &mut m.drop_path)?;
    kv.set("model.input_mode", &mut m.input_mode)?;
    if let Some(k) = kv.list::<usize>("model.mdconv_kernel")? {
        m.mdconv_kernel = k
            .try_into()
            .map_err(|_| Error::Config("model.mdconv_kernel needs three values".into()))?;
    }
    if let Some(g) = kv.raw("model.mdconv_groups") {
        m.mdconv_groups = match g {
            "depthwise" => None,
            n => Some(
                n.parse()
                    .map_err(|_| Error::Config(format!("invalid model.mdconv_groups `{n}`")))?,
            ),
        };
    }

    let current = |f: fn(&StageConfig) -> usize| m.stages.iter().map(f).collect::<Vec<_>>();
    let depths = kv
        .list("model.depths")?
        .unwrap_or_else(|| current(|s| s.depth));
    let dims = kv
        .list("model.dims")?
        .unwrap_or_else(|| current(|s| s.channels));
    let heads = kv
        .list("model.heads")?
        .unwrap_or_else(|| current(|s| s.heads));
    let ratios = kv
        .list("model.ratios")?
        .unwrap_or_else(|| current(|s| s.ratio));
    let n = depths.len();
    if dims.len() != n || heads.len() != n || ratios.len() != n {
        return Err(Error::Config(
            "model.depths, model.dims, model.heads and model.ratios must have equal length".into(),
        ));
    }
    m.stages = (0..n)
        .map(|i| StageConfig {
            depth: depths[i],
            channels: dims[i],
            heads: heads[i],
            ratio: ratios[i],
        })
        .collect();
    m.validate()?;
    Ok(m)
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Writes every model key so the text reproduces `m` exactly.
pub fn model_to_text(m: &ModelConfig, out: &mut String) {
    let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write to string");
    line("model.t_in", m.t_in.to_string());
    line("model.h_in", m.h_in.to_string());
    line("model.w_in", m.w_in.to_string());
    line("model.in_channels", m.in_channels.to_string());
    line("model.stem_channels", m.stem_channels.to_string());
    line("model.depths", join(m.stages.iter().map(|s| s.depth)));
    line("model.dims", join(m.stages.iter().map(|s| s.channels)));
    line("model.heads", join(m.stages.iter().map(|s| s.heads)));
    line("model.ratios", join(m.stages.iter().map(|s| s.ratio)));
    line("model.num_classes", m.num_classes.to_string());
    line("model.mlp_ratio", m.mlp_ratio.to_string());
    line("model.dr_mode", m.dr_mode.to_string());
    line("model.pattern", m.pattern.to_string());
    line("model.mdconv_kernel", join(m.mdconv_kernel));
    line(
        "model.mdconv_groups",
        m.mdconv_groups
            .map_or("depthwise".into(), |g| g.to_string()),
    );
    line("model.qkv_bias", m.qkv_bias.to_string());
    line("model.drop_path", format!("{:?}", m.drop_path));
    line("model.input_mode", m.input_mode.to_string());
}

/// Where training and validation clips come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generated order task.
    SyntheticOrder,
    /// A directory holding `train/` and `val/` dataset dumps.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub data: DataSource,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Record real elapsed time in the metrics `seconds` column. Off by default
    /// so metrics files are reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny_desk(2),
            base_lr: 3e-4,
            weight_decay: 0.02,
            epochs: 30,
            warmup_epochs: 2,
            batch_size: 16,
            seed: 0,
            label_smoothing: 0.0,
            data: DataSource::SyntheticOrder,
            train_per_class: 200,
            val_per_class: 100,
            wall_clock: false,
        }
    }
}

const TRAIN_KEYS: [&str; 14] = [
    "optimizer",
    "schedule",
    "base_lr",
    "weight_decay",
    "epochs",
    "warmup_epochs",
    "batch_size",
    "seed",
    "label_smoothing",
    "data",
    "train_per_class",
    "val_per_class",
    "wall_clock",
    "note",
];

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let known: Vec<&str> = TRAIN_KEYS.iter().chain(&MODEL_KEYS).copied().collect();
        kv.reject_unknown(&known)?;
        match kv.raw("optimizer").unwrap_or("adamw") {
            "adamw" => {}
            o => return Err(Error::Config(format!("unsupported optimizer `{o}`"))),
        }
        match kv.raw("schedule").unwrap_or("cosine") {
            "cosine" => {}
            s => return Err(Error::Config(format!("unsupported schedule `{s}`"))),
        }
        let mut c = TrainConfig {
            model: model_from_kv(kv)?,
            ..Self::default()
        };
        kv.set("base_lr", &mut c.base_lr)?;
        kv.set("weight_decay", &mut c.weight_decay)?;
        kv.set("epochs", &mut c.epochs)?;
        kv.set("warmup_epochs", &mut c.warmup_epochs)?;
        kv.set("batch_size", &mut c.batch_size)?;
        kv.set("seed", &mut c.seed)?;
        kv.set("label_smoothing", &mut c.label_smoothing)?;
        kv.set("train_per_class", &mut c.train_per_class)?;
        kv.set("val_per_class", &mut c.val_per_class)?;
        kv.set("wall_clock", &mut c.wall_clock)?;
        if let Some(d) = kv.raw("data") {
            c.data = match d {
                "synthetic_order" => DataSource::SyntheticOrder,
                path => DataSource::Dir(PathBuf::from(path)),
            };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad("need epochs >= 1 and warmup_epochs < epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || self.weight_decay < 0.0 {
            return bad("label_smoothing in [0,1) and weight_decay >= 0 required");
        }
        if self.data == DataSource::SyntheticOrder
            && (self.train_per_class == 0 || self.val_per_class == 0)
        {
            return bad("train_per_class and val_per_class must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        line("optimizer", "adamw".into());
        line("schedule", "cosine".into());
        line("base_lr", format!("{:?}", self.base_lr));
        line("weight_decay", format!("{:?}", self.weight_decay));
        line("epochs", self.epochs.to_string());
        line("warmup_epochs", self.warmup_epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("seed", self.seed.to_string());
        line("label_smoothing", format!("{:?}", self.label_smoothing));
        line(
            "data",
            match &self.data {
                DataSource::SyntheticOrder => "synthetic_order".into(),
                DataSource::Dir(p) => p.display().to_string(),
            },
        );
        line("train_per_class", self.train_per_class.to_string());
        line("val_per_class", self.val_per_class.to_string());
        line("wall_clock", self.wall_clock.to_string());
        model_to_text(&self.model, &mut s);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::Pattern;

    #[test]
    fn parses_comments_lists_and_overrides() {
        let kv = KeyValues::parse(
            "# desk run\nepochs = 12   # short\nmodel.depths = 1, 1, 1, 1\nmodel.pattern = only3d\n\nbase_lr=1e-3\n",
        )
        .unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(c.epochs, 12);
        assert_eq!(c.base_lr, 1e-3);
        assert_eq!(c.model.pattern, Pattern::Only3d);
        assert_eq!(
            c.model.stages.iter().map(|s| s.depth).collect::<Vec<_>>(),
            [1, 1, 1, 1]
        );
        assert_eq!(c.batch_size, 16);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig {
            seed: 7,
            label_smoothing: 0.1,
            ..TrainConfig::default()
        };
        c.model.mdconv_groups = Some(4);
        c.model.drop_path = 0.1;
        let back = TrainConfig::from_kv(&KeyValues::parse(&c.to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_line() {
        let e = KeyValues::parse("a = 1\nnot a pair\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2"), "{e}");
        let kv = KeyValues::parse("epochs = 3\nepoch = 4\n").unwrap();
        assert!(TrainConfig::from_kv(&kv)
            .unwrap_err()
            .to_string()
            .contains("unknown key `epoch`"));
        let kv = KeyValues::parse("epochs = 2\nwarmup_epochs = 2\n").unwrap();
        assert!(TrainConfig::from_kv(&kv).is_err());
        assert!(KeyValues::parse("a = 1\na = 2\n").is_err());
    }
}
