//! Checkpoint directories: `tensors.ogt` (concatenated OGT1 records),
//! `manifest.csv` (`name,dims,offset`) and `config.txt` (model keys).
//!
//! Writes go to a sibling temporary directory that is renamed into place.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{self, KeyValues};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{ogt, Element, ParamSet};

pub const TENSORS: &str = "tensors.ogt";
pub const MANIFEST: &str = "manifest.csv";
pub const CONFIG: &str = "config.txt";

fn sibling(dir: &Path, tag: &str) -> Result<PathBuf> {
    let name = dir.file_name().ok_or_else(|| {
        Error::Config(format!(
            "checkpoint path {} has no file name",
            dir.display()
        ))
    })?;
    let mut n = name.to_os_string();
    n.push(format!(".{tag}-{}", std::process::id()));
    Ok(dir.with_file_name(n))
}

pub fn save<F: Element>(
    dir: impl AsRef<Path>,
    model: &ModelConfig,
    params: &ParamSet<F>,
) -> Result<()> {
    let dir = dir.as_ref();
    let tmp = sibling(dir, "tmp")?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    let mut blob = Vec::new();
    let mut manifest = String::from("name,dims,offset\n");
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name},{},{}\n", dims.join("x"), blob.len()));
        ogt::write_tensor(&mut blob, t)?;
    }
    let mut cfg = String::new();
    config::model_to_text(model, &mut cfg);
    for (file, bytes) in [
        (TENSORS, blob.as_slice()),
        (MANIFEST, manifest.as_bytes()),
        (CONFIG, cfg.as_bytes()),
    ] {
        let mut f = fs::File::create(tmp.join(file))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }

    let old = sibling(dir, "old")?;
    if dir.exists() {
        fs::rename(dir, &old)?;
    }
    fs::rename(&tmp, dir)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

pub struct Checkpoint<F: Element> {
    pub model: ModelConfig,
    pub params: ParamSet<F>,
}

pub fn load<F: Element>(dir: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    let dir = dir.as_ref();
    let read = |f: &str| {
        fs::read(dir.join(f))
            .map_err(|e| Error::Format(format!("checkpoint {}: {f}: {e}", dir.display())))
    };
    let blob = read(TENSORS)?;
    let manifest = String::from_utf8(read(MANIFEST)?)
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let cfg_text = String::from_utf8(read(CONFIG)?)
        .map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let kv = KeyValues::parse(&cfg_text)?;
    kv.reject_unknown(&config::MODEL_KEYS)?;
    let model = config::model_from_kv(&kv)?;

    let mut lines = manifest.lines();
    if lines.next() != Some("name,dims,offset") {
        return Err(Error::Format("checkpoint manifest header".into()));
    }
    let mut params = ParamSet::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("checkpoint manifest line `{line}`"));
        if f.len() != 3 {
            return Err(bad());
        }
        let dims: Vec<usize> = f[1]
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let offset: usize = f[2].parse().map_err(|_| bad())?;
        let mut slice = blob.get(offset..).ok_or_else(bad)?;
        let t = ogt::read_tensor::<F>(&mut slice)?;
        if t.dims() != dims {
            return Err(Error::mismatch("checkpoint tensor", t.dims(), &dims));
        }
        params.insert(f[0], t)?;
    }
    check_compatible(&model, &params)?;
    Ok(Checkpoint { model, params })
}

/// Every parameter the model needs is present with matching dims, and nothing else.
pub fn check_compatible<F: Element>(model: &ModelConfig, params: &ParamSet<F>) -> Result<()> {
    let fresh = crate::model::init_model::<f64>(model, 0)?;
    for (name, t) in fresh.iter() {
        let got = params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if got.dims() != t.dims() {
            return Err(Error::mismatch(
                "checkpoint parameter",
                got.dims(),
                t.dims(),
            ));
        }
    }
    if let Some(extra) = params.names().find(|n| !fresh.contains(n)) {
        return Err(Error::Format(format!(
            "checkpoint has unexpected parameter `{extra}`"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best");
        let mut cfg = ModelConfig::tiny_desk(3);
        cfg.stages.truncate(2);
        let ps = init_model::<f32>(&cfg, 1).unwrap();
        save(&path, &cfg, &ps).unwrap();
        let ck = load::<f32>(&path).unwrap();
        assert_eq!(ck.model, cfg);
        assert_eq!(ck.params, ps);

        let ps2 = init_model::<f32>(&cfg, 2).unwrap();
        save(&path, &cfg, &ps2).unwrap();
        assert_eq!(load::<f32>(&path).unwrap().params, ps2);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

        let wide = load::<f64>(&path).unwrap();
        assert_eq!(
            wide.params.get("head.w").unwrap().precision(),
            crate::Precision::Double
        );
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny_desk(2);
        let ps = init_model::<f32>(&cfg, 1).unwrap();
        save(dir.path().join("c"), &cfg, &ps).unwrap();
        let mut other = cfg.clone();
        other.num_classes = 3;
        assert!(check_compatible(&other, &ps).is_err());
    }
}
