//! Flat `key = value` run configuration shared by every command.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{AugmentOptions, JitterPolicy, NegativePolicy, Neighborhood, PatchGeometry, SynthConfig};
use crate::error::{Error, Result};
use crate::net::{HeadMode, NetConfig};
use crate::predict::ScoreNorm;
use crate::train::TrainConfig;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    /// Part of the configuration hash (false for paths and thread counts).
    pub hashed: bool,
}

const fn key(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help, hashed: true }
}

const fn local(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help, hashed: false }
}

pub const KEYS: &[KeySpec] = &[
    key("seed", "0", "root seed; every random component derives from it"),
    local("data_root", "data", "dataset directory (synth output, LITIV root)"),
    local("folds", "", "fold spec file (default: <data_root>/folds.txt)"),
    key("fold", "fold1", "fold name(s), comma separated; litiv2014:K / litiv2018:K select the built-in protocols"),
    local("out", "runs", "output directory"),
    local("checkpoint", "", "checkpoint path; {fold} expands to the fold name (default: <out>/{fold}/best.ckpt)"),
    local("threads", "0", "worker threads (0: all cores)"),
    key("patch", "36", "square patch side in pixels"),
    key("disp_max", "64", "width added to the LWIR patch at inference (candidates = disp_max + 1)"),
    key("channels", "32,64,64,64,128,128,256,256,256", "output channels of conv1..conv9"),
    key("kernels", "5,5,5,5,5,5,5,5,4", "kernel sizes of conv1..conv9"),
    key("head_hidden", "128,64", "hidden widths of the classification heads"),
    key("bn_eps", "1e-5", "batch-norm epsilon"),
    key("bn_momentum", "0.1", "batch-norm running-statistics momentum"),
    key("heads", "both", "trained and evaluated heads: both, corr or concat"),
    key("epochs", "200", "training epochs"),
    key("batch_size", "128", "mini-batch size"),
    key("lr0", "0.01", "initial learning rate"),
    key("halve_every", "40", "epochs between learning-rate halvings"),
    key("beta1", "0.9", "Adam first-moment decay"),
    key("beta2", "0.999", "Adam second-moment decay"),
    key("adam_eps", "1e-8", "Adam epsilon"),
    key("score_norm", "sum", "candidate score normalization: sum or softmax"),
    local("thresholds", "1,3,5", "recall thresholds in pixels"),
    key("cross", "cross", "cross duplication neighborhood: cross, diagonal or none"),
    key("mirror", "true", "horizontal mirroring augmentation"),
    key("jitter", "sample", "positive jitter: sample (one of -1/0/+1) or all"),
    key("neg_min", "10", "smallest negative offset in pixels"),
    key("neg_max", "30", "largest negative offset in pixels"),
    key("neg_literal", "false", "negative placement (x + o, x - d + o) instead of shifting the LWIR patch"),
    key("synth_sequences", "3", "synthetic sequences"),
    key("synth_frames", "60", "frames per synthetic sequence"),
    key("synth_width", "192", "synthetic frame width"),
    key("synth_height", "96", "synthetic frame height"),
    key("synth_points", "2", "annotated points per synthetic frame"),
    key("synth_disp_lo", "-20", "smallest synthetic disparity"),
    key("synth_disp_hi", "20", "largest synthetic disparity"),
    key("synth_noise", "0.02", "synthetic pixel noise standard deviation"),
    key("synth_validation_images", "10", "validation frames per synthetic fold"),
];

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|k| (k.key.to_string(), k.default.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key_spec(key).is_none() {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}"))))
            .collect()
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the result-affecting keys.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if key_spec(k).is_some_and(|s| s.hashed) {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.value("seed")
    }

    pub fn data_root(&self) -> PathBuf {
        PathBuf::from(self.get("data_root"))
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn folds_path(&self) -> PathBuf {
        match self.get("folds") {
            "" => self.data_root().join("folds.txt"),
            p => PathBuf::from(p),
        }
    }

    pub fn fold_names(&self) -> Result<Vec<String>> {
        let names: Vec<String> = self.list("fold")?;
        if names.is_empty() {
            return Err(Error::Config("fold: no fold given".into()));
        }
        Ok(names)
    }

    pub fn checkpoint_path(&self, fold: &str) -> PathBuf {
        match self.get("checkpoint") {
            "" => self.out().join(fold_dir(fold)).join("best.ckpt"),
            p => PathBuf::from(p.replace("{fold}", &fold_dir(fold))),
        }
    }

    pub fn threads(&self) -> Result<usize> {
        self.value("threads")
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.value("patch")?, self.value("disp_max")?)
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let cfg = NetConfig {
            channels: self.list("channels")?,
            kernels: self.list("kernels")?,
            head_hidden: self.list("head_hidden")?,
            patch: self.value("patch")?,
            bn_eps: self.value("bn_eps")?,
            bn_momentum: self.value("bn_momentum")?,
            ..NetConfig::reference()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn heads(&self) -> Result<HeadMode> {
        self.value("heads")
    }

    pub fn score_norm(&self) -> Result<ScoreNorm> {
        self.value("score_norm")
    }

    pub fn thresholds(&self) -> Result<Vec<f64>> {
        let t: Vec<f64> = self.list("thresholds")?;
        if t.is_empty() || t.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("thresholds must be a non-empty list of non-negative numbers".into()));
        }
        Ok(t)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr0: self.value("lr0")?,
            halve_every: self.value("halve_every")?,
            epochs: self.value("epochs")?,
            batch_size: self.value("batch_size")?,
            seed: self.seed()?,
            heads: self.heads()?,
            beta1: self.value("beta1")?,
            beta2: self.value("beta2")?,
            adam_eps: self.value("adam_eps")?,
            score_norm: self.score_norm()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment_options(&self) -> Result<AugmentOptions> {
        let cross = match self.get("cross") {
            "cross" => Some(Neighborhood::Cross),
            "diagonal" => Some(Neighborhood::Diagonal),
            "none" => None,
            other => return Err(Error::Config(format!("cross: expected cross, diagonal or none, got {other:?}"))),
        };
        let jitter = match self.get("jitter") {
            "sample" => JitterPolicy::Sample,
            "all" => JitterPolicy::All,
            other => return Err(Error::Config(format!("jitter: expected sample or all, got {other:?}"))),
        };
        let negatives = NegativePolicy {
            min_offset: self.value("neg_min")?,
            max_offset: self.value("neg_max")?,
            literal: self.value("neg_literal")?,
            ..NegativePolicy::default()
        };
        if negatives.min_offset < 1 || negatives.min_offset > negatives.max_offset {
            return Err(Error::Config("negative offsets need 1 <= neg_min <= neg_max".into()));
        }
        Ok(AugmentOptions { cross, mirror: self.value("mirror")?, jitter, negatives })
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            width: self.value("synth_width")?,
            height: self.value("synth_height")?,
            sequences: self.value("synth_sequences")?,
            frames: self.value("synth_frames")?,
            points_per_frame: self.value("synth_points")?,
            disp_lo: self.value("synth_disp_lo")?,
            disp_hi: self.value("synth_disp_hi")?,
            noise: self.value("synth_noise")?,
            validation_images: self.value("synth_validation_images")?,
            geometry: self.geometry()?,
            seed: self.seed()?,
            ..SynthConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Directory-safe form of a fold name (`litiv2014:1` -> `litiv2014-1`).
pub fn fold_dir(fold: &str) -> String {
    fold.replace([':', '/', '\\'], "-")
}
