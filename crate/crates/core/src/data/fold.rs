use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::geometry::PatchGeometry;
use super::normalize::Normalization;
use super::points::{load_sequence_dir, GroundTruthPoint};
use super::sampling::{AugmentOptions, AugmentReport, Corpus, SampleRef};
use crate::error::{Error, Result};
use crate::seed::component_rng;

/// Train / validation / test assignment of sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub name: String,
    pub train: Vec<String>,
    /// Sequences the validation images are drawn from.
    pub validation: Vec<String>,
    /// Number of validation images (frames), removed from training.
    pub validation_images: usize,
    pub test: Vec<String>,
}

const LITIV2014: [&str; 3] = ["litiv2014/vid01", "litiv2014/vid02", "litiv2014/vid03"];
const LITIV2018: [&str; 3] = ["litiv2018/vid04", "litiv2018/vid07", "litiv2018/vid08"];

fn builtin(name: &str, target: &[&str; 3], other: &[&str; 3], k: usize, validation_images: usize) -> Result<FoldSpec> {
    if !(1..=3).contains(&k) {
        return Err(Error::Config(format!("fold index must be 1, 2 or 3, got {k}")));
    }
    let test = target[k - 1].to_string();
    let rest: Vec<String> = target.iter().filter(|s| **s != test).map(|s| s.to_string()).collect();
    let mut train: Vec<String> = other.iter().map(|s| s.to_string()).collect();
    train.extend(rest.iter().cloned());
    Ok(FoldSpec { name: format!("{name}-fold{k}"), train, validation: rest, validation_images, test: vec![test] })
}

impl FoldSpec {
    /// LITIV 2014 protocol: test on one 2014 video, train on the other two
    /// plus every 2018 video, validate on 30 images of the 2014 training videos.
    pub fn litiv2014(k: usize) -> Result<Self> {
        builtin("litiv2014", &LITIV2014, &LITIV2018, k, 30)
    }

    /// LITIV 2018 protocol: the mirror image of [`FoldSpec::litiv2014`] with 150 validation images.
    pub fn litiv2018(k: usize) -> Result<Self> {
        builtin("litiv2018", &LITIV2018, &LITIV2014, k, 150)
    }

    /// Sequences referenced anywhere in the fold.
    pub fn sequences(&self) -> BTreeSet<&str> {
        self.train.iter().chain(&self.validation).chain(&self.test).map(String::as_str).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let test: HashSet<&str> = self.test.iter().map(String::as_str).collect();
        for s in self.train.iter().chain(&self.validation) {
            if test.contains(s.as_str()) {
                return Err(Error::FoldOverlap { fold: self.name.clone(), sequence: s.clone() });
            }
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Config(format!("fold {} needs at least one train and one test sequence", self.name)));
        }
        Ok(())
    }
}

/// A fold spec file: optional `root = <dir>` followed by `[fold]` sections
/// of `key = value` lines. Lists are comma-separated; `#` starts a comment.
///
/// ```text
/// root = .
/// [fold1]
/// train = seq01, seq02
/// validation = seq01, seq02
/// validation_images = 4
/// test = seq03
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldFile {
    /// Directory sequence ids are resolved against.
    pub root: PathBuf,
    pub folds: Vec<FoldSpec>,
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

impl FoldFile {
    /// Parses `text`; a relative `root` is resolved against `base`.
    pub fn parse(text: &str, base: &Path, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut root = base.to_path_buf();
        let mut folds: Vec<FoldSpec> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                folds.push(FoldSpec {
                    name: name.trim().to_string(),
                    train: vec![],
                    validation: vec![],
                    validation_images: 0,
                    test: vec![],
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(i + 1, format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match (folds.last_mut(), k) {
                (None, "root") => root = base.join(v),
                (None, _) => return Err(err(i + 1, format!("key {k} outside a [fold] section"))),
                (Some(f), "train") => f.train = list(v),
                (Some(f), "validation") => f.validation = list(v),
                (Some(f), "validation_images") => {
                    f.validation_images = v.parse().map_err(|_| err(i + 1, format!("invalid count {v:?}")))?
                }
                (Some(f), "test") => f.test = list(v),
                (Some(_), _) => return Err(err(i + 1, format!("unknown key {k}"))),
            }
        }
        if folds.is_empty() {
            return Err(err(0, "no [fold] sections".into()));
        }
        Ok(Self { root, folds })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// Serializes with `root = .` (sequence ids relative to the file).
    pub fn render(&self) -> String {
        let mut s = String::from("root = .\n");
        for f in &self.folds {
            let _ = write!(
                s,
                "\n[{}]\ntrain = {}\nvalidation = {}\nvalidation_images = {}\ntest = {}\n",
                f.name,
                f.train.join(", "),
                f.validation.join(", "),
                f.validation_images,
                f.test.join(", ")
            );
        }
        s
    }

    pub fn get(&self, name: &str) -> Result<&FoldSpec> {
        self.folds
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::Config(format!("no fold named {name} (available: {})", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<String> {
        self.folds.iter().map(|f| f.name.clone()).collect()
    }

    /// Loads every sequence the fold references into a new corpus.
    pub fn load_corpus(&self, fold: &FoldSpec, geometry: PatchGeometry) -> Result<Corpus> {
        let mut corpus = Corpus::new(geometry);
        for id in fold.sequences() {
            let mut seq = load_sequence_dir(&self.root.join(id), &geometry)?;
            seq.name = id.to_string();
            corpus.add(seq)?;
        }
        Ok(corpus)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldReport {
    pub augment: AugmentReport,
    /// `(sequence, frame)` of the validation images.
    pub validation_frames: Vec<(String, u32)>,
    pub unusable_train_points: usize,
    /// Query points whose widened patch leaves the frame.
    pub skipped_validation: usize,
    pub skipped_test: usize,
}

#[derive(Clone, Debug)]
pub struct FoldData {
    pub name: String,
    pub train: Vec<SampleRef>,
    pub validation: Vec<GroundTruthPoint>,
    pub test: Vec<GroundTruthPoint>,
    pub normalization: Normalization,
    pub report: FoldReport,
}

/// Splits the corpus per `spec`: augmented training samples, raw validation
/// points from `validation_images` seeded-random frames (removed from
/// training) and raw test points.
pub fn build_fold(spec: &FoldSpec, corpus: &mut Corpus, opts: &AugmentOptions, seed: u64) -> Result<FoldData> {
    spec.validate()?;
    let mut report = FoldReport::default();

    let mut candidates: Vec<(u32, u32)> = Vec::new();
    for name in &spec.validation {
        let id = corpus.id(name)?;
        let frames: BTreeSet<u32> = corpus.sequence(id).points.iter().map(|p| p.frame).collect();
        candidates.extend(frames.into_iter().map(|f| (id, f)));
    }
    let mut rng = component_rng(seed, "fold/validation");
    candidates.shuffle(&mut rng);
    candidates.truncate(spec.validation_images);
    candidates.sort_unstable();
    let held_out: HashSet<(u32, u32)> = candidates.iter().copied().collect();
    report.validation_frames = candidates.iter().map(|(s, f)| (corpus.sequence(*s).name.clone(), *f)).collect();

    let mut validation = Vec::new();
    for (s, f) in &candidates {
        for p in corpus.sequence(*s).points.iter().filter(|p| p.frame == *f) {
            if corpus.queryable(p) {
                validation.push(*p);
            } else {
                report.skipped_validation += 1;
            }
        }
    }

    let mut train_points = Vec::new();
    for name in &spec.train {
        let id = corpus.id(name)?;
        let seq = corpus.sequence(id);
        report.unusable_train_points += seq.unusable.iter().filter(|p| !held_out.contains(&(id, p.frame))).count();
        train_points.extend(seq.points.iter().filter(|p| !held_out.contains(&(id, p.frame))).copied());
    }
    if train_points.is_empty() {
        return Err(Error::Config(format!("fold {}: no usable training points", spec.name)));
    }

    let mut test = Vec::new();
    for name in &spec.test {
        let id = corpus.id(name)?;
        let seq = corpus.sequence(id);
        for p in seq.points.iter().chain(&seq.unusable) {
            if corpus.queryable(p) {
                test.push(*p);
            } else {
                report.skipped_test += 1;
            }
        }
    }

    let mut rng = component_rng(seed, "fold/augment");
    let (train, augment) = corpus.augment(&train_points, opts, &mut rng)?;
    report.augment = augment;
    let normalization = corpus.normalization(&train)?;
    Ok(FoldData { name: spec.name.clone(), train, validation, test, normalization, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn litiv_protocols() {
        let f1 = FoldSpec::litiv2014(1).unwrap();
        assert_eq!(f1.test, vec!["litiv2014/vid01"]);
        for s in ["litiv2014/vid02", "litiv2014/vid03", "litiv2018/vid04", "litiv2018/vid07", "litiv2018/vid08"] {
            assert!(f1.train.iter().any(|t| t == s), "{s}");
        }
        assert_eq!(f1.validation, vec!["litiv2014/vid02", "litiv2014/vid03"]);
        assert_eq!(f1.validation_images, 30);
        let g2 = FoldSpec::litiv2018(2).unwrap();
        assert_eq!(g2.test, vec!["litiv2018/vid07"]);
        assert_eq!(g2.validation, vec!["litiv2018/vid04", "litiv2018/vid08"]);
        assert_eq!(g2.validation_images, 150);
        assert_eq!(g2.train.len(), 5);
        assert!(FoldSpec::litiv2014(4).is_err());
        for k in 1..=3 {
            FoldSpec::litiv2014(k).unwrap().validate().unwrap();
            FoldSpec::litiv2018(k).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn overlap_is_rejected() {
        let mut f = FoldSpec::litiv2014(1).unwrap();
        f.train.push("litiv2014/vid01".into());
        assert!(matches!(f.validate(), Err(Error::FoldOverlap { .. })));
    }

    #[test]
    fn fold_file_round_trip() {
        let file = FoldFile { root: PathBuf::from("/data"), folds: vec![FoldSpec::litiv2014(2).unwrap(), FoldSpec::litiv2018(3).unwrap()] };
        let text = file.render();
        let back = FoldFile::parse(&text, Path::new("/data"), Path::new("folds.txt")).unwrap();
        assert_eq!(back.folds, file.folds);
        assert_eq!(back.root, PathBuf::from("/data/."));
        assert!(back.get("litiv2018-fold3").is_ok());
        assert!(back.get("nope").is_err());
        let bad = FoldFile::parse("[a]\ncolour = red\n", Path::new("."), Path::new("f.txt")).unwrap_err();
        assert!(bad.to_string().contains("f.txt:2"), "{bad}");
    }
}
