//! Widened-patch inference, disparity regression and recall evaluation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, FramePair, GroundTruthPoint, Normalization, PatchGeometry};
use crate::error::{Error, Result};
use crate::net::{HeadMode, SiameseNet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Tolerance on the total mass of a probability vector.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Reporting thresholds used for the LITIV 2014 folds.
pub const THRESHOLDS_2014: [f64; 3] = [1.0, 3.0, 5.0];
/// Reporting thresholds used for the LITIV 2018 folds.
pub const THRESHOLDS_2018: [f64; 2] = [1.0, 4.0];

/// How per-candidate match scores become a probability vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNorm {
    /// Divide by the sum of the scores.
    #[default]
    Sum,
    /// Softmax over candidates.
    Softmax,
}

impl fmt::Display for ScoreNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreNorm::Sum => "sum",
            ScoreNorm::Softmax => "softmax",
        })
    }
}

impl FromStr for ScoreNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ScoreNorm::Sum),
            "softmax" => Ok(ScoreNorm::Softmax),
            other => Err(Error::Config(format!("unknown score normalization {other:?} (expected sum or softmax)"))),
        }
    }
}

/// Turns non-negative scores into a probability vector. An all-zero score
/// vector carries no preference and becomes uniform.
pub fn normalize_scores(scores: &[f64], norm: ScoreNorm) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "normalize_scores" });
    }
    match norm {
        ScoreNorm::Sum => {
            if scores.iter().any(|&s| s < 0.0) {
                return Err(Error::Config("sum normalization needs non-negative scores".into()));
            }
            let total: f64 = scores.iter().sum();
            if total <= 0.0 {
                return Ok(vec![1.0 / scores.len() as f64; scores.len()]);
            }
            Ok(scores.iter().map(|s| s / total).collect())
        }
        ScoreNorm::Softmax => {
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = e.iter().sum();
            Ok(e.into_iter().map(|v| v / total).collect())
        }
    }
}

/// Expected candidate index under `p`.
pub fn regress_disparity(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = p.iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > NORMALIZATION_TOLERANCE || p.iter().any(|&v| v < 0.0) {
        return Err(Error::Unnormalized(total));
    }
    Ok(p.iter().enumerate().map(|(d, &pd)| d as f64 * pd).sum())
}

/// Mean of the active heads' estimates; `None` when neither head ran.
pub fn average_heads(d_corr: Option<f64>, d_concat: Option<f64>) -> Option<f64> {
    match (d_corr, d_concat) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    }
}

/// Fraction of predictions within `t` pixels of the ground truth.
pub fn recall(predictions: &[f64], ground_truth: &[f64], t: f64) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::LengthMismatch { left: predictions.len(), right: ground_truth.len() });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hits = predictions.iter().zip(ground_truth).filter(|(p, g)| (*p - *g).abs() <= t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Per-candidate "same" probabilities of each active head.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScores {
    pub corr: Option<Vec<f64>>,
    pub concat: Option<Vec<f64>>,
}

/// Disparity estimates in candidate-index units (`0..=disp_max`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisparityPrediction {
    pub d_corr: Option<f64>,
    pub d_concat: Option<f64>,
    pub d_final: f64,
    /// Index of the candidate aligned with the query column.
    pub center: f64,
}

impl DisparityPrediction {
    pub fn from_heads(d_corr: Option<f64>, d_concat: Option<f64>, center: f64) -> Result<Self> {
        let d_final = average_heads(d_corr, d_concat).ok_or_else(|| Error::Config("no active head".into()))?;
        Ok(Self { d_corr, d_concat, d_final, center })
    }

    /// Final estimate as an LWIR offset relative to the query column.
    pub fn signed(&self) -> f64 {
        self.d_final - self.center
    }

    pub fn signed_corr(&self) -> Option<f64> {
        self.d_corr.map(|d| d - self.center)
    }

    pub fn signed_concat(&self) -> Option<f64> {
        self.d_concat.map(|d| d - self.center)
    }
}

/// Eval-mode inference over all candidates of a query in one pass.
#[derive(Clone, Copy, Debug)]
pub struct Predictor<'a, T> {
    pub model: &'a SiameseNet<T>,
    pub normalization: &'a Normalization,
    pub geometry: PatchGeometry,
    pub heads: HeadMode,
    pub score_norm: ScoreNorm,
}

impl<'a, T: Scalar> Predictor<'a, T> {
    pub fn new(model: &'a SiameseNet<T>, normalization: &'a Normalization, geometry: PatchGeometry, heads: HeadMode) -> Self {
        Self { model, normalization, geometry, heads, score_norm: ScoreNorm::Sum }
    }

    pub fn with_score_norm(mut self, norm: ScoreNorm) -> Self {
        self.score_norm = norm;
        self
    }

    /// LWIR features of every widened-patch column, `[candidates, F]`, for
    /// an already normalized `[3, P, P + disp_max]` patch.
    pub fn lwir_columns(&self, wide: &[f32]) -> Result<Tensor<T>> {
        let g = &self.geometry;
        let x = Tensor::new([1, 3, g.patch, g.wide_width()], wide.iter().map(|&v| T::of(v as f64)).collect())?;
        let map = self.model.lwir.feature_map(&x)?;
        let (f, oh, ow) = (map.shape()[1], map.shape()[2], map.shape()[3]);
        if oh != 1 || ow != g.candidates() {
            return Err(Error::InvalidShape {
                op: "predict",
                msg: format!("widened patch gave a {oh}x{ow} feature map, expected 1x{}", g.candidates()),
            });
        }
        let src = map.data();
        Tensor::new([ow, f], (0..ow * f).map(|i| src[(i % f) * ow + i / f]).collect())
    }

    /// Raw match probabilities for normalized RGB and widened LWIR patches.
    pub fn scores(&self, rgb: &[f32], wide: &[f32]) -> Result<CandidateScores> {
        let g = &self.geometry;
        let r = Tensor::new([1, 3, g.patch, g.patch], rgb.iter().map(|&v| T::of(v as f64)).collect())?;
        let f_rgb = self.model.rgb.extract_features(&r)?;
        let cols = self.lwir_columns(wide)?;
        let n = cols.shape()[0];
        let repeated = Tensor::new(cols.shape().to_vec(), f_rgb.data().iter().copied().cycle().take(cols.numel()).collect())?;
        let mut tape = Tape::inference();
        let fr = tape.constant(repeated);
        let fl = tape.constant(cols);
        let (corr, concat) = self.model.classify_features(&mut tape, fr, fl, self.heads)?;
        let same = |v: Option<_>| -> Result<Option<Vec<f64>>> {
            let Some(v) = v else { return Ok(None) };
            let s: Vec<f64> = tape.value(v).data().chunks(2).map(|p: &[T]| p[0].as_f64()).collect();
            if s.len() != n || s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "predict" });
            }
            Ok(Some(s))
        };
        Ok(CandidateScores { corr: same(corr)?, concat: same(concat)? })
    }

    /// Prediction from `[0, 1]`-scaled (not yet normalized) patches.
    pub fn predict_patches(&self, rgb: &[f32], wide: &[f32]) -> Result<DisparityPrediction> {
        let mut rgb = rgb.to_vec();
        let mut wide = wide.to_vec();
        self.normalization.rgb.apply(&mut rgb);
        self.normalization.lwir.apply(&mut wide);
        let s = self.scores(&rgb, &wide)?;
        let regress = |v: Option<Vec<f64>>| -> Result<Option<f64>> {
            v.map(|v| regress_disparity(&normalize_scores(&v, self.score_norm)?)).transpose()
        };
        DisparityPrediction::from_heads(regress(s.corr)?, regress(s.concat)?, (self.geometry.disp_max / 2) as f64)
    }

    /// Prediction for RGB pixel `(x, y)` of a frame pair.
    pub fn predict(&self, frames: &FramePair, x: i32, y: i32) -> Result<DisparityPrediction> {
        let g = &self.geometry;
        let rgb = g.patch_at(&frames.rgb, x as i64, y as i64);
        let wide = g.wide_at(&frames.lwir, x as i64, y as i64);
        match (rgb, wide) {
            (Some(r), Some(w)) => self.predict_patches(&r, &w),
            _ => Err(Error::QueryOutOfBounds { sequence: String::new(), frame: 0, x, y }),
        }
    }

    pub fn predict_point(&self, corpus: &Corpus, p: &GroundTruthPoint) -> Result<DisparityPrediction> {
        let out_of_bounds = || Error::QueryOutOfBounds {
            sequence: corpus.sequence(p.seq).name.clone(),
            frame: p.frame,
            x: p.x,
            y: p.y,
        };
        let (rgb, wide) = corpus.query_patches(p).ok_or_else(out_of_bounds)?;
        self.predict_patches(&rgb, &wide)
    }
}

/// One row of the predictions CSV. Disparities are signed LWIR offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sequence: String,
    pub frame: u32,
    pub x: i32,
    pub y: i32,
    pub gt_d: i32,
    pub d_corr: Option<f64>,
    pub d_concat: Option<f64>,
    pub d_final: f64,
}

impl PredictionRow {
    pub fn new(sequence: &str, p: &GroundTruthPoint, pred: &DisparityPrediction) -> Self {
        Self {
            sequence: sequence.to_string(),
            frame: p.frame,
            x: p.x,
            y: p.y,
            gt_d: p.d,
            d_corr: pred.signed_corr(),
            d_concat: pred.signed_concat(),
            d_final: pred.signed(),
        }
    }

    pub fn error(&self) -> f64 {
        (self.d_final - self.gt_d as f64).abs()
    }
}

/// Predicts every point in parallel, preserving order.
pub fn predict_points<T: Scalar>(predictor: &Predictor<'_, T>, corpus: &Corpus, points: &[GroundTruthPoint]) -> Result<Vec<PredictionRow>> {
    points
        .par_iter()
        .map(|p| {
            let pred = predictor.predict_point(corpus, p)?;
            Ok(PredictionRow::new(&corpus.sequence(p.seq).name, p, &pred))
        })
        .collect()
}

/// Recall at each threshold over prediction rows.
pub fn recalls(rows: &[PredictionRow], thresholds: &[f64]) -> Result<Vec<f64>> {
    let pred: Vec<f64> = rows.iter().map(|r| r.d_final).collect();
    let gt: Vec<f64> = rows.iter().map(|r| r.gt_d as f64).collect();
    thresholds.iter().map(|&t| recall(&pred, &gt, t)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecall {
    pub name: String,
    pub points: usize,
    pub recalls: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub thresholds: Vec<f64>,
    pub folds: Vec<FoldRecall>,
    /// Average of the fold recalls weighted by their point counts.
    pub overall: Vec<f64>,
    pub points: usize,
}

impl RecallReport {
    pub fn aggregate(thresholds: &[f64], folds: Vec<FoldRecall>) -> Result<Self> {
        let points: usize = folds.iter().map(|f| f.points).sum();
        if points == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut overall = vec![0.0; thresholds.len()];
        for f in &folds {
            if f.recalls.len() != thresholds.len() {
                return Err(Error::LengthMismatch { left: f.recalls.len(), right: thresholds.len() });
            }
            for (o, r) in overall.iter_mut().zip(&f.recalls) {
                *o += r * f.points as f64 / points as f64;
            }
        }
        Ok(Self { thresholds: thresholds.to_vec(), folds, overall, points })
    }

    /// Fold-by-threshold table with a final weighted `overall` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let mut header = vec!["fold".to_string(), "points".to_string()];
        header.extend(self.thresholds.iter().map(|t| format!("le_{t}px")));
        w.write_record(&header)?;
        let rows = self.folds.iter().map(|f| (f.name.as_str(), f.points, &f.recalls));
        for (name, n, r) in rows.chain(std::iter::once(("overall", self.points, &self.overall))) {
            let mut rec = vec![name.to_string(), n.to_string()];
            rec.extend(r.iter().map(|v| format!("{v:.4}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let mut out = format!("{:<12}{:>8}", "fold", "points");
        for t in &self.thresholds {
            out += &format!("{:>10}", format!("<={t}px"));
        }
        out.push('\n');
        let rows = self.folds.iter().map(|f| (f.name.as_str(), f.points, &f.recalls));
        for (name, n, r) in rows.chain(std::iter::once(("overall", self.points, &self.overall))) {
            out += &format!("{name:<12}{n:>8}");
            for v in r {
                out += &format!("{v:>10.3}");
            }
            out.push('\n');
        }
        out
    }
}

/// Predicts and scores one fold's test points.
pub fn evaluate_fold<T: Scalar>(
    predictor: &Predictor<'_, T>,
    corpus: &Corpus,
    name: &str,
    test: &[GroundTruthPoint],
    thresholds: &[f64],
) -> Result<(Vec<PredictionRow>, FoldRecall)> {
    if test.is_empty() {
        return Err(Error::Config(format!("fold {name}: empty test set")));
    }
    let rows = predict_points(predictor, corpus, test)?;
    let recalls = recalls(&rows, thresholds)?;
    let points = rows.len();
    Ok((rows, FoldRecall { name: name.to_string(), points, recalls }))
}

pub fn write_predictions(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_predictions_to(std::io::BufWriter::new(file), rows).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })
}

pub fn write_predictions_to(out: impl std::io::Write, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sequence", "frame", "x", "y", "gt_d", "d_corr", "d_concat", "d_final"])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.sequence.clone(),
            r.frame.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.gt_d.to_string(),
            opt(r.d_corr),
            opt(r.d_concat),
            format!("{:.4}", r.d_final),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Published recalls of the full model on the LITIV datasets, kept for
/// side-by-side printing with local results.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceRecall {
    pub dataset: &'static str,
    pub fold: &'static str,
    pub thresholds: &'static [f64],
    pub recalls: &'static [f64],
}

pub const REFERENCE_RECALLS: [ReferenceRecall; 8] = [
    ReferenceRecall { dataset: "litiv2014", fold: "fold1", thresholds: &THRESHOLDS_2014, recalls: &[0.588, 0.901, 0.985] },
    ReferenceRecall { dataset: "litiv2014", fold: "fold2", thresholds: &THRESHOLDS_2014, recalls: &[0.474, 0.904, 0.986] },
    ReferenceRecall { dataset: "litiv2014", fold: "fold3", thresholds: &THRESHOLDS_2014, recalls: &[0.629, 0.916, 0.989] },
    ReferenceRecall { dataset: "litiv2014", fold: "overall", thresholds: &[3.0], recalls: &[0.906] },
    ReferenceRecall { dataset: "litiv2018", fold: "fold1", thresholds: &THRESHOLDS_2018, recalls: &[0.480, 0.943] },
    ReferenceRecall { dataset: "litiv2018", fold: "fold2", thresholds: &THRESHOLDS_2018, recalls: &[0.446, 0.877] },
    ReferenceRecall { dataset: "litiv2018", fold: "fold3", thresholds: &THRESHOLDS_2018, recalls: &[0.406, 0.972] },
    ReferenceRecall { dataset: "litiv2018", fold: "overall", thresholds: &THRESHOLDS_2018, recalls: &[0.442, 0.930] },
];
