//! Pseudo-multispectral stereo pairs with exact ground truth.
//!
//! A scene is a smooth background texture plus elliptical objects that each
//! carry their own smooth texture and a horizontal disparity. The "RGB"
//! frame renders background and objects through one tone curve with a
//! per-channel tint; the "LWIR" frame shows objects as warm regions whose
//! texture passes through a different curve, while the background texture
//! is almost flattened away. Objects appear shifted by their disparity in
//! the LWIR frame, and nearer (larger disparity) objects occlude farther ones.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fold::{FoldFile, FoldSpec};
use super::geometry::PatchGeometry;
use super::points::{write_points, FramePair, GroundTruthPoint, Sequence};
use super::raster::Raster;
use super::sampling::Corpus;
use crate::error::{Error, Result};
use crate::seed::component_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub sequences: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub points_per_frame: usize,
    /// Inclusive disparity range of objects.
    pub disp_lo: i32,
    pub disp_hi: i32,
    /// Standard deviation of additive pixel noise (on a `[0, 1]` scale).
    pub noise: f64,
    /// Box-blur radius of the latent textures; larger is smoother.
    pub texture_radius: usize,
    pub geometry: PatchGeometry,
    pub validation_images: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 192,
            height: 96,
            sequences: 3,
            frames: 60,
            min_objects: 3,
            max_objects: 6,
            points_per_frame: 2,
            disp_lo: -20,
            disp_hi: 20,
            noise: 0.02,
            texture_radius: 2,
            geometry: PatchGeometry::default(),
            validation_images: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let half_search = (self.geometry.disp_max / 2) as i32;
        if self.disp_lo > self.disp_hi || self.disp_lo < -half_search || self.disp_hi > half_search {
            return Err(Error::Config(format!(
                "disparity range [{}, {}] must lie within +-{half_search}",
                self.disp_lo, self.disp_hi
            )));
        }
        let margin = self.geometry.patch / 2 + self.geometry.disp_max / 2;
        if self.width < 2 * margin + 8 || self.height < self.geometry.patch + 8 {
            return Err(Error::Config(format!(
                "frames of {}x{} are too small for {}-pixel patches with disp_max {}",
                self.width, self.height, self.geometry.patch, self.geometry.disp_max
            )));
        }
        if self.sequences == 0 || self.frames == 0 || self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need at least one sequence, frame and object".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sequence_name(i: usize) -> String {
        format!("synth{:02}", i + 1)
    }
}

#[derive(Clone, Debug)]
struct Object {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    d: i32,
    /// Texture over the bounding box, row-major `(2 * bx + 1) x (2 * by + 1)`.
    tex: Vec<f64>,
    bx: i64,
    by: i64,
    heat: f64,
    albedo: [f64; 3],
}

impl Object {
    /// Texture value at scene pixel `(x, y)` if it lies on the object.
    fn sample(&self, x: i64, y: i64) -> Option<f64> {
        let (u, v) = (x as f64 - self.cx, y as f64 - self.cy);
        if (u / self.rx).powi(2) + (v / self.ry).powi(2) > 1.0 {
            return None;
        }
        let (i, j) = (x - self.cx.round() as i64 + self.bx, y - self.cy.round() as i64 + self.by);
        let w = 2 * self.bx + 1;
        if i < 0 || j < 0 || i >= w || j >= 2 * self.by + 1 {
            return None;
        }
        Some(self.tex[(j * w + i) as usize])
    }
}

/// Zero-mean, unit-variance smoothed noise (three box-blur passes).
fn smooth_noise(w: usize, h: usize, radius: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut a: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = radius as i64;
    let mut tmp = vec![0.0; w * h];
    for _ in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (lo, hi) = ((x as i64 - r).max(0) as usize, ((x as i64 + r) as usize).min(w - 1));
                tmp[y * w + x] = a[y * w + lo..=y * w + hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (lo, hi) = ((y as i64 - r).max(0) as usize, ((y as i64 + r) as usize).min(h - 1));
                a[y * w + x] = (lo..=hi).map(|yy| tmp[yy * w + x]).sum::<f64>() / (hi - lo + 1) as f64;
            }
        }
    }
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let sd = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt().max(1e-12);
    a.iter().map(|v| (v - mean) / sd).collect()
}

fn visible_tone(s: f64) -> f64 {
    (0.5 + 0.4 * (0.9 * s).tanh()).powf(0.8)
}

fn thermal_tone(s: f64) -> f64 {
    1.0 / (1.0 + (-1.6 * s).exp()) - 0.5
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One rendered frame plus the bookkeeping used to verify its ground truth.
#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub pair: FramePair,
    pub points: Vec<GroundTruthPoint>,
    /// Index of the object owning each RGB pixel (-1 for background).
    pub rgb_owner: Vec<i32>,
    pub lwir_owner: Vec<i32>,
    /// Object texture value rendered at each pixel (NaN for background).
    pub rgb_latent: Vec<f64>,
    pub lwir_latent: Vec<f64>,
    pub disparities: Vec<i32>,
}

fn render_frame(cfg: &SynthConfig, frame: u32, rng: &mut ChaCha8Rng) -> SynthFrame {
    let (w, h) = (cfg.width, cfg.height);
    let margin = (cfg.geometry.patch / 2 + cfg.geometry.disp_max / 2) as f64;
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<Object> = (0..n_obj)
        .map(|_| {
            let rx: f64 = rng.gen_range(7.0..15.0);
            let ry: f64 = rng.gen_range(9.0..(h as f64 * 0.3).max(10.0));
            let (bx, by) = (rx.ceil() as i64 + 1, ry.ceil() as i64 + 1);
            Object {
                cx: rng.gen_range(margin - 6.0..w as f64 - margin + 6.0),
                cy: rng.gen_range(ry * 0.5..h as f64 - ry * 0.5),
                rx,
                ry,
                d: rng.gen_range(cfg.disp_lo..=cfg.disp_hi),
                tex: smooth_noise((2 * bx + 1) as usize, (2 * by + 1) as usize, cfg.texture_radius, rng),
                bx,
                by,
                heat: rng.gen_range(0.55..0.8),
                albedo: [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)],
            }
        })
        .collect();
    // Painter's order: nearer (larger disparity) objects last.
    objects.sort_by_key(|o| o.d);
    let background = smooth_noise(w, h, cfg.texture_radius + 1, rng);

    let mut rgb_owner = vec![-1i32; w * h];
    let mut lwir_owner = vec![-1i32; w * h];
    let mut rgb_latent = vec![f64::NAN; w * h];
    let mut lwir_latent = vec![f64::NAN; w * h];
    for (k, o) in objects.iter().enumerate() {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = y as usize * w + x as usize;
                if let Some(t) = o.sample(x, y) {
                    rgb_owner[i] = k as i32;
                    rgb_latent[i] = t;
                }
                // The LWIR frame sees the object shifted right by d.
                if let Some(t) = o.sample(x - o.d as i64, y) {
                    lwir_owner[i] = k as i32;
                    lwir_latent[i] = t;
                }
            }
        }
    }

    let mut gauss = |sd: f64| -> f64 {
        // Sum of uniforms; adequate for pixel noise and fully deterministic.
        let s: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum();
        s * sd * (3.0f64 / 4.0).sqrt()
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut lwir = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let k = rgb_owner[i];
        for c in 0..3 {
            let v = if k >= 0 {
                objects[k as usize].albedo[c] * visible_tone(rgb_latent[i])
            } else {
                0.8 * visible_tone(background[i]) + 0.05 * c as f64
            };
            rgb.push(to_u8(v + gauss(cfg.noise)));
        }
        let k = lwir_owner[i];
        let v = if k >= 0 {
            objects[k as usize].heat + 0.5 * thermal_tone(lwir_latent[i])
        } else {
            0.22 + 0.02 * thermal_tone(background[i])
        };
        lwir.push(to_u8(v + gauss(cfg.noise)));
    }

    let geom = cfg.geometry;
    let half = geom.half() as i32;
    let wing = (geom.disp_max / 2) as i32;
    let mut candidates = Vec::new();
    for y in half..h as i32 - half {
        for x in half + wing..=w as i32 - half - wing {
            let i = y as usize * w + x as usize;
            let k = rgb_owner[i];
            if k < 0 {
                continue;
            }
            let d = objects[k as usize].d;
            let j = y as usize * w + (x + d) as usize;
            if lwir_owner[j] == k {
                candidates.push(GroundTruthPoint::new(frame, x, y, d));
            }
        }
    }
    let mut points = Vec::new();
    for _ in 0..cfg.points_per_frame.min(candidates.len()) {
        let pick = rng.gen_range(0..candidates.len());
        points.push(candidates.swap_remove(pick));
    }
    points.sort();

    SynthFrame {
        pair: FramePair {
            rgb: Raster::new(w, h, 3, rgb).expect("sized above"),
            lwir: Raster::new(w, h, 1, lwir).expect("sized above"),
        },
        points,
        rgb_owner,
        lwir_owner,
        rgb_latent,
        lwir_latent,
        disparities: objects.iter().map(|o| o.d).collect(),
    }
}

#[derive(Clone, Debug)]
pub struct SynthSequence {
    pub name: String,
    pub frames: Vec<SynthFrame>,
}

impl SynthSequence {
    pub fn points(&self) -> Vec<GroundTruthPoint> {
        self.frames.iter().flat_map(|f| f.points.iter().copied()).collect()
    }

    pub fn to_sequence(&self, geom: &PatchGeometry) -> Sequence {
        let frames: BTreeMap<u32, FramePair> = self.frames.iter().enumerate().map(|(i, f)| (i as u32, f.pair.clone())).collect();
        let (mut points, mut unusable) = (Vec::new(), Vec::new());
        for p in self.points() {
            if frames[&p.frame].usable(geom, &p) {
                points.push(p);
            } else {
                unusable.push(p);
            }
        }
        Sequence { name: self.name.clone(), frames, points, unusable }
    }
}

/// Renders every sequence. Each sequence draws from its own seeded stream,
/// so adding sequences does not change earlier ones.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SynthSequence>> {
    cfg.validate()?;
    Ok((0..cfg.sequences)
        .map(|s| {
            let name = SynthConfig::sequence_name(s);
            let mut rng = component_rng(cfg.seed, &format!("synth/{name}"));
            let frames = (0..cfg.frames).map(|f| render_frame(cfg, f as u32, &mut rng)).collect();
            SynthSequence { name, frames }
        })
        .collect())
}

/// Rotating folds: each sequence is the test set once, the others train
/// and provide the validation images.
pub fn synth_folds(cfg: &SynthConfig) -> Vec<FoldSpec> {
    let names: Vec<String> = (0..cfg.sequences).map(SynthConfig::sequence_name).collect();
    (0..names.len())
        .map(|k| {
            let rest: Vec<String> = names.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, n)| n.clone()).collect();
            FoldSpec {
                name: format!("fold{}", k + 1),
                train: rest.clone(),
                validation: rest,
                validation_images: cfg.validation_images,
                test: vec![names[k].clone()],
            }
        })
        .collect()
}

/// In-memory corpus of a generated dataset.
pub fn synth_corpus(cfg: &SynthConfig, sequences: &[SynthSequence]) -> Result<Corpus> {
    let mut corpus = Corpus::new(cfg.geometry);
    for s in sequences {
        corpus.add(s.to_sequence(&cfg.geometry))?;
    }
    Ok(corpus)
}

/// Writes `<out>/<seq>/{rgb,lwir}/NNNNNN.png`, `<out>/<seq>/gt.csv`,
/// `<out>/folds.txt` and `<out>/synth.json`.
pub fn write_synth_dataset(out: &Path, cfg: &SynthConfig) -> Result<Vec<SynthSequence>> {
    let sequences = synth_generate(cfg)?;
    for s in &sequences {
        let dir = out.join(&s.name);
        for domain in ["rgb", "lwir"] {
            std::fs::create_dir_all(dir.join(domain)).map_err(|e| Error::io(dir.join(domain), e))?;
        }
        for (i, f) in s.frames.iter().enumerate() {
            f.pair.rgb.save(dir.join("rgb").join(format!("{i:06}.png")))?;
            f.pair.lwir.save(dir.join("lwir").join(format!("{i:06}.png")))?;
        }
        write_points(dir.join("gt.csv"), &s.points())?;
    }
    let folds = FoldFile { root: out.to_path_buf(), folds: synth_folds(cfg) };
    let path = out.join("folds.txt");
    std::fs::write(&path, folds.render()).map_err(|e| Error::io(&path, e))?;
    let path = out.join("synth.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&path, e))?;
    Ok(sequences)
}
