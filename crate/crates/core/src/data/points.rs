use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::geometry::PatchGeometry;
use super::raster::Raster;
use crate::error::{Error, Result};

/// A sparse correspondence: the RGB pixel `(x, y)` of a frame matches the
/// LWIR pixel `(x + d, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroundTruthPoint {
    /// Index of the sequence inside a [`Corpus`](super::Corpus).
    pub seq: u32,
    pub frame: u32,
    pub x: i32,
    pub y: i32,
    pub d: i32,
    /// Coordinates refer to the horizontally flipped frame pair.
    pub mirrored: bool,
    /// Created by cross duplication rather than annotated.
    pub spawned: bool,
}

impl GroundTruthPoint {
    pub fn new(frame: u32, x: i32, y: i32, d: i32) -> Self {
        Self { seq: 0, frame, x, y, d, mirrored: false, spawned: false }
    }

    /// Identity used for de-duplication (disparity excluded).
    pub fn location(&self) -> (u32, u32, bool, i32, i32) {
        (self.seq, self.frame, self.mirrored, self.x, self.y)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GtRow {
    frame: u32,
    x: i32,
    y: i32,
    d: i32,
}

pub const GT_HEADER: [&str; 4] = ["frame", "x", "y", "d"];

/// Reads a `frame,x,y,d` CSV with header.
pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<GroundTruthPoint>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != GT_HEADER {
        return Err(parse_err(1, format!("expected header frame,x,y,d, got {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: GtRow = rec.deserialize(Some(&header)).map_err(|e| parse_err(line, e.to_string()))?;
        out.push(GroundTruthPoint::new(row.frame, row.x, row.y, row.d));
    }
    Ok(out)
}

pub fn write_points(path: impl AsRef<Path>, points: &[GroundTruthPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(GtRow { frame: p.frame, x: p.x, y: p.y, d: p.d })?;
    }
    if points.is_empty() {
        w.write_record(GT_HEADER)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A rectified RGB/LWIR frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub rgb: Raster,
    pub lwir: Raster,
}

impl FramePair {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self { rgb: self.rgb.flip_horizontal(), lwir: self.lwir.flip_horizontal() }
    }

    /// Both training patches of `p` (at `x` and `x + d`) lie inside the frames.
    pub fn usable(&self, geom: &PatchGeometry, p: &GroundTruthPoint) -> bool {
        geom.fits(&self.rgb, p.x as i64, p.y as i64) && geom.fits(&self.lwir, (p.x + p.d) as i64, p.y as i64)
    }

    /// The RGB patch and the widened LWIR patch of a query lie inside the frames.
    pub fn queryable(&self, geom: &PatchGeometry, x: i32, y: i32) -> bool {
        geom.fits(&self.rgb, x as i64, y as i64) && geom.fits_wide(&self.lwir, x as i64, y as i64)
    }
}

/// One video: frames keyed by index and its annotated points.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: BTreeMap<u32, FramePair>,
    /// Points whose training patches fit inside the frames.
    pub points: Vec<GroundTruthPoint>,
    /// Points too close to the border to extract patches around.
    pub unusable: Vec<GroundTruthPoint>,
}

impl Sequence {
    pub fn raw_count(&self) -> usize {
        self.points.len() + self.unusable.len()
    }
}

const FRAME_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// Locates `<dir>/<frame>.<ext>`, accepting 6-digit zero padding or none.
pub fn find_frame(dir: &Path, frame: u32) -> Option<PathBuf> {
    for stem in [format!("{frame:06}"), frame.to_string()] {
        for ext in FRAME_EXTENSIONS {
            let p = dir.join(format!("{stem}.{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

/// Loads `<image_dir>/rgb/*`, `<image_dir>/lwir/*` for every frame referenced
/// by the point file and validates the points against the frames.
pub fn load_sequence(name: &str, image_dir: &Path, gt_path: &Path, geom: &PatchGeometry) -> Result<Sequence> {
    let raw = read_points(gt_path)?;
    let mut frames = BTreeMap::new();
    for p in &raw {
        if frames.contains_key(&p.frame) {
            continue;
        }
        let load = |domain: &str| -> Result<Raster> {
            let dir = image_dir.join(domain);
            let path = find_frame(&dir, p.frame)
                .ok_or_else(|| Error::Data { path: dir.clone(), msg: format!("missing frame {} referenced by {}", p.frame, gt_path.display()) })?;
            Raster::load(path)
        };
        let pair = FramePair { rgb: load("rgb")?, lwir: load("lwir")? };
        if (pair.rgb.width(), pair.rgb.height()) != (pair.lwir.width(), pair.lwir.height()) {
            return Err(Error::Data {
                path: image_dir.to_path_buf(),
                msg: format!("frame {}: RGB and LWIR sizes differ (pairs must be rectified)", p.frame),
            });
        }
        frames.insert(p.frame, pair);
    }
    let mut points = Vec::new();
    let mut unusable = Vec::new();
    for (i, p) in raw.iter().enumerate() {
        let pair = &frames[&p.frame];
        let (w, h) = (pair.rgb.width() as i32, pair.rgb.height() as i32);
        if !(0..w).contains(&p.x) || !(0..h).contains(&p.y) || !(0..w).contains(&(p.x + p.d)) {
            return Err(Error::Parse {
                path: gt_path.to_path_buf(),
                line: i + 2,
                msg: format!("point ({}, {}) with disparity {} lies outside the {w}x{h} frame", p.x, p.y, p.d),
            });
        }
        if pair.usable(geom, p) {
            points.push(*p);
        } else {
            unusable.push(*p);
        }
    }
    Ok(Sequence { name: name.to_string(), frames, points, unusable })
}

/// Loads a sequence stored as `<dir>/rgb`, `<dir>/lwir`, `<dir>/gt.csv`.
pub fn load_sequence_dir(dir: &Path, geom: &PatchGeometry) -> Result<Sequence> {
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    load_sequence(&name, dir, &dir.join("gt.csv"), geom)
}
