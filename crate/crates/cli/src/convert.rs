//! Annotation text to canonical `frame,x,y,d` CSV.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dsiam::data::GroundTruthPoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Column {
    Frame,
    X,
    Y,
    D,
    XLwir,
    Skip,
}

/// Which input column holds which quantity, e.g. `frame,x,y,d` or
/// `frame,x_rgb,y,x_lwir`. `_` skips a column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnTemplate {
    columns: Vec<Column>,
}

impl ColumnTemplate {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for name in spec.split(',').map(str::trim) {
            columns.push(match name {
                "frame" => Column::Frame,
                "x" | "x_rgb" => Column::X,
                "y" => Column::Y,
                "d" => Column::D,
                "x_lwir" => Column::XLwir,
                "_" | "" => Column::Skip,
                other => bail!("unknown template column {other:?} (expected frame, x, x_rgb, y, d, x_lwir or _)"),
            });
        }
        let count = |c| columns.iter().filter(|&&k| k == c).count();
        for (c, name) in [(Column::Frame, "frame"), (Column::X, "x"), (Column::Y, "y"), (Column::D, "d"), (Column::XLwir, "x_lwir")] {
            if count(c) > 1 {
                bail!("template names {name} twice");
            }
        }
        if count(Column::X) != 1 || count(Column::Y) != 1 {
            bail!("template needs x (or x_rgb) and y");
        }
        if count(Column::D) + count(Column::XLwir) != 1 {
            bail!("template needs exactly one of d or x_lwir");
        }
        Ok(Self { columns })
    }

    fn has_frame(&self) -> bool {
        self.columns.contains(&Column::Frame)
    }
}

#[derive(Clone, Debug)]
pub struct ConvertOptions {
    pub template: ColumnTemplate,
    /// Frame index for files without a frame column.
    pub frame: Option<u32>,
    /// Flip the disparity sign (annotations measured LWIR to RGB).
    pub negate: bool,
}

fn split_fields(line: &str) -> Vec<&str> {
    let delim = [',', ';', '\t'].into_iter().find(|c| line.contains(*c));
    match delim {
        Some(c) => line.split(c).map(str::trim).collect(),
        None => line.split_whitespace().collect(),
    }
}

fn number(field: &str) -> Option<i32> {
    let v: f64 = field.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < i32::MAX as f64).then_some(v as i32)
}

/// Parses annotation text. Blank lines and `#` comments are skipped, as is a
/// first content line that does not parse (a header).
pub fn convert_text(text: &str, path: &Path, opts: &ConvertOptions) -> Result<Vec<GroundTruthPoint>> {
    if !opts.template.has_frame() && opts.frame.is_none() {
        bail!("template has no frame column; pass --frame");
    }
    let mut points = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields = split_fields(line);
        let parsed = parse_row(&fields, opts);
        let is_first = std::mem::replace(&mut first, false);
        match parsed {
            Ok(p) => points.push(p),
            Err(_) if is_first => continue,
            Err(e) => return Err(e).with_context(|| format!("{}:{}", path.display(), i + 1)),
        }
    }
    Ok(points)
}

fn parse_row(fields: &[&str], opts: &ConvertOptions) -> Result<GroundTruthPoint> {
    let cols = &opts.template.columns;
    if fields.len() < cols.len() {
        bail!("expected {} fields, found {}", cols.len(), fields.len());
    }
    let (mut frame, mut x, mut y, mut d, mut x_lwir) = (None, 0, 0, None, None);
    for (c, f) in cols.iter().zip(fields) {
        if *c == Column::Skip {
            continue;
        }
        let v = number(f).with_context(|| format!("not an integer: {f:?}"))?;
        match c {
            Column::Frame => frame = Some(u32::try_from(v).context("negative frame index")?),
            Column::X => x = v,
            Column::Y => y = v,
            Column::D => d = Some(v),
            Column::XLwir => x_lwir = Some(v),
            Column::Skip => {}
        }
    }
    let mut d = d.or(x_lwir.map(|xl| xl - x)).expect("template validated");
    if opts.negate {
        d = -d;
    }
    Ok(GroundTruthPoint::new(frame.or(opts.frame).expect("checked by caller"), x, y, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(t: &str) -> ConvertOptions {
        ConvertOptions { template: ColumnTemplate::parse(t).unwrap(), frame: None, negate: false }
    }

    #[test]
    fn disparity_columns() {
        let text = "frame x y d\n3 40 20 -5\n3 41 20 -5\n";
        let p = convert_text(text, Path::new("a.txt"), &opts("frame,x,y,d")).unwrap();
        assert_eq!(p, vec![GroundTruthPoint::new(3, 40, 20, -5), GroundTruthPoint::new(3, 41, 20, -5)]);
    }

    #[test]
    fn lwir_column_and_skips() {
        let text = "# comment\n7;100;30;0.9;92\n";
        let p = convert_text(text, Path::new("a.txt"), &opts("frame,x_rgb,y,_,x_lwir")).unwrap();
        assert_eq!(p, vec![GroundTruthPoint::new(7, 100, 30, -8)]);
    }

    #[test]
    fn frameless_files_and_negation() {
        let mut o = opts("x,y,d");
        assert!(convert_text("1 2 3\n", Path::new("a"), &o).is_err());
        o.frame = Some(12);
        o.negate = true;
        let p = convert_text("50,20,4\n", Path::new("a"), &o).unwrap();
        assert_eq!(p, vec![GroundTruthPoint::new(12, 50, 20, -4)]);
    }

    #[test]
    fn bad_rows_name_the_line() {
        let err = convert_text("0 1 2 3\n0 1 two 3\n", Path::new("gt.txt"), &opts("frame,x,y,d")).unwrap_err();
        assert!(format!("{err:#}").contains("gt.txt:2"), "{err:#}");
    }

    #[test]
    fn template_validation() {
        assert!(ColumnTemplate::parse("frame,x,y").is_err());
        assert!(ColumnTemplate::parse("frame,x,y,d,x_lwir").is_err());
        assert!(ColumnTemplate::parse("x,x,y,d").is_err());
        assert!(ColumnTemplate::parse("frame,x,y,depth").is_err());
    }
}
