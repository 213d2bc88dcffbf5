//! ASCII PCD (v0.7 subset) reading and writing.
//!
//! Supported layouts are `FIELDS x y z` and `FIELDS x y z label`, with
//! `DATA ascii`. Labels are class ids: 0 background, 1 trachea, 2 tumor,
//! 3 char. Coordinates are written with six significant digits.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::geometry::{Label, Point3, PointCloud};

#[derive(Debug, Error)]
pub enum PcdError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Header { line: usize, reason: String },
    #[error("missing header key {0}")]
    MissingKey(&'static str),
    #[error("unsupported PCD layout: {0}")]
    Unsupported(String),
    #[error("data line {line}: {reason}")]
    Data { line: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcdHeader {
    pub version: String,
    pub has_label: bool,
    pub width: usize,
    pub height: usize,
    pub viewpoint: [f64; 7],
    pub points: usize,
}

const DEFAULT_VIEWPOINT: [f64; 7] = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

/// Formats like C's `%g` with six significant digits.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    // Round first so the exponent reflects carries such as 999999.5 -> 1e6.
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_pcd<W: Write>(mut out: W, cloud: &PointCloud) -> Result<(), PcdError> {
    let n = cloud.len();
    let labels = cloud.labels();
    let mut s = String::new();
    s.push_str("# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\n");
    if labels.is_some() {
        s.push_str("FIELDS x y z label\nSIZE 4 4 4 4\nTYPE F F F U\nCOUNT 1 1 1 1\n");
    } else {
        s.push_str("FIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n");
    }
    let _ = write!(
        s,
        "WIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA ascii\n"
    );
    out.write_all(s.as_bytes())?;
    for (i, p) in cloud.points().iter().enumerate() {
        s.clear();
        let _ = write!(s, "{} {} {}", format_g6(p.x), format_g6(p.y), format_g6(p.z));
        if let Some(l) = labels {
            let _ = write!(s, " {}", l[i].id());
        }
        s.push('\n');
        out.write_all(s.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_pcd_string(cloud: &PointCloud) -> String {
    let mut buf = Vec::new();
    write_pcd(&mut buf, cloud).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("ascii output")
}

fn expect_tokens<'a>(
    line_no: usize,
    tokens: &[&'a str],
    want: &[&str],
    key: &str,
) -> Result<(), PcdError> {
    if tokens != want {
        return Err(PcdError::Unsupported(format!(
            "line {line_no}: {key} {} (expected {})",
            tokens.join(" "),
            want.join(" ")
        )));
    }
    Ok(())
}

fn parse_usize(line: usize, key: &str, tokens: &[&str]) -> Result<usize, PcdError> {
    match tokens {
        [v] => v.parse().map_err(|_| PcdError::Header {
            line,
            reason: format!("{key} expects a non-negative integer, got {v:?}"),
        }),
        _ => Err(PcdError::Header { line, reason: format!("{key} expects one value") }),
    }
}

/// Parses a header and ascii body. Unknown keys, binary data, extra fields and
/// non-finite coordinates are rejected.
pub fn read_pcd<R: BufRead>(reader: R) -> Result<(PcdHeader, PointCloud), PcdError> {
    let mut lines = reader.lines().enumerate();
    let mut version = None;
    let mut fields: Option<bool> = None;
    let mut width = None;
    let mut height = None;
    let mut viewpoint = None;
    let mut n_points = None;
    let mut field_count = 0usize;
    let mut saw_size = false;
    let mut saw_type = false;
    let mut saw_count = false;

    loop {
        let (idx, line) = match lines.next() {
            Some((i, l)) => (i + 1, l?),
            None => return Err(PcdError::MissingKey("DATA")),
        };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        match key {
            "VERSION" => match rest.as_slice() {
                ["0.7"] | [".7"] => version = Some("0.7".to_string()),
                _ => return Err(PcdError::Unsupported(format!("VERSION {}", rest.join(" ")))),
            },
            "FIELDS" => {
                let has_label = match rest.as_slice() {
                    ["x", "y", "z"] => false,
                    ["x", "y", "z", "label"] => true,
                    _ => {
                        return Err(PcdError::Unsupported(format!("FIELDS {}", rest.join(" "))))
                    }
                };
                field_count = rest.len();
                fields = Some(has_label);
            }
            "SIZE" | "TYPE" | "COUNT" => {
                let has_label = fields.ok_or(PcdError::Header {
                    line: idx,
                    reason: format!("{key} before FIELDS"),
                })?;
                let want: &[&str] = match (key, has_label) {
                    ("SIZE", false) => &["4", "4", "4"],
                    ("SIZE", true) => &["4", "4", "4", "4"],
                    ("TYPE", false) => &["F", "F", "F"],
                    ("TYPE", true) => &["F", "F", "F", "U"],
                    ("COUNT", false) => &["1", "1", "1"],
                    _ => &["1", "1", "1", "1"],
                };
                // Doubles and other label widths are accepted as well.
                let ok = rest.len() == field_count
                    && match key {
                        "SIZE" => rest[..3].iter().all(|s| *s == "4" || *s == "8")
                            && (!has_label || matches!(rest[3], "1" | "2" | "4")),
                        "TYPE" => rest[..3].iter().all(|s| *s == "F")
                            && (!has_label || matches!(rest[3], "U" | "I")),
                        _ => rest.iter().all(|s| *s == "1"),
                    };
                if !ok {
                    expect_tokens(idx, &rest, want, key)?;
                }
                match key {
                    "SIZE" => saw_size = true,
                    "TYPE" => saw_type = true,
                    _ => saw_count = true,
                }
            }
            "WIDTH" => width = Some(parse_usize(idx, key, &rest)?),
            "HEIGHT" => height = Some(parse_usize(idx, key, &rest)?),
            "POINTS" => n_points = Some(parse_usize(idx, key, &rest)?),
            "VIEWPOINT" => {
                let vals: Vec<f64> = rest
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| PcdError::Header { line: idx, reason: "bad VIEWPOINT".into() })?;
                let vp: [f64; 7] = vals.try_into().map_err(|_| PcdError::Header {
                    line: idx,
                    reason: "VIEWPOINT expects 7 values".into(),
                })?;
                viewpoint = Some(vp);
            }
            "DATA" => {
                if rest.as_slice() != ["ascii"] {
                    return Err(PcdError::Unsupported(format!("DATA {}", rest.join(" "))));
                }
                break;
            }
            other => {
                return Err(PcdError::Header { line: idx, reason: format!("unknown key {other:?}") })
            }
        }
    }

    let has_label = fields.ok_or(PcdError::MissingKey("FIELDS"))?;
    if !saw_size {
        return Err(PcdError::MissingKey("SIZE"));
    }
    if !saw_type {
        return Err(PcdError::MissingKey("TYPE"));
    }
    if !saw_count {
        return Err(PcdError::MissingKey("COUNT"));
    }
    let width = width.ok_or(PcdError::MissingKey("WIDTH"))?;
    let height = height.ok_or(PcdError::MissingKey("HEIGHT"))?;
    let n = n_points.unwrap_or(width.saturating_mul(height));
    if width.checked_mul(height) != Some(n) {
        return Err(PcdError::Header {
            line: 0,
            reason: format!("WIDTH*HEIGHT = {width}*{height} does not match POINTS {n}"),
        });
    }
    let header = PcdHeader {
        version: version.ok_or(PcdError::MissingKey("VERSION"))?,
        has_label,
        width,
        height,
        viewpoint: viewpoint.unwrap_or(DEFAULT_VIEWPOINT),
        points: n,
    };

    // Cap the pre-allocation; the header is untrusted.
    let mut points = Vec::with_capacity(n.min(1 << 16));
    let mut labels = Vec::with_capacity(if has_label { n.min(1 << 16) } else { 0 });
    for (idx, line) in lines {
        let line = line?;
        let line_no = idx + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if points.len() == n {
            return Err(PcdError::Data { line: line_no, reason: "more points than POINTS".into() });
        }
        let tokens: Vec<&str> = t.split_whitespace().collect();
        if tokens.len() != field_count {
            return Err(PcdError::Data {
                line: line_no,
                reason: format!("{} values, expected {field_count}", tokens.len()),
            });
        }
        let mut xyz = [0.0f64; 3];
        for (slot, tok) in xyz.iter_mut().zip(&tokens) {
            let v: f64 = tok.parse().map_err(|_| PcdError::Data {
                line: line_no,
                reason: format!("bad coordinate {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(PcdError::Data { line: line_no, reason: "non-finite coordinate".into() });
            }
            *slot = v;
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        if has_label {
            let label = tokens[3]
                .parse::<u8>()
                .ok()
                .and_then(Label::from_id)
                .ok_or_else(|| PcdError::Data {
                    line: line_no,
                    reason: format!("label {:?} is not a class id 0-3", tokens[3]),
                })?;
            labels.push(label);
        }
    }
    if points.len() != n {
        return Err(PcdError::Data {
            line: 0,
            reason: format!("found {} points, header declares {n}", points.len()),
        });
    }
    let cloud = if has_label {
        PointCloud::with_labels(points, labels)
    } else {
        PointCloud::new(points)
    }
    .expect("points validated above");
    Ok((header, cloud))
}

pub fn read_pcd_bytes(bytes: &[u8]) -> Result<(PcdHeader, PointCloud), PcdError> {
    read_pcd(std::io::Cursor::new(bytes))
}
