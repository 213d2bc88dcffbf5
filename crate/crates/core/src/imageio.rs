//! Snapshot export: binary PGM images plus a JSON sidecar.
//!
//! Depth is stored as 16-bit big-endian samples in units of 0.01 mm (0 stays
//! the invalid marker); labels as 8-bit class ids.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, DepthImage, Label, RigidTransform};
use crate::phantom::{LabelImage, Snapshot};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed PGM: {0}")]
    Format(String),
    #[error("depth {0} mm cannot be stored in 16-bit 0.01 mm units")]
    DepthRange(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ImageError>;

pub const DEPTH_UNIT_MM: f64 = 0.01;
/// Upper bound on width * height accepted by the reader.
pub const MAX_PIXELS: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples.
    pub samples: Vec<u16>,
}

pub fn encode_pgm(img: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(img.samples.iter().map(|s| *s as u8));
    }
    out
}

/// Parses a binary (P5) PGM. Header comments are accepted.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let bad = |m: &str| ImageError::Format(m.into());
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(bad("bad header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("header must end with one whitespace byte"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || width.saturating_mul(height) > MAX_PIXELS {
        return Err(bad("unsupported image size"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    let n = width * height;
    let bps = if maxval > 255 { 2 } else { 1 };
    let data = &bytes[pos..];
    if data.len() != n * bps {
        return Err(bad("pixel data length mismatch"));
    }
    let samples: Vec<u16> = if bps == 2 {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|b| *b as u16).collect()
    };
    if samples.iter().any(|s| *s as usize > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    Ok(Pgm { width, height, maxval: maxval as u16, samples })
}

pub fn depth_to_pgm(depth: &DepthImage) -> Result<Pgm> {
    let samples = depth
        .values()
        .iter()
        .map(|d| {
            let q = (d / DEPTH_UNIT_MM).round();
            if (0.0..=65535.0).contains(&q) {
                Ok(q as u16)
            } else {
                Err(ImageError::DepthRange(*d))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pgm { width: depth.width(), height: depth.height(), maxval: 65535, samples })
}

pub fn pgm_to_depth(img: &Pgm) -> Result<DepthImage> {
    let depth = img.samples.iter().map(|s| *s as f64 * DEPTH_UNIT_MM).collect();
    DepthImage::new(img.width, img.height, depth).map_err(|e| ImageError::Format(e.to_string()))
}

pub fn labels_to_pgm(labels: &LabelImage) -> Pgm {
    Pgm {
        width: labels.width(),
        height: labels.height(),
        maxval: 255,
        samples: labels.values().iter().map(|l| l.id() as u16).collect(),
    }
}

pub fn pgm_to_labels(img: &Pgm) -> Result<LabelImage> {
    let labels = img
        .samples
        .iter()
        .map(|s| {
            u8::try_from(*s)
                .ok()
                .and_then(Label::from_id)
                .ok_or_else(|| ImageError::Format(format!("unknown label id {s}")))
        })
        .collect::<Result<Vec<_>>>()?;
    LabelImage::new(img.width, img.height, labels).ok_or_else(|| ImageError::Format("label size".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSidecar {
    pub width: usize,
    pub height: usize,
    pub depth_unit_mm: f64,
    pub intrinsics: CameraIntrinsics,
    /// World-from-camera.
    pub pose: RigidTransform,
}

/// Writes `<stem>_depth.pgm`, `<stem>_labels.pgm` and `<stem>.json` into `dir`.
pub fn write_snapshot(dir: &Path, stem: &str, snap: &Snapshot) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let write = |name: String, bytes: &[u8]| -> Result<()> {
        let mut f = std::fs::File::create(dir.join(name))?;
        f.write_all(bytes)?;
        Ok(())
    };
    write(format!("{stem}_depth.pgm"), &encode_pgm(&depth_to_pgm(&snap.depth)?))?;
    write(format!("{stem}_labels.pgm"), &encode_pgm(&labels_to_pgm(&snap.labels)))?;
    let sidecar = SnapshotSidecar {
        width: snap.depth.width(),
        height: snap.depth.height(),
        depth_unit_mm: DEPTH_UNIT_MM,
        intrinsics: snap.intrinsics,
        pose: snap.pose,
    };
    write(format!("{stem}.json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())
}

/// Reads a snapshot written by [`write_snapshot`]. Depth comes back quantized
/// to 0.01 mm.
pub fn read_snapshot(dir: &Path, stem: &str) -> Result<Snapshot> {
    let depth = pgm_to_depth(&decode_pgm(&std::fs::read(dir.join(format!("{stem}_depth.pgm")))?)?)?;
    let labels = pgm_to_labels(&decode_pgm(&std::fs::read(dir.join(format!("{stem}_labels.pgm")))?)?)?;
    let sidecar: SnapshotSidecar = serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
    if (depth.width(), depth.height()) != (labels.width(), labels.height())
        || (sidecar.width, sidecar.height) != (depth.width(), depth.height())
    {
        return Err(ImageError::Format("snapshot image sizes disagree".into()));
    }
    Ok(Snapshot { depth, labels, intrinsics: sidecar.intrinsics, pose: sidecar.pose })
}
