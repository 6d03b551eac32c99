//! File formats for masks, mask images, JSON documents and score tables.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::SoftMask;
use crate::error::{Error, Result};
use crate::eval::SeparationScore;
use crate::grid::TfGrid;

/// Column order of the scores table.
pub const SCORES_HEADER: [&str; 7] = [
    "scene_id",
    "method",
    "target_angle_deg",
    "interferer_angle_deg",
    "sdr_db_left",
    "sdr_db_right",
    "seed",
];

/// Sidecar describing a raw mask file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHeader {
    pub source_id: usize,
    pub emitting: bool,
    pub frames: usize,
    pub bins: usize,
    /// Always "f32le".
    pub dtype: String,
    /// Always "frame-major": all bins of frame 0, then frame 1, ...
    pub layout: String,
    pub data_file: String,
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `<stem>.f32` and `<stem>.json` into `dir`.
pub fn write_mask(dir: impl AsRef<Path>, stem: &str, mask: &SoftMask) -> Result<()> {
    let dir = dir.as_ref();
    let data_file = format!("{stem}.f32");
    let mut w = BufWriter::new(File::create(dir.join(&data_file))?);
    for v in mask.values.as_slice() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let (frames, bins) = mask.values.shape();
    write_json(
        dir.join(format!("{stem}.json")),
        &MaskHeader {
            source_id: mask.source_id,
            emitting: mask.emitting,
            frames,
            bins,
            dtype: "f32le".into(),
            layout: "frame-major".into(),
            data_file,
        },
    )
}

/// Reads a mask back from its JSON sidecar.
pub fn read_mask(header_path: impl AsRef<Path>) -> Result<SoftMask> {
    let header_path = header_path.as_ref();
    let h: MaskHeader = read_json(header_path)?;
    if h.dtype != "f32le" || h.layout != "frame-major" {
        return Err(Error::invalid(format!("unsupported mask encoding {} / {}", h.dtype, h.layout)));
    }
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&h.data_file))?;
    if bytes.len() != 4 * h.frames * h.bins {
        return Err(Error::mismatch(4 * h.frames * h.bins, bytes.len()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(SoftMask {
        source_id: h.source_id,
        values: TfGrid::from_vec(h.frames, h.bins, data)?,
        emitting: h.emitting,
    })
}

/// Binary greyscale image: time left to right, low frequencies at the
/// bottom, values in [0, 1] mapped to 0..255.
pub fn write_pgm(path: impl AsRef<Path>, grid: &TfGrid<f64>) -> Result<()> {
    let (frames, bins) = grid.shape();
    let mut out = format!("P5\n{frames} {bins}\n255\n").into_bytes();
    out.reserve(frames * bins);
    for k in (0..bins).rev() {
        for m in 0..frames {
            out.push((grid[(m, k)].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_scores_csv(path: impl AsRef<Path>, scores: &[SeparationScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if scores.is_empty() {
        w.write_record(SCORES_HEADER)?;
    }
    for s in scores {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<SeparationScore>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != SCORES_HEADER {
        return Err(Error::invalid(format!("unexpected scores header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
