//! Per-clip audio/video feature tracks and the `HEARFEAT` archive format.
//!
//! Layout (little-endian): 8 magic bytes `HEARFEAT`, `u32` version (1),
//! `u32` rows, `u32` cols, then `rows*cols` `f32` values in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{HearError, Result};

pub const MAGIC: &[u8; 8] = b"HEARFEAT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4;

/// Aligned video and audio features for one clip, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub video: Array2<f64>,
    pub audio: Array2<f64>,
}

impl FeatureTrack {
    pub fn new(video: Array2<f64>, audio: Array2<f64>) -> Result<Self> {
        if video.nrows() == 0 {
            return Err(HearError::Shape("feature track needs at least one frame".into()));
        }
        if video.nrows() != audio.nrows() {
            return Err(HearError::Shape(format!(
                "video has {} frames but audio has {}",
                video.nrows(),
                audio.nrows()
            )));
        }
        if !video.iter().chain(audio.iter()).all(|v| v.is_finite()) {
            return Err(HearError::Shape("feature track contains non-finite values".into()));
        }
        Ok(Self { video, audio })
    }

    pub fn frames(&self) -> usize {
        self.video.nrows()
    }

    pub fn video_dim(&self) -> usize {
        self.video.ncols()
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.ncols()
    }
}

pub fn encode_archive(matrix: &Array2<f64>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + matrix.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.ncols() as u32).to_le_bytes());
    for v in matrix.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_archive(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let err = |reason: String| HearError::FeatureArchive { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN {
        return Err(err(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(err("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(12) as usize, word(16) as usize);
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() != expected {
        return Err(err(format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len())));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(err(format!("non-finite value at row {} col {}", pos / cols.max(1), pos % cols.max(1))));
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| err(e.to_string()))
}

pub fn write_archive(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_archive(matrix))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    decode_archive(&bytes, path)
}

/// Linearly resamples rows so the result has `target` rows. The first and last
/// rows map onto the first and last input rows.
pub fn resample_rows(input: &Array2<f64>, target: usize) -> Array2<f64> {
    let rows = input.nrows();
    if rows == target {
        return input.clone();
    }
    let mut out = Array2::zeros((target, input.ncols()));
    if rows == 0 {
        return out;
    }
    for i in 0..target {
        let pos = if target == 1 { 0.0 } else { i as f64 * (rows - 1) as f64 / (target - 1) as f64 };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(rows - 1);
        let frac = pos - lo as f64;
        for c in 0..input.ncols() {
            out[[i, c]] = input[[lo, c]] * (1.0 - frac) + input[[hi, c]] * frac;
        }
    }
    out
}

/// Loads a video and an audio archive, aligning audio to the video frame count.
pub fn load_feature_track(video_path: &Path, audio_path: &Path) -> Result<FeatureTrack> {
    let video = read_archive(video_path)?;
    let audio = read_archive(audio_path)?;
    let audio = resample_rows(&audio, video.nrows());
    FeatureTrack::new(video, audio)
}
