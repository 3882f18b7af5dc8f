//! Feature sets, the `SRFT` feature file and the built-in fallback
//! extractor.
//!
//! `SRFT` layout, all little-endian: magic `b"SRFT"`, `u32` version (1),
//! `u32` n, `u32` d, then `n·d` row-major `f32` values.

use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops::ImagePatch;
use crate::metrics::SampleMatrix;
use crate::trainer::Role;

pub const MAGIC: &[u8; 4] = b"SRFT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
/// Side of the fallback extractor's downsampled grid.
pub const FALLBACK_SIDE: usize = 16;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("feature file i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a feature file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("feature file truncated: header says {expected} bytes, found {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("feature file has {extra} bytes past the declared payload")]
    TrailingBytes { extra: u64 },
    #[error("feature matrix too large for the file format")]
    TooLarge,
    #[error("feature matrix: {0}")]
    Matrix(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    ExternalFc6,
    Fallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub role: Role,
    pub matrix: SampleMatrix,
    pub source: FeatureSource,
}

/// Encodes `m` as `SRFT` bytes. Values are stored as `f32`.
pub fn encode(m: &SampleMatrix) -> Result<Vec<u8>, FeatError> {
    let n = u32::try_from(m.n()).map_err(|_| FeatError::TooLarge)?;
    let d = u32::try_from(m.d()).map_err(|_| FeatError::TooLarge)?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<SampleMatrix, FeatError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(FeatError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        return Err(FeatError::Truncated {
            expected: HEADER_LEN as u64,
            got: bytes.len() as u64,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FeatError::BadMagic(magic));
    }
    let version = word(4);
    if version != VERSION {
        return Err(FeatError::UnsupportedVersion(version));
    }
    let (n, d) = (word(8) as u64, word(12) as u64);
    let expected = HEADER_LEN as u64 + 4 * n * d;
    let got = bytes.len() as u64;
    if got < expected {
        return Err(FeatError::Truncated { expected, got });
    }
    if got > expected {
        return Err(FeatError::TrailingBytes { extra: got - expected });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    SampleMatrix::new(n as usize, d as usize, data).map_err(|e| FeatError::Matrix(e.to_string()))
}

pub fn write_feat(path: &Path, m: &SampleMatrix) -> Result<(), FeatError> {
    fs::write(path, encode(m)?)?;
    Ok(())
}

pub fn read_feat(path: &Path) -> Result<SampleMatrix, FeatError> {
    decode(&fs::read(path)?)
}

/// Grayscale, area-average to 16×16, z-normalize (population std). A vector
/// whose std is below `1e-8` becomes all zeros.
pub fn fallback_vector(image: &ImagePatch) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let gray: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if image.channels() == 3 {
                0.299 * image.get(x, y, 0) as f64
                    + 0.587 * image.get(x, y, 1) as f64
                    + 0.114 * image.get(x, y, 2) as f64
            } else {
                image.get(x, y, 0) as f64
            }
        })
        .collect();
    let resized = area_resize(&gray, w, h, FALLBACK_SIDE, FALLBACK_SIDE);
    z_normalize(resized)
}

/// Area-weighted box resampling: each output cell averages the input over
/// its footprint, with fractional coverage at the edges.
pub fn area_resize(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(n_in);
                (first..last)
                    .filter_map(|i| {
                        let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / scale;
                        (cover > 0.0).then_some((i, cover))
                    })
                    .collect()
            })
            .collect()
    };
    let wx = weights(w, ow);
    let wy = weights(h, oh);
    let mut out = Vec::with_capacity(ow * oh);
    for ry in &wy {
        for rx in &wx {
            let mut acc = 0.0;
            for &(y, cy) in ry {
                for &(x, cx) in rx {
                    acc += cy * cx * src[y * w + x];
                }
            }
            out.push(acc);
        }
    }
    out
}

fn z_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        v.fill(0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - mean) / std);
    }
    v
}

/// Row `i` is the fallback vector of image `i`.
pub fn fallback_extract(images: &[ImagePatch], role: Role) -> FeatureSet {
    let rows: Vec<Vec<f64>> = images.par_iter().map(fallback_vector).collect();
    let d = FALLBACK_SIDE * FALLBACK_SIDE;
    let data = rows.into_iter().flatten().collect();
    FeatureSet {
        role,
        matrix: SampleMatrix::new(images.len(), d, data).expect("fixed width rows"),
        source: FeatureSource::Fallback,
    }
}
