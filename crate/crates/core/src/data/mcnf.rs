//! Per-video feature file: `MCNF`, version, modality code, T, D, frames per
//! segment, then T·D little-endian `f32`, row-major.

use std::fs;
use std::path::Path;

use super::{io_error, DataError};
use crate::features::{Modality, VideoFeatures};
use crate::numerics::Tensor2;

pub const FEATURE_MAGIC: &[u8; 4] = b"MCNF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4;

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

/// Reads one modality of a video. `num_segments` defaults to the number of
/// whole segments in the file (at least one); a trailing partial segment is
/// absorbed by the last one.
pub fn read_features(
    path: &Path,
    video_id: &str,
    num_segments: Option<usize>,
) -> Result<VideoFeatures, DataError> {
    let bytes = fs::read(path).map_err(io_error(path))?;
    let fail = |reason: String| DataError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32_at(&bytes, 4);
    if version != FEATURE_VERSION as usize {
        return Err(fail(format!("unsupported version {version}")));
    }
    let modality = Modality::from_code(bytes[8]).ok_or_else(|| fail(format!("unknown modality code {}", bytes[8])))?;
    let t = u32_at(&bytes, 9);
    let d = u32_at(&bytes, 13);
    let fps = u32_at(&bytes, 17);
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(format!("header {t}x{d} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(DataError::Length {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(DataError::NonFinite {
                path: path.to_path_buf(),
                row: i / d.max(1),
                col: i % d.max(1),
            });
        }
        data.push(f64::from(v));
    }
    let frames = Tensor2::from_vec(t, d, data).map_err(|e| fail(e.to_string()))?;
    let n = num_segments.unwrap_or_else(|| (t / fps.max(1)).max(1));
    Ok(VideoFeatures::new(video_id, modality, frames, n, fps)?)
}

/// Values are narrowed to `f32`.
pub fn write_features(path: &Path, features: &VideoFeatures) -> Result<(), DataError> {
    let frames = features.frames();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * frames.data().len());
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.push(features.modality().code());
    for v in [frames.rows(), frames.cols(), features.frames_per_segment()] {
        let v = u32::try_from(v).map_err(|_| DataError::Format {
            path: path.to_path_buf(),
            reason: format!("{v} exceeds the u32 header field"),
        })?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in frames.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_error(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: usize, d: usize) -> VideoFeatures {
        let data = (0..t * d).map(|i| (i as f32 * 0.37 - 3.0) as f64).collect();
        VideoFeatures::new("v", Modality::Flow, Tensor2::from_vec(t, d, data).unwrap(), 4, 3).unwrap()
    }

    #[test]
    fn round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.flow.mcnf");
        let f = sample(12, 4);
        write_features(&p, &f).unwrap();
        let back = read_features(&p, "v", Some(4)).unwrap();
        assert_eq!(back, f);
        assert_eq!(read_features(&p, "v", None).unwrap().num_segments(), 4);
        assert_eq!(fs::read(&p).unwrap().len(), HEADER_LEN + 48 * 4);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mcnf");
        write_features(&p, &sample(12, 4)).unwrap();
        let good = fs::read(&p).unwrap();

        fs::write(&p, &good[..good.len() - 4]).unwrap();
        assert!(matches!(read_features(&p, "v", None), Err(DataError::Length { found: 188, .. })));

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_features(&p, "v", None), Err(DataError::Format { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_features(&p, "v", None), Err(DataError::Format { .. })));

        let mut nan = good;
        let at = HEADER_LEN + (5 * 4 + 2) * 4;
        nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &nan).unwrap();
        assert!(matches!(
            read_features(&p, "v", None),
            Err(DataError::NonFinite { row: 5, col: 2, .. })
        ));
    }
}
