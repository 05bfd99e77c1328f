//! On-disk input formats.
//!
//! * image: binary portable graymap (P5), 8-bit, scaled to [0, 1]
//! * volume: raw little-endian f32, slice-major, with a JSON sidecar
//!   `{"dims": [D, H, W]}` next to it (`scan.raw` → `scan.json`)
//! * video: a directory of P5 frames, read in lexicographic file-name order

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vistream::{PixelPlane, SourceKind, VisualInput};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn load_input(path: &Path, kind: SourceKind) -> Result<VisualInput> {
    match kind {
        SourceKind::Image2D => VisualInput::new(kind, vec![read_pgm(path)?]),
        SourceKind::Volume3D => VisualInput::new(kind, read_volume(path)?),
        SourceKind::Video => VisualInput::new(kind, read_frames(path)?),
    }
}

/// Writes `input` in the format [`load_input`] expects for its kind.
pub fn save_input(path: &Path, input: &VisualInput) -> Result<()> {
    match input.kind() {
        SourceKind::Image2D => write_pgm(path, &input.planes()[0]),
        SourceKind::Volume3D => write_volume(path, input.planes()),
        SourceKind::Video => write_frames(path, input.planes()),
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Splits the next whitespace-delimited header field, skipping `#` comments.
fn header_field<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Parses a P5 graymap already in memory.
pub fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<PixelPlane> {
    let mut pos = 0;
    if header_field(bytes, &mut pos) != Some(b"P5") {
        return Err(malformed(path, "missing P5 magic"));
    }
    let mut number = |what: &str| -> Result<usize> {
        let field = header_field(bytes, &mut pos).ok_or_else(|| malformed(path, format!("missing {what}")))?;
        std::str::from_utf8(field)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, format!("bad {what} `{}`", String::from_utf8_lossy(field))))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(path, format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(malformed(path, format!("maxval {maxval}, only 8-bit (255) is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed(path, "header not terminated"));
    }
    let raster = &bytes[pos + 1..];
    if raster.len() != width * height {
        return Err(Error::DimsMismatch {
            path: path.to_path_buf(),
            expected: width * height,
            found: raster.len(),
        });
    }
    let data = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    PixelPlane::new(height, width, data)
}

pub fn read_pgm(path: &Path) -> Result<PixelPlane> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(path, &bytes)
}

/// Nearest 8-bit level of a [0, 1] value.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(plane: &PixelPlane) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", plane.width(), plane.height()).into_bytes();
    out.extend(plane.data().iter().map(|&v| quantize_u8(v)));
    out
}

pub fn write_pgm(path: &Path, plane: &PixelPlane) -> Result<()> {
    fs::write(path, encode_pgm(plane)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Vec<PixelPlane>> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: VolumeSidecar =
        serde_json::from_slice(&text).map_err(|e| malformed(&side, format!("sidecar: {e}")))?;
    let [depth, height, width] = sidecar.dims;
    if depth == 0 || height == 0 || width == 0 {
        return Err(malformed(&side, format!("zero dimension in {:?}", sidecar.dims)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = depth * height * width;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::DimsMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() / 4,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::BadPayload {
            path: path.to_path_buf(),
            reason: format!("non-finite voxel at index {i}"),
        });
    }
    values
        .chunks_exact(height * width)
        .map(|slice| PixelPlane::new(height, width, slice.to_vec()))
        .collect()
}

pub fn write_volume(path: &Path, planes: &[PixelPlane]) -> Result<()> {
    let first = planes.first().ok_or(Error::Empty("volume slices"))?;
    let sidecar = VolumeSidecar {
        dims: [planes.len(), first.height(), first.width()],
    };
    let mut bytes = Vec::with_capacity(planes.len() * first.data().len() * 4);
    for plane in planes {
        for &v in plane.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(&side, e))
}

/// `.pgm` files of a directory, sorted by file name.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_pgm = path
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("pgm"));
        if is_pgm && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(Error::Empty("video directory has no .pgm frames"));
    }
    Ok(paths)
}

pub fn read_frames(dir: &Path) -> Result<Vec<PixelPlane>> {
    frame_paths(dir)?.iter().map(|p| read_pgm(p)).collect()
}

/// Writes frames as `frame_00000.pgm`, `frame_00001.pgm`, ...
pub fn write_frames(dir: &Path, planes: &[PixelPlane]) -> Result<()> {
    if planes.is_empty() {
        return Err(Error::Empty("video frames"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, plane) in planes.iter().enumerate() {
        write_pgm(&dir.join(format!("frame_{i:05}.pgm")), plane)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_scaling_example() {
        let bytes = b"P5\n2 2\n255\n\x00\x55\xaa\xff";
        let plane = parse_pgm(Path::new("x.pgm"), bytes).unwrap();
        assert_eq!((plane.height(), plane.width()), (2, 2));
        assert_eq!(plane.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let p = Path::new("x.pgm");
        let plane = parse_pgm(p, b"P5 # made by hand\n1 1 # one pixel\n255\n\x80").unwrap();
        assert_eq!(plane.data(), &[128.0 / 255.0]);
        assert!(matches!(parse_pgm(p, b"P2\n1 1\n255\n1"), Err(Error::MalformedHeader { .. })));
        assert!(matches!(parse_pgm(p, b"P5\n1 x\n255\n1"), Err(Error::MalformedHeader { .. })));
        assert!(matches!(parse_pgm(p, b"P5\n1 1\n65535\n11"), Err(Error::MalformedHeader { .. })));
        assert!(matches!(
            parse_pgm(p, b"P5\n2 2\n255\n\x01\x02\x03"),
            Err(Error::DimsMismatch { expected: 4, found: 3, .. })
        ));
    }

    #[test]
    fn quantize_round_trip_levels() {
        for k in 0..=255u8 {
            assert_eq!(quantize_u8(f64::from(k) / 255.0), k);
        }
        assert_eq!(quantize_u8(-0.5), 0);
        assert_eq!(quantize_u8(7.0), 255);
    }
}
