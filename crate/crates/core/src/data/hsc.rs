//! HSC cube and HSL label-map containers.
//!
//! ```text
//! HSC1 <H> <W> <bands> <f32|f64> hwc\n
//! [EXCLUDE <comma-separated 0-based band list>\n]
//! <H·W·bands little-endian values, row-major H, W, channel>
//!
//! HSL1 <H> <W> u16\n
//! <H·W little-endian u16>
//! ```

use std::path::Path;

use super::{Cube, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Real};

/// Indian Pines water-absorption bands of the 220-band scene, 0-based
/// (1-based 104–108, 150–163, 220).
pub const INDIAN_PINES_EXCLUDED: &[usize] = &[
    103, 104, 105, 106, 107, 149, 150, 151, 152, 153, 154, 155, 156, 157, 158, 159, 160, 161, 162,
    219,
];

/// Salinas water-absorption bands of the 224-band scene, 0-based
/// (1-based 108–112, 154–167, 224).
pub const SALINAS_EXCLUDED: &[usize] = &[
    107, 108, 109, 110, 111, 153, 154, 155, 156, 157, 158, 159, 160, 161, 162, 163, 164, 165, 166,
    223,
];

fn next_line(bytes: &[u8], start: usize) -> Result<(&str, usize)> {
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .ok_or_else(|| Error::format(start, "header line is not newline-terminated"))?;
    let line = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::format(start, "header is not ASCII"))?;
    Ok((line, end + 1))
}

fn parse_dim(tok: Option<&str>, offset: usize, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::format(offset, format!("missing or invalid {what}")))
}

pub fn read_cube<T: Real>(bytes: &[u8]) -> Result<Cube<T>> {
    let (line, mut pos) = next_line(bytes, 0)?;
    let mut toks = line.split_ascii_whitespace();
    if toks.next() != Some("HSC1") {
        return Err(Error::format(0, "bad magic, expected HSC1"));
    }
    let h = parse_dim(toks.next(), 0, "height")?;
    let w = parse_dim(toks.next(), 0, "width")?;
    let bands = parse_dim(toks.next(), 0, "band count")?;
    let dtype = toks
        .next()
        .and_then(Dtype::parse)
        .ok_or_else(|| Error::format(0, "dtype must be f32 or f64"))?;
    if toks.next() != Some("hwc") || toks.next().is_some() {
        return Err(Error::format(0, "order must be hwc"));
    }
    let mut excluded = Vec::new();
    if bytes[pos..].starts_with(b"EXCLUDE") {
        let (line, next) = next_line(bytes, pos)?;
        let list = line["EXCLUDE".len()..].trim();
        for t in list.split(',').filter(|t| !t.trim().is_empty()) {
            let b: usize = t
                .trim()
                .parse()
                .map_err(|_| Error::format(pos, format!("bad excluded band `{t}`")))?;
            if b >= bands {
                return Err(Error::format(pos, format!("excluded band {b} ≥ {bands}")));
            }
            excluded.push(b);
        }
        pos = next;
    }
    let n = h * w * bands;
    let need = n * dtype.size();
    let have = bytes.len() - pos;
    if have != need {
        return Err(Error::format(
            pos + have.min(need),
            format!("payload holds {have} bytes, header declares {need}"),
        ));
    }
    let payload = &bytes[pos..];
    let data: Vec<T> = match dtype {
        Dtype::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        Dtype::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(pos + i * dtype.size(), "non-finite value"));
    }
    let cube = Cube::new(h, w, bands, data)?;
    if excluded.is_empty() {
        Ok(cube)
    } else {
        cube.exclude_bands(&excluded)
    }
}

/// Serializes with `T`'s dtype and no exclusion line.
pub fn write_cube<T: Real>(cube: &Cube<T>) -> Vec<u8> {
    let mut out = format!(
        "HSC1 {} {} {} {} hwc\n",
        cube.height(),
        cube.width(),
        cube.bands(),
        T::DTYPE.tag()
    )
    .into_bytes();
    out.reserve(cube.data().len() * T::DTYPE.size());
    for &v in cube.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn load_cube<T: Real>(path: impl AsRef<Path>) -> Result<Cube<T>> {
    read_cube(&std::fs::read(path)?)
}

pub fn save_cube<T: Real>(path: impl AsRef<Path>, cube: &Cube<T>) -> Result<()> {
    std::fs::write(path, write_cube(cube))?;
    Ok(())
}

pub fn read_labels(bytes: &[u8]) -> Result<LabelMap> {
    let (line, pos) = next_line(bytes, 0)?;
    let mut toks = line.split_ascii_whitespace();
    if toks.next() != Some("HSL1") {
        return Err(Error::format(0, "bad magic, expected HSL1"));
    }
    let h = parse_dim(toks.next(), 0, "height")?;
    let w = parse_dim(toks.next(), 0, "width")?;
    if toks.next() != Some("u16") || toks.next().is_some() {
        return Err(Error::format(0, "label dtype must be u16"));
    }
    let need = h * w * 2;
    let have = bytes.len() - pos;
    if have != need {
        return Err(Error::format(
            pos + have.min(need),
            format!("payload holds {have} bytes, header declares {need}"),
        ));
    }
    let labels = bytes[pos..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelMap::new(h, w, labels)
}

pub fn write_labels(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("HSL1 {} {} u16\n", map.height, map.width).into_bytes();
    for &l in &map.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_labels(&std::fs::read(path)?)
}

pub fn save_labels(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    std::fs::write(path, write_labels(map))?;
    Ok(())
}
