//! On-disk formats: `.vpt` tensors, binary PPM frames and ASCII PLY clouds.
//!
//! `.vpt` layout: magic `VPT1`, `u32` ndim, `ndim` x `u32` extents, then the
//! `f32` payload in row-major order. Everything is little-endian.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use pointvid_core::tensor::{RgbVideo, TensorF, MAX_DIMS};

use crate::error::{PvError, Result};

pub const VPT_MAGIC: &[u8; 4] = b"VPT1";

pub fn encode_tensor(t: &TensorF) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(VPT_MAGIC);
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `.vpt` image; errors carry the byte offset of the problem.
pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<TensorF, (u64, String)> {
    let u32_at = |off: usize| -> std::result::Result<u32, (u64, String)> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or((off as u64, "truncated header".to_string()))
    };
    if bytes.len() < 4 || &bytes[..4] != VPT_MAGIC {
        return Err((0, format!("bad magic {:?}", &bytes[..bytes.len().min(4)])));
    }
    let ndim = u32_at(4)? as usize;
    if ndim == 0 || ndim > MAX_DIMS {
        return Err((4, format!("ndim {ndim} outside 1..={MAX_DIMS}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for i in 0..ndim {
        let off = 8 + 4 * i;
        let d = u32_at(off)?;
        if d == 0 {
            return Err((off as u64, "zero extent".into()));
        }
        count = count
            .checked_mul(d as u64)
            .filter(|c| *c <= (usize::MAX / 4) as u64)
            .ok_or((off as u64, "dimension product overflows".to_string()))?;
        dims.push(d as usize);
    }
    let start = 8 + 4 * ndim;
    let want = start as u64 + 4 * count;
    if (bytes.len() as u64) < want {
        return Err((bytes.len() as u64, format!("truncated payload: expected {want} bytes, found {}", bytes.len())));
    }
    if (bytes.len() as u64) > want {
        return Err((want, format!("{} trailing bytes", bytes.len() as u64 - want)));
    }
    let data: Vec<f32> =
        bytes[start..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(((start + 4 * i) as u64, format!("non-finite value {}", data[i])));
    }
    TensorF::new(dims, data).map_err(|e| (start as u64, e.to_string()))
}

pub fn write_tensor(t: &TensorF, path: &Path) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| PvError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorF> {
    let bytes = fs::read(path).map_err(|e| PvError::io(path, e))?;
    decode_tensor(&bytes).map_err(|(offset, msg)| PvError::Format { path: path.to_path_buf(), offset, msg })
}

/// `round(255 x)` for `x` in `[0, 1]`.
pub fn to_byte(x: f32) -> u8 {
    (255.0 * x).round() as u8
}

pub fn ppm_bytes(width: usize, height: usize, rgb: &[f32]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(PvError::Input(format!("PPM payload of {} values for {width}x{height}", rgb.len())));
    }
    if let Some(v) = rgb.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(PvError::Input(format!("PPM value {v} outside [0, 1]")));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// One `frame_NNN.ppm` per frame. Returns the written paths.
pub fn write_ppm_frames(v: &RgbVideo, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| PvError::io(dir, e))?;
    let (h, w) = (v.height(), v.width());
    let frame_len = h * w * 3;
    let mut paths = Vec::with_capacity(v.frames());
    for t in 0..v.frames() {
        let bytes = ppm_bytes(w, h, &v.tensor().data()[t * frame_len..(t + 1) * frame_len])?;
        let path = dir.join(format!("frame_{t:03}.ppm"));
        fs::write(&path, bytes).map_err(|e| PvError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads a binary P6 PPM with maxval 255 as `(width, height, [H, W, 3] in [0, 1])`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| PvError::io(path, e))?;
    let fail = |offset: usize, msg: &str| PvError::Format { path: path.to_path_buf(), offset: offset as u64, msg: msg.into() };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "truncated header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string()));
    }
    if fields[0].1 != "P6" {
        return Err(fail(0, "expected P6 magic"));
    }
    let num = |k: usize| fields[k].1.parse::<usize>().map_err(|_| fail(fields[k].0, "bad header number"));
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(fail(fields[3].0, "only 8-bit, non-empty images are supported"));
    }
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != w * h * 3 {
        return Err(fail(bytes.len(), "payload size does not match header"));
    }
    Ok((w, h, payload.iter().map(|&b| b as f32 / 255.0).collect()))
}

/// ASCII PLY with optional per-vertex 8-bit colors.
pub fn ply_string(points: &[[f64; 3]], colors: Option<&[[u8; 3]]>) -> Result<String> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(PvError::Input(format!("{} colors for {} points", c.len(), points.len())));
        }
    }
    if let Some(p) = points.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(PvError::Input(format!("non-finite PLY coordinate {p:?}")));
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(c) = colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_ply(points: &[[f64; 3]], colors: Option<&[[u8; 3]]>, path: &Path) -> Result<()> {
    let s = ply_string(points, colors)?;
    let mut f = fs::File::create(path).map_err(|e| PvError::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| PvError::io(path, e))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| PvError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PvError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| PvError::Json { path: path.into(), source: e })?;
    s.push('\n');
    fs::write(path, s).map_err(|e| PvError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| PvError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| PvError::Json { path: path.into(), source: e })
}
