//! Scalar 3-D volumes with physical spacing, plus file I/O.
//!
//! Linearization is x-fastest everywhere: `index = x + dims[0]*(y + dims[1]*z)`.
//! Scalars are `f32`; integer CT data is widened on load.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hounsfield intensity window `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityWindow {
    pub low: f32,
    pub high: f32,
}

impl IntensityWindow {
    pub fn new(low: f32, high: f32) -> Result<Self> {
        if !(low < high) {
            return Err(Error::InvalidConfig(format!(
                "intensity window requires low < high, got [{low}, {high}]"
            )));
        }
        Ok(Self { low, high })
    }

    /// The default chest CT window of [-1000, 700] HU.
    pub fn chest_ct() -> Self {
        Self { low: -1000.0, high: 700.0 }
    }

    pub fn clip(&self, v: f32) -> f32 {
        v.clamp(self.low, self.high)
    }

    pub fn width(&self) -> f32 {
        self.high - self.low
    }
}

/// Dense scalar volume. Immutable after construction by convention; all
/// operations on it are pure and return new volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub values: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig(format!("non-positive spacing {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::InvalidConfig(format!(
                "value count {} does not match dims {dims:?} ({n})",
                values.len()
            )));
        }
        Ok(Self { dims, spacing, values })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { dims, spacing, values: vec![value; n] }
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, [1.0; 3], 0.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.idx(x, y, z);
        self.values[i] = v;
    }

    /// Trilinear sample at a fractional voxel coordinate, edge-clamped.
    pub fn sample(&self, x: f32, y: f32, z: f32) -> f32 {
        sample_grid(&self.values, self.dims, x, y, z)
    }

    pub fn same_grid(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }
}

/// Trilinear interpolation on a raw grid, edge-clamped sample coordinates.
#[inline]
pub(crate) fn sample_grid(values: &[f32], dims: [usize; 3], x: f32, y: f32, z: f32) -> f32 {
    let [nx, ny, nz] = dims;
    let cx = x.clamp(0.0, (nx - 1) as f32);
    let cy = y.clamp(0.0, (ny - 1) as f32);
    let cz = z.clamp(0.0, (nz - 1) as f32);

    let x0 = (cx.floor() as usize).min(nx - 1);
    let y0 = (cy.floor() as usize).min(ny - 1);
    let z0 = (cz.floor() as usize).min(nz - 1);
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);

    let fx = cx - x0 as f32;
    let fy = cy - y0 as f32;
    let fz = cz - z0 as f32;

    let at = |x: usize, y: usize, z: usize| values[x + nx * (y + ny * z)];

    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;

    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;

    c0 * (1.0 - fz) + c1 * fz
}

// ---------------------------------------------------------------------------
// File I/O: minimal NIfTI-1 plus a raw+JSON-sidecar fallback.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    dims: [usize; 3],
    spacing: [f32; 3],
    dtype: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    std::path::PathBuf::from(p)
}

fn is_nifti_path(path: &Path) -> bool {
    let s = path.to_string_lossy().to_ascii_lowercase();
    s.ends_with(".nii") || s.ends_with(".nii.gz")
}

/// Load a volume from NIfTI-1 (`.nii`, `.nii.gz`) or raw+sidecar.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if is_nifti_path(path) {
        load_nifti(path)
    } else {
        load_raw(path)
    }
}

/// Save a volume; format selected by extension as in [`load_volume`].
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    if is_nifti_path(path) {
        save_nifti(v, path)
    } else {
        save_raw(v, path)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    f.write_all(bytes)
        .map_err(|e| Error::Io { path: path.into(), source: e })
}

fn load_raw(path: &Path) -> Result<Volume> {
    let sc_path = sidecar_path(path);
    let sc_bytes = read_all(&sc_path)?;
    let sc: RawSidecar = serde_json::from_slice(&sc_bytes).map_err(|e| Error::MalformedHeader {
        path: sc_path.clone(),
        reason: e.to_string(),
    })?;
    if sc.dtype != "f32le" {
        return Err(Error::UnsupportedDataType { path: sc_path, dtype: sc.dtype });
    }
    let payload = read_all(path)?;
    let expected = sc.dims[0] * sc.dims[1] * sc.dims[2];
    if payload.len() != expected * 4 {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected,
            actual: payload.len() / 4,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(sc.dims, sc.spacing, values)
}

fn save_raw(v: &Volume, path: &Path) -> Result<()> {
    let sc = RawSidecar { dims: v.dims, spacing: v.spacing, dtype: "f32le".into() };
    let mut payload = Vec::with_capacity(v.len() * 4);
    for &x in &v.values {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_all(path, &payload)?;
    write_all(&sidecar_path(path), serde_json::to_string_pretty(&sc).unwrap().as_bytes())
}

const NIFTI_HDR_LEN: usize = 348;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn load_nifti(path: &Path) -> Result<Volume> {
    let mut bytes = read_all(path)?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut decoder = flate2::read::GzDecoder::new(&bytes[..]);
        let mut out = Vec::new();
        decoder
            .read_to_end(&mut out)
            .map_err(|e| Error::Io { path: path.into(), source: e })?;
        bytes = out;
    }
    if bytes.len() < NIFTI_HDR_LEN {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: format!("file shorter than the {NIFTI_HDR_LEN}-byte header"),
        });
    }
    let i16_at = |off: usize| i16::from_le_bytes([bytes[off], bytes[off + 1]]);
    let i32_at = |off: usize| {
        i32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
    };
    let f32_at = |off: usize| {
        f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
    };

    if i32_at(0) != NIFTI_HDR_LEN as i32 {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: format!("sizeof_hdr = {}, expected 348", i32_at(0)),
        });
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "bad magic".into(),
        });
    }

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: format!("dim[0] = {ndim}"),
        });
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        let d = if (a as i16) < ndim { i16_at(40 + 2 * (a + 1)) } else { 1 };
        if d < 1 {
            return Err(Error::MalformedHeader {
                path: path.into(),
                reason: format!("dim[{}] = {d}", a + 1),
            });
        }
        dims[a] = d as usize;
    }
    // Trailing dims beyond 3 must be singleton; this reader is 3-D only.
    for a in 4..=(ndim as usize) {
        let d = i16_at(40 + 2 * a);
        if d > 1 {
            return Err(Error::UnsupportedFormat(path.into()));
        }
    }

    let datatype = i16_at(70);
    let mut spacing = [1.0f32; 3];
    for a in 0..3 {
        let p = f32_at(76 + 4 * (a + 1));
        spacing[a] = if p > 0.0 { p } else { 1.0 };
    }
    let vox_offset = f32_at(108) as usize;
    let scl_slope = f32_at(112);
    let scl_inter = f32_at(116);
    let slope = if scl_slope == 0.0 { 1.0 } else { scl_slope };

    let n = dims[0] * dims[1] * dims[2];
    let offset = vox_offset.max(NIFTI_HDR_LEN);
    let payload = &bytes[offset.min(bytes.len())..];

    let values: Vec<f32> = match datatype {
        DT_INT16 => {
            if payload.len() < n * 2 {
                return Err(Error::SizeMismatch {
                    path: path.into(),
                    expected: n,
                    actual: payload.len() / 2,
                });
            }
            payload[..n * 2]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 * slope + scl_inter)
                .collect()
        }
        DT_FLOAT32 => {
            if payload.len() < n * 4 {
                return Err(Error::SizeMismatch {
                    path: path.into(),
                    expected: n,
                    actual: payload.len() / 4,
                });
            }
            payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) * slope + scl_inter)
                .collect()
        }
        other => {
            return Err(Error::UnsupportedDataType {
                path: path.into(),
                dtype: format!("nifti datatype code {other}"),
            })
        }
    };

    Volume::new(dims, spacing, values)
}

fn save_nifti(v: &Volume, path: &Path) -> Result<()> {
    let mut hdr = vec![0u8; 352]; // header + 4 pad bytes, vox_offset 352
    hdr[0..4].copy_from_slice(&(NIFTI_HDR_LEN as i32).to_le_bytes());
    let put_i16 = |hdr: &mut [u8], off: usize, v: i16| hdr[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |hdr: &mut [u8], off: usize, v: f32| hdr[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i16(&mut hdr, 40, 3); // dim[0]
    for a in 0..3 {
        put_i16(&mut hdr, 40 + 2 * (a + 1), v.dims[a] as i16);
    }
    for a in 4..8 {
        put_i16(&mut hdr, 40 + 2 * a, 1);
    }
    put_i16(&mut hdr, 70, DT_FLOAT32);
    put_i16(&mut hdr, 72, 32); // bitpix
    put_f32(&mut hdr, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut hdr, 76 + 4 * (a + 1), v.spacing[a]);
    }
    put_f32(&mut hdr, 108, 352.0); // vox_offset
    put_f32(&mut hdr, 112, 1.0); // scl_slope
    put_f32(&mut hdr, 116, 0.0); // scl_inter
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut out = hdr;
    out.reserve(v.len() * 4);
    for &x in &v.values {
        out.extend_from_slice(&x.to_le_bytes());
    }

    if path.to_string_lossy().to_ascii_lowercase().ends_with(".gz") {
        let f = File::create(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
        enc.write_all(&out)
            .and_then(|_| enc.finish().map(|_| ()))
            .map_err(|e| Error::Io { path: path.into(), source: e })
    } else {
        write_all(path, &out)
    }
}

// ---------------------------------------------------------------------------
// Geometric utilities
// ---------------------------------------------------------------------------

/// Center-crop-or-pad to `target` dims. Content is centered on the bounding
/// box of `mask` when given (nonzero voxels), otherwise on the volume center.
/// Voxels with no source fall back to `pad`.
pub fn crop_center_pad(
    v: &Volume,
    target: [usize; 3],
    pad: f32,
    mask: Option<&Volume>,
) -> Result<Volume> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::InvalidConfig("target dims must be positive".into()));
    }
    let center = match mask {
        Some(m) => {
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            for z in 0..m.dims[2] {
                for y in 0..m.dims[1] {
                    for x in 0..m.dims[0] {
                        if m.at(x, y, z) != 0.0 {
                            let p = [x, y, z];
                            for a in 0..3 {
                                lo[a] = lo[a].min(p[a]);
                                hi[a] = hi[a].max(p[a]);
                            }
                        }
                    }
                }
            }
            if lo[0] == usize::MAX {
                // empty mask: fall back to the volume center
                [0, 1, 2].map(|a| (v.dims[a] as f64 - 1.0) / 2.0)
            } else {
                [0, 1, 2].map(|a| (lo[a] + hi[a]) as f64 / 2.0)
            }
        }
        None => [0, 1, 2].map(|a| (v.dims[a] as f64 - 1.0) / 2.0),
    };

    // Integer source offset so source voxels survive unresampled.
    let offset: [i64; 3] = [0, 1, 2].map(|a| {
        (center[a] - (target[a] as f64 - 1.0) / 2.0).round() as i64
    });

    let mut out = Volume::filled(target, v.spacing, pad);
    for tz in 0..target[2] {
        let sz = tz as i64 + offset[2];
        if sz < 0 || sz >= v.dims[2] as i64 {
            continue;
        }
        for ty in 0..target[1] {
            let sy = ty as i64 + offset[1];
            if sy < 0 || sy >= v.dims[1] as i64 {
                continue;
            }
            for tx in 0..target[0] {
                let sx = tx as i64 + offset[0];
                if sx < 0 || sx >= v.dims[0] as i64 {
                    continue;
                }
                let val = v.at(sx as usize, sy as usize, sz as usize);
                out.set(tx, ty, tz, val);
            }
        }
    }
    Ok(out)
}
