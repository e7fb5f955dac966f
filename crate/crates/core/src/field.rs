//! Displacement-field algebra: warping, composition, dilation, Jacobian
//! determinant and the smoothness penalty.
//!
//! Fields live on the fixed grid and are stored in voxel units, one scalar
//! grid per component, same x-fastest layout as [`Volume`].

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vol::{sample_grid, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub dims: [usize; 3],
    /// Component grids in x, y, z order.
    pub comp: [Vec<f32>; 3],
}

impl DisplacementField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { dims, comp: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn constant(dims: [usize; 3], d: [f32; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { dims, comp: [vec![d[0]; n], vec![d[1]; n], vec![d[2]; n]] }
    }

    pub fn new(dims: [usize; 3], comp: [Vec<f32>; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        for c in &comp {
            if c.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "component length {} does not match dims {dims:?}",
                    c.len()
                )));
            }
        }
        Ok(Self { dims, comp })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn vector_at(&self, i: usize) -> [f32; 3] {
        [self.comp[0][i], self.comp[1][i], self.comp[2][i]]
    }

    /// Trilinear sample of the vector field at a fractional coordinate.
    pub fn sample(&self, x: f32, y: f32, z: f32) -> [f32; 3] {
        [
            sample_grid(&self.comp[0], self.dims, x, y, z),
            sample_grid(&self.comp[1], self.dims, x, y, z),
            sample_grid(&self.comp[2], self.dims, x, y, z),
        ]
    }

    pub fn scaled(&self, s: f32) -> DisplacementField {
        DisplacementField {
            dims: self.dims,
            comp: [
                self.comp[0].iter().map(|&v| v * s).collect(),
                self.comp[1].iter().map(|&v| v * s).collect(),
                self.comp[2].iter().map(|&v| v * s).collect(),
            ],
        }
    }

    /// Voxelwise sum of two fields on the same grid.
    pub fn add(&self, other: &DisplacementField) -> Result<DisplacementField> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims, other.dims));
        }
        let comp = [0, 1, 2].map(|c: usize| {
            self.comp[c]
                .iter()
                .zip(&other.comp[c])
                .map(|(&a, &b)| a + b)
                .collect()
        });
        Ok(DisplacementField { dims: self.dims, comp })
    }

    pub fn max_magnitude(&self) -> f32 {
        let mut m = 0.0f32;
        for i in 0..self.len() {
            let [dx, dy, dz] = self.vector_at(i);
            m = m.max((dx * dx + dy * dy + dz * dz).sqrt());
        }
        m
    }

    pub fn mean_magnitude(&self) -> f64 {
        let mut s = 0.0f64;
        for i in 0..self.len() {
            let [dx, dy, dz] = self.vector_at(i);
            s += ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
        }
        s / self.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.comp.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Backward warp: `output(x) = moving(x + df(x))`, trilinear, edge-clamped.
pub fn warp(moving: &Volume, df: &DisplacementField) -> Result<Volume> {
    if moving.dims != df.dims {
        return Err(Error::DimMismatch(moving.dims, df.dims));
    }
    let [nx, ny, _] = df.dims;
    let mut values = vec![0.0f32; moving.len()];
    values
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slab)| {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * y;
                    let gi = i + nx * ny * z;
                    let [dx, dy, dz] = df.vector_at(gi);
                    slab[i] = moving.sample(x as f32 + dx, y as f32 + dy, z as f32 + dz);
                }
            }
        });
    Ok(Volume { dims: moving.dims, spacing: moving.spacing, values })
}

/// Connect an aggregate field through a finer flow:
/// `result(x) = flow(x) + aggregate(x + flow(x))`.
pub fn compose(aggregate: &DisplacementField, flow: &DisplacementField) -> Result<DisplacementField> {
    if aggregate.dims != flow.dims {
        return Err(Error::DimMismatch(aggregate.dims, flow.dims));
    }
    let [nx, ny, _] = flow.dims;
    let plane = nx * ny;
    let mut comp = [vec![0.0f32; flow.len()], vec![0.0f32; flow.len()], vec![0.0f32; flow.len()]];
    let (cx, rest) = comp.split_at_mut(1);
    let (cy, cz) = rest.split_at_mut(1);
    cx[0]
        .par_chunks_mut(plane)
        .zip(cy[0].par_chunks_mut(plane))
        .zip(cz[0].par_chunks_mut(plane))
        .enumerate()
        .for_each(|(z, ((sx, sy), sz))| {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * y;
                    let gi = i + plane * z;
                    let [fx, fy, fz] = flow.vector_at(gi);
                    let a = aggregate.sample(x as f32 + fx, y as f32 + fy, z as f32 + fz);
                    sx[i] = fx + a[0];
                    sy[i] = fy + a[1];
                    sz[i] = fz + a[2];
                }
            }
        });
    DisplacementField::new(flow.dims, comp)
}

// Catmull-Rom weights for the four taps around a fractional position.
#[inline]
fn catmull_rom(t: f32) -> [f32; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

// Fetch with linear extrapolation past the ends, so cubic resampling stays
// exact on linear ramps up to the boundary.
#[inline]
fn fetch_extrap(line: &[f32], i: i64) -> f32 {
    let n = line.len() as i64;
    if n == 1 {
        line[0]
    } else if i < 0 {
        line[0] + i as f32 * (line[1] - line[0])
    } else if i >= n {
        line[(n - 1) as usize] + (i - (n - 1)) as f32 * (line[(n - 1) as usize] - line[(n - 2) as usize])
    } else {
        line[i as usize]
    }
}

fn resample_line_cubic(line: &[f32], out_len: usize) -> Vec<f32> {
    if out_len == line.len() {
        return line.to_vec();
    }
    let scale = if out_len > 1 {
        (line.len() as f32 - 1.0) / (out_len as f32 - 1.0)
    } else {
        0.0
    };
    (0..out_len)
        .map(|o| {
            let s = o as f32 * scale;
            let i0 = s.floor() as i64;
            let t = s - i0 as f32;
            let w = catmull_rom(t);
            w[0] * fetch_extrap(line, i0 - 1)
                + w[1] * fetch_extrap(line, i0)
                + w[2] * fetch_extrap(line, i0 + 1)
                + w[3] * fetch_extrap(line, i0 + 2)
        })
        .collect()
}

// Separable cubic resampling of one scalar grid to new dims, axis by axis.
fn resample_grid_cubic(values: &[f32], dims: [usize; 3], target: [usize; 3]) -> Vec<f32> {
    // x axis
    let [nx, ny, nz] = dims;
    let tx = target[0];
    let mut buf_x = vec![0.0f32; tx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            let src: Vec<f32> = (0..nx).map(|x| values[x + nx * (y + ny * z)]).collect();
            let dst = resample_line_cubic(&src, tx);
            for x in 0..tx {
                buf_x[x + tx * (y + ny * z)] = dst[x];
            }
        }
    }
    // y axis
    let ty = target[1];
    let mut buf_y = vec![0.0f32; tx * ty * nz];
    for z in 0..nz {
        for x in 0..tx {
            let src: Vec<f32> = (0..ny).map(|y| buf_x[x + tx * (y + ny * z)]).collect();
            let dst = resample_line_cubic(&src, ty);
            for y in 0..ty {
                buf_y[x + tx * (y + ty * z)] = dst[y];
            }
        }
    }
    // z axis
    let tz = target[2];
    let mut out = vec![0.0f32; tx * ty * tz];
    for y in 0..ty {
        for x in 0..tx {
            let src: Vec<f32> = (0..nz).map(|z| buf_y[x + tx * (y + ty * z)]).collect();
            let dst = resample_line_cubic(&src, tz);
            for z in 0..tz {
                out[x + tx * (y + ty * z)] = dst[z];
            }
        }
    }
    out
}

/// Upsample a flow to `target` dims by separable Catmull-Rom interpolation,
/// scaling each component by its axis grid-size ratio so voxel-unit
/// displacements stay consistent on the finer grid.
pub fn dilate_flow(df: &DisplacementField, target: [usize; 3]) -> DisplacementField {
    let ratio = [0, 1, 2].map(|a| target[a] as f32 / df.dims[a] as f32);
    let comp = [0, 1, 2].map(|c: usize| {
        let mut g = resample_grid_cubic(&df.comp[c], df.dims, target);
        for v in &mut g {
            *v *= ratio[c];
        }
        g
    });
    DisplacementField { dims: target, comp }
}

/// `J(x) = det(I + ∇df(x))` in index space; central differences in the
/// interior, one-sided at borders.
pub fn jacobian_determinant(df: &DisplacementField) -> Result<Volume> {
    let [nx, ny, nz] = df.dims;
    if nx < 3 || ny < 3 || nz < 3 {
        return Err(Error::TooSmall { op: "jacobian_determinant", dims: df.dims });
    }
    let plane = nx * ny;
    let mut values = vec![0.0f32; df.len()];
    values.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                // d(comp c)/d(axis a)
                let deriv = |c: usize, a: usize| -> f32 {
                    let n = [nx, ny, nz][a];
                    let p = [x, y, z];
                    let at = |p: [usize; 3]| df.comp[c][p[0] + nx * (p[1] + ny * p[2])];
                    if p[a] == 0 {
                        let mut q = p;
                        q[a] = 1;
                        at(q) - at(p)
                    } else if p[a] == n - 1 {
                        let mut q = p;
                        q[a] = n - 2;
                        at(p) - at(q)
                    } else {
                        let mut hi = p;
                        hi[a] += 1;
                        let mut lo = p;
                        lo[a] -= 1;
                        0.5 * (at(hi) - at(lo))
                    }
                };
                let mut m = [[0.0f32; 3]; 3];
                for c in 0..3 {
                    for a in 0..3 {
                        m[c][a] = deriv(c, a) + if c == a { 1.0 } else { 0.0 };
                    }
                }
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                slab[x + nx * y] = det;
            }
        }
    });
    Ok(Volume { dims: df.dims, spacing: [1.0; 3], values })
}

/// Mean over voxels of the summed squared forward differences of all three
/// components along all three axes (the `Σ‖∇DF‖²` term, mean-normalized).
pub fn gradient_penalty(df: &DisplacementField) -> f64 {
    let [nx, ny, nz] = df.dims;
    let mut total = 0.0f64;
    for c in 0..3 {
        let g = &df.comp[c];
        for z in 0..nz {
            for y in 0..ny {
                let row = nx * (y + ny * z);
                for x in 0..nx {
                    let i = row + x;
                    let v = g[i] as f64;
                    if x + 1 < nx {
                        let d = g[i + 1] as f64 - v;
                        total += d * d;
                    }
                    if y + 1 < ny {
                        let d = g[i + nx] as f64 - v;
                        total += d * d;
                    }
                    if z + 1 < nz {
                        let d = g[i + nx * ny] as f64 - v;
                        total += d * d;
                    }
                }
            }
        }
    }
    total / df.len() as f64
}

// ---------------------------------------------------------------------------
// Field file I/O: planar f32le payloads (x, y, z) + JSON sidecar.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct FieldSidecar {
    dims: [usize; 3],
    unit: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    std::path::PathBuf::from(p)
}

pub fn save_field(df: &DisplacementField, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(df.len() * 12);
    for c in 0..3 {
        for &v in &df.comp[c] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &payload).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let sc = FieldSidecar { dims: df.dims, unit: "voxel".into() };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sc).unwrap())
        .map_err(|e| Error::Io { path: path.into(), source: e })
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    let sc_path = sidecar_path(path);
    let sc_bytes =
        std::fs::read(&sc_path).map_err(|e| Error::Io { path: sc_path.clone(), source: e })?;
    let sc: FieldSidecar = serde_json::from_slice(&sc_bytes).map_err(|e| Error::MalformedHeader {
        path: sc_path,
        reason: e.to_string(),
    })?;
    let payload = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let n = sc.dims[0] * sc.dims[1] * sc.dims[2];
    if payload.len() != n * 12 {
        return Err(Error::SizeMismatch { path: path.into(), expected: n * 3, actual: payload.len() / 4 });
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DisplacementField::new(
        sc.dims,
        [floats[..n].to_vec(), floats[n..2 * n].to_vec(), floats[2 * n..].to_vec()],
    )
}
