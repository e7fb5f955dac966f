//! Long-term lesion tracking: registered intensity differences combined with
//! the Jacobian determinant into a signed per-voxel change score, plus
//! connected-region extraction for reporting.

use serde::{Deserialize, Serialize};

use crate::cascade::{register, CascadeConfig};
use crate::error::{Error, Result};
use crate::field::{jacobian_determinant, warp};
use crate::vol::Volume;

/// Scale constant of the intensity normalization.
pub const DEFAULT_C: f64 = 10.0;
/// Intensity-difference truncation window in HU.
pub const INTENSITY_WINDOW_HU: f32 = 120.0;
/// Jacobian values this close to 1 take their sign from the intensity change.
pub const JAC_SIGN_EPS: f64 = 1e-6;

/// Truncated absolute difference, normalized to [0,1], plus the raw signed
/// difference kept for sign decisions near J = 1.
pub struct IntensityDifference {
    pub normalized: Volume,
    pub signed: Volume,
}

pub fn intensity_difference(fixed: &Volume, warped: &Volume) -> Result<IntensityDifference> {
    fixed.same_grid(warped)?;
    let n = fixed.len();
    let mut normalized = Volume::filled(fixed.dims, fixed.spacing, 0.0);
    let mut signed = Volume::filled(fixed.dims, fixed.spacing, 0.0);
    for i in 0..n {
        let d = fixed.values[i] - warped.values[i];
        signed.values[i] = d;
        normalized.values[i] = d.abs().min(INTENSITY_WINDOW_HU) / INTENSITY_WINDOW_HU;
    }
    Ok(IntensityDifference { normalized, signed })
}

/// Exponential map of the normalized difference: (C^t - 1)/(C - 1), a
/// monotone bijection of [0,1] onto itself.
pub fn normalize_exp(t: f64, c: f64) -> f64 {
    (c.powf(t) - 1.0) / (c - 1.0)
}

/// Scalar change score: s * (|J - 1| + N(t))^2 where s is the sign of J - 1,
/// falling back to the sign of the intensity change when J is at 1.
pub fn jac_intensity_scalar(j: f64, t: f64, signed_diff: f64, c: f64) -> f64 {
    let dj = j - 1.0;
    let s = if dj.abs() <= JAC_SIGN_EPS {
        if signed_diff > 0.0 {
            1.0
        } else if signed_diff < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        dj.signum()
    };
    let m = dj.abs() + normalize_exp(t, c);
    s * m * m
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionRegion {
    /// +1 for appeared/enlarged, -1 for shrunk/disappeared.
    pub sign: i8,
    pub voxels: usize,
    pub centroid_voxel: [f64; 3],
    pub centroid_mm: [f64; 3],
    /// Physical volume of the region.
    pub volume_mm3: f64,
    /// Score of largest magnitude inside the region.
    pub peak: f64,
}

#[derive(Debug, Clone)]
pub struct LesionMap {
    /// Signed per-voxel change score.
    pub score: Volume,
    pub regions: Vec<LesionRegion>,
}

/// Per-voxel change scores from a Jacobian map and an intensity difference.
pub fn jac_intensity(j: &Volume, diff: &IntensityDifference, c: f64) -> Result<Volume> {
    if c <= 1.0 {
        return Err(Error::InvalidConfig("C must be > 1".into()));
    }
    j.same_grid(&diff.normalized)?;
    let mut out = Volume::filled(j.dims, j.spacing, 0.0);
    for i in 0..j.len() {
        out.values[i] = jac_intensity_scalar(
            j.values[i] as f64,
            diff.normalized.values[i] as f64,
            diff.signed.values[i] as f64,
            c,
        ) as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Score magnitude below which a voxel is considered unchanged.
    pub score_threshold: f64,
    /// Regions smaller than this many voxels are dropped.
    pub min_region_voxels: usize,
    pub c: f64,
    pub cascade: CascadeConfig,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            min_region_voxels: 4,
            c: DEFAULT_C,
            cascade: CascadeConfig::default(),
        }
    }
}

/// 6-connected regions of same-signed above-threshold score voxels.
pub fn extract_regions(score: &Volume, cfg: &TrackConfig) -> Vec<LesionRegion> {
    let [nx, ny, nz] = score.dims;
    let n = score.len();
    let mut visited = vec![false; n];
    let mut regions = Vec::new();
    let active = |i: usize| score.values[i].abs() as f64 > cfg.score_threshold;
    for start in 0..n {
        if visited[start] || !active(start) {
            continue;
        }
        let sign = score.values[start].signum();
        let mut stack = vec![start];
        visited[start] = true;
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            let mut push = |j: usize| {
                if !visited[j] && active(j) && score.values[j].signum() == sign {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < nx {
                push(i + 1);
            }
            if y > 0 {
                push(i - nx);
            }
            if y + 1 < ny {
                push(i + nx);
            }
            if z > 0 {
                push(i - nx * ny);
            }
            if z + 1 < nz {
                push(i + nx * ny);
            }
        }
        if members.len() < cfg.min_region_voxels {
            continue;
        }
        let mut c = [0.0f64; 3];
        let mut peak = 0.0f64;
        for &i in &members {
            c[0] += (i % nx) as f64;
            c[1] += ((i / nx) % ny) as f64;
            c[2] += (i / (nx * ny)) as f64;
            let v = score.values[i] as f64;
            if v.abs() > peak.abs() {
                peak = v;
            }
        }
        let m = members.len() as f64;
        let centroid_voxel = [c[0] / m, c[1] / m, c[2] / m];
        let sp = score.spacing;
        regions.push(LesionRegion {
            sign: if sign >= 0.0 { 1 } else { -1 },
            voxels: members.len(),
            centroid_voxel,
            centroid_mm: [
                centroid_voxel[0] * sp[0] as f64,
                centroid_voxel[1] * sp[1] as f64,
                centroid_voxel[2] * sp[2] as f64,
            ],
            volume_mm3: m * sp[0] as f64 * sp[1] as f64 * sp[2] as f64,
            peak,
        });
    }
    regions.sort_by(|a, b| b.voxels.cmp(&a.voxels));
    regions
}

/// Full tracking workflow. The later scan is fixed and the earlier scan is
/// moving, so positive regions mean new or grown lesions. `enhanced_*` drive
/// the registration; the raw scans supply the intensity differences.
pub fn track(
    earlier_raw: &Volume,
    later_raw: &Volume,
    earlier_enhanced: &Volume,
    later_enhanced: &Volume,
    cfg: &TrackConfig,
) -> Result<LesionMap> {
    later_raw.same_grid(earlier_raw)?;
    let reg = register(later_enhanced, earlier_enhanced, &cfg.cascade, None)?;
    // The field maps later-scan coordinates into the earlier scan, so its
    // determinant is earlier-volume per later-volume; the anatomical change
    // factor (growth > 1) is the reciprocal. Folded or collapsed voxels are
    // clamped before inverting.
    let j = jacobian_determinant(&reg.df)?.map(|d| 1.0 / d.max(1e-6));
    let warped_earlier_raw = warp(earlier_raw, &reg.df)?;
    let diff = intensity_difference(later_raw, &warped_earlier_raw)?;
    let score = jac_intensity(&j, &diff, cfg.c)?;
    let regions = extract_regions(&score, cfg);
    Ok(LesionMap { score, regions })
}
