//! Similarity, total loss, landmark target-registration error, and the
//! deformation-impedance summary statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{gradient_penalty, DisplacementField};
use crate::vol::Volume;

/// Global normalized cross-correlation in [-1, 1].
pub fn ncc(a: &Volume, b: &Volume) -> Result<f64> {
    a.same_grid(b)?;
    let n = a.len() as f64;
    let ma = a.mean();
    let mb = b.mean();
    let mut cross = 0.0f64;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    for i in 0..a.len() {
        let da = a.values[i] as f64 - ma;
        let db = b.values[i] as f64 - mb;
        cross += da * db;
        va += da * da;
        vb += db * db;
    }
    if va / n < 1e-24 {
        return Err(Error::ConstantImage("first"));
    }
    if vb / n < 1e-24 {
        return Err(Error::ConstantImage("second"));
    }
    Ok(cross / (va * vb).sqrt())
}

/// Registration loss: negative similarity plus weighted smoothness.
pub fn loss(fixed: &Volume, warped: &Volume, df: &DisplacementField, lambda: f64) -> Result<f64> {
    if fixed.dims != df.dims {
        return Err(Error::DimMismatch(fixed.dims, df.dims));
    }
    Ok(-ncc(fixed, warped)? + lambda * gradient_penalty(df))
}

// ---------------------------------------------------------------------------
// Landmarks
// ---------------------------------------------------------------------------

/// Paired fixed/moving landmark points in voxel index coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub fixed: Vec<[f32; 3]>,
    pub moving: Vec<[f32; 3]>,
    /// mm per voxel, used to convert voxel offsets to physical distances.
    pub spacing: [f32; 3],
}

impl LandmarkSet {
    pub fn new(fixed: Vec<[f32; 3]>, moving: Vec<[f32; 3]>, spacing: [f32; 3]) -> Result<Self> {
        if fixed.len() != moving.len() {
            return Err(Error::LandmarkLengthMismatch { fixed: fixed.len(), moving: moving.len() });
        }
        Ok(Self { fixed, moving, spacing })
    }

    pub fn len(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }
}

/// Parse one "i j k" triple per line; blank lines are skipped.
fn parse_points(path: &Path) -> Result<Vec<[f32; 3]>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut pts = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::MalformedHeader {
                path: path.into(),
                reason: format!("line {}: expected 3 coordinates, got {}", ln + 1, parts.len()),
            });
        }
        let mut p = [0.0f32; 3];
        for (a, s) in parts.iter().enumerate() {
            p[a] = s.parse().map_err(|_| Error::MalformedHeader {
                path: path.into(),
                reason: format!("line {}: bad number {s:?}", ln + 1),
            })?;
        }
        pts.push(p);
    }
    Ok(pts)
}

/// Two parallel point files (fixed, moving), Dir-lab text layout.
pub fn load_landmarks(
    fixed_path: &Path,
    moving_path: &Path,
    spacing: [f32; 3],
) -> Result<LandmarkSet> {
    LandmarkSet::new(parse_points(fixed_path)?, parse_points(moving_path)?, spacing)
}

pub fn save_landmarks(lm: &LandmarkSet, fixed_path: &Path, moving_path: &Path) -> Result<()> {
    let dump = |pts: &[[f32; 3]], path: &Path| -> Result<()> {
        let mut text = String::new();
        for p in pts {
            text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
        }
        std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
    };
    dump(&lm.fixed, fixed_path)?;
    dump(&lm.moving, moving_path)
}

/// Per-landmark TRE in mm: each fixed point is pushed through the field
/// (trilinear sampling) and compared against its true moving partner.
pub fn evaluate_landmarks(lm: &LandmarkSet, df: &DisplacementField) -> Result<Vec<f64>> {
    let dims = df.dims;
    let mut out = Vec::with_capacity(lm.len());
    for (i, (f, m)) in lm.fixed.iter().zip(&lm.moving).enumerate() {
        for a in 0..3 {
            if f[a] < 0.0 || f[a] > (dims[a] - 1) as f32 {
                return Err(Error::LandmarkOutOfBounds { index: i, point: *f, dims });
            }
        }
        let d = df.sample(f[0], f[1], f[2]);
        let mut sq = 0.0f64;
        for a in 0..3 {
            let delta = ((f[a] + d[a] - m[a]) * lm.spacing[a]) as f64;
            sq += delta * delta;
        }
        out.push(sq.sqrt());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Deformation-impedance summary
// ---------------------------------------------------------------------------

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population (divide-by-n) standard deviation.
pub fn population_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseStats {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DicReport {
    pub per_case_pre: Vec<CaseStats>,
    pub per_case_post: Vec<CaseStats>,
    /// SD of all post-registration TREs pooled across cases.
    pub pooled_post_sd: f64,
    /// SD of all pre-registration TREs pooled across cases.
    pub pooled_pre_sd: f64,
    /// |post mean of the max-pre-mean case - post mean of the min-pre-mean case|.
    pub extreme_case_delta: f64,
    /// SD convention for every figure above.
    pub sd_convention: String,
}

/// Cross-case deformation-impedance summary over per-case TRE lists.
pub fn dic_summary(pre: &[Vec<f64>], post: &[Vec<f64>]) -> Result<DicReport> {
    if pre.len() < 2 || pre.len() != post.len() {
        return Err(Error::TooFewCases(pre.len().min(post.len())));
    }
    let stats = |cases: &[Vec<f64>]| -> Vec<CaseStats> {
        cases.iter().map(|c| CaseStats { mean: mean(c), sd: population_sd(c) }).collect()
    };
    let per_case_pre = stats(pre);
    let per_case_post = stats(post);

    let pooled = |cases: &[Vec<f64>]| {
        let all: Vec<f64> = cases.iter().flatten().copied().collect();
        population_sd(&all)
    };

    let mut min_i = 0;
    let mut max_i = 0;
    for (i, s) in per_case_pre.iter().enumerate() {
        if s.mean < per_case_pre[min_i].mean {
            min_i = i;
        }
        if s.mean > per_case_pre[max_i].mean {
            max_i = i;
        }
    }
    Ok(DicReport {
        pooled_post_sd: pooled(post),
        pooled_pre_sd: pooled(pre),
        extreme_case_delta: (per_case_post[max_i].mean - per_case_post[min_i].mean).abs(),
        per_case_pre,
        per_case_post,
        sd_convention: "population".into(),
    })
}

impl DicReport {
    /// Aligned-column text rendering for terminals and logs.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:>4}  {:>10} {:>8}   {:>10} {:>8}\n",
            "case", "pre mean", "pre sd", "post mean", "post sd"
        ));
        for (i, (a, b)) in self.per_case_pre.iter().zip(&self.per_case_post).enumerate() {
            s.push_str(&format!(
                "{:>4}  {:>10.3} {:>8.3}   {:>10.3} {:>8.3}\n",
                i, a.mean, a.sd, b.mean, b.sd
            ));
        }
        s.push_str(&format!(
            "pooled sd: pre {:.4}  post {:.4} ({})\n",
            self.pooled_pre_sd, self.pooled_post_sd, self.sd_convention
        ));
        s.push_str(&format!("extreme-case post delta: {:.4}\n", self.extreme_case_delta));
        s
    }
}
