//! Pre-processing: lung parenchyma segmentation, tri-orthogonal 2-D Frangi
//! vesselness, logarithmic vessel enhancement and window normalization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vol::{IntensityWindow, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window: IntensityWindow,
    /// Gap D between the window floor and the lowest enhanced intensity (HU).
    pub enhancement_offset: f32,
    /// Per-slice connected components smaller than this are dropped.
    pub min_slice_area: usize,
    /// Frangi scales in voxels, ascending.
    pub frangi_scales: Vec<f32>,
    /// Blob sensitivity (β of the 2-D Frangi response).
    pub frangi_blob_sensitivity: f32,
    /// Structure sensitivity as a fraction of the per-slice maximum Hessian norm.
    pub frangi_structure_sensitivity: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window: IntensityWindow::chest_ct(),
            enhancement_offset: 200.0,
            min_slice_area: 300,
            frangi_scales: vec![1.0, 2.0, 3.0],
            frangi_blob_sensitivity: 0.5,
            frangi_structure_sensitivity: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enhancement_offset < 0.0 {
            return Err(Error::InvalidConfig("enhancement offset must be >= 0".into()));
        }
        if self.frangi_scales.is_empty() {
            return Err(Error::InvalidConfig("frangi scales must be non-empty".into()));
        }
        if self.frangi_scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("frangi scales must be ascending".into()));
        }
        if self.frangi_scales.iter().any(|&s| s <= 0.0)
            || self.frangi_blob_sensitivity <= 0.0
            || self.frangi_structure_sensitivity <= 0.0
        {
            return Err(Error::InvalidConfig("frangi parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Vesselness response on the source grid, values in [0, 1].
#[derive(Debug, Clone)]
pub struct VesselnessMask(pub Volume);

// ---------------------------------------------------------------------------
// Two-means clustering threshold
// ---------------------------------------------------------------------------

/// Midpoint of the two converged cluster centers of 1-D two-means over the
/// window-clipped intensities. Centers start at the window endpoints.
pub fn two_means_threshold(v: &Volume, window: IntensityWindow) -> Result<f32> {
    let clipped: Vec<f32> = v.values.iter().map(|&x| window.clip(x)).collect();
    let (lo, hi) = {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &x in &clipped {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        (lo, hi)
    };
    if lo == hi {
        return Err(Error::DegenerateClustering);
    }

    let mut c0 = window.low as f64;
    let mut c1 = window.high as f64;
    let mut boundary = f64::NAN;
    for _ in 0..256 {
        let split = (c0 + c1) / 2.0;
        if split == boundary {
            break;
        }
        boundary = split;
        let (mut s0, mut n0, mut s1, mut n1) = (0.0f64, 0u64, 0.0f64, 0u64);
        for &x in &clipped {
            if (x as f64) < split {
                s0 += x as f64;
                n0 += 1;
            } else {
                s1 += x as f64;
                n1 += 1;
            }
        }
        if n0 == 0 || n1 == 0 {
            // one cluster empty: nudge the empty center to the extreme value
            if n0 == 0 {
                c0 = lo as f64;
            } else {
                c1 = hi as f64;
            }
            continue;
        }
        c0 = s0 / n0 as f64;
        c1 = s1 / n1 as f64;
    }
    Ok(((c0 + c1) / 2.0) as f32)
}

// ---------------------------------------------------------------------------
// Lung parenchyma segmentation
// ---------------------------------------------------------------------------

/// Binary parenchyma mask: sub-threshold voxels not connected to the volume
/// border, filtered per axial slice (small components dropped, holes filled).
pub fn segment_lungs(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let threshold = match two_means_threshold(v, cfg.window) {
        Ok(t) => t,
        Err(Error::DegenerateClustering) => return Err(Error::EmptySegmentation),
        Err(e) => return Err(e),
    };
    let [nx, ny, nz] = v.dims;
    let below: Vec<bool> = v.values.iter().map(|&x| cfg.window.clip(x) < threshold).collect();

    // 3-D 6-connectivity flood fill from sub-threshold voxels on the in-plane
    // border. The axial end slices are not seeded: lungs routinely intersect
    // them, while exterior air always reaches the x/y faces.
    let mut exterior = vec![false; below.len()];
    let mut stack: Vec<usize> = Vec::new();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if x == 0 || y == 0 || x == nx - 1 || y == ny - 1 {
                    let i = idx(x, y, z);
                    if below[i] && !exterior[i] {
                        exterior[i] = true;
                        stack.push(i);
                    }
                }
            }
        }
    }
    while let Some(i) = stack.pop() {
        let z = i / (nx * ny);
        let r = i % (nx * ny);
        let y = r / nx;
        let x = r % nx;
        let mut push = |j: usize| {
            if below[j] && !exterior[j] {
                exterior[j] = true;
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

    let mut mask: Vec<bool> = below.iter().zip(&exterior).map(|(&b, &e)| b && !e).collect();

    // Per axial slice: drop small 4-connected components, then fill holes.
    let plane = nx * ny;
    mask.par_chunks_mut(plane).for_each(|slice| {
        drop_small_components(slice, nx, ny, cfg.min_slice_area);
        fill_holes(slice, nx, ny);
    });

    if mask.iter().all(|&m| !m) {
        return Err(Error::EmptySegmentation);
    }
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        values: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    })
}

// 4-connected labelling; components below `min_area` are cleared.
fn drop_small_components(slice: &mut [bool], nx: usize, ny: usize, min_area: usize) {
    let mut seen = vec![false; slice.len()];
    let mut member: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..slice.len() {
        if !slice[start] || seen[start] {
            continue;
        }
        member.clear();
        stack.push(start);
        seen[start] = true;
        while let Some(i) = stack.pop() {
            member.push(i);
            let x = i % nx;
            let y = i / nx;
            let mut push = |j: usize| {
                if slice[j] && !seen[j] {
                    seen[j] = true;
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
        }
        if member.len() < min_area {
            for &i in &member {
                slice[i] = false;
            }
        }
    }
    let _ = ny;
}

// Background pixels not 4-connected to the slice border become foreground.
fn fill_holes(slice: &mut [bool], nx: usize, ny: usize) {
    let mut outside = vec![false; slice.len()];
    let mut stack: Vec<usize> = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if x == 0 || y == 0 || x == nx - 1 || y == ny - 1 {
                let i = x + nx * y;
                if !slice[i] && !outside[i] {
                    outside[i] = true;
                    stack.push(i);
                }
            }
        }
    }
    while let Some(i) = stack.pop() {
        let x = i % nx;
        let y = i / nx;
        let mut push = |j: usize| {
            if !slice[j] && !outside[j] {
                outside[j] = true;
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
    }
    for i in 0..slice.len() {
        if !slice[i] && !outside[i] {
            slice[i] = true;
        }
    }
}

// ---------------------------------------------------------------------------
// 2-D Frangi vesselness on tri-orthogonal planes
// ---------------------------------------------------------------------------

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[inline]
fn clamp_i(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn smooth_2d(img: &[f32], w: usize, h: usize, kernel: &[f32]) -> Vec<f32> {
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let sx = clamp_i(x as i64 + ki as i64 - radius, w);
                acc += kw * img[sx + w * y];
            }
            tmp[x + w * y] = acc;
        }
    }
    let mut out = vec![0.0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let sy = clamp_i(y as i64 + ki as i64 - radius, h);
                acc += kw * tmp[x + w * sy];
            }
            out[x + w * y] = acc;
        }
    }
    out
}

/// Multi-scale 2-D Frangi response for bright tubular structures, maximum
/// over scales. Exposed for the test-side oracle comparison.
pub fn frangi_slice(
    img: &[f32],
    w: usize,
    h: usize,
    scales: &[f32],
    blob_sensitivity: f32,
    structure_fraction: f32,
) -> Vec<f32> {
    let mut best = vec![0.0f32; img.len()];
    for &sigma in scales {
        let smooth = smooth_2d(img, w, h, &gaussian_kernel(sigma));
        let at = |x: i64, y: i64| smooth[clamp_i(x, w) + w * clamp_i(y, h)];
        let norm = sigma * sigma; // scale normalization of second derivatives
        let mut hxx = vec![0.0f32; img.len()];
        let mut hyy = vec![0.0f32; img.len()];
        let mut hxy = vec![0.0f32; img.len()];
        let mut max_s = 0.0f32;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = x as usize + w * y as usize;
                hxx[i] = norm * (at(x + 1, y) - 2.0 * at(x, y) + at(x - 1, y));
                hyy[i] = norm * (at(x, y + 1) - 2.0 * at(x, y) + at(x, y - 1));
                hxy[i] = norm
                    * 0.25
                    * (at(x + 1, y + 1) - at(x + 1, y - 1) - at(x - 1, y + 1) + at(x - 1, y - 1));
                let s = (hxx[i] * hxx[i] + hyy[i] * hyy[i] + 2.0 * hxy[i] * hxy[i]).sqrt();
                max_s = max_s.max(s);
            }
        }
        let c = structure_fraction * max_s;
        if c <= 0.0 {
            continue;
        }
        for i in 0..img.len() {
            let tr = hxx[i] + hyy[i];
            let diff = hxx[i] - hyy[i];
            let disc = (diff * diff + 4.0 * hxy[i] * hxy[i]).sqrt();
            let e1 = 0.5 * (tr + disc);
            let e2 = 0.5 * (tr - disc);
            // order by magnitude: |l1| <= |l2|
            let (l1, l2) = if e1.abs() <= e2.abs() { (e1, e2) } else { (e2, e1) };
            if l2 >= 0.0 {
                continue; // bright ridges require the dominant curvature negative
            }
            let rb = l1 / l2;
            let s2 = l1 * l1 + l2 * l2;
            let resp = (-rb * rb / (2.0 * blob_sensitivity * blob_sensitivity)).exp()
                * (1.0 - (-s2 / (2.0 * c * c)).exp());
            if resp > best[i] {
                best[i] = resp;
            }
        }
    }
    best
}

/// Per-slice 2-D Frangi on the three orthogonal plane stacks; voxelwise
/// maximum over the three, min–max normalized to [0, 1].
pub fn tri_orthogonal_vesselness(v: &Volume, cfg: &PreprocessConfig) -> Result<VesselnessMask> {
    cfg.validate()?;
    let [nx, ny, nz] = v.dims;
    let mut acc = vec![0.0f32; v.len()];

    // axis 2: axial slices (x, y)
    let axial: Vec<Vec<f32>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let img: Vec<f32> = (0..nx * ny).map(|i| v.values[i + nx * ny * z]).collect();
            frangi_slice(
                &img,
                nx,
                ny,
                &cfg.frangi_scales,
                cfg.frangi_blob_sensitivity,
                cfg.frangi_structure_sensitivity,
            )
        })
        .collect();
    for z in 0..nz {
        for i in 0..nx * ny {
            let g = i + nx * ny * z;
            acc[g] = acc[g].max(axial[z][i]);
        }
    }

    // axis 1: coronal slices (x, z)
    let coronal: Vec<Vec<f32>> = (0..ny)
        .into_par_iter()
        .map(|y| {
            let img: Vec<f32> = (0..nx * nz)
                .map(|i| {
                    let x = i % nx;
                    let z = i / nx;
                    v.at(x, y, z)
                })
                .collect();
            frangi_slice(
                &img,
                nx,
                nz,
                &cfg.frangi_scales,
                cfg.frangi_blob_sensitivity,
                cfg.frangi_structure_sensitivity,
            )
        })
        .collect();
    for y in 0..ny {
        for z in 0..nz {
            for x in 0..nx {
                let g = x + nx * (y + ny * z);
                acc[g] = acc[g].max(coronal[y][x + nx * z]);
            }
        }
    }

    // axis 0: sagittal slices (y, z)
    let sagittal: Vec<Vec<f32>> = (0..nx)
        .into_par_iter()
        .map(|x| {
            let img: Vec<f32> = (0..ny * nz)
                .map(|i| {
                    let y = i % ny;
                    let z = i / ny;
                    v.at(x, y, z)
                })
                .collect();
            frangi_slice(
                &img,
                ny,
                nz,
                &cfg.frangi_scales,
                cfg.frangi_blob_sensitivity,
                cfg.frangi_structure_sensitivity,
            )
        })
        .collect();
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                let g = x + nx * (y + ny * z);
                acc[g] = acc[g].max(sagittal[x][y + ny * z]);
            }
        }
    }

    let (lo, hi) = {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &x in &acc {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        (lo, hi)
    };
    if hi > lo {
        for x in &mut acc {
            *x = (*x - lo) / (hi - lo);
        }
    } else {
        for x in &mut acc {
            *x = 0.0;
        }
    }
    Ok(VesselnessMask(Volume { dims: v.dims, spacing: v.spacing, values: acc }))
}

// ---------------------------------------------------------------------------
// Vessel enhancement and normalization
// ---------------------------------------------------------------------------

/// Logarithmic vessel enhancement of a single window-clipped intensity.
#[inline]
pub fn enhance_scalar(intensity: f32, vesselness: f32, window: IntensityWindow, offset: f32) -> f32 {
    if intensity <= window.low + offset {
        intensity
    } else {
        // f64 keeps the M = 1 saturation landing exactly on the ceiling
        let i = intensity as f64;
        let gain = ((std::f64::consts::E - 1.0) * vesselness as f64 + 1.0).ln();
        (i + (window.high as f64 - i) * gain) as f32
    }
}

/// Voxelwise enhancement: intensities at or below `low + offset` pass through,
/// the rest are pushed toward the window ceiling proportionally to the
/// vesselness response.
pub fn enhance_vessels(v: &Volume, m: &VesselnessMask, cfg: &PreprocessConfig) -> Result<Volume> {
    v.same_grid(&m.0)?;
    let values = v
        .values
        .iter()
        .zip(&m.0.values)
        .map(|(&i, &vm)| enhance_scalar(cfg.window.clip(i), vm, cfg.window, cfg.enhancement_offset))
        .collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, values })
}

/// Affine map of the window onto [0, 1], clipping out-of-window inputs first.
pub fn normalize(v: &Volume, window: IntensityWindow) -> Volume {
    v.map(|x| (window.clip(x) - window.low) / window.width())
}

/// Everything the registration front end needs from one raw CT volume.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub lung_mask: Volume,
    pub vesselness: Volume,
    /// Enhanced intensities; voxels outside the lung mask sit at the window floor.
    pub enhanced: Volume,
    /// Enhanced volume normalized to [0, 1].
    pub normalized: Volume,
    /// Raw volume clipped and masked the same way, without enhancement.
    pub unenhanced_masked: Volume,
}

/// Full pre-processing chain: segmentation, vesselness, enhancement inside
/// the mask (outside voxels drop to the window floor), normalization.
pub fn preprocess_volume(v: &Volume, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let lung_mask = segment_lungs(v, cfg)?;
    let masked = Volume {
        dims: v.dims,
        spacing: v.spacing,
        values: v
            .values
            .iter()
            .zip(&lung_mask.values)
            .map(|(&x, &m)| if m != 0.0 { cfg.window.clip(x) } else { cfg.window.low })
            .collect(),
    };
    let vesselness = tri_orthogonal_vesselness(&masked, cfg)?;
    let enhanced = enhance_vessels(&masked, &vesselness, cfg)?;
    let normalized = normalize(&enhanced, cfg.window);
    Ok(Preprocessed {
        lung_mask,
        vesselness: vesselness.0,
        enhanced,
        normalized,
        unenhanced_masked: masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win() -> IntensityWindow {
        IntensityWindow::chest_ct()
    }

    #[test]
    fn two_means_symmetric_clusters() {
        let mut values = vec![-900.0f32; 4];
        values.extend(vec![0.0f32; 4]);
        let v = Volume::new([8, 1, 1], [1.0; 3], values).unwrap();
        let t = two_means_threshold(&v, win()).unwrap();
        assert!((t + 450.0).abs() < 1e-3, "threshold {t}");
    }

    // Exhaustive split-point search minimizing within-cluster variance.
    fn brute_force_threshold(values: &[f32], window: IntensityWindow) -> f32 {
        let mut xs: Vec<f64> = values.iter().map(|&x| window.clip(x) as f64).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut best = (f64::INFINITY, 0.0f64);
        for split in 1..xs.len() {
            if xs[split - 1] == xs[split] {
                continue;
            }
            let (a, b) = xs.split_at(split);
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let var = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
                + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if var < best.0 {
                best = (var, (ma + mb) / 2.0);
            }
        }
        best.1 as f32
    }

    #[test]
    fn two_means_vs_brute_force() {
        let mut values = vec![-1000.0f32; 9];
        values.push(700.0);
        let v = Volume::new([10, 1, 1], [1.0; 3], values.clone()).unwrap();
        let t = two_means_threshold(&v, win()).unwrap();
        let oracle = brute_force_threshold(&values, win());
        assert!((t - oracle).abs() < 1e-3, "{t} vs {oracle}");
    }

    #[test]
    fn two_means_constant_errors() {
        let v = Volume::filled([4, 4, 4], [1.0; 3], 0.0);
        assert!(matches!(two_means_threshold(&v, win()), Err(Error::DegenerateClustering)));
    }

    /// Toy chest slice: border air ring, body ring at 0 HU, interior cavity.
    fn toy_chest(cavity_val: f32) -> Volume {
        let nx = 32;
        let ny = 32;
        let nz = 3;
        let mut v = Volume::filled([nx, ny, nz], [1.0; 3], 0.0);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    // exterior air: 2-voxel ring touching the border
                    if x < 2 || y < 2 || x >= nx - 2 || y >= ny - 2 {
                        v.set(x, y, z, -1000.0);
                    }
                    // interior cavity: 20x20 block, disconnected from the border
                    if (6..26).contains(&x) && (6..26).contains(&y) {
                        v.set(x, y, z, cavity_val);
                    }
                }
            }
        }
        v
    }

    // Independent flood-fill oracle: interior sub-threshold region.
    fn oracle_interior(v: &Volume, threshold: f32) -> Vec<bool> {
        let [nx, ny, nz] = v.dims;
        let below: Vec<bool> = v.values.iter().map(|&x| x < threshold).collect();
        let mut outside = vec![false; below.len()];
        // BFS over the 3-D volume from in-plane border voxels
        let mut queue = std::collections::VecDeque::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if (x == 0 || y == 0 || x == nx - 1 || y == ny - 1)
                        && below[x + nx * (y + ny * z)]
                    {
                        outside[x + nx * (y + ny * z)] = true;
                        queue.push_back((x, y, z));
                    }
                }
            }
        }
        while let Some((x, y, z)) = queue.pop_front() {
            let neighbors = [
                (x.wrapping_sub(1), y, z),
                (x + 1, y, z),
                (x, y.wrapping_sub(1), z),
                (x, y + 1, z),
                (x, y, z.wrapping_sub(1)),
                (x, y, z + 1),
            ];
            for (a, b, c) in neighbors {
                if a < nx && b < ny && c < nz {
                    let i = a + nx * (b + ny * c);
                    if below[i] && !outside[i] {
                        outside[i] = true;
                        queue.push_back((a, b, c));
                    }
                }
            }
        }
        below.iter().zip(&outside).map(|(&b, &o)| b && !o).collect()
    }

    #[test]
    fn segment_lungs_keeps_interior_cavity_only() {
        let v = toy_chest(-900.0);
        let cfg = PreprocessConfig { min_slice_area: 10, ..PreprocessConfig::default() };
        let mask = segment_lungs(&v, &cfg).unwrap();
        let threshold = two_means_threshold(&v, win()).unwrap();
        let oracle = oracle_interior(&v, threshold);
        for i in 0..mask.len() {
            assert_eq!(mask.values[i] != 0.0, oracle[i], "voxel {i}");
        }
        assert!(mask.values.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn segment_lungs_shift_invariance_of_dark_cluster() {
        let base = segment_lungs(
            &toy_chest(-900.0),
            &PreprocessConfig { min_slice_area: 10, ..PreprocessConfig::default() },
        )
        .unwrap();
        for delta in [-10.0, 10.0] {
            let shifted = segment_lungs(
                &toy_chest(-900.0 + delta),
                &PreprocessConfig { min_slice_area: 10, ..PreprocessConfig::default() },
            )
            .unwrap();
            assert_eq!(base.values, shifted.values, "delta {delta}");
        }
    }

    #[test]
    fn segment_lungs_drops_small_blob() {
        // 20x20 cavity (400 voxels per slice) survives the default 300-voxel
        // rule; a 10-voxel blob on one slice does not.
        let mut v = toy_chest(-900.0);
        for k in 0..10 {
            v.set(28 + k % 2, 4 + k / 2, 1, -900.0);
        }
        let mask = segment_lungs(&v, &PreprocessConfig::default()).unwrap();
        for k in 0..10 {
            assert_eq!(mask.at(28 + k % 2, 4 + k / 2, 1), 0.0);
        }
        assert!(mask.at(16, 16, 1) != 0.0);
    }

    #[test]
    fn segment_lungs_all_body_is_empty() {
        let v = Volume::filled([16, 16, 4], [1.0; 3], 0.0);
        assert!(matches!(
            segment_lungs(&v, &PreprocessConfig::default()),
            Err(Error::EmptySegmentation)
        ));
    }

    #[test]
    fn vesselness_constant_volume_is_zero() {
        let v = Volume::filled([16, 16, 8], [1.0; 3], 100.0);
        let m = tri_orthogonal_vesselness(&v, &PreprocessConfig::default()).unwrap();
        assert!(m.0.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn enhance_branches() {
        let cfg = PreprocessConfig::default();
        // first branch: at or below B[0]+D
        assert_eq!(enhance_scalar(-900.0, 0.7, cfg.window, cfg.enhancement_offset), -900.0);
        // zero mask: ln 1 = 0
        assert_eq!(enhance_scalar(-500.0, 0.0, cfg.window, cfg.enhancement_offset), -500.0);
        // saturation: ln e = 1 pushes to the ceiling
        let e = enhance_scalar(-500.0, 1.0, cfg.window, cfg.enhancement_offset);
        assert!((e - 700.0).abs() < 1e-3, "{e}");
        // mid response, independent scalar evaluation
        let e = enhance_scalar(-500.0, 0.5, cfg.window, cfg.enhancement_offset);
        let expect = -500.0 + 1200.0 * (0.5f32 * (std::f32::consts::E - 1.0) + 1.0).ln();
        assert!((e - expect).abs() < 1e-3);
        assert!((e - 244.137).abs() < 0.01, "{e}");
    }

    #[test]
    fn enhance_monotone_in_mask_and_bounded() {
        let cfg = PreprocessConfig::default();
        for ip in [-700.0f32, -300.0, 0.0, 400.0, 699.0] {
            let mut prev = f32::NEG_INFINITY;
            for k in 0..=20 {
                let m = k as f32 / 20.0;
                let e = enhance_scalar(ip, m, cfg.window, cfg.enhancement_offset);
                assert!(e >= prev);
                assert!(e <= cfg.window.high + 1e-3);
                prev = e;
            }
        }
    }

    #[test]
    fn normalize_endpoints_and_clip() {
        let v = Volume::new([4, 1, 1], [1.0; 3], vec![-1000.0, 700.0, -150.0, 900.0]).unwrap();
        let n = normalize(&v, win());
        assert_eq!(n.values[0], 0.0);
        assert_eq!(n.values[1], 1.0);
        assert!((n.values[2] - 0.5).abs() < 1e-6);
        assert_eq!(n.values[3], 1.0);
    }
}
