//! Coarse-to-fine registration cascade: dual-stream pyramid, per-level flow
//! prediction (variational or network backend), inter-layer flow composition
//! and velocity-field integration, top-down to the final displacement field.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aru::{self, AruConfig, WeightBundle};
use crate::diffeo::{integrate_svf, t_schedule};
use crate::error::{Error, Result};
use crate::field::{compose, dilate_flow, gradient_penalty, warp, DisplacementField};
use crate::vol::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part1Mode {
    /// Voxelwise sum of upsampled aggregate and current flow.
    SimpleAdd,
    /// Resample the aggregate through the current flow, then connect.
    ResampleCompose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Variational,
    Aru,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    /// Maximum feature level (levels 0..=n).
    pub n: u32,
    /// Smoothness weight of the loss.
    pub lambda: f64,
    /// Squaring count at level 0.
    pub t0: u32,
    pub part1_mode: Part1Mode,
    pub part2: bool,
    pub backend: Backend,
    /// Variational backend: base descent step budget; `register` scales it
    /// up per level.
    pub variational_steps: u32,
    /// Variational backend: initial step length in voxels.
    pub variational_step_size: f64,
    /// Gaussian width for preconditioning the descent direction; 0 disables.
    pub gradient_sigma: f32,
    /// Weight of the field-Laplacian term in the update direction; resolves
    /// intensity level-set ambiguity on low-texture inputs. 0 disables.
    pub diffusion_pull: f32,
    /// Half-width of the local-correlation window (radius 2 = 5^3 window).
    pub ncc_window_radius: usize,
    /// Levels with any dimension below this fall back to global correlation.
    pub global_ncc_below: usize,
    pub aru: AruConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            n: 4,
            lambda: 0.5,
            t0: 7,
            part1_mode: Part1Mode::ResampleCompose,
            part2: true,
            backend: Backend::Variational,
            variational_steps: 60,
            variational_step_size: 0.5,
            gradient_sigma: 6.0,
            diffusion_pull: 0.0,
            ncc_window_radius: 2,
            global_ncc_below: 16,
            aru: AruConfig::default(),
        }
    }
}

impl CascadeConfig {
    /// Ablation presets: v1 = add only, v2 = compose only, v3 = add with
    /// integration, v4 = compose with integration.
    pub fn variant(mut self, v: u8) -> Result<Self> {
        let (mode, part2) = match v {
            1 => (Part1Mode::SimpleAdd, false),
            2 => (Part1Mode::ResampleCompose, false),
            3 => (Part1Mode::SimpleAdd, true),
            4 => (Part1Mode::ResampleCompose, true),
            other => return Err(Error::InvalidConfig(format!("unknown variant v{other}"))),
        };
        self.part1_mode = mode;
        self.part2 = part2;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidConfig("n must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.t0 < 1 {
            return Err(Error::InvalidConfig("t0 must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pyramid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub fixed: Volume,
    pub moving: Volume,
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    /// Level 0 first (finest); dims strictly decrease per level.
    pub levels: Vec<PyramidLevel>,
    pub backend: Backend,
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian smoothing with replicate borders.
pub fn gaussian_smooth(v: &Volume, sigma: f32) -> Volume {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let [nx, ny, nz] = v.dims;
    let mut cur = v.values.clone();
    for axis in 0..3 {
        let n = [nx, ny, nz][axis];
        let stride = match axis {
            0 => 1,
            1 => nx,
            _ => nx * ny,
        };
        let mut next = vec![0.0f32; cur.len()];
        let lines = cur.len() / n;
        for line in 0..lines {
            let base = match axis {
                0 => line * nx,
                1 => {
                    let z = line / nx;
                    let x = line % nx;
                    x + nx * ny * z
                }
                _ => line,
            };
            for i in 0..n {
                let mut acc = 0.0f32;
                for (ki, &kw) in kernel.iter().enumerate() {
                    let c = (i as i64 + ki as i64 - r).clamp(0, n as i64 - 1);
                    acc += kw * cur[base + c as usize * stride];
                }
                next[base + i * stride] = acc;
            }
        }
        cur = next;
    }
    Volume { dims: v.dims, spacing: v.spacing, values: cur }
}

/// Keep every second voxel per axis (ceil-halved dims).
pub fn decimate2(v: &Volume) -> Volume {
    let od = [v.dims[0].div_ceil(2), v.dims[1].div_ceil(2), v.dims[2].div_ceil(2)];
    let mut out = Volume::filled(od, v.spacing.map(|s| s * 2.0), 0.0);
    for z in 0..od[2] {
        for y in 0..od[1] {
            for x in 0..od[0] {
                out.set(x, y, z, v.at(x * 2, y * 2, z * 2));
            }
        }
    }
    out
}

/// Trilinear resize with endpoint-aligned coordinates.
pub fn resize_trilinear(v: &Volume, target: [usize; 3]) -> Volume {
    let scale = [0, 1, 2].map(|a| {
        if target[a] > 1 {
            (v.dims[a] as f32 - 1.0) / (target[a] as f32 - 1.0)
        } else {
            0.0
        }
    });
    let mut out = Volume::filled(target, v.spacing, 0.0);
    for z in 0..target[2] {
        for y in 0..target[1] {
            for x in 0..target[0] {
                let s = v.sample(x as f32 * scale[0], y as f32 * scale[1], z as f32 * scale[2]);
                out.set(x, y, z, s);
            }
        }
    }
    out
}

/// Build both feature streams. The variational backend uses Gaussian
/// smooth-then-decimate; the network backend runs three shared convolutions
/// per level with the first at stride 2.
pub fn build_pyramid(
    fixed: &Volume,
    moving: &Volume,
    cfg: &CascadeConfig,
    weights: Option<&WeightBundle>,
) -> Result<Pyramid> {
    cfg.validate()?;
    fixed.same_grid(moving)?;
    let mut d = fixed.dims;
    for _ in 0..cfg.n {
        d = [d[0].div_ceil(2), d[1].div_ceil(2), d[2].div_ceil(2)];
    }
    if d.iter().any(|&x| x < 4) {
        return Err(Error::InvalidConfig(format!(
            "dims {:?} cannot support {} pyramid levels (coarsest {:?})",
            fixed.dims, cfg.n, d
        )));
    }

    let mut levels = vec![PyramidLevel { fixed: fixed.clone(), moving: moving.clone() }];
    match cfg.backend {
        Backend::Variational => {
            for _ in 0..cfg.n {
                let prev = levels.last().unwrap();
                levels.push(PyramidLevel {
                    fixed: decimate2(&gaussian_smooth(&prev.fixed, 1.0)),
                    moving: decimate2(&gaussian_smooth(&prev.moving, 1.0)),
                });
            }
        }
        Backend::Aru => {
            let w = weights.ok_or_else(|| {
                Error::InvalidConfig("network backend requires a weight bundle".into())
            })?;
            for level in 0..cfg.n {
                let prev = levels.last().unwrap();
                levels.push(PyramidLevel {
                    fixed: extract_features(&prev.fixed, level, &cfg.aru, w)?,
                    moving: extract_features(&prev.moving, level, &cfg.aru, w)?,
                });
            }
        }
    }
    Ok(Pyramid { levels, backend: cfg.backend })
}

/// Three convolutions (first at stride 2) shared by both streams.
fn extract_features(
    v: &Volume,
    level: u32,
    cfg: &AruConfig,
    weights: &WeightBundle,
) -> Result<Volume> {
    let ec = cfg.extractor_channels;
    let fm = aru::FeatureMap::from_volumes(&[v])?;
    let get = |name: &str, shape: &[usize]| weights.get(name, shape).map(|s| s.to_vec());
    let w1 = get(&format!("feat{level}_conv1"), &[ec, 1, 3, 3, 3])?;
    let b1 = get(&format!("feat{level}_conv1_bias"), &[ec])?;
    let x = aru::conv3d(&fm, &w1, &b1, ec, 3, 2, Some(cfg.leaky_slope));
    let w2 = get(&format!("feat{level}_conv2"), &[ec, ec, 3, 3, 3])?;
    let b2 = get(&format!("feat{level}_conv2_bias"), &[ec])?;
    let x = aru::conv3d(&x, &w2, &b2, ec, 3, 1, Some(cfg.leaky_slope));
    let w3 = get(&format!("feat{level}_conv3"), &[1, ec, 3, 3, 3])?;
    let b3 = get(&format!("feat{level}_conv3_bias"), &[1])?;
    let x = aru::conv3d(&x, &w3, &b3, 1, 3, 1, None);
    Volume::new(x.dims, v.spacing.map(|s| s * 2.0), x.channel(0).to_vec())
}

/// Random weight bundle covering the extractor and the per-level networks a
/// cascade of this geometry needs.
pub fn random_cascade_weights(dims: [usize; 3], cfg: &CascadeConfig, seed: u64) -> WeightBundle {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = WeightBundle::default();
    let ec = cfg.aru.extractor_channels;
    for level in 0..cfg.n {
        for (name, out_ch, in_ch) in [
            (format!("feat{level}_conv1"), ec, 1),
            (format!("feat{level}_conv2"), ec, ec),
            (format!("feat{level}_conv3"), 1, ec),
        ] {
            let n = out_ch * in_ch * 27;
            let scale = (2.0 / (in_ch * 27) as f32).sqrt();
            bundle.insert(
                &name,
                vec![out_ch, in_ch, 3, 3, 3],
                (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
            );
            bundle.insert(&format!("{name}_bias"), vec![out_ch], vec![0.0; out_ch]);
        }
    }
    // per-level prediction networks, keyed by grade
    for (level, grade) in level_grades(dims, cfg).iter().enumerate() {
        let arch = aru::AruArchitecture::new(*grade, cfg.aru.clone(), 3).unwrap();
        let sub = WeightBundle::random_for(&arch, seed ^ (level as u64) << 8);
        for (name, (shape, data)) in sub.tensors {
            bundle.tensors.insert(format!("level{level}_{name}"), (shape, data));
        }
    }
    bundle
}

/// Per-level grades from the depth-axis length at each level.
pub fn level_grades(dims: [usize; 3], cfg: &CascadeConfig) -> Vec<u8> {
    let mut depths = Vec::new();
    let mut d = dims;
    for _ in 0..=cfg.n {
        depths.push(d[2]);
        d = [d[0].div_ceil(2), d[1].div_ceil(2), d[2].div_ceil(2)];
    }
    aru::compute_grades(&depths)
}

// ---------------------------------------------------------------------------
// Variational objective
// ---------------------------------------------------------------------------

// Box sum along all three axes with truncated windows, f64 output.
fn box_sum(values: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut cur = values.to_vec();
    for axis in 0..3 {
        let n = [nx, ny, nz][axis];
        let stride = match axis {
            0 => 1,
            1 => nx,
            _ => nx * ny,
        };
        let lines = cur.len() / n;
        let mut next = vec![0.0f64; cur.len()];
        let mut prefix = vec![0.0f64; n + 1];
        for line in 0..lines {
            // base index of this line
            let base = match axis {
                0 => line * nx,
                1 => {
                    let z = line / nx;
                    let x = line % nx;
                    x + nx * ny * z
                }
                _ => line,
            };
            // prefix sums along the line
            for i in 0..n {
                prefix[i + 1] = prefix[i] + cur[base + i * stride];
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(n - 1);
                next[base + i * stride] = prefix[hi + 1] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

fn use_global(dims: [usize; 3], cfg: &CascadeConfig) -> bool {
    dims.iter().any(|&d| d < cfg.global_ncc_below)
}

// Guard against near-zero variance windows; also keeps the gradient exactly
// zero at the similarity maximum.
const VAR_GUARD: f64 = 1e-9;

/// Similarity between fixed and an already-warped image: mean windowed
/// squared correlation, or plain global correlation on small grids.
pub fn similarity(fixed: &Volume, warped: &Volume, cfg: &CascadeConfig) -> f64 {
    if use_global(fixed.dims, cfg) {
        return global_ncc_or_zero(fixed, warped);
    }
    let stats = FixedWindowStats::new(fixed, cfg.ncc_window_radius);
    similarity_with_stats(&stats, warped)
}

// Window sums that depend only on the fixed image; the optimizer evaluates
// the objective hundreds of times per level against the same fixed image,
// so these are computed once and reused.
struct FixedWindowStats {
    dims: [usize; 3],
    r: usize,
    f: Vec<f64>,
    win: Vec<f64>,
    sf: Vec<f64>,
    sff: Vec<f64>,
}

impl FixedWindowStats {
    fn new(fixed: &Volume, r: usize) -> Self {
        let n = fixed.len();
        let dims = fixed.dims;
        let f: Vec<f64> = fixed.values.iter().map(|&x| x as f64).collect();
        let ones = vec![1.0f64; n];
        let win = box_sum(&ones, dims, r);
        let sf = box_sum(&f, dims, r);
        let sff = box_sum(&f.iter().map(|x| x * x).collect::<Vec<_>>(), dims, r);
        FixedWindowStats { dims, r, f, win, sf, sff }
    }
}

fn similarity_with_stats(stats: &FixedWindowStats, warped: &Volume) -> f64 {
    let n = warped.len();
    let dims = stats.dims;
    let r = stats.r;
    let (f, win, sf, sff) = (&stats.f, &stats.win, &stats.sf, &stats.sff);
    let w: Vec<f64> = warped.values.iter().map(|&x| x as f64).collect();
    let sw = box_sum(&w, dims, r);
    let sww = box_sum(&w.iter().map(|x| x * x).collect::<Vec<_>>(), dims, r);
    let sfw = box_sum(&f.iter().zip(&w).map(|(a, b)| a * b).collect::<Vec<_>>(), dims, r);
    let mut acc = 0.0f64;
    for i in 0..n {
        let cross = sfw[i] - sf[i] * sw[i] / win[i];
        let var_f = sff[i] - sf[i] * sf[i] / win[i];
        let var_w = sww[i] - sw[i] * sw[i] / win[i];
        let denom = var_f * var_w;
        if denom > VAR_GUARD {
            acc += cross * cross / denom;
        }
    }
    acc / n as f64
}

fn global_ncc_or_zero(fixed: &Volume, warped: &Volume) -> f64 {
    crate::metrics::ncc(fixed, warped).unwrap_or(0.0)
}

// d(similarity)/d(warped voxel), same layout as the image.
fn similarity_gradient_wrt_warped(fixed: &Volume, warped: &Volume, cfg: &CascadeConfig) -> Vec<f64> {
    let n = fixed.len();
    let dims = fixed.dims;
    if use_global(fixed.dims, cfg) {
        let nf = n as f64;
        let mf = fixed.mean();
        let mw = warped.mean();
        let mut cross = 0.0;
        let mut vf = 0.0;
        let mut vw = 0.0;
        for i in 0..n {
            let df = fixed.values[i] as f64 - mf;
            let dw = warped.values[i] as f64 - mw;
            cross += df * dw;
            vf += df * df;
            vw += dw * dw;
        }
        if vf / nf < VAR_GUARD || vw / nf < VAR_GUARD {
            return vec![0.0; n];
        }
        let denom = (vf * vw).sqrt();
        return (0..n)
            .map(|i| {
                let df = fixed.values[i] as f64 - mf;
                let dw = warped.values[i] as f64 - mw;
                (df - cross / vw * dw) / denom
            })
            .collect();
    }

    let r = cfg.ncc_window_radius;
    let f: Vec<f64> = fixed.values.iter().map(|&x| x as f64).collect();
    let w: Vec<f64> = warped.values.iter().map(|&x| x as f64).collect();
    let ones = vec![1.0f64; n];
    let win = box_sum(&ones, dims, r);
    let sf = box_sum(&f, dims, r);
    let sw = box_sum(&w, dims, r);
    let sff = box_sum(&f.iter().map(|x| x * x).collect::<Vec<_>>(), dims, r);
    let sww = box_sum(&w.iter().map(|x| x * x).collect::<Vec<_>>(), dims, r);
    let sfw = box_sum(&f.iter().zip(&w).map(|(a, b)| a * b).collect::<Vec<_>>(), dims, r);

    // per-window coefficients of the chain rule
    let mut c1 = vec![0.0f64; n]; // 2*cross/denom
    let mut c2 = vec![0.0f64; n]; // 2*cross^2*var_f/denom^2
    let mut c1_mu_f = vec![0.0f64; n];
    let mut c2_mu_w = vec![0.0f64; n];
    for i in 0..n {
        let cross = sfw[i] - sf[i] * sw[i] / win[i];
        let var_f = sff[i] - sf[i] * sf[i] / win[i];
        let var_w = sww[i] - sw[i] * sw[i] / win[i];
        let denom = var_f * var_w;
        if denom > VAR_GUARD {
            let a = 2.0 * cross / denom;
            let b = 2.0 * cross * cross * var_f / (denom * denom);
            c1[i] = a;
            c2[i] = b;
            c1_mu_f[i] = a * sf[i] / win[i];
            c2_mu_w[i] = b * sw[i] / win[i];
        }
    }
    let bc1 = box_sum(&c1, dims, r);
    let bc2 = box_sum(&c2, dims, r);
    let bc1mf = box_sum(&c1_mu_f, dims, r);
    let bc2mw = box_sum(&c2_mu_w, dims, r);
    (0..n)
        .map(|q| (f[q] * bc1[q] - bc1mf[q] - w[q] * bc2[q] + bc2mw[q]) / n as f64)
        .collect()
}

// Trilinear sample plus its spatial gradient; gradient components are zero
// in clamped directions, matching the discrete objective exactly.
fn sample_with_gradient(v: &Volume, x: f32, y: f32, z: f32) -> (f32, [f32; 3]) {
    let [nx, ny, nz] = v.dims;
    let inside = [
        x > 0.0 && x < (nx - 1) as f32,
        y > 0.0 && y < (ny - 1) as f32,
        z > 0.0 && z < (nz - 1) as f32,
    ];
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
    let at = |x: usize, y: usize, z: usize| v.values[x + nx * (y + ny * z)];

    let v000 = at(x0, y0, z0);
    let v100 = at(x1, y0, z0);
    let v010 = at(x0, y1, z0);
    let v110 = at(x1, y1, z0);
    let v001 = at(x0, y0, z1);
    let v101 = at(x1, y0, z1);
    let v011 = at(x0, y1, z1);
    let v111 = at(x1, y1, z1);

    let c00 = v000 * (1.0 - fx) + v100 * fx;
    let c10 = v010 * (1.0 - fx) + v110 * fx;
    let c01 = v001 * (1.0 - fx) + v101 * fx;
    let c11 = v011 * (1.0 - fx) + v111 * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    let value = c0 * (1.0 - fz) + c1 * fz;

    let gx = {
        let d00 = v100 - v000;
        let d10 = v110 - v010;
        let d01 = v101 - v001;
        let d11 = v111 - v011;
        let d0 = d00 * (1.0 - fy) + d10 * fy;
        let d1 = d01 * (1.0 - fy) + d11 * fy;
        d0 * (1.0 - fz) + d1 * fz
    };
    let gy = {
        let d0 = c10 - c00;
        let d1 = c11 - c01;
        d0 * (1.0 - fz) + d1 * fz
    };
    let gz = c1 - c0;

    (
        value,
        [
            if inside[0] { gx } else { 0.0 },
            if inside[1] { gy } else { 0.0 },
            if inside[2] { gz } else { 0.0 },
        ],
    )
}

/// The per-level objective: negative similarity of fixed vs. flow-warped
/// moving, plus `lambda` times the forward-difference smoothness penalty.
pub fn variational_loss(
    fixed: &Volume,
    moving: &Volume,
    flow: &DisplacementField,
    cfg: &CascadeConfig,
) -> Result<f64> {
    fixed.same_grid(moving)?;
    if fixed.dims != flow.dims {
        return Err(Error::DimMismatch(fixed.dims, flow.dims));
    }
    let warped = warp(moving, flow)?;
    let l = -similarity(fixed, &warped, cfg) + cfg.lambda * gradient_penalty(flow);
    if !l.is_finite() {
        return Err(Error::Divergence("variational objective".into()));
    }
    Ok(l)
}

// Same objective as `variational_loss` with the fixed-image window sums
// precomputed; `stats` is `None` on grids small enough for global NCC.
fn loss_with_stats(
    stats: Option<&FixedWindowStats>,
    fixed: &Volume,
    moving: &Volume,
    flow: &DisplacementField,
    cfg: &CascadeConfig,
) -> Result<f64> {
    let warped = warp(moving, flow)?;
    let sim = match stats {
        Some(s) => similarity_with_stats(s, &warped),
        None => global_ncc_or_zero(fixed, &warped),
    };
    let l = -sim + cfg.lambda * gradient_penalty(flow);
    if !l.is_finite() {
        return Err(Error::Divergence("variational objective".into()));
    }
    Ok(l)
}

/// Analytic gradient of [`variational_loss`] with respect to the flow.
pub fn variational_gradient(
    fixed: &Volume,
    moving: &Volume,
    flow: &DisplacementField,
    cfg: &CascadeConfig,
) -> Result<DisplacementField> {
    fixed.same_grid(moving)?;
    if fixed.dims != flow.dims {
        return Err(Error::DimMismatch(fixed.dims, flow.dims));
    }
    let warped = warp(moving, flow)?;
    let dsim_dw = similarity_gradient_wrt_warped(fixed, &warped, cfg);
    let [nx, ny, nz] = flow.dims;
    let n = flow.len();

    let mut grad = DisplacementField::zeros(flow.dims);
    // similarity term, chained through the trilinear sampler
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let [dx, dy, dz] = flow.vector_at(i);
                let (_, g) =
                    sample_with_gradient(moving, x as f32 + dx, y as f32 + dy, z as f32 + dz);
                let coeff = -dsim_dw[i]; // loss carries -similarity
                grad.comp[0][i] = (coeff * g[0] as f64) as f32;
                grad.comp[1][i] = (coeff * g[1] as f64) as f32;
                grad.comp[2][i] = (coeff * g[2] as f64) as f32;
            }
        }
    }
    // smoothness term: d/du of the mean summed squared forward differences
    let lam = cfg.lambda;
    for c in 0..3 {
        let u = &flow.comp[c];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let mut acc = 0.0f64;
                    let v = u[i] as f64;
                    if x + 1 < nx {
                        acc -= 2.0 * (u[i + 1] as f64 - v);
                    }
                    if x > 0 {
                        acc += 2.0 * (v - u[i - 1] as f64);
                    }
                    if y + 1 < ny {
                        acc -= 2.0 * (u[i + nx] as f64 - v);
                    }
                    if y > 0 {
                        acc += 2.0 * (v - u[i - nx] as f64);
                    }
                    if z + 1 < nz {
                        acc -= 2.0 * (u[i + nx * ny] as f64 - v);
                    }
                    if z > 0 {
                        acc += 2.0 * (v - u[i - nx * ny] as f64);
                    }
                    grad.comp[c][i] += (lam * acc / n as f64) as f32;
                }
            }
        }
    }
    Ok(grad)
}

// Gauss-Newton update direction: r * grad / (|grad|^2 + alpha * r^2) with
// r the intensity residual at the warped position. Bounded per voxel by
// 1/(2*sqrt(alpha)); exactly zero wherever the residual is zero.
fn gauss_newton_direction(
    fixed: &Volume,
    fixed_grad: &DisplacementField,
    moving: &Volume,
    flow: &DisplacementField,
    alpha: f32,
) -> DisplacementField {
    let [nx, ny, _] = flow.dims;
    let mut dir = DisplacementField::zeros(flow.dims);
    let slab = nx * ny;
    let (dx_all, rest) = dir.comp.split_at_mut(1);
    let (dy_all, dz_all) = rest.split_at_mut(1);
    dx_all[0]
        .par_chunks_mut(slab)
        .zip(dy_all[0].par_chunks_mut(slab))
        .zip(dz_all[0].par_chunks_mut(slab))
        .enumerate()
        .for_each(|(z, ((dx, dy), dz))| {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * y;
                    let gi = i + z * slab;
                    let [ux, uy, uz] = flow.vector_at(gi);
                    let (w, gm) = sample_with_gradient(
                        moving,
                        x as f32 + ux,
                        y as f32 + uy,
                        z as f32 + uz,
                    );
                    // symmetric gradient: average of the fixed image's and
                    // the warped moving image's local slopes
                    let gf = fixed_grad.vector_at(gi);
                    let g = [
                        0.5 * (gf[0] + gm[0]),
                        0.5 * (gf[1] + gm[1]),
                        0.5 * (gf[2] + gm[2]),
                    ];
                    let r = fixed.values[gi] - w;
                    let denom = g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + alpha * r * r;
                    if denom > 1e-12 {
                        let s = r / denom;
                        dx[i] = s * g[0];
                        dy[i] = s * g[1];
                        dz[i] = s * g[2];
                    }
                }
            }
        });
    dir
}

// Componentwise 6-neighbour Laplacian of a field (missing neighbours skipped).
// Used as a diffusion pull in the update direction: the similarity term alone
// lets voxels slide along intensity level sets, and the pull resolves that
// ambiguity toward the smoothest field.
fn laplacian_pull(flow: &DisplacementField) -> DisplacementField {
    let [nx, ny, nz] = flow.dims;
    let mut out = DisplacementField::zeros(flow.dims);
    for c in 0..3 {
        let u = &flow.comp[c];
        let o = &mut out.comp[c];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let v = u[i];
                    let mut acc = 0.0f32;
                    if x + 1 < nx {
                        acc += u[i + 1] - v;
                    }
                    if x > 0 {
                        acc += u[i - 1] - v;
                    }
                    if y + 1 < ny {
                        acc += u[i + nx] - v;
                    }
                    if y > 0 {
                        acc += u[i - nx] - v;
                    }
                    if z + 1 < nz {
                        acc += u[i + nx * ny] - v;
                    }
                    if z > 0 {
                        acc += u[i - nx * ny] - v;
                    }
                    o[i] = acc;
                }
            }
        }
    }
    out
}

// Central-difference spatial gradient of an image, one component per axis.
fn central_gradient(v: &Volume) -> DisplacementField {
    let [nx, ny, nz] = v.dims;
    let mut g = DisplacementField::zeros(v.dims);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                g.comp[0][i] =
                    0.5 * (v.at((x + 1).min(nx - 1), y, z) - v.at(x.saturating_sub(1), y, z));
                g.comp[1][i] =
                    0.5 * (v.at(x, (y + 1).min(ny - 1), z) - v.at(x, y.saturating_sub(1), z));
                g.comp[2][i] =
                    0.5 * (v.at(x, y, (z + 1).min(nz - 1)) - v.at(x, y, z.saturating_sub(1)));
            }
        }
    }
    g
}

/// Iterative minimization of the per-level objective: Gauss-Newton update
/// directions, fluid-style Gaussian smoothing, and a line search on the true
/// loss, so the loss trace is non-increasing by construction.
pub fn predict_flow_variational(
    fixed: &Volume,
    moving: &Volume,
    cfg: &CascadeConfig,
) -> Result<(DisplacementField, Vec<f64>)> {
    let mut flow = DisplacementField::zeros(fixed.dims);
    let stats = (!use_global(fixed.dims, cfg))
        .then(|| FixedWindowStats::new(fixed, cfg.ncc_window_radius));
    let mut current = loss_with_stats(stats.as_ref(), fixed, moving, &flow, cfg)?;
    let mut trace = vec![current];
    // caps the raw per-voxel update at half a voxel
    let alpha = 1.0;
    let fixed_grad = central_gradient(fixed);
    let step0 = cfg.variational_step_size * 2.0;
    let mut step = step0;
    let mut sigma_scale = 1.0f32;

    'outer: for it in 0..cfg.variational_steps {
        let mut dir = gauss_newton_direction(fixed, &fixed_grad, moving, &flow, alpha);
        if cfg.diffusion_pull > 0.0 {
            let pull = laplacian_pull(&flow).scaled(cfg.diffusion_pull);
            dir = dir.add(&pull)?;
        }
        if cfg.gradient_sigma * sigma_scale > 0.05 {
            // fluid-style preconditioning: smoothing the update suppresses
            // voxel noise; the width anneals so early iterations make broad
            // corrections and late ones polish detail
            let frac = it as f32 / cfg.variational_steps.max(1) as f32;
            let sigma = (cfg.gradient_sigma * (1.0 - frac)).max(0.5) * sigma_scale;
            for c in 0..3 {
                let v = Volume {
                    dims: dir.dims,
                    spacing: [1.0; 3],
                    values: std::mem::take(&mut dir.comp[c]),
                };
                dir.comp[c] = gaussian_smooth(&v, sigma).values;
            }
        }
        let dmax = dir
            .comp
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f32, |m, &v| m.max(v.abs())) as f64;
        if dmax < 1e-14 {
            break;
        }
        // each search restarts near twice the last accepted length, so one
        // cautious step does not throttle the rest of the level
        let mut trial = (step * 2.0).min(step0);
        loop {
            let cand = flow.add(&dir.scaled(trial as f32))?;
            let cand_loss = loss_with_stats(stats.as_ref(), fixed, moving, &cand, cfg)?;
            if cand_loss < current {
                flow = cand;
                current = cand_loss;
                trace.push(current);
                step = trial;
                break;
            }
            trial *= 0.5;
            if trial < 1e-3 {
                // the smoothed update no longer descends; late in the level
                // narrow the smoothing and keep polishing, otherwise give up
                // (shrinking early lets coarse levels chase resampling noise)
                if sigma_scale < 0.1 || it * 2 < cfg.variational_steps {
                    break 'outer;
                }
                sigma_scale *= 0.5;
                step = step0;
                continue 'outer;
            }
        }
    }
    Ok((flow, trace))
}

// ---------------------------------------------------------------------------
// IDM and the cascade recursion
// ---------------------------------------------------------------------------

/// Inter-layer differential step. Part 1 merges the upsampled aggregate with
/// the current flow (by resample-compose or plain addition); Part 2 treats
/// the merged field as a stationary velocity and integrates it with `t`
/// squarings.
pub fn idm(
    aggregate_up: Option<&DisplacementField>,
    flow: &DisplacementField,
    t: u32,
    cfg: &CascadeConfig,
) -> Result<DisplacementField> {
    let part1 = match aggregate_up {
        None => flow.clone(),
        Some(up) => match cfg.part1_mode {
            Part1Mode::SimpleAdd => up.add(flow)?,
            Part1Mode::ResampleCompose => compose(up, flow)?,
        },
    };
    if cfg.part2 {
        Ok(integrate_svf(&part1, t)?.v0)
    } else {
        Ok(part1)
    }
}

// Cascade-internal variant of the IDM step: the merged displacement-scale
// field is divided by 2^t before integration, so that after t squarings the
// field reproduces the merged displacement for constant fields while gaining
// the diffeomorphic regularity of the flow integration.
fn idm_step(
    aggregate_up: Option<&DisplacementField>,
    flow: &DisplacementField,
    t: u32,
    cfg: &CascadeConfig,
) -> Result<DisplacementField> {
    let part1 = match aggregate_up {
        None => flow.clone(),
        Some(up) => match cfg.part1_mode {
            Part1Mode::SimpleAdd => up.add(flow)?,
            Part1Mode::ResampleCompose => compose(up, flow)?,
        },
    };
    if cfg.part2 {
        // Integrating p/2^t directly as a velocity returns exp(p), which at
        // several-voxel amplitudes drifts from the field the backend fitted
        // by the advection term. Velocitizing through t compositional square
        // roots inverts the squarings, so the integration reproduces the
        // merged field to fixed-point tolerance while still passing the
        // aggregate through the flow integration.
        let mut velocity = part1;
        for _ in 0..t {
            velocity = compositional_sqrt(&velocity)?;
        }
        Ok(integrate_svf(&velocity, t)?.v0)
    } else {
        Ok(part1)
    }
}

// Fixed-point solve of s ∘ s = p (s(x) + s(x + s(x)) = p(x)).
fn compositional_sqrt(p: &DisplacementField) -> Result<DisplacementField> {
    let mut s = p.scaled(0.5);
    for _ in 0..8 {
        let err = p.add(&compose(&s, &s)?.scaled(-1.0))?;
        s = s.add(&err.scaled(0.5))?;
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Final displacement field on the level-0 grid.
    pub df: DisplacementField,
    /// `warp(moving, df)`.
    pub warped: Volume,
    /// Per-level predicted flows, level 0 first.
    pub level_flows: Vec<DisplacementField>,
    /// Per-level aggregate flows after the IDM step, level 0 first.
    pub level_aggregates: Vec<DisplacementField>,
    /// Per-level optimizer loss traces (empty for the network backend).
    pub loss_traces: Vec<Vec<f64>>,
    /// Final value of the level-0 loss.
    pub final_loss: f64,
}

/// Full top-down registration: predict a flow per level, merge it into the
/// aggregate through the IDM, dilate, and repeat down to level 0.
pub fn register(
    fixed: &Volume,
    moving: &Volume,
    cfg: &CascadeConfig,
    weights: Option<&WeightBundle>,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let pyramid = build_pyramid(fixed, moving, cfg, weights)?;
    let n = cfg.n as usize;
    let grades = level_grades(fixed.dims, cfg);

    let mut flows: Vec<Option<DisplacementField>> = vec![None; n + 1];
    let mut aggregates: Vec<Option<DisplacementField>> = vec![None; n + 1];
    let mut traces: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut aggregate: Option<DisplacementField> = None;

    for level in (0..=n).rev() {
        let lv = &pyramid.levels[level];
        let dims = lv.fixed.dims;
        let up = match &aggregate {
            None => None,
            Some(af) => Some(dilate_flow(af, dims)),
        };
        let t = t_schedule(level as u32, cfg.t0);
        let (flow, trace) = match cfg.backend {
            Backend::Variational => {
                let moving_in = match &up {
                    None => lv.moving.clone(),
                    Some(u) => warp(&lv.moving, u)?,
                };
                // the configured count is a per-case budget knob; each level
                // runs a multiple of it, and coarse grids (cheap per step)
                // get proportionally more so the aggregate arrives well
                // converged
                let mut lv_cfg = cfg.clone();
                lv_cfg.variational_steps =
                    ((cfg.variational_steps * 4) << level.min(8)).min(cfg.variational_steps * 32);
                predict_flow_variational(&lv.fixed, &moving_in, &lv_cfg)?
            }
            Backend::Aru => {
                let w = weights.ok_or_else(|| {
                    Error::InvalidConfig("network backend requires a weight bundle".into())
                })?;
                // warped higher-level moving feature, dilated to this grid
                let upstream = if level == n {
                    lv.moving.clone()
                } else {
                    let above = &pyramid.levels[level + 1];
                    let warped_above = warp(&above.moving, aggregates[level + 1].as_ref().unwrap())?;
                    resize_trilinear(&warped_above, dims)
                };
                let sub = bundle_for_level(w, level)?;
                let flow = aru::aru_forward(
                    grades[level],
                    [&upstream, &lv.fixed, &lv.moving],
                    &cfg.aru,
                    &sub,
                )?;
                (flow, Vec::new())
            }
        };
        let af = idm_step(up.as_ref(), &flow, t, cfg)?;
        if !af.is_finite() {
            return Err(Error::Divergence(format!("aggregate flow at level {level}")));
        }
        flows[level] = Some(flow);
        aggregates[level] = Some(af.clone());
        traces[level] = trace;
        aggregate = Some(af);
    }

    let df = aggregate.unwrap();
    let warped = warp(moving, &df)?;
    let final_loss = crate::metrics::loss(fixed, &warped, &df, cfg.lambda)?;
    Ok(RegistrationResult {
        df,
        warped,
        level_flows: flows.into_iter().map(|f| f.unwrap()).collect(),
        level_aggregates: aggregates.into_iter().map(|f| f.unwrap()).collect(),
        loss_traces: traces,
        final_loss,
    })
}

// Select "level{i}_" prefixed tensors into a plain bundle.
fn bundle_for_level(w: &WeightBundle, level: usize) -> Result<WeightBundle> {
    let prefix = format!("level{level}_");
    let mut sub = WeightBundle::default();
    for (name, (shape, data)) in &w.tensors {
        if let Some(stripped) = name.strip_prefix(&prefix) {
            sub.tensors.insert(stripped.to_string(), (shape.clone(), data.clone()));
        }
    }
    if sub.tensors.is_empty() {
        return Err(Error::MissingWeight(format!("{prefix}*")));
    }
    Ok(sub)
}
