//! Synthetic test-data generation: textured phantoms, smooth stationary
//! velocity fields with known flow maps, and landmarked registration cases
//! where the ground-truth correspondence is available in closed form up to
//! integrator accuracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cascade::gaussian_smooth;
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::metrics::LandmarkSet;
use crate::vol::Volume;

/// Deterministic chest-like phantom: a dark air shell, mid-intensity body,
/// bright tubes and ellipsoid blobs, plus smooth texture. Values stay inside
/// [-1000, 700].
pub fn make_phantom(seed: u64, dims: [usize; 3]) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = dims;
    let mut v = Volume::filled(dims, [1.0, 1.0, 1.0], -800.0);

    // soft-tissue body over an air background, with two dark lung cavities
    let c = [nx as f32 / 2.0, ny as f32 / 2.0, nz as f32 / 2.0];
    let r = [nx as f32 * 0.44, ny as f32 * 0.44, nz as f32 * 0.48];
    let lungs = [
        ([nx as f32 * 0.32, c[1], c[2]], [nx as f32 * 0.17, ny as f32 * 0.3, nz as f32 * 0.38]),
        ([nx as f32 * 0.68, c[1], c[2]], [nx as f32 * 0.17, ny as f32 * 0.3, nz as f32 * 0.38]),
    ];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = ((x as f32 - c[0]) / r[0]).powi(2)
                    + ((y as f32 - c[1]) / r[1]).powi(2)
                    + ((z as f32 - c[2]) / r[2]).powi(2);
                let mut hu = if d <= 1.0 { 0.0 } else { -1000.0 };
                for (lc, lr) in &lungs {
                    let ld = ((x as f32 - lc[0]) / lr[0]).powi(2)
                        + ((y as f32 - lc[1]) / lr[1]).powi(2)
                        + ((z as f32 - lc[2]) / lr[2]).powi(2);
                    if ld <= 1.0 {
                        hu = -850.0;
                    }
                }
                v.set(x, y, z, hu);
            }
        }
    }

    // tubes: straight bright lines with random direction and radius
    let min_dim = nx.min(ny).min(nz) as f32;
    let tube_count = 6 + (min_dim as usize / 16);
    for _ in 0..tube_count {
        let p0 = [
            rng.gen_range(0.2..0.8) * nx as f32,
            rng.gen_range(0.2..0.8) * ny as f32,
            rng.gen_range(0.2..0.8) * nz as f32,
        ];
        let mut dir = [
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
        ];
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-3);
        for d in &mut dir {
            *d /= norm;
        }
        let radius = rng.gen_range(1.2..2.5f32);
        let intensity = rng.gen_range(100.0..400.0f32);
        let half_len = min_dim * 0.4;
        let steps = (2.0 * half_len) as i32;
        for s in -steps / 2..=steps / 2 {
            let t = s as f32;
            let px = p0[0] + dir[0] * t;
            let py = p0[1] + dir[1] * t;
            let pz = p0[2] + dir[2] * t;
            stamp_ball(&mut v, [px, py, pz], radius, intensity);
        }
    }

    // blobs: soft ellipsoids of varied brightness
    let blob_count = 4 + (min_dim as usize / 12);
    for _ in 0..blob_count {
        let p = [
            rng.gen_range(0.25..0.75) * nx as f32,
            rng.gen_range(0.25..0.75) * ny as f32,
            rng.gen_range(0.25..0.75) * nz as f32,
        ];
        let radius = rng.gen_range(2.0..5.0f32);
        let intensity = rng.gen_range(-200.0..500.0f32);
        stamp_gaussian(&mut v, p, radius, intensity);
    }

    // smooth texture to give the similarity term structure everywhere
    let noise = Volume::new(
        dims,
        [1.0, 1.0, 1.0],
        (0..v.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let texture = gaussian_smooth(&noise, 2.0);
    let (tmin, tmax) = texture.min_max();
    let tspan = (tmax - tmin).max(1e-6);
    for i in 0..v.len() {
        let t = (texture.values[i] - tmin) / tspan - 0.5;
        v.values[i] = (v.values[i] + 120.0 * t).clamp(-1000.0, 700.0);
    }
    v
}

fn stamp_ball(v: &mut Volume, p: [f32; 3], radius: f32, intensity: f32) {
    let [nx, ny, nz] = v.dims;
    let r = radius.ceil() as i64;
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let x = p[0].round() as i64 + dx;
                let y = p[1].round() as i64 + dy;
                let z = p[2].round() as i64 + dz;
                if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                    continue;
                }
                let d2 = (x as f32 - p[0]).powi(2)
                    + (y as f32 - p[1]).powi(2)
                    + (z as f32 - p[2]).powi(2);
                if d2 <= radius * radius {
                    let i = v.idx(x as usize, y as usize, z as usize);
                    v.values[i] = v.values[i].max(intensity).clamp(-1000.0, 700.0);
                }
            }
        }
    }
}

fn stamp_gaussian(v: &mut Volume, p: [f32; 3], radius: f32, intensity: f32) {
    let [nx, ny, nz] = v.dims;
    let r = (3.0 * radius).ceil() as i64;
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let x = p[0].round() as i64 + dx;
                let y = p[1].round() as i64 + dy;
                let z = p[2].round() as i64 + dz;
                if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                    continue;
                }
                let d2 = (x as f32 - p[0]).powi(2)
                    + (y as f32 - p[1]).powi(2)
                    + (z as f32 - p[2]).powi(2);
                let w = (-d2 / (2.0 * radius * radius)).exp();
                let i = v.idx(x as usize, y as usize, z as usize);
                v.values[i] = (v.values[i] + intensity * w).clamp(-1000.0, 700.0);
            }
        }
    }
}

/// Explicit small-step flow integration of a stationary velocity field:
/// u_{k+1}(x) = u_k(x) + h * v(x + u_k(x)) with h = 1/steps. Deliberately
/// simple so it can serve as a reference for the squaring integrator.
pub fn euler_integrate(velocity: &DisplacementField, steps: u32) -> DisplacementField {
    let h = 1.0 / steps as f32;
    let [nx, ny, nz] = velocity.dims;
    let mut u = DisplacementField::zeros(velocity.dims);
    for _ in 0..steps {
        let mut next = u.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let [ux, uy, uz] = u.vector_at(i);
                    let s = velocity.sample(x as f32 + ux, y as f32 + uy, z as f32 + uz);
                    next.comp[0][i] = ux + h * s[0];
                    next.comp[1][i] = uy + h * s[1];
                    next.comp[2][i] = uz + h * s[2];
                }
            }
        }
        u = next;
    }
    u
}

/// Smooth velocity field that vanishes at the volume faces and whose flow
/// map has maximum displacement within 10% of `amplitude` voxels.
pub fn make_smooth_svf(
    seed: u64,
    dims: [usize; 3],
    amplitude: f32,
    sigma: f32,
) -> Result<DisplacementField> {
    if amplitude < 0.0 {
        return Err(Error::InvalidConfig("amplitude must be >= 0".into()));
    }
    if amplitude == 0.0 {
        return Ok(DisplacementField::zeros(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let sigma = sigma.max(0.5);
    let mut comp: [Vec<f32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for c in comp.iter_mut() {
        let noise = Volume::new(
            dims,
            [1.0, 1.0, 1.0],
            (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        *c = gaussian_smooth(&noise, sigma).values;
    }
    // taper to zero at the faces so warping and integration never clamp
    let taper = |i: usize, n: usize| {
        if n <= 1 || i == 0 || i == n - 1 {
            0.0
        } else {
            (std::f32::consts::PI * i as f32 / (n - 1) as f32).sin()
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let w = taper(x, nx) * taper(y, ny) * taper(z, nz);
                let i = x + nx * (y + ny * z);
                for c in comp.iter_mut() {
                    c[i] *= w;
                }
            }
        }
    }
    let mut v = DisplacementField::new(dims, comp)?;

    // fixed-point rescale so the integrated flow hits the target amplitude
    for _ in 0..4 {
        let u = euler_integrate(&v, 32);
        let m = u.max_magnitude();
        if m < 1e-6 {
            return Err(Error::InvalidConfig("velocity field degenerated to zero".into()));
        }
        let ratio = amplitude / m;
        if (ratio - 1.0).abs() < 0.02 {
            break;
        }
        v = v.scaled(ratio);
    }
    let m = euler_integrate(&v, 64).max_magnitude();
    if (m - amplitude).abs() / amplitude > 0.1 {
        return Err(Error::Divergence(format!(
            "svf amplitude calibration missed target: {m} vs {amplitude}"
        )));
    }
    Ok(v)
}

/// A full synthetic registration case with known correspondence.
#[derive(Debug, Clone)]
pub struct SynthCase {
    pub fixed: Volume,
    pub moving: Volume,
    pub velocity: DisplacementField,
    /// Flow map displacement of `velocity`: moving(x) = fixed(x + forward(x)).
    pub forward: DisplacementField,
    /// Flow map displacement of the negated velocity.
    pub inverse: DisplacementField,
    pub landmarks: LandmarkSet,
}

pub const EULER_STEPS: u32 = 128;

/// Build a phantom, deform it with a calibrated smooth flow, and place
/// landmarks on structured voxels. Moving landmark positions come from the
/// inverse flow map, so perfect registration yields zero target error.
pub fn make_case(
    seed: u64,
    dims: [usize; 3],
    amplitude: f32,
    landmark_count: usize,
) -> Result<SynthCase> {
    let fixed = make_phantom(seed, dims);
    let sigma = (dims[0].min(dims[1]).min(dims[2]) as f32 / 8.0).max(1.5);
    let velocity = make_smooth_svf(seed, dims, amplitude, sigma)?;
    let forward = euler_integrate(&velocity, EULER_STEPS);
    let inverse = euler_integrate(&velocity.scaled(-1.0), EULER_STEPS);
    let moving = crate::field::warp(&fixed, &forward)?;

    // landmark sites: structured interior voxels, ranked by local contrast
    let margin = (amplitude.ceil() as usize + 2).min(dims[0].min(dims[1]).min(dims[2]) / 3);
    let [nx, ny, nz] = dims;
    let mut candidates: Vec<(f32, [usize; 3])> = Vec::new();
    for z in margin..nz - margin {
        for y in margin..ny - margin {
            for x in margin..nx - margin {
                let c = fixed.at(x, y, z);
                let gx = fixed.at(x + 1, y, z) - fixed.at(x - 1, y, z);
                let gy = fixed.at(x, y + 1, z) - fixed.at(x, y - 1, z);
                let gz = fixed.at(x, y, z + 1) - fixed.at(x, y, z - 1);
                let g = (gx * gx + gy * gy + gz * gz).sqrt();
                if g > 30.0 && c > -950.0 {
                    candidates.push((g, [x, y, z]));
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::EmptySegmentation);
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    // greedy spatial thinning so landmarks spread across the volume
    let min_sep2 = ((dims[0].min(dims[1]).min(dims[2]) as f32) / 8.0).powi(2);
    let mut fixed_pts: Vec<[f32; 3]> = Vec::new();
    for (_, p) in &candidates {
        let q = [p[0] as f32, p[1] as f32, p[2] as f32];
        if fixed_pts.iter().all(|r| {
            (r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2) + (r[2] - q[2]).powi(2) >= min_sep2
        }) {
            fixed_pts.push(q);
            if fixed_pts.len() == landmark_count {
                break;
            }
        }
    }
    let moving_pts: Vec<[f32; 3]> = fixed_pts
        .iter()
        .map(|p| {
            let d = inverse.sample(p[0], p[1], p[2]);
            [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
        })
        .collect();
    let landmarks = LandmarkSet::new(fixed_pts, moving_pts, fixed.spacing)?;

    Ok(SynthCase { fixed, moving, velocity, forward, inverse, landmarks })
}
