//! Acceptance suite: one test per release criterion, each printing a single
//! PASS line (visible with `--nocapture`) after its assertions hold.
//!
//! The synthetic-recovery criteria run twenty full-size registrations; their
//! per-run results are cached under `target/` (keyed by configuration) so an
//! interrupted suite resumes instead of restarting. Delete the cache file to
//! force a clean re-run.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lungreg_core::aru::{
    compute_grades, grades_from_capacities, layer_sequence, receptive_field_depth, Layer,
};
use lungreg_core::cascade::{
    gaussian_smooth, register, variational_gradient, variational_loss, CascadeConfig,
};
use lungreg_core::diffeo::integrate_svf;
use lungreg_core::field::{
    compose, gradient_penalty, jacobian_determinant, warp, DisplacementField,
};
use lungreg_core::lesion::{jac_intensity_scalar, track, TrackConfig};
use lungreg_core::metrics::{evaluate_landmarks, load_landmarks, population_sd};
use lungreg_core::preprocess::{enhance_scalar, normalize};
use lungreg_core::synth::{euler_integrate, make_case, make_phantom, make_smooth_svf};
use lungreg_core::vol::{IntensityWindow, Volume};

// ---------------------------------------------------------------------------
// 1. Scalar formula exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_formula_exactness() {
    let w = IntensityWindow::chest_ct();
    let d = 200.0;

    // vessel enhancement branch cases
    assert!((enhance_scalar(-900.0, 0.7, w, d) - -900.0).abs() < 1e-9);
    assert!((enhance_scalar(-500.0, 0.0, w, d) - -500.0).abs() < 1e-9);
    assert!((enhance_scalar(-500.0, 1.0, w, d) - 700.0).abs() < 1e-4);

    // normalization endpoints and midpoint
    let v = Volume::new([4, 1, 1], [1.0; 3], vec![-1000.0, 700.0, -150.0, 900.0]).unwrap();
    let n = normalize(&v, w);
    assert!((n.values[0] - 0.0).abs() < 1e-9);
    assert!((n.values[1] - 1.0).abs() < 1e-9);
    assert!((n.values[2] - 0.5).abs() < 1e-7);
    assert!((n.values[3] - 1.0).abs() < 1e-9, "out-of-window clips first");

    // lesion score reference points
    assert!((jac_intensity_scalar(1.5, 0.5, 0.0, 10.0) - 0.5480).abs() < 1e-4);
    assert!((jac_intensity_scalar(0.5, 0.0, 0.0, 10.0) - -0.25).abs() < 1e-9);

    println!("criterion 1 (scalar formula exactness): PASS");
}

// ---------------------------------------------------------------------------
// 2. Grade rule conformance
// ---------------------------------------------------------------------------

// Literal transcription of the grade recurrence: the top level clamps its own
// capacity into [1, 7]; every level below is additionally capped at one more
// than the level above.
fn brute_force_grades(d: &[i64]) -> Vec<u8> {
    let n = d.len();
    let mut g = vec![0u8; n];
    for i in (0..n).rev() {
        let own = d[i].max(1).min(7);
        g[i] = if i == n - 1 { own as u8 } else { own.min(g[i + 1] as i64 + 1) as u8 };
    }
    g
}

// Independent receptive-field oracle: propagate a closed index interval
// backward through the layer sequence instead of a per-index set.
fn interval_rf(grade: u8) -> usize {
    let (mut lo, mut hi) = (0i64, 0i64);
    for layer in layer_sequence(grade).iter().rev() {
        match layer {
            Layer::Conv { kernel } => {
                let r = (*kernel as i64 - 1) / 2;
                lo -= r;
                hi += r;
            }
            Layer::Pool => {
                lo *= 2;
                hi = 2 * hi + 1;
            }
            Layer::Upsample => {
                lo = lo.div_euclid(2);
                hi = hi.div_euclid(2);
            }
        }
    }
    (hi - lo + 1) as usize
}

#[test]
fn criterion_2_grade_rule_conformance() {
    for g in 1..=7u8 {
        assert_eq!(receptive_field_depth(g), interval_rf(g), "grade {g}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1500 {
        let len = rng.gen_range(1..=8);
        let d: Vec<i64> = (0..len).map(|_| rng.gen_range(-3..=12)).collect();
        assert_eq!(grades_from_capacities(&d), brute_force_grades(&d), "D = {d:?}");
    }

    // the depth-driven entry point agrees with capacities derived from the
    // independently computed receptive fields
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    for _ in 0..200 {
        let len = rng.gen_range(1..=6);
        let depths: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=200)).collect();
        let caps: Vec<i64> = depths
            .iter()
            .map(|&dep| (1..=7u8).filter(|&g| interval_rf(g) <= dep).max().unwrap_or(0) as i64)
            .collect();
        assert_eq!(compute_grades(&depths), brute_force_grades(&caps), "depths {depths:?}");
    }

    println!("criterion 2 (grade rule conformance): PASS");
}

// ---------------------------------------------------------------------------
// 3. Flow integration integrity
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_integration_integrity() {
    // zero velocity -> identity, exactly
    let z = DisplacementField::zeros([16, 16, 16]);
    let r = integrate_svf(&z, 7).unwrap();
    assert!(r.v0.comp.iter().all(|c| c.iter().all(|&x| x == 0.0)));

    // constant field doubles per squaring, exactly (interior is clamp-free)
    let c = DisplacementField::constant([24, 24, 24], [0.02, -0.01, 0.015]);
    let r = integrate_svf(&c, 5).unwrap();
    let mid = r.v0.idx(12, 12, 12);
    let got = r.v0.vector_at(mid);
    for (a, &want) in [0.02f32, -0.01, 0.015].iter().enumerate() {
        assert!((got[a] - 32.0 * want).abs() < 1e-6, "comp {a}");
    }

    // squaring vs a 128-step explicit integration oracle
    for seed in [3u64, 7, 11] {
        let v = make_smooth_svf(seed, [24, 24, 24], 2.5, 4.0).unwrap();
        let oracle = euler_integrate(&v, 128);
        let fast = integrate_svf(&v.scaled(1.0 / 128.0), 7).unwrap().v0;
        let mut max = 0.0f64;
        for i in 0..fast.len() {
            let a = fast.vector_at(i);
            let b = oracle.vector_at(i);
            let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                as f64;
            max = max.max(e.sqrt());
        }
        assert!(max < 0.05, "seed {seed}: max discrepancy {max}");
    }

    // composing forward and backward integrals is close to identity
    for seed in [5u64, 9] {
        let v = make_smooth_svf(seed, [32, 32, 32], 4.0, 4.0).unwrap().scaled(1.0 / 128.0);
        let fwd = integrate_svf(&v, 7).unwrap().v0;
        let bwd = integrate_svf(&v.scaled(-1.0), 7).unwrap().v0;
        let res = compose(&fwd, &bwd).unwrap().mean_magnitude();
        assert!(res < 0.1, "seed {seed}: mean residual {res}");
    }

    println!("criterion 3 (flow integration integrity): PASS");
}

// ---------------------------------------------------------------------------
// 4. Field algebra
// ---------------------------------------------------------------------------

fn smooth_field(seed: u64, dims: [usize; 3], scale: f32) -> DisplacementField {
    make_smooth_svf(seed, dims, scale, 2.5).unwrap()
}

#[test]
fn criterion_4_field_algebra() {
    let dims = [16, 16, 16];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let img = {
        let raw = Volume::new(
            dims,
            [1.0; 3],
            (0..16 * 16 * 16).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        gaussian_smooth(&raw, 2.5)
    };
    let a = smooth_field(31, dims, 0.6);
    let b = smooth_field(32, dims, 0.6);

    // warping twice equals warping once through the composed field
    let two_step = warp(&warp(&img, &a).unwrap(), &b).unwrap();
    let one_step = warp(&img, &compose(&a, &b).unwrap()).unwrap();
    let mut max = 0.0f32;
    for i in 0..two_step.len() {
        max = max.max((two_step.values[i] - one_step.values[i]).abs());
    }
    assert!(max <= 1e-3, "two-step equivalence max error {max}");

    // determinant of an analytic affine field matches the closed form
    let lin = [[0.05f32, 0.02, 0.0], [0.01, -0.03, 0.015], [0.0, 0.02, 0.04]];
    let mut aff = DisplacementField::zeros(dims);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = aff.idx(x, y, z);
                let p = [x as f32, y as f32, z as f32];
                for c in 0..3 {
                    aff.comp[c][i] = lin[c][0] * p[0] + lin[c][1] * p[1] + lin[c][2] * p[2];
                }
            }
        }
    }
    let m = [
        [1.0 + lin[0][0] as f64, lin[0][1] as f64, lin[0][2] as f64],
        [lin[1][0] as f64, 1.0 + lin[1][1] as f64, lin[1][2] as f64],
        [lin[2][0] as f64, lin[2][1] as f64, 1.0 + lin[2][2] as f64],
    ];
    let want = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let jac = jacobian_determinant(&aff).unwrap();
    // interior voxels only: border columns use one-sided differences
    for z in 1..dims[2] - 1 {
        for y in 1..dims[1] - 1 {
            for x in 1..dims[0] - 1 {
                let got = jac.at(x, y, z) as f64;
                assert!((got - want).abs() < 1e-6, "({x},{y},{z}): {got} vs {want}");
            }
        }
    }

    println!("criterion 4 (field algebra): PASS");
}

// ---------------------------------------------------------------------------
// 5. Analytic gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_gradient_correctness() {
    let dims = [12, 12, 12];
    let n = dims[0] * dims[1] * dims[2];
    let cfg = CascadeConfig::default();
    for instance in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + instance);
        let vol = |rng: &mut ChaCha8Rng| {
            let raw = Volume::new(
                dims,
                [1.0; 3],
                (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
            )
            .unwrap();
            gaussian_smooth(&raw, 1.5)
        };
        let fixed = vol(&mut rng);
        let moving = vol(&mut rng);
        // Fractional parts stay well inside interpolation cells so the
        // difference quotient never straddles a C0 kink of the sampler.
        let mut flow = DisplacementField::zeros(dims);
        for c in 0..3 {
            for v in flow.comp[c].iter_mut() {
                let mag = 0.25 + rng.gen_range(0.0f32..0.5);
                *v = if rng.gen::<bool>() { mag } else { -mag };
            }
        }
        let grad = variational_gradient(&fixed, &moving, &flow, &cfg).unwrap();
        // Directional probes: a whole-field perturbation keeps the finite
        // difference at O(1) scale, well above the accumulation noise of the
        // loss evaluation. Single-voxel probes of a mean loss are not.
        let h = 1e-2f32;
        for probe in 0..6 {
            let mut d = DisplacementField::zeros(dims);
            for c in 0..3 {
                for v in d.comp[c].iter_mut() {
                    *v = rng.gen_range(-1.0f32..1.0);
                }
            }
            let plus = flow.add(&d.scaled(h)).unwrap();
            let minus = flow.add(&d.scaled(-h)).unwrap();
            let fd = (variational_loss(&fixed, &moving, &plus, &cfg).unwrap()
                - variational_loss(&fixed, &moving, &minus, &cfg).unwrap())
                / (2.0 * h as f64);
            let mut an = 0.0f64;
            for c in 0..3 {
                for i in 0..n {
                    an += grad.comp[c][i] as f64 * d.comp[c][i] as f64;
                }
            }
            // scale floor keeps near-orthogonal probes from amplifying
            // femto-scale absolute error into a large ratio
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
            assert!(
                rel < 1e-3,
                "instance {instance} probe {probe}: fd {fd} vs analytic {an} (rel {rel:.2e})"
            );
        }
    }

    println!("criterion 5 (analytic gradient correctness): PASS");
}

// ---------------------------------------------------------------------------
// 6 + 7. Synthetic recovery and ablation trend (shared registrations)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct CaseRun {
    pre_mean: f64,
    post_mean: f64,
    seconds: f64,
    df_penalty: f64,
    finest_flow_penalty: f64,
}

struct SweepData {
    v4: Vec<CaseRun>,
    v1: Vec<CaseRun>,
}

const SWEEP_SEEDS: u64 = 10;
const SWEEP_DIMS: [usize; 3] = [96, 96, 96];

fn cache_path() -> std::path::PathBuf {
    let mut p = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    p.push("recovery_sweep_cache.json");
    p
}

fn sweep() -> &'static SweepData {
    static DATA: OnceLock<SweepData> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg4 = CascadeConfig::default().variant(4).unwrap();
        let cfg1 = CascadeConfig::default().variant(1).unwrap();
        let cache_key_prefix = format!(
            "{}|{}",
            serde_json::to_string(&cfg4).unwrap(),
            serde_json::to_string(&cfg1).unwrap()
        );
        let mut cache: HashMap<String, (f64, f64, f64, f64, f64)> =
            std::fs::read_to_string(cache_path())
                .ok()
                .and_then(|s| serde_json::from_str(&s).ok())
                .unwrap_or_default();

        let mut v4 = Vec::new();
        let mut v1 = Vec::new();
        for seed in 1..=SWEEP_SEEDS {
            let amp = 6.0 + ((seed - 1) % 5) as f32;
            let mut case = None;
            for (variant, cfg, out) in
                [(4u8, &cfg4, &mut v4), (1u8, &cfg1, &mut v1)]
            {
                let key = format!("{cache_key_prefix}|seed {seed} v{variant} amp {amp}");
                let (pre_mean, post_mean, seconds, dfp, ffp) = match cache.get(&key) {
                    Some(&hit) => hit,
                    None => {
                        let case = case.get_or_insert_with(|| {
                            make_case(seed, SWEEP_DIMS, amp, 40).unwrap()
                        });
                        let zero = DisplacementField::zeros(case.fixed.dims);
                        let pre = evaluate_landmarks(&case.landmarks, &zero).unwrap();
                        let pre_mean = pre.iter().sum::<f64>() / pre.len() as f64;
                        let t = Instant::now();
                        let res = register(&case.fixed, &case.moving, cfg, None).unwrap();
                        let seconds = t.elapsed().as_secs_f64();
                        let post = evaluate_landmarks(&case.landmarks, &res.df).unwrap();
                        let post_mean = post.iter().sum::<f64>() / post.len() as f64;
                        let entry = (
                            pre_mean,
                            post_mean,
                            seconds,
                            gradient_penalty(&res.df),
                            gradient_penalty(&res.level_flows[0]),
                        );
                        cache.insert(key, entry);
                        if let Ok(s) = serde_json::to_string(&cache) {
                            let _ = std::fs::write(cache_path(), s);
                        }
                        entry
                    }
                };
                out.push(CaseRun {
                    pre_mean,
                    post_mean,
                    seconds,
                    df_penalty: dfp,
                    finest_flow_penalty: ffp,
                });
            }
        }
        SweepData { v4, v1 }
    })
}

#[test]
fn criterion_6_synthetic_recovery() {
    let data = sweep();
    for (i, run) in data.v4.iter().enumerate() {
        let reduction = 1.0 - run.post_mean / run.pre_mean;
        assert!(
            reduction >= 0.75,
            "seed {}: reduction {:.1}% (pre {:.3}, post {:.3})",
            i + 1,
            100.0 * reduction,
            run.pre_mean,
            run.post_mean
        );
        assert!(run.post_mean <= 1.5, "seed {}: final mean {:.3} voxels", i + 1, run.post_mean);
        assert!(run.seconds <= 300.0, "seed {}: took {:.0}s", i + 1, run.seconds);
    }

    println!("criterion 6 (synthetic recovery): PASS");
}

#[test]
fn criterion_7_ablation_trend() {
    let data = sweep();
    let post4: Vec<f64> = data.v4.iter().map(|r| r.post_mean).collect();
    let post1: Vec<f64> = data.v1.iter().map(|r| r.post_mean).collect();
    let mean4 = post4.iter().sum::<f64>() / post4.len() as f64;
    let mean1 = post1.iter().sum::<f64>() / post1.len() as f64;
    assert!(mean4 <= mean1, "mean final TRE: full {mean4:.3} vs additive-only {mean1:.3}");

    let sd4 = population_sd(&post4);
    let sd1 = population_sd(&post1);
    assert!(sd4 <= sd1, "cross-case SD: full {sd4:.3} vs additive-only {sd1:.3}");

    let wins = post4.iter().zip(&post1).filter(|(a, b)| a <= b).count();
    assert!(wins >= 8, "full variant at or below additive-only in only {wins}/10 paired seeds");

    println!("criterion 7 (ablation trend): PASS");
}

// Module property piggybacking on the same sweep: the final field carries
// the displacement of every level, so its roughness exceeds that of the
// finest incremental flow alone, but merging through the velocity
// integration must not compound it beyond a small multiple.
#[test]
fn df_smoothness_majority_property() {
    let data = sweep();
    let bounded = data
        .v4
        .iter()
        .filter(|r| r.df_penalty <= 3.0 * r.finest_flow_penalty)
        .count();
    assert!(bounded >= 8, "field roughness bounded in only {bounded}/10 seeds");
}

// ---------------------------------------------------------------------------
// 8. Lesion tracking signs
// ---------------------------------------------------------------------------

fn stamp(v: &mut Volume, c: [f32; 3], radius: f32, intensity: f32) {
    let [nx, ny, nz] = v.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d2 = (x as f32 - c[0]).powi(2)
                    + (y as f32 - c[1]).powi(2)
                    + (z as f32 - c[2]).powi(2);
                if d2 <= radius * radius {
                    let i = v.idx(x, y, z);
                    v.values[i] = intensity;
                }
            }
        }
    }
}

#[test]
fn criterion_8_lesion_tracking_signs() {
    let dims = [32, 32, 32];
    let center = [16.0f32, 16.0, 16.0];
    let centerd = center.map(|c| c as f64);
    let cfg = TrackConfig {
        cascade: CascadeConfig { n: 1, variational_steps: 20, ..CascadeConfig::default() },
        ..TrackConfig::default()
    };

    for seed in 1..=10u64 {
        let base = make_phantom(seed, dims);

        // identical scans first: nothing to report
        let map = track(&base, &base, &base, &base, &cfg).unwrap();
        assert!(map.regions.is_empty(), "seed {seed}: identical scans gave regions");

        // cycle through the four change types; expected sign follows the
        // later-minus-earlier intensity convention
        let (earlier, later, want_sign, label) = match seed % 4 {
            0 => {
                let mut l = base.clone();
                stamp(&mut l, center, 4.0, 300.0);
                (base.clone(), l, 1i8, "appeared")
            }
            1 => {
                let mut e = base.clone();
                stamp(&mut e, center, 4.0, 300.0);
                (e, base.clone(), -1i8, "disappeared")
            }
            2 => {
                let mut e = base.clone();
                let mut l = base.clone();
                stamp(&mut e, center, 2.5, 300.0);
                stamp(&mut l, center, 5.0, 300.0);
                (e, l, 1i8, "grown")
            }
            _ => {
                let mut e = base.clone();
                let mut l = base.clone();
                stamp(&mut e, center, 5.0, 300.0);
                stamp(&mut l, center, 2.5, 300.0);
                (e, l, -1i8, "shrunk")
            }
        };
        let map = track(&earlier, &later, &earlier, &later, &cfg).unwrap();
        let hit = map.regions.iter().any(|r| {
            r.sign == want_sign
                && ((r.centroid_voxel[0] - centerd[0]).powi(2)
                    + (r.centroid_voxel[1] - centerd[1]).powi(2)
                    + (r.centroid_voxel[2] - centerd[2]).powi(2))
                .sqrt()
                    < 4.0
        });
        assert!(
            hit,
            "seed {seed} ({label}): no sign-{want_sign} region at the true centroid; got {:?}",
            map.regions
        );
    }

    println!("criterion 8 (lesion tracking signs): PASS");
}

// ---------------------------------------------------------------------------
// 9. Optional reference-data plumbing
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_reference_data_plumbing() {
    // Needs externally licensed data: point LUNGREG_DIRLAB_DIR at a directory
    // with case1_T00.txt / case1_T50.txt landmark files (voxel indices, one
    // "x y z" triple per line, 0.97 x 0.97 x 2.5 mm spacing).
    let dir = match std::env::var("LUNGREG_DIRLAB_DIR") {
        Ok(d) => d,
        Err(_) => {
            println!("criterion 9 (reference-data plumbing): SKIP - data not supplied");
            return;
        }
    };
    let base = std::path::Path::new(&dir);
    let lm = load_landmarks(
        &base.join("case1_T00.txt"),
        &base.join("case1_T50.txt"),
        [0.97, 0.97, 2.5],
    )
    .unwrap();
    let zero = DisplacementField::zeros([512, 512, 128]);
    let tre = evaluate_landmarks(&lm, &zero).unwrap();
    let mean = tre.iter().sum::<f64>() / tre.len() as f64;
    let sd = population_sd(&tre);
    assert!((mean - 3.89).abs() < 0.05, "pre-registration mean {mean:.3} mm");
    assert!((sd - 2.78).abs() < 0.05, "pre-registration SD {sd:.3} mm");

    println!("criterion 9 (reference-data plumbing): PASS");
}
