use lungreg_core::cascade::{gaussian_smooth, variational_loss, variational_gradient, CascadeConfig};
use lungreg_core::field::DisplacementField;
use lungreg_core::synth::{make_phantom, make_smooth_svf};
use std::time::Instant;

fn main() {
    let dims = [96, 96, 96];
    let fixed = make_phantom(1, dims);
    let moving = make_phantom(2, dims);
    let flow = make_smooth_svf(3, dims, 2.0, 4.0).unwrap();
    let cfg = CascadeConfig::default();
    let t = Instant::now();
    for _ in 0..5 { let _ = variational_loss(&fixed, &moving, &flow, &cfg).unwrap(); }
    println!("loss eval: {:?}", t.elapsed() / 5);
    let t = Instant::now();
    for _ in 0..3 { let _ = variational_gradient(&fixed, &moving, &flow, &cfg).unwrap(); }
    println!("gradient: {:?}", t.elapsed() / 3);
    let t = Instant::now();
    for _ in 0..3 { let _ = gaussian_smooth(&fixed, 6.0); }
    println!("smooth s6: {:?}", t.elapsed() / 3);
    let t = Instant::now();
    for _ in 0..3 { let _ = gaussian_smooth(&fixed, 2.0); }
    println!("smooth s2: {:?}", t.elapsed() / 3);
    let t = Instant::now();
    let _ = lungreg_core::field::warp(&moving, &flow).unwrap();
    println!("warp: {:?}", t.elapsed());
    let z = DisplacementField::zeros(dims);
    let t = Instant::now();
    let _ = lungreg_core::cascade::predict_flow_variational(&fixed, &moving, &{
        let mut c = cfg.clone(); c.variational_steps = 10; c
    }).unwrap();
    println!("10 steps: {:?}", t.elapsed());
    drop(z);
}
