use lungreg_core::cascade::gaussian_smooth;
use lungreg_core::synth::make_phantom;
fn main() {
    let v = make_phantom(1, [96, 96, 96]);
    for sigma in [0.5f32, 2.0, 6.0] {
        let s = gaussian_smooth(&v, sigma);
        let mut h = 0u64;
        for &x in &s.values { h = h.wrapping_mul(1099511628211).wrapping_add(x.to_bits() as u64); }
        println!("sigma {sigma}: {h:x}");
    }
}
