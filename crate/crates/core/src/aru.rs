//! Grade-parameterized encoder-decoder flow predictor.
//!
//! The Grade of a level caps the encoder/decoder depth so the network's
//! receptive field along the slice axis never exceeds the feature depth at
//! that level. Forward inference only; weights are supplied externally.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::vol::Volume;

pub const MIN_GRADE: u8 = 1;
pub const MAX_GRADE: u8 = 7;

/// One layer of the 1-D dependency footprint along the depth axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// Odd kernel, stride 1, same padding.
    Conv { kernel: usize },
    /// Kernel 2, stride 2 max pooling.
    Pool,
    /// Nearest-neighbor x2 upsampling.
    Upsample,
}

/// Layer sequence of a grade-g network, input to output. Skip connections
/// bypass deeper layers and never widen the footprint, so they are omitted.
pub fn layer_sequence(grade: u8) -> Vec<Layer> {
    let g = grade as usize;
    let mut seq = Vec::new();
    for _ in 0..g {
        seq.push(Layer::Conv { kernel: 3 });
        seq.push(Layer::Conv { kernel: 3 });
        seq.push(Layer::Pool);
    }
    seq.push(Layer::Conv { kernel: 3 });
    seq.push(Layer::Conv { kernel: 3 });
    for _ in 0..g {
        seq.push(Layer::Upsample);
        seq.push(Layer::Conv { kernel: 3 });
        seq.push(Layer::Conv { kernel: 3 });
    }
    seq.push(Layer::Conv { kernel: 1 }); // flow head
    seq
}

/// Dependency extent of one output sample: mark a single output index and
/// push the dependency mask backward through the layer sequence, one index
/// set per layer. Empty sequence is the identity network with extent 1.
pub fn footprint_extent(seq: &[Layer]) -> usize {
    use std::collections::HashSet;
    let mut marked: HashSet<i64> = HashSet::from([0]);
    for layer in seq.iter().rev() {
        let mut next = HashSet::new();
        match layer {
            Layer::Conv { kernel } => {
                let r = (*kernel as i64 - 1) / 2;
                for &i in &marked {
                    for d in -r..=r {
                        next.insert(i + d);
                    }
                }
            }
            Layer::Pool => {
                for &i in &marked {
                    next.insert(2 * i);
                    next.insert(2 * i + 1);
                }
            }
            Layer::Upsample => {
                for &i in &marked {
                    next.insert(i.div_euclid(2));
                }
            }
        }
        marked = next;
    }
    let lo = marked.iter().min().copied().unwrap_or(0);
    let hi = marked.iter().max().copied().unwrap_or(0);
    (hi - lo + 1) as usize
}

/// Receptive-field extent along the depth axis of a grade-g network output.
pub fn receptive_field_depth(grade: u8) -> usize {
    footprint_extent(&layer_sequence(grade))
}

/// Largest grade whose depth-axis receptive field fits within `depth`;
/// 0 when even grade 1 does not fit.
pub fn max_fitting_grade(depth: usize) -> u8 {
    let mut best = 0u8;
    for g in MIN_GRADE..=MAX_GRADE {
        if receptive_field_depth(g) <= depth {
            best = g;
        }
    }
    best
}

/// Grade rule over injected per-level depth capacities `d[0..=n]`
/// (level 0 first): the top level clamps its own capacity into [1, 7], and
/// each level below may exceed the level above by at most one.
pub fn grades_from_capacities(d: &[i64]) -> Vec<u8> {
    let n = d.len();
    let mut grades = vec![0u8; n];
    for i in (0..n).rev() {
        let cap = d[i].max(1).min(MAX_GRADE as i64);
        grades[i] = if i == n - 1 {
            cap as u8
        } else {
            cap.min(grades[i + 1] as i64 + 1) as u8
        };
    }
    grades
}

/// Per-level grades from the per-level depth-axis lengths (level 0 first).
pub fn compute_grades(depths: &[usize]) -> Vec<u8> {
    let caps: Vec<i64> = depths.iter().map(|&d| max_fitting_grade(d) as i64).collect();
    grades_from_capacities(&caps)
}

// ---------------------------------------------------------------------------
// Architecture and weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AruConfig {
    pub base_channels: usize,
    pub channel_cap: usize,
    pub leaky_slope: f32,
    /// Channels inside each of the three pyramid feature-extractor convs.
    pub extractor_channels: usize,
}

impl Default for AruConfig {
    fn default() -> Self {
        Self { base_channels: 16, channel_cap: 128, leaky_slope: 0.2, extractor_channels: 8 }
    }
}

impl AruConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        (self.base_channels << (stage - 1)).min(self.channel_cap)
    }
}

#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// Apply the leaky rectifier after this conv.
    pub activated: bool,
}

/// Concrete grade-g network: layer names and shapes, used both to validate a
/// weight bundle and to drive the forward pass.
#[derive(Debug, Clone)]
pub struct AruArchitecture {
    pub grade: u8,
    pub cfg: AruConfig,
    pub input_channels: usize,
}

impl AruArchitecture {
    pub fn new(grade: u8, cfg: AruConfig, input_channels: usize) -> Result<Self> {
        if !(MIN_GRADE..=MAX_GRADE).contains(&grade) {
            return Err(Error::InvalidConfig(format!("grade {grade} outside [1, 7]")));
        }
        Ok(Self { grade, cfg, input_channels })
    }

    /// Conv layers in forward order, excluding the pool/upsample/concat glue.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let g = self.grade as usize;
        let mut specs = Vec::new();
        let mut prev = self.input_channels;
        for s in 1..=g {
            let ch = self.cfg.stage_channels(s);
            specs.push(ConvSpec { name: format!("enc{s}_conv1"), in_ch: prev, out_ch: ch, kernel: 3, activated: true });
            specs.push(ConvSpec { name: format!("enc{s}_conv2"), in_ch: ch, out_ch: ch, kernel: 3, activated: true });
            prev = ch;
        }
        let bch = self.cfg.stage_channels(g + 1);
        specs.push(ConvSpec { name: "bottleneck_conv1".into(), in_ch: prev, out_ch: bch, kernel: 3, activated: true });
        specs.push(ConvSpec { name: "bottleneck_conv2".into(), in_ch: bch, out_ch: bch, kernel: 3, activated: true });
        prev = bch;
        for s in (1..=g).rev() {
            let ch = self.cfg.stage_channels(s);
            specs.push(ConvSpec {
                name: format!("dec{s}_conv1"),
                in_ch: prev + ch, // skip concat from encoder stage s
                out_ch: ch,
                kernel: 3,
                activated: true,
            });
            specs.push(ConvSpec { name: format!("dec{s}_conv2"), in_ch: ch, out_ch: ch, kernel: 3, activated: true });
            prev = ch;
        }
        specs.push(ConvSpec { name: "head".into(), in_ch: prev, out_ch: 3, kernel: 1, activated: false });
        specs
    }
}

/// Named f32 tensors with shapes; the on-disk unit for network weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    tensors: Vec<(String, Vec<usize>)>,
}

impl WeightBundle {
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.to_string(), (shape, data));
    }

    pub fn get(&self, name: &str, expected: &[usize]) -> Result<&[f32]> {
        let (shape, data) =
            self.tensors.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        if shape != expected {
            return Err(Error::WeightShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                actual: shape.clone(),
            });
        }
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = BundleManifest {
            tensors: self.tensors.iter().map(|(n, (s, _))| (n.clone(), s.clone())).collect(),
        };
        let mjson = serde_json::to_vec(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        for (_, (_, data)) in &self.tensors {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| Error::Io { path: path.into(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader { path: path.into(), reason: "truncated".into() });
        }
        let mlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let manifest: BundleManifest =
            serde_json::from_slice(&bytes[8..8 + mlen]).map_err(|e| Error::MalformedHeader {
                path: path.into(),
                reason: e.to_string(),
            })?;
        let mut off = 8 + mlen;
        let mut bundle = WeightBundle::default();
        for (name, shape) in manifest.tensors {
            let n: usize = shape.iter().product();
            if bytes.len() < off + n * 4 {
                return Err(Error::SizeMismatch {
                    path: path.into(),
                    expected: n,
                    actual: (bytes.len() - off) / 4,
                });
            }
            let data = bytes[off..off + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            off += n * 4;
            bundle.tensors.insert(name, (shape, data));
        }
        Ok(bundle)
    }

    /// Seeded random weights matching an architecture, for inference tests
    /// and ungraded pipelines without trained parameters.
    pub fn random_for(arch: &AruArchitecture, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = WeightBundle::default();
        for spec in arch.conv_specs() {
            let k = spec.kernel;
            let n = spec.out_ch * spec.in_ch * k * k * k;
            let scale = (2.0 / (spec.in_ch * k * k * k) as f32).sqrt();
            let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
            bundle.insert(&spec.name, vec![spec.out_ch, spec.in_ch, k, k, k], w);
            bundle.insert(&format!("{}_bias", spec.name), vec![spec.out_ch], vec![0.0; spec.out_ch]);
        }
        bundle
    }

    pub fn zeros_for(arch: &AruArchitecture) -> Self {
        let mut bundle = WeightBundle::default();
        for spec in arch.conv_specs() {
            let k = spec.kernel;
            let n = spec.out_ch * spec.in_ch * k * k * k;
            bundle.insert(&spec.name, vec![spec.out_ch, spec.in_ch, k, k, k], vec![0.0; n]);
            bundle.insert(&format!("{}_bias", spec.name), vec![spec.out_ch], vec![0.0; spec.out_ch]);
        }
        bundle
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Multi-channel feature grid, x-fastest within a channel.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub ch: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(ch: usize, dims: [usize; 3]) -> Self {
        Self { ch, dims, data: vec![0.0; ch * dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_volumes(vols: &[&Volume]) -> Result<Self> {
        let dims = vols[0].dims;
        for v in vols {
            if v.dims != dims {
                return Err(Error::DimMismatch(dims, v.dims));
            }
        }
        let mut fm = FeatureMap::new(vols.len(), dims);
        let n = dims[0] * dims[1] * dims[2];
        for (c, v) in vols.iter().enumerate() {
            fm.data[c * n..(c + 1) * n].copy_from_slice(&v.values);
        }
        Ok(fm)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        &self.data[c * n..(c + 1) * n]
    }
}

/// 3-D convolution, zero padding, stride 1 or 2, optional leaky rectifier.
pub fn conv3d(
    input: &FeatureMap,
    weights: &[f32],
    bias: &[f32],
    out_ch: usize,
    kernel: usize,
    stride: usize,
    leaky: Option<f32>,
) -> FeatureMap {
    let [nx, ny, nz] = input.dims;
    let od = [nx.div_ceil(stride), ny.div_ceil(stride), nz.div_ceil(stride)];
    let on = od[0] * od[1] * od[2];
    let r = (kernel as i64 - 1) / 2;
    let in_n = nx * ny * nz;
    let mut out = FeatureMap::new(out_ch, od);
    out.data.par_chunks_mut(on).enumerate().for_each(|(oc, plane)| {
        let wbase = oc * input.ch * kernel * kernel * kernel;
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                for ox in 0..od[0] {
                    let cz = (oz * stride) as i64;
                    let cy = (oy * stride) as i64;
                    let cx = (ox * stride) as i64;
                    let mut acc = bias[oc];
                    for ic in 0..input.ch {
                        let ibase = ic * in_n;
                        let wk = wbase + ic * kernel * kernel * kernel;
                        for kz in 0..kernel as i64 {
                            let sz = cz + kz - r;
                            if sz < 0 || sz >= nz as i64 {
                                continue;
                            }
                            for ky in 0..kernel as i64 {
                                let sy = cy + ky - r;
                                if sy < 0 || sy >= ny as i64 {
                                    continue;
                                }
                                let row = ibase + (sy as usize) * nx + (sz as usize) * nx * ny;
                                let wrow = wk + ((kz * kernel as i64 + ky) * kernel as i64) as usize;
                                for kx in 0..kernel as i64 {
                                    let sx = cx + kx - r;
                                    if sx < 0 || sx >= nx as i64 {
                                        continue;
                                    }
                                    acc += weights[wrow + kx as usize]
                                        * input.data[row + sx as usize];
                                }
                            }
                        }
                    }
                    if let Some(slope) = leaky {
                        if acc < 0.0 {
                            acc *= slope;
                        }
                    }
                    plane[ox + od[0] * (oy + od[1] * oz)] = acc;
                }
            }
        }
    });
    out
}

fn maxpool2(input: &FeatureMap) -> FeatureMap {
    let [nx, ny, nz] = input.dims;
    let od = [nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2)];
    let on = od[0] * od[1] * od[2];
    let in_n = nx * ny * nz;
    let mut out = FeatureMap::new(input.ch, od);
    out.data.par_chunks_mut(on).enumerate().for_each(|(c, plane)| {
        let base = c * in_n;
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                for ox in 0..od[0] {
                    let mut m = f32::NEG_INFINITY;
                    for dz in 0..2 {
                        let z = (oz * 2 + dz).min(nz - 1);
                        for dy in 0..2 {
                            let y = (oy * 2 + dy).min(ny - 1);
                            for dx in 0..2 {
                                let x = (ox * 2 + dx).min(nx - 1);
                                m = m.max(input.data[base + x + nx * (y + ny * z)]);
                            }
                        }
                    }
                    plane[ox + od[0] * (oy + od[1] * oz)] = m;
                }
            }
        }
    });
    out
}

fn upsample_nearest(input: &FeatureMap, target: [usize; 3]) -> FeatureMap {
    let [nx, ny, nz] = input.dims;
    let on = target[0] * target[1] * target[2];
    let in_n = nx * ny * nz;
    let mut out = FeatureMap::new(input.ch, target);
    out.data.par_chunks_mut(on).enumerate().for_each(|(c, plane)| {
        let base = c * in_n;
        for oz in 0..target[2] {
            let z = (oz * nz / target[2]).min(nz - 1);
            for oy in 0..target[1] {
                let y = (oy * ny / target[1]).min(ny - 1);
                for ox in 0..target[0] {
                    let x = (ox * nx / target[0]).min(nx - 1);
                    plane[ox + target[0] * (oy + target[1] * oz)] =
                        input.data[base + x + nx * (y + ny * z)];
                }
            }
        }
    });
    out
}

fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    debug_assert_eq!(a.dims, b.dims);
    let mut out = FeatureMap::new(a.ch + b.ch, a.dims);
    let n = a.dims[0] * a.dims[1] * a.dims[2];
    out.data[..a.ch * n].copy_from_slice(&a.data);
    out.data[a.ch * n..].copy_from_slice(&b.data);
    out
}

fn run_conv(input: &FeatureMap, spec: &ConvSpec, weights: &WeightBundle, slope: f32) -> Result<FeatureMap> {
    let k = spec.kernel;
    let w = weights.get(&spec.name, &[spec.out_ch, spec.in_ch, k, k, k])?;
    let b = weights.get(&format!("{}_bias", spec.name), &[spec.out_ch])?;
    if input.ch != spec.in_ch {
        return Err(Error::WeightShapeMismatch {
            name: spec.name.clone(),
            expected: vec![spec.out_ch, spec.in_ch, k, k, k],
            actual: vec![spec.out_ch, input.ch, k, k, k],
        });
    }
    Ok(conv3d(input, w, b, spec.out_ch, k, 1, spec.activated.then_some(slope)))
}

/// Forward pass of the grade-g encoder-decoder over the three concatenated
/// input volumes (upsampled warped higher feature, fixed feature, moving
/// feature). Output is a 3-component flow on the level grid.
pub fn aru_forward(
    grade: u8,
    inputs: [&Volume; 3],
    cfg: &AruConfig,
    weights: &WeightBundle,
) -> Result<DisplacementField> {
    let arch = AruArchitecture::new(grade, cfg.clone(), 3)?;
    let specs = arch.conv_specs();
    let mut spec_iter = specs.iter();
    let slope = cfg.leaky_slope;

    let mut x = FeatureMap::from_volumes(&[inputs[0], inputs[1], inputs[2]])?;
    let g = grade as usize;
    let mut skips: Vec<FeatureMap> = Vec::with_capacity(g);
    for _ in 0..g {
        x = run_conv(&x, spec_iter.next().unwrap(), weights, slope)?;
        x = run_conv(&x, spec_iter.next().unwrap(), weights, slope)?;
        skips.push(x.clone());
        x = maxpool2(&x);
    }
    x = run_conv(&x, spec_iter.next().unwrap(), weights, slope)?;
    x = run_conv(&x, spec_iter.next().unwrap(), weights, slope)?;
    for _ in 0..g {
        let skip = skips.pop().unwrap();
        x = upsample_nearest(&x, skip.dims);
        x = concat(&x, &skip);
        x = run_conv(&x, spec_iter.next().unwrap(), weights, slope)?;
        x = run_conv(&x, spec_iter.next().unwrap(), weights, slope)?;
    }
    let head = spec_iter.next().unwrap();
    x = run_conv(&x, head, weights, slope)?;

    DisplacementField::new(
        x.dims,
        [x.channel(0).to_vec(), x.channel(1).to_vec(), x.channel(2).to_vec()],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Interval-propagation oracle: track only the [lo, hi] endpoints of the
    // dependency interval, backward through the layer sequence.
    fn oracle_extent(seq: &[Layer]) -> usize {
        let mut a: i64 = 0;
        let mut b: i64 = 0;
        for layer in seq.iter().rev() {
            match layer {
                Layer::Conv { kernel } => {
                    let r = (*kernel as i64 - 1) / 2;
                    a -= r;
                    b += r;
                }
                Layer::Pool => {
                    a *= 2;
                    b = 2 * b + 1;
                }
                Layer::Upsample => {
                    a = a.div_euclid(2);
                    b = b.div_euclid(2);
                }
            }
        }
        (b - a + 1) as usize
    }

    #[test]
    fn empty_sequence_extent_is_one() {
        assert_eq!(footprint_extent(&[]), 1);
    }

    #[test]
    fn footprint_matches_interval_oracle() {
        for g in MIN_GRADE..=MAX_GRADE {
            let seq = layer_sequence(g);
            assert_eq!(footprint_extent(&seq), oracle_extent(&seq), "grade {g}");
        }
    }

    #[test]
    fn footprint_increases_with_grade() {
        let mut prev = 0;
        for g in MIN_GRADE..=MAX_GRADE {
            let e = receptive_field_depth(g);
            assert!(e > prev, "grade {g}: {e} vs {prev}");
            prev = e;
        }
    }

    #[test]
    fn grade_rule_injected_capacities() {
        assert_eq!(grades_from_capacities(&[5, 4, 3, 2, 1]), vec![5, 4, 3, 2, 1]);
        assert_eq!(grades_from_capacities(&[9, 9, 9, 9, 9]), vec![7, 7, 7, 7, 7]);
        assert_eq!(grades_from_capacities(&[6, 4, 2, 1, 0]), vec![4, 3, 2, 1, 1]);
    }

    // Direct transcription of the grade rule, coded independently of the
    // vectorized implementation.
    fn grade_rule_reference(d: &[i64]) -> Vec<u8> {
        let n = d.len() - 1;
        let mut g = vec![0i64; d.len()];
        g[n] = d[n].max(1).min(7);
        for i in (0..n).rev() {
            g[i] = (g[i + 1] + 1).min(d[i].max(1)).min(7);
        }
        g.iter().map(|&x| x as u8).collect()
    }

    proptest! {
        #[test]
        fn grade_rule_matches_reference(d in proptest::collection::vec(-2i64..12, 1..8)) {
            let got = grades_from_capacities(&d);
            let expect = grade_rule_reference(&d);
            prop_assert_eq!(&got, &expect);
            // both clamps plus downward monotonicity
            for i in 0..got.len() {
                prop_assert!((1..=7).contains(&got[i]));
                if i + 1 < got.len() {
                    prop_assert!(got[i] <= got[i + 1] + 1);
                }
            }
        }
    }

    fn small_inputs(dims: [usize; 3]) -> [Volume; 3] {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let n = dims[0] * dims[1] * dims[2];
            Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
        };
        [mk(&mut rng), mk(&mut rng), mk(&mut rng)]
    }

    #[test]
    fn zero_weights_give_zero_flow() {
        let cfg = AruConfig::default();
        let arch = AruArchitecture::new(2, cfg.clone(), 3).unwrap();
        let w = WeightBundle::zeros_for(&arch);
        let [a, b, c] = small_inputs([8, 8, 8]);
        let flow = aru_forward(2, [&a, &b, &c], &cfg, &w).unwrap();
        assert_eq!(flow.dims, [8, 8, 8]);
        assert!(flow.comp.iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_shape_contract_odd_dims() {
        let cfg = AruConfig::default();
        let arch = AruArchitecture::new(2, cfg.clone(), 3).unwrap();
        let w = WeightBundle::random_for(&arch, 3);
        let [a, b, c] = small_inputs([9, 7, 5]);
        let flow = aru_forward(2, [&a, &b, &c], &cfg, &w).unwrap();
        assert_eq!(flow.dims, [9, 7, 5]);
    }

    #[test]
    fn bundle_round_trip_preserves_forward() {
        let cfg = AruConfig::default();
        let arch = AruArchitecture::new(1, cfg.clone(), 3).unwrap();
        let w = WeightBundle::random_for(&arch, 5);
        let [a, b, c] = small_inputs([6, 6, 6]);
        let before = aru_forward(1, [&a, &b, &c], &cfg, &w).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bundle");
        w.save(&p).unwrap();
        let back = WeightBundle::load(&p).unwrap();
        assert_eq!(back, w);
        let after = aru_forward(1, [&a, &b, &c], &cfg, &back).unwrap();
        assert_eq!(before.comp, after.comp);
    }

    #[test]
    fn head_is_positively_homogeneous() {
        let cfg = AruConfig::default();
        let arch = AruArchitecture::new(1, cfg.clone(), 3).unwrap();
        let w = WeightBundle::random_for(&arch, 9);
        let [a, b, c] = small_inputs([6, 6, 6]);
        let base = aru_forward(1, [&a, &b, &c], &cfg, &w).unwrap();
        let mut scaled = w.clone();
        let (shape, data) = scaled.tensors.get_mut("head").unwrap();
        let _ = shape;
        for v in data.iter_mut() {
            *v *= 2.5;
        }
        let out = aru_forward(1, [&a, &b, &c], &cfg, &scaled).unwrap();
        for ch in 0..3 {
            for i in 0..base.comp[ch].len() {
                assert!((out.comp[ch][i] - 2.5 * base.comp[ch][i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn wrong_shape_is_reported() {
        let cfg = AruConfig::default();
        let arch = AruArchitecture::new(1, cfg.clone(), 3).unwrap();
        let mut w = WeightBundle::random_for(&arch, 1);
        let (_, data) = w.tensors.get_mut("enc1_conv1").unwrap();
        data.truncate(10);
        w.tensors.get_mut("enc1_conv1").unwrap().0 = vec![10];
        let [a, b, c] = small_inputs([6, 6, 6]);
        assert!(matches!(
            aru_forward(1, [&a, &b, &c], &cfg, &w),
            Err(Error::WeightShapeMismatch { .. })
        ));
    }
}
