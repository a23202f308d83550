//! Synthetic left-right symmetric brain phantoms with optional tumors.
//!
//! Healthy intensities depend on the horizontal position only through
//! `|2x − (W−1) − 2·shift|`, so every phantom is exactly mirror-symmetric
//! about its midplane. Tumors are spheres with an NCR core, an ET ring and an
//! ED shell, placed on one side so their support is disjoint from its mirror.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::volume::{Dims, LabelVolume, Modality, MultiModalVolume, Sample, Volume3D};

/// Per-modality tumor contrasts added on top of healthy tissue, for
/// NCR, ET and ED. All positive so the asymmetry map keeps the field intact.
/// FLAIR carries the strongest whole-tumor signal; T2 carries a weaker copy.
pub const CONTRAST: [[f32; 3]; 4] = [
    // NCR   ET    ED
    [1.6, 1.6, 1.6], // FLAIR
    [0.3, 2.0, 0.0], // T1ce
    [0.9, 0.2, 0.1], // T1
    [1.0, 0.7, 0.4], // T2
];

const TISSUE: [f32; 4] = [1.0, 1.2, 1.4, 0.9];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TumorSpec {
    pub center: [usize; 3],
    pub r_ncr: f32,
    pub r_et: f32,
    pub r_ed: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Midplane displacement from the volume center in voxels.
    pub shift: i32,
    /// Amplitude of mirror-symmetric texture noise.
    pub noise: f32,
    /// Multiplicative per-modality tissue scale.
    pub gain: [f32; 4],
    pub tumor: Option<TumorSpec>,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn healthy(dims: Dims) -> Self {
        PhantomSpec {
            dims,
            shift: 0,
            noise: 0.1,
            gain: [1.0; 4],
            tumor: None,
            seed: 0,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_unit(seed: u64, parts: [u64; 4]) -> f32 {
    let mut h = splitmix(seed);
    for p in parts {
        h = splitmix(h ^ p);
    }
    (h >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
}

/// Twice the signed horizontal distance from the midplane.
fn dx2(spec: &PhantomSpec, x: usize) -> i64 {
    2 * x as i64 - (spec.dims.width as i64 - 1) - 2 * spec.shift as i64
}

fn in_brain(spec: &PhantomSpec, z: usize, y: usize, x: usize) -> bool {
    let d = spec.dims;
    let ez = (2.0 * z as f32 - (d.depth as f32 - 1.0)) / (0.8 * d.depth as f32);
    let ey = (2.0 * y as f32 - (d.height as f32 - 1.0)) / (0.85 * d.height as f32);
    let ex = dx2(spec, x).unsigned_abs() as f32 / (0.8 * d.width as f32);
    ez * ez + ey * ey + ex * ex <= 1.0
}

fn tumor_label(t: &TumorSpec, z: usize, y: usize, x: usize) -> u8 {
    let r = ((z as f32 - t.center[0] as f32).powi(2)
        + (y as f32 - t.center[1] as f32).powi(2)
        + (x as f32 - t.center[2] as f32).powi(2))
    .sqrt();
    match r {
        _ if r <= t.r_ncr => 1,
        _ if r <= t.r_et => 4,
        _ if r <= t.r_ed => 2,
        _ => 0,
    }
}

/// The healthy phantom and, separately, the tumor field and labels.
pub fn generate_parts(spec: &PhantomSpec) -> (MultiModalVolume, [Volume3D; 4], LabelVolume) {
    let d = spec.dims;
    let mut labels = vec![0u8; d.len()];
    if let Some(t) = &spec.tumor {
        for (i, l) in labels.iter_mut().enumerate() {
            let (z, y, x) = d.coords(i);
            if in_brain(spec, z, y, x) {
                *l = tumor_label(t, z, y, x);
            }
        }
    }
    let healthy = Modality::ALL.map(|m| {
        let c = m.index();
        Volume3D::from_fn(d, |z, y, x| {
            if !in_brain(spec, z, y, x) {
                return 0.0;
            }
            let ax = dx2(spec, x).unsigned_abs();
            let radial = ax as f32 / d.width as f32;
            let texture = hash_unit(spec.seed, [c as u64, z as u64, y as u64, ax]);
            spec.gain[c] * (TISSUE[c] + 0.3 * radial + 0.1 * (z as f32 * 0.7).sin()) + spec.noise * texture
        })
    });
    let fields = Modality::ALL.map(|m| {
        let row = CONTRAST[m.index()];
        let data = labels
            .iter()
            .map(|&l| match l {
                1 => row[0],
                4 => row[1],
                2 => row[2],
                _ => 0.0,
            })
            .collect();
        Volume3D::new(d, data).expect("finite contrasts")
    });
    let [a, b, c, e] = healthy;
    let image = MultiModalVolume::full(a, b, c, e).expect("same dims");
    (image, fields, LabelVolume::new(d, labels).expect("valid labels"))
}

/// Healthy tissue plus tumor contrast.
pub fn generate(spec: &PhantomSpec) -> (MultiModalVolume, LabelVolume) {
    let (healthy, fields, labels) = generate_parts(spec);
    let mut i = 0;
    let image = healthy
        .map_present(|_, v| {
            let f = &fields[i];
            i += 1;
            v.zip_map(f, |a, b| a + b)
        })
        .expect("same dims");
    (image, labels)
}

/// A random tumor fully on one side of the midplane and inside the brain.
pub fn random_tumor<R: Rng + ?Sized>(dims: Dims, shift: i32, rng: &mut R) -> TumorSpec {
    let scale = dims.width.min(dims.height).min(dims.depth) as f32;
    let r_ed = scale * rng.random_range(0.13..0.2);
    let r_et = r_ed * rng.random_range(0.55..0.7);
    let r_ncr = r_et * rng.random_range(0.4..0.6);
    let mid = (dims.width as f32 - 1.0) / 2.0 + shift as f32;
    let off = r_ed + 1.0 + rng.random_range(0.0..scale * 0.08);
    let x = if rng.random_bool(0.5) { mid - off } else { mid + off };
    let jitter = |n: usize, rng: &mut R| (n as f32 / 2.0 + rng.random_range(-0.1..0.1) * n as f32) as usize;
    TumorSpec {
        center: [jitter(dims.depth, rng), jitter(dims.height, rng), x.round().max(0.0) as usize],
        r_ncr,
        r_et,
        r_ed,
    }
}

/// `n` tumor-bearing samples with per-sample tissue gains and tumor placement.
pub fn cohort(n: usize, dims: Dims, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let gain = [0; 4].map(|_| rng.random_range(0.85f32..1.15));
            let spec = PhantomSpec {
                dims,
                shift: 0,
                noise: 0.15,
                gain,
                tumor: Some(random_tumor(dims, 0, &mut rng)),
                seed: rng.random(),
            };
            let (image, labels) = generate(&spec);
            Sample::new(format!("case_{i:03}"), image, labels).expect("consistent phantom")
        })
        .collect()
}

/// Normalizes every sample in place.
pub fn normalize_all(samples: &mut [Sample]) -> Result<()> {
    for s in samples {
        s.image = crate::volume::normalize_sample(&s.image)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symmetry::{vflip, MirrorSpec};
    use crate::volume::Axis;

    #[test]
    fn healthy_phantom_is_mirror_symmetric() {
        for (w, shift) in [(16, 0), (17, 0), (20, 2), (20, -3)] {
            let spec = PhantomSpec {
                shift,
                ..PhantomSpec::healthy(Dims::new(6, 8, w))
            };
            let (img, labels) = generate(&spec);
            assert!(labels.data().iter().all(|&l| l == 0));
            let m = MirrorSpec::new(Axis::Width, 2 * shift);
            let d = spec.dims;
            for (_, v) in img.present() {
                let f = vflip(v, m);
                for i in 0..d.len() {
                    let (z, y, x) = d.coords(i);
                    let src = d.width as i64 - 1 - x as i64 + 2 * shift as i64;
                    if (0..d.width as i64).contains(&src) {
                        assert!(f.get(z, y, x) == v.get(z, y, x), "w={w} shift={shift} at {z},{y},{x}");
                    }
                }
            }
        }
    }

    #[test]
    fn tumor_support_is_disjoint_from_mirror() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Dims::cube(24);
        for _ in 0..20 {
            let t = random_tumor(d, 0, &mut rng);
            let spec = PhantomSpec {
                tumor: Some(t),
                ..PhantomSpec::healthy(d)
            };
            let (_, labels) = generate(&spec);
            let count = labels.data().iter().filter(|&&l| l != 0).count();
            assert!(count > 0);
            for i in 0..d.len() {
                let (z, y, x) = d.coords(i);
                if labels.data()[i] != 0 {
                    assert_eq!(labels.get(z, y, d.width - 1 - x), 0);
                }
            }
        }
    }

    #[test]
    fn cohort_is_deterministic() {
        let a = cohort(3, Dims::cube(12), 9);
        let b = cohort(3, Dims::cube(12), 9);
        assert_eq!(a, b);
        assert_ne!(a[0].image, a[1].image);
    }
}
