//! Tumor transplantation, ground-truth fusion, and the mixup baseline.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::aem::{asymmetry_map, extract_tumor, TumorIntensity};
use crate::error::{Error, Result};
use crate::symmetry::{calibrate_mask, MirrorSpec, DEFAULT_RADIUS};
use crate::volume::{
    ensure_dims, fit_labels_to_dims, fit_to_dims, is_valid_label, support_mask, Axis, BrainMask, Dims, LabelVolume,
    MultiModalVolume, Sample, Volume3D,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub host: String,
    pub donor: String,
    pub seed: u64,
    pub mirror: Option<MirrorSpec>,
    pub method: SynthMethod,
    /// Mixup weight of the host image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixup_lambda: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMethod {
    Transplant,
    Mixup,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: MultiModalVolume,
    pub labels: LabelVolume,
    pub provenance: Provenance,
}

impl SyntheticSample {
    pub fn into_sample(self, id: impl Into<String>) -> Sample {
        Sample {
            id: id.into(),
            image: self.image,
            labels: self.labels,
        }
    }
}

/// Whole tumor, tumor core and enhancing tumor masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: BrainMask,
    pub tc: BrainMask,
    pub et: BrainMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Mirror calibration search radius in voxels.
    pub radius: usize,
    pub axis: Axis,
    /// Zero the tumor field outside the host brain before adding it.
    pub mask_to_brain: bool,
    /// Reserved: random relocation of the donor tumor. Must stay 0.
    pub max_translation: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            radius: DEFAULT_RADIUS,
            axis: Axis::Width,
            mask_to_brain: false,
            max_translation: 0,
        }
    }
}

/// `X_A + T` per host modality. Donor modalities missing from `t` add nothing.
pub fn transplant(host: &MultiModalVolume, t: &TumorIntensity) -> Result<MultiModalVolume> {
    transplant_with(host, t, false)
}

pub fn transplant_with(host: &MultiModalVolume, t: &TumorIntensity, mask_to_brain: bool) -> Result<MultiModalVolume> {
    if let Some(d) = t.dims() {
        ensure_dims(host.dims(), d)?;
    }
    let brain = mask_to_brain.then(|| support_mask(host));
    // a zero field leaves the host voxel untouched, including its sign bit
    let add = |a: f32, b: f32| if b == 0.0 { a } else { a + b };
    host.map_present(|m, v| {
        let Some(field) = t.get(m) else {
            return Ok(v.clone());
        };
        let data = match &brain {
            None => v.data().iter().zip(field.data()).map(|(&a, &b)| add(a, b)).collect(),
            Some(brain) => v
                .data()
                .iter()
                .zip(field.data())
                .zip(brain.data())
                .map(|((&a, &b), &inside)| if inside { add(a, b) } else { a })
                .collect(),
        };
        Ok(Volume3D::from_raw(v.dims(), v.spacing, data))
    })
}

/// Rank used when overlapping tumor labels collide: ET > NCR/NET > ED.
fn rank(label: u8) -> u8 {
    match label {
        4 => 3,
        1 => 2,
        2 => 1,
        _ => 0,
    }
}

/// Fuses a host label `a` with a donor label `b`.
pub fn fuse_label_voxel(a: u8, b: u8) -> Result<u8> {
    for v in [a, b] {
        if !is_valid_label(v) {
            return Err(Error::InvalidLabel(v));
        }
    }
    Ok(fuse_unchecked(a, b))
}

#[inline]
fn fuse_unchecked(a: u8, b: u8) -> u8 {
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}

pub fn fuse_labels(y_a: &LabelVolume, y_b: &LabelVolume) -> Result<LabelVolume> {
    ensure_dims(y_a.dims(), y_b.dims())?;
    let data = y_a
        .data()
        .iter()
        .zip(y_b.data())
        .map(|(&a, &b)| fuse_unchecked(a, b))
        .collect();
    Ok(LabelVolume::from_raw(y_a.dims(), data))
}

pub fn region_masks(y: &LabelVolume) -> RegionMasks {
    let make = |pred: fn(u8) -> bool| BrainMask::from_raw(y.dims(), y.data().iter().map(|&v| pred(v)).collect());
    RegionMasks {
        wt: make(|v| matches!(v, 1 | 2 | 4)),
        tc: make(|v| matches!(v, 1 | 4)),
        et: make(|v| v == 4),
    }
}

fn conform(donor: &Sample, dims: Dims) -> (MultiModalVolume, LabelVolume) {
    if donor.dims() == dims {
        return (donor.image.clone(), donor.labels.clone());
    }
    let image = donor
        .image
        .map_present(|_, v| Ok(fit_to_dims(v, dims)))
        .expect("fit preserves modality set");
    (image, fit_labels_to_dims(&donor.labels, dims))
}

/// Grows the donor's tumor on the host anatomy.
///
/// Both samples are expected to be z-scored already. The donor is calibrated,
/// its asymmetry map masked by its own labels gives the tumor field, which is
/// added in place to the host. Labels are fused host-first.
pub fn synthesize<R: Rng + ?Sized>(host: &Sample, donor: &Sample, cfg: &SynthConfig, seed: u64, _rng: &mut R) -> Result<SyntheticSample> {
    if cfg.max_translation != 0 {
        return Err(Error::InvalidConfig(
            "tumor relocation is not supported; max_translation must be 0".into(),
        ));
    }
    let dims = host.dims();
    let (donor_image, donor_labels) = conform(donor, dims);
    let calibration = calibrate_mask(&support_mask(&donor_image), cfg.axis, cfg.radius)?;
    let spec = calibration.spec;
    let aem = asymmetry_map(&donor_image, spec);
    let tumor = extract_tumor(&aem, &donor_labels)?;
    let image = transplant_with(&host.image, &tumor, cfg.mask_to_brain)?;
    let labels = fuse_labels(&host.labels, &donor_labels)?;
    Ok(SyntheticSample {
        image,
        labels,
        provenance: Provenance {
            host: host.id.clone(),
            donor: donor.id.clone(),
            seed,
            mirror: Some(spec),
            method: SynthMethod::Transplant,
            mixup_lambda: None,
        },
    })
}

/// Mixup with an explicit host weight `lambda`.
pub fn mixup_with_lambda(a: &Sample, b: &Sample, lambda: f64, seed: u64) -> Result<SyntheticSample> {
    ensure_dims(a.dims(), b.dims())?;
    let l = lambda as f32;
    let image = a.image.map_present(|m, va| {
        let Some(vb) = b.image.get(m) else {
            return Ok(va.clone());
        };
        va.zip_map(vb, |x, y| {
            // exact at the endpoints
            if lambda == 1.0 {
                x
            } else if lambda == 0.0 {
                y
            } else {
                (l * x + (1.0 - l) * y).clamp(x.min(y), x.max(y))
            }
        })
    })?;
    let labels = if lambda >= 0.5 { a.labels.clone() } else { b.labels.clone() };
    Ok(SyntheticSample {
        image,
        labels,
        provenance: Provenance {
            host: a.id.clone(),
            donor: b.id.clone(),
            seed,
            mirror: None,
            method: SynthMethod::Mixup,
            mixup_lambda: Some(lambda),
        },
    })
}

/// Mixup with `lambda ~ Beta(alpha, alpha)`; labels follow the dominant input.
pub fn mixup_synthesize<R: Rng + ?Sized>(a: &Sample, b: &Sample, alpha: f64, seed: u64, rng: &mut R) -> Result<SyntheticSample> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidConfig(format!("mixup alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng);
    mixup_with_lambda(a, b, lambda, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Modality, LABEL_VOCABULARY};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(d: Dims, f: impl Fn(usize) -> f32) -> Volume3D {
        Volume3D::new(d, (0..d.len()).map(f).collect()).unwrap()
    }

    fn mm(v: Volume3D) -> MultiModalVolume {
        MultiModalVolume::full(v.clone(), v.clone(), v.clone(), v).unwrap()
    }

    #[test]
    fn transplant_identities() {
        let d = Dims::new(2, 3, 4);
        let host = mm(vol(d, |i| i as f32 * 0.3 - 1.0));
        assert_eq!(transplant(&host, &TumorIntensity::zeros(d)).unwrap(), host);

        let t = TumorIntensity {
            fields: [(); 4].map(|_| Some(vol(d, |i| (i % 5) as f32))),
        };
        let zero_host = mm(Volume3D::zeros(d));
        let out = transplant(&zero_host, &t).unwrap();
        for (m, v) in out.present() {
            assert_eq!(v, t.get(m).unwrap());
        }

        let h1 = mm(vol(d, |_| 1.0));
        let t1 = TumorIntensity {
            fields: [(); 4].map(|_| Some(vol(d, |_| 2.5))),
        };
        let out = transplant(&h1, &t1).unwrap();
        assert_eq!(out.get(Modality::T1).unwrap().get(1, 1, 1), 3.5);
        assert!(matches!(
            transplant(&h1, &TumorIntensity::zeros(Dims::cube(2))),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn mask_to_brain_restricts_addition() {
        let d = Dims::new(1, 1, 4);
        let host = mm(vol(d, |i| if i < 2 { 1.0 } else { 0.0 }));
        let t = TumorIntensity {
            fields: [(); 4].map(|_| Some(vol(d, |_| 1.0))),
        };
        let out = transplant_with(&host, &t, true).unwrap();
        assert_eq!(out.get(Modality::Flair).unwrap().data(), &[2.0, 2.0, 0.0, 0.0]);
        let out = transplant_with(&host, &t, false).unwrap();
        assert_eq!(out.get(Modality::Flair).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn fusion_pairs() {
        assert_eq!(fuse_label_voxel(2, 4).unwrap(), 4);
        assert_eq!(fuse_label_voxel(2, 1).unwrap(), 1);
        assert_eq!(fuse_label_voxel(1, 4).unwrap(), 4);
        for x in LABEL_VOCABULARY {
            assert_eq!(fuse_label_voxel(x, 0).unwrap(), x);
            assert_eq!(fuse_label_voxel(0, x).unwrap(), x);
            assert_eq!(fuse_label_voxel(x, x).unwrap(), x);
        }
        assert!(matches!(fuse_label_voxel(3, 0), Err(Error::InvalidLabel(3))));
    }

    #[test]
    fn region_mask_counts() {
        let y = LabelVolume::new(Dims::new(1, 1, 5), vec![0, 1, 2, 4, 0]).unwrap();
        let r = region_masks(&y);
        assert_eq!((r.wt.count(), r.tc.count(), r.et.count()), (3, 2, 1));
        let r = region_masks(&LabelVolume::zeros(Dims::cube(2)));
        assert!(r.wt.is_empty() && r.tc.is_empty() && r.et.is_empty());
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let d = Dims::new(1, 1, 3);
        let a = Sample::new("a", mm(vol(d, |_| 2.0)), LabelVolume::new(d, vec![1, 0, 0]).unwrap()).unwrap();
        let b = Sample::new("b", mm(vol(d, |_| 4.0)), LabelVolume::new(d, vec![0, 0, 4]).unwrap()).unwrap();
        let one = mixup_with_lambda(&a, &b, 1.0, 0).unwrap();
        assert_eq!((one.image, one.labels), (a.image.clone(), a.labels.clone()));
        let half = mixup_with_lambda(&a, &b, 0.5, 0).unwrap();
        assert_eq!(half.image.get(Modality::T2).unwrap().data(), &[3.0; 3]);
        assert_eq!(half.labels, a.labels);
        let low = mixup_with_lambda(&a, &b, 0.2, 0).unwrap();
        assert_eq!(low.labels, b.labels);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = mixup_synthesize(&a, &b, 0.4, 5, &mut rng).unwrap();
            for v in s.image.get(Modality::Flair).unwrap().data() {
                assert!((2.0..=4.0).contains(v));
            }
        }
        assert!(mixup_synthesize(&a, &b, -1.0, 0, &mut rng).is_err());
    }

    fn labels_strategy(n: usize) -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(prop::sample::select(LABEL_VOCABULARY.to_vec()), n)
    }

    proptest! {
        #[test]
        fn fused_labels_conserve_support_and_nest(a in labels_strategy(64), b in labels_strategy(64)) {
            let d = Dims::new(4, 4, 4);
            let ya = LabelVolume::new(d, a).unwrap();
            let yb = LabelVolume::new(d, b).unwrap();
            let f = fuse_labels(&ya, &yb).unwrap();
            for i in 0..d.len() {
                let (x, y, z) = (ya.data()[i], yb.data()[i], f.data()[i]);
                prop_assert_eq!(z != 0, x != 0 || y != 0);
            }
            let r = region_masks(&f);
            prop_assert!(r.et.is_subset_of(&r.tc));
            prop_assert!(r.tc.is_subset_of(&r.wt));
        }

        #[test]
        fn transplant_is_linear(a in proptest::collection::vec(-4.0f32..4.0, 27),
                                b in proptest::collection::vec(-4.0f32..4.0, 27)) {
            // values on a 1/8 grid keep every float sum exact
            let q = |v: f32| (v * 8.0).round() / 8.0;
            let d = Dims::cube(3);
            let host = mm(vol(d, |i| i as f32 * 0.5));
            let t1 = TumorIntensity { fields: [(); 4].map(|_| Some(vol(d, |i| q(a[i])))) };
            let t2 = TumorIntensity { fields: [(); 4].map(|_| Some(vol(d, |i| q(b[i])))) };
            let sum = TumorIntensity { fields: [(); 4].map(|_| Some(vol(d, |i| q(a[i]) + q(b[i])))) };
            let once = transplant(&host, &sum).unwrap();
            let twice = transplant(&transplant(&host, &t1).unwrap(), &t2).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
