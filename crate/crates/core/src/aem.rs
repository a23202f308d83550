//! Asymmetry error maps and additive tumor intensity fields.
//!
//! For a sample `X` with labels `Y` and calibrated mirror `m`:
//!
//! ```text
//! D = |X - m(X)|            per modality
//! T = D * binarize(Y)       voxelwise
//! ```

use crate::error::Result;
use crate::symmetry::{vflip, MirrorSpec};
use crate::volume::{ensure_dims, BrainMask, Dims, LabelVolume, Modality, MultiModalVolume, Volume3D};

/// Nonnegative per-modality asymmetry maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AsymmetryMap {
    pub maps: [Option<Volume3D>; 4],
}

/// Per-modality additive tumor intensity, zero outside the tumor mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TumorIntensity {
    pub fields: [Option<Volume3D>; 4],
}

impl AsymmetryMap {
    pub fn get(&self, m: Modality) -> Option<&Volume3D> {
        self.maps[m.index()].as_ref()
    }

    pub fn present(&self) -> impl Iterator<Item = (Modality, &Volume3D)> {
        Modality::ALL
            .into_iter()
            .filter_map(move |m| self.get(m).map(|v| (m, v)))
    }
}

impl TumorIntensity {
    pub fn get(&self, m: Modality) -> Option<&Volume3D> {
        self.fields[m.index()].as_ref()
    }

    pub fn present(&self) -> impl Iterator<Item = (Modality, &Volume3D)> {
        Modality::ALL
            .into_iter()
            .filter_map(move |m| self.get(m).map(|v| (m, v)))
    }

    pub fn zeros(dims: Dims) -> Self {
        TumorIntensity {
            fields: [(); 4].map(|_| Some(Volume3D::zeros(dims))),
        }
    }

    pub fn dims(&self) -> Option<Dims> {
        self.fields.iter().flatten().next().map(|v| v.dims())
    }
}

pub fn asymmetry_map(x: &MultiModalVolume, spec: MirrorSpec) -> AsymmetryMap {
    let mut maps: [Option<Volume3D>; 4] = Default::default();
    for (m, v) in x.present() {
        let mirrored = vflip(v, spec);
        maps[m.index()] = Some(
            v.zip_map(&mirrored, |a, b| (a - b).abs())
                .expect("mirror preserves dims"),
        );
    }
    AsymmetryMap { maps }
}

/// True exactly where the label is nonzero.
pub fn binarize(y: &LabelVolume) -> BrainMask {
    BrainMask::from_raw(y.dims(), y.data().iter().map(|&v| v != 0).collect())
}

pub fn extract_tumor(d: &AsymmetryMap, y: &LabelVolume) -> Result<TumorIntensity> {
    let mask = binarize(y);
    let mut fields: [Option<Volume3D>; 4] = Default::default();
    for (m, map) in d.present() {
        ensure_dims(map.dims(), y.dims())?;
        fields[m.index()] = Some(Volume3D::from_raw(
            map.dims(),
            map.spacing,
            map.data()
                .iter()
                .zip(mask.data())
                .map(|(&v, &keep)| if keep { v } else { 0.0 })
                .collect(),
        ));
    }
    Ok(TumorIntensity { fields })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn symmetric(d: Dims) -> Volume3D {
        Volume3D::from_fn(d, |z, y, x| {
            let dx = (2 * x as i64 - (d.width as i64 - 1)).abs() as f32;
            (z + 2 * y) as f32 + dx * 0.25
        })
    }

    #[test]
    fn symmetric_volume_gives_zero_map() {
        let d = Dims::new(3, 4, 9);
        let x = MultiModalVolume::new([Some(symmetric(d)), None, Some(symmetric(d)), None]).unwrap();
        let map = asymmetry_map(&x, MirrorSpec::default());
        assert!(map.present().all(|(_, v)| v.data().iter().all(|&a| a == 0.0)));
        assert_eq!(map.present().count(), 2);
    }

    #[test]
    fn single_asymmetric_voxel() {
        let d = Dims::new(2, 2, 6);
        let mut data = symmetric(d).into_data();
        // p = (1, 0, 1); its mirror is x = 4
        let p = d.index(1, 0, 1);
        let q = d.index(1, 0, 4);
        data[p] = 0.0;
        data[q] = 0.0;
        data[p] = 3.5;
        let x = MultiModalVolume::new([Some(Volume3D::new(d, data).unwrap()), None, None, None]).unwrap();
        let map = asymmetry_map(&x, MirrorSpec::default());
        let m = map.get(Modality::Flair).unwrap();
        for (i, &v) in m.data().iter().enumerate() {
            let want = if i == p || i == q { 3.5 } else { 0.0 };
            assert_eq!(v, want, "voxel {i}");
        }
        let neg = MultiModalVolume::new([Some(x.get(Modality::Flair).unwrap().map(|v| -v)), None, None, None]).unwrap();
        assert_eq!(asymmetry_map(&neg, MirrorSpec::default()), map);
    }

    #[test]
    fn binarize_counts() {
        let d = Dims::new(1, 2, 4);
        let y = LabelVolume::new(d, vec![0, 1, 2, 4, 0, 0, 4, 1]).unwrap();
        let b = binarize(&y);
        assert_eq!(b.count(), y.data().iter().filter(|&&v| v != 0).count());
        assert_eq!(b.data(), &[false, true, true, true, false, false, true, true]);
        assert!(binarize(&LabelVolume::zeros(d)).is_empty());
    }

    #[test]
    fn extract_masks_the_map() {
        let d = Dims::new(1, 2, 5);
        let map = AsymmetryMap {
            maps: [Some(Volume3D::new(d, vec![2.0; 10]).unwrap()), None, None, None],
        };
        let tumor: Vec<u8> = (0..10).map(|i| if i % 2 == 0 { 2 } else { 0 }).collect();
        let t = extract_tumor(&map, &LabelVolume::new(d, tumor.clone()).unwrap()).unwrap();
        let f = t.get(Modality::Flair).unwrap();
        for (v, l) in f.data().iter().zip(&tumor) {
            assert_eq!(*v, if *l != 0 { 2.0 } else { 0.0 });
        }
        let empty = extract_tumor(&map, &LabelVolume::zeros(d)).unwrap();
        assert!(empty.get(Modality::Flair).unwrap().data().iter().all(|&v| v == 0.0));
        let full = extract_tumor(&map, &LabelVolume::new(d, vec![4; 10]).unwrap()).unwrap();
        assert_eq!(full.get(Modality::Flair), map.get(Modality::Flair));
        assert!(matches!(
            extract_tumor(&map, &LabelVolume::zeros(Dims::cube(2))),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
