//! Left-right mirroring and mirror calibration.
//!
//! The mirror of a volume along an axis of length `L` with integer offset `t`
//! is `out[x] = in[L - 1 - x + t]`, zero-filled where that index leaves the
//! volume. Calibration picks the offset whose mirrored brain outline best
//! overlaps the original outline.
//!
//! A mirror-symmetric phantom translated by `s` voxels along the mirror axis is
//! re-aligned by offset `t = 2s`; [`MirrorSpec::midplane_shift`] reports `t / 2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{support_mask, Axis, BrainMask, Dims, MultiModalVolume, Volume3D};

pub const DEFAULT_RADIUS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MirrorSpec {
    pub axis: Axis,
    pub offset: i32,
}

impl MirrorSpec {
    pub fn new(axis: Axis, offset: i32) -> Self {
        MirrorSpec { axis, offset }
    }

    /// Displacement of the symmetry plane from the volume center, in voxels.
    pub fn midplane_shift(&self) -> f64 {
        self.offset as f64 / 2.0
    }
}

/// Lines of voxels running along `axis`: (start indices, stride, length).
fn lines(dims: Dims, axis: Axis) -> (Vec<usize>, usize, usize) {
    let mut starts = Vec::new();
    match axis {
        Axis::Width => {
            for z in 0..dims.depth {
                for y in 0..dims.height {
                    starts.push(dims.index(z, y, 0));
                }
            }
            (starts, 1, dims.width)
        }
        Axis::Height => {
            for z in 0..dims.depth {
                for x in 0..dims.width {
                    starts.push(dims.index(z, 0, x));
                }
            }
            (starts, dims.width, dims.height)
        }
        Axis::Depth => {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    starts.push(dims.index(0, y, x));
                }
            }
            (starts, dims.width * dims.height, dims.depth)
        }
    }
}

#[inline]
fn mirror_index(len: usize, x: usize, offset: i32) -> Option<usize> {
    let s = len as i64 - 1 - x as i64 + offset as i64;
    (0..len as i64).contains(&s).then_some(s as usize)
}

fn mirror_gather<T: Copy>(data: &[T], dims: Dims, spec: MirrorSpec, zero: T) -> Vec<T> {
    let (starts, stride, len) = lines(dims, spec.axis);
    let mut out = vec![zero; data.len()];
    for start in starts {
        for x in 0..len {
            if let Some(s) = mirror_index(len, x, spec.offset) {
                out[start + x * stride] = data[start + s * stride];
            }
        }
    }
    out
}

/// Mirrors a volume along `spec.axis`, shifted by `spec.offset`.
pub fn vflip(vol: &Volume3D, spec: MirrorSpec) -> Volume3D {
    Volume3D::from_raw(vol.dims(), vol.spacing, mirror_gather(vol.data(), vol.dims(), spec, 0.0))
}

pub fn vflip_mask(mask: &BrainMask, spec: MirrorSpec) -> BrainMask {
    BrainMask::from_raw(mask.dims(), mirror_gather(mask.data(), mask.dims(), spec, false))
}

/// Mask voxels with at least one false 6-neighbour. Neighbours outside the
/// volume count as false.
pub fn outline(mask: &BrainMask) -> BrainMask {
    let d = mask.dims();
    let m = mask.data();
    let mut out = vec![false; m.len()];
    for z in 0..d.depth {
        for y in 0..d.height {
            for x in 0..d.width {
                let i = d.index(z, y, x);
                if !m[i] {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < d.depth
                    && y > 0
                    && y + 1 < d.height
                    && x > 0
                    && x + 1 < d.width
                    && m[i - 1]
                    && m[i + 1]
                    && m[i - d.width]
                    && m[i + d.width]
                    && m[i - d.width * d.height]
                    && m[i + d.width * d.height];
                out[i] = !interior;
            }
        }
    }
    BrainMask::from_raw(d, out)
}

/// Result of an offset sweep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calibration {
    pub spec: MirrorSpec,
    /// `(offset, cost)` for every offset in `[-radius, radius]`, ascending.
    pub costs: Vec<(i32, usize)>,
}

impl Calibration {
    pub fn cost_at(&self, offset: i32) -> Option<usize> {
        self.costs.iter().find(|(t, _)| *t == offset).map(|&(_, c)| c)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("offset,cost\n");
        for (t, c) in &self.costs {
            s.push_str(&format!("{t},{c}\n"));
        }
        s
    }
}

/// Mask and outline copied line by line along the mirror axis, keeping only
/// lines that touch the brain.
struct LineMajor {
    len: usize,
    mask: Vec<u8>,
    edge: Vec<u8>,
}

impl LineMajor {
    fn new(mask: &BrainMask, edge: &BrainMask, axis: Axis) -> Self {
        let (starts, stride, len) = lines(mask.dims(), axis);
        let (m, e) = (mask.data(), edge.data());
        let mut out = LineMajor {
            len,
            mask: Vec::new(),
            edge: Vec::new(),
        };
        for start in starts {
            if (0..len).any(|x| m[start + x * stride]) {
                out.mask.extend((0..len).map(|x| m[start + x * stride] as u8));
                out.edge.extend((0..len).map(|x| e[start + x * stride] as u8));
            }
        }
        out
    }
}

/// `|outline(mask) XOR outline(mirror_t(mask))|` for one offset.
///
/// Uses the identity that mirroring commutes with the outline everywhere except
/// on the two end planes of the mirror axis, where the zero boundary of the
/// destination makes any mirrored brain voxel an outline voxel.
fn sweep_cost(lm: &LineMajor, offset: i32) -> usize {
    let len = lm.len as i64;
    let t = offset as i64;
    // mirror source s = len - 1 - x + t is in range for x in [lo, hi]
    let lo = t.max(0);
    let hi = (len - 1 + t).min(len - 1);
    let mut cost = 0usize;
    for (e, m) in lm.edge.chunks_exact(lm.len).zip(lm.mask.chunks_exact(lm.len)) {
        if lo > hi {
            cost += e.iter().map(|&v| v as usize).sum::<usize>();
            continue;
        }
        let (lo, hi) = (lo as usize, hi as usize);
        cost += e[..lo].iter().chain(&e[hi + 1..]).map(|&v| v as usize).sum::<usize>();
        let src = |x: usize| (len - 1 - x as i64 + t) as usize;
        let (s_hi, s_lo) = (src(lo), src(hi));
        cost += e[lo..=hi]
            .iter()
            .zip(e[s_lo..=s_hi].iter().rev())
            .map(|(&a, &b)| (a ^ b) as usize)
            .sum::<usize>();
        // end planes: a mirrored brain voxel there is always an outline voxel
        for x in [0, lm.len - 1] {
            if x >= lo && x <= hi {
                let s = src(x);
                if e[s] == 0 && m[s] == 1 {
                    cost -= (e[x] ^ e[s]) as usize;
                    cost += (e[x] ^ 1) as usize;
                }
            }
            if lm.len == 1 {
                break;
            }
        }
    }
    cost
}

/// Sweeps integer offsets in `[-radius, radius]` along `axis`. Ties go to the
/// smallest `|t|`, then to the negative offset.
pub fn calibrate_mask(mask: &BrainMask, axis: Axis, radius: usize) -> Result<Calibration> {
    if mask.is_empty() {
        return Err(Error::EmptyBrainMask);
    }
    let lm = LineMajor::new(mask, &outline(mask), axis);
    let r = radius as i32;
    let costs: Vec<(i32, usize)> = (-r..=r).into_par_iter().map(|t| (t, sweep_cost(&lm, t))).collect();
    let best = costs
        .iter()
        .min_by_key(|&&(t, c)| (c, t.abs(), t))
        .map(|&(t, _)| t)
        .expect("non-empty sweep");
    Ok(Calibration {
        spec: MirrorSpec::new(axis, best),
        costs,
    })
}

/// Calibrates the left-right mirror of a sample along the width axis. The
/// brain region is every voxel nonzero in some modality, which is the raw
/// brain mask before normalization and still the brain after it.
pub fn calibrate(vol: &MultiModalVolume, radius: usize) -> Result<MirrorSpec> {
    Ok(calibrate_mask(&support_mask(vol), Axis::Width, radius)?.spec)
}

pub fn calibrate_detailed(vol: &MultiModalVolume, axis: Axis, radius: usize) -> Result<Calibration> {
    calibrate_mask(&support_mask(vol), axis, radius)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_cost(mask: &BrainMask, spec: MirrorSpec) -> usize {
        let a = outline(mask);
        let b = outline(&vflip_mask(mask, spec));
        a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count()
    }

    fn blob(d: Dims, cx2: i64) -> BrainMask {
        // ellipsoid centered at x = cx2 / 2
        BrainMask::from_fn(d, |z, y, x| {
            let dz = (2 * z as i64 - (d.depth as i64 - 1)) as f64 / d.depth as f64;
            let dy = (2 * y as i64 - (d.height as i64 - 1)) as f64 / d.height as f64;
            let dx = (2 * x as i64 - cx2) as f64 / d.width as f64;
            dz * dz + dy * dy + 1.8 * dx * dx < 0.55 + 0.1 * dy
        })
    }

    #[test]
    fn single_voxel_mirror_index() {
        let d = Dims::new(1, 1, 10);
        let mut data = vec![0.0; 10];
        data[2] = 1.0;
        let v = Volume3D::new(d, data).unwrap();
        let f = vflip(&v, MirrorSpec::default());
        assert_eq!(f.data().iter().position(|&x| x == 1.0), Some(7));
        assert_eq!(vflip(&f, MirrorSpec::default()), v);
    }

    #[test]
    fn offset_shifts_and_zero_fills() {
        let d = Dims::new(1, 1, 5);
        let v = Volume3D::new(d, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let f = vflip(&v, MirrorSpec::new(Axis::Width, 1));
        // out[x] = in[5 - x]
        assert_eq!(f.data(), &[0.0, 5.0, 4.0, 3.0, 2.0]);
        let g = vflip(&v, MirrorSpec::new(Axis::Width, -2));
        assert_eq!(g.data(), &[3.0, 2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn other_axes() {
        let d = Dims::new(2, 3, 1);
        let v = Volume3D::from_fn(d, |z, y, _| (z * 10 + y) as f32);
        let h = vflip(&v, MirrorSpec::new(Axis::Height, 0));
        assert_eq!(h.get(1, 0, 0), 12.0);
        let z = vflip(&v, MirrorSpec::new(Axis::Depth, 0));
        assert_eq!(z.get(0, 2, 0), 12.0);
    }

    #[test]
    fn outline_cases() {
        assert!(outline(&BrainMask::empty(Dims::cube(4))).is_empty());
        let d = Dims::cube(5);
        let single = BrainMask::from_fn(d, |z, y, x| (z, y, x) == (2, 2, 2));
        assert_eq!(outline(&single), single);
        let block = BrainMask::from_fn(d, |z, y, x| (1..4).contains(&z) && (1..4).contains(&y) && (1..4).contains(&x));
        let o = outline(&block);
        assert_eq!(o.count(), 26);
        assert!(!o.get(2, 2, 2));
        let full3 = BrainMask::new(Dims::cube(3), vec![true; 27]).unwrap();
        assert_eq!(outline(&full3).count(), 26);
    }

    #[test]
    fn fast_cost_matches_definition() {
        for (d, cx2) in [(Dims::new(6, 7, 15), 14), (Dims::new(5, 6, 12), 9), (Dims::new(4, 9, 9), 11)] {
            let mask = blob(d, cx2);
            for axis in Axis::ALL {
                let cal = calibrate_mask(&mask, axis, 6).unwrap();
                for &(t, c) in &cal.costs {
                    assert_eq!(c, reference_cost(&mask, MirrorSpec::new(axis, t)), "{d} {axis:?} t={t}");
                }
            }
        }
        // a brain that touches the volume border
        let d = Dims::new(3, 4, 8);
        let touching = BrainMask::from_fn(d, |z, y, x| x < 5 + (z + y) % 2);
        let cal = calibrate_mask(&touching, Axis::Width, 5).unwrap();
        for &(t, c) in &cal.costs {
            assert_eq!(c, reference_cost(&touching, MirrorSpec::new(Axis::Width, t)));
        }
    }

    #[test]
    fn symmetric_and_shifted_phantoms() {
        let d = Dims::new(8, 10, 24);
        let sym = blob(d, 23);
        let cal = calibrate_mask(&sym, Axis::Width, 10).unwrap();
        assert_eq!(cal.spec.offset, 0);
        assert_eq!(cal.cost_at(0), Some(0));
        for s in [-3i64, 2, 3] {
            let shifted = blob(d, 23 + 2 * s);
            let cal = calibrate_mask(&shifted, Axis::Width, 10).unwrap();
            assert_eq!(cal.spec.offset as i64, 2 * s);
            assert_eq!(cal.cost_at(cal.spec.offset), Some(0));
            assert_eq!(cal.spec.midplane_shift(), s as f64);
        }
    }

    #[test]
    fn radius_zero_and_empty_mask() {
        let d = Dims::new(4, 4, 9);
        let m = blob(d, 5);
        assert_eq!(calibrate_mask(&m, Axis::Width, 0).unwrap().spec.offset, 0);
        assert!(matches!(
            calibrate_mask(&BrainMask::empty(d), Axis::Width, 3),
            Err(Error::EmptyBrainMask)
        ));
    }

    #[test]
    fn small_masks_pick_exact_offset() {
        // a single voxel line: every offset that keeps the voxel in range costs 0
        let d = Dims::new(1, 1, 7);
        let m = BrainMask::from_fn(d, |_, _, x| x == 3);
        let cal = calibrate_mask(&m, Axis::Width, 2).unwrap();
        assert_eq!(cal.spec.offset, 0);
        let m = BrainMask::from_fn(d, |_, _, x| x == 2 || x == 3);
        // symmetric pairs around 2.5 => offset -1 gives cost 0
        let cal = calibrate_mask(&m, Axis::Width, 3).unwrap();
        assert_eq!(cal.spec.offset, -1);
    }
}
