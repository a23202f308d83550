//! Volumetric containers and the preprocessing chain applied before synthesis
//! and training: brain masking, z-scoring, random cropping and augmentation.
//!
//! Voxel data is linearized with x (width) fastest, then y (height), then z
//! (depth). All containers are immutable values; every operation returns a new
//! volume.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Dims {
            depth,
            height,
            width,
        }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.width;
        let y = (idx / self.width) % self.height;
        let z = idx / (self.width * self.height);
        (z, y, x)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::Depth => self.depth,
            Axis::Height => self.height,
            Axis::Width => self.width,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "dims must be >= 1 along every axis, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

/// A voxel axis. `Width` is the left-right axis of axially stored scans.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Depth,
    Height,
    #[default]
    Width,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Depth, Axis::Height, Axis::Width];
}

/// The four MRI sequences, in slot order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Flair,
    T1ce,
    T1,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1ce, Modality::T1, Modality::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Modality::ALL.get(i).copied()
    }

    /// File stem used by the on-disk sample layout.
    pub fn stem(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1ce => "t1ce",
            Modality::T1 => "t1",
            Modality::T2 => "t2",
        }
    }

    /// Short name used in report tables.
    pub fn short(self) -> &'static str {
        match self {
            Modality::Flair => "F",
            Modality::T1ce => "T1ce",
            Modality::T1 => "T1",
            Modality::T2 => "T2",
        }
    }
}

/// Scalar 32-bit float volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    /// (dz, dy, dx) in millimeters; informational only.
    pub spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "data length {} does not match dims {dims} ({} voxels)",
                data.len(),
                dims.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteVoxel(i));
        }
        Ok(Volume3D {
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume3D {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.depth {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume3D {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub(crate) fn from_raw(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Volume3D {
            dims,
            spacing,
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume3D {
        Volume3D::from_raw(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Volume3D, f: impl Fn(f32, f32) -> f32) -> Result<Volume3D> {
        ensure_dims(self.dims, other.dims)?;
        Ok(Volume3D::from_raw(
            self.dims,
            self.spacing,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }
}

/// Per-voxel boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrainMask {
    dims: Dims,
    data: Vec<bool>,
}

impl BrainMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask length {} does not match dims {dims}",
                data.len()
            )));
        }
        Ok(BrainMask { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        BrainMask {
            dims,
            data: vec![false; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.depth {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    data.push(f(z, y, x));
                }
            }
        }
        BrainMask { dims, data }
    }

    pub(crate) fn from_raw(dims: Dims, data: Vec<bool>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        BrainMask { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Voxelwise implication `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BrainMask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Tumor label vocabulary: background, NCR/NET, edema, enhancing tumor.
pub const LABEL_VOCABULARY: [u8; 4] = [0, 1, 2, 4];

pub fn is_valid_label(v: u8) -> bool {
    matches!(v, 0 | 1 | 2 | 4)
}

/// Per-voxel tumor labels restricted to {0, 1, 2, 4}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "label length {} does not match dims {dims}",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| !is_valid_label(v)) {
            return Err(Error::LabelOutOfVocabulary(bad as f64));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        LabelVolume {
            dims,
            data: vec![0; dims.len()],
        }
    }

    pub(crate) fn from_raw(dims: Dims, data: Vec<u8>) -> Self {
        debug_assert!(data.iter().all(|&v| is_valid_label(v)));
        LabelVolume { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Voxel counts for labels 0, 1, 2, 4 in that order.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0usize; 4];
        for &v in &self.data {
            h[label_class(v)] += 1;
        }
        h
    }
}

/// Class index 0..4 for a label in {0, 1, 2, 4}.
#[inline]
pub fn label_class(label: u8) -> usize {
    match label {
        0 => 0,
        1 => 1,
        2 => 2,
        4 => 3,
        other => panic!("label {other} outside vocabulary"),
    }
}

/// Inverse of [`label_class`].
#[inline]
pub fn class_label(class: usize) -> u8 {
    LABEL_VOCABULARY[class]
}

/// Four co-registered modality slots, ordered [FLAIR, T1ce, T1, T2].
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    slots: [Option<Volume3D>; 4],
}

impl MultiModalVolume {
    pub fn new(slots: [Option<Volume3D>; 4]) -> Result<Self> {
        let mut dims: Option<Dims> = None;
        for v in slots.iter().flatten() {
            match dims {
                None => dims = Some(v.dims()),
                Some(d) => ensure_dims(d, v.dims())?,
            }
        }
        if dims.is_none() {
            return Err(Error::NoModalities);
        }
        Ok(MultiModalVolume { slots })
    }

    pub fn full(flair: Volume3D, t1ce: Volume3D, t1: Volume3D, t2: Volume3D) -> Result<Self> {
        MultiModalVolume::new([Some(flair), Some(t1ce), Some(t1), Some(t2)])
    }

    pub fn dims(&self) -> Dims {
        self.slots
            .iter()
            .flatten()
            .next()
            .map(|v| v.dims())
            .expect("at least one modality present")
    }

    pub fn availability(&self) -> [bool; 4] {
        [0, 1, 2, 3].map(|i| self.slots[i].is_some())
    }

    pub fn available_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn get(&self, m: Modality) -> Option<&Volume3D> {
        self.slots[m.index()].as_ref()
    }

    pub fn slots(&self) -> &[Option<Volume3D>; 4] {
        &self.slots
    }

    pub fn into_slots(self) -> [Option<Volume3D>; 4] {
        self.slots
    }

    pub fn present(&self) -> impl Iterator<Item = (Modality, &Volume3D)> {
        Modality::ALL
            .into_iter()
            .filter_map(move |m| self.get(m).map(|v| (m, v)))
    }

    /// Keeps only the modalities flagged in `keep`.
    pub fn restrict(&self, keep: [bool; 4]) -> Result<MultiModalVolume> {
        let mut slots = self.slots.clone();
        for (slot, k) in slots.iter_mut().zip(keep) {
            if !k {
                *slot = None;
            }
        }
        MultiModalVolume::new(slots)
    }

    /// Applies `f` to every present modality.
    pub fn map_present(&self, mut f: impl FnMut(Modality, &Volume3D) -> Result<Volume3D>) -> Result<Self> {
        let mut slots: [Option<Volume3D>; 4] = Default::default();
        for (m, v) in self.present() {
            slots[m.index()] = Some(f(m, v)?);
        }
        MultiModalVolume::new(slots)
    }
}

/// A labelled multi-modal sample with an identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: MultiModalVolume,
    pub labels: LabelVolume,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: MultiModalVolume, labels: LabelVolume) -> Result<Self> {
        ensure_dims(image.dims(), labels.dims())?;
        Ok(Sample {
            id: id.into(),
            image,
            labels,
        })
    }

    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }
}

pub(crate) fn ensure_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a} vs {b}")));
    }
    Ok(())
}

/// Union over present modalities of `intensity > 0`, on raw intensities.
pub fn compute_brain_mask(vol: &MultiModalVolume) -> BrainMask {
    any_voxel(vol, |v| v > 0.0)
}

/// Union over present modalities of `intensity != 0`.
///
/// On raw scans this equals [`compute_brain_mask`]. After z-scoring, brain
/// voxels may be negative while the background stays exactly zero, so this is
/// the mask used for anything that runs on normalized data.
pub fn support_mask(vol: &MultiModalVolume) -> BrainMask {
    any_voxel(vol, |v| v != 0.0)
}

fn any_voxel(vol: &MultiModalVolume, pred: impl Fn(f32) -> bool) -> BrainMask {
    let dims = vol.dims();
    let mut data = vec![false; dims.len()];
    for (_, v) in vol.present() {
        for (m, &x) in data.iter_mut().zip(v.data()) {
            *m |= pred(x);
        }
    }
    BrainMask::from_raw(dims, data)
}

/// Zero-mean, unit population-variance scaling over the masked voxels.
/// Voxels outside the mask are set to zero.
pub fn normalize_zscore(vol: &Volume3D, mask: &BrainMask) -> Result<Volume3D> {
    ensure_dims(vol.dims(), mask.dims())?;
    let n = mask.count();
    if n < 2 {
        return Err(Error::DegenerateIntensity(format!(
            "z-score needs at least 2 masked voxels, got {n}"
        )));
    }
    let masked = || vol.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&v, _)| v as f64);
    let mean = masked().sum::<f64>() / n as f64;
    let var = masked().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::DegenerateIntensity(
            "masked standard deviation is zero".into(),
        ));
    }
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m { ((v as f64 - mean) / std) as f32 } else { 0.0 })
        .collect();
    Ok(Volume3D::from_raw(vol.dims(), vol.spacing, data))
}

/// Z-scores every present modality against the raw brain mask of the sample.
pub fn normalize_sample(vol: &MultiModalVolume) -> Result<MultiModalVolume> {
    let mask = compute_brain_mask(vol);
    vol.map_present(|_, v| normalize_zscore(v, &mask))
}

/// Extracts the box starting at `corner` with size `size`.
pub fn crop_volume(vol: &Volume3D, corner: [usize; 3], size: Dims) -> Volume3D {
    Volume3D::from_raw(size, vol.spacing, crop_slice(vol.data(), vol.dims(), corner, size))
}

fn crop_slice<T: Copy>(data: &[T], src: Dims, corner: [usize; 3], size: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(size.len());
    for z in 0..size.depth {
        for y in 0..size.height {
            let start = src.index(z + corner[0], y + corner[1], corner[2]);
            out.extend_from_slice(&data[start..start + size.width]);
        }
    }
    out
}

/// Crops images and labels congruently at `corner`.
pub fn crop_at(sample: &Sample, corner: [usize; 3], size: Dims) -> Result<Sample> {
    let src = sample.dims();
    for a in 0..3 {
        if corner[a] + size.as_array()[a] > src.as_array()[a] {
            return Err(Error::SourceTooSmall {
                source_dims: src.as_array(),
                crop: size.as_array(),
            });
        }
    }
    let image = sample
        .image
        .map_present(|_, v| Ok(crop_volume(v, corner, size)))?;
    let labels = LabelVolume::from_raw(size, crop_slice(sample.labels.data(), src, corner, size));
    Ok(Sample {
        id: sample.id.clone(),
        image,
        labels,
    })
}

/// Uniformly samples a crop corner and returns the corner with the crop.
pub fn crop_random<R: Rng + ?Sized>(sample: &Sample, size: Dims, rng: &mut R) -> Result<([usize; 3], Sample)> {
    let src = sample.dims().as_array();
    let crop = size.as_array();
    if (0..3).any(|a| src[a] < crop[a]) || size.is_empty() {
        return Err(Error::SourceTooSmall {
            source_dims: src,
            crop,
        });
    }
    let corner = [0, 1, 2].map(|a| rng.random_range(0..=src[a] - crop[a]));
    Ok((corner, crop_at(sample, corner, size)?))
}

/// Center-crops and/or zero-pads a volume to `target` dims.
pub fn fit_to_dims(vol: &Volume3D, target: Dims) -> Volume3D {
    let src = vol.dims();
    let mut out = Volume3D::zeros(target).with_spacing(vol.spacing);
    let s = src.as_array();
    let t = target.as_array();
    // offset of source origin inside target (may be negative)
    let off: [isize; 3] = [0, 1, 2].map(|a| (t[a] as isize - s[a] as isize) / 2);
    for z in 0..target.depth {
        let sz = z as isize - off[0];
        if sz < 0 || sz >= s[0] as isize {
            continue;
        }
        for y in 0..target.height {
            let sy = y as isize - off[1];
            if sy < 0 || sy >= s[1] as isize {
                continue;
            }
            for x in 0..target.width {
                let sx = x as isize - off[2];
                if sx < 0 || sx >= s[2] as isize {
                    continue;
                }
                out.data[target.index(z, y, x)] = vol.get(sz as usize, sy as usize, sx as usize);
            }
        }
    }
    out
}

/// Label counterpart of [`fit_to_dims`].
pub fn fit_labels_to_dims(labels: &LabelVolume, target: Dims) -> LabelVolume {
    let as_f = Volume3D::from_raw(
        labels.dims(),
        [1.0; 3],
        labels.data().iter().map(|&v| v as f32).collect(),
    );
    let fitted = fit_to_dims(&as_f, target);
    LabelVolume::from_raw(target, fitted.data().iter().map(|&v| v as u8).collect())
}

/// A voxel-exact geometric transform applied congruently to images and labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometric {
    /// `quarter_turns` × 90° about the axial (depth) axis.
    Rotate90 { quarter_turns: u8 },
    Flip { axis: Axis },
    /// Arbitrary rotation about the axial axis around the in-plane center.
    /// Images are resampled bilinearly, labels by nearest neighbour.
    RotateAngle { degrees: f32 },
}

impl Geometric {
    pub fn output_dims(&self, src: Dims) -> Dims {
        match *self {
            Geometric::Rotate90 { quarter_turns } if quarter_turns % 2 == 1 => {
                Dims::new(src.depth, src.width, src.height)
            }
            _ => src,
        }
    }

    /// Source coordinate for output voxel `(z, y, x)` (exact transforms only).
    pub fn source_of(&self, src: Dims, z: usize, y: usize, x: usize) -> Option<(usize, usize, usize)> {
        match *self {
            Geometric::Rotate90 { quarter_turns } => {
                let (h, w) = (src.height, src.width);
                Some(match quarter_turns % 4 {
                    0 => (z, y, x),
                    1 => (z, x, w - 1 - y),
                    2 => (z, h - 1 - y, w - 1 - x),
                    _ => (z, h - 1 - x, y),
                })
            }
            Geometric::Flip { axis } => Some(match axis {
                Axis::Depth => (src.depth - 1 - z, y, x),
                Axis::Height => (z, src.height - 1 - y, x),
                Axis::Width => (z, y, src.width - 1 - x),
            }),
            Geometric::RotateAngle { degrees } => {
                let (sy, sx) = rotate_back(src, degrees, y as f64, x as f64);
                let (ry, rx) = (sy.round(), sx.round());
                if ry < 0.0 || rx < 0.0 || ry >= src.height as f64 || rx >= src.width as f64 {
                    None
                } else {
                    Some((z, ry as usize, rx as usize))
                }
            }
        }
    }

    pub fn apply_volume(&self, vol: &Volume3D) -> Volume3D {
        let src = vol.dims();
        let out = self.output_dims(src);
        if let Geometric::RotateAngle { degrees } = *self {
            return Volume3D::from_fn(out, |z, y, x| {
                let (sy, sx) = rotate_back(src, degrees, y as f64, x as f64);
                bilinear(vol, z, sy, sx)
            })
            .with_spacing(vol.spacing);
        }
        Volume3D::from_fn(out, |z, y, x| {
            let (a, b, c) = self.source_of(src, z, y, x).expect("exact transform");
            vol.get(a, b, c)
        })
        .with_spacing(vol.spacing)
    }

    pub fn apply_labels(&self, labels: &LabelVolume) -> LabelVolume {
        let src = labels.dims();
        let out = self.output_dims(src);
        let mut data = Vec::with_capacity(out.len());
        for z in 0..out.depth {
            for y in 0..out.height {
                for x in 0..out.width {
                    data.push(match self.source_of(src, z, y, x) {
                        Some((a, b, c)) => labels.get(a, b, c),
                        None => 0,
                    });
                }
            }
        }
        LabelVolume::from_raw(out, data)
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let image = sample
            .image
            .map_present(|_, v| Ok(self.apply_volume(v)))
            .expect("transform preserves modality set");
        Sample {
            id: sample.id.clone(),
            image,
            labels: self.apply_labels(&sample.labels),
        }
    }
}

fn rotate_back(src: Dims, degrees: f32, y: f64, x: f64) -> (f64, f64) {
    let cy = (src.height as f64 - 1.0) / 2.0;
    let cx = (src.width as f64 - 1.0) / 2.0;
    let (s, c) = (degrees as f64).to_radians().sin_cos();
    let (dy, dx) = (y - cy, x - cx);
    // inverse rotation
    (cy + c * dy - s * dx, cx + s * dy + c * dx)
}

fn bilinear(vol: &Volume3D, z: usize, y: f64, x: f64) -> f32 {
    let d = vol.dims();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let sample = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= d.height as f64 || xx >= d.width as f64 {
            0.0
        } else {
            vol.get(z, yy as usize, xx as usize) as f64
        }
    };
    let v = sample(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + sample(y0, x0 + 1.0) * (1.0 - fy) * fx
        + sample(y0 + 1.0, x0) * fy * (1.0 - fx)
        + sample(y0 + 1.0, x0 + 1.0) * fy * fx;
    v as f32
}

/// Which random augmentations to draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentOps {
    pub rotate90: bool,
    pub intensity_shift: bool,
    pub flip: bool,
}

impl AugmentOps {
    pub fn all() -> Self {
        AugmentOps {
            rotate90: true,
            intensity_shift: true,
            flip: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Half-width of the uniform additive shift, in normalized units.
    pub shift_range: f32,
    /// Replace 90° rotations by a uniformly drawn arbitrary angle.
    pub arbitrary_angle: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shift_range: 0.1,
            arbitrary_angle: false,
        }
    }
}

/// Draws and applies the requested augmentations. Geometry is shared by all
/// modalities and the labels; the intensity shift (one draw per modality) is
/// added to brain voxels of the images only, keeping the background at zero.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, ops: AugmentOps, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    if ops.rotate90 {
        let g = if cfg.arbitrary_angle {
            Geometric::RotateAngle {
                degrees: rng.random_range(0.0..360.0),
            }
        } else {
            Geometric::Rotate90 {
                quarter_turns: rng.random_range(0..4),
            }
        };
        out = g.apply(&out);
    }
    if ops.flip {
        for axis in Axis::ALL {
            if rng.random_bool(0.5) {
                out = Geometric::Flip { axis }.apply(&out);
            }
        }
    }
    if ops.intensity_shift && cfg.shift_range > 0.0 {
        let support = support_mask(&out.image);
        let r = cfg.shift_range;
        out.image = out
            .image
            .map_present(|_, v| {
                let shift: f32 = rng.random_range(-r..=r);
                Ok(Volume3D::from_raw(
                    v.dims(),
                    v.spacing,
                    v.data()
                        .iter()
                        .zip(support.data())
                        .map(|(&x, &m)| if m { x + shift } else { x })
                        .collect(),
                ))
            })
            .expect("shift preserves modality set");
    }
    out
}
