//! Volume file formats.
//!
//! Two formats are read: NIfTI-1 single-file images (`.nii`, optionally
//! gzip-compressed) with uint8 / int16 / float32 payloads, and the internal raw
//! format `.mmv`:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MMV1"
//!      4     4  depth    (u32 LE)
//!      8     4  height   (u32 LE)
//!     12     4  width    (u32 LE)
//!     16     4  channels (u32 LE)
//!     20     4  dtype    (u32 LE; 2 = uint8, 16 = float32)
//!     24     .  payload, little-endian, channel-major, x fastest
//! ```
//!
//! A sample on disk is a directory holding `flair`, `t1ce`, `t1`, `t2` and
//! `label` files with any of the supported extensions; missing modality files
//! mark the modality unavailable.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, Modality, MultiModalVolume, Sample, Volume3D};

pub const MMV_MAGIC: &[u8; 4] = b"MMV1";
pub const MMV_HEADER_LEN: usize = 24;
pub const DTYPE_U8: u32 = 2;
pub const DTYPE_I16: u32 = 4;
pub const DTYPE_F32: u32 = 16;

pub const LABEL_STEM: &str = "label";
const EXTENSIONS: [&str; 3] = ["mmv", "nii.gz", "nii"];

/// Decoded payload of any supported file, before conversion.
#[derive(Clone, Debug)]
pub struct RawVolume {
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub channels: usize,
    /// Channel-major samples converted to f64 (scaling already applied).
    pub values: Vec<f64>,
}

impl RawVolume {
    fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.len();
        &self.values[c * n..(c + 1) * n]
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::header(path, format!("gzip: {e}")))?;
        return Ok(out);
    }
    Ok(bytes)
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes(b[off..off + 2].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn decode_payload(path: &Path, payload: &[u8], dtype: u32, count: usize) -> Result<Vec<f64>> {
    let width = match dtype {
        DTYPE_U8 => 1,
        DTYPE_I16 => 2,
        DTYPE_F32 => 4,
        other => return Err(Error::header(path, format!("unsupported datatype code {other}"))),
    };
    if payload.len() < count * width {
        return Err(Error::header(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), count * width),
        ));
    }
    let p = &payload[..count * width];
    Ok(match dtype {
        DTYPE_U8 => p.iter().map(|&v| v as f64).collect(),
        DTYPE_I16 => p.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        _ => p
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    })
}

fn parse_mmv(path: &Path, b: &[u8]) -> Result<RawVolume> {
    if b.len() < MMV_HEADER_LEN {
        return Err(Error::header(path, "shorter than the 24-byte header"));
    }
    let depth = u32_at(b, 4) as usize;
    let height = u32_at(b, 8) as usize;
    let width = u32_at(b, 12) as usize;
    let channels = u32_at(b, 16) as usize;
    let dtype = u32_at(b, 20);
    if depth == 0 || height == 0 || width == 0 || channels == 0 {
        return Err(Error::header(path, "zero-sized dimension"));
    }
    let dims = Dims::new(depth, height, width);
    let values = decode_payload(path, &b[MMV_HEADER_LEN..], dtype, dims.len() * channels)?;
    if b.len() - MMV_HEADER_LEN != values.len() * dtype_width(dtype) {
        return Err(Error::header(path, "trailing bytes after payload"));
    }
    Ok(RawVolume {
        dims,
        spacing: [1.0; 3],
        channels,
        values,
    })
}

fn dtype_width(dtype: u32) -> usize {
    match dtype {
        DTYPE_U8 => 1,
        DTYPE_I16 => 2,
        _ => 4,
    }
}

fn parse_nifti(path: &Path, b: &[u8]) -> Result<RawVolume> {
    if b.len() < 348 {
        return Err(Error::header(path, "shorter than a NIfTI-1 header"));
    }
    let sizeof_hdr = i32::from_le_bytes(b[0..4].try_into().unwrap());
    if sizeof_hdr != 348 {
        return Err(Error::header(
            path,
            format!("sizeof_hdr is {sizeof_hdr}; only little-endian NIfTI-1 is supported"),
        ));
    }
    if &b[344..347] != b"n+1" {
        return Err(Error::header(path, "not a single-file NIfTI-1 image (magic n+1)"));
    }
    let ndim = i16_at(b, 40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::header(path, format!("expected 3 or 4 dimensions, got {ndim}")));
    }
    let dim = |i: usize| i16_at(b, 40 + 2 * i) as i64;
    let (nx, ny, nz) = (dim(1), dim(2), dim(3));
    let nt = if ndim == 4 { dim(4) } else { 1 };
    if nx < 1 || ny < 1 || nz < 1 || nt < 1 {
        return Err(Error::header(path, "non-positive dimension"));
    }
    let datatype = i16_at(b, 70) as u32;
    let pix = |i: usize| f32_at(b, 76 + 4 * i);
    let vox_offset = f32_at(b, 108);
    if !(vox_offset >= 348.0) || vox_offset.fract() != 0.0 {
        return Err(Error::header(path, format!("bad vox_offset {vox_offset}")));
    }
    let slope = f32_at(b, 112) as f64;
    let inter = f32_at(b, 116) as f64;
    let dims = Dims::new(nz as usize, ny as usize, nx as usize);
    let offset = vox_offset as usize;
    if offset > b.len() {
        return Err(Error::header(path, "vox_offset past end of file"));
    }
    let mut values = decode_payload(path, &b[offset..], datatype, dims.len() * nt as usize)?;
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Ok(RawVolume {
        dims,
        spacing: [pix(3).abs(), pix(2).abs(), pix(1).abs()],
        channels: nt as usize,
        values,
    })
}

/// Reads a `.mmv` or NIfTI-1 file; the format is chosen by magic bytes.
pub fn read_raw(path: &Path) -> Result<RawVolume> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(MMV_MAGIC) {
        parse_mmv(path, &bytes)
    } else {
        parse_nifti(path, &bytes)
    }
}

fn single_channel(path: &Path, raw: &RawVolume) -> Result<()> {
    if raw.channels != 1 {
        return Err(Error::header(
            path,
            format!("expected one channel, found {}", raw.channels),
        ));
    }
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let raw = read_raw(path)?;
    single_channel(path, &raw)?;
    let data = raw.channel(0).iter().map(|&v| v as f32).collect();
    Ok(Volume3D::new(raw.dims, data)?.with_spacing(raw.spacing))
}

/// Reads every channel of a multi-channel file as separate volumes.
pub fn read_volumes(path: &Path) -> Result<Vec<Volume3D>> {
    let raw = read_raw(path)?;
    (0..raw.channels)
        .map(|c| {
            let data = raw.channel(c).iter().map(|&v| v as f32).collect();
            Ok(Volume3D::new(raw.dims, data)?.with_spacing(raw.spacing))
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let raw = read_raw(path)?;
    single_channel(path, &raw)?;
    let mut data = Vec::with_capacity(raw.dims.len());
    for &v in raw.channel(0) {
        if v.fract() != 0.0 || !matches!(v as i64, 0 | 1 | 2 | 4) {
            return Err(Error::LabelOutOfVocabulary(v));
        }
        data.push(v as u8);
    }
    LabelVolume::new(raw.dims, data)
}

fn mmv_header(dims: Dims, channels: u32, dtype: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(MMV_HEADER_LEN + dims.len() * 4);
    out.extend_from_slice(MMV_MAGIC);
    for v in [dims.depth as u32, dims.height as u32, dims.width as u32, channels, dtype] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_mmv_f32(vols: &[&Volume3D]) -> Vec<u8> {
    let dims = vols[0].dims();
    let mut out = mmv_header(dims, vols.len() as u32, DTYPE_F32);
    for v in vols {
        assert_eq!(v.dims(), dims, "channels must share dims");
        for x in v.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn encode_mmv_labels(labels: &LabelVolume) -> Vec<u8> {
    let mut out = mmv_header(labels.dims(), 1, DTYPE_U8);
    out.extend_from_slice(labels.data());
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, vol: &Volume3D) -> Result<()> {
    write_file(path, &encode_mmv_f32(&[vol]))
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    write_file(path, &encode_mmv_labels(labels))
}

/// Minimal little-endian NIfTI-1 float32 writer (used for interchange and tests).
pub fn encode_nifti_f32(vol: &Volume3D) -> Vec<u8> {
    let d = vol.dims();
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dims: [i16; 8] = [3, d.width as i16, d.height as i16, d.depth as i16, 1, 1, 1, 1];
    for (i, v) in dims.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&v.to_le_bytes());
    }
    h[70..72].copy_from_slice(&(DTYPE_F32 as i16).to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    let pix = [1.0f32, vol.spacing[2], vol.spacing[1], vol.spacing[0], 1.0, 1.0, 1.0, 1.0];
    for (i, v) in pix.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&v.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    for x in vol.data() {
        h.extend_from_slice(&x.to_le_bytes());
    }
    h
}

pub fn write_nifti(path: &Path, vol: &Volume3D) -> Result<()> {
    write_file(path, &encode_nifti_f32(vol))
}

/// Loads up to four modality files and an optional label file.
pub fn load_sample(
    image_paths: [Option<&Path>; 4],
    label_path: Option<&Path>,
) -> Result<(MultiModalVolume, Option<LabelVolume>)> {
    let mut slots: [Option<Volume3D>; 4] = Default::default();
    for (slot, p) in slots.iter_mut().zip(image_paths) {
        if let Some(p) = p {
            *slot = Some(read_volume(p)?);
        }
    }
    let image = MultiModalVolume::new(slots)?;
    let labels = match label_path {
        Some(p) => {
            let l = read_labels(p)?;
            if l.dims() != image.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "labels {} vs images {}",
                    l.dims(),
                    image.dims()
                )));
            }
            Some(l)
        }
        None => None,
    };
    Ok((image, labels))
}

/// Resolves `<dir>/<stem>.{mmv,nii.gz,nii}`.
pub fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Paths of a sample directory, in slot order plus the label file.
pub fn sample_files(dir: &Path) -> ([Option<PathBuf>; 4], Option<PathBuf>) {
    (
        Modality::ALL.map(|m| find_file(dir, m.stem())),
        find_file(dir, LABEL_STEM),
    )
}

/// Loads a sample directory; the directory name becomes the sample id.
pub fn load_sample_dir(dir: &Path) -> Result<(MultiModalVolume, Option<LabelVolume>)> {
    let (images, label) = sample_files(dir);
    if images.iter().all(Option::is_none) {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no modality files in sample directory"),
        ));
    }
    load_sample(
        [0, 1, 2, 3].map(|i| images[i].as_deref()),
        label.as_deref(),
    )
}

/// Loads a labelled sample directory.
pub fn load_labelled_dir(dir: &Path) -> Result<Sample> {
    let (image, labels) = load_sample_dir(dir)?;
    let labels = labels.ok_or_else(|| {
        Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no label file in sample directory"),
        )
    })?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::new(id, image, labels)
}

/// Writes a sample directory in the raw format.
pub fn save_sample(dir: &Path, image: &MultiModalVolume, labels: Option<&LabelVolume>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (m, v) in image.present() {
        write_volume(&dir.join(format!("{}.mmv", m.stem())), v)?;
    }
    if let Some(l) = labels {
        write_labels(&dir.join(format!("{LABEL_STEM}.mmv")), l)?;
    }
    Ok(())
}

/// Axial slice `z` as an 8-bit binary PGM, linearly scaled to the slice range.
pub fn encode_pgm_slice(vol: &Volume3D, z: usize) -> Vec<u8> {
    let d = vol.dims();
    let start = d.index(z, 0, 0);
    let slice = &vol.data()[start..start + d.height * d.width];
    let lo = slice.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = slice.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = format!("P5\n{} {}\n255\n", d.width, d.height).into_bytes();
    out.extend(slice.iter().map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn write_pgm_slice(path: &Path, vol: &Volume3D, z: usize) -> Result<()> {
    write_file(path, &encode_pgm_slice(vol, z))
}
