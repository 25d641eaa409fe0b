//! 3D intensity and instance-label grids plus their on-disk format.
//!
//! One file = a 64-byte magic/version header, a UTF-8 JSON metadata block
//! (shape, dtype, voxel size), then the raw little-endian voxel payload in
//! D-major (slowest) order. Round-trips are bit-exact for both dtypes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, SpecError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EMCVOL01";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;
/// Smallest legal intensity-volume edge.
pub const MIN_VOLUME_DIM: usize = 8;

/// 3D scalar intensity grid, shape (D, H, W), f32 voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    voxels: Vec<f32>,
    voxel_size: [f64; 3],
}

/// 3D instance-ID grid; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    shape: [usize; 3],
    voxels: Vec<u32>,
    voxel_size: [f64; 3],
}

/// Either payload dtype, as read from disk.
#[derive(Debug, Clone)]
pub enum AnyVolume {
    Intensity(Volume),
    Labels(LabelVolume),
}

#[derive(Serialize, Deserialize)]
struct VolumeMeta {
    shape: [usize; 3],
    dtype: String,
    voxel_size: [f64; 3],
}

impl Volume {
    pub fn new(shape: [usize; 3], voxels: Vec<f32>) -> Result<Self, SpecError> {
        let mut violations = Vec::new();
        if shape.iter().any(|&d| d < MIN_VOLUME_DIM) {
            violations.push(format!(
                "shape {shape:?} has a dim below the minimum {MIN_VOLUME_DIM}"
            ));
        }
        if voxels.len() != shape.iter().product::<usize>() {
            violations.push(format!(
                "voxel count {} does not match shape {shape:?}",
                voxels.len()
            ));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            violations.push("non-finite voxel value".to_string());
        }
        SpecError::check("Volume", violations)?;
        Ok(Self {
            shape,
            voxels,
            voxel_size: [1.0; 3],
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            voxels: vec![0.0; shape.iter().product()],
            voxel_size: [1.0; 3],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.index(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: f32) {
        let i = self.index(d, h, w);
        self.voxels[i] = v;
    }

    /// Min-max normalize into [0, 1]; a constant volume maps to all zeros.
    pub fn normalize(&mut self) {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in &self.voxels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let inv = 1.0 / (hi - lo);
            for v in &mut self.voxels {
                *v = (*v - lo) * inv;
            }
        } else {
            self.voxels.fill(0.0);
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Copy into a (1, 1, D, H, W) network input tensor.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.voxels.iter().map(|&v| S::cast_from(v as f64)).collect();
        Tensor::from_vec(&[1, 1, self.shape[0], self.shape[1], self.shape[2]], data)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut payload = Vec::with_capacity(self.voxels.len() * 4);
        for v in &self.voxels {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_file(path, self.shape, "f32", self.voxel_size, &payload)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        match load_any(path)? {
            AnyVolume::Intensity(v) => Ok(v),
            AnyVolume::Labels(_) => Err(FormatError::BadDtype {
                path: path.to_path_buf(),
                dtype: "u32 (expected f32 intensity volume)".to_string(),
            }),
        }
    }
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], voxels: Vec<u32>) -> Result<Self, SpecError> {
        let mut violations = Vec::new();
        if shape.iter().any(|&d| d == 0) {
            violations.push(format!("shape {shape:?} has a zero dim"));
        }
        if voxels.len() != shape.iter().product::<usize>() {
            violations.push(format!(
                "voxel count {} does not match shape {shape:?}",
                voxels.len()
            ));
        }
        SpecError::check("LabelVolume", violations)?;
        Ok(Self {
            shape,
            voxels,
            voxel_size: [1.0; 3],
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            voxels: vec![0; shape.iter().product()],
            voxel_size: [1.0; 3],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxels(&self) -> &[u32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [u32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> u32 {
        self.voxels[self.index(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: u32) {
        let i = self.index(d, h, w);
        self.voxels[i] = v;
    }

    /// Distinct nonzero IDs, ascending.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.voxels.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut payload = Vec::with_capacity(self.voxels.len() * 4);
        for v in &self.voxels {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_file(path, self.shape, "u32", self.voxel_size, &payload)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        match load_any(path)? {
            AnyVolume::Labels(v) => Ok(v),
            AnyVolume::Intensity(_) => Err(FormatError::BadDtype {
                path: path.to_path_buf(),
                dtype: "f32 (expected u32 label volume)".to_string(),
            }),
        }
    }
}

fn write_file(
    path: &Path,
    shape: [usize; 3],
    dtype: &str,
    voxel_size: [f64; 3],
    payload: &[u8],
) -> Result<(), FormatError> {
    let meta = VolumeMeta {
        shape,
        dtype: dtype.to_string(),
        voxel_size,
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut header = [0u8; HEADER_LEN];
    header[..8].copy_from_slice(MAGIC);
    header[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    header[12..16].copy_from_slice(&(json.len() as u32).to_le_bytes());

    let io_err = |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&header).map_err(io_err)?;
    f.write_all(&json).map_err(io_err)?;
    f.write_all(payload).map_err(io_err)?;
    Ok(())
}

/// Load either dtype, dispatching on the header.
pub fn load_any(path: &Path) -> Result<AnyVolume, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_bytes(path, &bytes)
}

fn parse_bytes(path: &Path, bytes: &[u8]) -> Result<AnyVolume, FormatError> {
    let p = || path.to_path_buf();
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(FormatError::BadMagic { path: p() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FormatError::BadVersion { path: p(), version });
    }
    let json_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < HEADER_LEN + json_len {
        return Err(FormatError::BadMagic { path: p() });
    }
    let meta: VolumeMeta = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + json_len])
        .map_err(|source| FormatError::BadHeaderJson { path: p(), source })?;

    let payload = &bytes[HEADER_LEN + json_len..];
    let count: usize = meta.shape.iter().product();
    let expected = count * 4;
    if payload.len() != expected {
        return Err(FormatError::PayloadSize {
            path: p(),
            shape: meta.shape,
            dtype: meta.dtype,
            expected,
            actual: payload.len(),
        });
    }

    match meta.dtype.as_str() {
        "f32" => {
            let voxels = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(AnyVolume::Intensity(Volume {
                shape: meta.shape,
                voxels,
                voxel_size: meta.voxel_size,
            }))
        }
        "u32" => {
            let voxels = payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(AnyVolume::Labels(LabelVolume {
                shape: meta.shape,
                voxels,
                voxel_size: meta.voxel_size,
            }))
        }
        other => Err(FormatError::BadDtype {
            path: p(),
            dtype: other.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.emv");
        let v = Volume::new([8, 8, 8], (0..512).map(|i| i as f32 * 0.25 - 3.0).collect()).unwrap();
        v.save(&path).unwrap();
        let original = fs::read(&path).unwrap();

        let loaded = Volume::load(&path).unwrap();
        assert_eq!(loaded, v);
        loaded.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), original);
    }

    #[test]
    fn label_round_trip_max_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.emv");
        let mut l = LabelVolume::zeros([8, 8, 8]);
        l.voxels_mut()[0] = (1u32 << 31) - 1;
        l.save(&path).unwrap();
        let loaded = LabelVolume::load(&path).unwrap();
        assert_eq!(loaded.voxels()[0], (1u32 << 31) - 1);
        assert_eq!(loaded, l);
    }

    #[test]
    fn payload_size_mismatch_reports_byte_counts() {
        let meta = br#"{"shape":[4,4,4],"dtype":"f32","voxel_size":[1.0,1.0,1.0]}"#;
        let mut bytes = vec![0u8; HEADER_LEN];
        bytes[..8].copy_from_slice(MAGIC);
        bytes[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes[12..16].copy_from_slice(&(meta.len() as u32).to_le_bytes());
        bytes.extend_from_slice(meta);
        bytes.extend_from_slice(&vec![0u8; 255]); // one byte short of 4*4*4*4

        let err = parse_bytes(Path::new("bad.emv"), &bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("256"), "expected byte count in: {msg}");
        assert!(msg.contains("255"), "actual byte count in: {msg}");
    }

    #[test]
    fn normalize_bounds_and_constant_rule() {
        let mut v = Volume::new([8, 8, 8], (0..512).map(|i| i as f32 - 100.0).collect()).unwrap();
        v.normalize();
        let (lo, hi) = v.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);

        let mut c = Volume::new([8, 8, 8], vec![3.5; 512]).unwrap();
        c.normalize();
        assert!(c.voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn volume_rejects_small_dims() {
        assert!(Volume::new([4, 8, 8], vec![0.0; 256]).is_err());
    }

    #[test]
    fn typed_load_rejects_wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.emv");
        LabelVolume::zeros([8, 8, 8]).save(&path).unwrap();
        assert!(Volume::load(&path).is_err());
    }
}
