//! Multi-dataset patch sampling: uniform source choice, uniform crop origin.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FormatError, SpecError};
use crate::volume::{LabelVolume, Volume};

/// On-disk corpus manifest: source volume paths (plus optional paired labels)
/// and the crop shape. Paths are resolved relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub volumes: Vec<PathBuf>,
    #[serde(default)]
    pub labels: Vec<PathBuf>,
    pub patch_shape: [usize; 3],
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SpecError::new("CorpusManifest", vec![format!("{}: {e}", path.display())])
        })?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| {
            SpecError::new("CorpusManifest", vec![format!("{}: {e}", path.display())])
        })?;
        if let Some(dir) = path.parent() {
            for p in manifest.volumes.iter_mut().chain(manifest.labels.iter_mut()) {
                if p.is_relative() {
                    *p = dir.join(&p);
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }
}

/// In-memory unlabeled dataset: normalized source volumes and the patch shape.
/// Source selection is an equal-probability categorical.
pub struct DatasetSpec {
    sources: Vec<Volume>,
    patch_shape: [usize; 3],
}

impl DatasetSpec {
    /// Volumes are min-max normalized here, at load time.
    pub fn new(mut sources: Vec<Volume>, patch_shape: [usize; 3]) -> Result<Self, SpecError> {
        let mut violations = Vec::new();
        if sources.is_empty() {
            violations.push("no source volumes".to_string());
        }
        for (i, v) in sources.iter().enumerate() {
            let s = v.shape();
            if (0..3).any(|a| patch_shape[a] > s[a]) {
                violations.push(format!(
                    "patch shape {patch_shape:?} exceeds source {i} shape {s:?}"
                ));
            }
        }
        if patch_shape.iter().any(|&d| d == 0) {
            violations.push(format!("patch shape {patch_shape:?} has a zero dim"));
        }
        SpecError::check("DatasetSpec", violations)?;
        for v in &mut sources {
            v.normalize();
        }
        Ok(Self {
            sources,
            patch_shape,
        })
    }

    pub fn from_manifest(manifest: &CorpusManifest) -> Result<Self, SpecError> {
        let sources = manifest
            .volumes
            .iter()
            .map(|p| Volume::load(p))
            .collect::<Result<Vec<_>, FormatError>>()
            .map_err(|e| SpecError::new("DatasetSpec", vec![e.to_string()]))?;
        Self::new(sources, manifest.patch_shape)
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        self.patch_shape
    }

    /// Uniform source, uniform valid origin, crop of exactly `patch_shape`.
    pub fn sample_patch(&self, rng: &mut ChaCha8Rng) -> (Volume, usize) {
        let source_index = rng.gen_range(0..self.sources.len());
        let src = &self.sources[source_index];
        let origin = sample_origin(src.shape(), self.patch_shape, rng);
        (crop(src, origin, self.patch_shape), source_index)
    }
}

fn sample_origin(shape: [usize; 3], patch: [usize; 3], rng: &mut ChaCha8Rng) -> [usize; 3] {
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = rng.gen_range(0..=shape[a] - patch[a]);
    }
    origin
}

pub fn crop(src: &Volume, origin: [usize; 3], patch: [usize; 3]) -> Volume {
    let mut out = Volume::zeros(patch);
    for d in 0..patch[0] {
        for h in 0..patch[1] {
            let src_base = src.index(origin[0] + d, origin[1] + h, origin[2]);
            let dst_base = out.index(d, h, 0);
            let row = &src.voxels()[src_base..src_base + patch[2]];
            out.voxels_mut()[dst_base..dst_base + patch[2]].copy_from_slice(row);
        }
    }
    out
}

pub fn crop_labels(src: &LabelVolume, origin: [usize; 3], patch: [usize; 3]) -> LabelVolume {
    let mut out = LabelVolume::zeros(patch);
    for d in 0..patch[0] {
        for h in 0..patch[1] {
            let src_base = src.index(origin[0] + d, origin[1] + h, origin[2]);
            let dst_base = out.index(d, h, 0);
            let row = &src.voxels()[src_base..src_base + patch[2]];
            out.voxels_mut()[dst_base..dst_base + patch[2]].copy_from_slice(row);
        }
    }
    out
}

/// Labeled dataset for finetuning: (volume, labels) pairs with joint crops.
pub struct LabeledDataset {
    volumes: Vec<Volume>,
    labels: Vec<LabelVolume>,
    patch_shape: [usize; 3],
}

impl LabeledDataset {
    pub fn new(
        mut volumes: Vec<Volume>,
        labels: Vec<LabelVolume>,
        patch_shape: [usize; 3],
    ) -> Result<Self, SpecError> {
        let mut violations = Vec::new();
        if volumes.is_empty() {
            violations.push("no labeled volumes".to_string());
        }
        if volumes.len() != labels.len() {
            violations.push(format!(
                "{} volumes but {} label volumes",
                volumes.len(),
                labels.len()
            ));
        }
        for (i, (v, l)) in volumes.iter().zip(labels.iter()).enumerate() {
            if v.shape() != l.shape() {
                violations.push(format!(
                    "pair {i}: volume shape {:?} != label shape {:?}",
                    v.shape(),
                    l.shape()
                ));
            }
            if (0..3).any(|a| patch_shape[a] > v.shape()[a]) {
                violations.push(format!(
                    "patch shape {patch_shape:?} exceeds pair {i} shape {:?}",
                    v.shape()
                ));
            }
        }
        SpecError::check("LabeledDataset", violations)?;
        for v in &mut volumes {
            v.normalize();
        }
        Ok(Self {
            volumes,
            labels,
            patch_shape,
        })
    }

    pub fn from_manifest(manifest: &CorpusManifest) -> Result<Self, SpecError> {
        if manifest.labels.len() != manifest.volumes.len() {
            return Err(SpecError::new(
                "LabeledDataset",
                vec![format!(
                    "manifest lists {} volumes but {} label files",
                    manifest.volumes.len(),
                    manifest.labels.len()
                )],
            ));
        }
        let to_spec = |e: FormatError| SpecError::new("LabeledDataset", vec![e.to_string()]);
        let volumes = manifest
            .volumes
            .iter()
            .map(|p| Volume::load(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_spec)?;
        let labels = manifest
            .labels
            .iter()
            .map(|p| LabelVolume::load(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_spec)?;
        Self::new(volumes, labels, manifest.patch_shape)
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        self.patch_shape
    }

    pub fn pair(&self, i: usize) -> (&Volume, &LabelVolume) {
        (&self.volumes[i], &self.labels[i])
    }

    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> (Volume, LabelVolume, usize) {
        let source_index = rng.gen_range(0..self.volumes.len());
        let origin = sample_origin(self.volumes[source_index].shape(), self.patch_shape, rng);
        (
            crop(&self.volumes[source_index], origin, self.patch_shape),
            crop_labels(&self.labels[source_index], origin, self.patch_shape),
            source_index,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp_volume(shape: [usize; 3]) -> Volume {
        let n: usize = shape.iter().product();
        Volume::new(shape, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn single_source_always_index_zero() {
        let ds = DatasetSpec::new(vec![ramp_volume([32, 32, 32])], [16, 16, 16]).unwrap();
        let mut rng = rng::from_seed(1);
        for _ in 0..50 {
            let (_, idx) = ds.sample_patch(&mut rng);
            assert_eq!(idx, 0);
        }
    }

    #[test]
    fn full_size_patch_has_single_origin() {
        let src = ramp_volume([32, 32, 32]);
        let mut expected = src.clone();
        expected.normalize();
        let ds = DatasetSpec::new(vec![src], [32, 32, 32]).unwrap();
        let mut rng = rng::from_seed(2);
        for _ in 0..10 {
            let (patch, _) = ds.sample_patch(&mut rng);
            assert_eq!(patch, expected);
        }
    }

    #[test]
    fn four_sources_uniform_frequency() {
        let sources = (0..4).map(|_| ramp_volume([16, 16, 16])).collect();
        let ds = DatasetSpec::new(sources, [8, 8, 8]).unwrap();
        let mut rng = rng::from_seed(3);
        let n = 100_000;
        let mut counts = [0u32; 4];
        for _ in 0..n {
            let (_, idx) = ds.sample_patch(&mut rng);
            counts[idx] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 0.25).abs() <= 0.01,
                "source frequency {freq} outside 0.25 +/- 0.01"
            );
        }
    }

    #[test]
    fn oversized_patch_rejected_at_load() {
        let err = DatasetSpec::new(vec![ramp_volume([16, 16, 16])], [32, 32, 32]);
        assert!(err.is_err());
    }

    #[test]
    fn patch_is_exact_crop() {
        let src = ramp_volume([16, 16, 16]);
        let patch = crop(&src, [1, 2, 3], [4, 4, 4]);
        for d in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(patch.get(d, h, w), src.get(1 + d, 2 + h, 3 + w));
                }
            }
        }
    }
}
