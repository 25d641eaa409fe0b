//! Weak and strong augmentation pipelines.
//!
//! Weak: integer translation, 90-degree rotations, mild scaling, flips.
//! Strong: elastic deformation, crop-resize, scaling, gamma, Gaussian noise,
//! splicing, and block masking, applied geometric → photometric → occlusion
//! so occlusions are never warped into soft edges.
//!
//! Every applied transform is recorded with its sampled parameters; replaying
//! a record on the same input reproduces the output bit-exactly. Intensities
//! stay in [0, 1] throughout.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SpecError;
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakAugmentSpec {
    /// Max absolute integer shift per axis, voxels.
    #[serde(default = "default_translation")]
    pub translation: [usize; 3],
    /// Axes eligible for a 90-degree rotation.
    #[serde(default = "default_rot_axes")]
    pub rotation_axes: [bool; 3],
    /// Probability that one rotation (random eligible axis, 1-3 turns) fires.
    #[serde(default = "default_rot_prob")]
    pub rotation_prob: f64,
    /// Uniform zoom ratio range; [1, 1] disables.
    #[serde(default = "default_weak_scale")]
    pub scale_range: [f32; 2],
    /// Axes eligible to flip.
    #[serde(default = "default_flip_axes")]
    pub flip_axes: [bool; 3],
    /// Per-axis flip probability.
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
}

fn default_translation() -> [usize; 3] {
    [2, 2, 2]
}
fn default_rot_axes() -> [bool; 3] {
    [true, true, true]
}
fn default_rot_prob() -> f64 {
    0.3
}
fn default_weak_scale() -> [f32; 2] {
    [0.97, 1.03]
}
fn default_flip_axes() -> [bool; 3] {
    [true, true, true]
}
fn default_flip_prob() -> f64 {
    0.15
}

impl Default for WeakAugmentSpec {
    fn default() -> Self {
        Self {
            translation: default_translation(),
            rotation_axes: default_rot_axes(),
            rotation_prob: default_rot_prob(),
            scale_range: default_weak_scale(),
            flip_axes: default_flip_axes(),
            flip_prob: default_flip_prob(),
        }
    }
}

impl WeakAugmentSpec {
    /// No-op pipeline.
    pub fn identity() -> Self {
        Self {
            translation: [0; 3],
            rotation_axes: [false; 3],
            rotation_prob: 0.0,
            scale_range: [1.0, 1.0],
            flip_axes: [false; 3],
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let mut v = Vec::new();
        if !(self.scale_range[0] > 0.0) || self.scale_range[0] > self.scale_range[1] {
            v.push(format!("scale range {:?} invalid", self.scale_range));
        }
        for (name, p) in [("rotation", self.rotation_prob), ("flip", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        SpecError::check("WeakAugmentSpec", v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongAugmentSpec {
    #[serde(default = "default_elastic_spacing")]
    pub elastic_spacing: usize,
    /// Std of control-point displacements, voxels.
    #[serde(default = "default_elastic_sigma")]
    pub elastic_sigma: f32,
    #[serde(default = "default_p07")]
    pub elastic_prob: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f32,
    #[serde(default = "default_p08")]
    pub noise_prob: f64,
    #[serde(default = "default_gamma_range")]
    pub gamma_range: [f32; 2],
    #[serde(default = "default_p08")]
    pub gamma_prob: f64,
    /// Crop-box edge fraction; the crop is resized back to full shape.
    #[serde(default = "default_crop_scale")]
    pub crop_scale_range: [f32; 2],
    #[serde(default = "default_p05")]
    pub crop_prob: f64,
    #[serde(default = "default_strong_scale")]
    pub scale_range: [f32; 2],
    #[serde(default = "default_p03")]
    pub scale_prob: f64,
    /// Fraction of the patch volume replaced by a block copied from another
    /// location of the same patch.
    #[serde(default = "default_splice_fraction")]
    pub splice_fraction: f32,
    #[serde(default = "default_p03")]
    pub splice_prob: f64,
    /// Fraction of voxels zeroed by block masking; must be <= 0.8.
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f32,
    #[serde(default = "default_mask_block")]
    pub mask_block: usize,
    #[serde(default = "default_p07")]
    pub mask_prob: f64,
}

fn default_elastic_spacing() -> usize {
    8
}
fn default_elastic_sigma() -> f32 {
    1.5
}
fn default_noise_sigma() -> f32 {
    0.08
}
fn default_gamma_range() -> [f32; 2] {
    [0.7, 1.4]
}
fn default_crop_scale() -> [f32; 2] {
    [0.8, 1.0]
}
fn default_strong_scale() -> [f32; 2] {
    [0.95, 1.05]
}
fn default_splice_fraction() -> f32 {
    0.1
}
fn default_mask_ratio() -> f32 {
    0.4
}
fn default_mask_block() -> usize {
    8
}
fn default_p08() -> f64 {
    0.8
}
fn default_p07() -> f64 {
    0.7
}
fn default_p05() -> f64 {
    0.5
}
fn default_p03() -> f64 {
    0.3
}

impl Default for StrongAugmentSpec {
    fn default() -> Self {
        Self {
            elastic_spacing: default_elastic_spacing(),
            elastic_sigma: default_elastic_sigma(),
            elastic_prob: default_p07(),
            noise_sigma: default_noise_sigma(),
            noise_prob: default_p08(),
            gamma_range: default_gamma_range(),
            gamma_prob: default_p08(),
            crop_scale_range: default_crop_scale(),
            crop_prob: default_p05(),
            scale_range: default_strong_scale(),
            scale_prob: default_p03(),
            splice_fraction: default_splice_fraction(),
            splice_prob: default_p03(),
            mask_ratio: default_mask_ratio(),
            mask_block: default_mask_block(),
            mask_prob: default_p07(),
        }
    }
}

impl StrongAugmentSpec {
    /// No-op pipeline.
    pub fn identity() -> Self {
        Self {
            elastic_prob: 0.0,
            noise_prob: 0.0,
            gamma_prob: 0.0,
            crop_prob: 0.0,
            scale_prob: 0.0,
            splice_prob: 0.0,
            mask_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let mut v = Vec::new();
        if !(0.0..=0.8).contains(&self.mask_ratio) {
            v.push(format!("mask ratio {} outside [0, 0.8]", self.mask_ratio));
        }
        if !(self.gamma_range[0] > 0.0) || self.gamma_range[0] > self.gamma_range[1] {
            v.push(format!("gamma range {:?} invalid", self.gamma_range));
        }
        if !(self.scale_range[0] > 0.0) || self.scale_range[0] > self.scale_range[1] {
            v.push(format!("scale range {:?} invalid", self.scale_range));
        }
        if !(self.crop_scale_range[0] > 0.0)
            || self.crop_scale_range[0] > self.crop_scale_range[1]
            || self.crop_scale_range[1] > 1.0
        {
            v.push(format!(
                "crop scale range {:?} invalid",
                self.crop_scale_range
            ));
        }
        for (name, p) in [
            ("elastic", self.elastic_prob),
            ("noise", self.noise_prob),
            ("gamma", self.gamma_prob),
            ("crop", self.crop_prob),
            ("scale", self.scale_prob),
            ("splice", self.splice_prob),
            ("mask", self.mask_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        if self.mask_block == 0 {
            v.push("mask block must be >= 1".to_string());
        }
        if self.elastic_spacing == 0 {
            v.push("elastic spacing must be >= 1".to_string());
        }
        if self.elastic_sigma < 0.0 || self.noise_sigma < 0.0 {
            v.push("sigmas must be >= 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.splice_fraction) {
            v.push(format!("splice fraction {} outside [0, 1]", self.splice_fraction));
        }
        SpecError::check("StrongAugmentSpec", v)
    }
}

/// One applied transform with its sampled parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformStep {
    Translate { offset: [i64; 3] },
    Rotate90 { axis: u8, turns: u8 },
    Flip { axes: [bool; 3] },
    Zoom { ratio: f32 },
    Elastic {
        spacing: usize,
        grid_shape: [usize; 3],
        displacements: Vec<f32>,
    },
    CropResize { origin: [usize; 3], size: [usize; 3] },
    Gamma { exponent: f32 },
    Noise { sigma: f32, sub_seed: u64 },
    Splice {
        src: [usize; 3],
        dst: [usize; 3],
        size: [usize; 3],
    },
    Mask {
        origins: Vec<[usize; 3]>,
        block: usize,
    },
}

/// Ordered list of applied transforms; replay reproduces the output exactly.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformRecord {
    pub steps: Vec<TransformStep>,
}

/// Weak view, strong view, and the untouched reconstruction target.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub weak: Volume,
    pub strong: Volume,
    pub original: Volume,
    pub weak_record: TransformRecord,
    pub strong_record: TransformRecord,
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

pub fn augment_weak(
    patch: &Volume,
    spec: &WeakAugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, TransformRecord), SpecError> {
    spec.validate()?;
    let shape = patch.shape();
    if (0..3).any(|a| spec.translation[a] >= shape[a]) {
        return Err(SpecError::new(
            "WeakAugmentSpec",
            vec![format!(
                "translation range {:?} must stay below patch extent {:?}",
                spec.translation, shape
            )],
        ));
    }
    let mut record = TransformRecord::default();

    if spec.translation.iter().any(|&t| t > 0) {
        let mut offset = [0i64; 3];
        for a in 0..3 {
            let t = spec.translation[a] as i64;
            offset[a] = if t > 0 { rng.gen_range(-t..=t) } else { 0 };
        }
        if offset != [0; 3] {
            record.steps.push(TransformStep::Translate { offset });
        }
    }
    let eligible: Vec<u8> = (0..3u8).filter(|&a| spec.rotation_axes[a as usize]).collect();
    if !eligible.is_empty() && spec.rotation_prob > 0.0 && rng.gen_bool(spec.rotation_prob) {
        let axis = eligible[rng.gen_range(0..eligible.len())];
        rotation_plane_square(shape, axis)?;
        let turns = rng.gen_range(1..4u8);
        record.steps.push(TransformStep::Rotate90 { axis, turns });
    }
    if spec.scale_range != [1.0, 1.0] {
        let ratio = rng.gen_range(spec.scale_range[0]..=spec.scale_range[1]);
        if ratio != 1.0 {
            record.steps.push(TransformStep::Zoom { ratio });
        }
    }
    if spec.flip_axes.iter().any(|&f| f) && spec.flip_prob > 0.0 {
        let mut axes = [false; 3];
        for a in 0..3 {
            axes[a] = spec.flip_axes[a] && rng.gen_bool(spec.flip_prob);
        }
        if axes != [false; 3] {
            record.steps.push(TransformStep::Flip { axes });
        }
    }

    let out = apply_record(patch, &record)?;
    Ok((out, record))
}

pub fn augment_strong(
    patch: &Volume,
    spec: &StrongAugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, TransformRecord), SpecError> {
    spec.validate()?;
    let shape = patch.shape();
    let mut record = TransformRecord::default();

    // Geometric.
    if spec.elastic_prob > 0.0 && rng.gen_bool(spec.elastic_prob) && spec.elastic_sigma > 0.0 {
        let g: Vec<usize> = shape
            .iter()
            .map(|&d| d.div_ceil(spec.elastic_spacing) + 1)
            .collect();
        let normal = Normal::new(0.0f64, spec.elastic_sigma as f64).unwrap();
        let displacements: Vec<f32> = (0..g[0] * g[1] * g[2] * 3)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        record.steps.push(TransformStep::Elastic {
            spacing: spec.elastic_spacing,
            grid_shape: [g[0], g[1], g[2]],
            displacements,
        });
    }
    if spec.crop_prob > 0.0 && rng.gen_bool(spec.crop_prob) {
        let s = rng.gen_range(spec.crop_scale_range[0]..=spec.crop_scale_range[1]);
        let mut size = [0usize; 3];
        let mut origin = [0usize; 3];
        for a in 0..3 {
            size[a] = ((shape[a] as f32 * s).round() as usize).clamp(2, shape[a]);
            origin[a] = rng.gen_range(0..=shape[a] - size[a]);
        }
        if size != shape {
            record.steps.push(TransformStep::CropResize { origin, size });
        }
    }
    if spec.scale_prob > 0.0 && rng.gen_bool(spec.scale_prob) {
        let ratio = rng.gen_range(spec.scale_range[0]..=spec.scale_range[1]);
        if ratio != 1.0 {
            record.steps.push(TransformStep::Zoom { ratio });
        }
    }

    // Photometric.
    if spec.gamma_prob > 0.0 && rng.gen_bool(spec.gamma_prob) {
        let exponent = rng.gen_range(spec.gamma_range[0]..=spec.gamma_range[1]);
        if exponent != 1.0 {
            record.steps.push(TransformStep::Gamma { exponent });
        }
    }
    if spec.noise_prob > 0.0 && rng.gen_bool(spec.noise_prob) && spec.noise_sigma > 0.0 {
        record.steps.push(TransformStep::Noise {
            sigma: spec.noise_sigma,
            sub_seed: rng.gen(),
        });
    }

    // Occlusion.
    if spec.splice_prob > 0.0 && rng.gen_bool(spec.splice_prob) && spec.splice_fraction > 0.0 {
        let edge = spec.splice_fraction.powf(1.0 / 3.0);
        let mut size = [0usize; 3];
        let mut src = [0usize; 3];
        let mut dst = [0usize; 3];
        for a in 0..3 {
            size[a] = ((shape[a] as f32 * edge).round() as usize).clamp(1, shape[a]);
            src[a] = rng.gen_range(0..=shape[a] - size[a]);
            dst[a] = rng.gen_range(0..=shape[a] - size[a]);
        }
        record.steps.push(TransformStep::Splice { src, dst, size });
    }
    if spec.mask_prob > 0.0 && rng.gen_bool(spec.mask_prob) && spec.mask_ratio > 0.0 {
        let origins = sample_mask_blocks(shape, spec.mask_ratio, spec.mask_block, rng)?;
        if !origins.is_empty() {
            record.steps.push(TransformStep::Mask {
                origins,
                block: spec.mask_block,
            });
        }
    }

    let out = apply_record(patch, &record)?;
    Ok((out, record))
}

/// Distinct block-aligned origins covering ≈ ratio of the volume.
fn sample_mask_blocks(
    shape: [usize; 3],
    ratio: f32,
    block: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[usize; 3]>, SpecError> {
    let slots = [shape[0] / block, shape[1] / block, shape[2] / block];
    let n_slots = slots[0] * slots[1] * slots[2];
    let total: usize = shape.iter().product();
    let per_block = block.pow(3);
    let want = ((ratio as f64 * total as f64) / per_block as f64).round() as usize;
    if want > n_slots {
        return Err(SpecError::new(
            "StrongAugmentSpec",
            vec![format!(
                "mask ratio {ratio} with block {block} needs {want} blocks but only \
                 {n_slots} aligned slots fit in {shape:?}"
            )],
        ));
    }
    let chosen = index_sample(rng, n_slots, want);
    Ok(chosen
        .iter()
        .map(|i| {
            let z = i / (slots[1] * slots[2]);
            let y = (i / slots[2]) % slots[1];
            let x = i % slots[2];
            [z * block, y * block, x * block]
        })
        .collect())
}

pub fn make_pair(
    patch: &Volume,
    weak_spec: &WeakAugmentSpec,
    strong_spec: &StrongAugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedPair, SpecError> {
    let (weak, weak_record) = augment_weak(patch, weak_spec, rng)?;
    let (strong, strong_record) = augment_strong(patch, strong_spec, rng)?;
    Ok(AugmentedPair {
        weak,
        strong,
        original: patch.clone(),
        weak_record,
        strong_record,
    })
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// Apply a record step by step. Bit-exact: the same input and record always
/// produce the same output.
pub fn apply_record(patch: &Volume, record: &TransformRecord) -> Result<Volume, SpecError> {
    let mut cur = patch.clone();
    for step in &record.steps {
        cur = apply_step(&cur, step)?;
    }
    Ok(cur)
}

fn apply_step(v: &Volume, step: &TransformStep) -> Result<Volume, SpecError> {
    Ok(match step {
        TransformStep::Translate { offset } => translate(v, *offset),
        TransformStep::Rotate90 { axis, turns } => {
            rotation_plane_square(v.shape(), *axis)?;
            let mut cur = v.clone();
            for _ in 0..*turns % 4 {
                cur = rot90_once(&cur, *axis);
            }
            cur
        }
        TransformStep::Flip { axes } => flip(v, *axes),
        TransformStep::Zoom { ratio } => zoom(v, *ratio),
        TransformStep::Elastic {
            spacing,
            grid_shape,
            displacements,
        } => elastic(v, *spacing, *grid_shape, displacements),
        TransformStep::CropResize { origin, size } => crop_resize(v, *origin, *size),
        TransformStep::Gamma { exponent } => {
            if *exponent == 1.0 {
                v.clone()
            } else {
                let e = *exponent;
                let mut out = v.clone();
                for x in out.voxels_mut() {
                    *x = x.powf(e);
                }
                out
            }
        }
        TransformStep::Noise { sigma, sub_seed } => {
            let mut out = v.clone();
            if *sigma > 0.0 {
                let mut r = ChaCha8Rng::seed_from_u64(*sub_seed);
                let normal = Normal::new(0.0f64, *sigma as f64).unwrap();
                for x in out.voxels_mut() {
                    *x = (*x + normal.sample(&mut r) as f32).clamp(0.0, 1.0);
                }
            }
            out
        }
        TransformStep::Splice { src, dst, size } => {
            let mut out = v.clone();
            let mut block = vec![0.0f32; size[0] * size[1] * size[2]];
            for d in 0..size[0] {
                for h in 0..size[1] {
                    for w in 0..size[2] {
                        block[(d * size[1] + h) * size[2] + w] =
                            v.get(src[0] + d, src[1] + h, src[2] + w);
                    }
                }
            }
            for d in 0..size[0] {
                for h in 0..size[1] {
                    for w in 0..size[2] {
                        out.set(
                            dst[0] + d,
                            dst[1] + h,
                            dst[2] + w,
                            block[(d * size[1] + h) * size[2] + w],
                        );
                    }
                }
            }
            out
        }
        TransformStep::Mask { origins, block } => {
            let mut out = v.clone();
            let shape = v.shape();
            for o in origins {
                for d in o[0]..(o[0] + block).min(shape[0]) {
                    for h in o[1]..(o[1] + block).min(shape[1]) {
                        for w in o[2]..(o[2] + block).min(shape[2]) {
                            out.set(d, h, w, 0.0);
                        }
                    }
                }
            }
            out
        }
    })
}

// ---------------------------------------------------------------------------
// Geometric kernels
// ---------------------------------------------------------------------------

fn reflect(mut i: i64, n: i64) -> usize {
    // Symmetric reflection: ... c b a | a b c ... | c b a ...
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn translate(v: &Volume, offset: [i64; 3]) -> Volume {
    let shape = v.shape();
    let mut out = Volume::zeros(shape);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let sd = reflect(d as i64 - offset[0], shape[0] as i64);
                let sh = reflect(h as i64 - offset[1], shape[1] as i64);
                let sw = reflect(w as i64 - offset[2], shape[2] as i64);
                out.set(d, h, w, v.get(sd, sh, sw));
            }
        }
    }
    out
}

fn rotation_plane_square(shape: [usize; 3], axis: u8) -> Result<(), SpecError> {
    let (a, b) = match axis {
        0 => (shape[1], shape[2]),
        1 => (shape[0], shape[2]),
        _ => (shape[0], shape[1]),
    };
    if a != b {
        return Err(SpecError::new(
            "TransformStep",
            vec![format!(
                "rotation about axis {axis} needs a square plane, got {shape:?}"
            )],
        ));
    }
    Ok(())
}

/// One 90-degree counter-clockwise turn of the plane orthogonal to `axis`:
/// out[i][j] = in[j][n-1-i] in that plane's coordinates.
fn rot90_once(v: &Volume, axis: u8) -> Volume {
    let shape = v.shape();
    let mut out = Volume::zeros(shape);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let src = match axis {
                    0 => (d, w, shape[2] - 1 - h),
                    1 => (w, h, shape[2] - 1 - d),
                    _ => (h, shape[1] - 1 - d, w),
                };
                out.set(d, h, w, v.get(src.0, src.1, src.2));
            }
        }
    }
    out
}

fn flip(v: &Volume, axes: [bool; 3]) -> Volume {
    let shape = v.shape();
    let mut out = Volume::zeros(shape);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let sd = if axes[0] { shape[0] - 1 - d } else { d };
                let sh = if axes[1] { shape[1] - 1 - h } else { h };
                let sw = if axes[2] { shape[2] - 1 - w } else { w };
                out.set(d, h, w, v.get(sd, sh, sw));
            }
        }
    }
    out
}

/// Trilinear sample at a fractional source position with reflected borders.
fn sample_trilinear(v: &Volume, p: [f32; 3]) -> f32 {
    let shape = v.shape();
    let f = [p[0].floor(), p[1].floor(), p[2].floor()];
    let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
    let idx = |a: usize, add: i64| reflect(f[a] as i64 + add, shape[a] as i64);
    let mut acc = 0.0f32;
    for (dz, wz) in [(0i64, 1.0 - t[0]), (1, t[0])] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0i64, 1.0 - t[1]), (1, t[1])] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0i64, 1.0 - t[2]), (1, t[2])] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * v.get(idx(0, dz), idx(1, dy), idx(2, dx));
            }
        }
    }
    acc
}

/// Centered zoom: out(p) = in(c + (p - c)/ratio).
fn zoom(v: &Volume, ratio: f32) -> Volume {
    if ratio == 1.0 {
        return v.clone();
    }
    let shape = v.shape();
    let c = [
        (shape[0] as f32 - 1.0) / 2.0,
        (shape[1] as f32 - 1.0) / 2.0,
        (shape[2] as f32 - 1.0) / 2.0,
    ];
    let mut out = Volume::zeros(shape);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let p = [
                    c[0] + (d as f32 - c[0]) / ratio,
                    c[1] + (h as f32 - c[1]) / ratio,
                    c[2] + (w as f32 - c[2]) / ratio,
                ];
                out.set(d, h, w, sample_trilinear(v, p));
            }
        }
    }
    out
}

/// Coarse-grid displacement field, trilinearly interpolated per voxel.
fn elastic(v: &Volume, spacing: usize, grid_shape: [usize; 3], disp: &[f32]) -> Volume {
    let shape = v.shape();
    let g = grid_shape;
    let gidx = |d: usize, h: usize, w: usize, c: usize| ((d * g[1] + h) * g[2] + w) * 3 + c;
    let mut out = Volume::zeros(shape);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                // Interpolate the displacement at (d, h, w) from control points.
                let fp = [
                    d as f32 / spacing as f32,
                    h as f32 / spacing as f32,
                    w as f32 / spacing as f32,
                ];
                let f = [fp[0].floor() as usize, fp[1].floor() as usize, fp[2].floor() as usize];
                let t = [fp[0] - f[0] as f32, fp[1] - f[1] as f32, fp[2] - f[2] as f32];
                let mut dv = [0.0f32; 3];
                for (dz, wz) in [(0usize, 1.0 - t[0]), (1, t[0])] {
                    for (dy, wy) in [(0usize, 1.0 - t[1]), (1, t[1])] {
                        for (dx, wx) in [(0usize, 1.0 - t[2]), (1, t[2])] {
                            let wgt = wz * wy * wx;
                            if wgt == 0.0 {
                                continue;
                            }
                            let zz = (f[0] + dz).min(g[0] - 1);
                            let yy = (f[1] + dy).min(g[1] - 1);
                            let xx = (f[2] + dx).min(g[2] - 1);
                            for c in 0..3 {
                                dv[c] += wgt * disp[gidx(zz, yy, xx, c)];
                            }
                        }
                    }
                }
                let p = [d as f32 + dv[0], h as f32 + dv[1], w as f32 + dv[2]];
                out.set(d, h, w, sample_trilinear(v, p));
            }
        }
    }
    out
}

/// Crop a box and trilinearly resize it back to the full shape
/// (align-corners mapping).
fn crop_resize(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Volume {
    let shape = v.shape();
    let mut out = Volume::zeros(shape);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let map = |o: usize, s: usize, full: usize, i: usize| -> f32 {
                    if full <= 1 {
                        o as f32
                    } else {
                        o as f32 + i as f32 * (s as f32 - 1.0) / (full as f32 - 1.0)
                    }
                };
                let p = [
                    map(origin[0], size[0], shape[0], d),
                    map(origin[1], size[1], shape[1], h),
                    map(origin[2], size[2], shape[2], w),
                ];
                out.set(d, h, w, sample_trilinear(v, p));
            }
        }
    }
    out
}

/// Joint flip/rotation of a (volume, labels) pair; labels move by the same
/// index permutation, so no interpolation touches them.
pub fn flip_rot_pair(
    vol: &Volume,
    labels: &LabelVolume,
    rng: &mut ChaCha8Rng,
) -> (Volume, LabelVolume) {
    let shape = vol.shape();
    let mut axes = [false; 3];
    for a in &mut axes {
        *a = rng.gen_bool(0.5);
    }
    let square_hw = shape[1] == shape[2];
    let turns = if square_hw { rng.gen_range(0..4u8) } else { 0 };

    let mut out_v = flip(vol, axes);
    let mut out_l = flip_labels(labels, axes);
    for _ in 0..turns {
        out_v = rot90_once(&out_v, 0);
        out_l = rot90_labels_once(&out_l);
    }
    (out_v, out_l)
}

fn flip_labels(v: &LabelVolume, axes: [bool; 3]) -> LabelVolume {
    let shape = v.shape();
    let mut out = LabelVolume::zeros(shape);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let sd = if axes[0] { shape[0] - 1 - d } else { d };
                let sh = if axes[1] { shape[1] - 1 - h } else { h };
                let sw = if axes[2] { shape[2] - 1 - w } else { w };
                out.set(d, h, w, v.get(sd, sh, sw));
            }
        }
    }
    out
}

fn rot90_labels_once(v: &LabelVolume) -> LabelVolume {
    let shape = v.shape();
    let mut out = LabelVolume::zeros(shape);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                out.set(d, h, w, v.get(d, w, shape[2] - 1 - h));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_patch(shape: [usize; 3], seed: u64) -> Volume {
        let mut r = rng::from_seed(seed);
        let n: usize = shape.iter().product();
        Volume::new(shape, (0..n).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_specs_are_bit_exact_identities() {
        let patch = rand_patch([16, 16, 16], 1);
        let mut r = rng::from_seed(2);
        let (w, wr) = augment_weak(&patch, &WeakAugmentSpec::identity(), &mut r).unwrap();
        assert_eq!(w, patch);
        assert!(wr.steps.is_empty());
        let (s, sr) = augment_strong(&patch, &StrongAugmentSpec::identity(), &mut r).unwrap();
        assert_eq!(s, patch);
        assert!(sr.steps.is_empty());

        let pair = make_pair(
            &patch,
            &WeakAugmentSpec::identity(),
            &StrongAugmentSpec::identity(),
            &mut r,
        )
        .unwrap();
        assert_eq!(pair.weak, patch);
        assert_eq!(pair.strong, patch);
        assert_eq!(pair.original, patch);
    }

    #[test]
    fn neutral_parameters_are_identity() {
        // gamma = 1 and sigma = 0 with probability 1 leave the patch untouched.
        let patch = rand_patch([16, 16, 16], 3);
        let spec = StrongAugmentSpec {
            gamma_range: [1.0, 1.0],
            gamma_prob: 1.0,
            noise_sigma: 0.0,
            noise_prob: 1.0,
            ..StrongAugmentSpec::identity()
        };
        let mut r = rng::from_seed(4);
        let (s, _) = augment_strong(&patch, &spec, &mut r).unwrap();
        assert_eq!(s, patch);
    }

    #[test]
    fn flip_is_involution_via_replay() {
        let patch = rand_patch([16, 16, 16], 5);
        let record = TransformRecord {
            steps: vec![TransformStep::Flip {
                axes: [false, false, true],
            }],
        };
        let once = apply_record(&patch, &record).unwrap();
        let twice = apply_record(&once, &record).unwrap();
        assert_ne!(once, patch);
        assert_eq!(twice, patch);
    }

    #[test]
    fn rot90_matches_index_permutation_oracle() {
        // Single bright voxel at (d, h, w) = (0, 0, 1); one turn about D.
        let mut patch = Volume::zeros([8, 8, 8]);
        patch.set(0, 0, 1, 1.0);
        let record = TransformRecord {
            steps: vec![TransformStep::Rotate90 { axis: 0, turns: 1 }],
        };
        let out = apply_record(&patch, &record).unwrap();

        // Oracle: out[h][w] = in[w][n-1-h] ⇒ source (0,0,1) lands where
        // w_src = 0*? enumerate: find the bright voxel.
        let n = 8;
        let mut found = None;
        for h in 0..n {
            for w in 0..n {
                if out.get(0, h, w) == 1.0 {
                    found = Some((h, w));
                }
            }
        }
        // in (h=0, w=1): out[h][w] = in[w][n-1-h] → need w=0 and n-1-h=1.
        assert_eq!(found, Some((n - 2, 0)));

        // Full permutation oracle on a random patch, all four turn counts.
        let patch = rand_patch([8, 8, 8], 6);
        for turns in 1..4u8 {
            let out = apply_record(
                &patch,
                &TransformRecord {
                    steps: vec![TransformStep::Rotate90 { axis: 0, turns }],
                },
            )
            .unwrap();
            for d in 0..8 {
                for h in 0..8 {
                    for w in 0..8 {
                        // Apply the single-turn permutation `turns` times.
                        let (mut sh, mut sw) = (h, w);
                        for _ in 0..turns {
                            let (nh, nw) = (sw, 8 - 1 - sh);
                            sh = nh;
                            sw = nw;
                        }
                        assert_eq!(out.get(d, h, w), patch.get(d, sh, sw));
                    }
                }
            }
        }
    }

    #[test]
    fn four_turns_is_identity() {
        let patch = rand_patch([8, 8, 8], 7);
        let mut cur = patch.clone();
        for _ in 0..4 {
            cur = apply_record(
                &cur,
                &TransformRecord {
                    steps: vec![TransformStep::Rotate90 { axis: 2, turns: 1 }],
                },
            )
            .unwrap();
        }
        assert_eq!(cur, patch);
    }

    #[test]
    fn records_replay_bit_exactly() {
        let patch = rand_patch([16, 16, 16], 8);
        for seed in 0..20u64 {
            let mut r = rng::from_seed(100 + seed);
            let pair = make_pair(
                &patch,
                &WeakAugmentSpec::default(),
                &StrongAugmentSpec::default(),
                &mut r,
            )
            .unwrap();
            assert_eq!(apply_record(&patch, &pair.weak_record).unwrap(), pair.weak);
            assert_eq!(
                apply_record(&patch, &pair.strong_record).unwrap(),
                pair.strong
            );

            // Records survive JSON round trips.
            let json = serde_json::to_string(&pair.strong_record).unwrap();
            let back: TransformRecord = serde_json::from_str(&json).unwrap();
            assert_eq!(apply_record(&patch, &back).unwrap(), pair.strong);
        }
    }

    #[test]
    fn fixed_seed_reproduces_pair() {
        let patch = rand_patch([16, 16, 16], 9);
        let run = || {
            let mut r = rng::from_seed(77);
            make_pair(
                &patch,
                &WeakAugmentSpec::default(),
                &StrongAugmentSpec::default(),
                &mut r,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.weak, b.weak);
        assert_eq!(a.strong, b.strong);
        assert_eq!(a.weak_record, b.weak_record);
        assert_eq!(a.strong_record, b.strong_record);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let patch = rand_patch([16, 16, 16], 10);
        for seed in 0..30u64 {
            let mut r = rng::from_seed(200 + seed);
            let pair = make_pair(
                &patch,
                &WeakAugmentSpec::default(),
                &StrongAugmentSpec::default(),
                &mut r,
            )
            .unwrap();
            for v in [&pair.weak, &pair.strong] {
                let (lo, hi) = v.min_max();
                assert!(lo >= 0.0 && hi <= 1.0, "range [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn mask_fraction_matches_ratio() {
        // mask ratio 0.5, 8^3 blocks on a 32^3 patch → zero fraction in [0.45, 0.55].
        let patch = rand_patch([32, 32, 32], 11).map_nonzero();
        let spec = StrongAugmentSpec {
            mask_ratio: 0.5,
            mask_block: 8,
            mask_prob: 1.0,
            ..StrongAugmentSpec::identity()
        };
        let mut r = rng::from_seed(12);
        let (s, record) = augment_strong(&patch, &spec, &mut r).unwrap();
        assert!(matches!(record.steps[0], TransformStep::Mask { .. }));
        let zeros = s.voxels().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / s.voxels().len() as f64;
        assert!((0.45..=0.55).contains(&frac), "zero fraction {frac}");
    }

    #[test]
    fn masked_blocks_exactly_zero() {
        let patch = rand_patch([16, 16, 16], 13).map_nonzero();
        let record = TransformRecord {
            steps: vec![TransformStep::Mask {
                origins: vec![[0, 0, 0], [8, 8, 8]],
                block: 8,
            }],
        };
        let out = apply_record(&patch, &record).unwrap();
        for d in 0..8 {
            for h in 0..8 {
                for w in 0..8 {
                    assert_eq!(out.get(d, h, w), 0.0);
                    assert_eq!(out.get(d + 8, h + 8, w + 8), 0.0);
                }
            }
        }
        // Outside the blocks: untouched.
        assert_eq!(out.get(0, 8, 0), patch.get(0, 8, 0));
    }

    #[test]
    fn gamma_closed_form_within_one_ulp() {
        for gamma in [0.5f32, 0.8, 1.3, 2.0] {
            let mut patch = Volume::zeros([8, 8, 8]);
            patch.set(0, 0, 0, 0.0);
            patch.set(0, 0, 1, 0.25);
            patch.set(0, 0, 2, 1.0);
            let out = apply_record(
                &patch,
                &TransformRecord {
                    steps: vec![TransformStep::Gamma { exponent: gamma }],
                },
            )
            .unwrap();
            for (i, v) in [0.0f32, 0.25, 1.0].iter().enumerate() {
                let expected = v.powf(gamma);
                let got = out.get(0, 0, i);
                let ulp = (got.to_bits() as i64 - expected.to_bits() as i64).abs();
                assert!(ulp <= 1, "gamma {gamma} at {v}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn gamma_monotone_on_unit_interval() {
        let vals: Vec<f32> = (0..=20).map(|i| i as f32 / 20.0).collect();
        for gamma in [0.5f32, 1.7] {
            let mapped: Vec<f32> = vals.iter().map(|v| v.powf(gamma)).collect();
            for pair in mapped.windows(2) {
                assert!(pair[0] <= pair[1]);
            }
        }
    }

    #[test]
    fn strong_distorts_more_than_weak_on_average() {
        // Structured synthetic content, not white noise: geometric moves on
        // noise saturate the distance and say nothing about the pipelines.
        let (mut patch, _) = crate::synth::synth_volume(&crate::synth::SynthSpec {
            shape: [16, 16, 16],
            instances: [2, 2],
            morphology: crate::synth::Morphology::Mixed,
            noise_amplitude: 0.08,
            boundary_width: 1,
            seed: 99,
        })
        .unwrap();
        patch.normalize();
        let mut dw_total = 0.0f64;
        let mut ds_total = 0.0f64;
        for seed in 0..100u64 {
            let mut r = rng::from_seed(300 + seed);
            let pair = make_pair(
                &patch,
                &WeakAugmentSpec::default(),
                &StrongAugmentSpec::default(),
                &mut r,
            )
            .unwrap();
            let mean_abs = |a: &Volume, b: &Volume| {
                a.voxels()
                    .iter()
                    .zip(b.voxels())
                    .map(|(x, y)| (x - y).abs() as f64)
                    .sum::<f64>()
                    / a.voxels().len() as f64
            };
            dw_total += mean_abs(&pair.weak, &patch);
            ds_total += mean_abs(&pair.strong, &patch);
        }
        assert!(
            ds_total >= dw_total,
            "strong {ds_total} should distort at least as much as weak {dw_total}"
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad_mask = StrongAugmentSpec {
            mask_ratio: 0.9,
            ..StrongAugmentSpec::default()
        };
        assert!(bad_mask.validate().is_err());

        let bad_gamma = StrongAugmentSpec {
            gamma_range: [0.0, 1.0],
            ..StrongAugmentSpec::default()
        };
        assert!(bad_gamma.validate().is_err());

        let bad_prob = StrongAugmentSpec {
            noise_prob: 1.5,
            ..StrongAugmentSpec::default()
        };
        assert!(bad_prob.validate().is_err());

        let patch = rand_patch([8, 8, 8], 15);
        let bad_translation = WeakAugmentSpec {
            translation: [8, 0, 0],
            ..WeakAugmentSpec::identity()
        };
        let mut r = rng::from_seed(16);
        assert!(augment_weak(&patch, &bad_translation, &mut r).is_err());
    }

    #[test]
    fn flip_rot_pair_moves_labels_consistently() {
        let mut vol = Volume::zeros([8, 8, 8]);
        let mut labels = LabelVolume::zeros([8, 8, 8]);
        vol.set(1, 2, 3, 1.0);
        labels.set(1, 2, 3, 7);
        let mut r = rng::from_seed(17);
        for _ in 0..10 {
            let (v2, l2) = flip_rot_pair(&vol, &labels, &mut r);
            let vi = v2.voxels().iter().position(|&x| x == 1.0).unwrap();
            let li = l2.voxels().iter().position(|&x| x == 7).unwrap();
            assert_eq!(vi, li, "intensity and label must move together");
        }
    }

    impl Volume {
        /// Test helper: lift all voxels strictly above zero.
        fn map_nonzero(&self) -> Volume {
            let mut v = self.clone();
            for x in v.voxels_mut() {
                *x = x.max(1e-3);
            }
            v
        }
    }
}
