//! Synthetic EM-like volume generation.
//!
//! Instances are ellipsoid blobs and curved tubes with bright interiors and a
//! darkened 1-2 voxel boundary shell (membrane analogue), over a textured
//! background with band-limited additive noise. A (spec, seed) pair fully
//! determines the output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SpecError;
use crate::rng;
use crate::volume::{LabelVolume, Volume};

/// Instance shape families to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Morphology {
    Ellipsoid,
    Tube,
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub shape: [usize; 3],
    /// Inclusive instance count range.
    pub instances: [u32; 2],
    #[serde(default = "default_morphology")]
    pub morphology: Morphology,
    /// Amplitude of the band-limited texture noise, in intensity units.
    #[serde(default = "default_noise")]
    pub noise_amplitude: f32,
    /// Darkened shell thickness in voxels.
    #[serde(default = "default_boundary_width")]
    pub boundary_width: usize,
    pub seed: u64,
}

fn default_morphology() -> Morphology {
    Morphology::Mixed
}
fn default_noise() -> f32 {
    0.08
}
fn default_boundary_width() -> usize {
    2
}

/// Every placed instance is kept at least this many voxels and 6-connected,
/// so affinity round trips reproduce it exactly.
pub const MIN_INSTANCE_VOXELS: usize = 16;

const BACKGROUND_LEVEL: f32 = 0.35;
const INTERIOR_LEVEL: f32 = 0.78;
const MEMBRANE_LEVEL: f32 = 0.08;
const PLACEMENT_ATTEMPTS: usize = 200;

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let mut violations = Vec::new();
        if self.shape.iter().any(|&d| d < crate::volume::MIN_VOLUME_DIM) {
            violations.push(format!("shape {:?} below minimum dim 8", self.shape));
        }
        if self.instances[0] > self.instances[1] {
            violations.push(format!(
                "instance range [{}, {}] is empty",
                self.instances[0], self.instances[1]
            ));
        }
        if !self.noise_amplitude.is_finite() || self.noise_amplitude < 0.0 {
            violations.push(format!("noise amplitude {} invalid", self.noise_amplitude));
        }
        SpecError::check("SynthSpec", violations)
    }
}

/// Generate one textured intensity volume and its instance labels.
pub fn synth_volume(spec: &SynthSpec) -> Result<(Volume, LabelVolume), SpecError> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, 0, rng::StreamKind::Synth);
    let shape = spec.shape;
    let n: usize = shape.iter().product();

    let mut labels = LabelVolume::zeros(shape);
    let count = rng.gen_range(spec.instances[0]..=spec.instances[1]) as usize;
    for id in 1..=count {
        place_instance(&mut labels, id as u32, spec, &mut rng)?;
    }

    // Distance-to-exterior shell, up to boundary_width deep.
    let shell = boundary_shell(&labels, spec.boundary_width);

    let texture = band_limited_noise(shape, spec.noise_amplitude, &mut rng);
    let mut voxels = vec![0.0f32; n];
    for i in 0..n {
        let base = if labels.voxels()[i] == 0 {
            BACKGROUND_LEVEL
        } else if shell[i] {
            MEMBRANE_LEVEL
        } else {
            INTERIOR_LEVEL
        };
        voxels[i] = (base + texture[i]).clamp(0.0, 1.0);
    }

    let volume = Volume::new(shape, voxels)?;
    Ok((volume, labels))
}

fn place_instance(
    labels: &mut LabelVolume,
    id: u32,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(), SpecError> {
    let shape = labels.shape();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let candidate = match spec.morphology {
            Morphology::Ellipsoid => ellipsoid_mask(shape, rng),
            Morphology::Tube => tube_mask(shape, rng),
            Morphology::Mixed => {
                if rng.gen_bool(0.5) {
                    ellipsoid_mask(shape, rng)
                } else {
                    tube_mask(shape, rng)
                }
            }
        };
        if candidate.len() < MIN_INSTANCE_VOXELS {
            continue;
        }
        if candidate.iter().any(|&i| labels.voxels()[i] != 0) {
            continue;
        }
        if !is_six_connected(&candidate, shape) {
            continue;
        }
        for &i in &candidate {
            labels.voxels_mut()[i] = id;
        }
        return Ok(());
    }
    Err(SpecError::new(
        "SynthSpec",
        vec![format!(
            "could not place instance {id} after {PLACEMENT_ATTEMPTS} attempts; \
             shape {shape:?} is too crowded for the requested count"
        )],
    ))
}

fn ellipsoid_mask(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let min_dim = shape.iter().copied().min().unwrap() as f32;
    let max_r = (min_dim / 5.0).clamp(2.5, 7.0);
    let center: [f32; 3] = [
        rng.gen_range(0.0..shape[0] as f32),
        rng.gen_range(0.0..shape[1] as f32),
        rng.gen_range(0.0..shape[2] as f32),
    ];
    let radii: [f32; 3] = [
        rng.gen_range(2.2..max_r),
        rng.gen_range(2.2..max_r),
        rng.gen_range(2.2..max_r),
    ];
    let mut out = Vec::new();
    let lo = |c: f32, r: f32| (c - r).floor().max(0.0) as usize;
    let hi = |c: f32, r: f32, n: usize| ((c + r).ceil() as usize + 1).min(n);
    for d in lo(center[0], radii[0])..hi(center[0], radii[0], shape[0]) {
        for h in lo(center[1], radii[1])..hi(center[1], radii[1], shape[1]) {
            for w in lo(center[2], radii[2])..hi(center[2], radii[2], shape[2]) {
                let dd = (d as f32 - center[0]) / radii[0];
                let dh = (h as f32 - center[1]) / radii[1];
                let dw = (w as f32 - center[2]) / radii[2];
                if dd * dd + dh * dh + dw * dw <= 1.0 {
                    out.push((d * shape[1] + h) * shape[2] + w);
                }
            }
        }
    }
    out
}

fn tube_mask(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let min_dim = shape.iter().copied().min().unwrap() as f32;
    let radius = rng.gen_range(1.6..(min_dim / 8.0).clamp(1.8, 3.2));
    let steps = rng.gen_range((min_dim * 0.6) as usize..(min_dim * 1.4) as usize);

    let mut pos: [f32; 3] = [
        rng.gen_range(0.0..shape[0] as f32),
        rng.gen_range(0.0..shape[1] as f32),
        rng.gen_range(0.0..shape[2] as f32),
    ];
    let mut dir = random_unit(rng);

    let mut mask = std::collections::BTreeSet::new();
    for _ in 0..steps {
        paint_ball(&mut mask, shape, pos, radius);
        // Gentle direction drift keeps the tube smooth but curved.
        let drift = random_unit(rng);
        for a in 0..3 {
            dir[a] += 0.3 * drift[a];
        }
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        for a in 0..3 {
            dir[a] /= norm;
        }
        for a in 0..3 {
            pos[a] += dir[a]; // unit step: consecutive balls overlap
        }
    }
    mask.into_iter().collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn paint_ball(
    mask: &mut std::collections::BTreeSet<usize>,
    shape: [usize; 3],
    center: [f32; 3],
    radius: f32,
) {
    let lo = |c: f32| (c - radius).floor().max(0.0) as usize;
    let hi = |c: f32, n: usize| ((c + radius).ceil() as usize + 1).min(n);
    for d in lo(center[0])..hi(center[0], shape[0]) {
        for h in lo(center[1])..hi(center[1], shape[1]) {
            for w in lo(center[2])..hi(center[2], shape[2]) {
                let dd = d as f32 - center[0];
                let dh = h as f32 - center[1];
                let dw = w as f32 - center[2];
                if dd * dd + dh * dh + dw * dw <= radius * radius {
                    mask.insert((d * shape[1] + h) * shape[2] + w);
                }
            }
        }
    }
}

fn is_six_connected(indices: &[usize], shape: [usize; 3]) -> bool {
    if indices.is_empty() {
        return false;
    }
    let set: std::collections::HashSet<usize> = indices.iter().copied().collect();
    let mut seen = std::collections::HashSet::with_capacity(indices.len());
    let mut stack = vec![indices[0]];
    seen.insert(indices[0]);
    let (sh, sw) = (shape[1], shape[2]);
    while let Some(i) = stack.pop() {
        let d = i / (sh * sw);
        let h = (i / sw) % sh;
        let w = i % sw;
        let mut push = |j: usize| {
            if set.contains(&j) && seen.insert(j) {
                stack.push(j);
            }
        };
        if d > 0 {
            push(i - sh * sw);
        }
        if d + 1 < shape[0] {
            push(i + sh * sw);
        }
        if h > 0 {
            push(i - sw);
        }
        if h + 1 < shape[1] {
            push(i + sw);
        }
        if w > 0 {
            push(i - 1);
        }
        if w + 1 < shape[2] {
            push(i + 1);
        }
    }
    seen.len() == indices.len()
}

/// BFS shell: instance voxels within `width` of a different label or the
/// volume border (exterior counts as outside).
fn boundary_shell(labels: &LabelVolume, width: usize) -> Vec<bool> {
    let shape = labels.shape();
    let n = labels.voxels().len();
    let mut shell = vec![false; n];
    if width == 0 {
        return shell;
    }
    let (sh, sw) = (shape[1], shape[2]);
    let mut frontier = Vec::new();
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let i = (d * sh + h) * sw + w;
                let lab = labels.voxels()[i];
                if lab == 0 {
                    continue;
                }
                let mut exposed = d == 0 || d + 1 == shape[0] || h == 0 || h + 1 == shape[1];
                exposed |= w == 0 || w + 1 == shape[2];
                if !exposed {
                    exposed = labels.voxels()[i - sh * sw] != lab
                        || labels.voxels()[i + sh * sw] != lab
                        || labels.voxels()[i - sw] != lab
                        || labels.voxels()[i + sw] != lab
                        || labels.voxels()[i - 1] != lab
                        || labels.voxels()[i + 1] != lab;
                }
                if exposed {
                    shell[i] = true;
                    frontier.push(i);
                }
            }
        }
    }
    for _ in 1..width {
        let mut next = Vec::new();
        for &i in &frontier {
            let lab = labels.voxels()[i];
            let d = i / (sh * sw);
            let h = (i / sw) % sh;
            let w = i % sw;
            let mut grow = |j: usize| {
                if labels.voxels()[j] == lab && !shell[j] {
                    shell[j] = true;
                    next.push(j);
                }
            };
            if d > 0 {
                grow(i - sh * sw);
            }
            if d + 1 < shape[0] {
                grow(i + sh * sw);
            }
            if h > 0 {
                grow(i - sw);
            }
            if h + 1 < shape[1] {
                grow(i + sw);
            }
            if w > 0 {
                grow(i - 1);
            }
            if w + 1 < shape[2] {
                grow(i + 1);
            }
        }
        frontier = next;
    }
    shell
}

/// Coarse-grid noise (spacing 4) trilinearly upsampled: smooth, band-limited.
fn band_limited_noise(shape: [usize; 3], amplitude: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n: usize = shape.iter().product();
    if amplitude == 0.0 {
        return vec![0.0; n];
    }
    const SPACING: usize = 4;
    let g: Vec<usize> = shape.iter().map(|&d| d.div_ceil(SPACING) + 1).collect();
    let grid: Vec<f32> = (0..g[0] * g[1] * g[2])
        .map(|_| rng.gen_range(-1.0f32..1.0) * amplitude)
        .collect();
    let gidx = |d: usize, h: usize, w: usize| (d * g[1] + h) * g[2] + w;

    let mut out = vec![0.0f32; n];
    let mut i = 0;
    for d in 0..shape[0] {
        let fd = d as f32 / SPACING as f32;
        let (d0, td) = (fd.floor() as usize, fd.fract());
        for h in 0..shape[1] {
            let fh = h as f32 / SPACING as f32;
            let (h0, th) = (fh.floor() as usize, fh.fract());
            for w in 0..shape[2] {
                let fw = w as f32 / SPACING as f32;
                let (w0, tw) = (fw.floor() as usize, fw.fract());
                let c000 = grid[gidx(d0, h0, w0)];
                let c001 = grid[gidx(d0, h0, w0 + 1)];
                let c010 = grid[gidx(d0, h0 + 1, w0)];
                let c011 = grid[gidx(d0, h0 + 1, w0 + 1)];
                let c100 = grid[gidx(d0 + 1, h0, w0)];
                let c101 = grid[gidx(d0 + 1, h0, w0 + 1)];
                let c110 = grid[gidx(d0 + 1, h0 + 1, w0)];
                let c111 = grid[gidx(d0 + 1, h0 + 1, w0 + 1)];
                let c00 = c000 + (c001 - c000) * tw;
                let c01 = c010 + (c011 - c010) * tw;
                let c10 = c100 + (c101 - c100) * tw;
                let c11 = c110 + (c111 - c110) * tw;
                let c0 = c00 + (c01 - c00) * th;
                let c1 = c10 + (c11 - c10) * th;
                out[i] = c0 + (c1 - c0) * td;
                i += 1;
            }
        }
    }
    out
}
