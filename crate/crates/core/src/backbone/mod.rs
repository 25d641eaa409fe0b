//! Shared-weight encoder–decoder backbones and their parameter store.
//!
//! Both variants produce an N-level feature pyramid from decoder stages,
//! coarse (w1) to full-resolution (wN), plus a 1-channel reconstruction head
//! squashed to (0, 1). There are no encoder→decoder skip connections: the
//! decoder sees the encoder only through the bottleneck, which `encode` /
//! `decode` make structural.

pub mod checkpoint;
mod unet;
mod vit;

use std::collections::HashMap;


use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::SpecError;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial edge of the pooled pyramid levels.
pub const POOL_TARGET_DEFAULT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    UnetNoskip,
    Vit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    /// Cubic token edge; must divide the patch shape and equal 2^(N-1).
    pub token_size: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            token_size: 4,
            embed_dim: 64,
            blocks: 2,
            heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub patch_shape: [usize; 3],
    /// Pyramid channel counts, deepest (coarsest) level first; len = N.
    pub channels: Vec<usize>,
    #[serde(default = "default_pool_target")]
    pub pool_target: usize,
    #[serde(default)]
    pub vit: Option<VitConfig>,
}

fn default_pool_target() -> usize {
    POOL_TARGET_DEFAULT
}

impl BackboneConfig {
    pub fn unet_default() -> Self {
        Self {
            variant: BackboneVariant::UnetNoskip,
            patch_shape: [32, 32, 32],
            channels: vec![32, 16, 8],
            pool_target: POOL_TARGET_DEFAULT,
            vit: None,
        }
    }

    pub fn vit_default() -> Self {
        Self {
            variant: BackboneVariant::Vit,
            patch_shape: [32, 32, 32],
            channels: vec![32, 16, 8],
            pool_target: POOL_TARGET_DEFAULT,
            vit: Some(VitConfig::default()),
        }
    }

    pub fn level_count(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let mut v = Vec::new();
        let n = self.channels.len();
        if n < 2 {
            v.push(format!("pyramid needs at least 2 levels, got {n}"));
        }
        if self.channels.iter().any(|&c| c == 0) {
            v.push(format!("zero channel count in {:?}", self.channels));
        }
        if self.pool_target == 0 {
            v.push("pool target must be >= 1".to_string());
        }
        let factor = 1usize << n.saturating_sub(1);
        for &d in &self.patch_shape {
            if d == 0 || d % factor != 0 {
                v.push(format!(
                    "patch dim {d} not divisible by 2^(N-1) = {factor}"
                ));
            }
        }
        match (self.variant, &self.vit) {
            (BackboneVariant::Vit, Some(vc)) => {
                if vc.token_size == 0 || self.patch_shape.iter().any(|&d| d % vc.token_size != 0) {
                    v.push(format!(
                        "token size {} must divide patch shape {:?}",
                        vc.token_size, self.patch_shape
                    ));
                }
                if vc.token_size != factor {
                    v.push(format!(
                        "token size {} must equal 2^(N-1) = {factor} so the decoder \
                         reaches full resolution",
                        vc.token_size
                    ));
                }
                if vc.embed_dim == 0 || vc.heads == 0 || vc.embed_dim % vc.heads != 0 {
                    v.push(format!(
                        "embed dim {} must be a positive multiple of head count {}",
                        vc.embed_dim, vc.heads
                    ));
                }
            }
            (BackboneVariant::Vit, None) => v.push("vit variant needs vit settings".into()),
            (BackboneVariant::UnetNoskip, Some(_)) => {
                v.push("unet_noskip variant must not carry vit settings".into())
            }
            (BackboneVariant::UnetNoskip, None) => {}
        }
        SpecError::check("BackboneConfig", v)
    }

    /// (channels, spatial shape) of pyramid level j = 0..N, coarse to fine.
    pub fn level_shapes(&self) -> Vec<(usize, [usize; 3])> {
        let n = self.channels.len();
        (0..n)
            .map(|j| {
                let div = 1usize << (n - 1 - j);
                (
                    self.channels[j],
                    [
                        self.patch_shape[0] / div,
                        self.patch_shape[1] / div,
                        self.patch_shape[2] / div,
                    ],
                )
            })
            .collect()
    }

    fn vit_grid(&self) -> [usize; 3] {
        let p = self.vit.as_ref().expect("vit config").token_size;
        [
            self.patch_shape[0] / p,
            self.patch_shape[1] / p,
            self.patch_shape[2] / p,
        ]
    }
}

/// Head attached on top of the shared backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Pretraining heads: token projection, attention Q/K/V, asymmetric MLP.
    Pretrain,
    /// 3-channel affinity head for finetuning.
    Affinity,
}

/// Dimensions of the pretraining loss heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossHeadConfig {
    /// Token embedding dimension d.
    #[serde(default = "default_token_dim")]
    pub token_dim: usize,
    /// Hidden width of the asymmetric MLP in the similarity loss.
    #[serde(default = "default_asym_hidden")]
    pub asym_hidden: usize,
}

fn default_token_dim() -> usize {
    64
}
fn default_asym_hidden() -> usize {
    64
}

impl Default for LossHeadConfig {
    fn default() -> Self {
        Self {
            token_dim: default_token_dim(),
            asym_hidden: default_asym_hidden(),
        }
    }
}

/// Backbone plus head dimensions: everything that determines parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    #[serde(default)]
    pub loss_heads: LossHeadConfig,
}

impl ModelConfig {
    pub fn pretrain(backbone: BackboneConfig, loss_heads: LossHeadConfig) -> Self {
        Self {
            backbone,
            head: HeadKind::Pretrain,
            loss_heads,
        }
    }

    pub fn affinity(backbone: BackboneConfig) -> Self {
        Self {
            backbone,
            head: HeadKind::Affinity,
            loss_heads: LossHeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        self.backbone.validate()?;
        let mut v = Vec::new();
        if self.loss_heads.token_dim == 0 {
            v.push("token dim must be >= 1".into());
        }
        if self.loss_heads.asym_hidden == 0 {
            v.push("asymmetric MLP hidden width must be >= 1".into());
        }
        SpecError::check("ModelConfig", v)
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    /// He fan-in normal for conv weights; fan_in = cin * k^3.
    HeConv,
    /// Normal with std 1/sqrt(fan_in) for linear and attention matrices.
    ScaledNormal { fan_in: usize },
    Zeros,
    Ones,
    /// Positional embedding scale.
    SmallNormal,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

/// Ordered named parameter tensors; both Siamese branches reference one set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn from_entries(entries: Vec<(String, Tensor<S>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self { entries, index }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<S> {
        &self.entries[i].1
    }

    /// Total scalar parameter count.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let mut off = flat;
        for (i, (_, t)) in self.entries.iter().enumerate() {
            if off < t.len() {
                return (i, off);
            }
            off -= t.len();
        }
        panic!("flat index {flat} out of range {}", self.flat_len());
    }

    pub fn get_flat(&self, flat: usize) -> S {
        let (e, o) = self.locate(flat);
        self.entries[e].1.data()[o]
    }

    pub fn set_flat(&mut self, flat: usize, v: S) {
        let (e, o) = self.locate(flat);
        self.entries[e].1.data_mut()[o] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        ParameterSet::from_entries(
            self.entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        )
    }
}

/// Tape handles for one parameter set, shared by every forward in a step.
pub struct ParamVars {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn leaf_all<S: Scalar>(tape: &Tape<S>, params: &ParameterSet<S>) -> Self {
        let vars: Vec<(String, Var)> = params
            .iter()
            .map(|(n, t)| (n.to_string(), tape.leaf(t.clone())))
            .collect();
        let index = vars
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self { vars, index }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))]
        .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

// ---------------------------------------------------------------------------
// Parameter manifests, init, count
// ---------------------------------------------------------------------------

fn conv_spec(name: &str, cout: usize, cin: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.w"),
            shape: vec![cout, cin, k, k, k],
            init: InitKind::HeConv,
        },
        ParamSpec {
            name: format!("{name}.b"),
            shape: vec![cout],
            init: InitKind::Zeros,
        },
    ]
}

fn linear_spec(name: &str, out: usize, inp: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.w"),
            shape: vec![out, inp],
            init: InitKind::ScaledNormal { fan_in: inp },
        },
        ParamSpec {
            name: format!("{name}.b"),
            shape: vec![out],
            init: InitKind::Zeros,
        },
    ]
}

fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let bb = &config.backbone;
    let n = bb.level_count();
    let mut specs = Vec::new();

    match bb.variant {
        BackboneVariant::UnetNoskip => {
            // Encoder: stem at full res, then N-1 stride-2 downs to the bottleneck.
            let mut enc_in = 1;
            for i in 0..n {
                let cout = bb.channels[n - 1 - i];
                specs.extend(conv_spec(&format!("enc.{i}"), cout, enc_in, 3));
                enc_in = cout;
            }
        }
        BackboneVariant::Vit => {
            let vc = bb.vit.as_ref().expect("validated");
            let p3 = vc.token_size.pow(3);
            let tokens: usize = bb.vit_grid().iter().product();
            specs.extend(linear_spec("embed", vc.embed_dim, p3));
            specs.push(ParamSpec {
                name: "pos".into(),
                shape: vec![tokens, vc.embed_dim],
                init: InitKind::SmallNormal,
            });
            for i in 0..vc.blocks {
                for ln in ["ln1", "ln2"] {
                    specs.push(ParamSpec {
                        name: format!("blk{i}.{ln}.g"),
                        shape: vec![vc.embed_dim],
                        init: InitKind::Ones,
                    });
                    specs.push(ParamSpec {
                        name: format!("blk{i}.{ln}.b"),
                        shape: vec![vc.embed_dim],
                        init: InitKind::Zeros,
                    });
                }
                specs.extend(linear_spec(
                    &format!("blk{i}.qkv"),
                    3 * vc.embed_dim,
                    vc.embed_dim,
                ));
                specs.extend(linear_spec(
                    &format!("blk{i}.proj"),
                    vc.embed_dim,
                    vc.embed_dim,
                ));
                specs.extend(linear_spec(
                    &format!("blk{i}.mlp1"),
                    4 * vc.embed_dim,
                    vc.embed_dim,
                ));
                specs.extend(linear_spec(
                    &format!("blk{i}.mlp2"),
                    vc.embed_dim,
                    4 * vc.embed_dim,
                ));
            }
            specs.push(ParamSpec {
                name: "lnf.g".into(),
                shape: vec![vc.embed_dim],
                init: InitKind::Ones,
            });
            specs.push(ParamSpec {
                name: "lnf.b".into(),
                shape: vec![vc.embed_dim],
                init: InitKind::Zeros,
            });
        }
    }

    // Decoder: N conv stages from the bottleneck, coarse to fine.
    let mut dec_in = match bb.variant {
        BackboneVariant::UnetNoskip => bb.channels[0],
        BackboneVariant::Vit => bb.vit.as_ref().expect("validated").embed_dim,
    };
    for (j, &cout) in bb.channels.iter().enumerate() {
        specs.extend(conv_spec(&format!("dec.{j}"), cout, dec_in, 3));
        dec_in = cout;
    }

    match config.head {
        HeadKind::Pretrain => {
            let d = config.loss_heads.token_dim;
            let t3 = bb.pool_target.pow(3);
            for (j, &c) in bb.channels.iter().enumerate() {
                specs.extend(linear_spec(&format!("adapter{j}"), d, c * t3));
            }
            specs.extend(linear_spec("token_mlp.1", d, d));
            specs.extend(linear_spec("token_mlp.2", d, d));
            for m in ["q", "k", "v"] {
                specs.push(ParamSpec {
                    name: format!("attn.{m}"),
                    shape: vec![d, d],
                    init: InitKind::ScaledNormal { fan_in: d },
                });
            }
            let l = n * t3;
            let h = config.loss_heads.asym_hidden;
            specs.extend(linear_spec("asym.1", h, l));
            specs.extend(linear_spec("asym.2", l, h));
            // Reconstruction head: 1x1x1 projection to one channel.
            specs.extend(conv_spec("recon", 1, *bb.channels.last().unwrap(), 1));
        }
        HeadKind::Affinity => {
            specs.extend(conv_spec("affinity", 3, *bb.channels.last().unwrap(), 1));
        }
    }
    specs
}

/// Total learnable scalar count for a config.
pub fn count_parameters(config: &ModelConfig) -> usize {
    param_specs(config)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Deterministic initialization: He fan-in for convs, scaled normal for
/// linear/attention weights, zero biases.
pub fn init_parameters<S: Scalar>(config: &ModelConfig, seed: u64) -> ParameterSet<S> {
    let mut r = rng::stream(seed, 0, rng::StreamKind::Init);
    let entries = param_specs(config)
        .into_iter()
        .map(|spec| {
            let count: usize = spec.shape.iter().product();
            let data: Vec<S> = match spec.init {
                InitKind::Zeros => vec![S::zero(); count],
                InitKind::Ones => vec![S::one(); count],
                InitKind::HeConv => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let dist = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
                    (0..count)
                        .map(|_| S::cast_from(dist.sample(&mut r)))
                        .collect()
                }
                InitKind::ScaledNormal { fan_in } => {
                    let dist = Normal::new(0.0f64, (fan_in as f64).sqrt().recip()).unwrap();
                    (0..count)
                        .map(|_| S::cast_from(dist.sample(&mut r)))
                        .collect()
                }
                InitKind::SmallNormal => {
                    let dist = Normal::new(0.0f64, 0.02).unwrap();
                    (0..count)
                        .map(|_| S::cast_from(dist.sample(&mut r)))
                        .collect()
                }
            };
            (spec.name, Tensor::from_vec(&spec.shape, data))
        })
        .collect();
    ParameterSet::from_entries(entries)
}

/// Test hook: all weights zero. Forward output becomes input-independent.
pub fn zero_parameters<S: Scalar>(config: &ModelConfig) -> ParameterSet<S> {
    ParameterSet::from_entries(
        param_specs(config)
            .into_iter()
            .map(|spec| (spec.name, Tensor::zeros(&spec.shape)))
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Pyramid of decoder features plus the squashed reconstruction.
pub struct PyramidVars {
    /// Coarse-to-fine decoder outputs w1..wN.
    pub levels: Vec<Var>,
    /// (B, 1, D, H, W) reconstruction in (0, 1). Only for pretrain heads.
    pub recon: Option<Var>,
}

/// Encoder: input batch (B, 1, D, H, W) → bottleneck representation.
pub fn encode<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    config: &BackboneConfig,
    x: Var,
) -> Var {
    match config.variant {
        BackboneVariant::UnetNoskip => unet::encode(tape, pv, config, x),
        BackboneVariant::Vit => vit::encode(tape, pv, config, x),
    }
}

/// Decoder: bottleneck → pyramid levels. Reads no encoder state.
pub fn decode<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    config: &BackboneConfig,
    bottleneck: Var,
) -> Vec<Var> {
    let start = match config.variant {
        BackboneVariant::UnetNoskip => bottleneck,
        BackboneVariant::Vit => tape.tokens_to_grid(bottleneck, config.vit_grid()),
    };
    let mut levels = Vec::with_capacity(config.level_count());
    let mut cur = start;
    for j in 0..config.level_count() {
        if j > 0 {
            cur = tape.upsample2(cur);
        }
        let w = pv.get(&format!("dec.{j}.w"));
        let b = pv.get(&format!("dec.{j}.b"));
        cur = tape.relu(tape.conv3d(cur, w, b, 1));
        levels.push(cur);
    }
    levels
}

/// Full forward: pyramid plus reconstruction head (pretrain parameter sets).
pub fn forward<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    config: &BackboneConfig,
    x: Var,
    with_recon: bool,
) -> PyramidVars {
    let bottleneck = encode(tape, pv, config, x);
    let levels = decode(tape, pv, config, bottleneck);
    let recon = with_recon.then(|| {
        let w = pv.get("recon.w");
        let b = pv.get("recon.b");
        tape.sigmoid(tape.conv3d(*levels.last().unwrap(), w, b, 1))
    });
    PyramidVars { levels, recon }
}

/// Affinity forward: pyramid top feature → 3-channel logits (no squash; the
/// loss works on logits, inference applies the sigmoid).
pub fn forward_affinity_logits<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    config: &BackboneConfig,
    x: Var,
) -> Var {
    let bottleneck = encode(tape, pv, config, x);
    let levels = decode(tape, pv, config, bottleneck);
    let w = pv.get("affinity.w");
    let b = pv.get("affinity.b");
    tape.conv3d(*levels.last().unwrap(), w, b, 1)
}

/// Adaptive-pool every pyramid level to the configured target edge.
pub fn pool_pyramid<S: Scalar>(tape: &Tape<S>, levels: &[Var], target: usize) -> Vec<Var> {
    levels
        .iter()
        .map(|&l| tape.adaptive_pool(l, target))
        .collect()
}

#[cfg(test)]
mod tests;
