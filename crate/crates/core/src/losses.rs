//! The three pretraining objectives and their weighted sum.
//!
//! * Reconstruction: (1/2B) Σ (mse(recon_w, x) + mse(recon_s, x)).
//! * Cross-attention InfoNCE: bidirectional soft feature matching between the
//!   per-level token embeddings of the two branches, positives on the level
//!   diagonal, negatives the other levels of the same batch element.
//! * Multiscale similarity: negative cosine between one randomly chosen
//!   channel per pooled level, concatenated across levels, with an asymmetric
//!   MLP on the strong branch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{pool_pyramid, ModelConfig, ParamVars, PyramidVars};
use crate::error::{ShapeError, SpecError, TrainError};
use crate::scalar::Scalar;

/// Weighting coefficients of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub cross: f64,
    pub sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            cross: 0.1,
            sim: 0.1,
        }
    }
}

pub const TEMPERATURE_DEFAULT: f64 = 0.07;

/// Which objectives participate (ablation control).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossMask {
    pub recon: bool,
    pub cross: bool,
    pub sim: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self {
            recon: true,
            cross: true,
            sim: true,
        }
    }
}

impl LossMask {
    pub fn any(&self) -> bool {
        self.recon || self.cross || self.sim
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.sim {
            parts.push("sim");
        }
        if self.recon {
            parts.push("r");
        }
        if self.cross {
            parts.push("cross");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Use every (batch, level) token as a negative instead of only the other
    /// levels of the same element.
    #[serde(default)]
    pub cross_batch_negatives: bool,
    /// SimSiam-style stop-gradient on the non-MLP side of the similarity loss.
    #[serde(default)]
    pub stop_gradient_sim: bool,
    #[serde(default)]
    pub enabled: LossMask,
}

fn default_temperature() -> f64 {
    TEMPERATURE_DEFAULT
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            temperature: TEMPERATURE_DEFAULT,
            cross_batch_negatives: false,
            stop_gradient_sim: false,
            enabled: LossMask::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), SpecError> {
        let mut v = Vec::new();
        if !(self.temperature > 0.0) {
            v.push(format!("temperature {} must be > 0", self.temperature));
        }
        for (name, w) in [
            ("recon", self.weights.recon),
            ("cross", self.weights.cross),
            ("sim", self.weights.sim),
        ] {
            if !w.is_finite() {
                v.push(format!("weight {name} = {w} not finite"));
            }
        }
        if !self.enabled.any() {
            v.push("at least one loss must be enabled".to_string());
        }
        SpecError::check("LossConfig", v)
    }
}

/// The four scalars of one step, for logging and ablation reports. Disabled
/// terms are absent, not zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: Option<f64>,
    pub l_cross: Option<f64>,
    pub l_sim: Option<f64>,
    pub l_total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// The term names whose values are non-finite, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        if self.l_r.is_some_and(|v| !v.is_finite()) {
            return Some("l_r");
        }
        if self.l_cross.is_some_and(|v| !v.is_finite()) {
            return Some("l_cross");
        }
        if self.l_sim.is_some_and(|v| !v.is_finite()) {
            return Some("l_sim");
        }
        if !self.l_total.is_finite() {
            return Some("l_total");
        }
        None
    }
}

/// Tape handles of the step's objective and its parts.
pub struct TotalLossVars {
    pub total: Var,
    pub l_r: Option<Var>,
    pub l_cross: Option<Var>,
    pub l_sim: Option<Var>,
}

/// Attention products of the bidirectional soft matching.
pub struct AttendedVars {
    /// Strong-attended summaries of weak queries, (B, N, d).
    pub m: Var,
    /// Weak-attended summaries of strong queries, (B, N, d).
    pub n: Var,
    /// Weak-to-strong attention rows, (B, N, N), rows sum to 1.
    pub v: Var,
    /// Strong-to-weak attention rows, (B, N, N), rows sum to 1.
    pub omega: Var,
}

/// (1/2B) Σ_i (mse(recon_w_i, x_i) + mse(recon_s_i, x_i)).
pub fn recon_loss<S: Scalar>(
    tape: &Tape<S>,
    recon_w: Var,
    recon_s: Var,
    x_original: Var,
) -> Result<Var, ShapeError> {
    let sw = tape.shape_of(recon_w);
    let ss = tape.shape_of(recon_s);
    let sx = tape.shape_of(x_original);
    if sw != sx || ss != sx {
        return Err(ShapeError::new(
            "recon_loss",
            format!("recon_w {sw:?}, recon_s {ss:?}, x {sx:?} must all match"),
        ));
    }
    let dw = tape.sub(recon_w, x_original);
    let ds = tape.sub(recon_s, x_original);
    let msew = tape.mean_all(tape.mul(dw, dw));
    let mses = tape.mean_all(tape.mul(ds, ds));
    Ok(tape.scale(tape.add(msew, mses), S::cast_from(0.5)))
}

/// Project pooled pyramid levels to per-level d-tokens: a per-level input
/// adapter followed by the shared 2-layer MLP, identical weights for both
/// branches. Returns (B, N, d).
pub fn project_tokens<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    pooled: &[Var],
    token_dim: usize,
) -> Var {
    let n = pooled.len();
    let mut per_level = Vec::with_capacity(n);
    let mut batch = 0;
    for (j, &level) in pooled.iter().enumerate() {
        let sh = tape.shape_of(level);
        batch = sh[0];
        let flat_len: usize = sh[1..].iter().product();
        let flat = tape.reshape(level, &[batch, flat_len]);
        let adapted = tape.linear(
            flat,
            pv.get(&format!("adapter{j}.w")),
            Some(pv.get(&format!("adapter{j}.b"))),
        );
        let h = tape.relu(tape.linear(
            adapted,
            pv.get("token_mlp.1.w"),
            Some(pv.get("token_mlp.1.b")),
        ));
        let tok = tape.linear(h, pv.get("token_mlp.2.w"), Some(pv.get("token_mlp.2.b")));
        per_level.push(tok); // (B, d)
    }
    let cat = tape.concat_cols(&per_level); // (B, N*d)
    tape.reshape(cat, &[batch, n, token_dim])
}

/// Bidirectional cross-attention between weak tokens `tw` and strong tokens
/// `ts`, both (B, N, d), with shared learnable Q, K, V matrices.
pub fn cross_attention<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    tw: Var,
    ts: Var,
) -> AttendedVars {
    let sh = tape.shape_of(tw);
    let (b, n, d) = (sh[0], sh[1], sh[2]);
    let scale = S::cast_from((d as f64).sqrt().recip());
    let proj = |x: Var, w: &str| {
        let flat = tape.reshape(x, &[b * n, d]);
        let y = tape.linear(flat, pv.get(w), None);
        tape.reshape(y, &[b, n, d])
    };

    let qw = proj(tw, "attn.q");
    let ks = proj(ts, "attn.k");
    let vs = proj(ts, "attn.v");
    let v_attn = tape.softmax(tape.scale(tape.bmm(qw, ks, true), scale));
    let m = tape.bmm(v_attn, vs, false);

    let qs = proj(ts, "attn.q");
    let kw = proj(tw, "attn.k");
    let vw = proj(tw, "attn.v");
    let omega = tape.softmax(tape.scale(tape.bmm(qs, kw, true), scale));
    let n_out = tape.bmm(omega, vw, false);

    AttendedVars {
        m,
        n: n_out,
        v: v_attn,
        omega,
    }
}

/// InfoNCE over attended tokens: L2-normalize m and n, positive logit
/// m̂ᵢ·n̂ᵢ/τ, negatives the other levels (or, with `cross_batch`, every other
/// (element, level) pair).
pub fn infonce_cross_loss<S: Scalar>(
    tape: &Tape<S>,
    m: Var,
    n: Var,
    temperature: f64,
    cross_batch: bool,
) -> Result<Var, SpecError> {
    if !(temperature > 0.0) {
        return Err(SpecError::new(
            "infonce_cross_loss",
            vec![format!("temperature {temperature} must be > 0")],
        ));
    }
    let sh = tape.shape_of(m);
    let (b, lv, d) = (sh[0], sh[1], sh[2]);
    let mn = tape.l2_normalize(tape.reshape(m, &[b * lv, d]));
    let nn = tape.l2_normalize(tape.reshape(n, &[b * lv, d]));
    let (mg, ng) = if cross_batch {
        (
            tape.reshape(mn, &[1, b * lv, d]),
            tape.reshape(nn, &[1, b * lv, d]),
        )
    } else {
        (
            tape.reshape(mn, &[b, lv, d]),
            tape.reshape(nn, &[b, lv, d]),
        )
    };
    let logits = tape.scale(tape.bmm(mg, ng, true), S::cast_from(1.0 / temperature));
    Ok(tape.infonce_diag(logits))
}

/// Core of the similarity objective given the already-built concatenated
/// channel vectors: mean over the batch of −½(cos(w, s') + cos(s', w)).
/// Exposed separately so the identity-MLP closed forms are testable.
pub fn sim_loss_from_cats<S: Scalar>(tape: &Tape<S>, w_cat: Var, s_cat_mlp: Var) -> Var {
    let c1 = tape.cosine_rows(w_cat, s_cat_mlp);
    let c2 = tape.cosine_rows(s_cat_mlp, w_cat);
    tape.scale(tape.mean_all(tape.add(c1, c2)), S::cast_from(-0.5))
}

/// Multiscale similarity loss: one shared channel per level selected for both
/// branches, flattened 16³ grids concatenated across levels, asymmetric MLP
/// on the strong side.
pub fn multiscale_sim_loss<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    pooled_w: &[Var],
    pooled_s: &[Var],
    channel_choices: &[usize],
    stop_gradient: bool,
) -> Result<Var, ShapeError> {
    if pooled_w.len() != pooled_s.len() || pooled_w.len() != channel_choices.len() {
        return Err(ShapeError::new(
            "multiscale_sim_loss",
            format!(
                "levels w={} s={} choices={}",
                pooled_w.len(),
                pooled_s.len(),
                channel_choices.len()
            ),
        ));
    }
    let mut w_parts = Vec::new();
    let mut s_parts = Vec::new();
    for (j, (&pw, &ps)) in pooled_w.iter().zip(pooled_s).enumerate() {
        let c = channel_choices[j];
        let cw = tape.shape_of(pw)[1];
        if c >= cw {
            return Err(ShapeError::new(
                "multiscale_sim_loss",
                format!("channel {c} out of {cw} at level {j}"),
            ));
        }
        w_parts.push(tape.select_channel(pw, c));
        s_parts.push(tape.select_channel(ps, c));
    }
    let mut w_cat = tape.concat_cols(&w_parts); // (B, N*t^3)
    let s_cat = tape.concat_cols(&s_parts);
    if stop_gradient {
        w_cat = tape.stop_gradient(w_cat);
    }
    let h = tape.relu(tape.linear(s_cat, pv.get("asym.1.w"), Some(pv.get("asym.1.b"))));
    let s_mlp = tape.linear(h, pv.get("asym.2.w"), Some(pv.get("asym.2.b")));
    Ok(sim_loss_from_cats(tape, w_cat, s_mlp))
}

/// Uniform channel index per level, shared by both branches within a step.
pub fn sample_channel_choices(channels: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    channels.iter().map(|&c| rng.gen_range(0..c)).collect()
}

/// Assemble the weighted objective from both branches' forward outputs.
/// Absent (disabled) terms contribute nothing and report as `None`.
pub fn total_loss<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    model: &ModelConfig,
    cfg: &LossConfig,
    x_original: Var,
    pyr_w: &PyramidVars,
    pyr_s: &PyramidVars,
    channel_choices: &[usize],
) -> Result<TotalLossVars, TrainError> {
    cfg.validate()?;
    let need_pool = cfg.enabled.cross || cfg.enabled.sim;
    let (pooled_w, pooled_s) = if need_pool {
        let t = model.backbone.pool_target;
        (
            pool_pyramid(tape, &pyr_w.levels, t),
            pool_pyramid(tape, &pyr_s.levels, t),
        )
    } else {
        (Vec::new(), Vec::new())
    };

    let l_r = if cfg.enabled.recon {
        let rw = pyr_w.recon.expect("pretrain forward provides recon");
        let rs = pyr_s.recon.expect("pretrain forward provides recon");
        Some(recon_loss(tape, rw, rs, x_original)?)
    } else {
        None
    };

    let l_cross = if cfg.enabled.cross {
        let tw = project_tokens(tape, pv, &pooled_w, model.loss_heads.token_dim);
        let ts = project_tokens(tape, pv, &pooled_s, model.loss_heads.token_dim);
        let at = cross_attention(tape, pv, tw, ts);
        Some(infonce_cross_loss(
            tape,
            at.m,
            at.n,
            cfg.temperature,
            cfg.cross_batch_negatives,
        )?)
    } else {
        None
    };

    let l_sim = if cfg.enabled.sim {
        Some(multiscale_sim_loss(
            tape,
            pv,
            &pooled_w,
            &pooled_s,
            channel_choices,
            cfg.stop_gradient_sim,
        )?)
    } else {
        None
    };

    let mut total: Option<Var> = None;
    for (term, weight) in [
        (l_r, cfg.weights.recon),
        (l_cross, cfg.weights.cross),
        (l_sim, cfg.weights.sim),
    ] {
        if let Some(t) = term {
            let scaled = tape.scale(t, S::cast_from(weight));
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled),
                None => scaled,
            });
        }
    }
    Ok(TotalLossVars {
        total: total.expect("at least one loss enabled"),
        l_r,
        l_cross,
        l_sim,
    })
}

/// Read the scalar values of a step's losses off the tape.
pub fn breakdown<S: Scalar>(
    tape: &Tape<S>,
    vars: &TotalLossVars,
    weights: LossWeights,
) -> LossBreakdown {
    let read = |v: Option<Var>| v.map(|v| tape.value(v).item().cast_f64());
    LossBreakdown {
        l_r: read(vars.l_r),
        l_cross: read(vars.l_cross),
        l_sim: read(vars.l_sim),
        l_total: tape.value(vars.total).item().cast_f64(),
        weights,
    }
}
