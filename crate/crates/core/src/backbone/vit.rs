//! Small ViT encoder: patch tokens + learned positions through pre-norm
//! transformer blocks. The final token grid is the bottleneck fed to the
//! shared conv decoder.

use super::{BackboneConfig, ParamVars};
use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;

pub fn encode<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    config: &BackboneConfig,
    x: Var,
) -> Var {
    let vc = config.vit.as_ref().expect("validated vit config");
    let xsh = tape.shape_of(x);
    let batch = xsh[0];
    let e = vc.embed_dim;

    let tokens3 = tape.patchify(x, vc.token_size); // (B, T, p^3)
    let tsh = tape.shape_of(tokens3);
    let t = tsh[1];
    let flat = tape.reshape(tokens3, &[batch * t, tsh[2]]);
    let embedded = tape.linear(flat, pv.get("embed.w"), Some(pv.get("embed.b")));

    // Tile the positional table across the batch.
    let pos = pv.get("pos");
    let tile: Vec<u32> = (0..batch as u32)
        .flat_map(|_| 0..(t * e) as u32)
        .collect();
    let pos_rep = tape.gather(pos, tile, &[batch * t, e]);
    let mut cur = tape.add(embedded, pos_rep); // (B*T, E)

    let eps = S::cast_from(1e-5);
    let scale = S::cast_from(((e / vc.heads) as f64).sqrt().recip());
    for i in 0..vc.blocks {
        // Attention sublayer, pre-norm.
        let ln1 = tape.layer_norm(
            cur,
            pv.get(&format!("blk{i}.ln1.g")),
            pv.get(&format!("blk{i}.ln1.b")),
            eps,
        );
        let qkv = tape.linear(
            ln1,
            pv.get(&format!("blk{i}.qkv.w")),
            Some(pv.get(&format!("blk{i}.qkv.b"))),
        ); // (B*T, 3E)
        let attended = multi_head_attention(tape, qkv, batch, t, e, vc.heads, scale);
        let proj = tape.linear(
            attended,
            pv.get(&format!("blk{i}.proj.w")),
            Some(pv.get(&format!("blk{i}.proj.b"))),
        );
        cur = tape.add(cur, proj);

        // MLP sublayer, pre-norm.
        let ln2 = tape.layer_norm(
            cur,
            pv.get(&format!("blk{i}.ln2.g")),
            pv.get(&format!("blk{i}.ln2.b")),
            eps,
        );
        let h = tape.relu(tape.linear(
            ln2,
            pv.get(&format!("blk{i}.mlp1.w")),
            Some(pv.get(&format!("blk{i}.mlp1.b"))),
        ));
        let mlp = tape.linear(
            h,
            pv.get(&format!("blk{i}.mlp2.w")),
            Some(pv.get(&format!("blk{i}.mlp2.b"))),
        );
        cur = tape.add(cur, mlp);
    }

    let out = tape.layer_norm(cur, pv.get("lnf.g"), pv.get("lnf.b"), eps);
    tape.reshape(out, &[batch, t, e])
}

/// Scaled dot-product attention over (B·heads) groups.
fn multi_head_attention<S: Scalar>(
    tape: &Tape<S>,
    qkv: Var,
    batch: usize,
    t: usize,
    e: usize,
    heads: usize,
    scale: S,
) -> Var {
    let dh = e / heads;
    let q = tape.gather(qkv, head_split_indices(batch, t, e, heads, dh, 0), &[batch * heads, t, dh]);
    let k = tape.gather(qkv, head_split_indices(batch, t, e, heads, dh, 1), &[batch * heads, t, dh]);
    let v = tape.gather(qkv, head_split_indices(batch, t, e, heads, dh, 2), &[batch * heads, t, dh]);

    let qs = tape.scale(q, scale);
    let scores = tape.bmm(qs, k, true); // (B*heads, T, T)
    let attn = tape.softmax(scores);
    let mixed = tape.bmm(attn, v, false); // (B*heads, T, dh)

    tape.gather(mixed, head_merge_indices(batch, t, heads, dh), &[batch * t, e])
}

/// Source offsets in (B*T, 3E) for destination layout (B, heads, T, dh).
fn head_split_indices(
    batch: usize,
    t: usize,
    e: usize,
    heads: usize,
    dh: usize,
    which: usize,
) -> Vec<u32> {
    let mut idx = Vec::with_capacity(batch * heads * t * dh);
    for b in 0..batch {
        for h in 0..heads {
            for ti in 0..t {
                let row = (b * t + ti) * 3 * e + which * e + h * dh;
                for di in 0..dh {
                    idx.push((row + di) as u32);
                }
            }
        }
    }
    idx
}

/// Source offsets in (B*heads, T, dh) for destination layout (B, T, E).
fn head_merge_indices(batch: usize, t: usize, heads: usize, dh: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(batch * t * heads * dh);
    for b in 0..batch {
        for ti in 0..t {
            for h in 0..heads {
                let row = ((b * heads + h) * t + ti) * dh;
                for di in 0..dh {
                    idx.push((row + di) as u32);
                }
            }
        }
    }
    idx
}
