//! Skip-free UNet encoder: a full-resolution stem followed by stride-2
//! convolutions down to the bottleneck. Nothing but the bottleneck crosses
//! to the decoder.

use super::{BackboneConfig, ParamVars};
use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;

pub fn encode<S: Scalar>(
    tape: &Tape<S>,
    pv: &ParamVars,
    config: &BackboneConfig,
    x: Var,
) -> Var {
    let n = config.level_count();
    let mut cur = x;
    for i in 0..n {
        let w = pv.get(&format!("enc.{i}.w"));
        let b = pv.get(&format!("enc.{i}.b"));
        let stride = if i == 0 { 1 } else { 2 };
        cur = tape.relu(tape.conv3d(cur, w, b, stride));
    }
    cur
}
