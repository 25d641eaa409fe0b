use emconsist_core::autodiff::Tape;
use emconsist_core::backbone::*;
use emconsist_core::losses::*;
use emconsist_core::{rng, Tensor};
use rand::Rng;
use std::time::Instant;

fn main() {
    let cfg = BackboneConfig::unet_default();
    let model = ModelConfig::pretrain(cfg.clone(), LossHeadConfig::default());
    let params = init_parameters::<f32>(&model, 0);
    let mut r = rng::from_seed(1);
    let n = 2 * 32 * 32 * 32;
    let mk = |r: &mut rand_chacha::ChaCha8Rng| {
        Tensor::<f32>::from_vec(&[2, 1, 32, 32, 32], (0..n).map(|_| r.gen_range(0.0f32..1.0)).collect())
    };
    let (xw, xs, xo) = (mk(&mut r), mk(&mut r), mk(&mut r));

    // forward only
    let t0 = Instant::now();
    for _ in 0..5 {
        let tape = Tape::new();
        let pv = ParamVars::leaf_all(&tape, &params);
        let w = forward(&tape, &pv, &cfg, tape.leaf(xw.clone()), true);
        let s = forward(&tape, &pv, &cfg, tape.leaf(xs.clone()), true);
        std::hint::black_box((tape.value(w.recon.unwrap()), tape.value(s.recon.unwrap())));
    }
    println!("forward both branches: {:.3} s", t0.elapsed().as_secs_f64() / 5.0);

    // recon-only loss + backward
    let mask_r = LossConfig { enabled: LossMask { recon: true, cross: false, sim: false }, ..Default::default() };
    let t0 = Instant::now();
    for _ in 0..5 {
        let tape = Tape::new();
        let pv = ParamVars::leaf_all(&tape, &params);
        let w = forward(&tape, &pv, &cfg, tape.leaf(xw.clone()), true);
        let s = forward(&tape, &pv, &cfg, tape.leaf(xs.clone()), true);
        let x = tape.leaf(xo.clone());
        let out = total_loss(&tape, &pv, &model, &mask_r, x, &w, &s, &[0,0,0]).unwrap();
        std::hint::black_box(tape.backward(out.total).get(pv.get("dec.0.w")).map(|t| t.data()[0]));
    }
    println!("recon-only step: {:.3} s", t0.elapsed().as_secs_f64() / 5.0);

    // heads-only (cross+sim)
    let mask_cs = LossConfig { enabled: LossMask { recon: false, cross: true, sim: true }, ..Default::default() };
    let t0 = Instant::now();
    for _ in 0..5 {
        let tape = Tape::new();
        let pv = ParamVars::leaf_all(&tape, &params);
        let w = forward(&tape, &pv, &cfg, tape.leaf(xw.clone()), true);
        let s = forward(&tape, &pv, &cfg, tape.leaf(xs.clone()), true);
        let x = tape.leaf(xo.clone());
        let out = total_loss(&tape, &pv, &model, &mask_cs, x, &w, &s, &[0,0,0]).unwrap();
        std::hint::black_box(tape.backward(out.total).get(pv.get("dec.0.w")).map(|t| t.data()[0]));
    }
    println!("cross+sim step: {:.3} s", t0.elapsed().as_secs_f64() / 5.0);
}
