use emconsist_core::autodiff::Tape;
use emconsist_core::backbone::*;
use emconsist_core::{rng, Tensor};
use rand::Rng;
use std::time::Instant;

fn main() {
    let cfg = BackboneConfig::unet_default();
    let model = ModelConfig::pretrain(cfg.clone(), LossHeadConfig::default());
    let params = init_parameters::<f32>(&model, 0);
    let mut r = rng::from_seed(1);
    let n = 2 * 32 * 32 * 32;
    let xw = Tensor::<f32>::from_vec(&[2, 1, 32, 32, 32], (0..n).map(|_| r.gen_range(0.0f32..1.0)).collect());

    // Time leaf_all alone.
    let t0 = Instant::now();
    for _ in 0..20 {
        let tape: Tape<f32> = Tape::new();
        std::hint::black_box(ParamVars::leaf_all(&tape, &params));
    }
    println!("leaf_all: {:.4} s", t0.elapsed().as_secs_f64() / 20.0);

    // Forward with leaf_all hoisted out of the timing.
    let tape = Tape::new();
    let pv = ParamVars::leaf_all(&tape, &params);
    let t0 = Instant::now();
    for _ in 0..10 {
        let w = forward(&tape, &pv, &cfg, tape.leaf(xw.clone()), true);
        std::hint::black_box(tape.value(w.recon.unwrap()));
    }
    println!("forward single branch B=2 (no leaf_all): {:.4} s", t0.elapsed().as_secs_f64() / 10.0);
}
