use emconsist_core::autodiff::Tape;
use emconsist_core::backbone::*;
use emconsist_core::losses::*;
use emconsist_core::{rng, Tensor};
use rand::Rng;
use std::time::Instant;

fn main() {
    for (name, cfg) in [
        ("unet", BackboneConfig::unet_default()),
        ("vit", BackboneConfig::vit_default()),
    ] {
        let model = ModelConfig::pretrain(cfg.clone(), LossHeadConfig::default());
        let params = init_parameters::<f32>(&model, 0);
        println!("{name}: {} params", params.flat_len());
        let mut r = rng::from_seed(1);
        let n = 2 * 32 * 32 * 32;
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            Tensor::<f32>::from_vec(
                &[2, 1, 32, 32, 32],
                (0..n).map(|_| r.gen_range(0.0f32..1.0)).collect(),
            )
        };
        let xw = mk(&mut r);
        let xs = mk(&mut r);
        let xo = mk(&mut r);
        let cfg_l = LossConfig::default();
        // warmup + timed
        for round in 0..2 {
            let t0 = Instant::now();
            let iters = if round == 0 { 1 } else { 5 };
            for _ in 0..iters {
                let tape = Tape::new();
                let pv = ParamVars::leaf_all(&tape, &params);
                let w = forward(&tape, &pv, &cfg, tape.leaf(xw.clone()), true);
                let s = forward(&tape, &pv, &cfg, tape.leaf(xs.clone()), true);
                let x = tape.leaf(xo.clone());
                let out = total_loss(&tape, &pv, &model, &cfg_l, x, &w, &s, &[1, 2, 3]).unwrap();
                let grads = tape.backward(out.total);
                std::hint::black_box(grads.get(pv.get("dec.0.w")));
            }
            if round == 1 {
                println!(
                    "{name}: {:.3} s/step (fwd both branches + loss + backward)",
                    t0.elapsed().as_secs_f64() / iters as f64
                );
            }
        }
    }
}
