use emconsist_core::autodiff::Tape;
use emconsist_core::{rng, Tensor};
use rand::Rng;
use std::time::Instant;

fn main() {
    let mut r = rng::from_seed(1);
    // dec.2-shaped: (2, 16, 32, 32, 32) -> (2, 8, 32, 32, 32): 226M MAC
    let x0 = Tensor::<f32>::from_vec(&[2, 16, 32, 32, 32], (0..2*16*32768).map(|_| r.gen_range(0.0f32..1.0)).collect());
    let w0 = Tensor::<f32>::from_vec(&[8, 16, 3, 3, 3], (0..8*16*27).map(|_| r.gen_range(-0.1f32..0.1)).collect());
    let b0 = Tensor::<f32>::from_vec(&[8], vec![0.0; 8]);

    let tape: Tape<f32> = Tape::new();
    let (x, w, b) = (tape.leaf(x0), tape.leaf(w0), tape.leaf(b0));
    // warmup
    std::hint::black_box(tape.value(tape.conv3d(x, w, b, 1)));
    let t0 = Instant::now();
    let iters = 20;
    for _ in 0..iters {
        std::hint::black_box(tape.conv3d(x, w, b, 1));
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("dec.2-shaped conv fwd: {:.1} ms ({:.1} GFLOP/s)", dt * 1e3, 2.0 * 226.5e6 / dt / 1e9);

    // enc.1-shaped stride2: (2,8,32,32,32) -> (2,16,16,16,16): 28.3M MAC
    let x1 = tape.leaf(Tensor::<f32>::from_vec(&[2, 8, 32, 32, 32], (0..2*8*32768).map(|_| r.gen_range(0.0f32..1.0)).collect()));
    let w1 = tape.leaf(Tensor::<f32>::from_vec(&[16, 8, 3, 3, 3], (0..16*8*27).map(|_| r.gen_range(-0.1f32..0.1)).collect()));
    let b1 = tape.leaf(Tensor::<f32>::from_vec(&[16], vec![0.0; 16]));
    std::hint::black_box(tape.conv3d(x1, w1, b1, 2));
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(tape.conv3d(x1, w1, b1, 2));
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("enc.1-shaped conv s2 fwd: {:.1} ms ({:.1} GFLOP/s)", dt * 1e3, 2.0 * 28.3e6 / dt / 1e9);
}
