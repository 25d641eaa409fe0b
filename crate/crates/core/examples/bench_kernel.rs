use std::time::Instant;

fn conv333_acc(dst: &mut [f32], src: &[f32], w: &[f32], dims: [usize; 3]) {
    let [d, h, wd] = dims;
    for zo in 0..d {
        for kz in 0..3usize {
            let zi = zo + kz;
            if zi < 1 || zi > d { continue; }
            let zi = zi - 1;
            for yo in 0..h {
                let dst_row = (zo * h + yo) * wd;
                for ky in 0..3usize {
                    let yi = yo + ky;
                    if yi < 1 || yi > h { continue; }
                    let yi = yi - 1;
                    let src_row = (zi * h + yi) * wd;
                    let (w0, w1, w2) = (w[kz*9+ky*3], w[kz*9+ky*3+1], w[kz*9+ky*3+2]);
                    let dr = &mut dst[dst_row..dst_row + wd];
                    let sr = &src[src_row..src_row + wd];
                    for x in 1..wd - 1 {
                        dr[x] += w0 * sr[x - 1] + w1 * sr[x] + w2 * sr[x + 1];
                    }
                    dr[0] += w1 * sr[0] + w2 * sr[1];
                    dr[wd - 1] += w0 * sr[wd - 2] + w1 * sr[wd - 1];
                }
            }
        }
    }
}

fn main() {
    let n = 32usize;
    let src = vec![1.0f32; n * n * n];
    let mut dst = vec![0.0f32; n * n * n];
    let w = [0.5f32; 27];
    let iters = 2000;
    let t0 = Instant::now();
    for _ in 0..iters {
        conv333_acc(&mut dst, &src, &w, [n, n, n]);
        std::hint::black_box(&mut dst);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = iters as f64 * (n * n * n) as f64 * 27.0 * 2.0;
    println!("conv333_acc single-thread: {:.2} GFLOP/s", flops / dt / 1e9);
}
