//! 3D convolution and token patchify ops.
//!
//! Convolutions parallelize over independent output slices, and every output
//! element is accumulated by exactly one task in a fixed loop order, so results
//! are bitwise identical for any thread count. The stride-1 3x3x3 case (the
//! hot path) runs fused row kernels; backward-input reuses the forward kernel
//! with flipped weights.

use rayon::prelude::*;

use super::{ops::dot8, GradFn, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    din: [usize; 3],
    dout: [usize; 3],
}

fn out_dim(d: usize, k: usize, stride: usize, pad: usize) -> usize {
    (d + 2 * pad - k) / stride + 1
}

// ---------------------------------------------------------------------------
// Fused 3x3x3 stride-1 row kernels
// ---------------------------------------------------------------------------

/// dst(z,y,x) += Σ_k w[k] · src(z+kz-1, y+ky-1, x+kx-1), zero outside.
/// Interior rows take a single 27-tap fused sweep; boundary rows fall back
/// to per-(kz, ky) 3-tap passes.
fn conv333_acc<S: Scalar>(dst: &mut [S], src: &[S], w: &[S], dims: [usize; 3]) {
    let [d, h, wd] = dims;
    for zo in 0..d {
        let interior_z = zo >= 1 && zo + 1 < d;
        for yo in 0..h {
            let dst_row = (zo * h + yo) * wd;
            let dr = &mut dst[dst_row..dst_row + wd];
            if interior_z && yo >= 1 && yo + 1 < h && wd >= 2 {
                // All nine source rows exist.
                let row = |kz: usize, ky: usize| {
                    let zi = zo + kz - 1;
                    let yi = yo + ky - 1;
                    &src[(zi * h + yi) * wd..(zi * h + yi) * wd + wd]
                };
                let (r00, r01, r02) = (row(0, 0), row(0, 1), row(0, 2));
                let (r10, r11, r12) = (row(1, 0), row(1, 1), row(1, 2));
                let (r20, r21, r22) = (row(2, 0), row(2, 1), row(2, 2));
                for x in 1..wd - 1 {
                    let mut acc = dr[x];
                    acc += w[0] * r00[x - 1] + w[1] * r00[x] + w[2] * r00[x + 1];
                    acc += w[3] * r01[x - 1] + w[4] * r01[x] + w[5] * r01[x + 1];
                    acc += w[6] * r02[x - 1] + w[7] * r02[x] + w[8] * r02[x + 1];
                    acc += w[9] * r10[x - 1] + w[10] * r10[x] + w[11] * r10[x + 1];
                    acc += w[12] * r11[x - 1] + w[13] * r11[x] + w[14] * r11[x + 1];
                    acc += w[15] * r12[x - 1] + w[16] * r12[x] + w[17] * r12[x + 1];
                    acc += w[18] * r20[x - 1] + w[19] * r20[x] + w[20] * r20[x + 1];
                    acc += w[21] * r21[x - 1] + w[22] * r21[x] + w[23] * r21[x + 1];
                    acc += w[24] * r22[x - 1] + w[25] * r22[x] + w[26] * r22[x + 1];
                    dr[x] = acc;
                }
                for (i, r) in [r00, r01, r02, r10, r11, r12, r20, r21, r22]
                    .into_iter()
                    .enumerate()
                {
                    let (w0, w1, w2) = (w[i * 3], w[i * 3 + 1], w[i * 3 + 2]);
                    dr[0] += w1 * r[0] + w2 * r[1];
                    dr[wd - 1] += w0 * r[wd - 2] + w1 * r[wd - 1];
                }
            } else {
                for kz in 0..3usize {
                    let zi = zo + kz;
                    if zi < 1 || zi > d {
                        continue;
                    }
                    let zi = zi - 1;
                    for ky in 0..3usize {
                        let yi = yo + ky;
                        if yi < 1 || yi > h {
                            continue;
                        }
                        let yi = yi - 1;
                        let src_row = (zi * h + yi) * wd;
                        let (w0, w1, w2) = (
                            w[kz * 9 + ky * 3],
                            w[kz * 9 + ky * 3 + 1],
                            w[kz * 9 + ky * 3 + 2],
                        );
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
}

/// acc[k] += Σ_rows dY(z,y,·) · src(z+kz-1, y+ky-1, ·+kx-1): the 27 weight
/// gradients of one (oc, ic) pair for one (batch) volume.
fn conv333_wgrad<S: Scalar>(acc: &mut [S], dy: &[S], src: &[S], dims: [usize; 3]) {
    let [d, h, wd] = dims;
    for zo in 0..d {
        for yo in 0..h {
            let dyr = &dy[(zo * h + yo) * wd..(zo * h + yo) * wd + wd];
            for kz in 0..3usize {
                let zi = zo + kz;
                if zi < 1 || zi > d {
                    continue;
                }
                let zi = zi - 1;
                for ky in 0..3usize {
                    let yi = yo + ky;
                    if yi < 1 || yi > h {
                        continue;
                    }
                    let yi = yi - 1;
                    let sr = &src[(zi * h + yi) * wd..(zi * h + yi) * wd + wd];
                    let base = kz * 9 + ky * 3;
                    // kx = 0: xi = xo - 1 → valid xo ∈ [1, wd).
                    acc[base] += dot8(&dyr[1..], &sr[..wd - 1]);
                    // kx = 1: aligned rows.
                    acc[base + 1] += dot8(dyr, sr);
                    // kx = 2: xi = xo + 1 → valid xo ∈ [0, wd-1).
                    acc[base + 2] += dot8(&dyr[..wd - 1], &sr[1..]);
                }
            }
        }
    }
}

fn flip27<S: Scalar>(w: &[S]) -> [S; 27] {
    let mut out = [S::zero(); 27];
    for i in 0..27 {
        out[i] = w[26 - i];
    }
    out
}

// ---------------------------------------------------------------------------
// Fused 3x3x3 stride-2 row kernels
// ---------------------------------------------------------------------------

/// Stride-2 forward: dst(z,y,x) += Σ_k w[k] · src(2z+kz-1, 2y+ky-1, 2x+kx-1).
fn conv332_acc<S: Scalar>(
    dst: &mut [S],
    src: &[S],
    w: &[S],
    dout: [usize; 3],
    din: [usize; 3],
) {
    let [do_, ho, wo] = dout;
    let [di, hi, wi] = din;
    for zo in 0..do_ {
        for kz in 0..3usize {
            let zi = 2 * zo + kz;
            if zi < 1 || zi > di {
                continue;
            }
            let zi = zi - 1;
            for yo in 0..ho {
                let dst_row = (zo * ho + yo) * wo;
                for ky in 0..3usize {
                    let yi = 2 * yo + ky;
                    if yi < 1 || yi > hi {
                        continue;
                    }
                    let yi = yi - 1;
                    let sr = &src[(zi * hi + yi) * wi..(zi * hi + yi) * wi + wi];
                    let dr = &mut dst[dst_row..dst_row + wo];
                    let (w0, w1, w2) = (
                        w[kz * 9 + ky * 3],
                        w[kz * 9 + ky * 3 + 1],
                        w[kz * 9 + ky * 3 + 2],
                    );
                    // x = 0 misses the kx = 0 tap (xi = -1).
                    dr[0] += w1 * sr[0] + w2 * sr[1];
                    let xmax = if 2 * (wo - 1) + 1 < wi { wo } else { wo - 1 };
                    for x in 1..xmax {
                        dr[x] += w0 * sr[2 * x - 1] + w1 * sr[2 * x] + w2 * sr[2 * x + 1];
                    }
                    if xmax < wo {
                        let x = wo - 1;
                        dr[x] += w0 * sr[2 * x - 1] + w1 * sr[2 * x];
                    }
                }
            }
        }
    }
}

/// Stride-2 input gradient: dst(zi,yi,xi) += Σ w[k] · dy(zo,yo,xo) over the
/// output positions that consumed each input cell.
fn conv332_xgrad<S: Scalar>(
    dst: &mut [S],
    dy: &[S],
    w: &[S],
    dout: [usize; 3],
    din: [usize; 3],
) {
    let [do_, ho, wo] = dout;
    let [di, hi, wi] = din;
    for zo in 0..do_ {
        for kz in 0..3usize {
            let zi = 2 * zo + kz;
            if zi < 1 || zi > di {
                continue;
            }
            let zi = zi - 1;
            for yo in 0..ho {
                for ky in 0..3usize {
                    let yi = 2 * yo + ky;
                    if yi < 1 || yi > hi {
                        continue;
                    }
                    let yi = yi - 1;
                    let gr = &dy[(zo * ho + yo) * wo..(zo * ho + yo) * wo + wo];
                    let dr = &mut dst[(zi * hi + yi) * wi..(zi * hi + yi) * wi + wi];
                    let (w0, w1, w2) = (
                        w[kz * 9 + ky * 3],
                        w[kz * 9 + ky * 3 + 1],
                        w[kz * 9 + ky * 3 + 2],
                    );
                    dr[0] += w1 * gr[0];
                    dr[1] += w2 * gr[0];
                    let xmax = if 2 * (wo - 1) + 1 < wi { wo } else { wo - 1 };
                    for xo in 1..xmax {
                        let gv = gr[xo];
                        dr[2 * xo - 1] += w0 * gv;
                        dr[2 * xo] += w1 * gv;
                        dr[2 * xo + 1] += w2 * gv;
                    }
                    if xmax < wo {
                        let xo = wo - 1;
                        let gv = gr[xo];
                        dr[2 * xo - 1] += w0 * gv;
                        dr[2 * xo] += w1 * gv;
                    }
                }
            }
        }
    }
}

/// Stride-2 weight gradient accumulation for one (oc, ic, batch) triple.
fn conv332_wgrad<S: Scalar>(
    acc: &mut [S],
    dy: &[S],
    src: &[S],
    dout: [usize; 3],
    din: [usize; 3],
) {
    let [do_, ho, wo] = dout;
    let [di, hi, wi] = din;
    for zo in 0..do_ {
        for yo in 0..ho {
            let gr = &dy[(zo * ho + yo) * wo..(zo * ho + yo) * wo + wo];
            for kz in 0..3usize {
                let zi = 2 * zo + kz;
                if zi < 1 || zi > di {
                    continue;
                }
                let zi = zi - 1;
                for ky in 0..3usize {
                    let yi = 2 * yo + ky;
                    if yi < 1 || yi > hi {
                        continue;
                    }
                    let yi = yi - 1;
                    let sr = &src[(zi * hi + yi) * wi..(zi * hi + yi) * wi + wi];
                    let base = kz * 9 + ky * 3;
                    let (mut a0, mut a1, mut a2) = (S::zero(), S::zero(), S::zero());
                    a1 += gr[0] * sr[0];
                    a2 += gr[0] * sr[1];
                    let xmax = if 2 * (wo - 1) + 1 < wi { wo } else { wo - 1 };
                    for xo in 1..xmax {
                        let gv = gr[xo];
                        a0 += gv * sr[2 * xo - 1];
                        a1 += gv * sr[2 * xo];
                        a2 += gv * sr[2 * xo + 1];
                    }
                    if xmax < wo {
                        let xo = wo - 1;
                        let gv = gr[xo];
                        a0 += gv * sr[2 * xo - 1];
                        a1 += gv * sr[2 * xo];
                    }
                    acc[base] += a0;
                    acc[base + 1] += a1;
                    acc[base + 2] += a2;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Generic (any stride / kernel) fallback kernels
// ---------------------------------------------------------------------------

/// Valid output range along one axis: 0 <= o*s + k - p < n_in.
#[inline]
fn valid_range(k: usize, n_in: usize, n_out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = (pad.saturating_sub(k) + stride - 1) / stride;
    let hi = if n_in + pad <= k {
        0
    } else {
        (((n_in + pad - k - 1) / stride) + 1).min(n_out)
    };
    (lo, hi)
}

/// dst[out coords] += wv * src[strided input coords].
#[inline]
fn accumulate_shifted<S: Scalar>(
    dst: &mut [S],
    src: &[S],
    wv: S,
    dims: ConvDims,
    kk: [usize; 3],
) {
    let [do_, ho, wo] = dims.dout;
    let [_, hi, wi] = dims.din;
    let (stride, pad) = (dims.stride, dims.pad);
    let [kz, ky, kx] = kk;
    let (z0, z1) = valid_range(kz, dims.din[0], do_, stride, pad);
    let (y0, y1) = valid_range(ky, dims.din[1], ho, stride, pad);
    let (x0, x1) = valid_range(kx, dims.din[2], wo, stride, pad);
    if x0 >= x1 {
        return;
    }
    for zo in z0..z1 {
        let zi = zo * stride + kz - pad;
        for yo in y0..y1 {
            let yi = yo * stride + ky - pad;
            let orow = &mut dst[(zo * ho + yo) * wo + x0..(zo * ho + yo) * wo + x1];
            if stride == 1 {
                let xi0 = x0 + kx - pad;
                let irow = &src[(zi * hi + yi) * wi + xi0..(zi * hi + yi) * wi + xi0 + (x1 - x0)];
                for (o, &iv) in orow.iter_mut().zip(irow) {
                    *o += wv * iv;
                }
            } else {
                let base = (zi * hi + yi) * wi;
                for (idx, o) in orow.iter_mut().enumerate() {
                    let xo = x0 + idx;
                    *o += wv * src[base + xo * stride + kx - pad];
                }
            }
        }
    }
}

/// dst[input coords] += wv * gsrc[output coords]: transpose of accumulate.
#[inline]
fn scatter_shifted<S: Scalar>(dst: &mut [S], gsrc: &[S], wv: S, dims: ConvDims, kk: [usize; 3]) {
    let [do_, ho, wo] = dims.dout;
    let [_, hi, wi] = dims.din;
    let (stride, pad) = (dims.stride, dims.pad);
    let [kz, ky, kx] = kk;
    let (z0, z1) = valid_range(kz, dims.din[0], do_, stride, pad);
    let (y0, y1) = valid_range(ky, dims.din[1], ho, stride, pad);
    let (x0, x1) = valid_range(kx, dims.din[2], wo, stride, pad);
    if x0 >= x1 {
        return;
    }
    for zo in z0..z1 {
        let zi = zo * stride + kz - pad;
        for yo in y0..y1 {
            let yi = yo * stride + ky - pad;
            let grow = &gsrc[(zo * ho + yo) * wo + x0..(zo * ho + yo) * wo + x1];
            if stride == 1 {
                let xi0 = x0 + kx - pad;
                let drow =
                    &mut dst[(zi * hi + yi) * wi + xi0..(zi * hi + yi) * wi + xi0 + (x1 - x0)];
                for (dv, &gv) in drow.iter_mut().zip(grow) {
                    *dv += wv * gv;
                }
            } else {
                let base = (zi * hi + yi) * wi;
                for (idx, &gv) in grow.iter().enumerate() {
                    let xo = x0 + idx;
                    dst[base + xo * stride + kx - pad] += wv * gv;
                }
            }
        }
    }
}

/// Σ over output coords of gsrc[out] * src[strided input coords].
#[inline]
fn correlate_shifted<S: Scalar>(gsrc: &[S], src: &[S], dims: ConvDims, kk: [usize; 3]) -> S {
    let [do_, ho, wo] = dims.dout;
    let [_, hi, wi] = dims.din;
    let (stride, pad) = (dims.stride, dims.pad);
    let [kz, ky, kx] = kk;
    let (z0, z1) = valid_range(kz, dims.din[0], do_, stride, pad);
    let (y0, y1) = valid_range(ky, dims.din[1], ho, stride, pad);
    let (x0, x1) = valid_range(kx, dims.din[2], wo, stride, pad);
    let mut acc = S::zero();
    if x0 >= x1 {
        return acc;
    }
    for zo in z0..z1 {
        let zi = zo * stride + kz - pad;
        for yo in y0..y1 {
            let yi = yo * stride + ky - pad;
            let grow = &gsrc[(zo * ho + yo) * wo + x0..(zo * ho + yo) * wo + x1];
            if stride == 1 {
                let xi0 = x0 + kx - pad;
                let irow = &src[(zi * hi + yi) * wi + xi0..(zi * hi + yi) * wi + xi0 + (x1 - x0)];
                acc += dot8(grow, irow);
            } else {
                let base = (zi * hi + yi) * wi;
                for (idx, &gv) in grow.iter().enumerate() {
                    let xo = x0 + idx;
                    acc += gv * src[base + xo * stride + kx - pad];
                }
            }
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Forward / backward drivers
// ---------------------------------------------------------------------------

fn conv3d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    dims: ConvDims,
) -> Tensor<S> {
    let in_sp: usize = dims.din.iter().product();
    let out_sp: usize = dims.dout.iter().product();
    let k3 = dims.k.pow(3);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let fused1 = dims.stride == 1 && dims.k == 3 && dims.pad == 1;
    let fused2 = dims.stride == 2 && dims.k == 3 && dims.pad == 1;

    let mut out = Tensor::zeros(&[dims.batch, dims.cout, dims.dout[0], dims.dout[1], dims.dout[2]]);
    out.data_mut()
        .par_chunks_mut(out_sp)
        .enumerate()
        .for_each(|(slot, dst)| {
            let bi = slot / dims.cout;
            let oc = slot % dims.cout;
            dst.fill(bd[oc]);
            for ic in 0..dims.cin {
                let src = &xd[(bi * dims.cin + ic) * in_sp..(bi * dims.cin + ic + 1) * in_sp];
                let wslice = &wd[(oc * dims.cin + ic) * k3..(oc * dims.cin + ic + 1) * k3];
                if fused1 {
                    conv333_acc(dst, src, wslice, dims.dout);
                } else if fused2 {
                    conv332_acc(dst, src, wslice, dims.dout, dims.din);
                } else {
                    for kz in 0..dims.k {
                        for ky in 0..dims.k {
                            for kx in 0..dims.k {
                                let wv = wslice[(kz * dims.k + ky) * dims.k + kx];
                                accumulate_shifted(dst, src, wv, dims, [kz, ky, kx]);
                            }
                        }
                    }
                }
            }
        });
    out
}

struct Conv3dGrad {
    dims: ConvDims,
}

impl<S: Scalar> GradFn<S> for Conv3dGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let d = self.dims;
        let in_sp: usize = d.din.iter().product();
        let out_sp: usize = d.dout.iter().product();
        let k3 = d.k.pow(3);
        let xd = inp[0].data();
        let wd = inp[1].data();
        let gd = g.data();
        let fused1 = d.stride == 1 && d.k == 3 && d.pad == 1;
        let fused2 = d.stride == 2 && d.k == 3 && d.pad == 1;

        // dX: gather per (batch, in-channel) slice. With stride 1 the input
        // gradient is the upstream gradient convolved with flipped weights.
        let mut dx = Tensor::zeros(inp[0].shape());
        dx.data_mut()
            .par_chunks_mut(in_sp)
            .enumerate()
            .for_each(|(slot, dst)| {
                let bi = slot / d.cin;
                let ic = slot % d.cin;
                for oc in 0..d.cout {
                    let gsrc = &gd[(bi * d.cout + oc) * out_sp..(bi * d.cout + oc + 1) * out_sp];
                    let wslice = &wd[(oc * d.cin + ic) * k3..(oc * d.cin + ic + 1) * k3];
                    if fused1 {
                        let wf = flip27(wslice);
                        conv333_acc(dst, gsrc, &wf, d.din);
                    } else if fused2 {
                        conv332_xgrad(dst, gsrc, wslice, d.dout, d.din);
                    } else {
                        for kz in 0..d.k {
                            for ky in 0..d.k {
                                for kx in 0..d.k {
                                    let wv = wslice[(kz * d.k + ky) * d.k + kx];
                                    scatter_shifted(dst, gsrc, wv, d, [kz, ky, kx]);
                                }
                            }
                        }
                    }
                }
            });

        // dW: reduction per (out-channel, in-channel) pair.
        let mut dw = Tensor::zeros(inp[1].shape());
        dw.data_mut()
            .par_chunks_mut(k3)
            .enumerate()
            .for_each(|(pair, wslice)| {
                let oc = pair / d.cin;
                let ic = pair % d.cin;
                for bi in 0..d.batch {
                    let gsrc = &gd[(bi * d.cout + oc) * out_sp..(bi * d.cout + oc + 1) * out_sp];
                    let src = &xd[(bi * d.cin + ic) * in_sp..(bi * d.cin + ic + 1) * in_sp];
                    if fused1 {
                        conv333_wgrad(wslice, gsrc, src, d.dout);
                    } else if fused2 {
                        conv332_wgrad(wslice, gsrc, src, d.dout, d.din);
                    } else {
                        for kz in 0..d.k {
                            for ky in 0..d.k {
                                for kx in 0..d.k {
                                    wslice[(kz * d.k + ky) * d.k + kx] +=
                                        correlate_shifted(gsrc, src, d, [kz, ky, kx]);
                                }
                            }
                        }
                    }
                }
            });

        // db: sum of upstream grad per out channel.
        let mut db = vec![S::zero(); d.cout];
        for bi in 0..d.batch {
            for (oc, dbv) in db.iter_mut().enumerate() {
                let gsrc = &gd[(bi * d.cout + oc) * out_sp..(bi * d.cout + oc + 1) * out_sp];
                let mut acc = S::zero();
                for &v in gsrc {
                    acc += v;
                }
                *dbv += acc;
            }
        }

        vec![dx, dw, Tensor::from_vec(&[d.cout], db)]
    }
}

struct PatchifyGrad {
    shape_in: [usize; 5],
    p: usize,
}
impl<S: Scalar> GradFn<S> for PatchifyGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let [b, c, d, h, w] = self.shape_in;
        let p = self.p;
        let mut dx = vec![S::zero(); inp[0].len()];
        patch_copy(g.data(), &mut dx, b, c, [d, h, w], p, true);
        vec![Tensor::from_vec(inp[0].shape(), dx)]
    }
}

/// Move voxels between (B, C, D, H, W) grid layout and (B, T, C·p³) token
/// layout. `reverse` scatters tokens back onto the grid.
fn patch_copy<S: Scalar>(
    src: &[S],
    dst: &mut [S],
    b: usize,
    c: usize,
    dims: [usize; 3],
    p: usize,
    reverse: bool,
) {
    let [d, h, w] = dims;
    let (gd, gh, gw) = (d / p, h / p, w / p);
    let tokens = gd * gh * gw;
    let tlen = c * p * p * p;
    for bi in 0..b {
        for tz in 0..gd {
            for ty in 0..gh {
                for tx in 0..gw {
                    let t = (tz * gh + ty) * gw + tx;
                    for ci in 0..c {
                        for pz in 0..p {
                            for py in 0..p {
                                for px in 0..p {
                                    let grid = (((bi * c + ci) * d + tz * p + pz) * h
                                        + ty * p
                                        + py)
                                        * w
                                        + tx * p
                                        + px;
                                    let tok = (bi * tokens + t) * tlen
                                        + ((ci * p + pz) * p + py) * p
                                        + px;
                                    if reverse {
                                        dst[grid] = src[tok];
                                    } else {
                                        dst[tok] = src[grid];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct TokensToGridGrad {
    shape_in: [usize; 3],
    grid: [usize; 3],
}
impl<S: Scalar> GradFn<S> for TokensToGridGrad {
    fn backward(&self, g: &Tensor<S>, _: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let [b, t, e] = self.shape_in;
        let [gd, gh, gw] = self.grid;
        let mut dx = vec![S::zero(); b * t * e];
        let gdta = g.data();
        for bi in 0..b {
            for ti in 0..t {
                let (tz, tyx) = (ti / (gh * gw), ti % (gh * gw));
                let (ty, tx) = (tyx / gw, tyx % gw);
                for ei in 0..e {
                    dx[(bi * t + ti) * e + ei] =
                        gdta[(((bi * e + ei) * gd + tz) * gh + ty) * gw + tx];
                }
            }
        }
        vec![Tensor::from_vec(&[b, t, e], dx)]
    }
}

impl<S: Scalar> Tape<S> {
    /// 3D convolution: `x` (B, Cin, D, H, W) with `w` (Cout, Cin, k, k, k) and
    /// bias (Cout), padding k/2.
    pub fn conv3d(&self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.shape_of(x);
        let ws = self.shape_of(w);
        assert_eq!(xs.len(), 5, "conv3d input must be (B,C,D,H,W)");
        assert_eq!(ws.len(), 5, "conv3d weight must be (O,I,k,k,k)");
        assert_eq!(xs[1], ws[1], "conv3d channel mismatch");
        assert!(ws[2] == ws[3] && ws[3] == ws[4], "conv3d kernel must be cubic");
        let k = ws[2];
        let pad = k / 2;
        let dims = ConvDims {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            k,
            stride,
            pad,
            din: [xs[2], xs[3], xs[4]],
            dout: [
                out_dim(xs[2], k, stride, pad),
                out_dim(xs[3], k, stride, pad),
                out_dim(xs[4], k, stride, pad),
            ],
        };
        self.nary(
            &[x, w, b],
            |vals| conv3d_forward(vals[0], vals[1], vals[2], dims),
            Box::new(Conv3dGrad { dims }),
        )
    }

    /// Cut (B, C, D, H, W) into non-overlapping p³ patches → (B, T, C·p³)
    /// token matrix, tokens in z-major grid order.
    pub fn patchify(&self, x: Var, p: usize) -> Var {
        let sh = self.shape_of(x);
        assert_eq!(sh.len(), 5);
        let [b, c, d, h, w] = [sh[0], sh[1], sh[2], sh[3], sh[4]];
        assert!(
            d % p == 0 && h % p == 0 && w % p == 0,
            "token size {p} must divide spatial dims {:?}",
            &sh[2..]
        );
        let tokens = (d / p) * (h / p) * (w / p);
        let tlen = c * p * p * p;
        self.unary(
            x,
            |t| {
                let mut out = vec![S::zero(); b * tokens * tlen];
                patch_copy(t.data(), &mut out, b, c, [d, h, w], p, false);
                Tensor::from_vec(&[b, tokens, tlen], out)
            },
            Box::new(PatchifyGrad {
                shape_in: [b, c, d, h, w],
                p,
            }),
        )
    }

    /// Reinterpret (B, T, E) tokens on their 3D grid as (B, E, gd, gh, gw).
    pub fn tokens_to_grid(&self, x: Var, grid: [usize; 3]) -> Var {
        let sh = self.shape_of(x);
        assert_eq!(sh.len(), 3);
        let [b, t, e] = [sh[0], sh[1], sh[2]];
        assert_eq!(t, grid[0] * grid[1] * grid[2], "token count != grid size");
        let [gd, gh, gw] = grid;
        self.unary(
            x,
            |xt| {
                let mut out = vec![S::zero(); b * e * t];
                let xd = xt.data();
                for bi in 0..b {
                    for ti in 0..t {
                        let (tz, tyx) = (ti / (gh * gw), ti % (gh * gw));
                        let (ty, tx) = (tyx / gw, tyx % gw);
                        for ei in 0..e {
                            out[(((bi * e + ei) * gd + tz) * gh + ty) * gw + tx] =
                                xd[(bi * t + ti) * e + ei];
                        }
                    }
                }
                Tensor::from_vec(&[b, e, gd, gh, gw], out)
            },
            Box::new(TokensToGridGrad {
                shape_in: [b, t, e],
                grid,
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testutil::assert_grad_matches;
    use crate::rng;
    use rand::Rng;

    fn randt(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::from_seed(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_output_shapes() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(randt(&[1, 2, 8, 8, 8], 1));
        let w = tape.leaf(randt(&[4, 2, 3, 3, 3], 2));
        let b = tape.leaf(randt(&[4], 3));
        assert_eq!(tape.shape_of(tape.conv3d(x, w, b, 1)), vec![1, 4, 8, 8, 8]);
        assert_eq!(tape.shape_of(tape.conv3d(x, w, b, 2)), vec![1, 4, 4, 4, 4]);

        let w1 = tape.leaf(randt(&[3, 2, 1, 1, 1], 4));
        let b1 = tape.leaf(randt(&[3], 5));
        assert_eq!(tape.shape_of(tape.conv3d(x, w1, b1, 1)), vec![1, 3, 8, 8, 8]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let tape: Tape<f64> = Tape::new();
        let x0 = randt(&[2, 2, 5, 4, 6], 6);
        let w0 = randt(&[3, 2, 3, 3, 3], 7);
        let b0 = randt(&[3], 8);
        for stride in [1usize, 2] {
            let x = tape.leaf(x0.clone());
            let w = tape.leaf(w0.clone());
            let b = tape.leaf(b0.clone());
            let y = tape.value(tape.conv3d(x, w, b, stride));

            let (dz, hy, wx) = (5usize, 4usize, 6usize);
            let od = out_dim(dz, 3, stride, 1);
            let oh = out_dim(hy, 3, stride, 1);
            let ow = out_dim(wx, 3, stride, 1);
            for bi in 0..2 {
                for oc in 0..3 {
                    for zo in 0..od {
                        for yo in 0..oh {
                            for xo in 0..ow {
                                let mut acc = b0.data()[oc];
                                for ic in 0..2 {
                                    for kz in 0..3 {
                                        for ky in 0..3 {
                                            for kx in 0..3 {
                                                let zi = zo * stride + kz;
                                                let yi = yo * stride + ky;
                                                let xi = xo * stride + kx;
                                                if zi >= 1
                                                    && yi >= 1
                                                    && xi >= 1
                                                    && zi - 1 < dz
                                                    && yi - 1 < hy
                                                    && xi - 1 < wx
                                                {
                                                    let xv = x0.data()[(((bi * 2 + ic) * dz
                                                        + zi
                                                        - 1)
                                                        * hy
                                                        + yi
                                                        - 1)
                                                        * wx
                                                        + xi
                                                        - 1];
                                                    let wv = w0.data()
                                                        [(((oc * 2 + ic) * 3 + kz) * 3 + ky) * 3
                                                            + kx];
                                                    acc += xv * wv;
                                                }
                                            }
                                        }
                                    }
                                }
                                let got =
                                    y.data()[(((bi * 3 + oc) * od + zo) * oh + yo) * ow + xo];
                                assert!(
                                    (got - acc).abs() < 1e-10,
                                    "stride {stride} mismatch: {got} vs {acc}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_grads_match_fd() {
        for stride in [1usize, 2] {
            // w.r.t. input
            let x0 = randt(&[1, 2, 4, 4, 4], 9);
            assert_grad_matches(
                &mut |t, x| {
                    let w = t.leaf(randt(&[2, 2, 3, 3, 3], 10));
                    let b = t.leaf(randt(&[2], 11));
                    let y = t.conv3d(x, w, b, stride);
                    let s = t.sigmoid(y);
                    t.mean_all(t.mul(s, s))
                },
                &x0,
                1e-5,
            );
            // w.r.t. weights (leaf is the weight tensor here)
            let w0 = randt(&[2, 2, 3, 3, 3], 12);
            assert_grad_matches(
                &mut |t, w| {
                    let x = t.leaf(randt(&[2, 2, 4, 4, 4], 13));
                    let b = t.leaf(randt(&[2], 14));
                    let y = t.conv3d(x, w, b, stride);
                    t.mean_all(t.mul(y, y))
                },
                &w0,
                1e-5,
            );
            // w.r.t. bias
            let b0 = randt(&[3], 15);
            assert_grad_matches(
                &mut |t, b| {
                    let x = t.leaf(randt(&[1, 2, 4, 4, 4], 16));
                    let w = t.leaf(randt(&[3, 2, 3, 3, 3], 17));
                    let y = t.conv3d(x, w, b, stride);
                    t.mean_all(t.mul(y, y))
                },
                &b0,
                1e-5,
            );
        }
    }

    #[test]
    fn conv_grads_match_fd_non_cubic() {
        // Exercises the fused row kernels on unequal spatial dims.
        let x0 = randt(&[1, 1, 3, 5, 7], 18);
        assert_grad_matches(
            &mut |t, x| {
                let w = t.leaf(randt(&[2, 1, 3, 3, 3], 19));
                let b = t.leaf(randt(&[2], 20));
                let y = t.conv3d(x, w, b, 1);
                t.mean_all(t.mul(y, y))
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn patchify_round_trip_and_grads() {
        let x0 = randt(&[1, 1, 4, 4, 4], 18);
        assert_grad_matches(
            &mut |t, x| {
                let tok = t.patchify(x, 2); // (1, 8, 8)
                let grid = t.tokens_to_grid(tok, [2, 2, 2]); // (1, 8, 2,2,2)
                let s = t.sigmoid(grid);
                t.mean_all(t.mul(s, s))
            },
            &x0,
            1e-6,
        );

        // Token layout: token 0 holds the first 2^3 corner of the volume.
        let tape: Tape<f64> = Tape::new();
        let n = 64usize;
        let x = tape.leaf(Tensor::from_vec(
            &[1, 1, 4, 4, 4],
            (0..n).map(|i| i as f64).collect(),
        ));
        let tok = tape.value(tape.patchify(x, 2));
        assert_eq!(tok.shape(), &[1, 8, 8]);
        assert_eq!(tok.data()[0], 0.0); // (0,0,0)
        assert_eq!(tok.data()[1], 1.0); // (0,0,1)
        assert_eq!(tok.data()[2], 4.0); // (0,1,0)
        assert_eq!(tok.data()[4], 16.0); // (1,0,0)
    }
}
