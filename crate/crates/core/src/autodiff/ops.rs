//! Differentiable operations: elementwise math, linear maps, batched matmul,
//! softmax, normalization, pooling, and the fused loss kernels.

use super::{GradFn, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

struct AddGrad;
impl<S: Scalar> GradFn<S> for AddGrad {
    fn backward(&self, g: &Tensor<S>, _: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![g.clone(), g.clone()]
    }
}

struct SubGrad;
impl<S: Scalar> GradFn<S> for SubGrad {
    fn backward(&self, g: &Tensor<S>, _: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![g.clone(), g.map(|x| -x)]
    }
}

struct MulGrad;
impl<S: Scalar> GradFn<S> for MulGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![g.zip(inp[1], |gi, b| gi * b), g.zip(inp[0], |gi, a| gi * a)]
    }
}

struct ScaleGrad<S>(S);
impl<S: Scalar> GradFn<S> for ScaleGrad<S> {
    fn backward(&self, g: &Tensor<S>, _: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![g.scale(self.0)]
    }
}

struct ReluGrad;
impl<S: Scalar> GradFn<S> for ReluGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![g.zip(inp[0], |gi, x| if x > S::zero() { gi } else { S::zero() })]
    }
}

struct SigmoidGrad;
impl<S: Scalar> GradFn<S> for SigmoidGrad {
    fn backward(&self, g: &Tensor<S>, _: &[&Tensor<S>], out: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![g.zip(out, |gi, y| gi * y * (S::one() - y))]
    }
}

struct ReshapeGrad(Vec<usize>);
impl<S: Scalar> GradFn<S> for ReshapeGrad {
    fn backward(&self, g: &Tensor<S>, _: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![g.clone().reshaped(&self.0)]
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

struct MeanAllGrad;
impl<S: Scalar> GradFn<S> for MeanAllGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let n = S::cast_from(inp[0].len() as f64);
        vec![Tensor::filled(inp[0].shape(), g.item() / n)]
    }
}

struct SumAllGrad;
impl<S: Scalar> GradFn<S> for SumAllGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![Tensor::filled(inp[0].shape(), g.item())]
    }
}

// ---------------------------------------------------------------------------
// Linear / matmul
// ---------------------------------------------------------------------------

fn matmul<S: Scalar>(
    a: &[S],
    b: &[S],
    n: usize,
    k: usize,
    m: usize,
    ta: bool,
    tb: bool,
) -> Vec<S> {
    // out[n, m] = sum_k A[n, k] * B[k, m], with flag-controlled layouts:
    // ta: A stored (k, n); tb: B stored (m, k).
    let mut out = vec![S::zero(); n * m];
    if !ta && !tb {
        for i in 0..n {
            let or = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                let br = &b[p * m..(p + 1) * m];
                for (o, &bv) in or.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    } else if !ta && tb {
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot8(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
            }
        }
    } else if ta && !tb {
        for p in 0..k {
            let ar = &a[p * n..(p + 1) * n];
            let br = &b[p * m..(p + 1) * m];
            for i in 0..n {
                let av = ar[i];
                let or = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in or.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    } else {
        for i in 0..n {
            for j in 0..m {
                let mut acc = S::zero();
                for p in 0..k {
                    acc += a[p * n + i] * b[j * k + p];
                }
                out[i * m + j] = acc;
            }
        }
    }
    out
}

/// Fixed-order 8-lane dot product; vectorizes without reassociation freedom.
pub(crate) fn dot8<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ax = &a[c * 8..c * 8 + 8];
        let bx = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ax[l] * bx[l];
        }
    }
    let mut rest = S::zero();
    for i in chunks * 8..a.len() {
        rest += a[i] * b[i];
    }
    let mut total = rest;
    for l in 0..8 {
        total += acc[l];
    }
    total
}

struct LinearGrad {
    rows: usize,
    input: usize,
    output: usize,
    has_bias: bool,
}
impl<S: Scalar> GradFn<S> for LinearGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let (r, i, o) = (self.rows, self.input, self.output);
        let x = inp[0].data();
        let w = inp[1].data();
        let gd = g.data();
        // dX[r, i] = G[r, o] * W[o, i]
        let dx = matmul(gd, w, r, o, i, false, false);
        // dW[o, i] = G^T[o, r] * X[r, i]
        let dw = matmul(gd, x, o, r, i, true, false);
        let mut grads = vec![
            Tensor::from_vec(inp[0].shape(), dx),
            Tensor::from_vec(inp[1].shape(), dw),
        ];
        if self.has_bias {
            let mut db = vec![S::zero(); o];
            for row in 0..r {
                for (j, dbj) in db.iter_mut().enumerate() {
                    *dbj += gd[row * o + j];
                }
            }
            grads.push(Tensor::from_vec(&[o], db));
        }
        grads
    }
}

struct BmmGrad {
    groups: usize,
    n: usize,
    k: usize,
    m: usize,
    tb: bool,
}
impl<S: Scalar> GradFn<S> for BmmGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let (n, k, m) = (self.n, self.k, self.m);
        let mut da = vec![S::zero(); inp[0].len()];
        let mut db = vec![S::zero(); inp[1].len()];
        for gi in 0..self.groups {
            let a = &inp[0].data()[gi * n * k..(gi + 1) * n * k];
            let gd = &g.data()[gi * n * m..(gi + 1) * n * m];
            if !self.tb {
                let b = &inp[1].data()[gi * k * m..(gi + 1) * k * m];
                // dA = G * B^T; dB = A^T * G
                da[gi * n * k..(gi + 1) * n * k]
                    .copy_from_slice(&matmul(gd, b, n, m, k, false, true));
                db[gi * k * m..(gi + 1) * k * m]
                    .copy_from_slice(&matmul(a, gd, k, n, m, true, false));
            } else {
                let b = &inp[1].data()[gi * m * k..(gi + 1) * m * k];
                // out = A * B^T: dA = G * B; dB = G^T * A
                da[gi * n * k..(gi + 1) * n * k]
                    .copy_from_slice(&matmul(gd, b, n, m, k, false, false));
                db[gi * m * k..(gi + 1) * m * k]
                    .copy_from_slice(&matmul(gd, a, m, n, k, true, false));
            }
        }
        vec![
            Tensor::from_vec(inp[0].shape(), da),
            Tensor::from_vec(inp[1].shape(), db),
        ]
    }
}

// ---------------------------------------------------------------------------
// Softmax / layer norm / L2 normalize
// ---------------------------------------------------------------------------

fn softmax_rows<S: Scalar>(x: &[S], row: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (xr, or) in x.chunks_exact(row).zip(out.chunks_exact_mut(row)) {
        let mx = xr.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mx).exp();
            z += *o;
        }
        for o in or.iter_mut() {
            *o = *o / z;
        }
    }
    out
}

struct SoftmaxGrad {
    row: usize,
}
impl<S: Scalar> GradFn<S> for SoftmaxGrad {
    fn backward(&self, g: &Tensor<S>, _: &[&Tensor<S>], out: &Tensor<S>) -> Vec<Tensor<S>> {
        let row = self.row;
        let mut dx = vec![S::zero(); out.len()];
        for ((yr, gr), dr) in out
            .data()
            .chunks_exact(row)
            .zip(g.data().chunks_exact(row))
            .zip(dx.chunks_exact_mut(row))
        {
            let mut s = S::zero();
            for (y, gi) in yr.iter().zip(gr) {
                s += *y * *gi;
            }
            for ((d, y), gi) in dr.iter_mut().zip(yr).zip(gr) {
                *d = *y * (*gi - s);
            }
        }
        vec![Tensor::from_vec(out.shape(), dx)]
    }
}

struct LayerNormGrad<S> {
    row: usize,
    eps: S,
}
impl<S: Scalar> GradFn<S> for LayerNormGrad<S> {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let row = self.row;
        let x = inp[0].data();
        let gamma = inp[1].data();
        let gd = g.data();
        let rows = x.len() / row;
        let rn = S::cast_from(row as f64);

        let mut dx = vec![S::zero(); x.len()];
        let mut dgamma = vec![S::zero(); row];
        let mut dbeta = vec![S::zero(); row];
        for r in 0..rows {
            let xr = &x[r * row..(r + 1) * row];
            let gr = &gd[r * row..(r + 1) * row];
            let mean = xr.iter().copied().sum::<S>() / rn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / rn;
            let inv = (var + self.eps).sqrt().recip();

            // dL/dxhat_i = g_i * gamma_i; then the standard layernorm pullback.
            let mut sum_dxh = S::zero();
            let mut sum_dxh_xh = S::zero();
            let xh: Vec<S> = xr.iter().map(|&v| (v - mean) * inv).collect();
            let dxh: Vec<S> = gr.iter().zip(gamma).map(|(&gi, &ga)| gi * ga).collect();
            for i in 0..row {
                sum_dxh += dxh[i];
                sum_dxh_xh += dxh[i] * xh[i];
                dgamma[i] += gr[i] * xh[i];
                dbeta[i] += gr[i];
            }
            for i in 0..row {
                dx[r * row + i] = inv / rn * (dxh[i] * rn - sum_dxh - xh[i] * sum_dxh_xh);
            }
        }
        vec![
            Tensor::from_vec(inp[0].shape(), dx),
            Tensor::from_vec(&[row], dgamma),
            Tensor::from_vec(&[row], dbeta),
        ]
    }
}

struct L2NormalizeGrad {
    row: usize,
}
impl<S: Scalar> GradFn<S> for L2NormalizeGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], out: &Tensor<S>) -> Vec<Tensor<S>> {
        let row = self.row;
        let mut dx = vec![S::zero(); out.len()];
        for r in 0..out.len() / row {
            let xr = &inp[0].data()[r * row..(r + 1) * row];
            let yr = &out.data()[r * row..(r + 1) * row];
            let gr = &g.data()[r * row..(r + 1) * row];
            let norm = dot8(xr, xr).sqrt();
            if norm == S::zero() {
                continue; // zero vector stays zero; gradient defined as 0
            }
            let ydotg = dot8(yr, gr);
            for i in 0..row {
                dx[r * row + i] = (gr[i] - yr[i] * ydotg) / norm;
            }
        }
        vec![Tensor::from_vec(inp[0].shape(), dx)]
    }
}

// ---------------------------------------------------------------------------
// Structural: concat columns, channel select, upsample, adaptive pool
// ---------------------------------------------------------------------------

struct ConcatColsGrad {
    cols: Vec<usize>,
    rows: usize,
}
impl<S: Scalar> GradFn<S> for ConcatColsGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let total: usize = self.cols.iter().sum();
        let mut grads: Vec<Tensor<S>> = inp.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let gd = g.data();
        for r in 0..self.rows {
            let mut off = 0;
            for (pi, &c) in self.cols.iter().enumerate() {
                let dst = &mut grads[pi].data_mut()[r * c..(r + 1) * c];
                dst.copy_from_slice(&gd[r * total + off..r * total + off + c]);
                off += c;
            }
        }
        grads
    }
}

struct SelectChannelGrad {
    channel: usize,
    channels: usize,
    spatial: usize,
    batch: usize,
}
impl<S: Scalar> GradFn<S> for SelectChannelGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let mut dx = Tensor::zeros(inp[0].shape());
        let sp = self.spatial;
        for b in 0..self.batch {
            let src = &g.data()[b * sp..(b + 1) * sp];
            let base = (b * self.channels + self.channel) * sp;
            dx.data_mut()[base..base + sp].copy_from_slice(src);
        }
        vec![dx]
    }
}

struct Upsample2Grad {
    shape_in: [usize; 5],
}
impl<S: Scalar> GradFn<S> for Upsample2Grad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let [b, c, d, h, w] = self.shape_in;
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let mut dx = vec![S::zero(); inp[0].len()];
        let gd = g.data();
        for bc in 0..b * c {
            let src = &gd[bc * d2 * h2 * w2..(bc + 1) * d2 * h2 * w2];
            let dst = &mut dx[bc * d * h * w..(bc + 1) * d * h * w];
            for zo in 0..d2 {
                for yo in 0..h2 {
                    let row = &src[(zo * h2 + yo) * w2..(zo * h2 + yo) * w2 + w2];
                    let drow = (zo / 2 * h + yo / 2) * w;
                    for xo in 0..w2 {
                        dst[drow + xo / 2] += row[xo];
                    }
                }
            }
        }
        vec![Tensor::from_vec(inp[0].shape(), dx)]
    }
}

/// Partition bounds of the adaptive pooling rule along one axis:
/// output cell i over input size `s` covers `[floor(i*s/t), ceil((i+1)*s/t))`.
pub fn adaptive_bounds(i: usize, s: usize, t: usize) -> (usize, usize) {
    (i * s / t, ((i + 1) * s).div_ceil(t))
}

fn adaptive_pool_forward<S: Scalar>(x: &Tensor<S>, t: usize) -> Tensor<S> {
    let sh = x.shape();
    let (b, c, d, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let mut out = Tensor::zeros(&[b, c, t, t, t]);
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        let src = &xd[bc * d * h * w..(bc + 1) * d * h * w];
        let dst = &mut od[bc * t * t * t..(bc + 1) * t * t * t];
        for zo in 0..t {
            let (z0, z1) = adaptive_bounds(zo, d, t);
            for yo in 0..t {
                let (y0, y1) = adaptive_bounds(yo, h, t);
                for xo in 0..t {
                    let (x0, x1) = adaptive_bounds(xo, w, t);
                    let mut acc = S::zero();
                    for zi in z0..z1 {
                        for yi in y0..y1 {
                            for xi in x0..x1 {
                                acc += src[(zi * h + yi) * w + xi];
                            }
                        }
                    }
                    let cells = S::cast_from(((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64);
                    dst[(zo * t + yo) * t + xo] = acc / cells;
                }
            }
        }
    }
    out
}

struct AdaptivePoolGrad {
    target: usize,
}
impl<S: Scalar> GradFn<S> for AdaptivePoolGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let t = self.target;
        let sh = inp[0].shape();
        let (b, c, d, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
        let mut dx = vec![S::zero(); inp[0].len()];
        let gd = g.data();
        for bc in 0..b * c {
            let src = &gd[bc * t * t * t..(bc + 1) * t * t * t];
            let dst = &mut dx[bc * d * h * w..(bc + 1) * d * h * w];
            for zo in 0..t {
                let (z0, z1) = adaptive_bounds(zo, d, t);
                for yo in 0..t {
                    let (y0, y1) = adaptive_bounds(yo, h, t);
                    for xo in 0..t {
                        let (x0, x1) = adaptive_bounds(xo, w, t);
                        let cells = S::cast_from(((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64);
                        let gv = src[(zo * t + yo) * t + xo] / cells;
                        for zi in z0..z1 {
                            for yi in y0..y1 {
                                for xi in x0..x1 {
                                    dst[(zi * h + yi) * w + xi] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Tensor::from_vec(inp[0].shape(), dx)]
    }
}

// ---------------------------------------------------------------------------
// Fused losses
// ---------------------------------------------------------------------------

struct StopGradientGrad;
impl<S: Scalar> GradFn<S> for StopGradientGrad {
    fn backward(&self, _: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![Tensor::zeros(inp[0].shape())]
    }
}

struct GatherGrad {
    indices: std::sync::Arc<Vec<u32>>,
}
impl<S: Scalar> GradFn<S> for GatherGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let mut dx = vec![S::zero(); inp[0].len()];
        for (gi, &src) in g.data().iter().zip(self.indices.iter()) {
            dx[src as usize] += *gi;
        }
        vec![Tensor::from_vec(inp[0].shape(), dx)]
    }
}

struct InfonceDiagGrad;
impl<S: Scalar> GradFn<S> for InfonceDiagGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        let sh = inp[0].shape();
        let (b, n) = (sh[0], sh[1]);
        let scale = g.item() / S::cast_from((b * n) as f64);
        let mut dl = softmax_rows(inp[0].data(), n);
        for bi in 0..b {
            for i in 0..n {
                let base = (bi * n + i) * n;
                dl[base + i] -= S::one();
            }
        }
        for v in &mut dl {
            *v = *v * scale;
        }
        vec![Tensor::from_vec(sh, dl)]
    }
}

struct CosineRowsGrad;
impl<S: Scalar> GradFn<S> for CosineRowsGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], out: &Tensor<S>) -> Vec<Tensor<S>> {
        let rows = out.len();
        let l = inp[0].len() / rows;
        let mut da = vec![S::zero(); inp[0].len()];
        let mut db = vec![S::zero(); inp[1].len()];
        for r in 0..rows {
            let a = &inp[0].data()[r * l..(r + 1) * l];
            let b = &inp[1].data()[r * l..(r + 1) * l];
            let na = dot8(a, a).sqrt();
            let nb = dot8(b, b).sqrt();
            if na == S::zero() || nb == S::zero() {
                continue; // cosine defined as 0 there; gradient 0
            }
            let cos = out.data()[r];
            let gv = g.data()[r];
            for i in 0..l {
                da[r * l + i] = gv * (b[i] / (na * nb) - cos * a[i] / (na * na));
                db[r * l + i] = gv * (a[i] / (na * nb) - cos * b[i] / (nb * nb));
            }
        }
        vec![
            Tensor::from_vec(inp[0].shape(), da),
            Tensor::from_vec(inp[1].shape(), db),
        ]
    }
}

struct BceLogitsGrad {
    count: usize,
}
impl<S: Scalar> GradFn<S> for BceLogitsGrad {
    fn backward(&self, g: &Tensor<S>, inp: &[&Tensor<S>], _: &Tensor<S>) -> Vec<Tensor<S>> {
        // Gradient only w.r.t. the logits; targets and mask are constants.
        let z = inp[0].data();
        let t = inp[1].data();
        let m = inp[2].data();
        let scale = g.item() / S::cast_from(self.count as f64);
        let mut dz = vec![S::zero(); z.len()];
        for i in 0..z.len() {
            if m[i] > S::zero() {
                let sig = S::one() / (S::one() + (-z[i]).exp());
                dz[i] = (sig - t[i]) * scale;
            }
        }
        vec![
            Tensor::from_vec(inp[0].shape(), dz),
            Tensor::zeros(inp[1].shape()),
            Tensor::zeros(inp[2].shape()),
        ]
    }
}

// ---------------------------------------------------------------------------
// Public op surface
// ---------------------------------------------------------------------------

impl<S: Scalar> Tape<S> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip(y, |p, q| p + q), Box::new(AddGrad))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip(y, |p, q| p - q), Box::new(SubGrad))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip(y, |p, q| p * q), Box::new(MulGrad))
    }

    pub fn scale(&self, x: Var, c: S) -> Var {
        self.unary(x, |t| t.scale(c), Box::new(ScaleGrad(c)))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |t| t.map(|v| v.max(S::zero())), Box::new(ReluGrad))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(
            x,
            |t| t.map(|v| S::one() / (S::one() + (-v).exp())),
            Box::new(SigmoidGrad),
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let old = self.shape_of(x);
        let shape = shape.to_vec();
        self.unary(
            x,
            move |t| t.clone().reshaped(&shape),
            Box::new(ReshapeGrad(old)),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        self.unary(
            x,
            |t| Tensor::scalar(t.sum() / S::cast_from(t.len() as f64)),
            Box::new(MeanAllGrad),
        )
    }

    pub fn sum_all(&self, x: Var) -> Var {
        self.unary(x, |t| Tensor::scalar(t.sum()), Box::new(SumAllGrad))
    }

    /// `x`: (rows, in), `w`: (out, in), optional bias (out) → (rows, out).
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape_of(x);
        let ws = self.shape_of(w);
        assert_eq!(xs.len(), 2, "linear input must be rank 2");
        assert_eq!(ws.len(), 2, "linear weight must be rank 2");
        assert_eq!(xs[1], ws[1], "linear: in-dim mismatch");
        let (rows, input, output) = (xs[0], xs[1], ws[0]);
        let grad = Box::new(LinearGrad {
            rows,
            input,
            output,
            has_bias: b.is_some(),
        });
        let compute = |vals: &[&Tensor<S>]| {
            let mut out = matmul(vals[0].data(), vals[1].data(), rows, input, output, false, true);
            if vals.len() == 3 {
                let bias = vals[2].data();
                for r in 0..rows {
                    for (j, &bv) in bias.iter().enumerate() {
                        out[r * output + j] += bv;
                    }
                }
            }
            Tensor::from_vec(&[rows, output], out)
        };
        match b {
            Some(bias) => self.nary(&[x, w, bias], compute, grad),
            None => self.nary(&[x, w], compute, grad),
        }
    }

    /// Batched matmul: `a` (G, N, K) × `b` (G, K, M) → (G, N, M).
    /// With `tb`, `b` is (G, M, K) and the product is `a · bᵀ`.
    pub fn bmm(&self, a: Var, b: Var, tb: bool) -> Var {
        let ash = self.shape_of(a);
        let bsh = self.shape_of(b);
        assert_eq!(ash.len(), 3);
        assert_eq!(bsh.len(), 3);
        assert_eq!(ash[0], bsh[0], "bmm group mismatch");
        let (g, n, k) = (ash[0], ash[1], ash[2]);
        let m = if tb { bsh[1] } else { bsh[2] };
        assert_eq!(if tb { bsh[2] } else { bsh[1] }, k, "bmm inner mismatch");
        self.binary(
            a,
            b,
            |at, bt| {
                let mut out = vec![S::zero(); g * n * m];
                for gi in 0..g {
                    let av = &at.data()[gi * n * k..(gi + 1) * n * k];
                    let bv = &bt.data()[gi * k * m..(gi + 1) * k * m];
                    out[gi * n * m..(gi + 1) * n * m]
                        .copy_from_slice(&matmul(av, bv, n, k, m, false, tb));
                }
                Tensor::from_vec(&[g, n, m], out)
            },
            Box::new(BmmGrad {
                groups: g,
                n,
                k,
                m,
                tb,
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let sh = self.shape_of(x);
        let row = *sh.last().expect("softmax needs rank >= 1");
        self.unary(
            x,
            |t| Tensor::from_vec(t.shape(), softmax_rows(t.data(), row)),
            Box::new(SoftmaxGrad { row }),
        )
    }

    /// Layer normalization over the last axis with affine params.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let sh = self.shape_of(x);
        let row = *sh.last().unwrap();
        self.nary(
            &[x, gamma, beta],
            |vals| {
                let x = vals[0];
                let ga = vals[1].data();
                let be = vals[2].data();
                let rn = S::cast_from(row as f64);
                let mut out = vec![S::zero(); x.len()];
                for (xr, or) in x
                    .data()
                    .chunks_exact(row)
                    .zip(out.chunks_exact_mut(row))
                {
                    let mean = xr.iter().copied().sum::<S>() / rn;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / rn;
                    let inv = (var + eps).sqrt().recip();
                    for i in 0..row {
                        or[i] = (xr[i] - mean) * inv * ga[i] + be[i];
                    }
                }
                Tensor::from_vec(x.shape(), out)
            },
            Box::new(LayerNormGrad { row, eps }),
        )
    }

    /// Row-wise L2 normalization over the last axis; zero rows stay zero.
    pub fn l2_normalize(&self, x: Var) -> Var {
        let sh = self.shape_of(x);
        let row = *sh.last().unwrap();
        self.unary(
            x,
            |t| {
                let mut out = vec![S::zero(); t.len()];
                for (xr, or) in t.data().chunks_exact(row).zip(out.chunks_exact_mut(row)) {
                    let norm = dot8(xr, xr).sqrt();
                    if norm > S::zero() {
                        for i in 0..row {
                            or[i] = xr[i] / norm;
                        }
                    }
                }
                Tensor::from_vec(t.shape(), out)
            },
            Box::new(L2NormalizeGrad { row }),
        )
    }

    /// Concatenate rank-2 tensors (rows, c_i) along axis 1.
    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| self.shape_of(v)).collect();
        let rows = shapes[0][0];
        let cols: Vec<usize> = shapes
            .iter()
            .map(|s| {
                assert_eq!(s.len(), 2, "concat_cols expects rank-2 inputs");
                assert_eq!(s[0], rows, "concat_cols row mismatch");
                s[1]
            })
            .collect();
        let total: usize = cols.iter().sum();
        let cols2 = cols.clone();
        self.nary(
            xs,
            move |vals| {
                let mut out = vec![S::zero(); rows * total];
                for r in 0..rows {
                    let mut off = 0;
                    for (vi, &c) in cols2.iter().enumerate() {
                        out[r * total + off..r * total + off + c]
                            .copy_from_slice(&vals[vi].data()[r * c..(r + 1) * c]);
                        off += c;
                    }
                }
                Tensor::from_vec(&[rows, total], out)
            },
            Box::new(ConcatColsGrad { cols, rows }),
        )
    }

    /// Slice one channel of (B, C, D, H, W) and flatten to (B, D·H·W).
    pub fn select_channel(&self, x: Var, channel: usize) -> Var {
        let sh = self.shape_of(x);
        assert_eq!(sh.len(), 5);
        let (b, c) = (sh[0], sh[1]);
        let spatial = sh[2] * sh[3] * sh[4];
        assert!(channel < c, "channel {channel} out of {c}");
        self.unary(
            x,
            |t| {
                let mut out = vec![S::zero(); b * spatial];
                for bi in 0..b {
                    let base = (bi * c + channel) * spatial;
                    out[bi * spatial..(bi + 1) * spatial]
                        .copy_from_slice(&t.data()[base..base + spatial]);
                }
                Tensor::from_vec(&[b, spatial], out)
            },
            Box::new(SelectChannelGrad {
                channel,
                channels: c,
                spatial,
                batch: b,
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of (B, C, D, H, W).
    pub fn upsample2(&self, x: Var) -> Var {
        let sh = self.shape_of(x);
        assert_eq!(sh.len(), 5);
        let shape_in = [sh[0], sh[1], sh[2], sh[3], sh[4]];
        let (b, c, d, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
        self.unary(
            x,
            |t| {
                let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
                let mut out = vec![S::zero(); b * c * d2 * h2 * w2];
                for bc in 0..b * c {
                    let src = &t.data()[bc * d * h * w..(bc + 1) * d * h * w];
                    let dst = &mut out[bc * d2 * h2 * w2..(bc + 1) * d2 * h2 * w2];
                    for zo in 0..d2 {
                        for yo in 0..h2 {
                            let srow = (zo / 2 * h + yo / 2) * w;
                            let drow = (zo * h2 + yo) * w2;
                            for xo in 0..w2 {
                                dst[drow + xo] = src[srow + xo / 2];
                            }
                        }
                    }
                }
                Tensor::from_vec(&[b, c, d2, h2, w2], out)
            },
            Box::new(Upsample2Grad { shape_in }),
        )
    }

    /// Adaptive mean pooling of (B, C, D, H, W) to (B, C, t, t, t) under the
    /// partition rule `[floor(i*s/t), ceil((i+1)*s/t))`; sizes below `t` are
    /// replicated up by the same rule.
    pub fn adaptive_pool(&self, x: Var, target: usize) -> Var {
        self.unary(
            x,
            |t| adaptive_pool_forward(t, target),
            Box::new(AdaptivePoolGrad { target }),
        )
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&self, x: Var) -> Var {
        self.unary(x, |t| t.clone(), Box::new(StopGradientGrad))
    }

    /// Element gather: `out[i] = x[indices[i]]`. Used for layout permutations
    /// (attention head splits); backward scatter-adds through the same map.
    pub fn gather(&self, x: Var, indices: Vec<u32>, out_shape: &[usize]) -> Var {
        let n: usize = out_shape.iter().product();
        assert_eq!(indices.len(), n, "gather index count != output size");
        let indices = std::sync::Arc::new(indices);
        let idx = indices.clone();
        let shape = out_shape.to_vec();
        self.unary(
            x,
            move |t| {
                let data = idx.iter().map(|&i| t.data()[i as usize]).collect();
                Tensor::from_vec(&shape, data)
            },
            Box::new(GatherGrad { indices }),
        )
    }

    /// InfoNCE with positives on the diagonal: `logits` (B, N, N) already
    /// scaled by 1/τ; returns −(1/NB) Σ log softmax(positive).
    pub fn infonce_diag(&self, logits: Var) -> Var {
        let sh = self.shape_of(logits);
        assert_eq!(sh.len(), 3);
        assert_eq!(sh[1], sh[2], "diagonal InfoNCE needs square logits");
        let (b, n) = (sh[0], sh[1]);
        self.unary(
            logits,
            |t| {
                let mut total = S::zero();
                for bi in 0..b {
                    for i in 0..n {
                        let row = &t.data()[(bi * n + i) * n..(bi * n + i + 1) * n];
                        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                        let lse = mx
                            + row
                                .iter()
                                .map(|&v| (v - mx).exp())
                                .sum::<S>()
                                .ln();
                        total += lse - row[i];
                    }
                }
                Tensor::scalar(total / S::cast_from((b * n) as f64))
            },
            Box::new(InfonceDiagGrad),
        )
    }

    /// Row-wise cosine similarity of two (rows, L) tensors → (rows,); rows
    /// with a zero-norm side yield 0.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Var {
        let sh = self.shape_of(a);
        assert_eq!(sh, self.shape_of(b), "cosine_rows shape mismatch");
        let rows = sh[0];
        let l = sh[1];
        self.binary(
            a,
            b,
            |at, bt| {
                let mut out = vec![S::zero(); rows];
                for r in 0..rows {
                    let av = &at.data()[r * l..(r + 1) * l];
                    let bv = &bt.data()[r * l..(r + 1) * l];
                    let na = dot8(av, av).sqrt();
                    let nb = dot8(bv, bv).sqrt();
                    if na > S::zero() && nb > S::zero() {
                        out[r] = dot8(av, bv) / (na * nb);
                    }
                }
                Tensor::from_vec(&[rows], out)
            },
            Box::new(CosineRowsGrad),
        )
    }

    /// Mean binary cross-entropy on logits against constant targets over a
    /// 0/1 mask. Numerically stable log-sum-exp form.
    pub fn bce_with_logits(&self, logits: Var, targets: Var, mask: Var) -> Var {
        let count = {
            let m = self.value(mask);
            m.data().iter().filter(|&&v| v > S::zero()).count()
        };
        assert!(count > 0, "bce mask selects no elements");
        self.nary(
            &[logits, targets, mask],
            |vals| {
                let z = vals[0].data();
                let t = vals[1].data();
                let m = vals[2].data();
                let mut total = S::zero();
                for i in 0..z.len() {
                    if m[i] > S::zero() {
                        // max(z,0) - z*t + ln(1 + exp(-|z|))
                        let zi = z[i];
                        total += zi.max(S::zero()) - zi * t[i]
                            + (S::one() + (-zi.abs()).exp()).ln();
                    }
                }
                Tensor::scalar(total / S::cast_from(count as f64))
            },
            Box::new(BceLogitsGrad { count }),
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
    fn elementwise_grads_match_fd() {
        let x0 = randt(&[2, 3], 1);
        assert_grad_matches(
            &mut |t, x| {
                let y = t.relu(x);
                let z = t.sigmoid(y);
                let w = t.mul(z, z);
                t.mean_all(w)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn linear_grads_match_fd() {
        let x0 = randt(&[12], 2);
        assert_grad_matches(
            &mut |t, x| {
                // First 6 entries act as data, rest as weights, to check both.
                let data = t.reshape(x, &[12, 1]);
                let w = t.leaf(randt(&[3, 1], 3));
                let b = t.leaf(randt(&[3], 4));
                let y = t.linear(data, w, Some(b));
                let s = t.sigmoid(y);
                t.mean_all(s)
            },
            &x0,
            1e-6,
        );

        // Gradient w.r.t. weights and bias.
        let tape = Tape::new();
        let x = tape.leaf(randt(&[4, 3], 5));
        let w = tape.leaf(randt(&[2, 3], 6));
        let b = tape.leaf(randt(&[2], 7));
        let y = tape.linear(x, w, Some(b));
        let loss = tape.mean_all(tape.mul(y, y));
        let grads = tape.backward(loss);

        for (var, seed) in [(w, 6u64), (b, 7u64), (x, 5u64)] {
            let v0 = tape.value(var);
            let analytic = grads.get_or_zeros(var, v0.shape());
            let mut f = |vt: &Tensor<f64>| {
                let t2 = Tape::new();
                let xs = [x, w, b].map(|vv| {
                    if vv == var {
                        t2.leaf(vt.clone())
                    } else {
                        t2.leaf(tape.value(vv))
                    }
                });
                let y2 = t2.linear(xs[0], xs[1], Some(xs[2]));
                let l2 = t2.mean_all(t2.mul(y2, y2));
                t2.value(l2).item()
            };
            let fd = crate::autodiff::testutil::fd_gradient(&mut f, &v0, 1e-5);
            for i in 0..v0.len() {
                let a = analytic.data()[i];
                assert!(
                    (a - fd[i]).abs() < 1e-6,
                    "seed {seed} idx {i}: {a} vs {}",
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn bmm_softmax_grads_match_fd() {
        let x0 = randt(&[2, 2, 3], 8);
        assert_grad_matches(
            &mut |t, x| {
                let b = t.leaf(randt(&[2, 2, 3], 9));
                let s = t.bmm(x, b, true); // (2,2,2)
                let sm = t.softmax(s);
                let y = t.bmm(sm, b, false); // (2,2,3)
                t.mean_all(t.mul(y, y))
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn layernorm_l2norm_grads_match_fd() {
        let x0 = randt(&[3, 4], 10);
        assert_grad_matches(
            &mut |t, x| {
                let gamma = t.leaf(randt(&[4], 11).map(|v| v + 2.0));
                let beta = t.leaf(randt(&[4], 12));
                let ln = t.layer_norm(x, gamma, beta, 1e-5);
                let nn = t.l2_normalize(ln);
                t.mean_all(t.mul(nn, nn))
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn pooling_upsample_grads_match_fd() {
        let x0 = randt(&[1, 2, 3, 3, 3], 13);
        assert_grad_matches(
            &mut |t, x| {
                let up = t.upsample2(x); // 6^3
                let pooled = t.adaptive_pool(up, 2);
                t.mean_all(t.mul(pooled, pooled))
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn fused_losses_grads_match_fd() {
        let x0 = randt(&[2, 3, 3], 14);
        assert_grad_matches(&mut |t, x| t.infonce_diag(x), &x0, 1e-6);

        let a0 = randt(&[3, 5], 15);
        assert_grad_matches(
            &mut |t, a| {
                let b = t.leaf(randt(&[3, 5], 16));
                let c = t.cosine_rows(a, b);
                t.mean_all(c)
            },
            &a0,
            1e-6,
        );

        let z0 = randt(&[2, 3], 17);
        assert_grad_matches(
            &mut |t, z| {
                let targets = t.leaf(randt(&[2, 3], 18).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                let mask = t.leaf(Tensor::from_vec(&[2, 3], vec![1., 1., 0., 1., 1., 1.]));
                t.bce_with_logits(z, targets, mask)
            },
            &z0,
            1e-6,
        );
    }

    #[test]
    fn concat_select_grads_match_fd() {
        let x0 = randt(&[2, 2, 2, 2, 2], 19);
        assert_grad_matches(
            &mut |t, x| {
                let c0 = t.select_channel(x, 0);
                let c1 = t.select_channel(x, 1);
                let cat = t.concat_cols(&[c0, c1]);
                let s = t.sigmoid(cat);
                t.mean_all(t.mul(s, s))
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn adaptive_pool_identity_and_constant() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(randt(&[1, 1, 4, 4, 4], 20));
        let same = tape.adaptive_pool(x, 4);
        assert_eq!(tape.value(same), tape.value(x));

        let c = tape.leaf(Tensor::filled(&[1, 1, 8, 8, 8], 0.7));
        let pooled = tape.adaptive_pool(c, 4);
        assert!(tape.value(pooled).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn shared_leaf_accumulates_gradient() {
        // One leaf consumed twice must receive both contributions.
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![0.5, -0.25]));
        let y = tape.add(x, x);
        let loss = tape.mean_all(tape.mul(y, y));
        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap();
        // d/dx mean((2x)^2) = 4x
        assert!((g.data()[0] - 2.0).abs() < 1e-12);
        assert!((g.data()[1] + 1.0).abs() < 1e-12);
    }
}
