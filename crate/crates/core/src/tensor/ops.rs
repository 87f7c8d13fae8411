use rayon::prelude::*;

use super::{Result, Tensor, TensorError};

/// Output extent of a sliding window: `floor((extent + 2*pad - k) / stride) + 1`.
pub fn conv2d_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - kernel) / stride + 1
}

/// Output positions `y` in `[lo, hi)` whose tap `y*stride + offset - pad` lands inside `[0, extent)`.
fn valid_range(offset: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if extent + pad > offset {
        ((extent + pad - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Fixed-order f64 dot product with eight interleaved partial sums.
#[inline]
fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (xa, xb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] += xa[l] as f64 * xb[l] as f64;
        }
    }
    let mut tail = 0f64;
    for i in chunks * 8..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

#[inline]
fn sum_f64(a: &[f32]) -> f64 {
    let mut lanes = [0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            lanes[l] += a[i * 4 + l] as f64;
        }
    }
    let mut tail = 0f64;
    for &v in &a[chunks * 4..] {
        tail += v as f64;
    }
    (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]) + tail
}

/// Kernels (or input channels) updated together in the conv inner loops.
const BLOCK: usize = 4;

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    const OP: &str = "conv2d";
    let [n, c, h, w] = input.dims4(OP)?;
    let [d, wc, kh, kw] = weights.dims4(OP)?;
    if stride == 0 {
        return Err(TensorError::ZeroStride { op: OP });
    }
    if wc != c {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "C",
            expected: c,
            actual: wc,
        });
    }
    if kh != kw {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "k",
            expected: kh,
            actual: kw,
        });
    }
    let k = kh;
    if k > h + 2 * pad {
        return Err(TensorError::WindowTooLarge {
            op: OP,
            window: k,
            extent: h + 2 * pad,
        });
    }
    if k > w + 2 * pad {
        return Err(TensorError::WindowTooLarge {
            op: OP,
            window: k,
            extent: w + 2 * pad,
        });
    }
    Ok(ConvGeometry {
        n,
        c,
        h,
        w,
        d,
        k,
        oh: conv2d_output_extent(h, k, stride, pad),
        ow: conv2d_output_extent(w, k, stride, pad),
        stride,
        pad,
    })
}

/// 2-D cross-correlation of `input [N,C,H,W]` with `weights [D,C,k,k]` plus per-kernel bias.
///
/// Inner products accumulate in `f64` in a fixed `(c, ky, kx)` order and are
/// rounded once, so the result does not depend on how batches are scheduled.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input, weights, stride, pad)?;
    let bd = bias.dims1("conv2d")?;
    if bd != g.d {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "D",
            expected: g.d,
            actual: bd,
        });
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0f32; g.n * g.d * plane_out];
    let (x, wt, b) = (input.data(), weights.data(), bias.data());

    out.par_chunks_mut(g.d * plane_out)
        .enumerate()
        .for_each(|(n, out_n)| {
            let mut acc = vec![0f64; BLOCK * plane_out];
            for d0 in (0..g.d).step_by(BLOCK) {
                let nd = BLOCK.min(g.d - d0);
                acc.iter_mut().for_each(|a| *a = 0.0);
                let (a0, rest) = acc.split_at_mut(plane_out);
                let (a1, rest) = rest.split_at_mut(plane_out);
                let (a2, a3) = rest.split_at_mut(plane_out);
                for c in 0..g.c {
                    let plane = &x[(n * g.c + c) * plane_in..(n * g.c + c + 1) * plane_in];
                    for ky in 0..g.k {
                        let (y0, y1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                        for kx in 0..g.k {
                            let (x0, x1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                            if x0 >= x1 {
                                continue;
                            }
                            // kernels past the end of a partial block get weight 0
                            let wv = |j: usize| {
                                if j < nd {
                                    wt[(((d0 + j) * g.c + c) * g.k + ky) * g.k + kx] as f64
                                } else {
                                    0.0
                                }
                            };
                            let (w0, w1, w2, w3) = (wv(0), wv(1), wv(2), wv(3));
                            let len = x1 - x0;
                            for y in y0..y1 {
                                let iy = y * g.stride + ky - g.pad;
                                let row = &plane[iy * g.w..(iy + 1) * g.w];
                                let o = y * g.ow + x0;
                                let (r0, r1, r2, r3) = (
                                    &mut a0[o..o + len],
                                    &mut a1[o..o + len],
                                    &mut a2[o..o + len],
                                    &mut a3[o..o + len],
                                );
                                if g.stride == 1 {
                                    let src = &row[x0 + kx - g.pad..x0 + kx - g.pad + len];
                                    for j in 0..len {
                                        let v = src[j] as f64;
                                        r0[j] += w0 * v;
                                        r1[j] += w1 * v;
                                        r2[j] += w2 * v;
                                        r3[j] += w3 * v;
                                    }
                                } else {
                                    for j in 0..len {
                                        let v = row[(x0 + j) * g.stride + kx - g.pad] as f64;
                                        r0[j] += w0 * v;
                                        r1[j] += w1 * v;
                                        r2[j] += w2 * v;
                                        r3[j] += w3 * v;
                                    }
                                }
                            }
                        }
                    }
                }
                for j in 0..nd {
                    let bv = b[d0 + j] as f64;
                    let out_d = &mut out_n[(d0 + j) * plane_out..(d0 + j + 1) * plane_out];
                    for (o, a) in out_d.iter_mut().zip(&acc[j * plane_out..(j + 1) * plane_out]) {
                        *o = (a + bv) as f32;
                    }
                }
            }
        });
    Tensor::new(vec![g.n, g.d, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to its three arguments.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    conv2d_backward_with(grad_out, input, weights, stride, pad, true)
}

/// As [`conv2d_backward`], optionally skipping the input gradient (first layer).
pub(crate) fn conv2d_backward_with(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = conv_geometry(input, weights, stride, pad)?;
    let expected = [g.n, g.d, g.oh, g.ow];
    let got = grad_out.dims4("conv2d_backward")?;
    for (i, (&e, &a)) in expected.iter().zip(got.iter()).enumerate() {
        if e != a {
            return Err(TensorError::DimMismatch {
                op: "conv2d_backward",
                dim: ["N", "D", "H'", "W'"][i],
                expected: e,
                actual: a,
            });
        }
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let (x, wt, go) = (input.data(), weights.data(), grad_out.data());
    let kk = g.k * g.k;

    // Weight and bias gradients: one independent reduction per kernel.
    let mut gw = vec![0f32; g.d * g.c * kk];
    let mut gb = vec![0f32; g.d];
    gw.par_chunks_mut(g.c * kk)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(d, (gw_d, gb_d))| {
            let mut bias_acc = 0f64;
            for n in 0..g.n {
                let go_plane = &go[(n * g.d + d) * plane_out..(n * g.d + d + 1) * plane_out];
                bias_acc += sum_f64(go_plane);
            }
            *gb_d = bias_acc as f32;
            for c in 0..g.c {
                for ky in 0..g.k {
                    let (y0, y1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.k {
                        let (x0, x1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        let mut acc = 0f64;
                        if x0 < x1 {
                            for n in 0..g.n {
                                let plane =
                                    &x[(n * g.c + c) * plane_in..(n * g.c + c + 1) * plane_in];
                                let go_plane = &go
                                    [(n * g.d + d) * plane_out..(n * g.d + d + 1) * plane_out];
                                for y in y0..y1 {
                                    let iy = y * g.stride + ky - g.pad;
                                    let grow = &go_plane[y * g.ow + x0..y * g.ow + x1];
                                    if g.stride == 1 {
                                        let off = iy * g.w + x0 + kx - g.pad;
                                        acc += dot_f64(grow, &plane[off..off + (x1 - x0)]);
                                    } else {
                                        for (j, &gv) in grow.iter().enumerate() {
                                            let ix = (x0 + j) * g.stride + kx - g.pad;
                                            acc += gv as f64 * plane[iy * g.w + ix] as f64;
                                        }
                                    }
                                }
                            }
                        }
                        gw_d[(c * g.k + ky) * g.k + kx] = acc as f32;
                    }
                }
            }
        });

    let grad_input = if want_input {
        let mut gi = vec![0f32; g.n * g.c * plane_in];
        gi.par_chunks_mut(g.c * plane_in)
            .enumerate()
            .for_each(|(n, gi_n)| {
                let mut acc = vec![0f64; BLOCK * plane_in];
                for c0 in (0..g.c).step_by(BLOCK) {
                    let nc = BLOCK.min(g.c - c0);
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    let (a0, rest) = acc.split_at_mut(plane_in);
                    let (a1, rest) = rest.split_at_mut(plane_in);
                    let (a2, a3) = rest.split_at_mut(plane_in);
                    for d in 0..g.d {
                        let go_plane =
                            &go[(n * g.d + d) * plane_out..(n * g.d + d + 1) * plane_out];
                        for ky in 0..g.k {
                            let (y0, y1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                            for kx in 0..g.k {
                                let (x0, x1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                                if x0 >= x1 {
                                    continue;
                                }
                                let wv = |j: usize| {
                                    if j < nc {
                                        wt[((d * g.c + c0 + j) * g.k + ky) * g.k + kx] as f64
                                    } else {
                                        0.0
                                    }
                                };
                                let (w0, w1, w2, w3) = (wv(0), wv(1), wv(2), wv(3));
                                let len = x1 - x0;
                                for y in y0..y1 {
                                    let iy = y * g.stride + ky - g.pad;
                                    let grow = &go_plane[y * g.ow + x0..y * g.ow + x1];
                                    if g.stride == 1 {
                                        let off = iy * g.w + x0 + kx - g.pad;
                                        let (r0, r1, r2, r3) = (
                                            &mut a0[off..off + len],
                                            &mut a1[off..off + len],
                                            &mut a2[off..off + len],
                                            &mut a3[off..off + len],
                                        );
                                        for j in 0..len {
                                            let gv = grow[j] as f64;
                                            r0[j] += w0 * gv;
                                            r1[j] += w1 * gv;
                                            r2[j] += w2 * gv;
                                            r3[j] += w3 * gv;
                                        }
                                    } else {
                                        for (j, &gv) in grow.iter().enumerate() {
                                            let at = iy * g.w + (x0 + j) * g.stride + kx - g.pad;
                                            let gv = gv as f64;
                                            a0[at] += w0 * gv;
                                            a1[at] += w1 * gv;
                                            a2[at] += w2 * gv;
                                            a3[at] += w3 * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for j in 0..nc {
                        let gi_c = &mut gi_n[(c0 + j) * plane_in..(c0 + j + 1) * plane_in];
                        for (o, a) in gi_c.iter_mut().zip(&acc[j * plane_in..(j + 1) * plane_in]) {
                            *o = *a as f32;
                        }
                    }
                }
            });
        Some(Tensor::new(vec![g.n, g.c, g.h, g.w], gi)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        weights: Tensor::new(vec![g.d, g.c, g.k, g.k], gw)?,
        bias: Tensor::new(vec![g.d], gb)?,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes the gradient where `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != x.shape() {
        return Err(TensorError::DataLength {
            shape: x.shape().to_vec(),
            expected: x.len(),
            actual: grad_out.len(),
        });
    }
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Flat input positions selected by a max-pool forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Max pooling; ties resolve to the lowest flat index in the window.
pub fn maxpool2d_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    const OP: &str = "maxpool2d";
    let [n, c, h, w] = x.dims4(OP)?;
    if stride == 0 {
        return Err(TensorError::ZeroStride { op: OP });
    }
    for extent in [h, w] {
        if window == 0 || window > extent {
            return Err(TensorError::WindowTooLarge { op: OP, window, extent });
        }
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out)?,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return Err(TensorError::DataLength {
            shape: grad_out.shape().to_vec(),
            expected: indices.argmax.len(),
            actual: grad_out.len(),
        });
    }
    let mut gi = Tensor::zeros(&indices.input_shape);
    let gd = gi.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(&indices.argmax) {
        gd[idx] += g;
    }
    Ok(gi)
}

/// Global average pooling `[N,C,H,W] -> [N,C]`.
pub fn gap_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("gap")?;
    let plane = h * w;
    let out = x
        .data()
        .chunks(plane)
        .map(|p| (sum_f64(p) / plane as f64) as f32)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn gap_backward(grad_out: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c] = grad_out.dims2("gap_backward")?;
    let scale = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        let v = (g as f64 * scale) as f32;
        out.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Affine map `x [N,F] * weights[O,F]^T + bias[O]`.
pub fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "dense";
    let [n, f] = x.dims2(OP)?;
    let [o, wf] = weights.dims2(OP)?;
    if wf != f {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "F",
            expected: f,
            actual: wf,
        });
    }
    let bo = bias.dims1(OP)?;
    if bo != o {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "O",
            expected: o,
            actual: bo,
        });
    }
    let (xd, wd, bd) = (x.data(), weights.data(), bias.data());
    let mut out = Vec::with_capacity(n * o);
    for row in xd.chunks(f.max(1)).take(n) {
        for j in 0..o {
            let acc = dot_f64(row, &wd[j * f..(j + 1) * f]);
            out.push((acc + bd[j] as f64) as f32);
        }
    }
    if f == 0 {
        out = (0..n).flat_map(|_| bd.iter().copied()).collect();
    }
    Tensor::new(vec![n, o], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(grad_out: &Tensor, x: &Tensor, weights: &Tensor) -> Result<DenseGrads> {
    const OP: &str = "dense_backward";
    let [n, f] = x.dims2(OP)?;
    let [o, wf] = weights.dims2(OP)?;
    let [gn, go] = grad_out.dims2(OP)?;
    if wf != f {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "F",
            expected: f,
            actual: wf,
        });
    }
    if gn != n || go != o {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: if gn != n { "N" } else { "O" },
            expected: if gn != n { n } else { o },
            actual: if gn != n { gn } else { go },
        });
    }
    let (xd, wd, gd) = (x.data(), weights.data(), grad_out.data());
    let mut gx = vec![0f32; n * f];
    for i in 0..n {
        for k in 0..f {
            let mut acc = 0f64;
            for j in 0..o {
                acc += gd[i * o + j] as f64 * wd[j * f + k] as f64;
            }
            gx[i * f + k] = acc as f32;
        }
    }
    let mut gw = vec![0f32; o * f];
    let mut gb = vec![0f32; o];
    for j in 0..o {
        let mut bacc = 0f64;
        for i in 0..n {
            bacc += gd[i * o + j] as f64;
        }
        gb[j] = bacc as f32;
        for k in 0..f {
            let mut acc = 0f64;
            for i in 0..n {
                acc += gd[i * o + j] as f64 * xd[i * f + k] as f64;
            }
            gw[j * f + k] = acc as f32;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, f], gx)?,
        weights: Tensor::new(vec![o, f], gw)?,
        bias: Tensor::new(vec![o], gb)?,
    })
}

/// Mean softmax cross-entropy over the batch and its gradient `(softmax - onehot) / N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let [n, c] = logits.dims2("softmax_xent")?;
    if labels.len() != n {
        return Err(TensorError::DimMismatch {
            op: "softmax_xent",
            dim: "N",
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    let mut loss = 0f64;
    let mut grad = Vec::with_capacity(n * c);
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label] as f64 - max);
        for (j, e) in exps.iter().enumerate() {
            let p = e / z;
            let t = if j == label { 1.0 } else { 0.0 };
            grad.push(((p - t) / n as f64) as f32);
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::new(vec![n, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    /// Four-nested-loop reference convolution, accumulated in f64.
    fn reference_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [n, c, h, wd] = x.dims4("ref").unwrap();
        let [d, _, k, _] = w.dims4("ref").unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, d, oh, ow]);
        for ni in 0..n {
            for di in 0..d {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[di] as f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((di * c + ci) * k + ky) * k + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out.data_mut()[((ni * d + di) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let out = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_weights_yield_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, b.data()[(i / 25) % 4]);
        }
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 0, 1), (3, 2, 5)] {
            let x = random(&[2, 3, 8, 8], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let got = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let want = reference_conv(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-5, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 2, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[2]), 1, 0).unwrap_err();
        assert!(matches!(err, TensorError::DimMismatch { dim: "C", expected: 3, actual: 2, .. }));
        let w = Tensor::zeros(&[2, 3, 5, 5]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[2]), 1, 0).unwrap_err();
        assert!(matches!(err, TensorError::WindowTooLarge { window: 5, .. }));
        let w = Tensor::zeros(&[2, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[3]), 1, 0).unwrap_err();
        assert!(matches!(err, TensorError::DimMismatch { dim: "D", .. }));
    }

    #[test]
    fn conv_backward_zero_grad_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let g = conv2d_backward(&Tensor::zeros(&[2, 3, 5, 5]), &x, &w, 1, 1).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_single_pixel() {
        let x = Tensor::full(&[1, 1, 1, 1], 3.0);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0);
        let go = Tensor::full(&[1, 1, 1, 1], 0.5);
        let g = conv2d_backward(&go, &x, &w, 1, 0).unwrap();
        assert_eq!(g.weights.data(), &[1.5]);
        assert_eq!(g.input.unwrap().data(), &[1.0]);
        assert_eq!(g.bias.data(), &[0.5]);
    }

    #[test]
    fn conv_backward_rejects_bad_grad_shape() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let err = conv2d_backward(&Tensor::zeros(&[1, 2, 4, 4]), &x, &w, 1, 0).unwrap_err();
        assert!(matches!(err, TensorError::DimMismatch { dim: "H'", .. }));
    }

    #[test]
    fn conv_is_deterministic_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = Tensor::zeros(&[4]);
        let a = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(a, conv2d_forward(&x, &w, &b, 1, 1).unwrap());
        let scaled = conv2d_forward(&x.scaled(2.5), &w, &b, 1, 1).unwrap();
        assert!(scaled.max_abs_diff(&a.scaled(2.5)) < 1e-5);
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full(&[3], 5.0);
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);

        let c = Tensor::full(&[1, 1, 4, 4], 7.0);
        let (y, idx) = maxpool2d_forward(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let gi = maxpool2d_backward(&Tensor::full(&[1, 1, 2, 2], 1.0), &idx).unwrap();
        let hot: Vec<usize> = (0..16).filter(|&i| gi.data()[i] != 0.0).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);

        let err = maxpool2d_forward(&x, 3, 1).unwrap_err();
        assert!(matches!(err, TensorError::WindowTooLarge { window: 3, extent: 2, .. }));
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::new(vec![1, 2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, 0.0, 2.0, 4.0, 2.0])
            .unwrap();
        assert_eq!(gap_forward(&x).unwrap().data(), &[3.0, 2.0]);
        let g = gap_backward(&Tensor::new(vec![1, 2], vec![4.0, 8.0]).unwrap(), 2, 2).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn dense_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);
        let b = random(&[2], &mut rng);
        let w = random(&[2, 4], &mut rng);
        let out = dense_forward(&Tensor::zeros(&[3, 4]), &w, &b).unwrap();
        for row in out.data().chunks(2) {
            assert_eq!(row, b.data());
        }
        let err = dense_forward(&x, &Tensor::zeros(&[2, 5]), &b).unwrap_err();
        assert!(matches!(err, TensorError::DimMismatch { dim: "F", .. }));
    }

    #[test]
    fn xent_examples() {
        let (loss, _) = softmax_xent(&Tensor::zeros(&[1, 2]), &[0]).unwrap();
        assert!((loss as f64 - std::f64::consts::LN_2).abs() < 1e-7);
        let sat = Tensor::new(vec![1, 2], vec![100.0, 0.0]).unwrap();
        let (loss, _) = softmax_xent(&sat, &[0]).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(matches!(
            softmax_xent(&sat, &[2]).unwrap_err(),
            TensorError::LabelOutOfRange { label: 2, classes: 2 }
        ));
    }

    #[test]
    fn valid_range_covers_padding() {
        // k=3, pad=1, stride=1, extent=4: offset 0 skips y=0, offset 2 skips y=3
        assert_eq!(valid_range(0, 1, 1, 4, 4), (1, 4));
        assert_eq!(valid_range(1, 1, 1, 4, 4), (0, 4));
        assert_eq!(valid_range(2, 1, 1, 4, 4), (0, 3));
        // stride 2 output 2: taps y*2+ky-1
        assert_eq!(valid_range(0, 1, 2, 4, 2), (1, 2));
    }
}
