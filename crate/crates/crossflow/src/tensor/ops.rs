//! Differentiable tensor operations and their reverse-mode rules.
//!
//! Forward functions validate shapes, compute the result, and record the op
//! on the output node when a gradient will be needed. `backward_op` holds the
//! matching vector-Jacobian products. All loops are deterministic; identical
//! inputs give bit-identical outputs.

use super::{OpKind, TapeOp, Tensor};
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, OpKind::Add, vec![a.clone(), b.clone()]))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, OpKind::Sub, vec![a.clone(), b.clone()]))
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, OpKind::Mul, vec![a.clone(), b.clone()]))
}

pub fn scale(a: &Tensor, c: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x * c).collect();
    Tensor::from_op(a.shape().to_vec(), data, OpKind::Scale(c), vec![a.clone()])
}

pub fn add_scalar(a: &Tensor, c: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x + c).collect();
    Tensor::from_op(a.shape().to_vec(), data, OpKind::AddScalar, vec![a.clone()])
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{what}: expected 2-D tensor, got {s:?}"))),
    }
}

/// Raw row-major matrix product used by forward and backward paths.
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = dims2(a, "matmul lhs")?;
    let (kb, n) = dims2(b, "matmul rhs")?;
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul: inner dimensions {ka} and {kb} differ"
        )));
    }
    let data = matmul_raw(&a.data(), &b.data(), m, ka, n);
    Ok(Tensor::from_op(vec![m, n], data, OpKind::Matmul, vec![a.clone(), b.clone()]))
}

pub(crate) fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2(a, "transpose")?;
    let data = transpose_raw(&a.data(), r, c);
    Ok(Tensor::from_op(vec![c, r], data, OpKind::Transpose, vec![a.clone()]))
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() {
        return Err(Error::Dimension(format!(
            "reshape: cannot view {:?} as {:?}",
            a.shape(),
            shape
        )));
    }
    Ok(Tensor::from_op(shape.to_vec(), a.to_vec(), OpKind::Reshape, vec![a.clone()]))
}

/// Stack two 2-D tensors with equal column counts along the row axis.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = dims2(a, "concat_rows lhs")?;
    let (rb, cb) = dims2(b, "concat_rows rhs")?;
    if ca != cb {
        return Err(Error::Dimension(format!(
            "concat_rows: column counts {ca} and {cb} differ"
        )));
    }
    let mut data = a.to_vec();
    data.extend_from_slice(&b.data());
    Ok(Tensor::from_op(
        vec![ra + rb, ca],
        data,
        OpKind::ConcatRows { first_rows: ra },
        vec![a.clone(), b.clone()],
    ))
}

pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = dims2(a, "slice_rows")?;
    if start + len > r {
        return Err(Error::Dimension(format!(
            "slice_rows: rows {start}..{} out of bounds for {r} rows",
            start + len
        )));
    }
    let data = a.data()[start * c..(start + len) * c].to_vec();
    Ok(Tensor::from_op(vec![len, c], data, OpKind::SliceRows { start }, vec![a.clone()]))
}

/// `[n,d] + [d]`, the row vector added to every row.
pub fn add_row_broadcast(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (n, d) = dims2(a, "add_row_broadcast")?;
    if row.shape() != [d] {
        return Err(Error::Dimension(format!(
            "add_row_broadcast: row shape {:?} does not match {d} columns",
            row.shape()
        )));
    }
    let rv = row.data();
    let mut data = a.to_vec();
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] += rv[j];
        }
    }
    Ok(Tensor::from_op(
        vec![n, d],
        data,
        OpKind::AddRowBroadcast,
        vec![a.clone(), row.clone()],
    ))
}

/// `[n,d] * [d]`, the row vector scaling every row elementwise.
pub fn mul_row_broadcast(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (n, d) = dims2(a, "mul_row_broadcast")?;
    if row.shape() != [d] {
        return Err(Error::Dimension(format!(
            "mul_row_broadcast: row shape {:?} does not match {d} columns",
            row.shape()
        )));
    }
    let rv = row.data();
    let mut data = a.to_vec();
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] *= rv[j];
        }
    }
    Ok(Tensor::from_op(
        vec![n, d],
        data,
        OpKind::MulRowBroadcast,
        vec![a.clone(), row.clone()],
    ))
}

/// `[c,h,w] + [c]`, one bias per channel.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("add_channel_bias: expected 3-D input, got {s:?}"))),
    };
    if bias.shape() != [c] {
        return Err(Error::Dimension(format!(
            "add_channel_bias: bias shape {:?} does not match {c} channels",
            bias.shape()
        )));
    }
    let bv = bias.data();
    let mut data = x.to_vec();
    for ch in 0..c {
        let b = bv[ch];
        for v in &mut data[ch * h * w..(ch + 1) * h * w] {
            *v += b;
        }
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        OpKind::AddChannelBias,
        vec![x.clone(), bias.clone()],
    ))
}

pub fn relu(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Tensor::from_op(a.shape().to_vec(), data, OpKind::Relu, vec![a.clone()])
}

fn sigmoid_f(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| x * sigmoid_f(x)).collect();
    Tensor::from_op(a.shape().to_vec(), data, OpKind::Silu, vec![a.clone()])
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| sigmoid_f(x)).collect();
    Tensor::from_op(a.shape().to_vec(), data, OpKind::Sigmoid, vec![a.clone()])
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (n, d) = dims2(a, "softmax_rows")?;
    let src = a.data();
    let mut data = vec![0.0f32; n * d];
    for i in 0..n {
        let row = &src[i * d..(i + 1) * d];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for j in 0..d {
            let e = (row[j] - mx).exp();
            data[i * d + j] = e;
            sum += e;
        }
        for j in 0..d {
            data[i * d + j] /= sum;
        }
    }
    Ok(Tensor::from_op(vec![n, d], data, OpKind::SoftmaxRows, vec![a.clone()]))
}

/// Per-row layer normalization with learned scale and shift.
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (n, d) = dims2(x, "layer_norm_rows")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Dimension(format!(
            "layer_norm_rows: gamma/beta shapes {:?}/{:?} do not match {d} columns",
            gamma.shape(),
            beta.shape()
        )));
    }
    let src = x.data();
    let g = gamma.data();
    let b = beta.data();
    let mut data = vec![0.0f32; n * d];
    for i in 0..n {
        let row = &src[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            data[i * d + j] = g[j] * (row[j] - mean) * inv + b[j];
        }
    }
    Ok(Tensor::from_op(
        vec![n, d],
        data,
        OpKind::LayerNormRows { eps },
        vec![x.clone(), gamma.clone(), beta.clone()],
    ))
}

pub(crate) fn conv2d_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Dimension("conv2d: stride must be positive".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// Cross-correlation of `[c,h,w]` input with `[f,c,kh,kw]` kernels,
/// zero-padded by `pad` on every side.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("conv2d: expected 3-D input, got {s:?}"))),
    };
    let (f, kc, kh, kw) = match k.shape() {
        [f, kc, kh, kw] => (*f, *kc, *kh, *kw),
        s => return Err(Error::Dimension(format!("conv2d: expected 4-D kernel, got {s:?}"))),
    };
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d: kernel expects {kc} channels, input has {c}"
        )));
    }
    let (oh, ow) = conv2d_out_dims(h, w, kh, kw, stride, pad)?;
    let xv = x.data();
    let kv = k.data();
    let mut out = vec![0.0f32; f * oh * ow];
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xv[ci * h * w + iy as usize * w + ix as usize]
                                * kv[fi * c * kh * kw + ci * kh * kw + ky * kw + kx];
                        }
                    }
                }
                out[fi * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![f, oh, ow],
        out,
        OpKind::Conv2d { stride, pad },
        vec![x.clone(), k.clone()],
    ))
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("avg_pool2: expected 3-D input, got {s:?}"))),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "avg_pool2: spatial dims {h}x{w} must be even"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xv = x.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ci * h * w + (oy * 2) * w + ox * 2;
                out[ci * oh * ow + oy * ow + ox] =
                    0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
            }
        }
    }
    Ok(Tensor::from_op(vec![c, oh, ow], out, OpKind::AvgPool2, vec![x.clone()]))
}

pub fn sum(a: &Tensor) -> Tensor {
    let s: f32 = a.data().iter().sum();
    Tensor::from_op(vec![1], vec![s], OpKind::Sum, vec![a.clone()])
}

pub fn mean(a: &Tensor) -> Tensor {
    let s: f32 = a.data().iter().sum();
    let m = s / a.numel() as f32;
    Tensor::from_op(vec![1], vec![m], OpKind::Mean, vec![a.clone()])
}

/// Mean squared error between two same-shape tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = sub(a, b)?;
    let sq = mul(&d, &d)?;
    Ok(mean(&sq))
}

/// Weighted sum of per-element binary cross-entropies on logits.
/// Numerically stable form: `max(x,0) - x*t + ln(1+e^{-|x|})`.
pub fn bce_with_logits_sum(logits: &Tensor, targets: &[f32], weights: &[f32]) -> Result<Tensor> {
    let n = logits.numel();
    if targets.len() != n || weights.len() != n {
        return Err(Error::Dimension(format!(
            "bce_with_logits_sum: logits {n}, targets {}, weights {}",
            targets.len(),
            weights.len()
        )));
    }
    let lv = logits.data();
    let mut total = 0.0f32;
    for i in 0..n {
        let x = lv[i];
        let t = targets[i];
        let loss = x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
        total += weights[i] * loss;
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![total],
        OpKind::BceWithLogitsSum { targets: targets.to_vec(), weights: weights.to_vec() },
        vec![logits.clone()],
    ))
}

/// Weighted sum of per-row softmax cross-entropies; `logits` is `[n,k]`.
pub fn softmax_cross_entropy_sum(
    logits: &Tensor,
    targets: &[usize],
    weights: &[f32],
) -> Result<Tensor> {
    let (n, k) = dims2(logits, "softmax_cross_entropy_sum")?;
    if targets.len() != n || weights.len() != n {
        return Err(Error::Dimension(format!(
            "softmax_cross_entropy_sum: rows {n}, targets {}, weights {}",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Contract(format!(
            "softmax_cross_entropy_sum: target class {t} out of range for {k} classes"
        )));
    }
    let lv = logits.data();
    let mut total = 0.0f32;
    for i in 0..n {
        let row = &lv[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f32>().ln() + mx;
        total += weights[i] * (lse - row[targets[i]]);
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![total],
        OpKind::SoftmaxCrossEntropySum {
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            classes: k,
        },
        vec![logits.clone()],
    ))
}

/// Reassemble `[hp*wp, patch*patch*channels]` token grid into a `[c,h,w]`
/// image; pure permutation, the inverse of patch extraction.
pub fn unpatchify(tokens: &Tensor, channels: usize, patch: usize, hp: usize, wp: usize) -> Result<Tensor> {
    let (n, d) = dims2(tokens, "unpatchify")?;
    if n != hp * wp || d != patch * patch * channels {
        return Err(Error::Dimension(format!(
            "unpatchify: tokens {:?} do not match {}x{} patches of {}x{}x{}",
            tokens.shape(),
            hp,
            wp,
            channels,
            patch,
            patch
        )));
    }
    let (h, w) = (hp * patch, wp * patch);
    let tv = tokens.data();
    let mut out = vec![0.0f32; channels * h * w];
    for py in 0..hp {
        for px in 0..wp {
            let tok = &tv[(py * wp + px) * d..(py * wp + px + 1) * d];
            for c in 0..channels {
                for iy in 0..patch {
                    for ix in 0..patch {
                        out[c * h * w + (py * patch + iy) * w + (px * patch + ix)] =
                            tok[c * patch * patch + iy * patch + ix];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![channels, h, w],
        out,
        OpKind::Unpatchify { channels, patch, hp, wp },
        vec![tokens.clone()],
    ))
}

/// Vector-Jacobian products, dispatched from the backward sweep.
pub(crate) fn backward_op(node: &Tensor, op: &TapeOp, g: &[f32]) {
    match &op.kind {
        OpKind::Add => {
            propagate(&op.parents[0], g);
            propagate(&op.parents[1], g);
        }
        OpKind::Sub => {
            propagate(&op.parents[0], g);
            let neg: Vec<f32> = g.iter().map(|v| -v).collect();
            propagate(&op.parents[1], &neg);
        }
        OpKind::Mul => {
            let a = &op.parents[0];
            let b = &op.parents[1];
            if a.needs_grad() {
                let da: Vec<f32> = g.iter().zip(b.data().iter()).map(|(gv, bv)| gv * bv).collect();
                a.accumulate_grad(&da);
            }
            if b.needs_grad() {
                let db: Vec<f32> = g.iter().zip(a.data().iter()).map(|(gv, av)| gv * av).collect();
                b.accumulate_grad(&db);
            }
        }
        OpKind::Scale(c) => {
            let da: Vec<f32> = g.iter().map(|v| v * c).collect();
            propagate(&op.parents[0], &da);
        }
        OpKind::AddScalar => propagate(&op.parents[0], g),
        OpKind::Matmul => {
            let a = &op.parents[0];
            let b = &op.parents[1];
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.needs_grad() {
                // dA = G * B^T
                let bt = transpose_raw(&b.data(), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                a.accumulate_grad(&da);
            }
            if b.needs_grad() {
                // dB = A^T * G
                let at = transpose_raw(&a.data(), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                b.accumulate_grad(&db);
            }
        }
        OpKind::Transpose => {
            let p = &op.parents[0];
            let (r, c) = (p.shape()[0], p.shape()[1]);
            // node is [c, r]; transpose grad back to [r, c]
            let dg = transpose_raw(g, c, r);
            propagate(p, &dg);
        }
        OpKind::Reshape => propagate(&op.parents[0], g),
        OpKind::ConcatRows { first_rows } => {
            let a = &op.parents[0];
            let b = &op.parents[1];
            let cols = node.shape()[1];
            let split = first_rows * cols;
            if a.needs_grad() {
                a.accumulate_grad(&g[..split]);
            }
            if b.needs_grad() {
                b.accumulate_grad(&g[split..]);
            }
        }
        OpKind::SliceRows { start } => {
            let p = &op.parents[0];
            if p.needs_grad() {
                let (rows, cols) = (p.shape()[0], p.shape()[1]);
                let mut dp = vec![0.0f32; rows * cols];
                dp[start * cols..start * cols + g.len()].copy_from_slice(g);
                p.accumulate_grad(&dp);
            }
        }
        OpKind::AddRowBroadcast => {
            let a = &op.parents[0];
            let row = &op.parents[1];
            propagate(a, g);
            if row.needs_grad() {
                let d = row.numel();
                let n = a.shape()[0];
                let mut dr = vec![0.0f32; d];
                for i in 0..n {
                    for j in 0..d {
                        dr[j] += g[i * d + j];
                    }
                }
                row.accumulate_grad(&dr);
            }
        }
        OpKind::MulRowBroadcast => {
            let a = &op.parents[0];
            let row = &op.parents[1];
            let d = row.numel();
            let n = a.shape()[0];
            if a.needs_grad() {
                let rv = row.data();
                let mut da = vec![0.0f32; n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = g[i * d + j] * rv[j];
                    }
                }
                a.accumulate_grad(&da);
            }
            if row.needs_grad() {
                let av = a.data();
                let mut dr = vec![0.0f32; d];
                for i in 0..n {
                    for j in 0..d {
                        dr[j] += g[i * d + j] * av[i * d + j];
                    }
                }
                row.accumulate_grad(&dr);
            }
        }
        OpKind::AddChannelBias => {
            let x = &op.parents[0];
            let bias = &op.parents[1];
            propagate(x, g);
            if bias.needs_grad() {
                let c = bias.numel();
                let hw = x.numel() / c;
                let mut db = vec![0.0f32; c];
                for ch in 0..c {
                    db[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
                }
                bias.accumulate_grad(&db);
            }
        }
        OpKind::Relu => {
            let p = &op.parents[0];
            if p.needs_grad() {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(p.data().iter())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                p.accumulate_grad(&dx);
            }
        }
        OpKind::Silu => {
            let p = &op.parents[0];
            if p.needs_grad() {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(p.data().iter())
                    .map(|(gv, &x)| {
                        let s = sigmoid_f(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .collect();
                p.accumulate_grad(&dx);
            }
        }
        OpKind::Sigmoid => {
            let p = &op.parents[0];
            if p.needs_grad() {
                let y = node.data();
                let dx: Vec<f32> = g.iter().zip(y.iter()).map(|(gv, &yv)| gv * yv * (1.0 - yv)).collect();
                p.accumulate_grad(&dx);
            }
        }
        OpKind::SoftmaxRows => {
            let p = &op.parents[0];
            if p.needs_grad() {
                let y = node.data();
                let (n, d) = (node.shape()[0], node.shape()[1]);
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f32 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                p.accumulate_grad(&dx);
            }
        }
        OpKind::LayerNormRows { eps } => {
            let x = &op.parents[0];
            let gamma = &op.parents[1];
            let beta = &op.parents[2];
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let xv = x.data();
            let gv = gamma.data();
            let mut dx = vec![0.0f32; n * d];
            let mut dgamma = vec![0.0f32; d];
            let mut dbeta = vec![0.0f32; d];
            for i in 0..n {
                let row = &xv[i * d..(i + 1) * d];
                let gr = &g[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f32> = row.iter().map(|v| (v - mean) * inv).collect();
                let gg: Vec<f32> = gr.iter().zip(gv.iter()).map(|(a, b)| a * b).collect();
                let mean_gg = gg.iter().sum::<f32>() / d as f32;
                let mean_gg_xhat =
                    gg.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                for j in 0..d {
                    dx[i * d + j] = inv * (gg[j] - mean_gg - xhat[j] * mean_gg_xhat);
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                }
            }
            if x.needs_grad() {
                x.accumulate_grad(&dx);
            }
            if gamma.needs_grad() {
                gamma.accumulate_grad(&dgamma);
            }
            if beta.needs_grad() {
                beta.accumulate_grad(&dbeta);
            }
        }
        OpKind::Conv2d { stride, pad } => {
            let x = &op.parents[0];
            let k = &op.parents[1];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
            let (oh, ow) = (node.shape()[1], node.shape()[2]);
            let xv = x.data();
            let kv = k.data();
            let mut dx = vec![0.0f32; c * h * w];
            let mut dk = vec![0.0f32; f * c * kh * kw];
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[fi * oh * ow + oy * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ci * h * w + iy as usize * w + ix as usize;
                                    let ki = fi * c * kh * kw + ci * kh * kw + ky * kw + kx;
                                    dx[xi] += gv * kv[ki];
                                    dk[ki] += gv * xv[xi];
                                }
                            }
                        }
                    }
                }
            }
            if x.needs_grad() {
                x.accumulate_grad(&dx);
            }
            if k.needs_grad() {
                k.accumulate_grad(&dk);
            }
        }
        OpKind::AvgPool2 => {
            let x = &op.parents[0];
            if x.needs_grad() {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = 0.25 * g[ci * oh * ow + oy * ow + ox];
                            let base = ci * h * w + (oy * 2) * w + ox * 2;
                            dx[base] += gv;
                            dx[base + 1] += gv;
                            dx[base + w] += gv;
                            dx[base + w + 1] += gv;
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        OpKind::Sum => {
            let p = &op.parents[0];
            if p.needs_grad() {
                p.accumulate_grad(&vec![g[0]; p.numel()]);
            }
        }
        OpKind::Mean => {
            let p = &op.parents[0];
            if p.needs_grad() {
                let gv = g[0] / p.numel() as f32;
                p.accumulate_grad(&vec![gv; p.numel()]);
            }
        }
        OpKind::BceWithLogitsSum { targets, weights } => {
            let p = &op.parents[0];
            if p.needs_grad() {
                let dx: Vec<f32> = p
                    .data()
                    .iter()
                    .zip(targets.iter().zip(weights.iter()))
                    .map(|(&x, (&t, &w))| g[0] * w * (sigmoid_f(x) - t))
                    .collect();
                p.accumulate_grad(&dx);
            }
        }
        OpKind::SoftmaxCrossEntropySum { targets, weights, classes } => {
            let p = &op.parents[0];
            if p.needs_grad() {
                let k = *classes;
                let lv = p.data();
                let n = targets.len();
                let mut dx = vec![0.0f32; n * k];
                for i in 0..n {
                    let row = &lv[i * k..(i + 1) * k];
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let exps: Vec<f32> = row.iter().map(|v| (v - mx).exp()).collect();
                    let denom: f32 = exps.iter().sum();
                    for j in 0..k {
                        let soft = exps[j] / denom;
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dx[i * k + j] = g[0] * weights[i] * (soft - onehot);
                    }
                }
                p.accumulate_grad(&dx);
            }
        }
        OpKind::Unpatchify { channels, patch, hp, wp } => {
            let p = &op.parents[0];
            if p.needs_grad() {
                let d = patch * patch * channels;
                let (h, w) = (hp * patch, wp * patch);
                let mut dp = vec![0.0f32; hp * wp * d];
                for py in 0..*hp {
                    for px in 0..*wp {
                        let tok = &mut dp[(py * wp + px) * d..(py * wp + px + 1) * d];
                        for c in 0..*channels {
                            for iy in 0..*patch {
                                for ix in 0..*patch {
                                    tok[c * patch * patch + iy * patch + ix] =
                                        g[c * h * w + (py * patch + iy) * w + (px * patch + ix)];
                                }
                            }
                        }
                    }
                }
                p.accumulate_grad(&dp);
            }
        }
    }
}

fn propagate(parent: &Tensor, grad: &[f32]) {
    if parent.needs_grad() {
        parent.accumulate_grad(grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t2(rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i2, &b).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero() {
        let i2 = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(matmul(&i2, &z).unwrap().to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn matmul_dot_product() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(3, 1, &[1.0, 2.0, 3.0]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w_data: Vec<f32> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v_data: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = Tensor::from_vec(&[3, 1], v_data.clone()).unwrap();

        let loss_of = |wd: &[f32]| -> f32 {
            let w = Tensor::from_vec(&[3, 3], wd.to_vec()).unwrap();
            sum(&matmul(&w, &v).unwrap()).item()
        };

        let w = Tensor::from_vec(&[3, 3], w_data.clone()).unwrap();
        w.set_requires_grad(true);
        let loss = sum(&matmul(&w, &v).unwrap());
        backward(&loss).unwrap();
        let grad = w.grad().unwrap();

        let h = 1e-3f32;
        for i in 0..9 {
            let mut plus = w_data.clone();
            plus[i] += h;
            let mut minus = w_data.clone();
            minus[i] -= h;
            let fd = (loss_of(&plus) as f64 - loss_of(&minus) as f64) / (2.0 * h as f64);
            let rel = ((grad[i] as f64 - fd).abs()) / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "element {i}: autodiff {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_zero_kernel() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::zeros(&[2, 1, 2, 2]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_windowed_sums() {
        // 3x3 input, 2x2 ones kernel, stride 1, pad 0 -> sliding-window sums
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        // windows: 1+2+4+5, 2+3+5+6, 4+5+7+8, 5+6+8+9
        assert_eq!(y.to_vec(), vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_invalid_stride() {
        let x = Tensor::zeros(&[1, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &k, 0, 0).is_err());
    }

    /// f64 reference conv for a noise-free finite-difference oracle.
    fn conv_sum_f64(xd: &[f64], kd: &[f64], c: usize, h: usize, w: usize, f: usize, kh: usize, kw: usize, pad: usize) -> f64 {
        let mut total = 0.0f64;
        let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                total += xd[ci * h * w + iy as usize * w + ix as usize]
                                    * kd[fi * c * kh * kw + ci * kh * kw + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
        total
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x_data: Vec<f32> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k_data: Vec<f32> = (0..3 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xd: Vec<f64> = x_data.iter().map(|&v| v as f64).collect();
        let kd: Vec<f64> = k_data.iter().map(|&v| v as f64).collect();

        let x = Tensor::from_vec(&[2, 4, 4], x_data.clone()).unwrap();
        let k = Tensor::from_vec(&[3, 2, 3, 3], k_data.clone()).unwrap();
        x.set_requires_grad(true);
        k.set_requires_grad(true);
        let loss = sum(&conv2d(&x, &k, 1, 1).unwrap());
        backward(&loss).unwrap();
        let gx = x.grad().unwrap();
        let gk = k.grad().unwrap();

        let h = 1e-3f64;
        let loss64 = |xd: &[f64], kd: &[f64]| conv_sum_f64(xd, kd, 2, 4, 4, 3, 3, 3, 1);
        for i in 0..xd.len() {
            let mut plus = xd.clone();
            plus[i] += h;
            let mut minus = xd.clone();
            minus[i] -= h;
            let fd = (loss64(&plus, &kd) - loss64(&minus, &kd)) / (2.0 * h);
            let err = (gx[i] as f64 - fd).abs() / fd.abs().max(1e-3);
            assert!(err < 1e-3, "dx[{i}]: {} vs {fd}", gx[i]);
        }
        for i in 0..kd.len() {
            let mut plus = kd.clone();
            plus[i] += h;
            let mut minus = kd.clone();
            minus[i] -= h;
            let fd = (loss64(&xd, &plus) - loss64(&xd, &minus)) / (2.0 * h);
            let err = (gk[i] as f64 - fd).abs() / fd.abs().max(1e-3);
            assert!(err < 1e-3, "dk[{i}]: {} vs {fd}", gk[i]);
        }
    }

    #[test]
    fn softmax_rows_sums_to_one() {
        let a = t2(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let s = softmax_rows(&a).unwrap();
        let v = s.to_vec();
        let r0: f32 = v[..3].iter().sum();
        let r1: f32 = v[3..].iter().sum();
        assert!((r0 - 1.0).abs() < 1e-6 && (r1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = t2(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let y = layer_norm_rows(&x, &gamma, &beta, 1e-5).unwrap();
        let v = y.to_vec();
        let mean: f32 = v.iter().sum::<f32>() / 4.0;
        let var: f32 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn unpatchify_roundtrip_permutation() {
        // 2x2 grid of 2x2 patches, 1 channel: tokens laid out patch-major.
        let tokens = t2(4, 4, &(0..16).map(|v| v as f32).collect::<Vec<_>>());
        let img = unpatchify(&tokens, 1, 2, 2, 2).unwrap();
        assert_eq!(img.shape(), &[1, 4, 4]);
        // first patch occupies the top-left 2x2 block
        let v = img.to_vec();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[4], 2.0);
        assert_eq!(v[5], 3.0);
        // second token goes top-right
        assert_eq!(v[2], 4.0);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let before_a = a.to_vec();
        let before_b = b.to_vec();
        let _ = add(&a, &b).unwrap();
        let _ = matmul(&a, &b).unwrap();
        let _ = relu(&a);
        assert_eq!(a.to_vec(), before_a);
        assert_eq!(b.to_vec(), before_b);
    }
}
