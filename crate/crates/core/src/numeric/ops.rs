//! Forward and backward kernels for the layer primitives.
//!
//! Each primitive has a value-level forward function returning a fresh
//! [`Tensor`] and a matching `*_backward` that maps an upstream gradient to
//! gradients of its inputs. The [`Tape`](super::Tape) records calls to these
//! and chains the backward kernels in reverse order.

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(axis: &str, input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::dim(
            axis,
            format!("kernel extent {kernel} exceeds padded input extent {padded}"),
        ));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::dim(
            axis,
            format!(
                "(input {input} + 2*padding {padding} - kernel {kernel}) is not divisible by stride {stride}"
            ),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn infer(input: &[usize], kernels: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("stride", "stride must be positive"));
        }
        if input.len() != 3 {
            return Err(Error::dim("input", format!("expected [C,H,W], got {input:?}")));
        }
        if kernels.len() != 4 {
            return Err(Error::dim(
                "kernels",
                format!("expected [C_out,C_in,kH,kW], got {kernels:?}"),
            ));
        }
        if kernels[1] != input[0] {
            return Err(Error::dim(
                "channels",
                format!("kernel expects {} input channels, input has {}", kernels[1], input[0]),
            ));
        }
        if bias != [kernels[0]] {
            return Err(Error::dim(
                "bias",
                format!("expected [{}], got {bias:?}", kernels[0]),
            ));
        }
        let out_h = out_extent("height", input[1], kernels[2], stride, padding)?;
        let out_w = out_extent("width", input[2], kernels[3], stride, padding)?;
        Ok(Self {
            in_channels: input[0],
            out_channels: kernels[0],
            in_h: input[1],
            in_w: input[2],
            k_h: kernels[2],
            k_w: kernels[3],
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    /// Output indices `o` in `[lo, hi)` whose source index `o*stride + k - padding` lies in `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (len as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, out_len as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::infer(input.shape(), kernels.shape(), bias.shape(), stride, padding)?;
    let mut out = vec![0.0; g.out_channels * g.out_h * g.out_w];
    let x = input.data();
    let w = kernels.data();
    let plane = g.out_h * g.out_w;
    for co in 0..g.out_channels {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias.data()[co]);
        for ci in 0..g.in_channels {
            let xin = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..g.k_h {
                let (oy0, oy1) = g.valid(ky, g.in_h, g.out_h);
                for kx in 0..g.k_w {
                    let wv = w[((co * g.in_channels + ci) * g.k_h + ky) * g.k_w + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid(kx, g.in_w, g.out_w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                        let irow = &xin[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            for (ov, iv) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to (input, kernels, bias).
///
/// The input gradient is skipped (returned as `None`) when `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let bias_shape = [kernels.shape()[0]];
    let g = ConvGeometry::infer(input.shape(), kernels.shape(), &bias_shape, stride, padding)?;
    let x = input.data();
    let w = kernels.data();
    let go = grad_out.data();
    let plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut dx = if need_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_channels];
    for co in 0..g.out_channels {
        let gplane = &go[co * plane..(co + 1) * plane];
        db[co] = gplane.iter().sum();
        for ci in 0..g.in_channels {
            let xin = &x[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..g.k_h {
                let (oy0, oy1) = g.valid(ky, g.in_h, g.out_h);
                for kx in 0..g.k_w {
                    let widx = ((co * g.in_channels + ci) * g.k_h + ky) * g.k_w + kx;
                    let wv = w[widx];
                    let (ox0, ox1) = g.valid(kx, g.in_w, g.out_w);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &gplane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            let n = ox1 - ox0;
                            let irow = &xin[iy * g.in_w + ix0..iy * g.in_w + ix0 + n];
                            acc += grow[ox0..ox1].iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                            if need_input {
                                let drow = &mut dx[ci * in_plane + iy * g.in_w + ix0..ci * in_plane + iy * g.in_w + ix0 + n];
                                for (d, gv) in drow.iter_mut().zip(&grow[ox0..ox1]) {
                                    *d += wv * gv;
                                }
                            }
                        } else {
                            for (ox, gv) in grow.iter().enumerate().take(ox1).skip(ox0) {
                                let ix = ox * g.stride + kx - g.padding;
                                acc += gv * xin[iy * g.in_w + ix];
                                if need_input {
                                    dx[ci * in_plane + iy * g.in_w + ix] += wv * gv;
                                }
                            }
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    let dx = if need_input {
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(kernels.shape(), dw)?,
        Tensor::new(&bias_shape, db)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(input.shape(), data).expect("shape preserved")
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data).expect("shape preserved")
}

/// Non-overlapping `size`×`size` average pooling over a `[C,H,W]` tensor.
pub fn avg_pool(input: &Tensor, size: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::dim("input", format!("expected [C,H,W], got {s:?}")));
    }
    if size == 0 {
        return Err(Error::dim("pool size", "must be positive"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % size != 0 {
        return Err(Error::dim("height", format!("{h} not divisible by pool size {size}")));
    }
    if w % size != 0 {
        return Err(Error::dim("width", format!("{w} not divisible by pool size {size}")));
    }
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            let orow = &mut out[(ch * oh + y / size) * ow..(ch * oh + y / size + 1) * ow];
            let irow = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (xi, v) in irow.iter().enumerate() {
                orow[xi / size] += v * inv;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn avg_pool_backward(input_shape: &[usize], size: usize, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    let g = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let grow = &g[(ch * oh + y / size) * ow..(ch * oh + y / size + 1) * ow];
            for xi in 0..w {
                dx[(ch * h + y) * w + xi] = grow[xi / size] * inv;
            }
        }
    }
    Tensor::new(input_shape, dx).expect("shape preserved")
}

/// `[C,H,W]` → `[C]` spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::dim("input", format!("expected [C,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(&[s[0]], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let plane = input_shape[1] * input_shape[2];
    let inv = 1.0 / plane as f64;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
        .collect();
    Tensor::new(input_shape, data).expect("shape preserved")
}

/// `y = W x + b` with `W: [out, in]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ws = weight.shape();
    if ws.len() != 2 {
        return Err(Error::dim("weight", format!("expected [out,in], got {ws:?}")));
    }
    if input.len() != ws[1] {
        return Err(Error::dim(
            "input",
            format!("weight expects {} inputs, got {}", ws[1], input.len()),
        ));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::dim("bias", format!("expected [{}], got {:?}", ws[0], bias.shape())));
    }
    let x = input.data();
    let data = weight
        .data()
        .chunks_exact(ws[1])
        .zip(bias.data())
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    Tensor::new(&[ws[0]], data)
}

/// Returns (d input, d weight, d bias).
pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n_in = input.len();
    let g = grad_out.data();
    let x = input.data();
    let mut dx = vec![0.0; n_in];
    let mut dw = vec![0.0; weight.len()];
    for (o, row) in weight.data().chunks_exact(n_in).enumerate() {
        let go = g[o];
        for (d, w) in dx.iter_mut().zip(row) {
            *d += go * w;
        }
        for (d, v) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *d = go * v;
        }
    }
    (
        Tensor::new(input.shape(), dx).expect("shape preserved"),
        Tensor::new(weight.shape(), dw).expect("shape preserved"),
        Tensor::new(&[g.len()], g.to_vec()).expect("shape preserved"),
    )
}

/// Numerically stable softmax of a score vector.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::dim("scores", "softmax of an empty score vector"));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn softmax_backward(probs: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_out).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_out).map(|(p, g)| p * (g - dot)).collect()
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(scores)[target]`.
pub fn cross_entropy(scores: &[f64], target: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::dim("scores", "cross-entropy of an empty score vector"));
    }
    if target >= scores.len() {
        return Err(Error::contract(format!(
            "target class {target} out of range for {} scores",
            scores.len()
        )));
    }
    Ok(log_sum_exp(scores) - scores[target])
}

pub fn cross_entropy_backward(scores: &[f64], target: usize, grad_out: f64) -> Vec<f64> {
    let mut p = softmax(scores).expect("nonempty");
    p[target] -= 1.0;
    p.iter_mut().for_each(|v| *v *= grad_out);
    p
}

/// Per-axis bilinear sampling taps with corner-aligned coordinates.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Corner-aligned bilinear resize of an `[h,w]` grid to `[out_h,out_w]`.
pub fn upsample_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 2 {
        return Err(Error::dim("input", format!("expected [H,W], got {s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("output", "extents must be positive"));
    }
    let (h, w) = (s[0], s[1]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
            let bot = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new(&[out_h, out_w], out)
}

pub fn upsample_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[0], input_shape[1]);
    let (out_h, out_w) = (grad_out.shape()[0], grad_out.shape()[1]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let g = grad_out.data();
    let mut dx = vec![0.0; h * w];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let gv = g[oy * out_w + ox];
            dx[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
            dx[y0 * w + x1] += gv * (1.0 - fy) * fx;
            dx[y1 * w + x0] += gv * fy * (1.0 - fx);
            dx[y1 * w + x1] += gv * fy * fx;
        }
    }
    Tensor::new(input_shape, dx).expect("shape preserved")
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Soft Dice overlap `2Σ(a·b) / (Σa + Σb)`, 1 when both sums are zero.
pub fn soft_dice(a: &[f64], b: &[f64]) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let den: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
    if den == 0.0 {
        1.0
    } else {
        2.0 * inter / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(&[1, 3, 4], (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &k, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let x = Tensor::new(&[2, 5, 5], (0..50).map(|v| (v as f64).sin()).collect()).unwrap();
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[3, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_hand_computed() {
        let x = Tensor::filled(&[1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_padding_and_stride_match_naive() {
        let x = Tensor::new(&[2, 7, 7], (0..98).map(|v| ((v * 37 % 11) as f64) - 5.0).collect()).unwrap();
        let k = Tensor::new(&[3, 2, 3, 3], (0..54).map(|v| ((v * 13 % 7) as f64) * 0.25 - 0.5).collect()).unwrap();
        let b = Tensor::vector(vec![0.1, -0.2, 0.3]);
        for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)] {
            let y = match conv2d(&x, &k, &b, stride, pad) {
                Ok(y) => y,
                Err(_) => continue,
            };
            let (oh, ow) = (y.shape()[1], y.shape()[2]);
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if (0..7).contains(&iy) && (0..7).contains(&ix) {
                                        acc += k.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                            * x.data()[(ci * 7 + iy as usize) * 7 + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((y.data()[(co * oh + oy) * ow + ox] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let k = Tensor::zeros(&[1, 2, 3, 2]);
        let err = conv2d(&Tensor::zeros(&[2, 4, 5]), &k, &Tensor::zeros(&[1]), 2, 0).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn relu_values() {
        let y = relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::vector(vec![-3.0, -0.5, -1e-9]);
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&x, &Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1.0, 2.0]).unwrap();
        assert!((p[0] - 0.26894).abs() < 1e-5);
        assert!((p[1] - 0.73106).abs() < 1e-5);
        let p = softmax(&[1000.0, -1000.0, 999.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_of_certain_prediction_is_zero() {
        let ce = cross_entropy(&[0.0, -1e6, -1e6], 0).unwrap();
        assert!(ce.abs() < 1e-12);
        assert!(cross_entropy(&[], 0).is_err());
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn bilinear_is_corner_aligned() {
        let x = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = upsample_bilinear(&x, 3, 3).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn pooling_shapes() {
        let x = Tensor::new(&[1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0]);
        assert!(avg_pool(&Tensor::zeros(&[1, 3, 4]), 2).is_err());
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
    }
}
