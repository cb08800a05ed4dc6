//! Forward and backward kernels, generic over the float type.

use num_traits::Float;

use super::Op;
use crate::error::{Error, Result};

pub(crate) type View<'a, T> = (&'a [T], &'a [usize]);

/// Auxiliary values a kernel keeps for its backward pass.
#[derive(Clone, Debug, Default)]
pub(crate) enum Saved<T> {
    #[default]
    None,
    Argmax(Vec<usize>),
    Norm { xhat: Vec<T>, inv_std: Vec<T> },
}

pub(crate) struct Output<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    pub saved: Saved<T>,
}

const CE_EPS: f64 = 1e-7;
const DICE_SMOOTH: f64 = 1.0;

#[inline]
fn k<T: Float>(v: f64) -> T {
    T::from(v).expect("constant representable")
}

fn arity<T>(op: &Op, inputs: &[View<T>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(
            op.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn rank4(op: &Op, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op.name(), format!("expected a rank-4 tensor, got {shape:?}"))),
    }
}

/// Splits a shape of rank >= 2 into `(batch, channels, inner)`.
fn channel_split(op: &Op, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op.name(), format!("expected rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn same_shape<T>(op: &Op, a: &View<T>, b: &View<T>) -> Result<()> {
    if a.1 != b.1 {
        return Err(Error::shape(op.name(), format!("{:?} vs {:?}", a.1, b.1)));
    }
    Ok(())
}

fn out<T>(data: Vec<T>, shape: Vec<usize>) -> Output<T> {
    Output {
        data,
        shape,
        saved: Saved::None,
    }
}

pub(crate) fn forward<T: Float>(op: &Op, inputs: &[View<T>]) -> Result<Output<T>> {
    match op {
        Op::Conv2d { padding } => {
            arity(op, inputs, 3)?;
            conv2d_forward(op, inputs, *padding)
        }
        Op::Conv2d1x1 => {
            arity(op, inputs, 3)?;
            let ws = rank4(op, inputs[1].1)?;
            if ws[2] != 1 || ws[3] != 1 {
                return Err(Error::shape(op.name(), format!("kernel {ws:?} is not 1x1")));
            }
            conv2d_forward(op, inputs, 0)
        }
        Op::Linear => {
            arity(op, inputs, 3)?;
            linear_forward(op, inputs)
        }
        Op::Relu => {
            arity(op, inputs, 1)?;
            let (x, s) = inputs[0];
            let zero = T::zero();
            Ok(out(x.iter().map(|&v| if v > zero { v } else { zero }).collect(), s.to_vec()))
        }
        Op::LeakyRelu { slope } => {
            arity(op, inputs, 1)?;
            let (x, s) = inputs[0];
            let a: T = k(*slope as f64);
            let zero = T::zero();
            Ok(out(x.iter().map(|&v| if v > zero { v } else { a * v }).collect(), s.to_vec()))
        }
        Op::InstanceNorm { eps } => {
            arity(op, inputs, 3)?;
            instance_norm_forward(op, inputs, k(*eps as f64))
        }
        Op::MaxPool => {
            arity(op, inputs, 1)?;
            max_pool_forward(op, inputs[0])
        }
        Op::NearestUpsample => {
            arity(op, inputs, 1)?;
            upsample_forward(op, inputs[0])
        }
        Op::ChannelConcat => concat_forward(op, inputs),
        Op::Sigmoid => {
            arity(op, inputs, 1)?;
            let (x, s) = inputs[0];
            Ok(out(x.iter().map(|&v| sigmoid(v)).collect(), s.to_vec()))
        }
        Op::Softmax => {
            arity(op, inputs, 1)?;
            softmax_forward(op, inputs[0])
        }
        Op::ElementwiseMean => {
            let first = inputs.first().ok_or_else(|| Error::shape(op.name(), "no inputs"))?;
            for other in &inputs[1..] {
                same_shape(op, first, other)?;
            }
            let mut acc = first.0.to_vec();
            for other in &inputs[1..] {
                acc.iter_mut().zip(other.0).for_each(|(a, &b)| *a = *a + b);
            }
            let n: T = k(inputs.len() as f64);
            acc.iter_mut().for_each(|a| *a = *a / n);
            Ok(out(acc, first.1.to_vec()))
        }
        Op::Add | Op::Mul => {
            arity(op, inputs, 2)?;
            same_shape(op, &inputs[0], &inputs[1])?;
            let f = |a: T, b: T| if matches!(op, Op::Add) { a + b } else { a * b };
            let data = inputs[0].0.iter().zip(inputs[1].0).map(|(&a, &b)| f(a, b)).collect();
            Ok(out(data, inputs[0].1.to_vec()))
        }
        Op::Scale { factor } => {
            arity(op, inputs, 1)?;
            let f: T = k(*factor as f64);
            Ok(out(inputs[0].0.iter().map(|&v| v * f).collect(), inputs[0].1.to_vec()))
        }
        Op::Sum | Op::Mean => {
            arity(op, inputs, 1)?;
            let x = inputs[0].0;
            let total = x.iter().fold(T::zero(), |a, &b| a + b);
            let v = if matches!(op, Op::Mean) {
                if x.is_empty() {
                    return Err(Error::shape(op.name(), "mean of an empty tensor"));
                }
                total / k(x.len() as f64)
            } else {
                total
            };
            Ok(out(vec![v], vec![]))
        }
        Op::Mse => {
            arity(op, inputs, 2)?;
            same_shape(op, &inputs[0], &inputs[1])?;
            let (a, b) = (inputs[0].0, inputs[1].0);
            if a.is_empty() {
                return Err(Error::shape(op.name(), "empty tensors"));
            }
            let s = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
                let d = x - y;
                acc + d * d
            });
            Ok(out(vec![s / k(a.len() as f64)], vec![]))
        }
        Op::CrossEntropy => {
            arity(op, inputs, 2)?;
            same_shape(op, &inputs[0], &inputs[1])?;
            let (n, _, inner) = channel_split(op, inputs[0].1)?;
            let eps: T = k(CE_EPS);
            let s = inputs[0]
                .0
                .iter()
                .zip(inputs[1].0)
                .fold(T::zero(), |acc, (&p, &t)| acc - t * p.max(eps).ln());
            Ok(out(vec![s / k((n * inner) as f64)], vec![]))
        }
        Op::SoftDice => {
            arity(op, inputs, 2)?;
            same_shape(op, &inputs[0], &inputs[1])?;
            let stats = dice_stats(op, inputs[0], inputs[1])?;
            let smooth: T = k(DICE_SMOOTH);
            let two: T = k(2.0);
            let mean = stats
                .iter()
                .fold(T::zero(), |acc, &(i, p, t)| acc + (two * i + smooth) / (p + t + smooth))
                / k(stats.len() as f64);
            Ok(out(vec![T::one() - mean], vec![]))
        }
        Op::BatchSlice { start, len } => {
            arity(op, inputs, 1)?;
            let (x, s) = inputs[0];
            if s.is_empty() || start + len > s[0] {
                return Err(Error::shape(
                    op.name(),
                    format!("slice {start}..{} of {s:?}", start + len),
                ));
            }
            let per: usize = s[1..].iter().product();
            let mut shape = s.to_vec();
            shape[0] = *len;
            Ok(out(x[start * per..(start + len) * per].to_vec(), shape))
        }
        Op::BatchConcat => {
            let first = inputs.first().ok_or_else(|| Error::shape(op.name(), "no inputs"))?;
            if first.1.is_empty() {
                return Err(Error::shape(op.name(), "scalar inputs"));
            }
            let mut batch = 0;
            let mut data = Vec::new();
            for v in inputs {
                if v.1.len() != first.1.len() || v.1[1..] != first.1[1..] {
                    return Err(Error::shape(op.name(), format!("{:?} vs {:?}", v.1, first.1)));
                }
                batch += v.1[0];
                data.extend_from_slice(v.0);
            }
            let mut shape = first.1.to_vec();
            shape[0] = batch;
            Ok(out(data, shape))
        }
    }
}

pub(crate) fn backward<T: Float>(
    op: &Op,
    inputs: &[View<T>],
    output: &[T],
    saved: &Saved<T>,
    gout: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let mut grads: Vec<Option<Vec<T>>> = vec![None; inputs.len()];
    let zero = T::zero();
    match op {
        Op::Conv2d { padding } => conv2d_backward(inputs, gout, *padding, needs, &mut grads),
        Op::Conv2d1x1 => conv2d_backward(inputs, gout, 0, needs, &mut grads),
        Op::Linear => linear_backward(inputs, gout, needs, &mut grads),
        Op::Relu => {
            grads[0] = Some(
                inputs[0]
                    .0
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| if x > zero { g } else { zero })
                    .collect(),
            );
        }
        Op::LeakyRelu { slope } => {
            let a: T = k(*slope as f64);
            grads[0] = Some(
                inputs[0]
                    .0
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| if x > zero { g } else { a * g })
                    .collect(),
            );
        }
        Op::InstanceNorm { .. } => instance_norm_backward(inputs, saved, gout, &mut grads),
        Op::MaxPool => {
            if let Saved::Argmax(idx) = saved {
                let mut g = vec![zero; inputs[0].0.len()];
                for (&i, &go) in idx.iter().zip(gout) {
                    g[i] = g[i] + go;
                }
                grads[0] = Some(g);
            }
        }
        Op::NearestUpsample => {
            let [n, c, h, w] = [inputs[0].1[0], inputs[0].1[1], inputs[0].1[2], inputs[0].1[3]];
            let (oh, ow) = (2 * h, 2 * w);
            let mut g = vec![zero; n * c * h * w];
            for plane in 0..n * c {
                let gp = &gout[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut g[plane * h * w..(plane + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let d = &mut dst[(oy / 2) * w + ox / 2];
                        *d = *d + gp[oy * ow + ox];
                    }
                }
            }
            grads[0] = Some(g);
        }
        Op::ChannelConcat => {
            let n = inputs[0].1[0];
            let inner: usize = inputs[0].1[2..].iter().product();
            let total_c: usize = inputs.iter().map(|v| v.1[1]).sum();
            let mut offset = 0;
            for (slot, v) in inputs.iter().enumerate() {
                let c = v.1[1];
                if needs[slot] {
                    let mut g = Vec::with_capacity(n * c * inner);
                    for ni in 0..n {
                        let base = (ni * total_c + offset) * inner;
                        g.extend_from_slice(&gout[base..base + c * inner]);
                    }
                    grads[slot] = Some(g);
                }
                offset += c;
            }
        }
        Op::Sigmoid => {
            grads[0] = Some(
                output
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect(),
            );
        }
        Op::Softmax => {
            let (n, c, inner) = (inputs[0].1[0], inputs[0].1[1], inputs[0].1[2..].iter().product::<usize>());
            let mut g = vec![zero; output.len()];
            for ni in 0..n {
                for p in 0..inner {
                    let idx = |ci: usize| (ni * c + ci) * inner + p;
                    let dot = (0..c).fold(zero, |acc, ci| acc + gout[idx(ci)] * output[idx(ci)]);
                    for ci in 0..c {
                        g[idx(ci)] = output[idx(ci)] * (gout[idx(ci)] - dot);
                    }
                }
            }
            grads[0] = Some(g);
        }
        Op::ElementwiseMean => {
            let n: T = k(inputs.len() as f64);
            let g: Vec<T> = gout.iter().map(|&v| v / n).collect();
            for (slot, need) in needs.iter().enumerate() {
                if *need {
                    grads[slot] = Some(g.clone());
                }
            }
        }
        Op::Add => {
            grads[0] = Some(gout.to_vec());
            grads[1] = Some(gout.to_vec());
        }
        Op::Mul => {
            grads[0] = Some(inputs[1].0.iter().zip(gout).map(|(&b, &g)| b * g).collect());
            grads[1] = Some(inputs[0].0.iter().zip(gout).map(|(&a, &g)| a * g).collect());
        }
        Op::Scale { factor } => {
            let f: T = k(*factor as f64);
            grads[0] = Some(gout.iter().map(|&g| g * f).collect());
        }
        Op::Sum => grads[0] = Some(vec![gout[0]; inputs[0].0.len()]),
        Op::Mean => {
            let v = gout[0] / k(inputs[0].0.len() as f64);
            grads[0] = Some(vec![v; inputs[0].0.len()]);
        }
        Op::Mse => {
            let (a, b) = (inputs[0].0, inputs[1].0);
            let scale = k::<T>(2.0) * gout[0] / k(a.len() as f64);
            let ga: Vec<T> = a.iter().zip(b).map(|(&x, &y)| scale * (x - y)).collect();
            if needs[1] {
                grads[1] = Some(ga.iter().map(|&v| -v).collect());
            }
            grads[0] = Some(ga);
        }
        Op::CrossEntropy => {
            let (n, _, inner) = (inputs[0].1[0], inputs[0].1[1], inputs[0].1[2..].iter().product::<usize>());
            let eps: T = k(CE_EPS);
            let m: T = k((n * inner) as f64);
            grads[0] = Some(
                inputs[0]
                    .0
                    .iter()
                    .zip(inputs[1].0)
                    .map(|(&p, &t)| if p > eps { -gout[0] * t / (m * p) } else { zero })
                    .collect(),
            );
            if needs[1] {
                grads[1] = Some(
                    inputs[0]
                        .0
                        .iter()
                        .map(|&p| -gout[0] * p.max(eps).ln() / m)
                        .collect(),
                );
            }
        }
        Op::SoftDice => {
            let (p, ps) = inputs[0];
            let t = inputs[1].0;
            let (n, c, inner) = (ps[0], ps[1], ps[2..].iter().product::<usize>());
            let fg_start = usize::from(c > 1);
            let stats = dice_stats(op, inputs[0], inputs[1]).expect("validated in forward");
            let smooth: T = k(DICE_SMOOTH);
            let two: T = k(2.0);
            let classes: T = k(stats.len() as f64);
            let mut g = vec![zero; p.len()];
            for (slot, ci) in (fg_start..c).enumerate() {
                let (i, sp, st) = stats[slot];
                let den = sp + st + smooth;
                let num = two * i + smooth;
                for ni in 0..n {
                    let base = (ni * c + ci) * inner;
                    for q in base..base + inner {
                        let dd = (two * t[q] * den - num) / (den * den);
                        g[q] = -gout[0] * dd / classes;
                    }
                }
            }
            grads[0] = Some(g);
        }
        Op::BatchSlice { start, .. } => {
            let s = inputs[0].1;
            let per: usize = s[1..].iter().product();
            let mut g = vec![zero; inputs[0].0.len()];
            g[start * per..start * per + gout.len()].copy_from_slice(gout);
            grads[0] = Some(g);
        }
        Op::BatchConcat => {
            let mut offset = 0;
            for (slot, v) in inputs.iter().enumerate() {
                let len = v.0.len();
                if needs[slot] {
                    grads[slot] = Some(gout[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
    }
    for (g, need) in grads.iter_mut().zip(needs) {
        if !need {
            *g = None;
        }
    }
    grads
}

#[inline]
fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Per foreground class: (intersection, prediction mass, target mass).
fn dice_stats<T: Float>(op: &Op, p: View<T>, t: View<T>) -> Result<Vec<(T, T, T)>> {
    let (n, c, inner) = channel_split(op, p.1)?;
    let fg_start = usize::from(c > 1);
    let mut stats = Vec::with_capacity(c - fg_start);
    for ci in fg_start..c {
        let (mut i, mut sp, mut st) = (T::zero(), T::zero(), T::zero());
        for ni in 0..n {
            let base = (ni * c + ci) * inner;
            for q in base..base + inner {
                i = i + p.0[q] * t.0[q];
                sp = sp + p.0[q];
                st = st + t.0[q];
            }
        }
        stats.push((i, sp, st));
    }
    Ok(stats)
}

fn conv_shapes(op: &Op, inputs: &[View<impl Copy>], padding: usize) -> Result<([usize; 4], [usize; 4], usize, usize)> {
    let xs = rank4(op, inputs[0].1)?;
    let ws = rank4(op, inputs[1].1)?;
    if xs[1] != ws[1] {
        return Err(Error::shape(
            op.name(),
            format!("input has {} channels, kernel expects {}", xs[1], ws[1]),
        ));
    }
    if inputs[2].1 != [ws[0]] {
        return Err(Error::shape(op.name(), format!("bias shape {:?}", inputs[2].1)));
    }
    let oh = (xs[2] + 2 * padding)
        .checked_sub(ws[2] - 1)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::shape(op.name(), "kernel larger than padded input"))?;
    let ow = (xs[3] + 2 * padding)
        .checked_sub(ws[3] - 1)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::shape(op.name(), "kernel larger than padded input"))?;
    Ok((xs, ws, oh, ow))
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (in_len as isize - d).clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

fn conv2d_forward<T: Float>(op: &Op, inputs: &[View<T>], padding: usize) -> Result<Output<T>> {
    let ([n, ci, h, w], [co, _, kh, kw], oh, ow) = conv_shapes(op, inputs, padding)?;
    let (x, wt, b) = (inputs[0].0, inputs[1].0, inputs[2].0);
    let mut y = vec![T::zero(); n * co * oh * ow];
    for ni in 0..n {
        for o in 0..co {
            let plane = &mut y[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..ci {
                let xin = &x[(ni * ci + c) * h * w..(ni * ci + c + 1) * h * w];
                for ky in 0..kh {
                    let dy = ky as isize - padding as isize;
                    let (oy0, oy1) = valid_range(oh, h, dy);
                    for kx in 0..kw {
                        let dx = kx as isize - padding as isize;
                        let (ox0, ox1) = valid_range(ow, w, dx);
                        let wv = wt[((o * ci + c) * kh + ky) * kw + kx];
                        for oy in oy0..oy1 {
                            let iy = (oy as isize + dy) as usize;
                            let ix0 = (ox0 as isize + dx) as usize;
                            let orow = &mut plane[oy * ow + ox0..oy * ow + ox1];
                            let irow = &xin[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o = *o + wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out(y, vec![n, co, oh, ow]))
}

fn conv2d_backward<T: Float>(
    inputs: &[View<T>],
    gout: &[T],
    padding: usize,
    needs: &[bool],
    grads: &mut [Option<Vec<T>>],
) {
    let xs = inputs[0].1;
    let ws = inputs[1].1;
    let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = h + 2 * padding - (kh - 1);
    let ow = w + 2 * padding - (kw - 1);
    let (x, wt) = (inputs[0].0, inputs[1].0);
    let zero = T::zero();
    let mut gx = needs[0].then(|| vec![zero; x.len()]);
    let mut gw = needs[1].then(|| vec![zero; wt.len()]);
    let want_w = gw.is_some();
    if needs[2] {
        let mut gb = vec![zero; co];
        for ni in 0..n {
            for (o, gbo) in gb.iter_mut().enumerate() {
                let plane = &gout[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
                *gbo = plane.iter().fold(*gbo, |a, &v| a + v);
            }
        }
        grads[2] = Some(gb);
    }
    for ni in 0..n {
        for o in 0..co {
            let gplane = &gout[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
            for c in 0..ci {
                let xoff = (ni * ci + c) * h * w;
                for ky in 0..kh {
                    let dy = ky as isize - padding as isize;
                    let (oy0, oy1) = valid_range(oh, h, dy);
                    for kx in 0..kw {
                        let dx = kx as isize - padding as isize;
                        let (ox0, ox1) = valid_range(ow, w, dx);
                        let widx = ((o * ci + c) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let len = ox1 - ox0;
                        let mut acc = zero;
                        for oy in oy0..oy1 {
                            let iy = (oy as isize + dy) as usize;
                            let ix0 = (ox0 as isize + dx) as usize;
                            let grow = &gplane[oy * ow + ox0..oy * ow + ox1];
                            let start = xoff + iy * w + ix0;
                            if want_w {
                                let irow = &x[start..start + len];
                                acc = grow.iter().zip(irow).fold(acc, |a, (&g, &i)| a + g * i);
                            }
                            if let Some(gx) = gx.as_mut() {
                                let dst = &mut gx[start..start + len];
                                for (d, &g) in dst.iter_mut().zip(grow) {
                                    *d = *d + wv * g;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] = gw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
    grads[0] = gx;
    grads[1] = gw;
}

fn linear_forward<T: Float>(op: &Op, inputs: &[View<T>]) -> Result<Output<T>> {
    let (x, xs) = inputs[0];
    let (wt, ws) = inputs[1];
    let (b, bs) = inputs[2];
    let (n, i) = match *xs {
        [n, i] => (n, i),
        _ => return Err(Error::shape(op.name(), format!("input {xs:?} is not rank 2"))),
    };
    let (o, i2) = match *ws {
        [o, i2] => (o, i2),
        _ => return Err(Error::shape(op.name(), format!("weight {ws:?} is not rank 2"))),
    };
    if i != i2 || bs != [o] {
        return Err(Error::shape(op.name(), format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
    }
    let mut y = Vec::with_capacity(n * o);
    for ni in 0..n {
        let xr = &x[ni * i..(ni + 1) * i];
        for oi in 0..o {
            let wr = &wt[oi * i..(oi + 1) * i];
            y.push(xr.iter().zip(wr).fold(b[oi], |a, (&xv, &wv)| a + xv * wv));
        }
    }
    Ok(out(y, vec![n, o]))
}

fn linear_backward<T: Float>(inputs: &[View<T>], gout: &[T], needs: &[bool], grads: &mut [Option<Vec<T>>]) {
    let (x, xs) = inputs[0];
    let wt = inputs[1].0;
    let (n, i) = (xs[0], xs[1]);
    let o = inputs[1].1[0];
    let zero = T::zero();
    if needs[0] {
        let mut gx = vec![zero; n * i];
        for ni in 0..n {
            for oi in 0..o {
                let g = gout[ni * o + oi];
                for k in 0..i {
                    gx[ni * i + k] = gx[ni * i + k] + g * wt[oi * i + k];
                }
            }
        }
        grads[0] = Some(gx);
    }
    if needs[1] {
        let mut gw = vec![zero; o * i];
        for ni in 0..n {
            for oi in 0..o {
                let g = gout[ni * o + oi];
                for k in 0..i {
                    gw[oi * i + k] = gw[oi * i + k] + g * x[ni * i + k];
                }
            }
        }
        grads[1] = Some(gw);
    }
    if needs[2] {
        let mut gb = vec![zero; o];
        for ni in 0..n {
            for oi in 0..o {
                gb[oi] = gb[oi] + gout[ni * o + oi];
            }
        }
        grads[2] = Some(gb);
    }
}

fn instance_norm_forward<T: Float>(op: &Op, inputs: &[View<T>], eps: T) -> Result<Output<T>> {
    let (x, xs) = inputs[0];
    let (n, c, inner) = channel_split(op, xs)?;
    if xs.len() < 3 || inner == 0 {
        return Err(Error::shape(op.name(), format!("needs spatial axes, got {xs:?}")));
    }
    if inputs[1].1 != [c] || inputs[2].1 != [c] {
        return Err(Error::shape(op.name(), "affine parameters must have one value per channel"));
    }
    let (gamma, beta) = (inputs[1].0, inputs[2].0);
    let m: T = k(inner as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            let xr = &x[base..base + inner];
            let mean = xr.iter().fold(T::zero(), |a, &v| a + v) / m;
            let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / m;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for q in 0..inner {
                let h = (xr[q] - mean) * inv;
                xhat[base + q] = h;
                y[base + q] = gamma[ci] * h + beta[ci];
            }
        }
    }
    Ok(Output {
        data: y,
        shape: xs.to_vec(),
        saved: Saved::Norm { xhat, inv_std },
    })
}

fn instance_norm_backward<T: Float>(inputs: &[View<T>], saved: &Saved<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    let Saved::Norm { xhat, inv_std } = saved else {
        return;
    };
    let xs = inputs[0].1;
    let (n, c, inner) = (xs[0], xs[1], xs[2..].iter().product::<usize>());
    let gamma = inputs[1].0;
    let zero = T::zero();
    let m: T = k(inner as f64);
    let mut gx = vec![zero; gout.len()];
    let mut gg = vec![zero; c];
    let mut gb = vec![zero; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            let inv = inv_std[ni * c + ci];
            let (mut sum_g, mut sum_gh) = (zero, zero);
            for q in base..base + inner {
                let gh = gout[q] * gamma[ci];
                sum_g = sum_g + gh;
                sum_gh = sum_gh + gh * xhat[q];
                gg[ci] = gg[ci] + gout[q] * xhat[q];
                gb[ci] = gb[ci] + gout[q];
            }
            let (mean_g, mean_gh) = (sum_g / m, sum_gh / m);
            for q in base..base + inner {
                let gh = gout[q] * gamma[ci];
                gx[q] = inv * (gh - mean_g - xhat[q] * mean_gh);
            }
        }
    }
    grads[0] = Some(gx);
    grads[1] = Some(gg);
    grads[2] = Some(gb);
}

fn max_pool_forward<T: Float>(op: &Op, input: View<T>) -> Result<Output<T>> {
    let [n, c, h, w] = rank4(op, input.1)?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(op.name(), format!("spatial extents must be even, got {h}x{w}")));
    }
    let x = input.0;
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                y.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok(Output {
        data: y,
        shape: vec![n, c, oh, ow],
        saved: Saved::Argmax(idx),
    })
}

fn upsample_forward<T: Float>(op: &Op, input: View<T>) -> Result<Output<T>> {
    let [n, c, h, w] = rank4(op, input.1)?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input.0[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    Ok(out(y, vec![n, c, oh, ow]))
}

fn concat_forward<T: Float>(op: &Op, inputs: &[View<T>]) -> Result<Output<T>> {
    let first = inputs.first().ok_or_else(|| Error::shape(op.name(), "no inputs"))?;
    let (n, _, inner) = channel_split(op, first.1)?;
    let mut total_c = 0;
    for v in inputs {
        let (vn, vc, _) = channel_split(op, v.1)?;
        if vn != n || v.1.len() != first.1.len() || v.1[2..] != first.1[2..] {
            return Err(Error::shape(op.name(), format!("{:?} vs {:?}", v.1, first.1)));
        }
        total_c += vc;
    }
    let mut y = Vec::with_capacity(n * total_c * inner);
    for ni in 0..n {
        for v in inputs {
            let c = v.1[1];
            y.extend_from_slice(&v.0[ni * c * inner..(ni + 1) * c * inner]);
        }
    }
    let mut shape = first.1.to_vec();
    shape[1] = total_c;
    Ok(out(y, shape))
}

fn softmax_forward<T: Float>(op: &Op, input: View<T>) -> Result<Output<T>> {
    let (n, c, inner) = channel_split(op, input.1)?;
    let x = input.0;
    let mut y = vec![T::zero(); x.len()];
    for ni in 0..n {
        for p in 0..inner {
            let idx = |ci: usize| (ni * c + ci) * inner + p;
            let max = (0..c).fold(T::neg_infinity(), |m, ci| m.max(x[idx(ci)]));
            let mut total = T::zero();
            for ci in 0..c {
                let e = (x[idx(ci)] - max).exp();
                y[idx(ci)] = e;
                total = total + e;
            }
            for ci in 0..c {
                y[idx(ci)] = y[idx(ci)] / total;
            }
        }
    }
    Ok(out(y, input.1.to_vec()))
}
