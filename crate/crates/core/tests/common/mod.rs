//! Independent nested-loop references shared by the integration tests. Every
//! reference works in f64 on raw index arithmetic and never calls into the
//! library's own kernels.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use weldsign::detect::BBox;
use weldsign::metrics::{DetectionRecord, GroundTruthBox};
use weldsign::ops::{self, ConvParams, Padding};
use weldsign::sce::{sce_forward, SceParams};
use weldsign::Tensor;

pub type TestRng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut TestRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `|a − e| / max(|e|, 1)`: relative for outputs of magnitude ≥ 1, absolute
/// below that so cancellation near zero is not over-weighted.
pub fn rel_err(actual: f32, expected: f64) -> f64 {
    (actual as f64 - expected).abs() / expected.abs().max(1.0)
}

pub fn max_rel_err(actual: &Tensor, expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "element count");
    actual
        .data()
        .iter()
        .zip(expected)
        .map(|(&a, &e)| rel_err(a, e))
        .fold(0.0, f64::max)
}

fn at(t: &Tensor, y: usize, x: usize, c: usize) -> f64 {
    let s = t.shape();
    t.data()[(y * s[1] + x) * s[2] + c] as f64
}

/// Input value at padded coordinates, `None` outside the image.
fn padded(t: &Tensor, y: isize, x: isize, c: usize) -> Option<f64> {
    let s = t.shape();
    (y >= 0 && x >= 0 && (y as usize) < s[0] && (x as usize) < s[1]).then(|| at(t, y as usize, x as usize, c))
}

fn out_size(n: usize, lo: usize, hi: usize, k: usize, s: usize) -> usize {
    (n + lo + hi - k) / s + 1
}

/// Grouped convolution by definition: output channel `o` of group
/// `o / (C_out/g)` sums its group's input channels over the window.
pub fn conv_oracle(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize, pad: Padding, groups: usize) -> (Vec<usize>, Vec<f64>) {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kk, cin_g, cout) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    assert_eq!(cin_g * groups, cin);
    let cout_g = cout / groups;
    let oh = out_size(h, pad.top, pad.bottom, kk, stride);
    let ow = out_size(w, pad.left, pad.right, kk, stride);
    let mut out = Vec::with_capacity(oh * ow * cout);
    for y in 0..oh {
        for xo in 0..ow {
            for o in 0..cout {
                let g = o / cout_g;
                let mut acc = bias.map_or(0.0, |b| b.data()[o] as f64);
                for ky in 0..kk {
                    for kx in 0..kk {
                        let iy = (y * stride + ky) as isize - pad.top as isize;
                        let ix = (xo * stride + kx) as isize - pad.left as isize;
                        for i in 0..cin_g {
                            if let Some(v) = padded(x, iy, ix, g * cin_g + i) {
                                let wv = k.data()[((ky * kk + kx) * cin_g + i) * cout + o] as f64;
                                acc += v * wv;
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (vec![oh, ow, cout], out)
}

/// The per-group formulation: split the input channels and the filters into
/// `g` parts, run a dense convolution on each pair, concatenate the results.
pub fn conv_by_groups(x: &Tensor, k: &Tensor, stride: usize, pad: Padding, groups: usize) -> Vec<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kk, cin_g, cout) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let cout_g = cout / groups;
    let mut parts = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = Tensor::from_fn(vec![h, w, cin_g], |i| x.data()[(i / cin_g) * cin + g * cin_g + i % cin_g]);
        let ks = Tensor::from_fn(vec![kk, kk, cin_g, cout_g], |i| k.data()[(i / cout_g) * cout + g * cout_g + i % cout_g]);
        parts.push(conv_oracle(&xs, &ks, None, stride, pad, 1));
    }
    let [oh, ow, _] = parts[0].0[..] else { unreachable!() };
    let mut out = Vec::with_capacity(oh * ow * cout);
    for px in 0..oh * ow {
        for (_, p) in &parts {
            out.extend_from_slice(&p[px * cout_g..(px + 1) * cout_g]);
        }
    }
    out
}

pub fn maxpool_oracle(x: &Tensor, k: usize, stride: usize, pad: Padding) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = out_size(h, pad.top, pad.bottom, k, stride);
    let ow = out_size(w, pad.left, pad.right, k, stride);
    let mut out = Vec::new();
    for y in 0..oh {
        for xo in 0..ow {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * stride + ky) as isize - pad.top as isize;
                        let ix = (xo * stride + kx) as isize - pad.left as isize;
                        if let Some(v) = padded(x, iy, ix, ch) {
                            m = m.max(v);
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn gap_oracle(x: &Tensor) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += at(x, y, xx, ch);
                }
            }
            s / (h * w) as f64
        })
        .collect()
}

/// `y_j = b_j + Σ_i x_i·W[i][j]`.
pub fn fc_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    (0..m)
        .map(|j| {
            let mut s = b.map_or(0.0, |b| b.data()[j] as f64);
            for i in 0..n {
                s += x.data()[i] as f64 * w.data()[i * m + j] as f64;
            }
            s
        })
        .collect()
}

pub fn softmax_oracle(x: &Tensor) -> Vec<f64> {
    let m = x.data().iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let e: Vec<f64> = x.data().iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn sigmoid_oracle(x: &Tensor) -> Vec<f64> {
    x.data().iter().map(|&v| 1.0 / (1.0 + (-(v as f64)).exp())).collect()
}

/// Inference batch norm from running statistics.
pub fn bn_infer_oracle(x: &Tensor, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> Vec<f64> {
    let c = gamma.len();
    x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            gamma[ch] as f64 * (v as f64 - mean[ch] as f64) / (var[ch] as f64 + eps as f64).sqrt() + beta[ch] as f64
        })
        .collect()
}

/// Training batch norm: two-pass batch mean and population variance.
pub fn bn_train_oracle(batch: &[Tensor], gamma: &[f32], beta: &[f32], eps: f32) -> Vec<Vec<f64>> {
    let c = gamma.len();
    let mut mean = vec![0.0; c];
    let mut count = 0usize;
    for t in batch {
        for (i, &v) in t.data().iter().enumerate() {
            mean[i % c] += v as f64;
        }
        count += t.len() / c;
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for t in batch {
        for (i, &v) in t.data().iter().enumerate() {
            var[i % c] += (v as f64 - mean[i % c]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    batch
        .iter()
        .map(|t| {
            t.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = i % c;
                    gamma[ch] as f64 * (v as f64 - mean[ch]) / (var[ch] + eps as f64).sqrt() + beta[ch] as f64
                })
                .collect()
        })
        .collect()
}

pub struct SceWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Pyramid of same-size max pools, concatenated in kernel order, scaled by
/// `σ(W₂·relu(W₁·mean + b₁) + b₂)`.
pub fn sce_oracle(x: &Tensor, pyramid: &[usize], p: &SceWeights) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let branches: Vec<Vec<f64>> = pyramid
        .iter()
        .map(|&k| maxpool_oracle(x, k, 1, Padding::uniform((k - 1) / 2)))
        .collect();
    let wide = c * pyramid.len();
    let mut o = vec![0.0; h * w * wide];
    for px in 0..h * w {
        for (b, br) in branches.iter().enumerate() {
            for ch in 0..c {
                o[px * wide + b * c + ch] = br[px * c + ch];
            }
        }
    }
    let z: Vec<f64> = (0..wide)
        .map(|ch| (0..h * w).map(|px| o[px * wide + ch]).sum::<f64>() / (h * w) as f64)
        .collect();
    let hidden = p.w1.shape()[1];
    let a: Vec<f64> = (0..hidden)
        .map(|j| {
            let s = p.b1.data()[j] as f64 + (0..wide).map(|i| z[i] * p.w1.data()[i * hidden + j] as f64).sum::<f64>();
            s.max(0.0)
        })
        .collect();
    let s: Vec<f64> = (0..wide)
        .map(|j| {
            let v = p.b2.data()[j] as f64 + (0..hidden).map(|i| a[i] * p.w2.data()[i * wide + j] as f64).sum::<f64>();
            1.0 / (1.0 + (-v).exp())
        })
        .collect();
    o.iter().enumerate().map(|(i, v)| v * s[i % wide]).collect()
}

/// Operators with an independent reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleOp {
    Conv,
    MaxPool,
    GlobalAvgPool,
    BatchNormInfer,
    BatchNormTrain,
    FullyConnected,
    Softmax,
    Sigmoid,
    Sce,
}

impl OracleOp {
    pub const ALL: [OracleOp; 9] = [
        OracleOp::Conv,
        OracleOp::MaxPool,
        OracleOp::GlobalAvgPool,
        OracleOp::BatchNormInfer,
        OracleOp::BatchNormTrain,
        OracleOp::FullyConnected,
        OracleOp::Softmax,
        OracleOp::Sigmoid,
        OracleOp::Sce,
    ];
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Random grouped-conv geometry: `(h, w, cin, cout, groups, k, stride, pad)`.
pub fn conv_geometry(rng: &mut TestRng) -> (usize, usize, usize, usize, usize, usize, usize, Padding) {
    let groups = rng.gen_range(1..=4);
    let cin = groups * rng.gen_range(1..=3);
    let cout = groups * rng.gen_range(1..=3);
    let k = [1, 2, 3, 5][rng.gen_range(0..4)];
    let stride = rng.gen_range(1..=3);
    let pad = Padding {
        top: rng.gen_range(0..k),
        bottom: rng.gen_range(0..k),
        left: rng.gen_range(0..k),
        right: rng.gen_range(0..k),
    };
    let h = rng.gen_range(k.saturating_sub(pad.top + pad.bottom).max(1)..=9);
    let w = rng.gen_range(k.saturating_sub(pad.left + pad.right).max(1)..=9);
    (h, w, cin, cout, groups, k, stride, pad)
}

/// One randomized instance of `op`; returns the worst relative error against
/// the reference.
pub fn oracle_case(op: OracleOp, seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x0ac1e);
    match op {
        OracleOp::Conv => {
            let (h, w, cin, cout, groups, k, stride, pad) = conv_geometry(&mut r);
            let x = rand_tensor(&mut r, &[h, w, cin], -1.0, 1.0);
            let kern = rand_tensor(&mut r, &[k, k, cin / groups, cout], -1.0, 1.0);
            let bias = r.gen_bool(0.5).then(|| rand_tensor(&mut r, &[cout], -1.0, 1.0));
            let p = ConvParams {
                kernel: &kern,
                bias: bias.as_ref(),
                stride,
                padding: pad,
                groups,
            };
            let y = ops::conv2d(&x, &p).unwrap();
            let (shape, expected) = conv_oracle(&x, &kern, bias.as_ref(), stride, pad, groups);
            assert_eq!(y.shape(), shape.as_slice());
            max_rel_err(&y, &expected)
        }
        OracleOp::MaxPool => {
            let k = r.gen_range(1..=5);
            let stride = r.gen_range(1..=3);
            let p = r.gen_range(0..k);
            let pad = Padding {
                top: p,
                bottom: r.gen_range(0..k),
                left: r.gen_range(0..k),
                right: p,
            };
            let h = r.gen_range(k.max(1)..=10);
            let w = r.gen_range(k.max(1)..=10);
            let c = r.gen_range(1..=5);
            let x = rand_tensor(&mut r, &[h, w, c], -2.0, 2.0);
            let y = ops::maxpool(&x, k, stride, pad).unwrap();
            max_rel_err(&y, &maxpool_oracle(&x, k, stride, pad))
        }
        OracleOp::GlobalAvgPool => {
            let shape = [r.gen_range(1..=12), r.gen_range(1..=12), r.gen_range(1..=8)];
            let x = rand_tensor(&mut r, &shape, -3.0, 3.0);
            max_rel_err(&ops::global_avgpool(&x).unwrap(), &gap_oracle(&x))
        }
        OracleOp::BatchNormInfer => {
            let c = r.gen_range(1..=8);
            let shape = [r.gen_range(1..=6), r.gen_range(1..=6), c];
            let x = rand_tensor(&mut r, &shape, -3.0, 3.0);
            let gamma = rand_tensor(&mut r, &[c], 0.2, 2.0);
            let beta = rand_tensor(&mut r, &[c], -1.0, 1.0);
            let mean = rand_tensor(&mut r, &[c], -1.0, 1.0);
            let var = rand_tensor(&mut r, &[c], 0.1, 3.0);
            let p = ops::BatchNormParams {
                gamma: &gamma,
                beta: &beta,
                running_mean: &mean,
                running_var: &var,
                eps: ops::BN_EPSILON,
            };
            let y = ops::batchnorm_infer(&x, &p).unwrap();
            let e = bn_infer_oracle(&x, gamma.data(), beta.data(), mean.data(), var.data(), ops::BN_EPSILON);
            max_rel_err(&y, &e)
        }
        OracleOp::BatchNormTrain => {
            let c = r.gen_range(1..=6);
            let shape = [r.gen_range(1..=5), r.gen_range(1..=5), c];
            let n = r.gen_range(1..=4);
            let shift = r.gen_range(-2.0..2.0);
            let batch: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut r, &shape, shift - 1.5, shift + 1.5)).collect();
            let gamma = rand_tensor(&mut r, &[c], 0.2, 2.0);
            let beta = rand_tensor(&mut r, &[c], -1.0, 1.0);
            let refs: Vec<&Tensor> = batch.iter().collect();
            let (ys, _) = ops::batchnorm_train_forward(&refs, &gamma, &beta, ops::BN_EPSILON).unwrap();
            let es = bn_train_oracle(&batch, gamma.data(), beta.data(), ops::BN_EPSILON);
            ys.iter().zip(&es).map(|(y, e)| max_rel_err(y, e)).fold(0.0, f64::max)
        }
        OracleOp::FullyConnected => {
            let (n, m) = (r.gen_range(1..=40), r.gen_range(1..=12));
            let x = rand_tensor(&mut r, &[n], -1.0, 1.0);
            let w = rand_tensor(&mut r, &[n, m], -1.0, 1.0);
            let b = r.gen_bool(0.5).then(|| rand_tensor(&mut r, &[m], -1.0, 1.0));
            let y = ops::fully_connected(&x, &w, b.as_ref()).unwrap();
            max_rel_err(&y, &fc_oracle(&x, &w, b.as_ref()))
        }
        OracleOp::Softmax => {
            let n = r.gen_range(1..=20);
            let x = rand_tensor(&mut r, &[n], -20.0, 20.0);
            max_rel_err(&ops::softmax(&x), &softmax_oracle(&x))
        }
        OracleOp::Sigmoid => {
            let n = r.gen_range(1..=30);
            let x = rand_tensor(&mut r, &[n], -30.0, 30.0);
            max_rel_err(&ops::sigmoid(&x), &sigmoid_oracle(&x))
        }
        OracleOp::Sce => {
            let c = r.gen_range(1..=3);
            let all = [1usize, 3, 5, 7, 9];
            let mut pyramid: Vec<usize> = all.iter().copied().filter(|_| r.gen_bool(0.6)).collect();
            if pyramid.is_empty() {
                pyramid.push(1);
            }
            let wide = c * pyramid.len();
            let options = divisors(wide);
            let reduction = options[r.gen_range(0..options.len())];
            let hidden = wide / reduction;
            let shape = [r.gen_range(1..=8), r.gen_range(1..=8), c];
            let x = rand_tensor(&mut r, &shape, -1.0, 1.0);
            let p = SceWeights {
                w1: rand_tensor(&mut r, &[wide, hidden], -1.0, 1.0),
                b1: rand_tensor(&mut r, &[hidden], -0.5, 0.5),
                w2: rand_tensor(&mut r, &[hidden, wide], -1.0, 1.0),
                b2: rand_tensor(&mut r, &[wide], -0.5, 0.5),
            };
            let y = sce_forward(
                &x,
                &SceParams {
                    pyramid: &pyramid,
                    w1: &p.w1,
                    b1: Some(&p.b1),
                    w2: &p.w2,
                    b2: Some(&p.b2),
                },
            )
            .unwrap();
            max_rel_err(&y, &sce_oracle(&x, &pyramid, &p))
        }
    }
}

/// Central-difference gradient error: `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `Σ r·y` in f64, the scalar whose gradient with respect to `y` is `r`.
pub fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Compares `analytic` with central differences of `loss` at up to `samples`
/// random coordinates of `param`; returns the worst error. The error floor
/// is the larger of `floor` and 1% of the tensor's largest gradient, so
/// coordinates far below the tensor's scale are compared absolutely.
pub fn fd_check(
    rng: &mut TestRng,
    param: &Tensor,
    analytic: &Tensor,
    samples: usize,
    eps: f32,
    floor: f64,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> f64 {
    assert_eq!(param.shape(), analytic.shape());
    let n = param.len();
    let picks: Vec<usize> = if n <= samples {
        (0..n).collect()
    } else {
        (0..samples).map(|_| rng.gen_range(0..n)).collect()
    };
    let floor = floor.max(1e-2 * analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)));
    let mut worst = 0.0f64;
    for i in picks {
        let mut p = param.clone();
        p.data_mut()[i] = param.data()[i] + eps;
        let up = loss(&p);
        p.data_mut()[i] = param.data()[i] - eps;
        let down = loss(&p);
        let numeric = (up - down) / (2.0 * eps as f64);
        worst = worst.max(grad_rel_err(analytic.data()[i] as f64, numeric, floor));
    }
    worst
}

fn iou64(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.to_array().map(f64::from), b.to_array().map(f64::from));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Exhaustive mAP: greedy per-image matching, then for each class the
/// interpolated precision at every achieved recall level is found by
/// scanning all ranks, and summed over recall increments.
pub fn map_oracle(dets: &[DetectionRecord], gts: &[GroundTruthBox], thr: f64) -> f64 {
    let mut image_rank: HashMap<&str, usize> = HashMap::new();
    for name in gts.iter().map(|g| g.image.as_str()).chain(dets.iter().map(|d| d.image.as_str())) {
        let next = image_rank.len();
        image_rank.entry(name).or_insert(next);
    }
    // (class, score, image rank, position within image, is_tp)
    let mut scored: Vec<(usize, f32, usize, usize, bool)> = Vec::new();
    for (name, &rank) in &image_rank {
        let mine: Vec<&DetectionRecord> = dets.iter().filter(|d| d.image == *name).collect();
        let truth: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.image == *name).collect();
        let mut used = vec![false; truth.len()];
        let mut order: Vec<usize> = (0..mine.len()).collect();
        // Stable by position for equal scores.
        for a in 0..order.len() {
            for b in (a + 1..order.len()).rev() {
                if mine[order[b]].score > mine[order[b - 1]].score {
                    order.swap(b, b - 1);
                }
            }
        }
        for i in order {
            let d = mine[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in truth.iter().enumerate() {
                if used[j] || g.class_id != d.class_id {
                    continue;
                }
                let v = iou64(&d.bbox, &g.bbox);
                if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            scored.push((d.class_id, d.score, rank, i, best.is_some()));
        }
    }
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let n_gt = gts.iter().filter(|g| g.class_id == c).count() as f64;
        let mut mine: Vec<_> = scored.iter().filter(|s| s.0 == c).collect();
        mine.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        let mut recall = Vec::new();
        let mut precision = Vec::new();
        let mut tp = 0.0;
        for (k, s) in mine.iter().enumerate() {
            if s.4 {
                tp += 1.0;
            }
            recall.push(tp / n_gt);
            precision.push(tp / (k + 1) as f64);
        }
        let mut levels = recall.clone();
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &level in &levels {
            let p = recall
                .iter()
                .zip(&precision)
                .filter(|(r, _)| **r >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            ap += (level - prev) * p;
            prev = level;
        }
        total += ap;
    }
    total / classes.len() as f64
}

/// Backward passes checked against finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    Conv,
    BatchNormTrain,
    Relu,
    MaxPool,
    GlobalAvgPool,
    FullyConnected,
    Add,
    SoftmaxCrossEntropy,
}

impl GradOp {
    pub const ALL: [GradOp; 8] = [
        GradOp::Conv,
        GradOp::BatchNormTrain,
        GradOp::Relu,
        GradOp::MaxPool,
        GradOp::GlobalAvgPool,
        GradOp::FullyConnected,
        GradOp::Add,
        GradOp::SoftmaxCrossEntropy,
    ];
}

/// Error floor of [`grad_rel_err`] for the primitive checks.
pub const GRAD_FLOOR: f64 = 1e-3;
const SAMPLES: usize = 24;

/// Values spaced at least `gap` apart in random order, so that a small
/// perturbation never changes which element of a window is largest.
fn distinct_tensor(rng: &mut TestRng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// One randomized gradient check; returns the worst error over every
/// differentiable argument.
pub fn grad_case(op: GradOp, seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x9ad);
    match op {
        GradOp::Conv => {
            let (h, w, cin, cout, groups, k, stride, pad) = conv_geometry(&mut r);
            let x = rand_tensor(&mut r, &[h, w, cin], -1.0, 1.0);
            let kern = rand_tensor(&mut r, &[k, k, cin / groups, cout], -1.0, 1.0);
            let bias = rand_tensor(&mut r, &[cout], -1.0, 1.0);
            let p = ConvParams {
                kernel: &kern,
                bias: Some(&bias),
                stride,
                padding: pad,
                groups,
            };
            let y = ops::conv2d(&x, &p).unwrap();
            let proj = rand_tensor(&mut r, y.shape(), -1.0, 1.0);
            let g = ops::conv2d_backward(&x, &p, &proj, true).unwrap();
            let run = |x: &Tensor, k: &Tensor, b: &Tensor| {
                let p = ConvParams {
                    kernel: k,
                    bias: Some(b),
                    stride,
                    padding: pad,
                    groups,
                };
                project(&ops::conv2d(x, &p).unwrap(), &proj)
            };
            let ex = fd_check(&mut r, &x, g.input.as_ref().unwrap(), SAMPLES, 1e-2, GRAD_FLOOR, |t| run(t, &kern, &bias));
            let ek = fd_check(&mut r, &kern, &g.kernel, SAMPLES, 1e-2, GRAD_FLOOR, |t| run(&x, t, &bias));
            let eb = fd_check(&mut r, &bias, g.bias.as_ref().unwrap(), SAMPLES, 1e-2, GRAD_FLOOR, |t| run(&x, &kern, t));
            ex.max(ek).max(eb)
        }
        GradOp::BatchNormTrain => {
            let c = r.gen_range(1..=4);
            // Up to 243 pixels per batch, past the forward's 64-pixel blocks.
            let shape = [r.gen_range(1..=9), r.gen_range(1..=9), c];
            let n = r.gen_range(2..=3);
            let batch: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut r, &shape, -1.5, 1.5)).collect();
            let gamma = rand_tensor(&mut r, &[c], 0.5, 1.5);
            let beta = rand_tensor(&mut r, &[c], -1.0, 1.0);
            let projs: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut r, &shape, -1.0, 1.0)).collect();
            let run = |batch: &[Tensor], gamma: &Tensor, beta: &Tensor| {
                let refs: Vec<&Tensor> = batch.iter().collect();
                let (ys, _) = ops::batchnorm_train_forward(&refs, gamma, beta, ops::BN_EPSILON).unwrap();
                ys.iter().zip(&projs).map(|(y, p)| project(y, p)).sum::<f64>()
            };
            let refs: Vec<&Tensor> = batch.iter().collect();
            let (_, stats) = ops::batchnorm_train_forward(&refs, &gamma, &beta, ops::BN_EPSILON).unwrap();
            let grefs: Vec<&Tensor> = projs.iter().collect();
            let g = ops::batchnorm_train_backward(&refs, &stats, &gamma, &grefs).unwrap();
            let mut worst = 0.0f64;
            for b in 0..n {
                let e = fd_check(&mut r, &batch[b], &g.inputs[b], SAMPLES, 1e-2, GRAD_FLOOR, |t| {
                    let mut bs = batch.clone();
                    bs[b] = t.clone();
                    run(&bs, &gamma, &beta)
                });
                worst = worst.max(e);
            }
            let eg = fd_check(&mut r, &gamma, &g.gamma, SAMPLES, 1e-2, GRAD_FLOOR, |t| run(&batch, t, &beta));
            let eb = fd_check(&mut r, &beta, &g.beta, SAMPLES, 1e-2, GRAD_FLOOR, |t| run(&batch, &gamma, t));
            worst.max(eg).max(eb)
        }
        GradOp::Relu => {
            let shape = [r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=4)];
            // Keep every input at least 0.1 from the kink.
            let n = shape.iter().product();
            let vals = (0..n).map(|_| r.gen_range(0.1f32..1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let x = Tensor::new(shape.to_vec(), vals).unwrap();
            let proj = rand_tensor(&mut r, &shape, -1.0, 1.0);
            let y = ops::relu(&x);
            let g = ops::relu_backward(&y, &proj).unwrap();
            fd_check(&mut r, &x, &g, SAMPLES, 1e-2, GRAD_FLOOR, |t| project(&ops::relu(t), &proj))
        }
        GradOp::MaxPool => {
            let k = r.gen_range(1..=4);
            let stride = r.gen_range(1..=3);
            let pad = Padding {
                top: r.gen_range(0..k),
                bottom: r.gen_range(0..k),
                left: r.gen_range(0..k),
                right: r.gen_range(0..k),
            };
            let shape = [r.gen_range(k..=7), r.gen_range(k..=7), r.gen_range(1..=3)];
            let x = distinct_tensor(&mut r, &shape, 0.05);
            let y = ops::maxpool(&x, k, stride, pad).unwrap();
            let proj = rand_tensor(&mut r, y.shape(), -1.0, 1.0);
            let g = ops::maxpool_backward(&x, k, stride, pad, &proj).unwrap();
            fd_check(&mut r, &x, &g, SAMPLES, 1e-2, GRAD_FLOOR, |t| {
                project(&ops::maxpool(t, k, stride, pad).unwrap(), &proj)
            })
        }
        GradOp::GlobalAvgPool => {
            let shape = [r.gen_range(1..=6), r.gen_range(1..=6), r.gen_range(1..=5)];
            let x = rand_tensor(&mut r, &shape, -1.0, 1.0);
            let y = ops::global_avgpool(&x).unwrap();
            let proj = rand_tensor(&mut r, y.shape(), -1.0, 1.0);
            let g = ops::global_avgpool_backward(x.shape(), &proj).unwrap();
            fd_check(&mut r, &x, &g, SAMPLES, 1e-2, GRAD_FLOOR, |t| {
                project(&ops::global_avgpool(t).unwrap(), &proj)
            })
        }
        GradOp::FullyConnected => {
            let (n, m) = (r.gen_range(1..=16), r.gen_range(1..=8));
            let x = rand_tensor(&mut r, &[n], -1.0, 1.0);
            let w = rand_tensor(&mut r, &[n, m], -1.0, 1.0);
            let b = rand_tensor(&mut r, &[m], -1.0, 1.0);
            let proj = rand_tensor(&mut r, &[m], -1.0, 1.0);
            let g = ops::fully_connected_backward(&x, &w, true, &proj).unwrap();
            let run = |x: &Tensor, w: &Tensor, b: &Tensor| project(&ops::fully_connected(x, w, Some(b)).unwrap(), &proj);
            let ex = fd_check(&mut r, &x, &g.input, SAMPLES, 1e-2, GRAD_FLOOR, |t| run(t, &w, &b));
            let ew = fd_check(&mut r, &w, &g.weights, SAMPLES, 1e-2, GRAD_FLOOR, |t| run(&x, t, &b));
            let eb = fd_check(&mut r, &b, g.bias.as_ref().unwrap(), SAMPLES, 1e-2, GRAD_FLOOR, |t| run(&x, &w, t));
            ex.max(ew).max(eb)
        }
        GradOp::Add => {
            let shape = [r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4)];
            let a = rand_tensor(&mut r, &shape, -1.0, 1.0);
            let b = rand_tensor(&mut r, &shape, -1.0, 1.0);
            let proj = rand_tensor(&mut r, &shape, -1.0, 1.0);
            let (ga, gb) = ops::add_backward(&proj);
            let run = |a: &Tensor, b: &Tensor| project(&weldsign::elementwise_add(a, b).unwrap(), &proj);
            let ea = fd_check(&mut r, &a, &ga, SAMPLES, 1e-2, GRAD_FLOOR, |t| run(t, &b));
            let eb = fd_check(&mut r, &b, &gb, SAMPLES, 1e-2, GRAD_FLOOR, |t| run(&a, t));
            ea.max(eb)
        }
        GradOp::SoftmaxCrossEntropy => {
            let k = r.gen_range(2..=8);
            let label = r.gen_range(0..k);
            let eps = [0.0f32, 0.1, 0.3][r.gen_range(0..3)];
            let logits = rand_tensor(&mut r, &[k], -3.0, 3.0);
            let (_, g) = weldsign::train::smoothed_cross_entropy(&ops::softmax(&logits), label, eps).unwrap();
            let loss = |z: &Tensor| {
                let p = ops::softmax(z);
                let off = eps as f64 / k as f64;
                -p.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (if i == label { 1.0 - eps as f64 + off } else { off }) * (v as f64).ln())
                    .sum::<f64>()
            };
            fd_check(&mut r, &logits, &g, SAMPLES, 1e-2, GRAD_FLOOR, loss)
        }
    }
}

/// A residual block in miniature, with every layer type of the classifier:
/// grouped and depthwise conv, training batch norm, ReLU, max pool, skip
/// add, global average pool, FC and softmax.
pub fn residual_miniature() -> (weldsign::NetGraph, [usize; 3]) {
    use weldsign::{LayerKind, LayerSpec, NetGraph};
    let conv = |filters, kernel, stride, groups| LayerKind::Conv {
        filters,
        kernel,
        stride,
        padding: Padding::uniform((kernel - 1) / 2),
        groups,
        bias: false,
    };
    let layer = |id: &str, kind, inputs: &[&str]| LayerSpec {
        id: id.into(),
        kind,
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
    };
    let layers = vec![
        layer("c1", conv(4, 3, 1, 2), &["input"]),
        layer("b1", LayerKind::batch_norm(), &["c1"]),
        layer("r1", LayerKind::Relu, &["b1"]),
        layer(
            "p1",
            LayerKind::MaxPool {
                kernel: 2,
                stride: 2,
                padding: Padding::ZERO,
            },
            &["r1"],
        ),
        layer("c2", conv(4, 3, 1, 4), &["p1"]),
        layer("b2", LayerKind::batch_norm(), &["c2"]),
        layer("sum", LayerKind::Add, &["b2", "p1"]),
        layer("r2", LayerKind::Relu, &["sum"]),
        layer("gap", LayerKind::GlobalAvgPool, &["r2"]),
        layer("fc", LayerKind::Fc { units: 4, bias: true }, &["gap"]),
        layer("softmax", LayerKind::Softmax, &["fc"]),
    ];
    (NetGraph::new("residual-miniature", layers, vec!["softmax".into()]).unwrap(), [6, 6, 2])
}

/// A miniature with no ReLU or max pool, so its loss is smooth and finite
/// differences are accurate: grouped conv, batch norm, depthwise conv,
/// batch norm, skip add, global average pool, FC, softmax.
pub fn smooth_miniature() -> (weldsign::NetGraph, [usize; 3]) {
    let (full, input) = residual_miniature();
    let keep = ["c1", "b1", "c2", "b2", "sum", "gap", "fc", "softmax"];
    let layers = full
        .layers
        .into_iter()
        .filter(|l| keep.contains(&l.id.as_str()))
        .map(|mut l| {
            for src in &mut l.inputs {
                *src = match src.as_str() {
                    "p1" => "b1".into(),
                    "r2" => "sum".into(),
                    other => other.into(),
                };
            }
            l
        })
        .collect();
    (weldsign::NetGraph::new("smooth-miniature", layers, vec!["softmax".into()]).unwrap(), input)
}

/// Random weights with non-trivial batch-norm affine terms and biases, a
/// batch of images in [0, 1) and labels.
pub fn miniature_setup(graph: &weldsign::NetGraph, input: &[usize], seed: u64, batch: usize) -> (weldsign::WeightStore, Vec<Tensor>, Vec<usize>) {
    let mut store = weldsign::train::init_weights(graph, input, seed).unwrap();
    let mut r = rng(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            for v in store.get_mut(name).unwrap().data_mut() {
                *v += r.gen_range(-0.3..0.3);
            }
        }
    }
    let images = (0..batch).map(|_| rand_tensor(&mut r, input, 0.0, 1.0)).collect();
    let labels = (0..batch).map(|_| r.gen_range(0..4)).collect();
    (store, images, labels)
}

/// Central differences of the trainer's batch loss for every coordinate of
/// every learnable tensor. Per tensor the error is `‖a − n‖ / max(‖a‖, ‖n‖)`;
/// returns the worst tensor.
pub fn network_grad_error(graph: &weldsign::NetGraph, input: &[usize], seed: u64, batch: usize) -> (String, f64) {
    use weldsign::train::TrainGraph;
    const H: f32 = 1e-2;
    let (mut store, images, labels) = miniature_setup(graph, input, seed, batch);
    let tg = TrainGraph::new(graph, input).unwrap();
    let base = tg.batch_gradients(&store, &images, &labels, 0.1).unwrap();
    let mut worst = (String::new(), 0.0f64);
    for name in tg.learnable().to_vec() {
        let analytic = &base.grads[&name];
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for (i, &a) in analytic.data().iter().enumerate() {
            let orig = store.get(&name).unwrap().data()[i];
            let mut at = |v: f32| {
                store.get_mut(&name).unwrap().data_mut()[i] = v;
                tg.batch_gradients(&store, &images, &labels, 0.1).unwrap().loss
            };
            let numeric = (at(orig + H) - at(orig - H)) / (2.0 * H as f64);
            at(orig);
            diff += (a as f64 - numeric).powi(2);
            na += (a as f64).powi(2);
            nn += numeric * numeric;
        }
        let err = diff.sqrt() / na.max(nn).sqrt().max(1e-12);
        if err > worst.1 {
            worst = (name, err);
        }
    }
    worst
}

/// [`residual_miniature`]'s loss and gradients chained by hand from the
/// primitive forward and backward functions.
pub fn residual_miniature_by_hand(store: &weldsign::WeightStore, images: &[Tensor], labels: &[usize], smoothing: f32) -> (f64, Vec<(String, Tensor)>) {
    use weldsign::train::smoothed_cross_entropy;
    let w = |n: &str| store.get(n).unwrap();
    let conv = |kernel, groups| ConvParams {
        kernel,
        bias: None,
        stride: 1,
        padding: Padding::uniform(1),
        groups,
    };
    let (p_c1, p_c2) = (conv(w("c1.weight"), 2), conv(w("c2.weight"), 4));
    let pool = |t: &Tensor| ops::maxpool(t, 2, 2, Padding::ZERO).unwrap();
    fn refs(v: &[Tensor]) -> Vec<&Tensor> {
        v.iter().collect()
    }
    let bn = |v: &[Tensor], layer: &str| {
        ops::batchnorm_train_forward(&refs(v), w(&format!("{layer}.gamma")), w(&format!("{layer}.beta")), ops::BN_EPSILON).unwrap()
    };

    let c1: Vec<Tensor> = images.iter().map(|x| ops::conv2d(x, &p_c1).unwrap()).collect();
    let (b1, s1) = bn(&c1, "b1");
    let r1: Vec<Tensor> = b1.iter().map(ops::relu).collect();
    let p1: Vec<Tensor> = r1.iter().map(pool).collect();
    let c2: Vec<Tensor> = p1.iter().map(|x| ops::conv2d(x, &p_c2).unwrap()).collect();
    let (b2, s2) = bn(&c2, "b2");
    let r2: Vec<Tensor> = b2.iter().zip(&p1).map(|(a, b)| ops::relu(&weldsign::elementwise_add(a, b).unwrap())).collect();
    let gap: Vec<Tensor> = r2.iter().map(|t| ops::global_avgpool(t).unwrap()).collect();

    let scale = 1.0 / images.len() as f32;
    let mut loss = 0.0f64;
    let mut d_fc_w = Tensor::zeros(w("fc.weight").shape().to_vec());
    let mut d_fc_b = Tensor::zeros(w("fc.bias").shape().to_vec());
    let mut d_sum = Vec::new();
    for (i, g) in gap.iter().enumerate() {
        let logits = ops::fully_connected(g, w("fc.weight"), Some(w("fc.bias"))).unwrap();
        let (l, dz) = smoothed_cross_entropy(&ops::softmax(&logits), labels[i], smoothing).unwrap();
        loss += l as f64 / images.len() as f64;
        let fc = ops::fully_connected_backward(g, w("fc.weight"), true, &dz.scale(scale)).unwrap();
        d_fc_w = weldsign::elementwise_add(&d_fc_w, &fc.weights).unwrap();
        d_fc_b = weldsign::elementwise_add(&d_fc_b, fc.bias.as_ref().unwrap()).unwrap();
        let d_r2 = ops::global_avgpool_backward(r2[i].shape(), &fc.input).unwrap();
        d_sum.push(ops::relu_backward(&r2[i], &d_r2).unwrap());
    }
    let g2 = ops::batchnorm_train_backward(&refs(&c2), &s2, w("b2.gamma"), &refs(&d_sum)).unwrap();
    let mut d_c2_w = Tensor::zeros(w("c2.weight").shape().to_vec());
    let mut d_b1 = Vec::new();
    let mut d_c1_w = Tensor::zeros(w("c1.weight").shape().to_vec());
    for i in 0..images.len() {
        let cg = ops::conv2d_backward(&p1[i], &p_c2, &g2.inputs[i], true).unwrap();
        d_c2_w = weldsign::elementwise_add(&d_c2_w, &cg.kernel).unwrap();
        let d_p1 = weldsign::elementwise_add(cg.input.as_ref().unwrap(), &d_sum[i]).unwrap();
        let d_r1 = ops::maxpool_backward(&r1[i], 2, 2, Padding::ZERO, &d_p1).unwrap();
        d_b1.push(ops::relu_backward(&r1[i], &d_r1).unwrap());
    }
    let g1 = ops::batchnorm_train_backward(&refs(&c1), &s1, w("b1.gamma"), &refs(&d_b1)).unwrap();
    for (x, d) in images.iter().zip(&g1.inputs) {
        let cg = ops::conv2d_backward(x, &p_c1, d, false).unwrap();
        d_c1_w = weldsign::elementwise_add(&d_c1_w, &cg.kernel).unwrap();
    }
    let grads = vec![
        ("c1.weight".to_string(), d_c1_w),
        ("b1.gamma".to_string(), g1.gamma),
        ("b1.beta".to_string(), g1.beta),
        ("c2.weight".to_string(), d_c2_w),
        ("b2.gamma".to_string(), g2.gamma),
        ("b2.beta".to_string(), g2.beta),
        ("fc.weight".to_string(), d_fc_w),
        ("fc.bias".to_string(), d_fc_b),
    ];
    (loss, grads)
}
