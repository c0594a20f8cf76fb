//! Batch normalization over the channel axis.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

const BLOCK_PIXELS: usize = 64;

#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub running_mean: &'a Tensor,
    pub running_var: &'a Tensor,
    pub eps: f32,
}

fn channels_of(t: &Tensor) -> usize {
    *t.shape().last().expect("rank ≥ 1")
}

fn check_len(op: &'static str, c: usize, named: &[(&str, &Tensor)]) -> Result<()> {
    for (name, t) in named {
        if t.len() != c {
            return Err(Error::invalid(
                op,
                format!("{name} has length {} but input has {c} channels", t.len()),
            ));
        }
    }
    Ok(())
}

/// Inference-mode normalization with running statistics.
pub fn batchnorm_infer(input: &Tensor, p: &BatchNormParams<'_>) -> Result<Tensor> {
    let c = channels_of(input);
    check_len(
        "batchnorm_infer",
        c,
        &[
            ("gamma", p.gamma),
            ("beta", p.beta),
            ("running_mean", p.running_mean),
            ("running_var", p.running_var),
        ],
    )?;
    let (scale, shift): (Vec<f32>, Vec<f32>) = (0..c)
        .map(|i| {
            let s = p.gamma.data()[i] / (p.running_var.data()[i] + p.eps).sqrt();
            (s, p.beta.data()[i] - s * p.running_mean.data()[i])
        })
        .unzip();
    let mut out = input.data().to_vec();
    for px in out.chunks_exact_mut(c) {
        for ((v, s), b) in px.iter_mut().zip(&scale).zip(&shift) {
            *v = *v * s + b;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Elements per channel across the whole batch.
    pub count: usize,
}

impl BatchStats {
    /// Variance with Bessel's correction, the value folded into running stats.
    pub fn unbiased_var(&self) -> Vec<f32> {
        let n = self.count as f32;
        let k = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * k).collect()
    }
}

fn batch_channels(op: &'static str, batch: &[&Tensor]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid(op, "empty batch"))?;
    for t in batch {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    Ok(channels_of(first))
}

/// Per-channel sums of `f(value, channel)`: f32 partials over short runs of
/// pixels, flushed into f64 totals.
fn channel_sums(batch: &[&Tensor], c: usize, f: impl Fn(f32, usize) -> f32) -> Vec<f64> {
    let mut total = vec![0.0f64; c];
    let mut part = vec![0.0f32; c];
    for t in batch {
        for block in t.data().chunks(c * BLOCK_PIXELS) {
            part.fill(0.0);
            for px in block.chunks_exact(c) {
                for (i, (p, &v)) in part.iter_mut().zip(px).enumerate() {
                    *p += f(v, i);
                }
            }
            for (t, &p) in total.iter_mut().zip(&part) {
                *t += p as f64;
            }
        }
    }
    total
}

/// Training-mode forward: normalizes with the batch's own statistics.
pub fn batchnorm_train_forward(
    batch: &[&Tensor],
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Vec<Tensor>, BatchStats)> {
    let c = batch_channels("batchnorm_train_forward", batch)?;
    check_len("batchnorm_train_forward", c, &[("gamma", gamma), ("beta", beta)])?;
    let count = batch.len() * batch[0].len() / c;
    let n = count as f64;
    // Two passes: the mean first, then squared deviations from it, which
    // avoids the cancellation of E[x²] − mean² when |mean| ≫ std.
    let mean: Vec<f64> = channel_sums(batch, c, |v, _| v).iter().map(|s| s / n).collect();
    let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let var: Vec<f64> = channel_sums(batch, c, |v, i| {
        let d = v - mean32[i];
        d * d
    })
    .iter()
    .map(|q| q / n)
    .collect();
    let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
    let mean = mean32;

    let scale: Vec<f32> = gamma.data().iter().zip(&inv_std).map(|(g, s)| g * s).collect();
    let outputs = batch
        .iter()
        .map(|t| {
            let mut out = t.data().to_vec();
            for px in out.chunks_exact_mut(c) {
                for (((v, s), b), m) in px.iter_mut().zip(&scale).zip(beta.data()).zip(&mean) {
                    *v = (*v - m) * s + b;
                }
            }
            Tensor::new(t.shape().to_vec(), out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        outputs,
        BatchStats {
            mean,
            var: var.iter().map(|&v| v as f32).collect(),
            inv_std,
            count,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub inputs: Vec<Tensor>,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Backward of [`batchnorm_train_forward`]; `batch` is the forward input.
pub fn batchnorm_train_backward(
    batch: &[&Tensor],
    stats: &BatchStats,
    gamma: &Tensor,
    grad_out: &[&Tensor],
) -> Result<BatchNormGrads> {
    let c = batch_channels("batchnorm_train_backward", batch)?;
    if grad_out.len() != batch.len() {
        return Err(Error::invalid(
            "batchnorm_train_backward",
            format!("{} gradients for {} inputs", grad_out.len(), batch.len()),
        ));
    }
    for (x, g) in batch.iter().zip(grad_out) {
        if x.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_train_backward",
                left: x.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    let mut dbeta = vec![0.0f64; c];
    let mut dgamma = vec![0.0f64; c];
    let mut part = vec![0.0f32; 2 * c];
    for (x, g) in batch.iter().zip(grad_out) {
        for (xb, gb) in x.data().chunks(c * BLOCK_PIXELS).zip(g.data().chunks(c * BLOCK_PIXELS)) {
            let (pb, pg) = part.split_at_mut(c);
            pb.fill(0.0);
            pg.fill(0.0);
            for (xp, gp) in xb.chunks_exact(c).zip(gb.chunks_exact(c)) {
                let terms = xp.iter().zip(gp).zip(&stats.mean).zip(&stats.inv_std);
                for ((b, dg), (((&xv, &gv), &m), &is)) in pb.iter_mut().zip(pg.iter_mut()).zip(terms) {
                    *b += gv;
                    *dg += gv * (xv - m) * is;
                }
            }
            for i in 0..c {
                dbeta[i] += pb[i] as f64;
                dgamma[i] += pg[i] as f64;
            }
        }
    }
    let n = stats.count as f32;
    let db: Vec<f32> = dbeta.iter().map(|&v| v as f32).collect();
    let dg: Vec<f32> = dgamma.iter().map(|&v| v as f32).collect();
    let k: Vec<f32> = (0..c)
        .map(|i| gamma.data()[i] * stats.inv_std[i] / n)
        .collect();
    // dx = k·(n·g − Σg − x̂·Σ(g·x̂)) is affine in (g, x) per channel.
    let coef: Vec<[f32; 3]> = (0..c)
        .map(|i| {
            let kd = k[i] * dg[i] * stats.inv_std[i];
            [k[i] * n, -kd, kd * stats.mean[i] - k[i] * db[i]]
        })
        .collect();
    let inputs = batch
        .iter()
        .zip(grad_out)
        .map(|(x, g)| {
            let mut dx = vec![0.0f32; x.len()];
            for ((dp, xp), gp) in dx
                .chunks_exact_mut(c)
                .zip(x.data().chunks_exact(c))
                .zip(g.data().chunks_exact(c))
            {
                for ((d, (&xv, &gv)), &[a, b, o]) in dp.iter_mut().zip(xp.iter().zip(gp)).zip(&coef) {
                    *d = a * gv + b * xv + o;
                }
            }
            Tensor::new(x.shape().to_vec(), dx)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchNormGrads {
        inputs,
        gamma: Tensor::vector(dg),
        beta: Tensor::vector(db),
    })
}

/// Exponential moving update of running statistics.
pub fn update_running_stats(
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    stats: &BatchStats,
    momentum: f32,
) {
    let unbiased = stats.unbiased_var();
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = (1.0 - momentum) * *r + momentum * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&unbiased) {
        *r = (1.0 - momentum) * *r + momentum * v;
    }
}
