//! Spatial and channel enhancement block.
//!
//! The spatial integration half runs stride-1, size-preserving max pools of
//! several kernel sizes over the input and concatenates them (kernel 1 is the
//! identity branch). The channel weighting half squeezes the concatenated map
//! to a per-channel descriptor by global average pooling, excites it through
//! `FC → ReLU → FC → sigmoid`, and rescales every channel by its weight.

use crate::error::{Error, Result};
use crate::ops::{fully_connected, global_avgpool, maxpool, relu, sigmoid, Padding};
use crate::tensor::{concat_channels, Tensor};

pub const DEFAULT_PYRAMID: [usize; 4] = [1, 5, 9, 13];
pub const DEFAULT_REDUCTION: usize = 4;

/// Weights of the excitation layers. `w1` is `C'×(C'/r)` and `w2` is
/// `(C'/r)×C'`, where `C'` is the channel count after the pyramid.
#[derive(Clone, Copy, Debug)]
pub struct SceParams<'a> {
    pub pyramid: &'a [usize],
    pub w1: &'a Tensor,
    pub b1: Option<&'a Tensor>,
    pub w2: &'a Tensor,
    pub b2: Option<&'a Tensor>,
}

pub fn check_pyramid(pyramid: &[usize]) -> Result<()> {
    if pyramid.is_empty() {
        return Err(Error::invalid("sce", "empty pyramid"));
    }
    if pyramid.iter().any(|k| k % 2 == 0) {
        return Err(Error::invalid("sce", format!("pyramid kernels {pyramid:?} must be odd")));
    }
    if pyramid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sce", format!("pyramid kernels {pyramid:?} must ascend")));
    }
    Ok(())
}

/// Concatenation, in kernel order, of same-size max pools of `input`.
pub fn spatial_integration(input: &Tensor, pyramid: &[usize]) -> Result<Tensor> {
    check_pyramid(pyramid)?;
    input.hwc()?;
    let branches = pyramid
        .iter()
        .map(|&k| {
            if k == 1 {
                Ok(input.clone())
            } else {
                maxpool(input, k, 1, Padding::same(k))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = branches.iter().collect();
    concat_channels(&refs)
}

/// Per-channel weights `S = σ(W₂·δ(W₁·Z))`, shape `1×1×C'`.
pub fn channel_weights(input: &Tensor, p: &SceParams<'_>) -> Result<Tensor> {
    let (_, _, c) = input.hwc()?;
    let expected = p.w1.shape().first().copied().unwrap_or(0);
    if c != expected {
        return Err(Error::invalid(
            "channel_weights",
            format!("input has {c} channels, excitation expects {expected}"),
        ));
    }
    let z = global_avgpool(input)?;
    let hidden = relu(&fully_connected(&z, p.w1, p.b1)?);
    let s = fully_connected(&hidden, p.w2, p.b2)?;
    if s.len() != c {
        return Err(Error::invalid(
            "channel_weights",
            format!("excitation produces {} weights for {c} channels", s.len()),
        ));
    }
    Ok(sigmoid(&s))
}

/// Channel-wise multiplication `X = O·S`.
pub fn scale_channels(map: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (_, _, c) = map.hwc()?;
    if weights.len() != c {
        return Err(Error::ShapeMismatch {
            op: "scale_channels",
            left: map.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let s = weights.data();
    let mut out = map.data().to_vec();
    for px in out.chunks_exact_mut(c) {
        for (v, k) in px.iter_mut().zip(s) {
            *v *= k;
        }
    }
    Tensor::new(map.shape().to_vec(), out)
}

pub fn sce_forward(input: &Tensor, p: &SceParams<'_>) -> Result<Tensor> {
    let pyramid = spatial_integration(input, p.pyramid)?;
    let s = channel_weights(&pyramid, p)?;
    scale_channels(&pyramid, &s)
}

/// Parameter count of the excitation layers for `channels` input channels:
/// `(C'·C'/r + C'/r) + (C'/r·C' + C')` with biases, `C' = |pyramid|·C`.
pub fn sce_param_count(channels: usize, pyramid_len: usize, reduction: usize, bias: bool) -> usize {
    let wide = channels * pyramid_len;
    let hidden = wide / reduction;
    let b = usize::from(bias);
    (wide * hidden + b * hidden) + (hidden * wide + b * wide)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_validation() {
        assert!(check_pyramid(&DEFAULT_PYRAMID).is_ok());
        assert!(check_pyramid(&[1, 4]).is_err());
        assert!(check_pyramid(&[5, 1]).is_err());
        assert!(check_pyramid(&[]).is_err());
    }

    #[test]
    fn quadruples_channels() {
        let x = Tensor::zeros(vec![13, 13, 512]);
        assert_eq!(spatial_integration(&x, &DEFAULT_PYRAMID).unwrap().shape(), &[13, 13, 2048]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::full(vec![6, 5, 3], -1.25);
        let y = spatial_integration(&x, &DEFAULT_PYRAMID).unwrap();
        assert!(y.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn zero_excitation_gives_half() {
        let x = Tensor::from_fn(vec![4, 4, 8], |i| (i as f32 * 0.3).sin());
        let w1 = Tensor::zeros(vec![8, 2]);
        let w2 = Tensor::zeros(vec![2, 8]);
        let b1 = Tensor::zeros(vec![2]);
        let b2 = Tensor::zeros(vec![8]);
        let p = SceParams {
            pyramid: &[1],
            w1: &w1,
            b1: Some(&b1),
            w2: &w2,
            b2: Some(&b2),
        };
        let s = channel_weights(&x, &p).unwrap();
        assert_eq!(s.shape(), &[1, 1, 8]);
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(vec![4, 4, 8]);
        let w1 = Tensor::zeros(vec![16, 4]);
        let w2 = Tensor::zeros(vec![4, 16]);
        let p = SceParams {
            pyramid: &DEFAULT_PYRAMID,
            w1: &w1,
            b1: None,
            w2: &w2,
            b2: None,
        };
        assert!(channel_weights(&x, &p).is_err());
    }

    #[test]
    fn closed_form_count_for_512() {
        assert_eq!(sce_param_count(512, 4, 4, true), 2_099_712);
        assert_eq!(sce_param_count(512, 4, 4, false), 2_097_152);
    }
}
