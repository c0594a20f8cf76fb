use crate::error::{Error, Result};
use crate::ops::conv::{output_hw, Padding};
use crate::tensor::Tensor;

fn check_pool_padding(kernel: usize, pad: Padding) -> Result<()> {
    let max_pad = pad.top.max(pad.bottom).max(pad.left).max(pad.right);
    if kernel > 0 && max_pad >= kernel {
        return Err(Error::invalid(
            "maxpool",
            format!("padding {max_pad} must be smaller than kernel {kernel}"),
        ));
    }
    Ok(())
}

/// Window maxima. Padded positions hold −∞ and so never win.
pub fn maxpool(input: &Tensor, kernel: usize, stride: usize, pad: Padding) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    check_pool_padding(kernel, pad)?;
    let (oh, ow) = output_hw(h, w, kernel, stride, pad)?;
    let x = input.data();
    let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
    for y in 0..oh {
        let y0 = (y * stride) as isize - pad.top as isize;
        let ys = y0.max(0) as usize..((y0 + kernel as isize).min(h as isize)) as usize;
        for xo in 0..ow {
            let x0 = (xo * stride) as isize - pad.left as isize;
            let xs = x0.max(0) as usize..((x0 + kernel as isize).min(w as isize)) as usize;
            let dst = &mut out[(y * ow + xo) * c..(y * ow + xo + 1) * c];
            for iy in ys.clone() {
                for ix in xs.clone() {
                    let src = &x[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        if s > *d {
                            *d = s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Routes each output gradient to the first maximal element of its window.
pub fn maxpool_backward(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    pad: Padding,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    check_pool_padding(kernel, pad)?;
    let (oh, ow) = output_hw(h, w, kernel, stride, pad)?;
    if grad_out.shape() != [oh, ow, c] {
        return Err(Error::ShapeMismatch {
            op: "maxpool_backward",
            left: vec![oh, ow, c],
            right: grad_out.shape().to_vec(),
        });
    }
    let x = input.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0f32; x.len()];
    let mut best = vec![0usize; c];
    let mut best_val = vec![f32::NEG_INFINITY; c];
    for y in 0..oh {
        let y0 = (y * stride) as isize - pad.top as isize;
        let ys = y0.max(0) as usize..((y0 + kernel as isize).min(h as isize)) as usize;
        for xo in 0..ow {
            let x0 = (xo * stride) as isize - pad.left as isize;
            let xs = x0.max(0) as usize..((x0 + kernel as isize).min(w as isize)) as usize;
            best_val.fill(f32::NEG_INFINITY);
            for iy in ys.clone() {
                for ix in xs.clone() {
                    let base = (iy * w + ix) * c;
                    for ch in 0..c {
                        if x[base + ch] > best_val[ch] {
                            best_val[ch] = x[base + ch];
                            best[ch] = base + ch;
                        }
                    }
                }
            }
            let g = &dy[(y * ow + xo) * c..(y * ow + xo + 1) * c];
            for ch in 0..c {
                dx[best[ch]] += g[ch];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), dx)
}

/// Per-channel mean over all spatial positions; output is `1×1×C`.
pub fn global_avgpool(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let mut acc = vec![0.0f64; c];
    for px in input.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v as f64;
        }
    }
    let n = (h * w) as f64;
    Tensor::new(vec![1, 1, c], acc.iter().map(|a| (a / n) as f32).collect())
}

pub fn global_avgpool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[h, w, c] = input_shape else {
        return Err(Error::invalid("global_avgpool_backward", "input must be rank 3"));
    };
    if grad_out.len() != c {
        return Err(Error::ShapeMismatch {
            op: "global_avgpool_backward",
            left: vec![1, 1, c],
            right: grad_out.shape().to_vec(),
        });
    }
    let k = 1.0 / (h * w) as f32;
    let g: Vec<f32> = grad_out.data().iter().map(|v| v * k).collect();
    let mut dx = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        dx.extend_from_slice(&g);
    }
    Tensor::new(vec![h, w, c], dx)
}

/// Nearest-neighbour 2× upsampling: `out(h, w) = in(h/2, w/2)`.
pub fn upsample_nearest_2x(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let x = input.data();
    let mut out = Vec::with_capacity(4 * h * w * c);
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let src = ((oy / 2) * w + ox / 2) * c;
            out.extend_from_slice(&x[src..src + c]);
        }
    }
    Tensor::new(vec![2 * h, 2 * w, c], out)
}
