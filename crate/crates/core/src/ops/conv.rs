//! Direct 2-D convolution over channels-last tensors, with channel groups.
//!
//! Kernel layout is `K×K×(C_in/g)×C_out`: for tap `(ky, kx)` and in-group
//! input channel `i`, the `C_out` weights are contiguous, and output channel
//! `o` belongs to group `o / (C_out/g)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const ZERO: Padding = Padding::uniform(0);

    pub const fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Size-preserving padding for an odd kernel at stride 1.
    pub const fn same(kernel: usize) -> Self {
        Self::uniform((kernel - 1) / 2)
    }
}

/// Output extent along one axis, or an error when the window does not fit.
pub fn output_extent(
    input: usize,
    pad_lo: usize,
    pad_hi: usize,
    kernel: usize,
    stride: usize,
) -> Result<usize> {
    let padded = input + pad_lo + pad_hi;
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid("output_extent", "kernel and stride must be positive"));
    }
    if padded < kernel {
        return Err(Error::invalid(
            "output_extent",
            format!("padded extent {padded} smaller than kernel {kernel}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn output_hw(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: Padding,
) -> Result<(usize, usize)> {
    Ok((
        output_extent(h, pad.top, pad.bottom, kernel, stride)?,
        output_extent(w, pad.left, pad.right, kernel, stride)?,
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams<'a> {
    pub kernel: &'a Tensor,
    pub bias: Option<&'a Tensor>,
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_h: usize,
    in_w: usize,
    cin: usize,
    out_h: usize,
    out_w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: Padding,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    fn new(input: &Tensor, p: &ConvParams<'_>) -> Result<Self> {
        let (in_h, in_w, cin) = input.hwc()?;
        let &[k, kw, cin_g, cout] = p.kernel.shape() else {
            return Err(Error::invalid("conv2d", "kernel must be rank 4 K×K×C_in/g×C_out"));
        };
        if k != kw {
            return Err(Error::invalid("conv2d", format!("kernel {k}×{kw} is not square")));
        }
        let g = p.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("groups {g} must divide C_in {cin} and C_out {cout}"),
            ));
        }
        if cin / g != cin_g {
            return Err(Error::invalid(
                "conv2d",
                format!("input has {cin} channels but kernel expects {} ({g} groups × {cin_g})", g * cin_g),
            ));
        }
        if let Some(b) = p.bias {
            if b.len() != cout {
                return Err(Error::invalid(
                    "conv2d",
                    format!("bias length {} != C_out {cout}", b.len()),
                ));
            }
        }
        let (out_h, out_w) = output_hw(in_h, in_w, k, p.stride, p.padding)?;
        Ok(Self {
            in_h,
            in_w,
            cin,
            out_h,
            out_w,
            cout,
            k,
            stride: p.stride,
            pad: p.padding,
            groups: g,
            cin_g,
            cout_g: cout / g,
        })
    }

    /// Visit every run of output pixels along one row that share a tap with
    /// in-bounds input pixels: `f(first_out_px, first_in_px, count, tap)`.
    /// Consecutive output pixels advance the input pixel by `stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (s, left) = (self.stride, self.pad.left);
        for oh in 0..self.out_h {
            for ky in 0..self.k {
                let ih = (oh * s + ky) as isize - self.pad.top as isize;
                if ih < 0 || ih as usize >= self.in_h {
                    continue;
                }
                let ih = ih as usize;
                for kx in 0..self.k {
                    // ow·s + kx − left ∈ [0, in_w)
                    let lo = left.saturating_sub(kx).div_ceil(s);
                    let hi = ((self.in_w + left).saturating_sub(kx)).div_ceil(s).min(self.out_w);
                    if lo >= hi {
                        continue;
                    }
                    let iw = lo * s + kx - left;
                    f(oh * self.out_w + lo, ih * self.in_w + iw, hi - lo, ky * self.k + kx);
                }
            }
        }
    }

    /// Each input channel feeds `cout_g` outputs and nothing mixes channels
    /// within a group once the input is repeated per output.
    fn is_channelwise(&self) -> bool {
        self.cin_g == 1
    }
}

/// Input with every channel repeated `m` times, so a `cin_g = 1` grouped
/// conv becomes a channelwise one.
fn repeat_channels(x: &[f32], m: usize) -> Vec<f32> {
    if m == 1 {
        return x.to_vec();
    }
    let mut out = Vec::with_capacity(x.len() * m);
    for &v in x {
        out.extend(std::iter::repeat_n(v, m));
    }
    out
}

/// `out[o] += Σ_i x[i]·w[i][o]` restricted to matching groups.
#[inline]
fn accumulate(out: &mut [f32], x: &[f32], w: &[f32], g: &Geometry) {
    if g.groups == 1 {
        for (ci, &xv) in x.iter().enumerate() {
            let row = &w[ci * g.cout..(ci + 1) * g.cout];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xv * wv;
            }
        }
    } else {
        for j in 0..g.groups {
            let outs = &mut out[j * g.cout_g..(j + 1) * g.cout_g];
            for i in 0..g.cin_g {
                let xv = x[j * g.cin_g + i];
                let row = &w[i * g.cout + j * g.cout_g..][..g.cout_g];
                for (o, &wv) in outs.iter_mut().zip(row) {
                    *o += xv * wv;
                }
            }
        }
    }
}

pub fn conv2d(input: &Tensor, p: &ConvParams<'_>) -> Result<Tensor> {
    let g = Geometry::new(input, p)?;
    let c = g.cout;
    let mut out = vec![0.0f32; g.out_h * g.out_w * c];
    if let Some(b) = p.bias {
        for px in out.chunks_exact_mut(c) {
            px.copy_from_slice(b.data());
        }
    }
    let w = p.kernel.data();
    let tap_len = g.cin_g * c;
    if g.is_channelwise() {
        let x = repeat_channels(input.data(), g.cout_g);
        g.for_each_run(|o0, i0, n, tap| {
            let wt = &w[tap * c..(tap + 1) * c];
            let outs = out[o0 * c..(o0 + n) * c].chunks_exact_mut(c);
            let ins = x[i0 * c..].chunks(c * g.stride);
            for (op, ip) in outs.zip(ins) {
                for ((o, &xv), &wv) in op.iter_mut().zip(ip).zip(wt) {
                    *o += xv * wv;
                }
            }
        });
    } else {
        let x = input.data();
        g.for_each_run(|o0, i0, n, tap| {
            let wt = &w[tap * tap_len..(tap + 1) * tap_len];
            for j in 0..n {
                let (op, ip) = (o0 + j, i0 + j * g.stride);
                accumulate(&mut out[op * c..(op + 1) * c], &x[ip * g.cin..(ip + 1) * g.cin], wt, &g);
            }
        });
    }
    Tensor::new(vec![g.out_h, g.out_w, c], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward(
    input: &Tensor,
    p: &ConvParams<'_>,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let g = Geometry::new(input, p)?;
    if grad_out.shape() != [g.out_h, g.out_w, g.cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: vec![g.out_h, g.out_w, g.cout],
            right: grad_out.shape().to_vec(),
        });
    }
    let w = p.kernel.data();
    let dy = grad_out.data();
    let c = g.cout;
    let tap_len = g.cin_g * c;
    let mut dw = vec![0.0f32; w.len()];
    let mut dx = Vec::new();

    if g.is_channelwise() {
        let m = g.cout_g;
        let x = repeat_channels(input.data(), m);
        let mut dxe = if need_input_grad { vec![0.0f32; x.len()] } else { Vec::new() };
        g.for_each_run(|o0, i0, n, tap| {
            let dyr = dy[o0 * c..(o0 + n) * c].chunks_exact(c);
            let dwt = &mut dw[tap * c..(tap + 1) * c];
            for (gp, ip) in dyr.clone().zip(x[i0 * c..].chunks(c * g.stride)) {
                for ((d, &xv), &gv) in dwt.iter_mut().zip(ip).zip(gp) {
                    *d += xv * gv;
                }
            }
            if need_input_grad {
                let wt = &w[tap * c..(tap + 1) * c];
                for (gp, dp) in dyr.zip(dxe[i0 * c..].chunks_mut(c * g.stride)) {
                    for ((d, &wv), &gv) in dp.iter_mut().zip(wt).zip(gp) {
                        *d += wv * gv;
                    }
                }
            }
        });
        if need_input_grad {
            dx = if m == 1 {
                dxe
            } else {
                dxe.chunks_exact(m).map(|r| r.iter().sum()).collect()
            };
        }
    } else {
        let x = input.data();
        if need_input_grad {
            dx = vec![0.0f32; x.len()];
        }
        g.for_each_run(|o0, i0, n, tap| {
            let dwt = &mut dw[tap * tap_len..(tap + 1) * tap_len];
            let wt = &w[tap * tap_len..(tap + 1) * tap_len];
            for j in 0..n {
                let (out_px, in_px) = (o0 + j, i0 + j * g.stride);
                let dyp = &dy[out_px * c..(out_px + 1) * c];
                let xp = &x[in_px * g.cin..(in_px + 1) * g.cin];
                if g.groups == 1 {
                    for (ci, &xv) in xp.iter().enumerate() {
                        let row = &mut dwt[ci * c..(ci + 1) * c];
                        for (d, &gy) in row.iter_mut().zip(dyp) {
                            *d += xv * gy;
                        }
                    }
                    if need_input_grad {
                        let dxp = &mut dx[in_px * g.cin..(in_px + 1) * g.cin];
                        for (ci, d) in dxp.iter_mut().enumerate() {
                            let row = &wt[ci * c..(ci + 1) * c];
                            *d += row.iter().zip(dyp).map(|(a, b)| a * b).sum::<f32>();
                        }
                    }
                } else {
                    for grp in 0..g.groups {
                        let dyg = &dyp[grp * g.cout_g..(grp + 1) * g.cout_g];
                        for i in 0..g.cin_g {
                            let ci = grp * g.cin_g + i;
                            let off = i * c + grp * g.cout_g;
                            let xv = xp[ci];
                            for (d, &gy) in dwt[off..off + g.cout_g].iter_mut().zip(dyg) {
                                *d += xv * gy;
                            }
                            if need_input_grad {
                                let wrow = &wt[off..off + g.cout_g];
                                dx[in_px * g.cin + ci] += wrow.iter().zip(dyg).map(|(a, b)| a * b).sum::<f32>();
                            }
                        }
                    }
                }
            }
        });
    }

    let bias = p.bias.map(|_| {
        let mut db = vec![0.0f32; g.cout];
        for px in dy.chunks_exact(g.cout) {
            for (d, &v) in db.iter_mut().zip(px) {
                *d += v;
            }
        }
        Tensor::vector(db)
    });
    Ok(ConvGrads {
        input: if need_input_grad {
            Some(Tensor::new(input.shape().to_vec(), dx)?)
        } else {
            None
        },
        kernel: Tensor::new(p.kernel.shape().to_vec(), dw)?,
        bias,
    })
}

/// `K²·(C_in/g)·C_out`, plus `C_out` with a bias.
pub fn conv_param_count(kernel: usize, c_in: usize, c_out: usize, groups: usize, bias: bool) -> usize {
    kernel * kernel * (c_in / groups) * c_out + if bias { c_out } else { 0 }
}
