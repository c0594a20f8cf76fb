//! Dense `f32` tensors in channels-last layout.
//!
//! Activations are rank 3 (`H×W×C`) with channel the fastest-varying index,
//! so element `(h, w, c)` lives at `(h·W + w)·C + c`. Vectors are rank 1 and
//! convolution kernels rank 4 (`K×K×C_in/g×C_out`). A batch is a slice of
//! tensors, never a fourth activation dimension.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "all dims must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} elements but data has {}", n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for untrusted input.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("valid tensor shape");
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("valid tensor shape");
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(H, W, C)` of a rank-3 activation.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected rank-3 H×W×C tensor".into(),
            }),
        }
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, c: usize) -> f32 {
        let (width, ch) = (self.shape[1], self.shape[2]);
        self.data[(h * width + w) * ch + c]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, k: f32) -> Self {
        self.map(|x| x * k)
    }

    /// Copy of channels `start..start + len` of a rank-3 tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let mut data = Vec::with_capacity(h * w * len);
        for px in self.data.chunks_exact(c) {
            data.extend_from_slice(&px[start..start + len]);
        }
        Self::new(vec![h, w, len], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "elementwise_add",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Stack rank-3 tensors along the channel axis, in order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (h, w, _) = first.hwc()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (ph, pw, pc) = p.hwc()?;
        if (ph, pw) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: first.shape.clone(),
                right: p.shape.clone(),
            });
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(h * w * total);
    for px in 0..h * w {
        for (p, &pc) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[px * pc..(px + 1) * pc]);
        }
    }
    Tensor::new(vec![h, w, total], data)
}
