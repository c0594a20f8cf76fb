use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output shape convention: a `1×1×N` input yields `1×1×M`, anything else a
/// length-`M` vector.
fn fc_out_shape(input: &Tensor, m: usize) -> Vec<usize> {
    match input.shape() {
        [1, 1, _] => vec![1, 1, m],
        _ => vec![m],
    }
}

fn fc_dims(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize)> {
    let &[n, m] = weights.shape() else {
        return Err(Error::invalid("fully_connected", "weights must be rank 2 N×M"));
    };
    if input.len() != n {
        return Err(Error::invalid(
            "fully_connected",
            format!("input has {} elements, weights expect {n}", input.len()),
        ));
    }
    if let Some(b) = bias {
        if b.len() != m {
            return Err(Error::invalid(
                "fully_connected",
                format!("bias length {} != {m}", b.len()),
            ));
        }
    }
    Ok((n, m))
}

/// `out_j = Σ_i x_i·W_ij + b_j` with `W` stored row-major `N×M`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, m) = fc_dims(input, weights, bias)?;
    let mut out = match bias {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; m],
    };
    for (&x, row) in input.data().iter().zip(weights.data().chunks_exact(m)) {
        for (o, &w) in out.iter_mut().zip(row) {
            *o += x * w;
        }
    }
    Tensor::new(fc_out_shape(input, m), out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    has_bias: bool,
    grad_out: &Tensor,
) -> Result<LinearGrads> {
    let (n, m) = fc_dims(input, weights, None)?;
    if grad_out.len() != m {
        return Err(Error::invalid(
            "fully_connected_backward",
            format!("gradient has {} elements, expected {m}", grad_out.len()),
        ));
    }
    let dy = grad_out.data();
    let mut dw = Vec::with_capacity(n * m);
    let mut dx = Vec::with_capacity(n);
    for (&x, row) in input.data().iter().zip(weights.data().chunks_exact(m)) {
        dw.extend(dy.iter().map(|g| x * g));
        dx.push(row.iter().zip(dy).map(|(w, g)| w * g).sum());
    }
    Ok(LinearGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weights: Tensor::new(vec![n, m], dw)?,
        bias: has_bias.then(|| Tensor::vector(dy.to_vec())),
    })
}

/// Both addends of `a + b` receive the upstream gradient unchanged.
pub fn add_backward(grad_out: &Tensor) -> (Tensor, Tensor) {
    (grad_out.clone(), grad_out.clone())
}
