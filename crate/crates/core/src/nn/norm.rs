//! Channel layer normalization, global response normalization and GELU.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::graph::{Graph, Var};
use crate::ops::permute_tensor;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const GRN_EPS: f64 = 1e-6;

/// How a GRN layer pools the per-channel response.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrnPooling {
    /// L2 norm of each channel over all frames.
    Global,
    /// Magnitude of each channel within its own frame; causal.
    PerFrame,
}

fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Vec<f64>) {
    let (batch, ch, frames) = x.dims3();
    let mut out = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; batch * frames];
    for b in 0..batch {
        let base = b * ch * frames;
        for t in 0..frames {
            let mean = (0..ch).map(|c| x.data()[base + c * frames + t]).sum::<f64>() / ch as f64;
            let var = (0..ch)
                .map(|c| (x.data()[base + c * frames + t] - mean).powi(2))
                .sum::<f64>()
                / ch as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[b * frames + t] = r;
            for c in 0..ch {
                let i = base + c * frames + t;
                out[i] = (x.data()[i] - mean) * r * gamma.data()[c] + beta.data()[c];
            }
        }
    }
    (Tensor::new(x.shape(), out), inv_std)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_slope(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// `γ·(x·n(x)) + β + x` with `n` the pooled response divided by its
/// channel mean.
fn grn_global_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (batch, ch, frames) = x.dims3();
    let mut out = x.clone();
    for b in 0..batch {
        let norms = channel_norms(x, b);
        let mean = norms.iter().sum::<f64>() / ch as f64;
        for c in 0..ch {
            let n = norms[c] / (mean + GRN_EPS);
            for t in 0..frames {
                let i = (b * ch + c) * frames + t;
                out.data_mut()[i] += gamma.data()[c] * x.data()[i] * n + beta.data()[c];
            }
        }
    }
    out
}

fn channel_norms(x: &Tensor, b: usize) -> Vec<f64> {
    let (_, ch, frames) = x.dims3();
    (0..ch)
        .map(|c| {
            let row = &x.data()[(b * ch + c) * frames..(b * ch + c + 1) * frames];
            row.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect()
}

/// Gradients `(dx, dγ, dβ)` of [`grn_global_forward`].
fn grn_global_backward(g: &Tensor, x: &Tensor, gamma: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, ch, frames) = x.dims3();
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];
    for b in 0..batch {
        let norms = channel_norms(x, b);
        let denom = norms.iter().sum::<f64>() / ch as f64 + GRN_EPS;
        let mut d_n = vec![0.0; ch];
        for c in 0..ch {
            let n = norms[c] / denom;
            for t in 0..frames {
                let i = (b * ch + c) * frames + t;
                let (gv, xv) = (g.data()[i], x.data()[i]);
                dgamma[c] += gv * xv * n;
                dbeta[c] += gv;
                dx[i] += gv * (1.0 + gamma.data()[c] * n);
                d_n[c] += gv * gamma.data()[c] * xv;
            }
        }
        // n_c = G_c / (mean(G) + eps)
        let cross = d_n.iter().zip(&norms).map(|(d, n)| d * n).sum::<f64>() / (denom * denom);
        for c in 0..ch {
            if norms[c] == 0.0 {
                continue;
            }
            let d_norm = d_n[c] / denom - cross / ch as f64;
            for t in 0..frames {
                let i = (b * ch + c) * frames + t;
                dx[i] += d_norm * x.data()[i] / norms[c];
            }
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(&[ch], dgamma),
        Tensor::new(&[ch], dbeta),
    )
}

impl Graph {
    /// Normalize over channels independently for every `(batch, frame)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (value, _) = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta));
        self.op(&[x, gamma, beta], value, |g, inputs, _| {
            let (x, gamma) = (inputs[0], inputs[1]);
            let (batch, ch, frames) = x.dims3();
            let (_, inv_std) = layer_norm_forward(x, gamma, inputs[2]);
            let mut dx = vec![0.0; x.numel()];
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            let mut xhat = vec![0.0; ch];
            let mut dxhat = vec![0.0; ch];
            for b in 0..batch {
                let base = b * ch * frames;
                for t in 0..frames {
                    let r = inv_std[b * frames + t];
                    let mean =
                        (0..ch).map(|c| x.data()[base + c * frames + t]).sum::<f64>() / ch as f64;
                    for c in 0..ch {
                        let i = base + c * frames + t;
                        xhat[c] = (x.data()[i] - mean) * r;
                        dxhat[c] = g.data()[i] * gamma.data()[c];
                        dgamma[c] += g.data()[i] * xhat[c];
                        dbeta[c] += g.data()[i];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / ch as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / ch as f64;
                    for c in 0..ch {
                        dx[base + c * frames + t] = r * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
            }
            vec![
                Some(Tensor::new(x.shape(), dx)),
                Some(Tensor::new(&[ch], dgamma)),
                Some(Tensor::new(&[ch], dbeta)),
            ]
        })
    }

    /// Exact (erf) Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, |x, _| gelu_slope(x))
    }

    /// Global response normalization with a residual pass-through.
    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, pooling: GrnPooling) -> Var {
        match pooling {
            GrnPooling::Global => self.grn_global(x, gamma, beta),
            GrnPooling::PerFrame => {
                // each frame becomes its own single-frame sequence
                let (b, c, t) = self.value(x).dims3();
                let p = self.permute(x, &[0, 2, 1]);
                let r = self.reshape(p, &[b * t, c, 1]);
                let y = self.grn_global(r, gamma, beta);
                let y = self.reshape(y, &[b, t, c]);
                self.permute(y, &[0, 2, 1])
            }
        }
    }

    fn grn_global(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let value = grn_global_forward(self.value(x), self.value(gamma), self.value(beta));
        self.op(&[x, gamma, beta], value, |g, inputs, _| {
            let (dx, dg, db) = grn_global_backward(g, inputs[0], inputs[1]);
            vec![Some(dx), Some(dg), Some(db)]
        })
    }
}

/// Plain-tensor GRN used by tests as a reference.
pub fn grn_reference(x: &Tensor, gamma: &Tensor, beta: &Tensor, pooling: GrnPooling) -> Tensor {
    match pooling {
        GrnPooling::Global => grn_global_forward(x, gamma, beta),
        GrnPooling::PerFrame => {
            let (b, c, t) = x.dims3();
            let p = permute_tensor(x, &[0, 2, 1]).reshape(&[b * t, c, 1]);
            let y = grn_global_forward(&p, gamma, beta).reshape(&[b, t, c]);
            permute_tensor(&y, &[0, 2, 1])
        }
    }
}
