//! Elementwise, reduction and layout operations on a [`Graph`].

use std::f64::consts::PI;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Split `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Distance of `x` from the nearest multiple of 2π.
pub fn anti_wrap(x: f64) -> f64 {
    (x - 2.0 * PI * (x / (2.0 * PI)).round()).abs()
}

fn anti_wrap_slope(x: f64) -> f64 {
    let r = x - 2.0 * PI * (x / (2.0 * PI)).round();
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph {
    /// Elementwise map with derivative `df(x, y)`.
    pub fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.op(&[x], value, move |g, inputs, out| {
            let x = inputs[0];
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(x.shape(), data))]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.op(&[a, b], value, |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.op(&[a, b], value, |g, _, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.op(&[a, b], value, |g, inputs, _| {
            vec![
                Some(g.zip_map(inputs[1], |g, y| g * y)),
                Some(g.zip_map(inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    /// `exp(min(x, ln(ceiling)))`; saturated entries pass no gradient.
    pub fn exp_clamped(&mut self, x: Var, ceiling: f64) -> Var {
        let limit = ceiling.ln();
        self.unary(
            x,
            move |v| v.min(limit).exp(),
            move |x, y| if x > limit { 0.0 } else { y },
        )
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, |x, _| -x.sin())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, move |v| (v + eps).sqrt(), |_, y| 0.5 / y)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(
            x,
            move |v| v.max(floor),
            move |x, _| if x >= floor { 1.0 } else { 0.0 },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v >= 0.0 { v } else { slope * v },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    /// `|x − 2π·round(x/2π)|`, the distance to the nearest multiple of 2π.
    pub fn anti_wrap(&mut self, x: Var) -> Var {
        self.unary(x, anti_wrap, |x, _| anti_wrap_slope(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.op(&[x], value, |g, inputs, _| {
            vec![Some(Tensor::full(inputs[0].shape(), g.item()))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let value = terms
            .iter()
            .map(|&(w, v)| w * self.value(v).item())
            .sum::<f64>();
        let weights: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let parents: Vec<Var> = terms.iter().map(|t| t.1).collect();
        self.op(&parents, Tensor::scalar(value), move |g, _, _| {
            weights
                .iter()
                .map(|&w| Some(Tensor::scalar(w * g.item())))
                .collect()
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.op(&[x], value, |g, inputs, _| {
            vec![Some(g.clone().reshape(inputs[0].shape()))]
        })
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        for s in &shapes {
            assert_eq!(s.len(), out_shape.len());
            for (d, (&a, &b)) in s.iter().zip(&out_shape).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {shapes:?}");
            }
        }
        let (outer, total, inner) = split_axis(&out_shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&p, s) in parts.iter().zip(&shapes) {
            let len = s[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = &mut data[(o * total + offset) * inner..(o * total + offset + len) * inner];
                dst.copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        self.op(parts, Tensor::new(&out_shape, data), move |g, inputs, _| {
            let mut offset = 0;
            lens.iter()
                .zip(inputs)
                .map(|(&len, input)| {
                    let mut gd = vec![0.0; input.numel()];
                    for o in 0..outer {
                        gd[o * len * inner..(o + 1) * len * inner].copy_from_slice(
                            &g.data()[(o * total + offset) * inner
                                ..(o * total + offset + len) * inner],
                        );
                    }
                    offset += len;
                    Some(Tensor::new(input.shape(), gd))
                })
                .collect()
        })
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, total, inner) = split_axis(&shape, axis);
        assert!(start + len <= total, "slice out of range");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.op(&[x], Tensor::new(&out_shape, data), move |g, inputs, _| {
            let mut gd = vec![0.0; inputs[0].numel()];
            for o in 0..outer {
                gd[(o * total + start) * inner..(o * total + start + len) * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(inputs[0].shape(), gd))]
        })
    }

    /// Forward difference `x[i+1] − x[i]` along `axis`.
    pub fn diff(&mut self, x: Var, axis: usize) -> Var {
        let len = self.shape(x)[axis];
        assert!(len >= 2, "diff needs at least two entries along axis {axis}");
        let hi = self.slice(x, axis, 1, len - 1);
        let lo = self.slice(x, axis, 0, len - 1);
        self.sub(hi, lo)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let value = permute_tensor(self.value(x), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.op(&[x], value, move |g, _, _| vec![Some(permute_tensor(g, &inverse))])
    }

    /// Phase angle of `(re, im)` in `(−π, π]`, with the origin mapped to 0.
    pub fn phase(&mut self, re: Var, im: Var) -> Var {
        let value = self
            .value(re)
            .zip_map(self.value(im), crate::dsp::phase_angle);
        self.op(&[re, im], value, |g, inputs, _| {
            let (r, i) = (inputs[0], inputs[1]);
            let n = r.numel();
            let mut gr = vec![0.0; n];
            let mut gi = vec![0.0; n];
            for k in 0..n {
                let (x, y) = (r.data()[k], i.data()[k]);
                let d = x * x + y * y;
                if d > 0.0 {
                    gr[k] = -g.data()[k] * y / d;
                    gi[k] = g.data()[k] * x / d;
                }
            }
            vec![
                Some(Tensor::new(r.shape(), gr)),
                Some(Tensor::new(r.shape(), gi)),
            ]
        })
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Mean absolute difference.
    pub fn mae(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ab = self.abs(d);
        self.mean(ab)
    }
}

pub fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len());
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let src = t.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}
