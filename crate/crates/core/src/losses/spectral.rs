//! Differentiable STFT, overlap-add synthesis and mel projection.

use crate::codec::{from_channels, stack_channels};
use crate::dsp::{self, Readout, StftConfig, AMP_CEILING, AMP_EPS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv1dGeometry;
use crate::tensor::Tensor;

fn check_batch(g: &Graph, x: Var, what: &str) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [b, t] => Ok((b, t)),
        ref s => Err(Error::Shape(format!("{what} must be (B, T), got {s:?}"))),
    }
}

fn row(t: &Tensor, b: usize) -> &[f64] {
    let n = t.shape()[1];
    &t.data()[b * n..(b + 1) * n]
}

impl Graph {
    /// Real and imaginary STFT parts of a `(B, T)` batch, each `(B, N, F)`.
    pub fn stft(&mut self, x: Var, cfg: &StftConfig) -> Result<(Var, Var)> {
        let (batch, samples) = check_batch(self, x, "stft input")?;
        let mut res = Vec::with_capacity(batch);
        let mut ims = Vec::with_capacity(batch);
        for b in 0..batch {
            let (re, im) = dsp::stft_parts(row(self.value(x), b), cfg)?;
            res.push(re);
            ims.push(im);
        }
        let nb = cfg.n_bins();
        let re_map = stack_channels(&res.iter().collect::<Vec<_>>());
        let im_map = stack_channels(&ims.iter().collect::<Vec<_>>());
        let frames = re_map.shape()[2];
        let mut data = Vec::with_capacity(2 * re_map.numel());
        for b in 0..batch {
            let plane = nb * frames;
            data.extend_from_slice(&re_map.data()[b * plane..(b + 1) * plane]);
            data.extend_from_slice(&im_map.data()[b * plane..(b + 1) * plane]);
        }
        let cfg = *cfg;
        let both = self.op(
            &[x],
            Tensor::new(&[batch, 2 * nb, frames], data),
            move |g, _, _| {
                let mut gx = Vec::with_capacity(batch * samples);
                for b in 0..batch {
                    let g_re = from_channels(g, b);
                    let (g_re, g_im) = split_cols(&g_re, nb);
                    gx.extend(dsp::stft_backward(&g_re, &g_im, samples, &cfg));
                }
                vec![Some(Tensor::new(&[batch, samples], gx))]
            },
        );
        let re = self.slice(both, 1, 0, nb);
        let im = self.slice(both, 1, nb, nb);
        Ok((re, im))
    }

    /// Overlap-add synthesis of `(B, N, F)` parts into a `(B, F·w_s)` batch.
    pub fn istft(&mut self, re: Var, im: Var, cfg: &StftConfig, readout: Readout) -> Result<Var> {
        let shape = self.shape(re).to_vec();
        if shape.len() != 3 || shape[1] != cfg.n_bins() || self.shape(im) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "istft expects matching (B, {}, F) parts, got {shape:?} and {:?}",
                cfg.n_bins(),
                self.shape(im)
            )));
        }
        let (batch, frames) = (shape[0], shape[2]);
        let samples = frames * cfg.frame_shift;
        let mut data = Vec::with_capacity(batch * samples);
        for b in 0..batch {
            let r = from_channels(self.value(re), b);
            let i = from_channels(self.value(im), b);
            data.extend(dsp::overlap_add(&r, &i, cfg, readout)?);
        }
        let cfg = *cfg;
        Ok(self.op(&[re, im], Tensor::new(&[batch, samples], data), move |g, _, _| {
            let mut g_re = Vec::with_capacity(batch);
            let mut g_im = Vec::with_capacity(batch);
            for b in 0..batch {
                let (r, i) = dsp::overlap_add_backward(row(g, b), frames, &cfg, readout);
                g_re.push(r);
                g_im.push(i);
            }
            vec![
                Some(stack_channels(&g_re.iter().collect::<Vec<_>>())),
                Some(stack_channels(&g_im.iter().collect::<Vec<_>>())),
            ]
        }))
    }

    /// `(B, C, F)` features mapped through a fixed `[M, C]` matrix.
    pub fn channel_map(&mut self, x: Var, m: &Tensor) -> Var {
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let w = self.constant(m.clone().reshape(&[rows, cols, 1]));
        self.conv1d(x, w, None, Conv1dGeometry::same(1))
    }

    /// `sqrt(re² + im² + 1e-18)`, smooth at the origin.
    pub fn magnitude(&mut self, re: Var, im: Var) -> Var {
        let r2 = self.square(re);
        let i2 = self.square(im);
        let p = self.add(r2, i2);
        self.sqrt_eps(p, 1e-18)
    }

    /// `exp(A)·(cos P, sin P)` with the amplitude clamped at [`AMP_CEILING`].
    pub fn polar(&mut self, log_amplitude: Var, phase: Var) -> (Var, Var) {
        let mag = self.exp_clamped(log_amplitude, AMP_CEILING);
        let c = self.cos(phase);
        let s = self.sin(phase);
        (self.mul(mag, c), self.mul(mag, s))
    }
}

/// `[F, 2N]` gradient rows split into real and imaginary `[F, N]` halves.
fn split_cols(t: &Tensor, nb: usize) -> (Tensor, Tensor) {
    let frames = t.shape()[0];
    let mut re = Vec::with_capacity(frames * nb);
    let mut im = Vec::with_capacity(frames * nb);
    for f in 0..frames {
        let r = &t.data()[f * 2 * nb..(f + 1) * 2 * nb];
        re.extend_from_slice(&r[..nb]);
        im.extend_from_slice(&r[nb..]);
    }
    (Tensor::new(&[frames, nb], re), Tensor::new(&[frames, nb], im))
}

/// STFT settings plus the mel filterbank used by the mel loss.
#[derive(Clone, Debug)]
pub struct MelConfig {
    pub stft: StftConfig,
    pub filterbank: Tensor,
}

impl MelConfig {
    pub fn new(stft: StftConfig, n_mel: usize) -> Result<Self> {
        Ok(Self {
            filterbank: dsp::mel_filterbank(&stft, n_mel)?,
            stft,
        })
    }

    pub fn n_mel(&self) -> usize {
        self.filterbank.shape()[0]
    }
}

/// Natural-log mel spectrogram `(B, N_mel, F)` of a `(B, T)` batch.
pub fn log_mel(g: &mut Graph, x: Var, cfg: &MelConfig) -> Result<Var> {
    let (re, im) = g.stft(x, &cfg.stft)?;
    let mag = g.magnitude(re, im);
    let mel = g.channel_map(mag, &cfg.filterbank);
    let mel = g.clamp_min(mel, AMP_EPS);
    Ok(g.ln(mel))
}
