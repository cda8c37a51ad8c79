//! STFT analysis, least-squares ISTFT synthesis, phase computation and the
//! mel filterbank.
//!
//! Spectral matrices are `[frames, bins]` tensors. Every transform here
//! also has an adjoint (`*_backward`) so the training graph can
//! differentiate through analysis and synthesis.
//!
//! Framing comes in two flavours. [`Framing::Centered`] reflect-pads
//! `(w_l − w_s)/2` samples at both ends so frame `f` is centred on sample
//! `f·w_s + w_s/2`. [`Framing::Causal`] zero-pads `w_l − w_s` samples on the
//! left only, so frame `f` ends exactly at sample `(f+1)·w_s` and never
//! looks ahead. Either way a signal of `T` samples yields `T / w_s` frames.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor added to magnitudes before taking logarithms.
pub const AMP_EPS: f64 = 1e-5;
/// Ceiling applied to `exp(A)` when synthesising from log amplitudes.
pub const AMP_CEILING: f64 = 1e8;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of amplitude entries clamped by [`complex_from_amp_phase`] so far.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Framing {
    #[default]
    Centered,
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_length: usize,
    pub frame_shift: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
    #[serde(default)]
    pub window: Window,
    #[serde(default)]
    pub framing: Framing,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_length: 320,
            frame_shift: 40,
            fft_size: 1024,
            sample_rate: 48_000,
            window: Window::Hann,
            framing: Framing::Centered,
        }
    }
}

impl StftConfig {
    pub fn new(
        frame_length: usize,
        frame_shift: usize,
        fft_size: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        let cfg = Self {
            frame_length,
            frame_shift,
            fft_size,
            sample_rate,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_framing(mut self, framing: Framing) -> Self {
        self.framing = framing;
        self
    }

    pub fn with_sample_rate(mut self, sample_rate: u32) -> Self {
        self.sample_rate = sample_rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (wl, ws, n) = (self.frame_length, self.frame_shift, self.fft_size);
        if ws == 0 || ws > wl || wl > n {
            return Err(Error::Config(format!(
                "need 0 < frame_shift ({ws}) <= frame_length ({wl}) <= fft_size ({n})"
            )));
        }
        if !n.is_power_of_two() {
            return Err(Error::Config(format!("fft_size {n} is not a power of two")));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.framing == Framing::Centered && (wl - ws) % 2 != 0 {
            return Err(Error::Config(format!(
                "centered framing needs an even frame_length - frame_shift, got {}",
                wl - ws
            )));
        }
        // constant overlap-add of the analysis window at this shift
        let w = self.window();
        let sums: Vec<f64> = (0..ws)
            .map(|r| w.iter().skip(r).step_by(ws).sum::<f64>())
            .collect();
        let mean = sums.iter().sum::<f64>() / ws as f64;
        if mean <= 0.0 || sums.iter().any(|s| (s - mean).abs() > 1e-9 * mean) {
            return Err(Error::Config(format!(
                "window of length {wl} is not COLA at shift {ws}"
            )));
        }
        Ok(())
    }

    /// Frequency bins, `fft_size/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> Vec<f64> {
        let l = self.frame_length;
        match self.window {
            Window::Hann => (0..l)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / l as f64).cos())
                .collect(),
        }
    }

    /// `(left, right)` padding applied before framing.
    pub fn padding(&self) -> (usize, usize) {
        let extra = self.frame_length - self.frame_shift;
        match self.framing {
            Framing::Centered => (extra / 2, extra / 2),
            Framing::Causal => (extra, 0),
        }
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        samples / self.frame_shift
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.frame_shift as f64
    }
}

/// Log-amplitude and phase spectra, `[frames, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFrames {
    pub log_amplitude: Tensor,
    pub phase: Tensor,
    pub config: StftConfig,
}

impl SpectralFrames {
    pub fn frames(&self) -> usize {
        self.log_amplitude.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.log_amplitude.shape()[1]
    }
}

/// Real and imaginary STFT parts, `[frames, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
    pub config: StftConfig,
}

impl ComplexSpectrum {
    pub fn new(re: Tensor, im: Tensor, config: StftConfig) -> Result<Self> {
        if re.shape() != im.shape() || re.rank() != 2 {
            return Err(Error::Shape(format!(
                "real {:?} and imaginary {:?} parts differ",
                re.shape(),
                im.shape()
            )));
        }
        Ok(Self { re, im, config })
    }

    pub fn frames(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn magnitude(&self) -> Tensor {
        self.re.zip_map(&self.im, |r, i| r.hypot(i))
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_forward(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn fft_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Principal-value phase of `(re, im)` in `(−π, π]`; the origin maps to 0.
///
/// `arctan(I/R) − (π/2)·sgn*(I)·(sgn*(R) − 1)` with `sgn*(z) = 1` for
/// `z ≥ 0` and `−1` otherwise. On the imaginary axis the arctangent is taken
/// at its limit `±π/2`.
pub fn phase_angle(re: f64, im: f64) -> f64 {
    let sgn = |z: f64| if z >= 0.0 { 1.0 } else { -1.0 };
    if re == 0.0 {
        return if im > 0.0 {
            PI / 2.0
        } else if im < 0.0 {
            -PI / 2.0
        } else {
            0.0
        };
    }
    (im / re).atan() - PI / 2.0 * sgn(im) * (sgn(re) - 1.0)
}

/// Elementwise [`phase_angle`] over matching matrices.
pub fn phase_from_parts(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    if re.shape() != im.shape() {
        return Err(Error::Shape(format!(
            "phase_from_parts: {:?} vs {:?}",
            re.shape(),
            im.shape()
        )));
    }
    Ok(re.zip_map(im, phase_angle))
}

fn check_waveform(x: &[f64], cfg: &StftConfig) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyInput("waveform has no samples"));
    }
    if x.len() < cfg.frame_length {
        return Err(Error::Validation(format!(
            "waveform of {} samples is shorter than one frame ({})",
            x.len(),
            cfg.frame_length
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite sample at index {i}")));
    }
    Ok(())
}

fn pad_signal(x: &[f64], cfg: &StftConfig) -> Vec<f64> {
    let (left, right) = cfg.padding();
    let t = x.len();
    let mut out = Vec::with_capacity(t + left + right);
    match cfg.framing {
        Framing::Centered => {
            out.extend((1..=left).rev().map(|i| x[i]));
            out.extend_from_slice(x);
            out.extend((0..right).map(|j| x[t - 2 - j]));
        }
        Framing::Causal => {
            out.resize(left, 0.0);
            out.extend_from_slice(x);
        }
    }
    out
}

/// Adjoint of [`pad_signal`].
fn pad_signal_backward(g: &[f64], t: usize, cfg: &StftConfig) -> Vec<f64> {
    let (left, right) = cfg.padding();
    let mut out = g[left..left + t].to_vec();
    if cfg.framing == Framing::Centered {
        for i in 1..=left {
            out[i] += g[left - i];
        }
        for j in 0..right {
            out[t - 2 - j] += g[left + t + j];
        }
    }
    out
}

/// Real and imaginary STFT parts of `x`, each `[frames, bins]`.
pub fn stft_parts(x: &[f64], cfg: &StftConfig) -> Result<(Tensor, Tensor)> {
    check_waveform(x, cfg)?;
    Ok(stft_parts_unchecked(x, cfg))
}

pub(crate) fn stft_parts_unchecked(x: &[f64], cfg: &StftConfig) -> (Tensor, Tensor) {
    let padded = pad_signal(x, cfg);
    let frames = cfg.num_frames(x.len());
    let nb = cfg.n_bins();
    let (n, wl, ws) = (cfg.fft_size, cfg.frame_length, cfg.frame_shift);
    let window = cfg.window();
    let mut re = vec![0.0; frames * nb];
    let mut im = vec![0.0; frames * nb];
    re.par_chunks_mut(nb)
        .zip(im.par_chunks_mut(nb))
        .enumerate()
        .for_each(|(f, (re_row, im_row))| {
            let fft = fft_forward(n);
            let mut buf = vec![Complex::new(0.0, 0.0); n];
            for i in 0..wl {
                buf[i].re = window[i] * padded[f * ws + i];
            }
            fft.process(&mut buf);
            for k in 0..nb {
                re_row[k] = buf[k].re;
                im_row[k] = buf[k].im;
            }
        });
    (
        Tensor::new(&[frames, nb], re),
        Tensor::new(&[frames, nb], im),
    )
}

/// Adjoint of [`stft_parts`]: gradient on the waveform of `samples`
/// samples given gradients on the real and imaginary parts.
pub fn stft_backward(g_re: &Tensor, g_im: &Tensor, samples: usize, cfg: &StftConfig) -> Vec<f64> {
    let (frames, nb) = (g_re.shape()[0], g_re.shape()[1]);
    let (n, wl, ws) = (cfg.fft_size, cfg.frame_length, cfg.frame_shift);
    let (left, right) = cfg.padding();
    let window = cfg.window();
    let frame_grads: Vec<Vec<f64>> = (0..frames)
        .into_par_iter()
        .map(|f| {
            let ifft = fft_inverse(n);
            let mut buf = vec![Complex::new(0.0, 0.0); n];
            for k in 0..nb {
                buf[k] = Complex::new(g_re.data()[f * nb + k], g_im.data()[f * nb + k]);
            }
            ifft.process(&mut buf);
            (0..wl).map(|i| window[i] * buf[i].re).collect()
        })
        .collect();
    let mut padded = vec![0.0; samples + left + right];
    for (f, fg) in frame_grads.iter().enumerate() {
        for (i, v) in fg.iter().enumerate() {
            padded[f * ws + i] += v;
        }
    }
    pad_signal_backward(&padded, samples, cfg)
}

/// Log-amplitude and phase spectra of `x`.
pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<SpectralFrames> {
    let (re, im) = stft_parts(x, cfg)?;
    Ok(SpectralFrames {
        log_amplitude: re.zip_map(&im, |r, i| (r.hypot(i) + AMP_EPS).ln()),
        phase: re.zip_map(&im, phase_angle),
        config: *cfg,
    })
}

pub fn stft_complex(x: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrum> {
    let (re, im) = stft_parts(x, cfg)?;
    ComplexSpectrum::new(re, im, *cfg)
}

/// Inverse real FFT of one frame, truncated to the window support.
fn irfft_frame(re: &[f64], im: &[f64], n: usize, keep: usize) -> Vec<f64> {
    let nb = n / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    buf[0] = Complex::new(re[0], 0.0);
    buf[n / 2] = Complex::new(re[nb - 1], 0.0);
    for k in 1..nb - 1 {
        buf[k] = Complex::new(re[k], im[k]);
        buf[n - k] = Complex::new(re[k], -im[k]);
    }
    fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf[..keep].iter().map(|c| c.re * scale).collect()
}

/// Overlap-add normaliser `Σ_f w²[t − f·w_s]` in padded coordinates.
fn window_energy(frames: usize, cfg: &StftConfig) -> Vec<f64> {
    let (wl, ws) = (cfg.frame_length, cfg.frame_shift);
    let window = cfg.window();
    let mut acc = vec![0.0; (frames.max(1) - 1) * ws + wl];
    for f in 0..frames {
        for (i, w) in window.iter().enumerate() {
            acc[f * ws + i] += w * w;
        }
    }
    acc
}

/// Where the synthesised signal is read from the padded overlap-add buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Aligned with the analysed input (inverse of `stft`).
    Aligned,
    /// Starting one sample into the first frame, skipping the zero tap of
    /// the periodic window. For causal framing this is the input delayed by
    /// `w_l − w_s − 1` samples, and output block `[b·w_s, (b+1)·w_s)` reads
    /// no frame past `b`.
    Delayed,
}

fn readout_offset(cfg: &StftConfig, readout: Readout) -> usize {
    match readout {
        Readout::Aligned => cfg.padding().0,
        Readout::Delayed => 1,
    }
}

pub fn overlap_add(
    re: &Tensor,
    im: &Tensor,
    cfg: &StftConfig,
    readout: Readout,
) -> Result<Vec<f64>> {
    let (frames, nb) = (re.shape()[0], re.shape()[1]);
    if nb != cfg.n_bins() {
        return Err(Error::Shape(format!(
            "spectrum has {nb} bins, config expects {}",
            cfg.n_bins()
        )));
    }
    let (n, wl, ws) = (cfg.fft_size, cfg.frame_length, cfg.frame_shift);
    let out_len = frames * ws;
    if frames == 0 {
        return Ok(Vec::new());
    }
    let window = cfg.window();
    let segments: Vec<Vec<f64>> = (0..frames)
        .into_par_iter()
        .map(|f| {
            irfft_frame(
                &re.data()[f * nb..(f + 1) * nb],
                &im.data()[f * nb..(f + 1) * nb],
                n,
                wl,
            )
        })
        .collect();
    let energy = window_energy(frames, cfg);
    let mut acc = vec![0.0; energy.len()];
    for (f, seg) in segments.iter().enumerate() {
        for i in 0..wl {
            acc[f * ws + i] += window[i] * seg[i];
        }
    }
    let offset = readout_offset(cfg, readout);
    let mut out = Vec::with_capacity(out_len);
    for t in 0..out_len {
        let p = t + offset;
        let e = energy[p];
        if e > 0.0 {
            out.push(acc[p] / e);
        } else if readout == Readout::Delayed {
            // pre-roll sample covered only by a zero window tap
            out.push(0.0);
        } else {
            return Err(Error::Config(format!(
                "overlap-add normaliser vanishes at sample {t}"
            )));
        }
    }
    Ok(out)
}

/// Adjoint of [`overlap_add`].
pub fn overlap_add_backward(
    g: &[f64],
    frames: usize,
    cfg: &StftConfig,
    readout: Readout,
) -> (Tensor, Tensor) {
    let (n, wl, ws) = (cfg.fft_size, cfg.frame_length, cfg.frame_shift);
    let nb = cfg.n_bins();
    let window = cfg.window();
    let energy = window_energy(frames, cfg);
    let offset = readout_offset(cfg, readout);
    let mut g_acc = vec![0.0; energy.len()];
    for (t, gv) in g.iter().enumerate() {
        let e = energy[t + offset];
        if e > 0.0 {
            g_acc[t + offset] = gv / e;
        }
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..frames)
        .into_par_iter()
        .map(|f| {
            let mut buf = vec![Complex::new(0.0, 0.0); n];
            for i in 0..wl {
                buf[i].re = window[i] * g_acc[f * ws + i];
            }
            fft_forward(n).process(&mut buf);
            let mut gr = vec![0.0; nb];
            let mut gi = vec![0.0; nb];
            for k in 0..nb {
                let c = if k == 0 || k == nb - 1 { 1.0 } else { 2.0 } / n as f64;
                gr[k] = c * buf[k].re;
                gi[k] = if k == 0 || k == nb - 1 { 0.0 } else { c * buf[k].im };
            }
            (gr, gi)
        })
        .collect();
    let mut g_re = Vec::with_capacity(frames * nb);
    let mut g_im = Vec::with_capacity(frames * nb);
    for (gr, gi) in rows {
        g_re.extend(gr);
        g_im.extend(gi);
    }
    (
        Tensor::new(&[frames, nb], g_re),
        Tensor::new(&[frames, nb], g_im),
    )
}

/// Least-squares overlap-add inverse of [`stft`]; `frames·w_s` samples.
pub fn istft(spec: &ComplexSpectrum) -> Result<Vec<f64>> {
    if !spec.re.all_finite() || !spec.im.all_finite() {
        return Err(Error::Validation("spectrum contains non-finite values".into()));
    }
    overlap_add(&spec.re, &spec.im, &spec.config, Readout::Aligned)
}

/// Overlap-add synthesis with an explicit readout position.
pub fn istft_readout(spec: &ComplexSpectrum, readout: Readout) -> Result<Vec<f64>> {
    if !spec.re.all_finite() || !spec.im.all_finite() {
        return Err(Error::Validation("spectrum contains non-finite values".into()));
    }
    overlap_add(&spec.re, &spec.im, &spec.config, readout)
}

/// Incremental [`Readout::Delayed`] synthesis. Feeding frames in any
/// grouping reproduces the batch output sample for sample.
#[derive(Clone, Debug)]
pub struct StreamingSynthesis {
    cfg: StftConfig,
    window: Vec<f64>,
    acc: Vec<f64>,
    energy: Vec<f64>,
    /// Padded position of `acc[0]`.
    base: usize,
    frames: usize,
    emitted: usize,
}

impl StreamingSynthesis {
    pub fn new(cfg: StftConfig) -> Self {
        Self {
            window: cfg.window(),
            cfg,
            acc: Vec::new(),
            energy: Vec::new(),
            base: 0,
            frames: 0,
            emitted: 0,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.cfg);
    }

    /// Add `[frames, bins]` spectra and return every newly final sample.
    pub fn push(&mut self, re: &Tensor, im: &Tensor) -> Vec<f64> {
        let (frames, nb) = (re.shape()[0], re.shape()[1]);
        let (n, wl, ws) = (self.cfg.fft_size, self.cfg.frame_length, self.cfg.frame_shift);
        for f in 0..frames {
            let seg = irfft_frame(
                &re.data()[f * nb..(f + 1) * nb],
                &im.data()[f * nb..(f + 1) * nb],
                n,
                wl,
            );
            let start = (self.frames + f) * ws - self.base;
            if self.acc.len() < start + wl {
                self.acc.resize(start + wl, 0.0);
                self.energy.resize(start + wl, 0.0);
            }
            for i in 0..wl {
                self.acc[start + i] += self.window[i] * seg[i];
                self.energy[start + i] += self.window[i] * self.window[i];
            }
        }
        self.frames += frames;
        let offset = readout_offset(&self.cfg, Readout::Delayed);
        let ready = self.frames * ws;
        let mut out = Vec::with_capacity(ready - self.emitted);
        for t in self.emitted..ready {
            let p = t + offset - self.base;
            let e = self.energy[p];
            out.push(if e > 0.0 { self.acc[p] / e } else { 0.0 });
        }
        self.emitted = ready;
        // the next frame starts at `ready`; nothing before it changes again
        let keep_from = (self.emitted + offset).min(ready) - self.base;
        self.acc.drain(..keep_from);
        self.energy.drain(..keep_from);
        self.base += keep_from;
        out
    }
}

/// `exp(A)·(cos P + j sin P)` with `exp(A)` clamped at [`AMP_CEILING`].
pub fn complex_from_amp_phase(frames: &SpectralFrames) -> ComplexSpectrum {
    let limit = AMP_CEILING.ln();
    let mut clamped = 0u64;
    let mag = frames.log_amplitude.map(|a| a.min(limit).exp());
    for a in frames.log_amplitude.data() {
        if *a > limit {
            clamped += 1;
        }
    }
    if clamped > 0 {
        CLAMP_EVENTS.fetch_add(clamped, Ordering::Relaxed);
        tracing::warn!(clamped, "log amplitude exceeded synthesis ceiling");
    }
    ComplexSpectrum {
        re: mag.zip_map(&frames.phase, |m, p| m * p.cos()),
        im: mag.zip_map(&frames.phase, |m, p| m * p.sin()),
        config: frames.config,
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangular filterbank `[n_mel, bins]` spanning 0 to `f_s/2`.
pub fn mel_filterbank(cfg: &StftConfig, n_mel: usize) -> Result<Tensor> {
    let nb = cfg.n_bins();
    if n_mel == 0 || n_mel > nb {
        return Err(Error::Config(format!(
            "n_mel must be in 1..={nb}, got {n_mel}"
        )));
    }
    let fs = cfg.sample_rate as f64;
    let top = hz_to_mel(fs / 2.0);
    let edges: Vec<f64> = (0..n_mel + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mel + 1) as f64))
        .collect();
    let bin_hz = fs / cfg.fft_size as f64;
    let mut data = vec![0.0; n_mel * nb];
    for m in 0..n_mel {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..nb {
            let f = k as f64 * bin_hz;
            let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
            if w > 0.0 {
                data[m * nb + k] = w;
            }
        }
        if data[m * nb..(m + 1) * nb].iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "mel band {m} covers no FFT bin; use fewer bands or a larger FFT"
            )));
        }
    }
    Ok(Tensor::new(&[n_mel, nb], data))
}

/// Natural-log mel energies `[frames, n_mel]`, floored at [`AMP_EPS`].
pub fn mel_spectrogram(x: &[f64], cfg: &StftConfig, n_mel: usize) -> Result<Tensor> {
    let fb = mel_filterbank(cfg, n_mel)?;
    let (re, im) = stft_parts(x, cfg)?;
    let mag = re.zip_map(&im, |r, i| r.hypot(i));
    Ok(apply_filterbank(&mag, &fb).map(|v| v.max(AMP_EPS).ln()))
}

/// `[frames, bins] × [n_mel, bins]ᵀ → [frames, n_mel]`.
pub(crate) fn apply_filterbank(mag: &Tensor, fb: &Tensor) -> Tensor {
    let (frames, nb) = (mag.shape()[0], mag.shape()[1]);
    let n_mel = fb.shape()[0];
    let mut out = vec![0.0; frames * n_mel];
    for f in 0..frames {
        let row = &mag.data()[f * nb..(f + 1) * nb];
        for m in 0..n_mel {
            let w = &fb.data()[m * nb..(m + 1) * nb];
            out[f * n_mel + m] = row.iter().zip(w).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(&[frames, n_mel], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg16k() -> StftConfig {
        StftConfig::default().with_sample_rate(16_000)
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    /// Direct O(N²) DFT of one windowed frame; independent of the FFT path.
    fn direct_dft(seg: &[f64], n: usize) -> Vec<(f64, f64)> {
        (0..n / 2 + 1)
            .map(|k| {
                seg.iter().enumerate().fold((0.0, 0.0), |(r, i), (t, &v)| {
                    let th = 2.0 * PI * (k * t) as f64 / n as f64;
                    (r + v * th.cos(), i - v * th.sin())
                })
            })
            .collect()
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(StftConfig::new(320, 40, 1000, 48_000).is_err());
        assert!(StftConfig::new(320, 400, 1024, 48_000).is_err());
        assert!(StftConfig::new(2048, 40, 1024, 48_000).is_err());
        // periodic Hann is not COLA when the shift does not divide it evenly
        assert!(StftConfig::new(320, 70, 1024, 48_000).is_err());
        assert!(StftConfig::new(320, 40, 1024, 48_000).is_ok());
    }

    #[test]
    fn silence_gives_floor_and_zero_phase() {
        let cfg = cfg16k();
        let s = stft(&vec![0.0; 320], &cfg).unwrap();
        assert_eq!(s.frames(), 8);
        assert_eq!(s.bins(), 513);
        assert!(s.phase.data().iter().all(|&p| p == 0.0));
        assert!(s
            .log_amplitude
            .data()
            .iter()
            .all(|&a| (a - AMP_EPS.ln()).abs() < 1e-12));
    }

    #[test]
    fn empty_and_non_finite_inputs_are_rejected() {
        let cfg = cfg16k();
        assert!(matches!(stft(&[], &cfg), Err(Error::EmptyInput(_))));
        let mut x = vec![0.0; 400];
        x[17] = f64::NAN;
        assert!(matches!(stft(&x, &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn fft_path_matches_direct_dft() {
        let cfg = cfg16k();
        let x = noise(1600, 3);
        let (re, im) = stft_parts(&x, &cfg).unwrap();
        let padded = pad_signal(&x, &cfg);
        let w = cfg.window();
        for f in [0usize, 7, 39] {
            let seg: Vec<f64> = (0..320).map(|i| w[i] * padded[f * 40 + i]).collect();
            let oracle = direct_dft(&seg, 1024);
            for (k, (r, i)) in oracle.iter().enumerate() {
                assert!((re.data()[f * 513 + k] - r).abs() < 1e-9);
                assert!((im.data()[f * 513 + k] - i).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bin_centred_cosine_peaks_at_its_bin() {
        let cfg = cfg16k();
        let bin = 64;
        let x: Vec<f64> = (0..3200)
            .map(|t| (2.0 * PI * bin as f64 * t as f64 / 1024.0).cos())
            .collect();
        let s = stft(&x, &cfg).unwrap();
        for f in 8..s.frames() - 8 {
            let row = &s.log_amplitude.data()[f * 513..(f + 1) * 513];
            let argmax = (0..513).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, bin, "frame {f}");
        }
    }

    #[test]
    fn roundtrip_both_framings() {
        for framing in [Framing::Centered, Framing::Causal] {
            let cfg = cfg16k().with_framing(framing);
            let x = noise(4000, 11);
            let y = istft(&stft_complex(&x, &cfg).unwrap()).unwrap();
            assert_eq!(y.len(), x.len());
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{framing:?}: {err}");
        }
    }

    #[test]
    fn causal_delayed_readout_is_shifted_input() {
        let cfg = cfg16k().with_framing(Framing::Causal);
        let x = noise(2000, 5);
        let (re, im) = stft_parts(&x, &cfg).unwrap();
        let y = overlap_add(&re, &im, &cfg, Readout::Delayed).unwrap();
        let d = cfg.frame_length - cfg.frame_shift - 1;
        for t in 0..y.len() {
            let want = if t >= d { x[t - d] } else { 0.0 };
            assert!((y[t] - want).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn streaming_synthesis_matches_batch() {
        let cfg = cfg16k().with_framing(Framing::Causal);
        let x = noise(3200, 8);
        let (re, im) = stft_parts(&x, &cfg).unwrap();
        let batch = overlap_add(&re, &im, &cfg, Readout::Delayed).unwrap();
        let nb = cfg.n_bins();
        let mut s = StreamingSynthesis::new(cfg);
        let mut out = Vec::new();
        let mut f = 0;
        for chunk in [1usize, 3, 8, 0, 20, 48].iter().cycle() {
            if f >= 80 {
                break;
            }
            let c = (*chunk).min(80 - f);
            let slice = |t: &Tensor| Tensor::new(&[c, nb], t.data()[f * nb..(f + c) * nb].to_vec());
            out.extend(s.push(&slice(&re), &slice(&im)));
            f += c;
        }
        assert_eq!(out, batch);
    }

    #[test]
    fn zero_spectrum_gives_silence() {
        let cfg = cfg16k();
        let z = Tensor::zeros(&[10, 513]);
        let spec = ComplexSpectrum::new(z.clone(), z, cfg).unwrap();
        assert!(istft(&spec).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn consistency_projection_is_idempotent() {
        let cfg = cfg16k();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = 24;
        let mag = Tensor::from_fn(&[frames, 513], |_| rng.gen_range(0.0..1.0));
        let ph = Tensor::from_fn(&[frames, 513], |_| rng.gen_range(-PI..PI));
        let spec = ComplexSpectrum::new(
            mag.zip_map(&ph, |m, p| m * p.cos()),
            mag.zip_map(&ph, |m, p| m * p.sin()),
            cfg,
        )
        .unwrap();
        let once = stft_complex(&istft(&spec).unwrap(), &cfg).unwrap();
        let twice = stft_complex(&istft(&once).unwrap(), &cfg).unwrap();
        let moved = once.re.zip_map(&spec.re, |a, b| (a - b).abs()).max_abs();
        assert!(moved > 1e-3, "random phases should be inconsistent");
        let d = once.re.zip_map(&twice.re, |a, b| a - b).max_abs()
            + once.im.zip_map(&twice.im, |a, b| a - b).max_abs();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn phase_examples() {
        assert!((phase_angle(1.0, 1.0) - PI / 4.0).abs() < 1e-15);
        assert_eq!(phase_angle(0.0, 0.0), 0.0);
        assert!((phase_angle(-1.0, 0.0) - PI).abs() < 1e-15);
        assert!((phase_angle(-1.0, -1.0) + 3.0 * PI / 4.0).abs() < 1e-15);
        assert!((phase_angle(0.0, -2.0) + PI / 2.0).abs() < 1e-15);
        // negative zero imaginary part still maps onto the closed end
        assert!((phase_angle(-1.0, -0.0) - PI).abs() < 1e-15);
    }

    #[test]
    fn phase_matches_atan2_on_grid() {
        for i in -50..50 {
            for j in -50..50 {
                let (r, im) = (i as f64 / 7.0, j as f64 / 7.0);
                let p = phase_angle(r, im);
                assert!(p > -PI && p <= PI);
                if i == 0 && j == 0 {
                    assert_eq!(p, 0.0);
                } else {
                    assert!((p - im.atan2(r)).abs() < 1e-12, "({r},{im})");
                }
            }
        }
    }

    #[test]
    fn complex_from_amp_phase_examples() {
        let cfg = cfg16k();
        let frames = SpectralFrames {
            log_amplitude: Tensor::zeros(&[1, 2]),
            phase: Tensor::new(&[1, 2], vec![0.0, PI / 2.0]),
            config: cfg,
        };
        let c = complex_from_amp_phase(&frames);
        assert_eq!(c.re.data()[0], 1.0);
        assert_eq!(c.im.data()[0], 0.0);
        assert!(c.re.data()[1].abs() < 1e-15);
        assert!((c.im.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn amp_phase_reproduces_stft_parts() {
        let cfg = cfg16k();
        let x = noise(1600, 21);
        let (re, im) = stft_parts(&x, &cfg).unwrap();
        let s = stft(&x, &cfg).unwrap();
        // undo the amplitude floor before resynthesis
        let frames = SpectralFrames {
            log_amplitude: s.log_amplitude.map(|a| (a.exp() - AMP_EPS).ln()),
            ..s
        };
        let c = complex_from_amp_phase(&frames);
        assert!(c.re.zip_map(&re, |a, b| a - b).max_abs() < 1e-9);
        assert!(c.im.zip_map(&im, |a, b| a - b).max_abs() < 1e-9);
    }

    #[test]
    fn overflow_is_clamped_and_counted() {
        let before = clamp_events();
        let frames = SpectralFrames {
            log_amplitude: Tensor::full(&[1, 3], 500.0),
            phase: Tensor::zeros(&[1, 3]),
            config: cfg16k(),
        };
        let c = complex_from_amp_phase(&frames);
        assert!(c.re.data().iter().all(|&v| (v - AMP_CEILING).abs() < 1e-3));
        assert!(clamp_events() >= before + 3);
    }

    #[test]
    fn filterbank_properties() {
        for sr in [16_000, 24_000, 48_000] {
            let cfg = StftConfig::default().with_sample_rate(sr);
            let fb = mel_filterbank(&cfg, 80).unwrap();
            assert!(fb.data().iter().all(|&w| w >= 0.0));
            for m in 0..80 {
                assert!(fb.data()[m * 513..(m + 1) * 513].iter().sum::<f64>() > 0.0);
            }
            for k in 0..513 {
                let bands = (0..80).filter(|&m| fb.data()[m * 513 + k] > 0.0).count();
                assert!(bands <= 2, "bin {k} feeds {bands} bands");
            }
        }
        assert!(mel_filterbank(&cfg16k(), 600).is_err());
        assert!(mel_filterbank(&cfg16k(), 0).is_err());
    }

    #[test]
    fn mel_of_silence_and_tone() {
        let cfg = cfg16k();
        let m = mel_spectrogram(&vec![0.0; 640], &cfg, 80).unwrap();
        assert!(m.data().iter().all(|&v| (v - AMP_EPS.ln()).abs() < 1e-12));

        // tone at 1 kHz: the band whose centre is nearest (in mel) wins
        let f0 = 1000.0;
        let x: Vec<f64> = (0..3200)
            .map(|t| (2.0 * PI * f0 * t as f64 / 16_000.0).sin())
            .collect();
        let m = mel_spectrogram(&x, &cfg, 80).unwrap();
        let top = hz_to_mel(8000.0);
        let spacing = top / 81.0;
        let expected = (hz_to_mel(f0) / spacing).round() as usize - 1;
        let row = &m.data()[40 * 80..41 * 80];
        let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert!(
            argmax.abs_diff(expected) <= 1,
            "argmax {argmax}, expected {expected}"
        );
        assert!(m.all_finite());
    }

    #[test]
    fn stft_adjoint_identity() {
        // <stft(x), g> == <x, stft_backward(g)>
        let cfg = cfg16k();
        let x = noise(800, 1);
        let (re, im) = stft_parts(&x, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gr = Tensor::from_fn(re.shape(), |_| rng.gen_range(-1.0..1.0));
        let gi = Tensor::from_fn(re.shape(), |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = re.data().iter().zip(gr.data()).map(|(a, b)| a * b).sum::<f64>()
            + im.data().iter().zip(gi.data()).map(|(a, b)| a * b).sum::<f64>();
        let gx = stft_backward(&gr, &gi, x.len(), &cfg);
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0));
    }
}
