//! Training objectives: spectral-level, quantization, adversarial and
//! distillation losses.
//!
//! Spectral maps are `(B, N, F)` graph nodes (bins on axis 1, frames on
//! axis 2) and waveforms are `(B, T)`.

mod discriminator;
mod spectral;

pub use discriminator::{
    mrd_resolutions, periodic_map, BankOutput, DiscriminatorBank, DiscriminatorConfig, SubOutput, PERIODS,
};
pub use spectral::{log_mel, MelConfig};

pub use crate::ops::anti_wrap;
pub use crate::quantizer::quantize_graph;

use serde::{Deserialize, Serialize};

use crate::dsp::{Readout, StftConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Taps;
use crate::quantizer::Quantized;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub phase: f64,
    pub ri: f64,
    pub complex: f64,
    pub mel: f64,
    pub spectral: f64,
    pub quantization: f64,
    pub mrd: f64,
    pub kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            phase: 20.0 / 9.0,
            ri: 2.25,
            complex: 4.0 / 9.0,
            mel: 1.0,
            spectral: 45.0,
            quantization: 7.5,
            mrd: 0.1,
            kd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.phase,
            self.ri,
            self.complex,
            self.mel,
            self.spectral,
            self.quantization,
            self.mrd,
            self.kd,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Validation(format!(
            "{what}: shape {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// `mean((Â − A)²)`.
pub fn amplitude_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "amplitude loss")?;
    Ok(g.mse(pred, target))
}

#[derive(Clone, Copy, Debug)]
pub struct PhaseLosses {
    pub ip: Var,
    pub gd: Var,
    pub iaf: Var,
    pub total: Var,
}

/// Anti-wrapped instantaneous phase, group delay and instantaneous angular
/// frequency losses on `(B, N, F)` phase maps. The differenced terms are
/// averaged over the differenced entries.
pub fn phase_loss(g: &mut Graph, pred: Var, target: Var) -> Result<PhaseLosses> {
    same_shape(g, pred, target, "phase loss")?;
    let s = g.shape(pred);
    if s.len() != 3 || s[1] < 2 || s[2] < 2 {
        return Err(Error::Validation(format!(
            "phase loss needs (B, N >= 2, F >= 2) maps, got {s:?}"
        )));
    }
    let aw_mean = |g: &mut Graph, a: Var, b: Var| {
        let d = g.sub(a, b);
        let w = g.anti_wrap(d);
        g.mean(w)
    };
    let ip = aw_mean(g, pred, target);
    let (pf, tf) = (g.diff(pred, 1), g.diff(target, 1));
    let gd = aw_mean(g, pf, tf);
    let (pt, tt) = (g.diff(pred, 2), g.diff(target, 2));
    let iaf = aw_mean(g, pt, tt);
    let total = g.weighted_sum(&[(1.0, ip), (1.0, gd), (1.0, iaf)]);
    Ok(PhaseLosses { ip, gd, iaf, total })
}

#[derive(Clone, Copy, Debug)]
pub struct ComplexLosses {
    pub ri: Var,
    pub consistency: Var,
    pub total: Var,
}

/// Real/imaginary MAE against the reference and squared distance to the
/// consistent projection `STFT(ISTFT(Ŝ))`.
pub fn complex_spectrum_loss(
    g: &mut Graph,
    pred: (Var, Var),
    target: (Var, Var),
    stft: &StftConfig,
    lambda_ri: f64,
) -> Result<ComplexLosses> {
    for (a, b) in [(pred.0, target.0), (pred.1, target.1), (pred.0, pred.1)] {
        same_shape(g, a, b, "complex spectrum loss")?;
    }
    let re_mae = g.mae(pred.0, target.0);
    let im_mae = g.mae(pred.1, target.1);
    let ri = g.add(re_mae, im_mae);
    let wave = g.istft(pred.0, pred.1, stft, Readout::Aligned)?;
    let (re_c, im_c) = g.stft(wave, stft)?;
    let re_mse = g.mse(pred.0, re_c);
    let im_mse = g.mse(pred.1, im_c);
    let consistency = g.add(re_mse, im_mse);
    let total = g.weighted_sum(&[(lambda_ri, ri), (1.0, consistency)]);
    Ok(ComplexLosses {
        ri,
        consistency,
        total,
    })
}

/// `mean|M̂ − M| + mean(M̂ − M)²` on natural-log mel spectrograms.
pub fn mel_loss(g: &mut Graph, pred: Var, target: Var, cfg: &MelConfig) -> Result<Var> {
    same_shape(g, pred, target, "mel loss")?;
    let m_hat = log_mel(g, pred, cfg)?;
    let m = log_mel(g, target, cfg)?;
    let l1 = g.mae(m_hat, m);
    let l2 = g.mse(m_hat, m);
    Ok(g.add(l1, l2))
}

#[derive(Clone, Copy, Debug)]
pub struct SpectralLosses {
    pub amplitude: Var,
    pub phase: PhaseLosses,
    pub complex: ComplexLosses,
    pub mel: Var,
    pub total: Var,
}

/// `L_A + λ_P·L_P + λ_S·L_S + λ_M·L_M`.
pub fn spectral_level_loss(g: &mut Graph, amplitude: Var, phase: Var, complex: Var, mel: Var, w: &LossWeights) -> Var {
    g.weighted_sum(&[(1.0, amplitude), (w.phase, phase), (w.complex, complex), (w.mel, mel)])
}

/// Decoded and reference signals entering the spectral-level loss.
#[derive(Clone, Copy, Debug)]
pub struct SpectralPair {
    pub log_amplitude: Var,
    pub phase: Var,
    pub real: Var,
    pub imag: Var,
    pub waveform: Var,
}

/// Reference spectra and waveform of a `(B, T)` batch, as constants.
pub fn reference(g: &mut Graph, x: &Tensor, stft: &StftConfig) -> Result<SpectralPair> {
    let mut scratch = Graph::inference();
    let xv = scratch.constant(x.clone());
    let (re, im) = scratch.stft(xv, stft)?;
    let re = scratch.value(re).clone();
    let im = scratch.value(im).clone();
    let log_amplitude = re.zip_map(&im, |r, i| (r.hypot(i) + crate::dsp::AMP_EPS).ln());
    let phase = re.zip_map(&im, crate::dsp::phase_angle);
    Ok(SpectralPair {
        log_amplitude: g.constant(log_amplitude),
        phase: g.constant(phase),
        real: g.constant(re),
        imag: g.constant(im),
        waveform: g.constant(x.clone()),
    })
}

/// Complex spectrum `exp(Â)·e^{jP̂}` and its waveform for decoded maps.
pub fn decoded(g: &mut Graph, log_amplitude: Var, phase: Var, stft: &StftConfig) -> Result<SpectralPair> {
    let (real, imag) = g.polar(log_amplitude, phase);
    let waveform = g.istft(real, imag, stft, Readout::Aligned)?;
    Ok(SpectralPair {
        log_amplitude,
        phase,
        real,
        imag,
        waveform,
    })
}

/// Every spectral-level term between decoded and reference signals.
pub fn spectral_losses(
    g: &mut Graph,
    pred: &SpectralPair,
    target: &SpectralPair,
    mel: &MelConfig,
    w: &LossWeights,
) -> Result<SpectralLosses> {
    let amplitude = amplitude_loss(g, pred.log_amplitude, target.log_amplitude)?;
    let phase = phase_loss(g, pred.phase, target.phase)?;
    let complex = complex_spectrum_loss(
        g,
        (pred.real, pred.imag),
        (target.real, target.imag),
        &mel.stft,
        w.ri,
    )?;
    let mel = mel_loss(g, pred.waveform, target.waveform, mel)?;
    let total = spectral_level_loss(g, amplitude, phase.total, complex.total, mel, w);
    Ok(SpectralLosses {
        amplitude,
        phase,
        complex,
        mel,
        total,
    })
}

/// `MSE(Ĉ, C) + Σ_q MSE(L̂^q, L^q)` evaluated on plain tensors.
pub fn quantization_loss(code: &Tensor, q: &Quantized) -> f64 {
    let mse = |a: &Tensor, b: &Tensor| a.zip_map(b, |x, y| (x - y) * (x - y)).mean();
    let mut total = mse(&q.quantized, code);
    for (sel, level) in q.selected.iter().zip(&q.residuals) {
        total += mse(sel, level);
    }
    total
}

/// `mean max(0, 1 − D(x̂))`.
pub fn generator_adversarial(g: &mut Graph, fake: Var) -> Var {
    let neg = g.scale(fake, -1.0);
    let m = g.add_scalar(neg, 1.0);
    let r = g.relu(m);
    g.mean(r)
}

/// `mean max(0, 1 − D(x)) + mean max(0, 1 + D(x̂))`.
pub fn discriminator_adversarial(g: &mut Graph, real: Var, fake: Var) -> Var {
    let real_term = generator_adversarial(g, real);
    let shifted = g.add_scalar(fake, 1.0);
    let r = g.relu(shifted);
    let fake_term = g.mean(r);
    g.add(real_term, fake_term)
}

/// `(L_adv_G, L_adv_D)` for one sub-discriminator.
pub fn adversarial_losses(g: &mut Graph, real: Var, fake: Var) -> (Var, Var) {
    (generator_adversarial(g, fake), discriminator_adversarial(g, real, fake))
}

/// Sum over layers of the per-layer MAE.
pub fn feature_matching(g: &mut Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Validation(format!(
            "feature lists differ: {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        same_shape(g, r, f, "feature matching")?;
        terms.push((1.0, g.mae(f, r)));
    }
    Ok(g.weighted_sum(&terms))
}

fn check_banks(real: &BankOutput, fake: &BankOutput) -> Result<()> {
    if real.mpd.len() != fake.mpd.len() || real.mrd.len() != fake.mrd.len() {
        return Err(Error::Validation("discriminator outputs differ in size".into()));
    }
    Ok(())
}

/// `Σ_i (L_adv_G^{Pi} + L_FM^{Pi}) + λ_MRD·Σ_j (L_adv_G^{Rj} + L_FM^{Rj})`.
pub fn generator_gan_loss(g: &mut Graph, real: &BankOutput, fake: &BankOutput, lambda_mrd: f64) -> Result<Var> {
    check_banks(real, fake)?;
    let mut terms = Vec::new();
    for (subs_r, subs_f, w) in [(&real.mpd, &fake.mpd, 1.0), (&real.mrd, &fake.mrd, lambda_mrd)] {
        for (r, f) in subs_r.iter().zip(subs_f) {
            terms.push((w, generator_adversarial(g, f.score)));
            terms.push((w, feature_matching(g, &r.features, &f.features)?));
        }
    }
    Ok(g.weighted_sum(&terms))
}

/// `Σ_i L_adv_D^{Pi} + λ_MRD·Σ_j L_adv_D^{Rj}`.
pub fn discriminator_gan_loss(g: &mut Graph, real: &BankOutput, fake: &BankOutput, lambda_mrd: f64) -> Result<Var> {
    check_banks(real, fake)?;
    let mut terms = Vec::new();
    for (subs_r, subs_f, w) in [(&real.mpd, &fake.mpd, 1.0), (&real.mrd, &fake.mrd, lambda_mrd)] {
        for (r, f) in subs_r.iter().zip(subs_f) {
            terms.push((w, discriminator_adversarial(g, r.score, f.score)));
        }
    }
    Ok(g.weighted_sum(&terms))
}

/// `(L_G, L_D)` from the same pair of bank outputs.
pub fn gan_losses(g: &mut Graph, real: &BankOutput, fake: &BankOutput, lambda_mrd: f64) -> Result<(Var, Var)> {
    Ok((
        generator_gan_loss(g, real, fake, lambda_mrd)?,
        discriminator_gan_loss(g, real, fake, lambda_mrd)?,
    ))
}

/// Mean over taps of `MSE(student, teacher)`; teacher values are held
/// constant.
pub fn kd_loss(g: &mut Graph, teacher: &Taps, student: &Taps) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Validation(format!(
            "tap lists differ: teacher {} vs student {}",
            teacher.len(),
            student.len()
        )));
    }
    let w = 1.0 / teacher.len() as f64;
    let mut terms = Vec::with_capacity(teacher.len());
    for ((tn, t), (sn, s)) in teacher.iter().zip(student) {
        if tn != sn {
            return Err(Error::Validation(format!("tap {sn} aligned with {tn}")));
        }
        same_shape(g, *t, *s, tn)?;
        let t = g.detach(*t);
        terms.push((w, g.mse(*s, t)));
    }
    Ok(g.weighted_sum(&terms))
}
