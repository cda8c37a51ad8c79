//! Objective metrics between decoded and reference audio.

use std::collections::BTreeSet;
use std::f64::consts::{LN_10, PI};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::codec::CodecModel;
use crate::dsp::{self, StftConfig, AMP_EPS};
use crate::error::{Error, Result};
use crate::ops::anti_wrap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub stft: StftConfig,
    pub n_mel: usize,
    /// Cepstral coefficients `c_1..c_n` compared by MCD.
    pub n_cep: usize,
}

impl EvalConfig {
    pub fn new(sample_rate: u32) -> Self {
        Self {
            stft: StftConfig::default().with_sample_rate(sample_rate),
            n_mel: 80,
            n_cep: 13,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.n_cep == 0 || self.n_cep >= self.n_mel {
            return Err(Error::Config(format!(
                "n_cep must be in 1..{}, got {}",
                self.n_mel, self.n_cep
            )));
        }
        Ok(())
    }
}

fn aligned<'a>(a: &'a [f64], b: &'a [f64], cfg: &StftConfig) -> Result<(&'a [f64], &'a [f64])> {
    let n = a.len().min(b.len());
    if cfg.num_frames(n) == 0 {
        return Err(Error::EmptyInput("signals shorter than one frame shift"));
    }
    Ok((&a[..n], &b[..n]))
}

fn rows(t: &Tensor) -> impl Iterator<Item = &[f64]> {
    t.data().chunks(t.shape()[1])
}

/// Log-spectral distance in dB.
pub fn lsd(x_hat: &[f64], x: &[f64], cfg: &EvalConfig) -> Result<f64> {
    let (x_hat, x) = aligned(x_hat, x, &cfg.stft)?;
    let amp = |s: &[f64]| -> Result<Tensor> {
        let (re, im) = dsp::stft_parts(s, &cfg.stft)?;
        Ok(re.zip_map(&im, |r, i| r.hypot(i).max(AMP_EPS).log10()))
    };
    let (a, b) = (amp(x_hat)?, amp(x)?);
    let per_frame: Vec<f64> = rows(&a)
        .zip(rows(&b))
        .map(|(p, q)| {
            let ms = p.iter().zip(q).map(|(u, v)| (20.0 * (u - v)).powi(2)).sum::<f64>() / p.len() as f64;
            ms.sqrt()
        })
        .collect();
    Ok(mean(&per_frame))
}

/// Mel cepstrum `[frames, n_cep + 1]` (including `c_0`) from an orthonormal
/// DCT-II of natural-log mel amplitudes.
pub fn mel_cepstrum(x: &[f64], cfg: &EvalConfig) -> Result<Tensor> {
    let logmel = dsp::mel_spectrogram(x, &cfg.stft, cfg.n_mel)?;
    let m = cfg.n_mel;
    let k_max = cfg.n_cep + 1;
    let basis: Vec<f64> = (0..k_max)
        .flat_map(|k| {
            let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            (0..m).map(move |j| scale * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos())
        })
        .collect();
    let mut out = Vec::with_capacity(logmel.shape()[0] * k_max);
    for row in rows(&logmel) {
        for k in 0..k_max {
            out.push(row.iter().zip(&basis[k * m..(k + 1) * m]).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Tensor::new(&[logmel.shape()[0], k_max], out))
}

/// Frame-averaged `(10/ln10)·√(2·Σ_{k≥1}(c_k − ĉ_k)²)` over `[frames, K]` cepstra.
pub fn mcd_from_cepstra(c_hat: &Tensor, c: &Tensor) -> Result<f64> {
    if c_hat.shape() != c.shape() || c.rank() != 2 {
        return Err(Error::Shape(format!("mcd: {:?} vs {:?}", c_hat.shape(), c.shape())));
    }
    if c.shape()[0] == 0 {
        return Err(Error::EmptyInput("no cepstral frames"));
    }
    let per_frame: Vec<f64> = rows(c_hat)
        .zip(rows(c))
        .map(|(p, q)| {
            let s: f64 = p[1..].iter().zip(&q[1..]).map(|(u, v)| (u - v).powi(2)).sum();
            10.0 / LN_10 * (2.0 * s).sqrt()
        })
        .collect();
    Ok(mean(&per_frame))
}

/// Mel-cepstral distortion in dB.
pub fn mcd(x_hat: &[f64], x: &[f64], cfg: &EvalConfig) -> Result<f64> {
    let (x_hat, x) = aligned(x_hat, x, &cfg.stft)?;
    mcd_from_cepstra(&mel_cepstrum(x_hat, cfg)?, &mel_cepstrum(x, cfg)?)
}

/// Anti-wrapping phase distances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Awpd {
    /// Instantaneous phase, rad.
    pub ip: f64,
    /// Group delay, s.
    pub gd: f64,
    /// Instantaneous angular frequency, rad/s.
    pub iaf: f64,
}

/// Per-frame RMS over frequency of `f_AW(d)`, averaged over frames, for
/// difference matrices `[frames, bins]`.
fn rms_anti_wrapped(d: &[f64], frames: usize, bins: usize) -> f64 {
    let per_frame: Vec<f64> = (0..frames)
        .map(|f| {
            let row = &d[f * bins..(f + 1) * bins];
            (row.iter().map(|v| anti_wrap(*v).powi(2)).sum::<f64>() / bins as f64).sqrt()
        })
        .collect();
    mean(&per_frame)
}

/// AWPD from phase spectra `[frames, bins]` analysed with `stft`.
pub fn awpd_phases(p_hat: &Tensor, p: &Tensor, stft: &StftConfig) -> Result<Awpd> {
    if p_hat.shape() != p.shape() || p.rank() != 2 {
        return Err(Error::Shape(format!("awpd: {:?} vs {:?}", p_hat.shape(), p.shape())));
    }
    let (frames, bins) = (p.shape()[0], p.shape()[1]);
    if frames < 2 || bins < 2 {
        return Err(Error::EmptyInput("awpd needs at least two frames and two bins"));
    }
    let (a, b) = (p_hat.data(), p.data());
    let at = |f: usize, k: usize| f * bins + k;

    let ip: Vec<f64> = a.iter().zip(b).map(|(u, v)| u - v).collect();
    let mut gd = Vec::with_capacity(frames * (bins - 1));
    for f in 0..frames {
        for k in 0..bins - 1 {
            gd.push((a[at(f, k + 1)] - a[at(f, k)]) - (b[at(f, k + 1)] - b[at(f, k)]));
        }
    }
    let mut iaf = Vec::with_capacity((frames - 1) * bins);
    for f in 0..frames - 1 {
        for k in 0..bins {
            iaf.push((a[at(f + 1, k)] - a[at(f, k)]) - (b[at(f + 1, k)] - b[at(f, k)]));
        }
    }
    let sr = stft.sample_rate as f64;
    let bin_spacing = 2.0 * PI * sr / stft.fft_size as f64;
    let frame_spacing = stft.frame_shift as f64 / sr;
    Ok(Awpd {
        ip: rms_anti_wrapped(&ip, frames, bins),
        gd: rms_anti_wrapped(&gd, frames, bins - 1) / bin_spacing,
        iaf: rms_anti_wrapped(&iaf, frames - 1, bins) / frame_spacing,
    })
}

pub fn awpd(x_hat: &[f64], x: &[f64], cfg: &EvalConfig) -> Result<Awpd> {
    let (x_hat, x) = aligned(x_hat, x, &cfg.stft)?;
    let phase = |s: &[f64]| -> Result<Tensor> {
        let (re, im) = dsp::stft_parts(s, &cfg.stft)?;
        dsp::phase_from_parts(&re, &im)
    };
    awpd_phases(&phase(x_hat)?, &phase(x)?, &cfg.stft)
}

/// Mean wall-clock of `run` over `runs` timed calls after `warmup` untimed
/// ones, divided by `duration` seconds. Executes on a single thread.
pub fn measure_rtf(duration: f64, warmup: usize, runs: usize, mut run: impl FnMut() -> Result<()> + Send) -> Result<f64> {
    if duration <= 0.0 || runs == 0 {
        return Err(Error::Validation("rtf needs positive duration and at least one run".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    pool.install(|| {
        for _ in 0..warmup {
            run()?;
        }
        let start = Instant::now();
        for _ in 0..runs {
            run()?;
        }
        Ok(start.elapsed().as_secs_f64() / runs as f64 / duration)
    })
}

/// Real-time factor of encode, quantise and decode of `x`.
pub fn codec_rtf(model: &CodecModel, x: &[f64], warmup: usize, runs: usize) -> Result<f64> {
    let duration = x.len() as f64 / model.config.stft.sample_rate as f64;
    measure_rtf(duration, warmup, runs, || model.round_trip(x).map(|_| ()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub name: String,
    pub lsd_db: f64,
    pub mcd_db: f64,
    pub awpd_ip_rad: f64,
    pub awpd_gd: f64,
    pub awpd_iaf: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rtf: Option<f64>,
}

pub fn evaluate_pair(name: &str, x_hat: &[f64], x: &[f64], cfg: &EvalConfig) -> Result<UtteranceMetrics> {
    let a = awpd(x_hat, x, cfg)?;
    Ok(UtteranceMetrics {
        name: name.to_string(),
        lsd_db: lsd(x_hat, x, cfg)?,
        mcd_db: mcd(x_hat, x, cfg)?,
        awpd_ip_rad: a.ip,
        awpd_gd: a.gd,
        awpd_iaf: a.iaf,
        rtf: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lsd_db: f64,
    pub mcd_db: f64,
    pub awpd_ip_rad: f64,
    pub awpd_gd: f64,
    pub awpd_iaf: f64,
    pub rtf: Option<f64>,
    pub utterances: Vec<UtteranceMetrics>,
}

impl MetricReport {
    pub fn from_utterances(utterances: Vec<UtteranceMetrics>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::EmptyInput("no utterances to report"));
        }
        let avg = |f: fn(&UtteranceMetrics) -> f64| mean(&utterances.iter().map(f).collect::<Vec<_>>());
        let rtfs: Vec<f64> = utterances.iter().filter_map(|u| u.rtf).collect();
        Ok(Self {
            lsd_db: avg(|u| u.lsd_db),
            mcd_db: avg(|u| u.mcd_db),
            awpd_ip_rad: avg(|u| u.awpd_ip_rad),
            awpd_gd: avg(|u| u.awpd_gd),
            awpd_iaf: avg(|u| u.awpd_iaf),
            rtf: (!rtfs.is_empty()).then(|| mean(&rtfs)),
            utterances,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<24} {:>9} {:>9} {:>10} {:>12} {:>12}\n",
            "utterance", "LSD(dB)", "MCD(dB)", "AWPD_IP", "AWPD_GD(s)", "AWPD_IAF"
        );
        let line = |name: &str, l: f64, m: f64, ip: f64, gd: f64, iaf: f64| {
            format!("{name:<24} {l:>9.4} {m:>9.4} {ip:>10.4} {gd:>12.4e} {iaf:>12.2}\n")
        };
        for u in &self.utterances {
            s += &line(&u.name, u.lsd_db, u.mcd_db, u.awpd_ip_rad, u.awpd_gd, u.awpd_iaf);
        }
        s += &line("mean", self.lsd_db, self.mcd_db, self.awpd_ip_rad, self.awpd_gd, self.awpd_iaf);
        if let Some(r) = self.rtf {
            s += &format!("RTF {r:.4}\n");
        }
        s
    }

    /// One JSON object per utterance followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for u in &self.utterances {
            s += &serde_json::to_string(u).expect("metrics serialise");
            s.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "utterances": self.utterances.len(),
            "lsd_db": self.lsd_db,
            "mcd_db": self.mcd_db,
            "awpd_ip_rad": self.awpd_ip_rad,
            "awpd_gd": self.awpd_gd,
            "awpd_iaf": self.awpd_iaf,
            "rtf": self.rtf,
        });
        s += &summary.to_string();
        s.push('\n');
        s
    }
}

fn file_names(paths: &[PathBuf]) -> BTreeSet<String> {
    paths
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

/// Compare same-named WAV files in `degraded` against `reference`. The two
/// directories must hold identical file lists.
pub fn evaluate_dirs(reference: impl AsRef<Path>, degraded: impl AsRef<Path>, cfg: Option<EvalConfig>) -> Result<MetricReport> {
    let (reference, degraded) = (reference.as_ref(), degraded.as_ref());
    let refs = audio::list_wavs(reference)?;
    let degs = audio::list_wavs(degraded)?;
    let (rn, dn) = (file_names(&refs), file_names(&degs));
    if rn != dn {
        let only_ref: Vec<_> = rn.difference(&dn).cloned().collect();
        let only_deg: Vec<_> = dn.difference(&rn).cloned().collect();
        return Err(Error::Validation(format!(
            "file lists differ: only in reference {only_ref:?}, only in degraded {only_deg:?}"
        )));
    }
    if rn.is_empty() {
        return Err(Error::EmptyInput("no WAV files to evaluate"));
    }
    let utterances = rn
        .par_iter()
        .map(|name| {
            let r = audio::read_wav(reference.join(name))?;
            let d = audio::read_wav(degraded.join(name))?;
            if r.sample_rate != d.sample_rate {
                return Err(Error::Validation(format!(
                    "{name}: sample rates differ ({} vs {})",
                    r.sample_rate, d.sample_rate
                )));
            }
            let cfg = cfg.unwrap_or_else(|| EvalConfig::new(r.sample_rate));
            cfg.validate()?;
            evaluate_pair(name, &d.samples, &r.samples, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_utterances(utterances)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
