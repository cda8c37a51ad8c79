//! Encoder and decoder graphs, the codec model container and chunked
//! streaming inference.
//!
//! Network features are `(batch, channels, frames)`. Spectra enter as
//! `(batch, N, F)` log-amplitude and phase maps and leave the same way.

mod stream;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, ComplexSpectrum, Framing, Readout, SpectralFrames, StftConfig};
use crate::error::{BitstreamError, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::checkpoint::{Checkpoint, Precision};
use crate::nn::{
    Conv1d, ConvNextBlock, ConvNextConfig, ConvSpec, ConvTranspose1d, FeedForward, LayerNorm,
    ParamStore, Taps,
};
use crate::quantizer::{self, quantize_graph, Codebook, RvqState, StreamHeader, TokenBitstream, TokenFrame};
use crate::tensor::Tensor;

pub use stream::{StreamDecoder, StreamEncoder, StreamOutput, StreamSession, StreamState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Channel size `K`.
    pub channels: usize,
    /// ConvNeXt hidden width `K_H`.
    pub hidden: usize,
    /// Code dimension `N_c`.
    pub code_dim: usize,
    /// Down/upsampling ratio `D`.
    pub ratio: usize,
    pub n_blocks: usize,
    pub conv_kernel: usize,
    pub deconv_kernel: usize,
    /// Decoder feed-forward width `S`.
    pub ff_width: usize,
    pub num_quantizers: usize,
    pub codebook_size: usize,
    pub stft: StftConfig,
    pub causal: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            hidden: 512,
            code_dim: 32,
            ratio: 8,
            n_blocks: 8,
            conv_kernel: 7,
            deconv_kernel: 16,
            ff_width: 512,
            num_quantizers: 4,
            codebook_size: 1024,
            stft: StftConfig::default(),
            causal: false,
        }
    }
}

impl CodecConfig {
    /// Small 16 kHz model used for desk-scale training.
    pub fn tiny() -> Self {
        Self {
            channels: 64,
            hidden: 128,
            code_dim: 32,
            n_blocks: 2,
            ff_width: 128,
            num_quantizers: 2,
            codebook_size: 64,
            stft: StftConfig::default().with_sample_rate(16_000),
            ..Self::default()
        }
    }

    /// Very small model for unit tests and probes.
    pub fn micro() -> Self {
        Self {
            channels: 8,
            hidden: 16,
            code_dim: 4,
            ratio: 4,
            n_blocks: 1,
            conv_kernel: 7,
            deconv_kernel: 8,
            ff_width: 16,
            num_quantizers: 2,
            codebook_size: 8,
            stft: StftConfig {
                frame_length: 64,
                frame_shift: 8,
                fft_size: 64,
                sample_rate: 8_000,
                ..StftConfig::default()
            },
            causal: false,
        }
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.ratio == 0 {
            return Err(Error::Config("ratio D must be >= 1".into()));
        }
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channel size K = {} must be even",
                self.channels
            )));
        }
        if self.code_dim == 0 || self.code_dim >= self.channels {
            return Err(Error::Config(format!(
                "code dimension N_c = {} must be in 1..K",
                self.code_dim
            )));
        }
        if self.causal && self.conv_kernel > 2 * self.ratio - 1 {
            return Err(Error::Config(format!(
                "causal downsampling kernel {} exceeds 2D−1 = {}",
                self.conv_kernel,
                2 * self.ratio - 1
            )));
        }
        if self.deconv_kernel < self.ratio {
            return Err(Error::Config("deconvolution kernel shorter than D".into()));
        }
        if self.num_quantizers == 0 || self.codebook_size < 2 {
            return Err(Error::Config("quantizer needs Q >= 1 and M >= 2".into()));
        }
        if self.n_blocks == 0 || self.hidden == 0 || self.ff_width == 0 || self.conv_kernel == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// STFT used for analysis: causal framing for the streamable variant.
    pub fn analysis_stft(&self) -> StftConfig {
        self.stft.with_framing(if self.causal {
            Framing::Causal
        } else {
            Framing::Centered
        })
    }

    pub fn readout(&self) -> Readout {
        if self.causal {
            Readout::Delayed
        } else {
            Readout::Aligned
        }
    }

    /// Samples per code frame, `w_s·D`; also the streaming latency.
    pub fn hop(&self) -> usize {
        self.stft.frame_shift * self.ratio
    }

    pub fn code_frame_rate(&self) -> f64 {
        self.stft.sample_rate as f64 / self.hop() as f64
    }

    pub fn latency_ms(&self) -> f64 {
        1000.0 * self.hop() as f64 / self.stft.sample_rate as f64
    }

    pub fn bitrate_kbps(&self) -> f64 {
        quantizer::bitrate_kbps(
            self.stft.sample_rate,
            self.stft.frame_shift,
            self.ratio,
            self.num_quantizers,
            self.codebook_size,
        )
    }

    /// Closed-form count of trainable scalars, codebooks included.
    pub fn param_count(&self) -> usize {
        let (k, kh, nc, n, s) = (
            self.channels,
            self.hidden,
            self.code_dim,
            self.stft.n_bins(),
            self.ff_width,
        );
        let ks = if self.causal { 1 } else { self.conv_kernel };
        let conv = |i: usize, o: usize, kern: usize| i * o * kern + o;
        let ln = |c: usize| 2 * c;
        let mixer = if self.causal {
            conv(k, k, 1)
        } else {
            k * self.conv_kernel + k
        };
        let block = mixer + ln(k) + conv(k, kh, 1) + 2 * kh + conv(kh, k, 1);
        let stack = self.n_blocks * block;
        let enc_branch =
            conv(n, k, ks) + ln(k) + stack + ln(k) + conv(k, k, 1) + conv(k, k / 2, self.conv_kernel);
        let encoder = 2 * enc_branch + conv(k, nc, ks);
        let dec_branch = (k / 2) * k * self.deconv_kernel + k + ln(k) + stack + ln(k) + conv(k, s, 1);
        let decoder = conv(nc, k / 2, ks) + 2 * dec_branch + 3 * conv(s, n, ks);
        encoder + decoder + self.num_quantizers * self.codebook_size * nc
    }
}

/// Continuous or quantized code, `[F_c, N_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Tensor,
    pub frame_rate: f64,
}

impl LatentCode {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Stride-1 layer: a convolution, or a feed-forward layer when causal.
#[derive(Clone, Debug)]
enum Pointwise {
    Conv(Conv1d),
    Ff(FeedForward),
}

impl Pointwise {
    fn new(name: String, i: usize, o: usize, kernel: usize, causal: bool) -> Result<Self> {
        Ok(if causal {
            Pointwise::Ff(FeedForward::new(name, i, o))
        } else {
            Pointwise::Conv(Conv1d::new(name, ConvSpec::new(i, o, kernel))?)
        })
    }

    fn name(&self) -> &str {
        match self {
            Pointwise::Conv(c) => &c.name,
            Pointwise::Ff(f) => &f.0.name,
        }
    }

    fn declare(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        match self {
            Pointwise::Conv(c) => c.declare(store, rng),
            Pointwise::Ff(f) => f.declare(store, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Pointwise::Conv(c) => c.forward(g, store, x),
            Pointwise::Ff(f) => f.forward(g, store, x),
        }
    }
}

#[derive(Clone, Debug)]
struct SubEncoder {
    input: Pointwise,
    norm_in: LayerNorm,
    blocks: Vec<ConvNextBlock>,
    norm_out: LayerNorm,
    ff: FeedForward,
    down: Conv1d,
}

#[derive(Clone, Debug)]
struct SubDecoder {
    up: ConvTranspose1d,
    norm_in: LayerNorm,
    blocks: Vec<ConvNextBlock>,
    norm_out: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Architecture {
    enc_amp: SubEncoder,
    enc_pha: SubEncoder,
    fuse: Pointwise,
    aug: Pointwise,
    dec_amp: SubDecoder,
    dec_pha: SubDecoder,
    amp_out: Pointwise,
    re_out: Pointwise,
    im_out: Pointwise,
}

fn blocks(prefix: &str, cfg: &CodecConfig) -> Result<Vec<ConvNextBlock>> {
    (0..cfg.n_blocks)
        .map(|i| {
            ConvNextBlock::new(
                format!("{prefix}.block{i}"),
                ConvNextConfig {
                    dim: cfg.channels,
                    hidden: cfg.hidden,
                    dw_kernel: cfg.conv_kernel,
                    causal: cfg.causal,
                },
            )
        })
        .collect()
}

impl Architecture {
    fn new(cfg: &CodecConfig) -> Result<Self> {
        let (k, n, c) = (cfg.channels, cfg.stft.n_bins(), cfg.causal);
        let sub_encoder = |p: &str| -> Result<SubEncoder> {
            Ok(SubEncoder {
                input: Pointwise::new(format!("{p}.input"), n, k, cfg.conv_kernel, c)?,
                norm_in: LayerNorm::new(format!("{p}.norm_in"), k),
                blocks: blocks(p, cfg)?,
                norm_out: LayerNorm::new(format!("{p}.norm_out"), k),
                ff: FeedForward::new(format!("{p}.ff"), k, k),
                down: Conv1d::new(
                    format!("{p}.down"),
                    ConvSpec::new(k, k / 2, cfg.conv_kernel)
                        .stride(cfg.ratio)
                        .causal(c),
                )?,
            })
        };
        let sub_decoder = |p: &str| -> Result<SubDecoder> {
            Ok(SubDecoder {
                up: ConvTranspose1d::new(
                    format!("{p}.up"),
                    ConvSpec::new(k / 2, k, cfg.deconv_kernel)
                        .stride(cfg.ratio)
                        .causal(c),
                )?,
                norm_in: LayerNorm::new(format!("{p}.norm_in"), k),
                blocks: blocks(p, cfg)?,
                norm_out: LayerNorm::new(format!("{p}.norm_out"), k),
                ff: FeedForward::new(format!("{p}.ff"), k, cfg.ff_width),
            })
        };
        Ok(Self {
            enc_amp: sub_encoder("enc.amp")?,
            enc_pha: sub_encoder("enc.pha")?,
            fuse: Pointwise::new("enc.fuse".into(), k, cfg.code_dim, cfg.conv_kernel, c)?,
            aug: Pointwise::new("dec.aug".into(), cfg.code_dim, k / 2, cfg.conv_kernel, c)?,
            dec_amp: sub_decoder("dec.amp")?,
            dec_pha: sub_decoder("dec.pha")?,
            amp_out: Pointwise::new("dec.amp.out".into(), cfg.ff_width, n, cfg.conv_kernel, c)?,
            re_out: Pointwise::new("dec.pha.re".into(), cfg.ff_width, n, cfg.conv_kernel, c)?,
            im_out: Pointwise::new("dec.pha.im".into(), cfg.ff_width, n, cfg.conv_kernel, c)?,
        })
    }

    fn declare(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for e in [&self.enc_amp, &self.enc_pha] {
            e.input.declare(store, rng);
            e.norm_in.declare(store, rng);
            for b in &e.blocks {
                b.declare(store, rng);
            }
            e.norm_out.declare(store, rng);
            e.ff.declare(store, rng);
            e.down.declare(store, rng);
        }
        self.fuse.declare(store, rng);
        self.aug.declare(store, rng);
        for d in [&self.dec_amp, &self.dec_pha] {
            d.up.declare(store, rng);
            d.norm_in.declare(store, rng);
            for b in &d.blocks {
                b.declare(store, rng);
            }
            d.norm_out.declare(store, rng);
            d.ff.declare(store, rng);
        }
        self.amp_out.declare(store, rng);
        self.re_out.declare(store, rng);
        self.im_out.declare(store, rng);
    }
}

fn record(g: &Graph, taps: &mut Taps, name: &str, v: Var) -> Result<Var> {
    if !g.value(v).all_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    taps.push((name.to_string(), v));
    Ok(v)
}

impl SubEncoder {
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, taps: &mut Taps) -> Result<Var> {
        let h = self.input.forward(g, s, x)?;
        let h = record(g, taps, self.input.name(), h)?;
        let mut h = self.norm_in.forward(g, s, h)?;
        for b in &self.blocks {
            h = b.forward_tapped(g, s, h, taps)?;
        }
        let h = self.norm_out.forward(g, s, h)?;
        let h = self.ff.forward(g, s, h)?;
        let h = record(g, taps, &self.ff.0.name, h)?;
        let h = self.down.forward(g, s, h)?;
        record(g, taps, &self.down.name, h)
    }
}

impl SubDecoder {
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, taps: &mut Taps) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = record(g, taps, &self.up.name, h)?;
        let mut h = self.norm_in.forward(g, s, h)?;
        for b in &self.blocks {
            h = b.forward_tapped(g, s, h, taps)?;
        }
        let h = self.norm_out.forward(g, s, h)?;
        let h = self.ff.forward(g, s, h)?;
        record(g, taps, &self.ff.0.name, h)
    }
}

/// Graph outputs of a full generator pass.
pub struct ForwardOutput {
    /// Continuous code `(B, N_c, F_c)`.
    pub code: Var,
    /// Code fed to the decoder (straight-through quantized when enabled).
    pub decoder_input: Var,
    /// Quantization loss, when quantizing.
    pub quantization_loss: Option<Var>,
    pub tokens: Vec<TokenFrame>,
    /// Stage inputs of the quantizer as `[B·F_c, N_c]` values.
    pub residuals: Vec<Tensor>,
    pub log_amplitude: Var,
    pub real: Var,
    pub imag: Var,
    pub phase: Var,
    pub taps: Taps,
}

/// Encoder, quantizer and decoder parameters with their configuration.
#[derive(Clone, Debug)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub params: ParamStore,
    pub rvq: RvqState,
    arch: Architecture,
    frozen: bool,
}

impl CodecModel {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        arch.declare(&mut params, &mut rng);
        let rvq = RvqState::random(
            config.num_quantizers,
            config.codebook_size,
            config.code_dim,
            0.1,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            rvq,
            arch,
            frozen: false,
        })
    }

    /// Build from stored parameters, checking every shape against `config`.
    pub fn from_parts(config: CodecConfig, params: ParamStore, rvq: RvqState) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        if rvq.num_quantizers() != config.num_quantizers
            || rvq.codebook_size() != config.codebook_size
            || rvq.dim() != config.code_dim
        {
            return Err(Error::Checkpoint("codebooks do not match the configuration".into()));
        }
        Ok(Self {
            config,
            params,
            rvq,
            arch: reference.arch,
            frozen: false,
        })
    }

    /// Freeze all parameters: graph passes bind them as constants.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Allocated trainable scalars, codebooks included.
    pub fn num_params(&self) -> usize {
        self.params.num_scalars() + self.rvq.books.iter().map(|b| b.vectors.numel()).sum::<usize>()
    }

    pub fn analysis_stft(&self) -> StftConfig {
        self.config.analysis_stft()
    }

    /// Right-trim `x` to a whole number of code frames.
    pub fn trim<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..x.len() / self.config.hop() * self.config.hop()]
    }

    /// Spectra of `x` after trimming to a multiple of `w_s·D`.
    pub fn analyze(&self, x: &[f64]) -> Result<SpectralFrames> {
        let x = self.trim(x);
        if x.is_empty() {
            return Err(Error::EmptyInput("waveform shorter than one code frame"));
        }
        dsp::stft(x, &self.analysis_stft())
    }

    fn bind_books(&self, g: &mut Graph) -> Vec<Var> {
        self.rvq
            .books
            .iter()
            .enumerate()
            .map(|(q, b)| {
                if self.frozen {
                    g.constant(b.vectors.clone())
                } else {
                    g.param(&RvqState::param_name(q), &b.vectors)
                }
            })
            .collect()
    }

    fn check_spectra(&self, g: &Graph, v: Var) -> Result<()> {
        let s = g.shape(v);
        if s.len() != 3 || s[1] != self.config.stft.n_bins() {
            return Err(Error::Shape(format!(
                "spectra must be (B, {}, F), got {s:?}",
                self.config.stft.n_bins()
            )));
        }
        if s[2] % self.config.ratio != 0 {
            return Err(Error::Framing {
                frames: s[2],
                ratio: self.config.ratio,
            });
        }
        Ok(())
    }

    /// Encoder graph: `(B, N, F)` spectra to a `(B, N_c, F/D)` code.
    pub fn encode_graph(&self, g: &mut Graph, amp: Var, pha: Var, taps: &mut Taps) -> Result<Var> {
        self.check_spectra(g, amp)?;
        self.check_spectra(g, pha)?;
        let s = &self.params;
        let ca = self.arch.enc_amp.forward(g, s, amp, taps)?;
        let cp = self.arch.enc_pha.forward(g, s, pha, taps)?;
        let cat = g.concat(&[ca, cp], 1);
        let c = self.arch.fuse.forward(g, s, cat)?;
        record(g, taps, self.arch.fuse.name(), c)
    }

    /// Decoder graph: `(B, N_c, F_c)` code to log-amplitude, R, I and phase
    /// maps of shape `(B, N, F_c·D)`.
    pub fn decode_graph(&self, g: &mut Graph, code: Var, taps: &mut Taps) -> Result<[Var; 4]> {
        let s = &self.params;
        let shape = g.shape(code);
        if shape.len() != 3 || shape[1] != self.config.code_dim {
            return Err(Error::Shape(format!(
                "code must be (B, {}, F_c), got {shape:?}",
                self.config.code_dim
            )));
        }
        let h = self.arch.aug.forward(g, s, code)?;
        let h = record(g, taps, self.arch.aug.name(), h)?;
        let ha = self.arch.dec_amp.forward(g, s, h, taps)?;
        let amp = self.arch.amp_out.forward(g, s, ha)?;
        let amp = record(g, taps, self.arch.amp_out.name(), amp)?;
        let hp = self.arch.dec_pha.forward(g, s, h, taps)?;
        let re = self.arch.re_out.forward(g, s, hp)?;
        let re = record(g, taps, self.arch.re_out.name(), re)?;
        let im = self.arch.im_out.forward(g, s, hp)?;
        let im = record(g, taps, self.arch.im_out.name(), im)?;
        let phase = g.phase(re, im);
        Ok([amp, re, im, phase])
    }

    /// Full generator pass with the straight-through quantizer.
    pub fn forward_graph(&self, g: &mut Graph, amp: Var, pha: Var) -> Result<ForwardOutput> {
        let mut taps = Taps::new();
        let code = self.encode_graph(g, amp, pha, &mut taps)?;
        let (b, nc, fc) = g.value(code).dims3();
        let rows = g.permute(code, &[0, 2, 1]);
        let rows = g.reshape(rows, &[b * fc, nc]);
        let books = self.bind_books(g);
        let gq = quantize_graph(g, rows, &books)?;
        let st = g.reshape(gq.straight_through, &[b, fc, nc]);
        let st = g.permute(st, &[0, 2, 1]);
        let st = record(g, &mut taps, "quantizer", st)?;
        let [log_amplitude, real, imag, phase] = self.decode_graph(g, st, &mut taps)?;
        Ok(ForwardOutput {
            code,
            decoder_input: st,
            quantization_loss: Some(gq.loss),
            tokens: gq.tokens,
            residuals: gq.residuals,
            log_amplitude,
            real,
            imag,
            phase,
            taps,
        })
    }

    /// Ordered names of every distillation tap.
    pub fn distill_probe_points(&self) -> Vec<String> {
        let mut names = Vec::new();
        let push_blocks = |names: &mut Vec<String>, blocks: &[ConvNextBlock]| {
            for b in blocks {
                names.push(format!("{}.dwconv", b.name));
                names.push(format!("{}.pwconv1", b.name));
                names.push(format!("{}.pwconv2", b.name));
                names.push(b.name.clone());
            }
        };
        for e in [&self.arch.enc_amp, &self.arch.enc_pha] {
            names.push(e.input.name().to_string());
            push_blocks(&mut names, &e.blocks);
            names.push(e.ff.0.name.clone());
            names.push(e.down.name.clone());
        }
        names.push(self.arch.fuse.name().to_string());
        names.push("quantizer".into());
        names.push(self.arch.aug.name().to_string());
        let d = &self.arch.dec_amp;
        names.push(d.up.name.clone());
        push_blocks(&mut names, &d.blocks);
        names.push(d.ff.0.name.clone());
        names.push(self.arch.amp_out.name().to_string());
        let d = &self.arch.dec_pha;
        names.push(d.up.name.clone());
        push_blocks(&mut names, &d.blocks);
        names.push(d.ff.0.name.clone());
        names.push(self.arch.re_out.name().to_string());
        names.push(self.arch.im_out.name().to_string());
        names
    }

    /// `C = Encoder(A, P)`.
    pub fn encode(&self, frames: &SpectralFrames) -> Result<LatentCode> {
        let mut g = Graph::inference();
        let amp = g.constant(to_channels(&frames.log_amplitude));
        let pha = g.constant(to_channels(&frames.phase));
        let code = self.encode_graph(&mut g, amp, pha, &mut Taps::new())?;
        Ok(LatentCode {
            values: from_channels(g.value(code), 0),
            frame_rate: self.config.code_frame_rate(),
        })
    }

    /// Quantize a code; returns `Ĉ` and the tokens.
    pub fn quantize(&self, code: &LatentCode) -> Result<(LatentCode, Vec<TokenFrame>)> {
        let q = quantizer::quantize(&code.values, &self.rvq)?;
        Ok((
            LatentCode {
                values: q.quantized,
                frame_rate: code.frame_rate,
            },
            q.tokens,
        ))
    }

    pub fn dequantize(&self, tokens: &[TokenFrame]) -> Result<LatentCode> {
        Ok(LatentCode {
            values: quantizer::dequantize(tokens, &self.rvq)?,
            frame_rate: self.config.code_frame_rate(),
        })
    }

    /// `Â, P̂ = Decoder(Ĉ)`.
    pub fn decode(&self, code: &LatentCode) -> Result<SpectralFrames> {
        let mut g = Graph::inference();
        let c = g.constant(to_channels(&code.values));
        let [amp, _, _, phase] = self.decode_graph(&mut g, c, &mut Taps::new())?;
        Ok(SpectralFrames {
            log_amplitude: from_channels(g.value(amp), 0),
            phase: from_channels(g.value(phase), 0),
            config: self.analysis_stft(),
        })
    }

    /// Waveform synthesis for decoded spectra, using the model's readout.
    pub fn synthesize(&self, frames: &SpectralFrames) -> Result<Vec<f64>> {
        let spec: ComplexSpectrum = dsp::complex_from_amp_phase(frames);
        dsp::istft_readout(&spec, self.config.readout())
    }

    /// decode → complex spectrum → ISTFT; `F_c·D·w_s` samples.
    ///
    /// Causal models read the synthesis buffer with [`Readout::Delayed`],
    /// so output block `b` depends only on input blocks up to `b`.
    pub fn reconstruct(&self, code: &LatentCode) -> Result<Vec<f64>> {
        self.synthesize(&self.decode(code)?)
    }

    pub fn encode_waveform(&self, x: &[f64]) -> Result<Vec<TokenFrame>> {
        let code = self.encode(&self.analyze(x)?)?;
        Ok(self.quantize(&code)?.1)
    }

    pub fn decode_tokens(&self, tokens: &[TokenFrame]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        self.reconstruct(&self.dequantize(tokens)?)
    }

    /// Encode `x` into a packed token stream.
    pub fn encode_bitstream(&self, x: &[f64]) -> Result<TokenBitstream> {
        let tokens = self.encode_waveform(x)?;
        let header = StreamHeader::new(&self.analysis_stft(), self.config.ratio, &self.rvq, tokens.len());
        quantizer::pack(&tokens, header)
    }

    /// Decode a packed token stream whose header matches this model.
    pub fn decode_bitstream(&self, stream: &TokenBitstream) -> Result<Vec<f64>> {
        let expect = StreamHeader::new(&self.analysis_stft(), self.config.ratio, &self.rvq, stream.header.frames as usize);
        if stream.header != expect {
            return Err(BitstreamError::Header(format!(
                "stream header {:?} does not match model {:?}",
                stream.header, expect
            ))
            .into());
        }
        self.decode_tokens(&quantizer::unpack(stream)?)
    }

    /// Algorithmic latency in samples found by perturbing single input
    /// samples at block edges and locating the earliest output change.
    pub fn probe_latency(&self, x: &[f64]) -> Result<usize> {
        if !self.config.causal {
            return Err(Error::Mode("latency probe needs a causal model".into()));
        }
        let hop = self.config.hop();
        let blocks = x.len() / hop;
        if blocks < 3 {
            return Err(Error::EmptyInput("latency probe needs at least three code frames"));
        }
        let x = &x[..blocks * hop];
        let clean = self.round_trip_continuous(x)?;
        let mut latency = 0;
        for b in 1..blocks - 1 {
            for t in [b * hop - 1, b * hop, b * hop + hop / 2, (b + 1) * hop - 1] {
                let mut y = x.to_vec();
                y[t] += 0.5;
                let out = self.round_trip_continuous(&y)?;
                if let Some(n) = out.iter().zip(&clean).position(|(a, b)| a != b) {
                    if n > t {
                        continue;
                    }
                    latency = latency.max(t + 1 - n);
                }
            }
        }
        Ok(latency)
    }

    /// Encode, quantize and reconstruct a waveform (trimmed to whole code
    /// frames).
    pub fn round_trip(&self, x: &[f64]) -> Result<Vec<f64>> {
        let code = self.encode(&self.analyze(x)?)?;
        let (q, _) = self.quantize(&code)?;
        self.reconstruct(&q)
    }

    /// Encode and reconstruct without quantization; used by causality probes,
    /// where token snapping would hide small perturbations.
    pub fn round_trip_continuous(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.reconstruct(&self.encode(&self.analyze(x)?)?)
    }

    pub fn to_checkpoint(&self, precision: Precision) -> Result<Checkpoint> {
        let mut tensors = self.params.clone().into_map();
        for (q, b) in self.rvq.books.iter().enumerate() {
            tensors.insert(RvqState::param_name(q), b.vectors.clone());
            tensors.insert(
                format!("quantizer.usage{q}"),
                Tensor::new(&[b.usage.len()], b.usage.clone()),
            );
        }
        Ok(Checkpoint {
            metadata: model_metadata(&self.config)?,
            precision,
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = parse_model_metadata(&ckpt.metadata)?;
        let mut params = ParamStore::new();
        let mut books = Vec::new();
        for q in 0..config.num_quantizers {
            let v = ckpt
                .tensors
                .get(&RvqState::param_name(q))
                .ok_or_else(|| Error::Checkpoint(format!("missing codebook {q}")))?;
            let mut book = Codebook::new(v.clone())?;
            if let Some(u) = ckpt.tensors.get(&format!("quantizer.usage{q}")) {
                book.usage = u.data().to_vec();
            }
            books.push(book);
        }
        for (name, t) in &ckpt.tensors {
            if !name.starts_with("quantizer.") && !name.starts_with("opt.") && !name.starts_with("disc.") {
                params.insert(name, t.clone());
            }
        }
        Self::from_parts(config, params, RvqState::new(books)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint(Precision::F32)?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Visit every trainable tensor, codebooks included.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (name, t) in self.params.iter_mut() {
            f(name, t);
        }
        for (q, b) in self.rvq.books.iter_mut().enumerate() {
            f(&RvqState::param_name(q), &mut b.vectors);
        }
    }

    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (name, t) in self.params.iter() {
            f(name, t);
        }
        for (q, b) in self.rvq.books.iter().enumerate() {
            f(&RvqState::param_name(q), &b.vectors);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    codec: CodecConfig,
}

pub fn model_metadata(config: &CodecConfig) -> Result<String> {
    toml::to_string(&ModelMeta { codec: *config })
        .map_err(|e| Error::Checkpoint(format!("cannot serialise config: {e}")))
}

pub fn parse_model_metadata(text: &str) -> Result<CodecConfig> {
    #[derive(Deserialize)]
    struct Partial {
        codec: CodecConfig,
    }
    let p: Partial =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad model metadata: {e}")))?;
    p.codec.validate()?;
    Ok(p.codec)
}

/// `[F, C]` matrix to a `(1, C, F)` feature map.
pub fn to_channels(m: &Tensor) -> Tensor {
    let (f, c) = (m.shape()[0], m.shape()[1]);
    m.transpose_last().reshape(&[1, c, f])
}

/// Batch entry `b` of a `(B, C, F)` map as an `[F, C]` matrix.
pub fn from_channels(t: &Tensor, b: usize) -> Tensor {
    let (_, c, f) = t.dims3();
    Tensor::new(&[c, f], t.data()[b * c * f..(b + 1) * c * f].to_vec()).transpose_last()
}

/// Stack `[F, C]` matrices into a `(B, C, F)` map.
pub fn stack_channels(ms: &[&Tensor]) -> Tensor {
    let (f, c) = (ms[0].shape()[0], ms[0].shape()[1]);
    let mut data = Vec::with_capacity(ms.len() * f * c);
    for m in ms {
        data.extend_from_slice(m.transpose_last().data());
    }
    Tensor::new(&[ms.len(), c, f], data)
}

#[cfg(test)]
mod tests;
