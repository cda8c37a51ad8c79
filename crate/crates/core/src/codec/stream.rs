use crate::codec::{CodecModel, LatentCode};
use crate::dsp::{self, SpectralFrames, StreamingSynthesis};
use crate::error::{Error, Result};
use crate::quantizer::TokenFrame;
use crate::tensor::Tensor;

fn require_causal(model: &CodecModel) -> Result<()> {
    if !model.config.causal {
        return Err(Error::Mode(
            "streaming requires a causal (streamable) model".into(),
        ));
    }
    Ok(())
}

fn rows(t: &Tensor, start: usize, count: usize) -> Tensor {
    let cols = t.shape()[1];
    Tensor::new(&[count, cols], t.data()[start * cols..(start + count) * cols].to_vec())
}

/// Buffers carried between pushes of one stream.
#[derive(Clone, Debug)]
pub struct StreamState {
    /// Last `w_l − w_s` input samples already consumed.
    history: Vec<f64>,
    /// Input samples not yet forming a full code frame.
    pending: Vec<f64>,
    /// Previous quantized code frame, `[1, N_c]`.
    prev_code: Option<Tensor>,
    synth: StreamingSynthesis,
    /// Code frames processed so far.
    pub frames: usize,
}

impl StreamState {
    pub fn new(model: &CodecModel) -> Result<Self> {
        require_causal(model)?;
        let stft = model.analysis_stft();
        Ok(Self {
            history: vec![0.0; stft.frame_length - stft.frame_shift],
            pending: Vec::new(),
            prev_code: None,
            synth: StreamingSynthesis::new(stft),
            frames: 0,
        })
    }

    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(|v| *v = 0.0);
        self.pending.clear();
        self.prev_code = None;
        self.synth.reset();
        self.frames = 0;
    }

    pub fn pending_samples(&self) -> usize {
        self.pending.len()
    }
}

/// Waveform → tokens, one token frame per `w_s·D` input samples.
#[derive(Clone, Debug)]
pub struct StreamEncoder {
    pub state: StreamState,
}

impl StreamEncoder {
    pub fn new(model: &CodecModel) -> Result<Self> {
        Ok(Self {
            state: StreamState::new(model)?,
        })
    }

    pub fn push(&mut self, model: &CodecModel, samples: &[f64]) -> Result<Vec<TokenFrame>> {
        require_causal(model)?;
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite input sample".into()));
        }
        let hop = model.config.hop();
        let stft = model.analysis_stft();
        let s = &mut self.state;
        s.pending.extend_from_slice(samples);
        let mut out = Vec::new();
        while s.pending.len() >= hop {
            let block: Vec<f64> = s.pending.drain(..hop).collect();
            let mut buf = s.history.clone();
            buf.extend_from_slice(&block);
            // causal framing re-pads the left; the last D frames see only `buf`
            let spec = dsp::stft(&buf, &stft)?;
            let skip = spec.frames() - model.config.ratio;
            let frames = SpectralFrames {
                log_amplitude: rows(&spec.log_amplitude, skip, model.config.ratio),
                phase: rows(&spec.phase, skip, model.config.ratio),
                config: stft,
            };
            let code = model.encode(&frames)?;
            let (_, tokens) = model.quantize(&code)?;
            out.extend(tokens);
            let keep = s.history.len();
            s.history = buf[buf.len() - keep..].to_vec();
            s.frames += 1;
        }
        Ok(out)
    }
}

/// Tokens → waveform, `w_s·D` samples per token frame.
#[derive(Clone, Debug)]
pub struct StreamDecoder {
    pub state: StreamState,
}

impl StreamDecoder {
    pub fn new(model: &CodecModel) -> Result<Self> {
        Ok(Self {
            state: StreamState::new(model)?,
        })
    }

    pub fn push(&mut self, model: &CodecModel, tokens: &[TokenFrame]) -> Result<Vec<f64>> {
        require_causal(model)?;
        let d = model.config.ratio;
        let s = &mut self.state;
        let mut out = Vec::with_capacity(tokens.len() * model.config.hop());
        for t in tokens {
            let code = model.dequantize(std::slice::from_ref(t))?.values;
            let context = match &s.prev_code {
                Some(prev) => {
                    let mut data = prev.data().to_vec();
                    data.extend_from_slice(code.data());
                    Tensor::new(&[2, code.shape()[1]], data)
                }
                None => code.clone(),
            };
            let decoded = model.decode(&LatentCode {
                values: context,
                frame_rate: model.config.code_frame_rate(),
            })?;
            let skip = decoded.frames() - d;
            let frames = SpectralFrames {
                log_amplitude: rows(&decoded.log_amplitude, skip, d),
                phase: rows(&decoded.phase, skip, d),
                config: decoded.config,
            };
            let spec = dsp::complex_from_amp_phase(&frames);
            out.extend(s.synth.push(&spec.re, &spec.im));
            s.prev_code = Some(code);
            s.frames += 1;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamOutput {
    pub tokens: Vec<TokenFrame>,
    pub audio: Vec<f64>,
}

/// Encoder and decoder chained: waveform in, tokens and waveform out.
#[derive(Clone, Debug)]
pub struct StreamSession {
    pub encoder: StreamEncoder,
    pub decoder: StreamDecoder,
}

impl StreamSession {
    pub fn new(model: &CodecModel) -> Result<Self> {
        Ok(Self {
            encoder: StreamEncoder::new(model)?,
            decoder: StreamDecoder::new(model)?,
        })
    }

    pub fn push(&mut self, model: &CodecModel, samples: &[f64]) -> Result<StreamOutput> {
        let tokens = self.encoder.push(model, samples)?;
        let audio = self.decoder.push(model, &tokens)?;
        Ok(StreamOutput { tokens, audio })
    }

    pub fn reset(&mut self) {
        self.encoder.state.reset();
        self.decoder.state.reset();
    }

    /// Run a whole waveform through the session in chunks of `chunk`.
    pub fn run_chunked(model: &CodecModel, x: &[f64], chunk: usize) -> Result<StreamOutput> {
        let mut session = Self::new(model)?;
        let mut out = StreamOutput::default();
        for piece in x.chunks(chunk.max(1)) {
            let o = session.push(model, piece)?;
            out.tokens.extend(o.tokens);
            out.audio.extend(o.audio);
        }
        Ok(out)
    }
}
