//! Residual vector quantization, codebook maintenance and the packed token
//! bitstream.
//!
//! Codes are `[frames, dim]` matrices. Codebooks store their `M` vectors as
//! rows of an `[M, dim]` matrix.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dsp::StftConfig;
use crate::error::{BitstreamError, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[M, dim]`.
    pub vectors: Tensor,
    /// Exponential moving average of assignment counts per update.
    pub usage: Vec<f64>,
}

impl Codebook {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] < 2 {
            return Err(Error::Config(format!(
                "codebook must be [M >= 2, dim], got {:?}",
                vectors.shape()
            )));
        }
        let m = vectors.shape()[0];
        Ok(Self {
            vectors,
            usage: vec![1.0; m],
        })
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[m * d..(m + 1) * d]
    }

    /// Nearest row to `v` by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for m in 0..self.size() {
            let d: f64 = self.row(m).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = m;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqState {
    pub books: Vec<Codebook>,
}

impl RvqState {
    pub fn new(books: Vec<Codebook>) -> Result<Self> {
        let first = books
            .first()
            .ok_or_else(|| Error::Config("quantizer needs at least one codebook".into()))?;
        let (m, d) = (first.size(), first.dim());
        if books.iter().any(|b| b.size() != m || b.dim() != d) {
            return Err(Error::Config("all codebooks must share M and dim".into()));
        }
        Ok(Self { books })
    }

    /// `q` books of `m` vectors drawn uniformly from `±scale`.
    pub fn random(q: usize, m: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let books = (0..q)
            .map(|_| Codebook::new(Tensor::from_fn(&[m, dim], |_| rng.gen_range(-scale..scale))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(books)
    }

    pub fn num_quantizers(&self) -> usize {
        self.books.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.books[0].size()
    }

    pub fn dim(&self) -> usize {
        self.books[0].dim()
    }

    pub fn param_name(q: usize) -> String {
        format!("quantizer.book{q}")
    }
}

/// Indices `m^1..m^Q` of one code frame, 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenFrame {
    pub indices: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    /// `Σ_q L̂^q`, `[frames, dim]`.
    pub quantized: Tensor,
    pub tokens: Vec<TokenFrame>,
    /// Stage inputs `L^1..L^{Q+1}`; the last entry is the final residual.
    pub residuals: Vec<Tensor>,
    /// Stage outputs `L̂^1..L̂^Q`.
    pub selected: Vec<Tensor>,
}

fn check_code(code: &Tensor, rvq: &RvqState) -> Result<()> {
    if code.rank() != 2 || code.shape()[1] != rvq.dim() {
        return Err(Error::Shape(format!(
            "code must be [frames, {}], got {:?}",
            rvq.dim(),
            code.shape()
        )));
    }
    Ok(())
}

/// Residual vector quantization of a `[frames, dim]` code.
pub fn quantize(code: &Tensor, rvq: &RvqState) -> Result<Quantized> {
    check_code(code, rvq)?;
    let (frames, dim) = (code.shape()[0], code.shape()[1]);
    let mut residual = code.clone();
    let mut residuals = vec![residual.clone()];
    let mut selected = Vec::with_capacity(rvq.num_quantizers());
    let mut quantized = Tensor::zeros(&[frames, dim]);
    let mut tokens = vec![
        TokenFrame {
            indices: Vec::with_capacity(rvq.num_quantizers())
        };
        frames
    ];
    for book in &rvq.books {
        let mut chosen = vec![0.0; frames * dim];
        for f in 0..frames {
            let row = &residual.data()[f * dim..(f + 1) * dim];
            let m = book.nearest(row);
            tokens[f].indices.push(m as u32);
            chosen[f * dim..(f + 1) * dim].copy_from_slice(book.row(m));
        }
        let chosen = Tensor::new(&[frames, dim], chosen);
        residual = residual.zip_map(&chosen, |a, b| a - b);
        quantized.add_assign(&chosen);
        residuals.push(residual.clone());
        selected.push(chosen);
    }
    Ok(Quantized {
        quantized,
        tokens,
        residuals,
        selected,
    })
}

/// `Σ_q B^q[m^q]` for every frame.
pub fn dequantize(tokens: &[TokenFrame], rvq: &RvqState) -> Result<Tensor> {
    let dim = rvq.dim();
    let mut out = vec![0.0; tokens.len() * dim];
    for (f, frame) in tokens.iter().enumerate() {
        if frame.indices.len() != rvq.num_quantizers() {
            return Err(Error::Shape(format!(
                "token frame has {} indices, quantizer has {} stages",
                frame.indices.len(),
                rvq.num_quantizers()
            )));
        }
        for (book, &m) in rvq.books.iter().zip(&frame.indices) {
            if m as usize >= book.size() {
                return Err(BitstreamError::IndexOutOfRange {
                    index: m,
                    size: book.size() as u32,
                }
                .into());
            }
            for (o, v) in out[f * dim..(f + 1) * dim].iter_mut().zip(book.row(m as usize)) {
                *o += v;
            }
        }
    }
    Ok(Tensor::new(&[tokens.len(), dim], out))
}

/// Bits per index for a codebook of size `m`.
pub fn bits_per_index(m: usize) -> u32 {
    (m.max(2) - 1).ilog2() + 1
}

/// Token bitrate in kbps: `f_s / (w_s·D) · Q · log2 M / 1000`.
pub fn bitrate_kbps(sample_rate: u32, frame_shift: usize, ratio: usize, q: usize, m: usize) -> f64 {
    sample_rate as f64 / (frame_shift * ratio) as f64 * q as f64 * (m as f64).log2() / 1000.0
}

// --- graph side -----------------------------------------------------------

impl Graph {
    /// Rows of `table` (`[M, dim]`) selected by `indices`, as `[n, dim]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let dim = t.shape()[1];
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(&[indices.len(), dim], out);
        let indices = indices.to_vec();
        self.op(&[table], value, move |g, inputs, _| {
            let mut dt = Tensor::zeros(inputs[0].shape());
            for (r, &i) in indices.iter().enumerate() {
                for d in 0..dim {
                    dt.data_mut()[i * dim + d] += g.data()[r * dim + d];
                }
            }
            vec![Some(dt)]
        })
    }
}

/// Graph-side quantization of a `[rows, dim]` code.
pub struct GraphQuantized {
    /// Straight-through output: value `Ĉ`, gradient passed to the code.
    pub straight_through: Var,
    /// Quantization loss with separately routed encoder/codebook gradients.
    pub loss: Var,
    pub tokens: Vec<TokenFrame>,
    /// Stage outputs `L̂^q` (codebook-differentiable).
    pub selected: Vec<Var>,
    /// Per-stage residual inputs `L^q`, as plain values.
    pub residuals: Vec<Tensor>,
}

/// Quantize `code` (`[rows, dim]`) against codebooks bound as `books`.
///
/// The loss is `MSE(Ĉ, C) + Σ_q MSE(L̂^q, L^q)`. Its encoder gradient is
/// taken with every codebook term held constant and its codebook gradient
/// with every encoder term held constant.
pub fn quantize_graph(g: &mut Graph, code: Var, books: &[Var]) -> Result<GraphQuantized> {
    let book_values: Vec<Codebook> = books
        .iter()
        .map(|&b| Codebook::new(g.value(b).clone()))
        .collect::<Result<_>>()?;
    let rvq = RvqState::new(book_values)?;
    let q = quantize(g.value(code), &rvq)?;

    let mut selected = Vec::with_capacity(books.len());
    let mut selected_const = Vec::with_capacity(books.len());
    for (stage, &book) in books.iter().enumerate() {
        let idx: Vec<usize> = q.tokens.iter().map(|t| t.indices[stage] as usize).collect();
        let s = g.gather_rows(book, &idx);
        selected_const.push(g.detach(s));
        selected.push(s);
    }

    // encoder branch: codebook outputs held constant
    let mut enc_terms = Vec::new();
    let mut level = code;
    let mut c_hat_const = selected_const[0];
    for (stage, &s) in selected_const.iter().enumerate() {
        enc_terms.push(g.mse(s, level));
        level = g.sub(level, s);
        if stage > 0 {
            c_hat_const = g.add(c_hat_const, s);
        }
    }
    let head = g.mse(c_hat_const, code);
    enc_terms.insert(0, head);
    let enc_loss = sum_vars(g, &enc_terms);

    // codebook branch: encoder-side levels held constant
    let code_const = g.detach(code);
    let mut cb_terms = Vec::new();
    let mut c_hat = selected[0];
    for (stage, &s) in selected.iter().enumerate() {
        let l = g.constant(q.residuals[stage].clone());
        cb_terms.push(g.mse(s, l));
        if stage > 0 {
            c_hat = g.add(c_hat, s);
        }
    }
    let head = g.mse(c_hat, code_const);
    cb_terms.insert(0, head);
    let cb_loss = sum_vars(g, &cb_terms);

    // value of one branch, gradients of both
    let both = g.add(enc_loss, cb_loss);
    let dup = g.detach(enc_loss);
    let loss = g.sub(both, dup);

    let diff = g.sub(c_hat_const, code_const);
    let straight_through = g.add(code, diff);

    Ok(GraphQuantized {
        straight_through,
        loss,
        tokens: q.tokens,
        selected,
        residuals: q.residuals,
    })
}

fn sum_vars(g: &mut Graph, terms: &[Var]) -> Var {
    let weighted: Vec<(f64, Var)> = terms.iter().map(|&t| (1.0, t)).collect();
    g.weighted_sum(&weighted)
}

// --- codebook maintenance -------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UsagePolicy {
    pub decay: f64,
    pub dead_threshold: f64,
    /// Updates to observe before any reseeding.
    pub warmup: usize,
}

impl Default for UsagePolicy {
    fn default() -> Self {
        Self {
            decay: 0.99,
            dead_threshold: 1e-3,
            warmup: 100,
        }
    }
}

/// Update usage statistics from one batch of assignments and reseed dead
/// entries from that batch's stage inputs. Returns the number reseeded.
///
/// `residuals[q]` is the `[rows, dim]` input of stage `q`.
pub fn update_codebooks(
    rvq: &mut RvqState,
    tokens: &[TokenFrame],
    residuals: &[Tensor],
    step: usize,
    policy: &UsagePolicy,
    rng: &mut impl Rng,
) -> usize {
    let mut reseeded = 0;
    for (q, book) in rvq.books.iter_mut().enumerate() {
        let mut counts = vec![0.0; book.size()];
        for t in tokens {
            counts[t.indices[q] as usize] += 1.0;
        }
        for (u, c) in book.usage.iter_mut().zip(&counts) {
            *u = policy.decay * *u + (1.0 - policy.decay) * c;
        }
        if step < policy.warmup || tokens.is_empty() {
            continue;
        }
        let dim = book.dim();
        let source = &residuals[q];
        for m in 0..book.size() {
            if book.usage[m] < policy.dead_threshold {
                let r = rng.gen_range(0..source.shape()[0]);
                let row = source.data()[r * dim..(r + 1) * dim].to_vec();
                book.vectors.data_mut()[m * dim..(m + 1) * dim].copy_from_slice(&row);
                book.usage[m] = 1.0;
                reseeded += 1;
            }
        }
    }
    reseeded
}

/// Initialise every stage by k-means on the residuals left by the stages
/// before it.
pub fn kmeans_init(rvq: &mut RvqState, data: &Tensor, iterations: usize, rng: &mut impl Rng) {
    let dim = rvq.dim();
    let rows = data.shape()[0];
    if rows == 0 {
        return;
    }
    let mut residual = data.clone();
    for book in &mut rvq.books {
        let m = book.size();
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(rng);
        for k in 0..m {
            let r = order[k % rows];
            let jitter = if k >= rows { 1e-3 } else { 0.0 };
            for d in 0..dim {
                book.vectors.data_mut()[k * dim + d] =
                    residual.data()[r * dim + d] + jitter * rng.gen_range(-1.0..1.0);
            }
        }
        for _ in 0..iterations {
            let mut sums = vec![0.0; m * dim];
            let mut counts = vec![0usize; m];
            for r in 0..rows {
                let row = &residual.data()[r * dim..(r + 1) * dim];
                let k = book.nearest(row);
                counts[k] += 1;
                for d in 0..dim {
                    sums[k * dim + d] += row[d];
                }
            }
            for k in 0..m {
                if counts[k] > 0 {
                    for d in 0..dim {
                        book.vectors.data_mut()[k * dim + d] = sums[k * dim + d] / counts[k] as f64;
                    }
                }
            }
        }
        let mut next = residual.clone();
        for r in 0..rows {
            let k = book.nearest(&residual.data()[r * dim..(r + 1) * dim]);
            for d in 0..dim {
                next.data_mut()[r * dim + d] -= book.vectors.data()[k * dim + d];
            }
        }
        residual = next;
        book.usage.iter_mut().for_each(|u| *u = 1.0);
    }
}

// --- bitstream --------------------------------------------------------------

pub const BITSTREAM_MAGIC: &[u8; 4] = b"APCS";
pub const BITSTREAM_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 10 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub sample_rate: u32,
    pub frame_shift: u32,
    pub frame_length: u32,
    pub fft_size: u32,
    pub ratio: u32,
    pub num_quantizers: u32,
    pub codebook_size: u32,
    pub code_dim: u32,
    pub frames: u32,
}

impl StreamHeader {
    pub fn new(stft: &StftConfig, ratio: usize, rvq: &RvqState, frames: usize) -> Self {
        Self {
            sample_rate: stft.sample_rate,
            frame_shift: stft.frame_shift as u32,
            frame_length: stft.frame_length as u32,
            fft_size: stft.fft_size as u32,
            ratio: ratio as u32,
            num_quantizers: rvq.num_quantizers() as u32,
            codebook_size: rvq.codebook_size() as u32,
            code_dim: rvq.dim() as u32,
            frames: frames as u32,
        }
    }

    pub fn bits_per_index(&self) -> u32 {
        bits_per_index(self.codebook_size as usize)
    }

    pub fn payload_bits(&self) -> usize {
        self.frames as usize * self.num_quantizers as usize * self.bits_per_index() as usize
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload_bits().div_ceil(8)
    }

    pub fn bitrate_kbps(&self) -> f64 {
        bitrate_kbps(
            self.sample_rate,
            self.frame_shift as usize,
            self.ratio as usize,
            self.num_quantizers as usize,
            self.codebook_size as usize,
        )
    }

    /// Samples represented by the stream.
    pub fn samples(&self) -> usize {
        self.frames as usize * self.ratio as usize * self.frame_shift as usize
    }

    fn validate(&self) -> Result<(), BitstreamError> {
        if self.codebook_size < 2 {
            return Err(BitstreamError::Header(format!(
                "codebook size {} < 2",
                self.codebook_size
            )));
        }
        if self.num_quantizers == 0 || self.frame_shift == 0 || self.ratio == 0 {
            return Err(BitstreamError::Header(
                "quantizer count, frame shift and ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBitstream {
    pub header: StreamHeader,
    pub payload: Vec<u8>,
}

/// Pack tokens MSB-first, frame-major then stage-major, zero-padded to a
/// whole byte.
pub fn pack(tokens: &[TokenFrame], header: StreamHeader) -> Result<TokenBitstream> {
    header.validate()?;
    if tokens.len() != header.frames as usize {
        return Err(BitstreamError::Header(format!(
            "header declares {} frames, got {}",
            header.frames,
            tokens.len()
        ))
        .into());
    }
    let bits = header.bits_per_index();
    let mut payload = vec![0u8; header.payload_bytes()];
    let mut pos = 0usize;
    for frame in tokens {
        if frame.indices.len() != header.num_quantizers as usize {
            return Err(BitstreamError::Header(format!(
                "frame carries {} indices, header declares {}",
                frame.indices.len(),
                header.num_quantizers
            ))
            .into());
        }
        for &idx in &frame.indices {
            if idx >= header.codebook_size {
                return Err(BitstreamError::IndexOutOfRange {
                    index: idx,
                    size: header.codebook_size,
                }
                .into());
            }
            for b in (0..bits).rev() {
                if (idx >> b) & 1 == 1 {
                    payload[pos / 8] |= 0x80 >> (pos % 8);
                }
                pos += 1;
            }
        }
    }
    Ok(TokenBitstream { header, payload })
}

pub fn unpack(stream: &TokenBitstream) -> Result<Vec<TokenFrame>> {
    let h = &stream.header;
    h.validate()?;
    if stream.payload.len() < h.payload_bytes() {
        return Err(BitstreamError::Truncated {
            needed: HEADER_BYTES + h.payload_bytes(),
            available: HEADER_BYTES + stream.payload.len(),
        }
        .into());
    }
    let bits = h.bits_per_index();
    let mut pos = 0usize;
    let mut frames = Vec::with_capacity(h.frames as usize);
    for _ in 0..h.frames {
        let mut indices = Vec::with_capacity(h.num_quantizers as usize);
        for _ in 0..h.num_quantizers {
            let mut v = 0u32;
            for _ in 0..bits {
                let bit = (stream.payload[pos / 8] >> (7 - pos % 8)) & 1;
                v = (v << 1) | bit as u32;
                pos += 1;
            }
            if v >= h.codebook_size {
                return Err(BitstreamError::IndexOutOfRange {
                    index: v,
                    size: h.codebook_size,
                }
                .into());
            }
            indices.push(v);
        }
        frames.push(TokenFrame { indices });
    }
    Ok(frames)
}

impl TokenBitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        for v in [
            BITSTREAM_VERSION,
            h.sample_rate,
            h.frame_shift,
            h.frame_length,
            h.fft_size,
            h.ratio,
            h.num_quantizers,
            h.codebook_size,
            h.code_dim,
            h.frames,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BitstreamError> {
        if bytes.len() < 4 {
            return Err(BitstreamError::Truncated {
                needed: HEADER_BYTES,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != BITSTREAM_MAGIC {
            return Err(BitstreamError::BadMagic(magic));
        }
        if bytes.len() < 8 {
            return Err(BitstreamError::Truncated {
                needed: HEADER_BYTES,
                available: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != BITSTREAM_VERSION {
            return Err(BitstreamError::UnsupportedVersion(version));
        }
        if bytes.len() < HEADER_BYTES {
            return Err(BitstreamError::Truncated {
                needed: HEADER_BYTES,
                available: bytes.len(),
            });
        }
        let header = StreamHeader {
            sample_rate: word(1),
            frame_shift: word(2),
            frame_length: word(3),
            fft_size: word(4),
            ratio: word(5),
            num_quantizers: word(6),
            codebook_size: word(7),
            code_dim: word(8),
            frames: word(9),
        };
        header.validate()?;
        let need = HEADER_BYTES + header.payload_bytes();
        if bytes.len() < need {
            return Err(BitstreamError::Truncated {
                needed: need,
                available: bytes.len(),
            });
        }
        Ok(Self {
            header,
            payload: bytes[HEADER_BYTES..need].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[[f64; 2]]) -> Codebook {
        Codebook::new(Tensor::new(
            &[rows.len(), 2],
            rows.iter().flatten().copied().collect(),
        ))
        .unwrap()
    }

    #[test]
    fn exact_vector_gives_zero_residual() {
        let rvq = RvqState::new(vec![book(&[[0.0, 0.0], [0.5, -1.0], [3.0, 3.0]])]).unwrap();
        let c = Tensor::new(&[1, 2], vec![0.5, -1.0]);
        let q = quantize(&c, &rvq).unwrap();
        assert_eq!(q.quantized, c);
        assert_eq!(q.tokens[0].indices, vec![1]);
        assert!(q.residuals[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_stage_matches_hand_search() {
        let rvq = RvqState::new(vec![
            book(&[[1.0, 0.0], [0.0, 1.0]]),
            book(&[[0.1, 0.1], [-0.2, 0.3]]),
        ])
        .unwrap();
        let c = Tensor::new(&[2, 2], vec![0.9, 0.2, -0.1, 1.4]);
        let q = quantize(&c, &rvq).unwrap();
        // frame 0: stage 1 → [1,0], residual [-0.1,0.2] → nearest [-0.2,0.3]
        // frame 1: stage 1 → [0,1], residual [-0.1,0.4] → nearest [-0.2,0.3]
        assert_eq!(q.tokens[0].indices, vec![0, 1]);
        assert_eq!(q.tokens[1].indices, vec![1, 1]);
        let expect = [0.8, 0.3, -0.2, 1.3];
        for (a, b) in q.quantized.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_choose_lowest_index() {
        let b = book(&[[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(b.nearest(&[0.0, 0.0]), 0);
    }

    #[test]
    fn dequantize_inverts_quantize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rvq = RvqState::random(3, 8, 4, 1.0, &mut rng).unwrap();
        let c = Tensor::from_fn(&[5, 4], |_| rng.gen_range(-2.0..2.0));
        let q = quantize(&c, &rvq).unwrap();
        assert_eq!(dequantize(&q.tokens, &rvq).unwrap(), q.quantized);
    }

    #[test]
    fn zero_codebooks_give_zero_code() {
        let rvq = RvqState::new(vec![Codebook::new(Tensor::zeros(&[4, 3])).unwrap(); 2]).unwrap();
        let t = vec![TokenFrame { indices: vec![3, 1] }; 2];
        assert!(dequantize(&t, &rvq).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_bitrates() {
        assert_eq!(bitrate_kbps(48_000, 40, 8, 4, 1024), 6.0);
        assert_eq!(bitrate_kbps(48_000, 40, 8, 8, 1024), 12.0);
        assert_eq!(bitrate_kbps(16_000, 40, 8, 4, 1024), 2.0);
    }

    #[test]
    fn bits_per_index_values() {
        assert_eq!(bits_per_index(2), 1);
        assert_eq!(bits_per_index(3), 2);
        assert_eq!(bits_per_index(16), 4);
        assert_eq!(bits_per_index(17), 5);
        assert_eq!(bits_per_index(1024), 10);
    }

    fn header(frames: usize, q: usize, m: usize) -> StreamHeader {
        StreamHeader {
            sample_rate: 48_000,
            frame_shift: 40,
            frame_length: 320,
            fft_size: 1024,
            ratio: 8,
            num_quantizers: q as u32,
            codebook_size: m as u32,
            code_dim: 32,
            frames: frames as u32,
        }
    }

    #[test]
    fn payload_size_for_three_frames() {
        let tokens = vec![TokenFrame { indices: vec![1023, 0, 512, 7] }; 3];
        let s = pack(&tokens, header(3, 4, 1024)).unwrap();
        assert_eq!(s.payload.len(), 15);
        assert_eq!(s.to_bytes().len(), HEADER_BYTES + 15);
        let back = TokenBitstream::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(unpack(&back).unwrap(), tokens);
    }

    #[test]
    fn msb_first_layout() {
        let tokens = vec![TokenFrame { indices: vec![0b101] }];
        let s = pack(&tokens, header(1, 1, 8)).unwrap();
        assert_eq!(s.payload, vec![0b1010_0000]);
    }

    #[test]
    fn empty_stream_is_header_only() {
        let s = pack(&[], header(0, 4, 1024)).unwrap();
        assert_eq!(s.to_bytes().len(), HEADER_BYTES);
        assert!(unpack(&TokenBitstream::from_bytes(&s.to_bytes()).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let tokens = vec![TokenFrame { indices: vec![5, 6] }; 4];
        let bytes = pack(&tokens, header(4, 2, 16)).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TokenBitstream::from_bytes(&bad), Err(BitstreamError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(
            TokenBitstream::from_bytes(&bad),
            Err(BitstreamError::UnsupportedVersion(9))
        );
        assert!(matches!(
            TokenBitstream::from_bytes(&bytes[..bytes.len() - 1]),
            Err(BitstreamError::Truncated { .. })
        ));
        assert!(matches!(
            TokenBitstream::from_bytes(&bytes[..10]),
            Err(BitstreamError::Truncated { .. })
        ));
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let tokens = vec![TokenFrame { indices: vec![16] }];
        assert!(pack(&tokens, header(1, 1, 16)).is_err());
        // M = 5 uses 3 bits, so 7 is representable on the wire but invalid
        let s = TokenBitstream {
            header: header(1, 1, 5),
            payload: vec![0b1110_0000],
        };
        assert!(matches!(
            unpack(&s),
            Err(Error::Bitstream(BitstreamError::IndexOutOfRange { index: 7, size: 5 }))
        ));
    }

    #[test]
    fn graph_quantizer_value_and_straight_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rvq = RvqState::random(2, 4, 3, 1.0, &mut rng).unwrap();
        let c = Tensor::from_fn(&[6, 3], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let code = g.leaf(c.clone());
        let books: Vec<Var> = rvq
            .books
            .iter()
            .enumerate()
            .map(|(i, b)| g.param(&RvqState::param_name(i), &b.vectors))
            .collect();
        let gq = quantize_graph(&mut g, code, &books).unwrap();
        let q = quantize(&c, &rvq).unwrap();
        assert_eq!(g.value(gq.straight_through), &q.quantized);
        let n = c.numel() as f64;
        let mse = |a: &Tensor, b: &Tensor| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
        };
        let mut expect = mse(&q.quantized, &c);
        for s in 0..2 {
            expect += mse(&q.selected[s], &q.residuals[s]);
        }
        assert!((g.value(gq.loss).item() - expect).abs() < 1e-12);

        // straight-through: identity gradient from the output to the code
        let s = g.sum(gq.straight_through);
        let grads = g.backward(s);
        assert!(grads.get(code).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn centroid_codebook_is_stationary() {
        // two clusters whose means are exactly the codewords
        let c = Tensor::new(&[4, 1], vec![0.9, 1.1, -2.2, -1.8]);
        let book = Tensor::new(&[2, 1], vec![1.0, -2.0]);
        let mut g = Graph::new();
        let code = g.constant(c);
        let b = g.param("quantizer.book0", &book);
        let gq = quantize_graph(&mut g, code, &[b]).unwrap();
        let grads = g.backward(gq.loss);
        let gb = grads.param("quantizer.book0").unwrap();
        assert!(gb.data().iter().all(|v| v.abs() < 1e-12), "{gb:?}");
    }

    #[test]
    fn dead_entries_are_reseeded_after_warmup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rvq = RvqState::new(vec![book(&[[0.0, 0.0], [100.0, 100.0]])]).unwrap();
        let data = Tensor::new(&[3, 2], vec![0.1, 0.0, -0.1, 0.2, 0.0, 0.1]);
        let policy = UsagePolicy {
            decay: 0.5,
            dead_threshold: 1e-3,
            warmup: 5,
        };
        let mut total = 0;
        for step in 0..12 {
            let q = quantize(&data, &rvq).unwrap();
            let n = update_codebooks(&mut rvq, &q.tokens, &q.residuals, step, &policy, &mut rng);
            if step < 5 {
                assert_eq!(n, 0);
            }
            total += n;
        }
        assert!(total >= 1);
        assert!(rvq.books[0].row(1).iter().all(|v| v.abs() < 1.0));
        assert_eq!(rvq.books[0].vectors.shape(), &[2, 2]);
    }

    #[test]
    fn kmeans_init_recovers_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = Vec::new();
        for i in 0..40 {
            let centre = if i % 2 == 0 { 5.0 } else { -5.0 };
            pts.push(centre + rng.gen_range(-0.1..0.1));
            pts.push(rng.gen_range(-0.1..0.1));
        }
        let data = Tensor::new(&[40, 2], pts);
        let mut rvq = RvqState::random(1, 2, 2, 0.1, &mut rng).unwrap();
        kmeans_init(&mut rvq, &data, 10, &mut rng);
        let mut xs: Vec<f64> = (0..2).map(|m| rvq.books[0].row(m)[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 5.0).abs() < 0.1 && (xs[1] - 5.0).abs() < 0.1, "{xs:?}");
    }
}
