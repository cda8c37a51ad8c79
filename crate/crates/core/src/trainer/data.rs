use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mixes a seed with stream tags into an independent generator.
pub(crate) fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        h = (h ^ t).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// In-memory training clips.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub clips: Vec<Vec<f64>>,
    pub sample_rate: u32,
    /// Files that could not be read.
    pub skipped: usize,
}

impl Dataset {
    pub fn from_clips(clips: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if clips.is_empty() || clips.iter().all(|c| c.is_empty()) {
            return Err(Error::EmptyInput("dataset has no audio"));
        }
        Ok(Self {
            clips: clips.into_iter().filter(|c| !c.is_empty()).collect(),
            sample_rate,
            skipped: 0,
        })
    }

    /// Every readable mono WAV in `dir` at `sample_rate`; unreadable or
    /// mismatched files are skipped with a warning.
    pub fn from_dir(dir: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let mut clips = Vec::new();
        let mut skipped = 0;
        for path in audio::list_wavs(dir)? {
            match audio::read_wav(&path) {
                Ok(a) if a.sample_rate == sample_rate && !a.samples.is_empty() => clips.push(a.samples),
                Ok(a) => {
                    tracing::warn!(file = %path.display(), rate = a.sample_rate, "skipping file with wrong rate or no samples");
                    skipped += 1;
                }
                Err(e) => {
                    tracing::warn!(file = %path.display(), error = %e, "skipping unreadable file");
                    skipped += 1;
                }
            }
        }
        if skipped > 0 {
            tracing::warn!(skipped, "files skipped while loading dataset");
        }
        let mut d = Self::from_clips(clips, sample_rate)?;
        d.skipped = skipped;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Optimisation steps making up one pass over the clip list.
    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// `(B, segment)` crops for global step `step`. Clip order is shuffled
    /// per epoch and crop offsets are drawn per item, both from `seed`.
    pub fn batch(&self, step: usize, batch_size: usize, segment: usize, seed: u64) -> Tensor {
        let spe = self.steps_per_epoch(batch_size);
        let (epoch, within) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, &[1, epoch as u64]));
        let mut data = Vec::with_capacity(batch_size * segment);
        for i in 0..batch_size {
            let clip = &self.clips[order[(within * batch_size + i) % self.len()]];
            let mut rng = stream_rng(seed, &[2, step as u64, i as u64]);
            if clip.len() > segment {
                let start = rng.gen_range(0..=clip.len() - segment);
                data.extend_from_slice(&clip[start..start + segment]);
            } else {
                data.extend_from_slice(clip);
                data.resize(data.len() + segment - clip.len(), 0.0);
            }
        }
        Tensor::new(&[batch_size, segment], data)
    }
}
