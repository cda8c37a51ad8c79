//! GAN training loop with optional teacher→student distillation.

mod data;
mod optim;

pub use data::Dataset;
pub use optim::AdamW;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecModel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{self, DiscriminatorBank, DiscriminatorConfig, LossWeights, MelConfig};
use crate::nn::{Checkpoint, Precision};
use crate::quantizer::{kmeans_init, update_codebooks, UsagePolicy};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Samples per training segment; a multiple of `w_s·D`.
    pub segment_length: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    /// Learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub n_mel: usize,
    /// Train against the discriminators; off gives spectral-only training.
    pub adversarial: bool,
    pub discriminator: DiscriminatorConfig,
    pub codebook: UsagePolicy,
    /// Lloyd iterations of the k-means codebook initialisation run before
    /// the first step; 0 keeps the random codebooks.
    pub kmeans_iterations: usize,
    /// Teacher checkpoint; enables distillation into a causal student.
    pub distill: Option<PathBuf>,
    /// Directory of mono WAV files.
    pub data_dir: Option<PathBuf>,
    /// Checkpoint written at the end and every `checkpoint_every` steps.
    pub output: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            segment_length: 2560,
            steps: 1000,
            beta1: 0.8,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            learning_rate: 2e-4,
            lr_decay: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            n_mel: 80,
            adversarial: true,
            discriminator: DiscriminatorConfig::tiny(),
            codebook: UsagePolicy::default(),
            kmeans_iterations: 10,
            distill: None,
            data_dir: None,
            output: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: batch 16, 1M steps, full-width discriminators.
    pub fn paper() -> Self {
        Self {
            batch_size: 16,
            segment_length: 7680,
            steps: 1_000_000,
            discriminator: DiscriminatorConfig::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self, codec: &CodecConfig) -> Result<()> {
        let hop = codec.hop();
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if self.segment_length == 0 || self.segment_length % hop != 0 {
            return Err(Error::Config(format!(
                "segment_length {} must be a positive multiple of w_s·D = {hop}",
                self.segment_length
            )));
        }
        if self.segment_length / codec.stft.frame_shift < 2 {
            return Err(Error::Config("segment must span at least two frames".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("lr_decay", self.lr_decay)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !(self.adam_eps > 0.0) {
            return Err(Error::Config("learning_rate and adam_eps must be > 0, weight_decay >= 0".into()));
        }
        self.weights.validate()?;
        self.discriminator.validate()
    }
}

/// Codec and training settings, as read from one TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let run: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        run.codec.validate()?;
        run.train.validate(&run.codec)?;
        Ok(run)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Loss components and diagnostics of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub complex: f64,
    pub mel: f64,
    pub spectral: f64,
    pub quantization: f64,
    pub generator_gan: f64,
    pub discriminator: f64,
    pub kd: f64,
    pub total: f64,
    /// Mean codebook-usage entropy in bits.
    pub usage_entropy: f64,
    pub reseeded: usize,
    pub seconds: f64,
}

impl StepRow {
    fn losses(&self) -> [(&'static str, f64); 10] {
        [
            ("amplitude", self.amplitude),
            ("phase", self.phase),
            ("complex", self.complex),
            ("mel", self.mel),
            ("spectral", self.spectral),
            ("quantization", self.quantization),
            ("generator_gan", self.generator_gan),
            ("discriminator", self.discriminator),
            ("kd", self.kd),
            ("total", self.total),
        ]
    }

    fn check_finite(&self) -> Result<()> {
        if let Some((name, v)) = self.losses().into_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "training loss {name} = {v} at step {}; snapshot: {self:?}",
                self.step
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<StepRow>,
}

impl TrainReport {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain numeric row") + "\n")
            .collect()
    }

    /// Mean of `f` over rows `[from, to)`.
    pub fn mean(&self, from: usize, to: usize, f: impl Fn(&StepRow) -> f64) -> f64 {
        let rows = &self.rows[from.min(self.rows.len())..to.min(self.rows.len())];
        rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
    }
}

fn usage_entropy(model: &CodecModel) -> f64 {
    let books = &model.rvq.books;
    books
        .iter()
        .map(|b| {
            let total: f64 = b.usage.iter().sum();
            if total <= 0.0 {
                return 0.0;
            }
            -b.usage
                .iter()
                .filter(|&&u| u > 0.0)
                .map(|u| u / total * (u / total).log2())
                .sum::<f64>()
        })
        .sum::<f64>()
        / books.len().max(1) as f64
}

const STATE_KEY: &str = "opt.state";
const GEN_OPT: &str = "opt.gen";
const DISC_OPT: &str = "opt.disc";

pub struct Trainer {
    pub run: RunConfig,
    pub model: CodecModel,
    pub discriminators: DiscriminatorBank,
    pub teacher: Option<CodecModel>,
    pub dataset: Dataset,
    pub report: TrainReport,
    /// Completed steps.
    pub step: usize,
    gen_opt: AdamW,
    disc_opt: AdamW,
    mel: MelConfig,
}

impl Trainer {
    /// Fresh model and discriminators seeded from the configuration.
    pub fn new(run: RunConfig, dataset: Dataset, teacher: Option<CodecModel>) -> Result<Self> {
        let model = CodecModel::new(run.codec, run.train.seed)?;
        Self::with_model(run, model, dataset, teacher)
    }

    pub fn with_model(run: RunConfig, model: CodecModel, dataset: Dataset, teacher: Option<CodecModel>) -> Result<Self> {
        run.codec.validate()?;
        run.train.validate(&run.codec)?;
        if model.config != run.codec {
            return Err(Error::Config("model does not match the codec configuration".into()));
        }
        if dataset.sample_rate != run.codec.stft.sample_rate {
            return Err(Error::Config(format!(
                "dataset rate {} Hz, codec expects {} Hz",
                dataset.sample_rate, run.codec.stft.sample_rate
            )));
        }
        let teacher = match teacher {
            Some(mut t) => {
                check_distillation_pair(&t.config, &run.codec)?;
                t.freeze();
                Some(t)
            }
            None => None,
        };
        let t = &run.train;
        let discriminators = DiscriminatorBank::new(
            t.discriminator.clone(),
            &run.codec.stft,
            t.seed.wrapping_add(1),
        )?;
        let mel = MelConfig::new(run.codec.analysis_stft(), t.n_mel)?;
        Ok(Self {
            gen_opt: AdamW::new(t.beta1, t.beta2, t.adam_eps, t.weight_decay),
            disc_opt: AdamW::new(t.beta1, t.beta2, t.adam_eps, t.weight_decay),
            run,
            model,
            discriminators,
            teacher,
            dataset,
            report: TrainReport::default(),
            step: 0,
            mel,
        })
    }

    pub fn epoch(&self) -> usize {
        self.step / self.dataset.steps_per_epoch(self.run.train.batch_size)
    }

    /// `lr₀ · decay^epoch`.
    pub fn learning_rate(&self) -> f64 {
        self.run.train.learning_rate * self.run.train.lr_decay.powi(self.epoch() as i32)
    }

    /// One discriminator update followed by one generator update on `batch`
    /// (`(B, T)` waveforms).
    pub fn train_step(&mut self, batch: &Tensor) -> Result<StepRow> {
        let start = Instant::now();
        let t = self.run.train.clone();
        let w = t.weights;
        let stft = self.model.analysis_stft();
        if batch.rank() != 2 || batch.shape()[1] % self.model.config.hop() != 0 {
            return Err(Error::Shape(format!(
                "batch must be (B, k·{}), got {:?}",
                self.model.config.hop(),
                batch.shape()
            )));
        }
        let lr = self.learning_rate();
        let mut row = StepRow {
            step: self.step,
            epoch: self.epoch(),
            lr,
            ..Default::default()
        };

        let mut g = Graph::new();
        let target = losses::reference(&mut g, batch, &stft)?;
        let out = self.model.forward_graph(&mut g, target.log_amplitude, target.phase)?;
        let pred = losses::decoded(&mut g, out.log_amplitude, out.phase, &stft)?;

        if t.adversarial {
            let mut gd = Graph::new();
            let real = gd.constant(batch.clone());
            let fake = gd.constant(g.value(pred.waveform).clone());
            let r = self.discriminators.forward(&mut gd, real, true)?;
            let f = self.discriminators.forward(&mut gd, fake, true)?;
            let ld = losses::discriminator_gan_loss(&mut gd, &r, &f, w.mrd)?;
            row.discriminator = gd.value(ld).item();
            if !row.discriminator.is_finite() {
                row.check_finite()?;
            }
            let grads = gd.backward(ld).params();
            self.disc_opt.begin_step(lr);
            for (name, p) in self.discriminators.params.iter_mut() {
                if let Some(gr) = grads.get(name) {
                    self.disc_opt.update(name, p, gr);
                }
            }
        }

        let spectral = losses::spectral_losses(&mut g, &pred, &target, &self.mel, &w)?;
        let lq = out
            .quantization_loss
            .ok_or_else(|| Error::Mode("model produced no quantization loss".into()))?;
        let mut terms = vec![(w.spectral, spectral.total), (w.quantization, lq)];
        if t.adversarial {
            let r = self.discriminators.forward(&mut g, target.waveform, false)?;
            let f = self.discriminators.forward(&mut g, pred.waveform, false)?;
            let lg = losses::generator_gan_loss(&mut g, &r, &f, w.mrd)?;
            row.generator_gan = g.value(lg).item();
            terms.push((1.0, lg));
        }
        if let Some(teacher) = &self.teacher {
            let tout = teacher.forward_graph(&mut g, target.log_amplitude, target.phase)?;
            let kd = losses::kd_loss(&mut g, &tout.taps, &out.taps)?;
            row.kd = g.value(kd).item();
            terms.push((w.kd, kd));
        }
        let total = g.weighted_sum(&terms);
        let v = |x| g.value(x).item();
        row.amplitude = v(spectral.amplitude);
        row.phase = v(spectral.phase.total);
        row.complex = v(spectral.complex.total);
        row.mel = v(spectral.mel);
        row.spectral = v(spectral.total);
        row.quantization = v(lq);
        row.total = v(total);
        row.check_finite()?;

        let grads = g.backward(total).params();
        self.gen_opt.begin_step(lr);
        let opt = &mut self.gen_opt;
        self.model.for_each_param_mut(|name, p| {
            if let Some(gr) = grads.get(name) {
                opt.update(name, p, gr);
            }
        });
        let mut rng = data::stream_rng(t.seed, &[3, self.step as u64]);
        row.reseeded = update_codebooks(
            &mut self.model.rvq,
            &out.tokens,
            &out.residuals,
            self.step,
            &t.codebook,
            &mut rng,
        );
        row.usage_entropy = usage_entropy(&self.model);
        row.seconds = start.elapsed().as_secs_f64();
        self.step += 1;
        self.report.rows.push(row.clone());
        Ok(row)
    }

    /// k-means codebooks from encoder outputs on the first training batches,
    /// gathering at least four code frames per codebook entry.
    pub fn init_codebooks(&mut self) -> Result<()> {
        let t = &self.run.train;
        let want = 4 * self.model.config.codebook_size;
        let mut rows: Vec<f64> = Vec::new();
        let dim = self.model.config.code_dim;
        for step in 0..64 {
            let batch = self.dataset.batch(step, t.batch_size, t.segment_length, t.seed);
            let (b, n) = (batch.shape()[0], batch.shape()[1]);
            for i in 0..b {
                let x = &batch.data()[i * n..(i + 1) * n];
                let code = self.model.encode(&self.model.analyze(x)?)?;
                rows.extend_from_slice(code.values.data());
            }
            if rows.len() / dim >= want {
                break;
            }
        }
        let data = Tensor::new(&[rows.len() / dim, dim], rows);
        let mut rng = data::stream_rng(t.seed, &[4]);
        kmeans_init(&mut self.model.rvq, &data, t.kmeans_iterations, &mut rng);
        Ok(())
    }

    /// Next batch from the dataset.
    pub fn next_batch(&self) -> Tensor {
        let t = &self.run.train;
        self.dataset.batch(self.step, t.batch_size, t.segment_length, t.seed)
    }

    /// Run until `steps` total steps have completed, writing checkpoints to
    /// the configured output.
    pub fn run(&mut self) -> Result<&TrainReport> {
        let t = self.run.train.clone();
        if self.step == 0 && t.kmeans_iterations > 0 {
            self.init_codebooks()?;
        }
        while self.step < t.steps {
            let batch = self.next_batch();
            let row = self.train_step(&batch)?;
            if row.step % 10 == 0 {
                tracing::info!(
                    step = row.step,
                    epoch = row.epoch,
                    total = row.total,
                    amplitude = row.amplitude,
                    kd = row.kd,
                    seconds = row.seconds,
                    "train step"
                );
            }
            if let Some(out) = &t.output {
                if t.checkpoint_every > 0 && self.step % t.checkpoint_every == 0 && self.step < t.steps {
                    self.save(out)?;
                }
            }
        }
        if let Some(out) = &t.output {
            self.save(out)?;
        }
        Ok(&self.report)
    }

    /// Model, discriminators, optimiser moments and step counter, with
    /// `f64` payloads.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.model.to_checkpoint(Precision::F64)?;
        ckpt.metadata = self.run.to_toml()?;
        for (name, t) in self.discriminators.params.iter() {
            ckpt.tensors.insert(name.to_string(), t.clone());
        }
        ckpt.tensors.extend(self.gen_opt.state(GEN_OPT));
        ckpt.tensors.extend(self.disc_opt.state(DISC_OPT));
        ckpt.tensors.insert(STATE_KEY.into(), Tensor::scalar(self.step as f64));
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Continue from a training checkpoint.
    pub fn resume(ckpt: &Checkpoint, dataset: Dataset, teacher: Option<CodecModel>) -> Result<Self> {
        let run = RunConfig::from_toml(&ckpt.metadata)?;
        let model = CodecModel::from_checkpoint(ckpt)?;
        let mut tr = Self::with_model(run, model, dataset, teacher)?;
        let names: Vec<String> = tr.discriminators.params.names().cloned().collect();
        for name in names {
            let t = ckpt
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing discriminator tensor {name}")))?;
            tr.discriminators.params.insert(&name, t.clone());
        }
        let only = |prefix: &str| -> BTreeMap<String, Tensor> {
            ckpt.tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        tr.gen_opt.load_state(GEN_OPT, &only(GEN_OPT))?;
        tr.disc_opt.load_state(DISC_OPT, &only(DISC_OPT))?;
        tr.step = ckpt
            .tensors
            .get(STATE_KEY)
            .ok_or_else(|| Error::Checkpoint("missing trainer step".into()))?
            .item() as usize;
        Ok(tr)
    }
}

/// Distillation needs a non-causal teacher and a causal student of equal
/// widths.
pub fn check_distillation_pair(teacher: &CodecConfig, student: &CodecConfig) -> Result<()> {
    if teacher.causal {
        return Err(Error::Mode("distillation teacher must be non-causal".into()));
    }
    if !student.causal {
        return Err(Error::Mode("distillation student must be causal".into()));
    }
    if teacher.with_causal(true) != *student {
        return Err(Error::Mode(
            "teacher and student differ in more than causality".into(),
        ));
    }
    Ok(())
}

/// Load data (and a teacher when configured) and train.
pub fn train(run: &RunConfig) -> Result<Trainer> {
    let dir = run
        .train
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config("train.data_dir is not set".into()))?;
    let dataset = Dataset::from_dir(dir, run.codec.stft.sample_rate)?;
    let teacher = match &run.train.distill {
        Some(p) => Some(CodecModel::load(p)?),
        None => None,
    };
    let mut tr = Trainer::new(run.clone(), dataset, teacher)?;
    tr.run()?;
    Ok(tr)
}
