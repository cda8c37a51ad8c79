//! `apcodec` command-line tool.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 invalid configuration,
//! 4 unreadable or unsupported audio, 5 sample-rate mismatch, 6 checkpoint,
//! 7 bitstream, 8 wrong model mode, 9 validation failure, 10 non-finite
//! training values, 11 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use apcodec::audio::{self, Audio};
use apcodec::codec::{CodecModel, StreamSession};
use apcodec::eval::{self, EvalConfig, MetricReport};
use apcodec::quantizer::TokenBitstream;
use apcodec::trainer::{self, Dataset, RunConfig, Trainer};
use apcodec::Error;
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "apcodec", version, about = "Amplitude/phase spectrum neural audio codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Jsonl,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode a mono WAV file into an .apcs token bitstream.
    Encode {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode an .apcs bitstream into a WAV file.
    Decode {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run a causal model chunk by chunk and check it against batch inference.
    Stream {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Samples per chunk; random chunk sizes drawn from --seed when omitted.
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the streamed output here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from this training checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Checkpoint path, overriding the configuration.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
    /// Compare same-named WAV files in two directories.
    Eval {
        reference: PathBuf,
        degraded: PathBuf,
        /// Also measure the real-time factor of this model on the references.
        #[arg(long)]
        model: Option<PathBuf>,
        /// TOML file with an evaluation configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
}

#[derive(Debug, thiserror::Error)]
#[error("{path}: sample rate {found} Hz does not match the model's {expected} Hz; resample with an external tool")]
struct RateMismatch {
    path: PathBuf,
    found: u32,
    expected: u32,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<RateMismatch>().is_some() {
        return 5;
    }
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if err.chain().any(|c| c.is::<std::io::Error>()) { 11 } else { 1 };
    };
    match e {
        Error::Config(_) => 3,
        Error::Audio(_) | Error::EmptyInput(_) => 4,
        Error::Checkpoint(_) => 6,
        Error::Bitstream(_) => 7,
        Error::Mode(_) => 8,
        Error::Validation(_) | Error::Shape(_) | Error::Framing { .. } => 9,
        Error::NonFinite(_) => 10,
        Error::Io(_) => 11,
    }
}

fn load_model(path: &Path) -> anyhow::Result<CodecModel> {
    CodecModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn read_input(path: &Path, model: &CodecModel) -> anyhow::Result<Audio> {
    let a = audio::read_wav(path)?;
    let expected = model.config.stft.sample_rate;
    if a.sample_rate != expected {
        return Err(RateMismatch {
            path: path.to_path_buf(),
            found: a.sample_rate,
            expected,
        }
        .into());
    }
    if a.samples.len() < model.config.hop() {
        return Err(Error::EmptyInput("input shorter than one code frame").into());
    }
    Ok(a)
}

fn cmd_encode(input: &Path, model: &Path, output: &Path) -> anyhow::Result<()> {
    let model = load_model(model)?;
    let a = read_input(input, &model)?;
    let stream = model.encode_bitstream(&a.samples)?;
    let bytes = stream.to_bytes();
    std::fs::write(output, &bytes).with_context(|| format!("writing {}", output.display()))?;
    let h = &stream.header;
    println!(
        "frames {} | bitrate {:.3} kbps | payload {} bits ({} bytes) | file {} bytes",
        h.frames,
        h.bitrate_kbps(),
        h.payload_bits(),
        h.payload_bytes(),
        bytes.len()
    );
    Ok(())
}

fn cmd_decode(input: &Path, model: &Path, output: &Path) -> anyhow::Result<()> {
    let model = load_model(model)?;
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let stream = TokenBitstream::from_bytes(&bytes).map_err(Error::from)?;
    let samples = model.decode_bitstream(&stream)?;
    let n = samples.len();
    audio::write_wav(
        output,
        &Audio {
            samples,
            sample_rate: model.config.stft.sample_rate,
        },
    )?;
    println!("decoded {} frames to {n} samples", stream.header.frames);
    Ok(())
}

fn cmd_stream(input: &Path, model: &Path, chunk: Option<usize>, seed: u64, output: Option<&Path>) -> anyhow::Result<()> {
    let model = load_model(model)?;
    if !model.config.causal {
        return Err(Error::Mode("stream needs a causal checkpoint".into()).into());
    }
    let a = read_input(input, &model)?;
    let x = &a.samples;
    let mut session = StreamSession::new(&model)?;
    let mut streamed = Vec::with_capacity(x.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = 0;
    while pos < x.len() {
        let n = match chunk {
            Some(c) if c > 0 => c,
            Some(_) => bail!(Error::Config("--chunk must be positive".into())),
            None => rng.gen_range(1..=4 * model.config.hop()),
        };
        let end = (pos + n).min(x.len());
        streamed.extend(session.push(&model, &x[pos..end])?.audio);
        pos = end;
    }
    let batch = model.round_trip(x)?;
    if batch.len() != streamed.len() {
        bail!(Error::Validation(format!(
            "streamed {} samples, batch produced {}",
            streamed.len(),
            batch.len()
        )));
    }
    let err = streamed.iter().zip(&batch).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if err > 1e-5 {
        bail!(Error::Validation(format!("streaming deviates from batch by {err:e}")));
    }
    let latency = model.probe_latency(&x[..x.len().min(5 * model.config.hop())])?;
    println!(
        "streamed {} samples | max |stream - batch| {err:.3e} | latency {latency} samples ({:.2} ms)",
        streamed.len(),
        latency as f64 * 1000.0 / model.config.stft.sample_rate as f64
    );
    if let Some(out) = output {
        audio::write_wav(
            out,
            &Audio {
                samples: streamed,
                sample_rate: model.config.stft.sample_rate,
            },
        )?;
    }
    Ok(())
}

fn cmd_train(config: &Path, resume: Option<&Path>, output: Option<&Path>, seed: Option<u64>, report: ReportFormat) -> anyhow::Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(o) = output {
        run.train.output = Some(o.to_path_buf());
    }
    let trainer = match resume {
        None => trainer::train(&run)?,
        Some(path) => {
            let ckpt = apcodec::nn::checkpoint::Checkpoint::load(path)?;
            let dir = run
                .train
                .data_dir
                .as_ref()
                .ok_or_else(|| Error::Config("train.data_dir is not set".into()))?;
            let dataset = Dataset::from_dir(dir, run.codec.stft.sample_rate)?;
            let teacher = run.train.distill.as_ref().map(CodecModel::load).transpose()?;
            let mut tr = Trainer::resume(&ckpt, dataset, teacher)?;
            tr.run.train.steps = run.train.steps;
            tr.run.train.output = run.train.output.clone();
            tr.run()?;
            tr
        }
    };
    if let Some(out) = &trainer.run.train.output {
        let log = out.with_extension("train.jsonl");
        std::fs::write(&log, trainer.report.to_jsonl())?;
    }
    let rows = &trainer.report.rows;
    match report {
        ReportFormat::Jsonl => print!("{}", trainer.report.to_jsonl()),
        ReportFormat::Text => {
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                println!(
                    "trained steps {}..{} | total {:.4} -> {:.4} | amplitude {:.4} -> {:.4}",
                    first.step, last.step, first.total, last.total, first.amplitude, last.amplitude
                );
            }
        }
    }
    if let Some(out) = &trainer.run.train.output {
        println!("checkpoint {}", out.display());
    }
    Ok(())
}

fn cmd_eval(
    reference: &Path,
    degraded: &Path,
    model: Option<&Path>,
    config: Option<&Path>,
    output: Option<&Path>,
    report: ReportFormat,
) -> anyhow::Result<()> {
    let cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg: EvalConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            cfg.validate()?;
            Some(cfg)
        }
        None => None,
    };
    let mut result: MetricReport = eval::evaluate_dirs(reference, degraded, cfg)?;
    if let Some(path) = model {
        let model = load_model(path)?;
        for u in &mut result.utterances {
            let a = read_input(&reference.join(&u.name), &model)?;
            u.rtf = Some(eval::codec_rtf(&model, &a.samples, 1, 3)?);
        }
        result = MetricReport::from_utterances(result.utterances)?;
    }
    let text = match report {
        ReportFormat::Text => result.to_text(),
        ReportFormat::Jsonl => result.to_jsonl(),
    };
    match output {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Encode { input, model, output } => cmd_encode(&input, &model, &output),
        Command::Decode { input, model, output } => cmd_decode(&input, &model, &output),
        Command::Stream {
            input,
            model,
            chunk,
            seed,
            output,
        } => cmd_stream(&input, &model, chunk, seed, output.as_deref()),
        Command::Train {
            config,
            model,
            output,
            seed,
            report,
        } => cmd_train(&config, model.as_deref(), output.as_deref(), seed, report),
        Command::Eval {
            reference,
            degraded,
            model,
            config,
            output,
            report,
        } => cmd_eval(&reference, &degraded, model.as_deref(), config.as_deref(), output.as_deref(), report),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("APCODEC_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
