//! Single-binary entry point wiring the pipeline stages into reproducible
//! workflows: synth, segment, cluster, train, eval, translate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure (non-finite loss during training).

mod config;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use config::{FrameFusion, RunConfig};
use m2slt_core::metrics;
use m2slt_core::prototype::{build_prototype_set, PrototypeError, PrototypeSet, ToyVideoEncoder};
use m2slt_core::segment::{
    event_proposals, merge_proposals, motion_intensity, rgb_proposals, Proposal,
};
use m2slt_core::synth::{gen_dataset, load_dataset, save_dataset, SynthSample};
use m2slt_core::translate::{train, weighted_frame_fusion, Model, TranslateError, Vocab};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "m2slt",
    about = "RGB-Event sign language translation workflows"
)]
struct Cli {
    /// Seed override (defaults to the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; `{}` selects every default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Sample count override.
        #[arg(long)]
        n: Option<usize>,
        /// Write EVT-BIN event files instead of EVT-TXT.
        #[arg(long)]
        binary_events: bool,
    },
    /// Emit merged (and optionally per-branch) proposals as JSON lines.
    Segment {
        #[arg(long)]
        data: PathBuf,
        /// Also print the rgb / event branch proposals.
        #[arg(long)]
        verbose: bool,
    },
    /// Build macro-sign prototypes from a dataset.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the translator; writes a checkpoint and a loss CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Prototype file from `cluster` (required when MaR is enabled).
        #[arg(long)]
        prototypes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset (BLEU-1..4, ROUGE-L).
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prototypes: Option<PathBuf>,
    },
    /// Greedy-decode a dataset and print hypothesis/reference pairs.
    Translate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prototypes: Option<PathBuf>,
    },
}

/// Error carrying its process exit code.
struct CliError {
    code: u8,
    source: anyhow::Error,
}

impl CliError {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        CliError {
            code: 2,
            source: e.into(),
        }
    }

    fn data(e: impl Into<anyhow::Error>) -> Self {
        CliError {
            code: 3,
            source: e.into(),
        }
    }

    fn numeric(e: impl Into<anyhow::Error>) -> Self {
        CliError {
            code: 4,
            source: e.into(),
        }
    }
}

fn from_translate(e: TranslateError) -> CliError {
    match e {
        TranslateError::NumericFailure { .. } => CliError::numeric(e),
        TranslateError::CheckpointMismatch(_)
        | TranslateError::Config(_)
        | TranslateError::MissingPrototypes => CliError::config(e),
        other => CliError::data(other),
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err.source);
            ExitCode::from(err.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Synth {
            out,
            n,
            binary_events,
        } => cmd_synth(&cfg, &out, n, binary_events),
        Command::Segment { data, verbose } => cmd_segment(&cfg, &data, verbose),
        Command::Cluster { data, out } => cmd_cluster(&cfg, &data, &out),
        Command::Train {
            data,
            prototypes,
            out,
        } => cmd_train(&cfg, &data, prototypes.as_deref(), &out),
        Command::Eval {
            data,
            checkpoint,
            prototypes,
        } => cmd_eval(&cfg, &data, &checkpoint, prototypes.as_deref()),
        Command::Translate {
            data,
            checkpoint,
            prototypes,
        } => cmd_translate(&cfg, &data, &checkpoint, prototypes.as_deref()),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(CliError::config)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(CliError::config)?
        }
    };
    validate_config(&cfg)?;
    Ok(cfg)
}

fn validate_config(cfg: &RunConfig) -> CliResult<()> {
    let mut problems = Vec::new();
    if cfg.segment.alpha_min < 1 {
        problems.push("segment.alpha_min must be >= 1");
    }
    if !(cfg.segment.pixel_thresh > 0.0 && cfg.segment.pixel_thresh.is_finite()) {
        problems.push("segment.pixel_thresh must be a positive finite value");
    }
    if cfg.window.window < 1 || cfg.window.stride < 1 {
        problems.push("window.window and window.stride must be >= 1");
    }
    if cfg.dbscan.min_pts < 1 {
        problems.push("dbscan.min_pts must be >= 1");
    }
    if cfg.sgd.epochs < 1 {
        problems.push("sgd.epochs must be >= 1");
    }
    if !(cfg.sgd.lr0 > 0.0 && cfg.sgd.lr0.is_finite()) {
        problems.push("sgd.lr0 must be a positive finite value");
    }
    if !(0.0..1.0).contains(&cfg.sgd.momentum) {
        problems.push("sgd.momentum must lie in [0, 1)");
    }
    if cfg.eval.max_len < 1 {
        problems.push("eval.max_len must be >= 1");
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::config(anyhow!(problems.join("; "))))
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path, n: Option<usize>, binary: bool) -> CliResult<()> {
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    let n = n.unwrap_or(cfg.n_samples);
    let samples = gen_dataset(&spec, n, spec.seed).map_err(CliError::data)?;
    save_dataset(out, &samples, &spec, binary || cfg.binary_events).map_err(CliError::data)?;
    println!(
        "{}",
        serde_json::json!({"dir": out.display().to_string(), "samples": n})
    );
    Ok(())
}

#[derive(Serialize)]
struct SegmentLine<'a> {
    sample: &'a str,
    segments: Vec<(usize, usize)>,
    source: &'a str,
}

fn spans(props: &[Proposal]) -> Vec<(usize, usize)> {
    props.iter().map(|p| (p.start, p.end)).collect()
}

fn cmd_segment(cfg: &RunConfig, data: &Path, verbose: bool) -> CliResult<()> {
    if !data.join("manifest.json").exists() {
        eprintln!(
            "warning: no dataset at {}; nothing to segment",
            data.display()
        );
        return Ok(());
    }
    let (samples, _) = load_dataset(data).map_err(CliError::data)?;
    for sample in &samples {
        let intensity =
            motion_intensity(&sample.aligned.rgb, &cfg.segment).map_err(CliError::data)?;
        let a_rgb = rgb_proposals(&intensity, &cfg.segment);
        let a_evt = event_proposals(&sample.event_counts, &cfg.segment).map_err(CliError::data)?;
        let merged = merge_proposals(&a_rgb, &a_evt, &cfg.segment).map_err(CliError::data)?;
        if verbose {
            let alive = print_line(&SegmentLine {
                sample: &sample.aligned.meta,
                segments: spans(&a_rgb),
                source: "rgb",
            })? && print_line(&SegmentLine {
                sample: &sample.aligned.meta,
                segments: spans(&a_evt),
                source: "event",
            })?;
            if !alive {
                return Ok(());
            }
        }
        if !print_line(&SegmentLine {
            sample: &sample.aligned.meta,
            segments: spans(&merged),
            source: "merged",
        })? {
            return Ok(());
        }
    }
    Ok(())
}

/// Writes one JSON line; returns false when the consumer closed the pipe.
fn print_line<T: Serialize>(line: &T) -> CliResult<bool> {
    use std::io::Write;
    let json = serde_json::to_string(line).map_err(|e| CliError::data(anyhow!(e)))?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{json}") {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(false),
        Err(e) => Err(CliError::data(anyhow!(e))),
    }
}

fn cmd_cluster(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<()> {
    let (samples, manifest) = load_dataset(data).map_err(CliError::data)?;
    if samples.is_empty() {
        return Err(CliError::data(anyhow!("dataset has no samples")));
    }
    let encoder = ToyVideoEncoder::seeded(
        manifest.resolution.1 as usize,
        manifest.resolution.0 as usize,
        cfg.video_hidden,
        cfg.model.proto_dim,
        cfg.seed,
    )
    .map_err(CliError::config)?;
    let pairs: Vec<(&m2slt_core::event::AlignedSample, &[usize])> = samples
        .iter()
        .map(|s| (&s.aligned, s.event_counts.as_slice()))
        .collect();
    let (set, report) =
        build_prototype_set(&pairs, &cfg.segment, &cfg.window, &cfg.dbscan, &encoder).map_err(
            |e| match e {
                PrototypeError::AllNoise
                | PrototypeError::DegenerateEps(_)
                | PrototypeError::TooFewPoints(_) => CliError::data(e),
                other => CliError::config(other),
            },
        )?;
    let mut bytes = Vec::new();
    set.save(&mut bytes).map_err(CliError::data)?;
    std::fs::write(out, bytes)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(CliError::data)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| CliError::data(anyhow!(e)))?
    );
    Ok(())
}

fn load_prototypes(path: Option<&Path>, cfg: &RunConfig) -> CliResult<Option<PrototypeSet>> {
    let Some(path) = path else {
        return Ok(None);
    };
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading prototypes {}", path.display()))
        .map_err(CliError::data)?;
    let set = PrototypeSet::load(&mut bytes.as_slice()).map_err(CliError::data)?;
    if set.dim() != cfg.model.proto_dim {
        return Err(CliError::config(anyhow!(
            "prototype dim {} does not match model proto_dim {}",
            set.dim(),
            cfg.model.proto_dim
        )));
    }
    Ok(Some(set))
}

fn load_samples(data: &Path) -> CliResult<(Vec<SynthSample>, m2slt_core::synth::Manifest)> {
    let loaded = load_dataset(data).map_err(CliError::data)?;
    if loaded.0.is_empty() {
        return Err(CliError::data(anyhow!(
            "dataset at {} has no samples",
            data.display()
        )));
    }
    Ok(loaded)
}

fn cmd_train(cfg: &RunConfig, data: &Path, prototypes: Option<&Path>, out: &Path) -> CliResult<()> {
    let (samples, manifest) = load_samples(data)?;
    let protos = load_prototypes(prototypes, cfg)?;
    if cfg.model.mar && protos.is_none() {
        return Err(CliError::config(anyhow!(
            "MaR is enabled; pass --prototypes from the cluster step"
        )));
    }
    let dataset: Vec<m2slt_core::event::AlignedSample> =
        samples.into_iter().map(|s| s.aligned).collect();
    let (model, log) = train(
        &dataset,
        protos.as_ref(),
        &cfg.model,
        manifest.vocab_size,
        cfg.sgd.lr0,
        cfg.sgd.momentum,
        cfg.sgd.epochs,
        cfg.seed,
    )
    .map_err(from_translate)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::data(anyhow!(e)))?;
    let ckpt_path = out.join("checkpoint.m2sw");
    let mut bytes = Vec::new();
    model.save(&mut bytes).map_err(from_translate)?;
    std::fs::write(&ckpt_path, bytes)
        .with_context(|| format!("writing {}", ckpt_path.display()))
        .map_err(CliError::data)?;
    let mut csv = String::from("epoch,mean_loss,lr\n");
    for row in &log {
        csv.push_str(&format!("{},{},{}\n", row.epoch, row.mean_loss, row.lr));
    }
    let csv_path = out.join("train_log.csv");
    std::fs::write(&csv_path, csv)
        .with_context(|| format!("writing {}", csv_path.display()))
        .map_err(CliError::data)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": ckpt_path.display().to_string(),
            "epochs": log.len(),
            "final_mean_loss": log.last().map(|r| r.mean_loss),
        })
    );
    Ok(())
}

fn load_model_and_data(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    prototypes: Option<&Path>,
) -> CliResult<(Model, Option<PrototypeSet>, Vec<SynthSample>, Vocab)> {
    let (samples, manifest) = load_samples(data)?;
    let protos = load_prototypes(prototypes, cfg)?;
    if cfg.model.mar && protos.is_none() {
        return Err(CliError::config(anyhow!(
            "MaR is enabled; pass --prototypes matching the checkpoint"
        )));
    }
    let bytes = std::fs::read(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))
        .map_err(CliError::data)?;
    let model = Model::load(&cfg.model, manifest.vocab_size, &mut bytes.as_slice())
        .map_err(from_translate)?;
    let vocab = Vocab::synthetic(manifest.vocab_size);
    Ok((model, protos, samples, vocab))
}

/// Applies the configured frame handling before decoding.
fn eval_view(
    cfg: &RunConfig,
    sample: &m2slt_core::event::AlignedSample,
) -> CliResult<m2slt_core::event::AlignedSample> {
    match cfg.eval.frame_fusion {
        FrameFusion::Separate => Ok(sample.clone()),
        FrameFusion::Weighted => {
            let fused = weighted_frame_fusion(&sample.rgb, &sample.evt).map_err(from_translate)?;
            Ok(m2slt_core::event::AlignedSample {
                rgb: fused.clone(),
                evt: fused,
                tokens: sample.tokens.clone(),
                meta: sample.meta.clone(),
            })
        }
    }
}

fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    prototypes: Option<&Path>,
) -> CliResult<()> {
    let (model, protos, samples, _) = load_model_and_data(cfg, data, checkpoint, prototypes)?;
    let mut candidates = Vec::with_capacity(samples.len());
    let mut references = Vec::with_capacity(samples.len());
    for sample in &samples {
        let view = eval_view(cfg, &sample.aligned)?;
        let hyp = model
            .predict(&view, protos.as_ref(), cfg.eval.max_len)
            .map_err(from_translate)?;
        candidates.push(hyp.ids().to_vec());
        references.push(sample.aligned.tokens.ids().to_vec());
    }
    let bleu = metrics::bleu_with_smoothing(&candidates, &references, cfg.eval.bleu_smoothing)
        .map_err(|e| CliError::data(anyhow!(e)))?;
    let rouge = metrics::rouge_l_corpus(&candidates, &references)
        .map_err(|e| CliError::data(anyhow!(e)))?;
    println!(
        "{}",
        serde_json::json!({
            "bleu1": bleu[0],
            "bleu2": bleu[1],
            "bleu3": bleu[2],
            "bleu4": bleu[3],
            "rouge_l": rouge,
            "n": samples.len(),
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct TranslationLine {
    id: String,
    hypothesis: Vec<String>,
    reference: Vec<String>,
}

fn cmd_translate(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    prototypes: Option<&Path>,
) -> CliResult<()> {
    let (model, protos, samples, vocab) = load_model_and_data(cfg, data, checkpoint, prototypes)?;
    for sample in &samples {
        let view = eval_view(cfg, &sample.aligned)?;
        let hyp = model
            .predict(&view, protos.as_ref(), cfg.eval.max_len)
            .map_err(from_translate)?;
        if !print_line(&TranslationLine {
            id: sample.aligned.meta.clone(),
            hypothesis: vocab.decode(hyp.ids()),
            reference: vocab.decode(sample.aligned.tokens.ids()),
        })? {
            return Ok(());
        }
    }
    Ok(())
}
