//! `dex` — corpus generation, training, synthesis, NFE/RTF sweeps and the
//! patch-embedding ablation harness.
//!
//! Exit codes: 0 success, 2 usage error, 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use dex_tts::decoder::{NoiseSchedule, PatchEmbedKind, StyleRefs, TraceRow};
use dex_tts::error::Error;
use dex_tts::mel::MelSpec;
use dex_tts::pipeline::{
    nfe_sweep, synth_corpus, Checkpoint, CorpusSpec, DexModel, Mode, ModelConfig, ToyCorpus,
    TrainOptions, Trainer,
};
use dex_tts::tensor::{Tape, Tensor};
use dex_tts::textenc::PhonemeSeq;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dex", version, about = "diffusion acoustic model workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus.
    Corpus(CorpusArgs),
    /// Train a model on a corpus file.
    Train(TrainArgs),
    /// Synthesize a mel-spectrogram from token ids.
    Synth(SynthArgs),
    /// Time synthesis across a list of NFE values.
    Sweep(SweepArgs),
    /// Compare patch-embedding kinds on a small config.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Output corpus file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of utterances.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    bins: usize,
    #[arg(long, default_value_t = 12)]
    vocab: usize,
    #[arg(long, default_value_t = 24)]
    frames_min: usize,
    #[arg(long, default_value_t = 48)]
    frames_max: usize,
    /// Overwrite an existing file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; omit to use the built-in toy profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for loss.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Parse and echo the config, check inputs, then exit.
    #[arg(long)]
    dry_run: bool,
    /// Write the final searched durations as CSV.
    #[arg(long)]
    dump_durations: Option<PathBuf>,
    /// Worker threads (0 = automatic; DEX_THREADS caps it either way).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated token ids, e.g. 1,4,2,9.
    #[arg(long)]
    text_ids: String,
    /// Reference mel (.csv or binary tensor); required in dex mode.
    #[arg(long)]
    r#ref: Option<PathBuf>,
    /// Reference log-F0 track (.csv, one value per frame); zeros if omitted.
    #[arg(long)]
    ref_f0: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    nfe: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output mel CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write a grayscale PGM image.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Write a per-step sampler trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus holding the target utterance.
    #[arg(long)]
    corpus: PathBuf,
    /// Index of the target utterance.
    #[arg(long, default_value_t = 0)]
    utt: usize,
    /// Comma-separated NFE values, e.g. 10,25,50.
    #[arg(long, default_value = "10,25,50")]
    nfe_list: String,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Embedding kinds to compare.
    #[arg(long, default_value = "sin-cos,time-freq,pos-freq,conv-freq")]
    kinds: String,
    /// Short training budget per kind.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Additionally rerun conv-freq without patch overlap (kernel P).
    #[arg(long)]
    overlap_ablation: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corpus(args) => cmd_corpus(args),
        Command::Train(args) => cmd_train(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::NonFinite(_) | Error::Numeric(_) => 3,
            _ => 2,
        });
    }
}

fn cmd_corpus(args: CorpusArgs) -> Result<(), Error> {
    if args.n == 0 {
        return Err(Error::Input("--n must be at least 1".into()));
    }
    if args.out.exists() && !args.force {
        return Err(Error::Input(format!(
            "{} exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    let corpus = synth_corpus(&CorpusSpec {
        seed: args.seed,
        n_utts: args.n,
        vocab: args.vocab,
        bins: args.bins,
        frames_range: (args.frames_min, args.frames_max),
        ..CorpusSpec::default()
    })?;
    corpus.save(&args.out)?;
    println!(
        "wrote {} utterances ({} bins, vocab {}) to {}",
        corpus.len(),
        corpus.bins,
        corpus.vocab,
        args.out.display()
    );
    Ok(())
}

fn echo_config(cfg: &ModelConfig) {
    println!(
        "config: mode={} patch={} dit_blocks={} dec_hidden={} style_layers={} \
         codebook={}x{} text_layers={} text_hidden={} text_heads={} \
         mel={}.fft{}.hop{}.win{}@{} lr={} batch={}",
        cfg.mode,
        cfg.dec.patch,
        cfg.dec.dit_blocks,
        cfg.dec.hidden,
        cfg.style.layers,
        cfg.style.codebook_size,
        cfg.style.codebook_dim,
        cfg.text.layers,
        cfg.text.hidden,
        cfg.text.heads,
        cfg.mel.bins,
        cfg.mel.fft,
        cfg.mel.hop,
        cfg.mel.win,
        cfg.mel.sample_rate,
        cfg.train.lr,
        cfg.train.batch
    );
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let config = match &args.config {
        Some(path) => ModelConfig::load_toml(path)?,
        None => ModelConfig::toy(),
    };
    echo_config(&config);
    if !args.corpus.exists() {
        return Err(Error::Input(format!(
            "corpus file {} does not exist",
            args.corpus.display()
        )));
    }
    if args.dry_run {
        println!("dry run: config and corpus are valid");
        return Ok(());
    }
    let corpus = ToyCorpus::load(&args.corpus)?;
    let model = DexModel::new(config)?;
    println!("parameters: {}", model.num_parameters());
    let mut trainer = Trainer::new(model);
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        threads: args.threads,
        dump_durations: args.dump_durations.clone(),
        verbose: !args.quiet,
    };
    let records = trainer.run(&corpus, &opts)?;
    match records.last() {
        Some(last) => println!(
            "done: {} epochs, final total loss {:.5} (checkpoint in {})",
            records.len(),
            last.total,
            args.out.display()
        ),
        None => println!("done: 0 steps requested, wrote the initial checkpoint"),
    }
    Ok(())
}

fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>, Error> {
    let items: Result<Vec<usize>, _> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect();
    items.map_err(|e| Error::Input(format!("bad {what} list `{text}`: {e}")))
}

fn read_f0(path: &Path, frames: usize) -> Result<Tensor, Error> {
    let text = std::fs::read_to_string(path)?;
    let values: Result<Vec<f64>, _> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect();
    let values = values.map_err(|e| Error::Format(format!("pitch track parse: {e}")))?;
    if values.len() != frames {
        return Err(Error::Input(format!(
            "pitch track has {} values, reference has {frames} frames",
            values.len()
        )));
    }
    Tensor::new(vec![frames], values)
}

fn load_reference(
    path: &Path,
    f0_path: Option<&Path>,
    sample_rate: u32,
    hop: u32,
) -> Result<(MelSpec, Tensor), Error> {
    let mel = if path.extension().is_some_and(|e| e == "csv") {
        MelSpec::read_csv(path, sample_rate, hop)?
    } else {
        MelSpec::read_binary(path, sample_rate, hop)?
    };
    let f0 = match f0_path {
        Some(p) => read_f0(p, mel.frames())?,
        None => Tensor::zeros(&[mel.frames()]),
    };
    Ok((mel, f0))
}

fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), Error> {
    let mut out = String::from("step,t,x_norm,residual_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.time, r.state_norm, r.residual_norm
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.model()?;
    let ids = parse_usize_list(&args.text_ids, "token id")?;
    let phonemes = PhonemeSeq::new(ids, model.config.vocab)?;
    let sr = model.config.mel.sample_rate as u32;
    let hop = model.config.mel.hop as u32;

    let reference = match (&args.r#ref, model.config.mode) {
        (Some(path), Mode::Dex) => Some(load_reference(path, args.ref_f0.as_deref(), sr, hop)?),
        (Some(_), Mode::Gedex) => {
            eprintln!("warning: gedex checkpoint ignores the reference; proceeding without it");
            None
        }
        (None, Mode::Dex) => {
            return Err(Error::Input(
                "this checkpoint needs --ref (dex mode)".into(),
            ))
        }
        (None, Mode::Gedex) => None,
    };
    let ref_view = reference.as_ref().map(|(m, f)| (m, f));

    let mut trace_rows = Vec::new();
    let mel = model.synthesize(
        &phonemes,
        ref_view,
        args.nfe,
        args.seed,
        args.trace.is_some().then_some(&mut trace_rows),
    )?;
    mel.write_csv(&args.out)?;
    if let Some(plot) = &args.plot {
        mel.write_pgm(plot)?;
    }
    if let Some(trace) = &args.trace {
        write_trace(trace, &trace_rows)?;
    }
    println!(
        "synthesized {} frames x {} bins -> {}",
        mel.frames(),
        mel.bins(),
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.model()?;
    let corpus = ToyCorpus::load(&args.corpus)?;
    let target = corpus
        .utterances
        .get(args.utt)
        .ok_or_else(|| Error::Input(format!("utterance {} out of range", args.utt)))?;
    let nfe_list = parse_usize_list(&args.nfe_list, "nfe")?;
    if nfe_list.is_empty() || nfe_list.contains(&0) {
        return Err(Error::Input("nfe values must be positive".into()));
    }
    let report = nfe_sweep(&model, target, &nfe_list, args.repeat, args.seed)?;
    report.write_csv(&args.out)?;
    for (nfe, rtf) in report.mean_rtf_by_nfe() {
        println!("nfe {nfe:4}  mean rtf {rtf:.4}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Small reference-free config used by the embedding comparison.
fn ablation_config(kind: PatchEmbedKind, overlap: bool, seed: u64, steps: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy_gedex();
    cfg.dec.patch = 2;
    cfg.dec.hidden = 16;
    cfg.dec.dit_blocks = 2;
    cfg.dec.dit_heads = 2;
    cfg.text.layers = 1;
    cfg.text.hidden = 16;
    cfg.dec.embed_kind = kind;
    cfg.dec.overlap = overlap;
    cfg.dec.max_frames = 48;
    cfg.train.steps = steps;
    cfg.train.seed = seed;
    cfg
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    let kinds: Result<Vec<PatchEmbedKind>, Error> = args
        .kinds
        .split(',')
        .map(|s| s.trim().parse::<PatchEmbedKind>())
        .collect();
    let mut variants: Vec<(PatchEmbedKind, bool)> = kinds?.into_iter().map(|k| (k, true)).collect();
    if args.overlap_ablation {
        variants.push((PatchEmbedKind::ConvFreq, false));
    }
    let corpus = synth_corpus(&CorpusSpec {
        seed: args.seed,
        ..CorpusSpec::default()
    })?;

    let mut out = String::from("kind,overlap,final_diff_loss,trained_extent,unseen_extent\n");
    for (kind, overlap) in variants {
        let config = ablation_config(kind, overlap, args.seed, args.steps);
        let model = DexModel::new(config.clone())?;
        let mut trainer = Trainer::new(model);
        let records = trainer.run(&corpus, &TrainOptions::default())?;
        let final_diff = records.last().map(|r| r.diffusion).unwrap_or(f64::NAN);
        let model = &trainer.model;

        // probe the denoiser directly at the trained extent and beyond it
        let probe = |frames: usize| -> String {
            let run = |tape: &mut Tape| -> Result<(), Error> {
                let x = tape.constant(Tensor::zeros(&[config.mel.bins, frames]))?;
                let cond = tape.constant(Tensor::zeros(&[config.mel.bins, frames]))?;
                let styles: Option<StyleRefs> = None;
                model.denoiser.denoise(
                    tape,
                    &model.store,
                    x,
                    cond,
                    1.0,
                    styles,
                    &NoiseSchedule::default(),
                )?;
                Ok(())
            };
            let mut tape = Tape::new();
            match run(&mut tape) {
                Ok(()) => "ok".to_string(),
                Err(Error::Extent(_)) => "extent error".to_string(),
                Err(e) => format!("error: {e}"),
            }
        };
        let trained = probe(config.dec.max_frames);
        let unseen = probe(config.dec.max_frames * 2);
        println!(
            "{kind} overlap={overlap}: L_diff {final_diff:.4}, trained \"{trained}\", unseen \"{unseen}\""
        );
        out.push_str(&format!(
            "{kind},{overlap},{final_diff},{trained},{unseen}\n"
        ));
    }
    std::fs::write(&args.out, out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
