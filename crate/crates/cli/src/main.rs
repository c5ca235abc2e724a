//! `nse`: train, simplify, evaluate and inspect sentence simplification
//! models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 checkpoint error, 1 anything else.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nse_core::checkpoint::Checkpoint;
use nse_core::config::{read_config_file, RunConfig};
use nse_core::corpus::{
    load_parallel, load_pretrained_embeddings, load_references, read_lines, tokenize, Vocabulary,
};
use nse_core::encoder::EncoderKind;
use nse_core::metrics::{evaluate, EvalInstance, MetricReport};
use nse_core::model::{ModelConfig, Seq2Seq};
use nse_core::search::{beam_decode, greedy_decode, replace_unks, BeamConfig, DEFAULT_MAX_LEN};
use nse_core::train::{decode_strings, train, DevSet};
use nse_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "nse",
    version,
    about = "Neural Semantic Encoder sentence simplification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a model and write best and last checkpoints.
    Train(TrainArgs),
    /// Simplify one sentence per input line.
    Simplify(SimplifyArgs),
    /// Score a checkpoint with BLEU and SARI over a sweep of beam sizes.
    Evaluate(EvaluateArgs),
    /// Print attention weights and the NSE memory trace for one sentence.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    vocab_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    tune_metric: Option<String>,
    #[arg(long)]
    sari_bleu_threshold: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    train_src: Option<String>,
    #[arg(long)]
    train_tgt: Option<String>,
    #[arg(long)]
    dev_src: Option<String>,
    /// One or more reference files parallel to --dev-src.
    #[arg(long, num_args = 1..)]
    dev_refs: Vec<String>,
    #[arg(long)]
    embeddings: Option<String>,
    #[arg(long)]
    checkpoint_dir: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    /// Any other configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SimplifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One tokenized sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
    /// Rank hypotheses by mean per-token log-probability.
    #[arg(long)]
    length_normalize: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    /// Reference files, each parallel to --src.
    #[arg(long, num_args = 1.., required = true)]
    refs: Vec<PathBuf>,
    /// Comma-separated beam sizes; 1 is greedy.
    #[arg(long, default_value = "1,5,10")]
    beams: String,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tokenized source sentence.
    #[arg(long)]
    sentence: String,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
    /// Ask for the encoder memory trace (always shown for NSE models).
    #[arg(long)]
    sigma: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn checkpoint(e: Error) -> Self {
        Failure {
            code: 4,
            message: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Io { .. } | Error::Alignment(_) | Error::Format { .. } => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Simplify(a) => cmd_simplify(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Seq2Seq), Failure> {
    let ckpt = Checkpoint::load(path).map_err(Failure::checkpoint)?;
    let model = ckpt.model().map_err(Failure::checkpoint)?;
    Ok((ckpt, model))
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
    value
        .as_deref()
        .ok_or_else(|| Failure::usage(format!("missing required setting {key}")))
}

fn check_exists(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!("{}: file not found", path.display()),
        })
    }
}

fn train_pairs(a: &TrainArgs) -> Result<Vec<(String, String)>, Failure> {
    let mut pairs = match &a.config {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    let flags = [
        ("preset", &a.preset),
        ("encoder", &a.encoder),
        ("dim", &a.dim),
        ("vocab-size", &a.vocab_size),
        ("lr", &a.lr),
        ("batch-size", &a.batch_size),
        ("dropout", &a.dropout),
        ("epochs", &a.epochs),
        ("tune-metric", &a.tune_metric),
        ("sari-bleu-threshold", &a.sari_bleu_threshold),
        ("seed", &a.seed),
        ("train-src", &a.train_src),
        ("train-tgt", &a.train_tgt),
        ("dev-src", &a.dev_src),
        ("embeddings", &a.embeddings),
        ("checkpoint-dir", &a.checkpoint_dir),
        ("max-len", &a.max_len),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v.clone()));
        }
    }
    if !a.dev_refs.is_empty() {
        pairs.push(("dev-refs".into(), a.dev_refs.join(",")));
    }
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        pairs.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(pairs)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = RunConfig::from_pairs(&train_pairs(&a)?)?;
    eprint!("{}", cfg.echo());

    let train_src = require(&cfg.train_src, "train-src")?;
    let train_tgt = require(&cfg.train_tgt, "train-tgt")?;
    let dev_src = require(&cfg.dev_src, "dev-src")?;
    if cfg.dev_refs.is_empty() {
        return Err(Failure::usage("missing required setting dev-refs"));
    }
    for p in [train_src, train_tgt, dev_src]
        .into_iter()
        .chain(cfg.dev_refs.iter().map(PathBuf::as_path))
    {
        check_exists(p)?;
    }
    if let Some(p) = &cfg.embeddings {
        check_exists(p)?;
    }

    let corpus = load_parallel(train_src, train_tgt)?;
    if corpus.is_empty() {
        return Err(Failure {
            code: 3,
            message: format!("{}: no usable training pairs", train_src.display()),
        });
    }
    let t = &cfg.train;
    let src_vocab = Vocabulary::build(corpus.sources(), t.vocab_size)?;
    let tgt_vocab = Vocabulary::build(corpus.targets(), t.vocab_size)?;
    let stats = corpus.stats();
    log::info!(
        "{} training pairs, mean length {:.2} / {:.2}, vocabularies {} / {}",
        stats.pairs,
        stats.src_avg_len,
        stats.tgt_avg_len,
        src_vocab.len(),
        tgt_vocab.len()
    );
    if let Some(reference) = cfg
        .preset
        .as_deref()
        .and_then(nse_core::corpus::reference_stats)
    {
        log::info!(
            "reference mean lengths for {}: {:.2} / {:.2}",
            reference.name,
            reference.src_avg_len,
            reference.tgt_avg_len
        );
    }

    let dev_lines = read_lines(dev_src)?;
    let dev_refs = load_references(&cfg.dev_refs, dev_lines.len())?;
    let (sources, references): (Vec<_>, Vec<_>) = dev_lines
        .iter()
        .map(|l| tokenize(l))
        .zip(dev_refs)
        .filter(|(s, _)| !s.is_empty())
        .unzip();
    let dev = DevSet::new(sources, references)?;

    let model_cfg = ModelConfig {
        encoder: t.encoder,
        dim: t.dim,
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        forget_bias: t.forget_bias,
    };
    let mut model = Seq2Seq::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(t.seed));
    if let Some(path) = &cfg.embeddings {
        for (table, vocab, side) in [
            (model.src_embedding.table, &src_vocab, "source"),
            (model.decoder.embedding.table, &tgt_vocab, "target"),
        ] {
            let hit = load_pretrained_embeddings(path, vocab, model.params.get_mut(table))?;
            log::info!(
                "pretrained embeddings cover {:.1}% of the {side} vocabulary",
                100.0 * hit
            );
        }
    }

    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let write = |name: &str, text: &str| -> CmdResult {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Failure::from(Error::Io { path: p, source: e }))
    };
    write("config.txt", &cfg.echo())?;
    write("src.vocab", &(src_vocab.tokens().join("\n") + "\n"))?;
    write("tgt.vocab", &(tgt_vocab.tokens().join("\n") + "\n"))?;

    let mut log_text = String::new();
    let outcome = train(
        t,
        model,
        &corpus,
        &src_vocab,
        &tgt_vocab,
        &dev,
        |record, _| {
            println!("{record}");
            let _ = writeln!(log_text, "{record}");
            ControlFlow::Continue(())
        },
    )?;
    write("train.log", &log_text)?;

    let best = *outcome.best_record();
    let mut ckpt = Checkpoint::new(&outcome.best, &src_vocab, &tgt_vocab);
    ckpt.epoch = best.epoch as u32;
    ckpt.dev_bleu = best.dev_bleu;
    ckpt.dev_sari = best.dev_sari;
    ckpt.save(&dir.join("best.ckpt"))
        .map_err(Failure::checkpoint)?;

    let last = *outcome.records.last().expect("at least one epoch");
    let mut ckpt = Checkpoint::new(&outcome.last, &src_vocab, &tgt_vocab);
    ckpt.epoch = last.epoch as u32;
    ckpt.dev_bleu = last.dev_bleu;
    ckpt.dev_sari = last.dev_sari;
    ckpt.adam = Some(outcome.adam);
    ckpt.save(&dir.join("last.ckpt"))
        .map_err(Failure::checkpoint)?;
    log::info!("selected epoch {} ({} on dev)", best.epoch, t.tune_metric);
    Ok(())
}

fn search_config(
    beam: usize,
    max_len: usize,
    length_normalize: bool,
) -> Result<BeamConfig, Failure> {
    if beam == 0 {
        return Err(Failure::usage("beam size must be at least 1"));
    }
    if max_len == 0 {
        return Err(Failure::usage("max-len must be at least 1"));
    }
    Ok(BeamConfig {
        beam,
        max_len,
        length_normalize,
    })
}

/// Decodes non-empty sources; empty ones map to empty outputs.
fn simplify_all(
    ckpt: &Checkpoint,
    model: &Seq2Seq,
    sources: &[Vec<String>],
    search: &BeamConfig,
) -> Result<Vec<Vec<String>>, Failure> {
    let keep: Vec<usize> = (0..sources.len())
        .filter(|&i| !sources[i].is_empty())
        .collect();
    let inputs: Vec<Vec<String>> = keep.iter().map(|&i| sources[i].clone()).collect();
    let decoded = decode_strings(model, &ckpt.src_vocab, &ckpt.tgt_vocab, &inputs, search)?;
    let mut out = vec![Vec::new(); sources.len()];
    for (i, d) in keep.into_iter().zip(decoded) {
        out[i] = d;
    }
    Ok(out)
}

fn cmd_simplify(a: SimplifyArgs) -> CmdResult {
    let search = search_config(a.beam, a.max_len, a.length_normalize)?;
    let (ckpt, model) = load_checkpoint(&a.checkpoint)?;
    let sources: Vec<Vec<String>> = read_lines(&a.input)?.iter().map(|l| tokenize(l)).collect();
    let outputs = simplify_all(&ckpt, &model, &sources, &search)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for o in outputs {
        writeln!(out, "{}", o.join(" ")).map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })?;
    }
    Ok(())
}

fn parse_beams(text: &str) -> Result<Vec<usize>, Failure> {
    let beams: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("invalid beam list {text:?}")))?;
    if beams.is_empty() || beams.contains(&0) {
        return Err(Failure::usage("beam sizes must be positive"));
    }
    Ok(beams)
}

fn cmd_evaluate(a: EvaluateArgs) -> CmdResult {
    let beams = parse_beams(&a.beams)?;
    search_config(1, a.max_len, false)?;
    let (ckpt, model) = load_checkpoint(&a.checkpoint)?;
    let lines = read_lines(&a.src)?;
    let refs = load_references(&a.refs, lines.len())?;
    let sources: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).collect();

    let mut reports = Vec::new();
    for &beam in &beams {
        let outputs = simplify_all(
            &ckpt,
            &model,
            &sources,
            &search_config(beam, a.max_len, false)?,
        )?;
        let instances = sources
            .iter()
            .zip(outputs)
            .zip(&refs)
            .map(|((s, o), r)| {
                EvalInstance::from_text(
                    &s.join(" "),
                    &o.join(" "),
                    r.iter().map(|x| x.join(" ")).collect::<Vec<_>>().as_slice(),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        reports.push((beam, evaluate(&instances)?));
    }
    print!("{}", render_report(&reports));
    Ok(())
}

/// Aligned table followed by one `key=value` record per beam. `*` marks
/// the best setting for each metric (earliest on ties).
fn render_report(reports: &[(usize, MetricReport)]) -> String {
    let best = |key: fn(&MetricReport) -> f64| {
        let mut b = 0;
        for (i, (_, r)) in reports.iter().enumerate() {
            if key(r) > key(&reports[b].1) {
                b = i;
            }
        }
        b
    };
    let (best_bleu, best_sari) = (best(|r| r.bleu), best(|r| r.sari));
    let mark = |on: bool| if on { "*" } else { " " };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>9} {:>9} {:>7} {:>7} {:>7}",
        "decoder", "BLEU", "SARI", "keep", "delete", "add"
    );
    for (i, (beam, r)) in reports.iter().enumerate() {
        let name = if *beam == 1 {
            "greedy".to_string()
        } else {
            format!("beam{beam}")
        };
        let c = r.components;
        let _ = writeln!(
            s,
            "{:<8} {:>8.2}{} {:>8.2}{} {:>7.4} {:>7.4} {:>7.4}",
            name,
            r.bleu,
            mark(i == best_bleu),
            r.sari,
            mark(i == best_sari),
            c.keep,
            c.delete,
            c.add
        );
    }
    for (i, (beam, r)) in reports.iter().enumerate() {
        let c = r.components;
        let _ = writeln!(
            s,
            "beam={beam} bleu={:.6} sari={:.6} keep={:.6} delete={:.6} add={:.6} instances={} best_bleu={} best_sari={}",
            r.bleu,
            r.sari,
            c.keep,
            c.delete,
            c.add,
            r.instances,
            i == best_bleu,
            i == best_sari
        );
    }
    s
}

fn grid(out: &mut String, row_labels: &[String], col_labels: &[String], rows: &[Vec<f64>]) {
    let width = col_labels
        .iter()
        .map(|c| c.chars().count())
        .max()
        .unwrap_or(0)
        .max(7);
    let label_width = row_labels
        .iter()
        .map(|c| c.chars().count())
        .max()
        .unwrap_or(0)
        .max(4);
    let _ = write!(out, "{:label_width$}", "");
    for c in col_labels {
        let _ = write!(out, " {c:>width$}");
    }
    out.push('\n');
    for (label, row) in row_labels.iter().zip(rows) {
        let _ = write!(out, "{label:label_width$}");
        for v in row {
            let _ = write!(out, " {v:>width$.8}");
        }
        out.push('\n');
    }
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    let search = search_config(a.beam, a.max_len, false)?;
    let (ckpt, model) = load_checkpoint(&a.checkpoint)?;
    let source = tokenize(&a.sentence);
    if source.is_empty() {
        return Err(Failure::usage("sentence is empty"));
    }
    let ids = ckpt.src_vocab.encode(&source);
    let session = model.session(&ids, true)?;
    let hyp = if search.beam == 1 {
        greedy_decode(&session, search.max_len)?
    } else {
        beam_decode(&session, &search)?.best
    };
    let words = replace_unks(&hyp.tokens, &hyp.alignments, &source, &ckpt.tgt_vocab)?;

    let mut out = String::new();
    let _ = writeln!(out, "output: {}", words.join(" "));
    let _ = writeln!(out, "score: {:.6}", hyp.score);
    let _ = writeln!(
        out,
        "\nattention ({} output x {} source)",
        words.len(),
        source.len()
    );
    let alphas: Vec<Vec<f64>> = hyp.alignments.iter().map(|r| r.alpha.clone()).collect();
    grid(&mut out, &words, &source, &alphas);
    match (&session.trace, model.config.encoder) {
        (Some(trace), EncoderKind::Nse) => {
            let _ = writeln!(
                out,
                "\nmemory read weights ({} steps x {} slots)",
                trace.sigma.len(),
                source.len()
            );
            let steps: Vec<String> = source
                .iter()
                .enumerate()
                .map(|(t, w)| format!("{}:{w}", t + 1))
                .collect();
            grid(&mut out, &steps, &source, &trace.sigma);
        }
        _ if a.sigma => eprintln!("note: the lstm encoder has no memory, showing attention only"),
        _ => {}
    }
    print!("{out}");
    Ok(())
}
