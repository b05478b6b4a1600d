use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use stackwfa::error::{Error, Result};
use stackwfa::tasks::corpus::{load_corpus, Vocabulary};
use stackwfa::tasks::{build_task_grammar, grammar_for_dataset, Dataset};
use stackwfa::training::{
    corpus_perplexity, evaluate, search as run_search, train_cfl, train_corpus, Checkpoint, CorpusData, CorpusRun,
    EvalReport, MetricsLog, Model, SearchOutcome, TrainConfig, Trial,
};

use crate::config::{FileConfig, Mode, SearchSection, TaskSection, TrainingSection};
use crate::manifest::{ensure_parent, with_suffix, write_file, RunManifest};

/// Settings common to every command.
pub struct Ctx {
    pub seed: u64,
    pub root: PathBuf,
    pub manifest: Option<PathBuf>,
    pub file: FileConfig,
}

impl Ctx {
    /// Writes the manifest to `--manifest` or `default`.
    pub fn finish(&self, m: &RunManifest, default: PathBuf) -> Result<()> {
        let path = self.manifest.clone().unwrap_or(default);
        m.write(&path)?;
        eprintln!("manifest: {}", path.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    task: TaskSection,
    /// Sample this many strings of every achievable length instead of --count
    #[arg(long)]
    per_length: Option<usize>,
    /// Output file [default: <data-dir>/<task>-seed<seed>.txt]
    #[arg(long, short)]
    out: Option<PathBuf>,
}

pub fn gen(ctx: &Ctx, args: GenArgs) -> Result<()> {
    let sec = args.task.merge(ctx.file.task.clone());
    let task = sec.task()?;
    let params = sec.params();
    let count = sec.count.unwrap_or(1000);
    let out = args
        .out
        .unwrap_or_else(|| ctx.root.join(format!("{task}-seed{}.txt", ctx.seed)));
    let mut m = RunManifest::new("gen");
    m.config(&json!({ "task": task.name(), "params": params, "count": count, "per_length": args.per_length }));
    m.seed("sample", ctx.seed);
    let ds = m.time("sample", || {
        let g = build_task_grammar(task, params)?;
        match args.per_length {
            Some(k) => g.sample_per_length(k, ctx.seed),
            None => g.sample(count, ctx.seed),
        }
    })?;
    ensure_parent(&out)?;
    ds.write(&out)?;
    m.artifact(&out);
    m.artifact(&Dataset::sidecar_path(&out));
    println!("wrote {} {task} strings to {}", ds.len(), out.display());
    ctx.finish(&m, with_suffix(&out, ".manifest.json"))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    training: TrainingSection,
    /// Training split (a task dataset, or plain text with --mode corpus)
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Evaluate the selected model on this split at the end
    #[arg(long)]
    test: Option<PathBuf>,
    /// Checkpoint path [default: <data-dir>/<family>-seed<seed>.ckpt]
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Continue an interrupted corpus run from its checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop a corpus run after this many chunks and save a resumable checkpoint
    #[arg(long)]
    halt_after_chunks: Option<usize>,
}

fn default_checkpoint(ctx: &Ctx, cfg: &TrainConfig) -> PathBuf {
    ctx.root.join(format!("{}-seed{}.ckpt", cfg.family, ctx.seed))
}

fn save_run(m: &mut RunManifest, ck: &mut Checkpoint, log: &MetricsLog, out: &Path) -> Result<()> {
    let log_path = with_suffix(out, ".metrics");
    ck.log_path = Some(log_path.display().to_string());
    ensure_parent(out)?;
    ck.save(out)?;
    write_file(&log_path, log.to_text().as_bytes())?;
    m.artifact(out);
    m.artifact(&log_path);
    Ok(())
}

fn load_corpus_data(train: &Path, valid: &Path, test: Option<&Path>) -> Result<CorpusData> {
    let (vocab, train) = load_corpus(train, None)?;
    let (_, valid) = load_corpus(valid, Some(&vocab))?;
    let test = match test {
        Some(p) => Some(load_corpus(p, Some(&vocab))?.1),
        None => None,
    };
    Ok(CorpusData {
        vocab,
        train,
        valid,
        test,
    })
}

fn print_report(label: &str, r: &EvalReport) {
    print!("{label}: {} strings, cross-entropy {:.6}", r.strings, r.cross_entropy);
    if let (Some(t), Some(g)) = (r.true_cross_entropy, r.gap) {
        print!(", true {t:.6}, gap {g:.6}");
    }
    println!();
}

pub fn train(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let sec = args.training.merge(ctx.file.training.clone());
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = match &resume {
        Some(ck) => ck.config.clone(),
        None => sec.resolve(ctx.seed)?,
    };
    let mode = if resume.is_some() { Mode::Corpus } else { sec.mode() };
    let out = args.out.clone().unwrap_or_else(|| default_checkpoint(ctx, &cfg));
    let mut m = RunManifest::new("train");
    m.config(&json!({ "mode": mode, "train": cfg, "train_path": args.train, "valid_path": args.valid }));
    m.seed("init", cfg.seed);
    match mode {
        Mode::Cfl => {
            let train = Dataset::read(&args.train)?;
            let valid = Dataset::read(&args.valid)?;
            let o = m.time("train", || train_cfl(&cfg, &train, &valid))?;
            let mut ck = Checkpoint::from_model(&o.model, &o.config, Some(&o.optimizer));
            save_run(&mut m, &mut ck, &o.log, &out)?;
            println!(
                "best validation gap {:.6} at epoch {} ({} epochs run)",
                o.best_gap, o.best_epoch, o.epochs_run
            );
            if let Some(p) = &args.test {
                let test = Dataset::read(p)?;
                let g = grammar_for_dataset(&test)?;
                let r = m.time("test", || evaluate(&o.model, &test, Some(&g), false))?;
                print_report("test", &r);
            }
        }
        Mode::Corpus => {
            let data = load_corpus_data(&args.train, &args.valid, args.test.as_deref())?;
            let run = CorpusRun {
                resume,
                halt_after_chunks: args.halt_after_chunks,
            };
            let mut o = m.time("train", || train_corpus(&cfg, &data, run))?;
            save_run(&mut m, &mut o.checkpoint, &o.log, &out)?;
            if o.finished {
                print!(
                    "best validation perplexity {:.3} at epoch {}",
                    o.best_valid_ppl, o.best_epoch
                );
                match o.test_ppl {
                    Some(t) => println!(", test perplexity {t:.3}"),
                    None => println!(),
                }
            } else {
                println!("halted; resume with --resume {}", out.display());
            }
        }
    }
    ctx.finish(&m, with_suffix(&out, ".manifest.json"))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task dataset, or plain text for a corpus checkpoint
    #[arg(long)]
    data: PathBuf,
    /// Also report each string length separately
    #[arg(long)]
    by_length: bool,
    /// Write the report as JSON
    #[arg(long, short)]
    out: Option<PathBuf>,
}

pub fn eval(ctx: &Ctx, args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model()?;
    let mut m = RunManifest::new("eval");
    m.config(&json!({ "checkpoint": args.checkpoint, "data": args.data, "by_length": args.by_length }));
    m.seed("seed", ctx.seed);
    let report = if ck.progress.is_some() {
        let vocab = Vocabulary::from_tokens(ck.vocab.clone());
        let (_, stream) = load_corpus(&args.data, Some(&vocab))?;
        let ppl = m.time("eval", || {
            corpus_perplexity(&model, &stream, ck.config.batch_size, ck.config.chunk_len)
        })?;
        println!("perplexity {ppl:.3} over {} tokens", stream.len());
        json!({ "tokens": stream.len(), "perplexity": ppl })
    } else {
        let ds = Dataset::read(&args.data)?;
        let g = grammar_for_dataset(&ds)?;
        let r = m.time("eval", || evaluate(&model, &ds, Some(&g), args.by_length))?;
        print_report("eval", &r);
        if args.by_length {
            println!(
                "{:>6} {:>8} {:>12} {:>12} {:>10}",
                "length", "strings", "model", "true", "gap"
            );
            for b in &r.bins {
                println!(
                    "{:>6} {:>8} {:>12.6} {:>12.6} {:>10.6}",
                    b.len,
                    b.strings,
                    b.cross_entropy,
                    b.true_cross_entropy.unwrap_or(f64::NAN),
                    b.gap.unwrap_or(f64::NAN)
                );
            }
        }
        json!({
            "strings": r.strings,
            "symbols": r.symbols,
            "cross_entropy": r.cross_entropy,
            "true_cross_entropy": r.true_cross_entropy,
            "gap": r.gap,
            "bins": r.bins.iter().map(|b| json!({
                "length": b.len,
                "strings": b.strings,
                "cross_entropy": b.cross_entropy,
                "true_cross_entropy": b.true_cross_entropy,
                "gap": b.gap,
            })).collect::<Vec<_>>(),
        })
    };
    let default_manifest = match &args.out {
        Some(out) => {
            write_file(out, serde_json::to_string_pretty(&report).expect("json").as_bytes())?;
            m.artifact(out);
            with_suffix(out, ".manifest.json")
        }
        None => ctx.root.join("eval.manifest.json"),
    };
    ctx.finish(&m, default_manifest)
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    training: TrainingSection,
    #[command(flatten)]
    search: SearchSection,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Checkpoint of the best trial [default: <data-dir>/search-<family>-seed<seed>.ckpt]
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn print_trials(trials: &[Trial], best: usize) {
    println!(
        "{:>5} {:>12} {:>10} {:>7} {:>20} {:>12}",
        "trial", "lr", "clip", "restart", "seed", "metric"
    );
    for t in trials {
        let clip = t.clip.map_or("-".to_string(), |c| format!("{c:.3e}"));
        let metric = t.metric.map_or("diverged".to_string(), |v| format!("{v:.6}"));
        let mark = if t.index == best { " *" } else { "" };
        println!(
            "{:>5} {:>12.6} {:>10} {:>7} {:>20} {:>12}{mark}",
            t.index, t.learning_rate, clip, t.restart, t.seed, metric
        );
    }
}

struct Best {
    checkpoint: Checkpoint,
    log: MetricsLog,
    model: Model,
}

pub fn search(ctx: &Ctx, args: SearchArgs) -> Result<()> {
    let sec = args.training.merge(ctx.file.training.clone());
    let cfg = sec.resolve(ctx.seed)?;
    let opts = args.search.merge(ctx.file.search.clone()).resolve(ctx.seed)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| ctx.root.join(format!("search-{}-seed{}.ckpt", cfg.family, ctx.seed)));
    let mut m = RunManifest::new("search");
    m.config(
        &json!({ "mode": sec.mode(), "base": cfg, "search": opts, "train_path": args.train, "valid_path": args.valid }),
    );
    m.seed("search", ctx.seed);
    let outcome: SearchOutcome<Best> = match sec.mode() {
        Mode::Cfl => {
            let train = Dataset::read(&args.train)?;
            let valid = Dataset::read(&args.valid)?;
            m.time("search", || {
                run_search(&cfg, &opts, |c| {
                    let o = train_cfl(c, &train, &valid)?;
                    let ck = Checkpoint::from_model(&o.model, &o.config, Some(&o.optimizer));
                    let gap = o.best_gap;
                    Ok((
                        Best {
                            checkpoint: ck,
                            log: o.log,
                            model: o.model,
                        },
                        gap,
                    ))
                })
            })?
        }
        Mode::Corpus => {
            let data = load_corpus_data(&args.train, &args.valid, None)?;
            m.time("search", || {
                run_search(&cfg, &opts, |c| {
                    let o = train_corpus(c, &data, CorpusRun::default())?;
                    let ppl = o.best_valid_ppl;
                    Ok((
                        Best {
                            checkpoint: o.checkpoint,
                            log: o.log,
                            model: o.model,
                        },
                        ppl,
                    ))
                })
            })?
        }
    };
    for t in &outcome.trials {
        m.seed(&format!("trial{}", t.index), t.seed);
    }
    print_trials(&outcome.trials, outcome.best_index);
    let mut best = outcome.best;
    save_run(&mut m, &mut best.checkpoint, &best.log, &out)?;
    let table = with_suffix(&out, ".trials.json");
    write_file(
        &table,
        serde_json::to_string_pretty(&outcome.trials).expect("json").as_bytes(),
    )?;
    m.artifact(&table);
    if let Some(p) = &args.test {
        match sec.mode() {
            Mode::Cfl => {
                let test = Dataset::read(p)?;
                let g = grammar_for_dataset(&test)?;
                print_report("test", &evaluate(&best.model, &test, Some(&g), false)?);
            }
            Mode::Corpus => {
                let vocab = Vocabulary::from_tokens(best.model.vocab.clone());
                let (_, stream) = load_corpus(p, Some(&vocab))?;
                let c = &best.checkpoint.config;
                let ppl = corpus_perplexity(&best.model, &stream, c.batch_size, c.chunk_len)?;
                println!("test perplexity {ppl:.3}");
            }
        }
    }
    ctx.finish(&m, with_suffix(&out, ".manifest.json"))
}

/// Rejects an empty path list with a usage error naming `flag`.
pub fn require_nonempty<T>(items: &[T], flag: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::usage(format!("at least one {flag} is required")));
    }
    Ok(())
}
