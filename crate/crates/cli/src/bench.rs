use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde_json::json;
use stackwfa::controller::ModelFamily;
use stackwfa::error::{Error, Result};
use stackwfa::stack_wfa::{oracle_check as run_oracle, OracleCheck};
use stackwfa::tasks::{build_task_grammar, Task};
use stackwfa::training::train_cfl;

use crate::commands::{require_nonempty, Ctx};
use crate::config::{Mode, TaskSection, TrainingSection};
use crate::manifest::{with_suffix, write_file, RunManifest};

/// Tolerance on log-space α and reading errors.
pub const LOG_TOLERANCE: f64 = 1e-9;
/// Tolerance on gradient-posterior differences.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Sequence length of each random instance
    #[arg(long, default_value_t = 6)]
    max_n: usize,
    /// Random weight draws per signature
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Gradient-posterior instances (length at most 5)
    #[arg(long, default_value_t = 50)]
    gradient_trials: usize,
}

pub fn oracle_check(ctx: &Ctx, args: OracleArgs) -> Result<()> {
    let opts = OracleCheck {
        max_n: args.max_n,
        trials: args.trials,
        gradient_trials: args.gradient_trials,
        seed: ctx.seed,
    };
    let mut m = RunManifest::new("oracle-check");
    m.config(&json!({ "max_n": opts.max_n, "trials": opts.trials, "gradient_trials": opts.gradient_trials }));
    m.seed("draws", ctx.seed);
    let r = m.time("check", || run_oracle(&opts))?;
    println!("instances: {}", r.instances);
    println!("max log-space error: {:.3e}", r.max_log_error());
    println!("gradient instances: {}", r.gradient_instances);
    println!("max gradient-posterior error: {:.3e}", r.max_gradient_error);
    ctx.finish(&m, ctx.root.join("oracle-check.manifest.json"))?;
    if r.max_log_error() > LOG_TOLERANCE {
        return Err(Error::numerical(format!(
            "DP differs from enumeration by {:.3e} > {LOG_TOLERANCE:e}",
            r.max_log_error()
        )));
    }
    if r.max_gradient_error > GRADIENT_TOLERANCE {
        return Err(Error::numerical(format!(
            "gradients differ from posteriors by {:.3e} > {GRADIENT_TOLERANCE:e}",
            r.max_gradient_error
        )));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    task: TaskSection,
    #[command(flatten)]
    training: TrainingSection,
    /// Comma-separated families [default: all]
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    /// Timed epochs per family
    #[arg(long, default_value_t = 1)]
    bench_epochs: usize,
    /// Also write the table here
    #[arg(long, short)]
    out: Option<PathBuf>,
}

pub fn bench(ctx: &Ctx, args: BenchArgs) -> Result<()> {
    let tsec = args.task.merge(ctx.file.task.clone());
    let sec = args.training.merge(ctx.file.training.clone());
    if sec.mode() != Mode::Cfl {
        return Err(Error::usage("bench times formal-language training only"));
    }
    if args.bench_epochs == 0 {
        return Err(Error::usage("--bench-epochs must be positive"));
    }
    let task = match tsec.task {
        Some(_) => tsec.task()?,
        None => Task::MarkedReversal,
    };
    let families: Vec<ModelFamily> = match &args.families {
        Some(list) => list.iter().map(|f| f.parse()).collect::<Result<_>>()?,
        None => ModelFamily::ALL.to_vec(),
    };
    require_nonempty(&families, "family")?;
    let count = tsec.count.unwrap_or(100);
    let params = tsec.params();
    let mut m = RunManifest::new("bench");
    m.config(&json!({
        "task": task.name(),
        "params": params,
        "count": count,
        "families": families.iter().map(|f| f.name()).collect::<Vec<_>>(),
        "epochs": args.bench_epochs,
    }));
    m.seed("data", ctx.seed);
    let g = build_task_grammar(task, params)?;
    let train = g.sample(count, ctx.seed)?;
    let valid = g.sample((count / 10).max(1), ctx.seed.wrapping_add(1))?;
    let mut table = String::from("model seconds_per_epoch\n");
    print!("{table}");
    for f in families {
        let mut cfg = sec.resolve_family(f, ctx.seed)?;
        cfg.stop_below_gap = None;
        cfg.max_epochs = 0;
        let s = Instant::now();
        train_cfl(&cfg, &train, &valid)?;
        let overhead = s.elapsed().as_secs_f64();
        cfg.max_epochs = args.bench_epochs;
        let s = Instant::now();
        train_cfl(&cfg, &train, &valid)?;
        let total = s.elapsed().as_secs_f64();
        let per_epoch = ((total - overhead) / args.bench_epochs as f64).max(0.0);
        m.timings.insert(f.name().to_string(), total + overhead);
        let line = format!("{} {per_epoch:.4}\n", f.name());
        print!("{line}");
        table.push_str(&line);
    }
    let default_manifest = match &args.out {
        Some(out) => {
            write_file(out, table.as_bytes())?;
            m.artifact(out);
            with_suffix(out, ".manifest.json")
        }
        None => ctx.root.join("bench.manifest.json"),
    };
    ctx.finish(&m, default_manifest)
}
