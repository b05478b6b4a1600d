use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Every learning rate of the grid, `restarts` times each.
    Grid,
    /// Log-uniform draws of learning rate and clip threshold.
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Grid => "grid",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Strategy::Grid),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::usage(format!(
                "unknown search strategy `{s}` (expected grid or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub strategy: Strategy,
    pub learning_rates: Vec<f64>,
    pub restarts: usize,
    pub draws: usize,
    pub lr_range: (f64, f64),
    pub clip_range: (f64, f64),
    pub seed: u64,
    /// Run trials in order and stop as soon as one scores below this.
    pub stop_below: Option<f64>,
    /// Run trials on the rayon pool (ignored when `stop_below` is set).
    pub parallel: bool,
}

impl SearchOptions {
    pub fn grid(learning_rates: &[f64], restarts: usize, seed: u64) -> Self {
        SearchOptions {
            strategy: Strategy::Grid,
            learning_rates: learning_rates.to_vec(),
            restarts,
            draws: 0,
            lr_range: (1.0, 100.0),
            clip_range: (1e-5, 1e-3),
            seed,
            stop_below: None,
            parallel: true,
        }
    }

    pub fn random(draws: usize, seed: u64) -> Self {
        SearchOptions {
            strategy: Strategy::Random,
            learning_rates: Vec::new(),
            restarts: 1,
            draws,
            lr_range: (1.0, 100.0),
            clip_range: (1e-5, 1e-3),
            seed,
            stop_below: None,
            parallel: true,
        }
    }

    /// The trial configurations, in execution order.
    pub fn plan(&self, base: &TrainConfig) -> Result<Vec<(Trial, TrainConfig)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        let mut push = |lr: f64, clip: Option<f64>, restart: usize, rng: &mut ChaCha8Rng| {
            let seed = rng.gen::<u64>();
            let mut cfg = base.clone();
            cfg.learning_rate = lr;
            cfg.clip = clip;
            cfg.seed = seed;
            let trial = Trial {
                index: out.len(),
                learning_rate: lr,
                clip,
                restart,
                seed,
                metric: None,
                error: None,
            };
            out.push((trial, cfg));
        };
        match self.strategy {
            Strategy::Grid => {
                for &lr in &self.learning_rates {
                    for r in 0..self.restarts {
                        push(lr, base.clip, r, &mut rng);
                    }
                }
            }
            Strategy::Random => {
                let log_uniform = |(a, b): (f64, f64), rng: &mut ChaCha8Rng| (rng.gen_range(a.ln()..=b.ln())).exp();
                for _ in 0..self.draws {
                    let lr = log_uniform(self.lr_range, &mut rng);
                    let clip = log_uniform(self.clip_range, &mut rng);
                    push(lr, Some(clip), 0, &mut rng);
                }
            }
        }
        if out.is_empty() {
            return Err(Error::usage("search space is empty"));
        }
        Ok(out)
    }
}

/// One row of the trial table. `metric` is `None` for a diverged trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub learning_rate: f64,
    pub clip: Option<f64>,
    pub restart: usize,
    pub seed: u64,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<O> {
    pub best_index: usize,
    pub best: O,
    /// Every trial that ran, in plan order.
    pub trials: Vec<Trial>,
}

/// Runs `train` for each planned configuration and keeps the one with the
/// lowest validation metric. Numerical failures mark a trial as diverged;
/// any other error aborts the search.
pub fn search<O, F>(base: &TrainConfig, opts: &SearchOptions, train: F) -> Result<SearchOutcome<O>>
where
    O: Send,
    F: Fn(&TrainConfig) -> Result<(O, f64)> + Sync,
{
    let plan = opts.plan(base)?;
    let run = |(mut trial, cfg): (Trial, TrainConfig)| -> Result<(Trial, Option<O>)> {
        match train(&cfg) {
            Ok((o, m)) if m.is_finite() => {
                trial.metric = Some(m);
                Ok((trial, Some(o)))
            }
            Ok(_) => {
                trial.error = Some("non-finite validation metric".into());
                Ok((trial, None))
            }
            Err(Error::Numerical(msg)) => {
                trial.error = Some(msg);
                Ok((trial, None))
            }
            Err(e) => Err(e),
        }
    };
    let mut trials = Vec::new();
    let mut best: Option<(usize, f64, O)> = None;
    let mut consider = |trial: Trial, o: Option<O>, best: &mut Option<(usize, f64, O)>| {
        if let (Some(m), Some(o)) = (trial.metric, o) {
            if best.as_ref().is_none_or(|b| m < b.1) {
                *best = Some((trial.index, m, o));
            }
        }
        trials.push(trial);
    };
    if opts.parallel && opts.stop_below.is_none() {
        let results: Vec<Result<(Trial, Option<O>)>> = plan.into_par_iter().map(run).collect();
        for r in results {
            let (t, o) = r?;
            consider(t, o, &mut best);
        }
    } else {
        for item in plan {
            let (t, o) = run(item)?;
            let hit = matches!((t.metric, opts.stop_below), (Some(m), Some(th)) if m < th);
            consider(t, o, &mut best);
            if hit {
                break;
            }
        }
    }
    match best {
        Some((best_index, _, best)) => Ok(SearchOutcome {
            best_index,
            best,
            trials,
        }),
        None => {
            let list: Vec<String> = trials
                .iter()
                .map(|t| {
                    format!(
                        "#{} (lr {}): {}",
                        t.index,
                        t.learning_rate,
                        t.error.as_deref().unwrap_or("no metric")
                    )
                })
                .collect();
            Err(Error::numerical(format!("all trials diverged: {}", list.join("; "))))
        }
    }
}
