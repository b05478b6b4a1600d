use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::MetricsLog;
use super::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use super::{Model, TrainConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::scalar::logsumexp_slice;
use crate::tasks::{grammar_for_dataset, Dataset, TaskGrammar};

/// Anything that assigns `log p(w · EOS)` to strings over a terminal vocabulary.
pub trait SequenceModel {
    fn log_probs(&self, strings: &[Vec<usize>]) -> Result<Vec<f64>>;

    /// Whether the model reads and writes exactly these terminals.
    fn accepts_vocab(&self, terminals: &[String]) -> bool;
}

const EVAL_GROUP: usize = 50;

impl SequenceModel for Model {
    fn log_probs(&self, strings: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; strings.len()];
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, w) in strings.iter().enumerate() {
            by_len.entry(w.len()).or_default().push(i);
        }
        for (&len, idx) in &by_len {
            for group in idx.chunks(EVAL_GROUP) {
                let batch: Vec<&[usize]> = group.iter().map(|&i| strings[i].as_slice()).collect();
                let mut tape = Tape::new();
                let run = self.controller.score_batch(&mut tape, &self.params, &batch, self.eos)?;
                for (k, step) in run.steps.iter().enumerate() {
                    let logits = tape.value(step.logits);
                    let v = logits.last_dim();
                    for (row, &i) in group.iter().enumerate() {
                        let l = &logits.data()[row * v..(row + 1) * v];
                        let target = if k < len { strings[i][k] } else { self.eos };
                        out[i] += l[target] - logsumexp_slice(l);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accepts_vocab(&self, terminals: &[String]) -> bool {
        self.eos == terminals.len() && self.input_size() == terminals.len() && self.vocab[..self.eos] == *terminals
    }
}

impl SequenceModel for TaskGrammar {
    fn log_probs(&self, strings: &[Vec<usize>]) -> Result<Vec<f64>> {
        Ok(strings.iter().map(|w| self.log_prob_with_eos(w)).collect())
    }

    fn accepts_vocab(&self, terminals: &[String]) -> bool {
        self.vocab() == terminals
    }
}

/// Uniform distribution over `terminals + 1` outputs at every step.
#[derive(Debug, Clone)]
pub struct UniformModel {
    pub terminals: Vec<String>,
}

impl SequenceModel for UniformModel {
    fn log_probs(&self, strings: &[Vec<usize>]) -> Result<Vec<f64>> {
        let lp = -((self.terminals.len() + 1) as f64).ln();
        Ok(strings.iter().map(|w| lp * (w.len() + 1) as f64).collect())
    }

    fn accepts_vocab(&self, terminals: &[String]) -> bool {
        self.terminals == terminals
    }
}

/// Cross-entropies for one string length.
#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub len: usize,
    pub strings: usize,
    pub cross_entropy: f64,
    pub true_cross_entropy: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub strings: usize,
    pub symbols: usize,
    /// Model per-symbol cross-entropy in nats.
    pub cross_entropy: f64,
    pub true_cross_entropy: Option<f64>,
    pub gap: Option<f64>,
    /// One entry per string length when binning was requested.
    pub bins: Vec<Bin>,
}

/// Per-symbol cross-entropy of `model` on `dataset`, and its gap to the true
/// distribution when `grammar` is given.
pub fn evaluate(
    model: &dyn SequenceModel,
    dataset: &Dataset,
    grammar: Option<&TaskGrammar>,
    by_length: bool,
) -> Result<EvalReport> {
    if !model.accepts_vocab(&dataset.vocab) {
        return Err(Error::usage("model vocabulary does not match the dataset"));
    }
    if dataset.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let lp_model = model.log_probs(&dataset.strings)?;
    let lp_true = match grammar {
        Some(g) => {
            if g.vocab() != dataset.vocab.as_slice() {
                return Err(Error::usage("grammar vocabulary does not match the dataset"));
            }
            Some(true_log_probs(g, dataset)?)
        }
        None => None,
    };
    let all: Vec<usize> = (0..dataset.len()).collect();
    let summarize = |idx: &[usize]| -> (usize, f64, Option<f64>) {
        let symbols: usize = idx.iter().map(|&i| dataset.strings[i].len() + 1).sum();
        let ce = -idx.iter().map(|&i| lp_model[i]).sum::<f64>() / symbols as f64;
        let tce = lp_true
            .as_ref()
            .map(|t| -idx.iter().map(|&i| t[i]).sum::<f64>() / symbols as f64);
        (symbols, ce, tce)
    };
    let (symbols, ce, tce) = summarize(&all);
    let mut bins = Vec::new();
    if by_length {
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, w) in dataset.strings.iter().enumerate() {
            by_len.entry(w.len()).or_default().push(i);
        }
        for (len, idx) in by_len {
            let (_, c, t) = summarize(&idx);
            bins.push(Bin {
                len,
                strings: idx.len(),
                cross_entropy: c,
                true_cross_entropy: t,
                gap: t.map(|t| c - t),
            });
        }
    }
    Ok(EvalReport {
        strings: dataset.len(),
        symbols,
        cross_entropy: ce,
        true_cross_entropy: tce,
        gap: tce.map(|t| ce - t),
        bins,
    })
}

fn true_log_probs(g: &TaskGrammar, ds: &Dataset) -> Result<Vec<f64>> {
    ds.strings
        .iter()
        .map(|w| {
            let lp = g.log_prob_with_eos(w);
            if lp.is_finite() {
                Ok(lp)
            } else {
                Err(Error::data(format!(
                    "`{}` is not in the support of {}",
                    ds.render(w),
                    g.task()
                )))
            }
        })
        .collect()
}

/// Result of a CFL run: the best-by-validation model and the full history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    pub log: MetricsLog,
    pub best_epoch: usize,
    pub best_gap: f64,
    pub epochs_run: usize,
}

/// Full-sequence training on strings from one task grammar, keeping the
/// parameters with the lowest validation gap.
pub fn train_cfl(cfg: &TrainConfig, train: &Dataset, valid: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.vocab != valid.vocab {
        return Err(Error::usage("training and validation vocabularies differ"));
    }
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let grammar = grammar_for_dataset(valid)?;
    let mut model = Model::for_task(cfg, &train.vocab)?;
    for w in &train.strings {
        if let Some(&t) = w.iter().find(|&&t| t >= model.eos) {
            return Err(Error::data(format!("training token id {t} outside the vocabulary")));
        }
    }
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, &model.params);
    let mut log = MetricsLog::default();
    let validate = |m: &Model, log: &mut MetricsLog, epoch: usize| -> Result<f64> {
        let r = evaluate(m, valid, Some(&grammar), false)?;
        let gap = r.gap.expect("grammar given");
        log.push(epoch, "valid", "cross_entropy", r.cross_entropy);
        log.push(epoch, "valid", "gap", gap);
        Ok(gap)
    };
    let mut best_gap = validate(&model, &mut log, 0)?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in train.strings.iter().enumerate() {
        buckets.entry(w.len()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        if cfg.stop_below_gap.is_some_and(|th| best_gap < th) {
            break;
        }
        let mut batches = Vec::new();
        for idx in buckets.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks(cfg.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        let mut nll_sum = 0.0;
        let mut sym_sum = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let seqs: Vec<&[usize]> = batch.iter().map(|&i| train.strings[i].as_slice()).collect();
            let symbols = seqs.len() * (seqs[0].len() + 1);
            let context = |e: Error| match e {
                Error::Numerical(m) => Error::numerical(format!("epoch {epoch}, batch {bi}: {m}")),
                other => other,
            };
            let mut tape = Tape::new();
            let run = model
                .controller
                .score_batch(&mut tape, &model.params, &seqs, model.eos)
                .map_err(context)?;
            let nll = tape.value(run.nll).item();
            if !nll.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite training loss at epoch {epoch}, batch {bi}"
                )));
            }
            let loss = tape.scale(run.nll, 1.0 / symbols as f64);
            let mut grads = tape.backward(loss, &model.params).map_err(context)?;
            if let Some(c) = cfg.clip {
                clip_grad_norm(&mut grads, c);
            }
            optimizer
                .update(&mut model.params, &grads, cfg.learning_rate)
                .map_err(context)?;
            nll_sum += nll;
            sym_sum += symbols;
        }
        log.push(epoch, "train", "cross_entropy", nll_sum / sym_sum as f64);
        let gap = validate(&model, &mut log, epoch)?;
        if gap < best_gap {
            best_gap = gap;
            best_params = model.params.clone();
            best_epoch = epoch;
        }
        epochs_run = epoch;
    }
    model.params = best_params;
    Ok(TrainOutcome {
        model,
        config: cfg.clone(),
        optimizer,
        log,
        best_epoch,
        best_gap,
        epochs_run,
    })
}
