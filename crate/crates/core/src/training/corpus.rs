use super::checkpoint::{Checkpoint, CorpusProgress};
use super::metrics::MetricsLog;
use super::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use super::{Model, TrainConfig};
use crate::autodiff::Tape;
use crate::controller::{Carry, ModelFamily};
use crate::error::{Error, Result};
use crate::tasks::corpus::{batchify, Vocabulary};

/// Encoded splits of a text corpus.
#[derive(Debug, Clone)]
pub struct CorpusData {
    pub vocab: Vocabulary,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Option<Vec<usize>>,
}

/// How much of a corpus run to execute in this call.
#[derive(Debug, Clone, Default)]
pub struct CorpusRun {
    /// Continue from a checkpoint written by an interrupted run.
    pub resume: Option<Checkpoint>,
    /// Stop after this many training chunks and return a resumable checkpoint.
    pub halt_after_chunks: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CorpusOutcome {
    /// Best-by-validation model (the live parameters if the run was halted).
    pub model: Model,
    /// Resumable state when halted; otherwise the finished run.
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
    pub best_valid_ppl: f64,
    pub best_epoch: usize,
    pub test_ppl: Option<f64>,
    pub finished: bool,
}

/// Perplexity of `stream` read as `batch` parallel rows in chunks of `chunk`
/// steps, carrying state across chunks.
pub fn corpus_perplexity(model: &Model, stream: &[usize], batch: usize, chunk: usize) -> Result<f64> {
    let batch = batch.min(stream.len()).max(1);
    let chunks = batchify(stream, model.eos, batch, chunk)?;
    let mut carry: Option<Carry<f64>> = None;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for c in &chunks {
        let mut tape = Tape::new();
        let mut state = match &carry {
            None => model.controller.start(&mut tape, batch)?,
            Some(k) => model.controller.resume(&mut tape, k)?,
        };
        let v =
            model
                .controller
                .score_chunk(&mut tape, &model.params, &mut state, &c.inputs, &c.targets, &c.weights)?;
        nll += tape.value(v).item();
        tokens += c.tokens();
        carry = Some(state.carry(&tape)?);
    }
    let ppl = (nll / tokens as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::numerical("non-finite perplexity"));
    }
    Ok(ppl)
}

/// Truncated-BPTT training with plain SGD, learning-rate decay on stagnant
/// validation perplexity, and early stopping.
pub fn train_corpus(cfg: &TrainConfig, data: &CorpusData, run: CorpusRun) -> Result<CorpusOutcome> {
    cfg.validate()?;
    if cfg.family == ModelFamily::Gref {
        return Err(Error::usage(
            "gref cannot be trained incrementally: its stack cannot be carried across chunks",
        ));
    }
    if cfg.chunk_len == 0 {
        return Err(Error::usage("chunk length must be positive"));
    }
    let (mut model, mut optimizer, mut carry, mut p) = match run.resume {
        Some(ck) => {
            let p = ck
                .progress
                .clone()
                .ok_or_else(|| Error::data("checkpoint has no corpus progress to resume"))?;
            if ck.vocab != data.vocab.tokens() {
                return Err(Error::usage("checkpoint vocabulary does not match the corpus"));
            }
            let model = ck.model()?;
            let opt = ck.optimizer.clone().unwrap_or(Optimizer::Sgd);
            (model, opt, ck.carry.clone(), p)
        }
        None => {
            let model = Model::for_corpus(cfg, &data.vocab)?;
            let opt = Optimizer::new(OptimizerKind::Sgd, &model.params);
            let mut log = MetricsLog::default();
            let ppl = corpus_perplexity(&model, &data.valid, cfg.batch_size, cfg.chunk_len)?;
            log.push(0, "valid", "perplexity", ppl);
            let p = CorpusProgress {
                epoch: 1,
                next_chunk: 0,
                learning_rate: cfg.learning_rate,
                best_valid_ppl: ppl,
                best_epoch: 0,
                stagnant: 0,
                epoch_nll: 0.0,
                epoch_tokens: 0,
                best_params: model.params.clone(),
                log,
            };
            (model, opt, None, p)
        }
    };
    let batch = cfg.batch_size;
    let chunks = batchify(&data.train, model.eos, batch, cfg.chunk_len)?;
    let mut budget = run.halt_after_chunks;
    while p.epoch <= cfg.max_epochs && p.stagnant < cfg.patience.max(1) {
        while p.next_chunk < chunks.len() {
            if budget == Some(0) {
                let mut ck = Checkpoint::from_model(&model, cfg, Some(&optimizer));
                ck.carry = carry;
                ck.progress = Some(p.clone());
                return Ok(CorpusOutcome {
                    model,
                    checkpoint: ck,
                    log: p.log.clone(),
                    best_valid_ppl: p.best_valid_ppl,
                    best_epoch: p.best_epoch,
                    test_ppl: None,
                    finished: false,
                });
            }
            let k = p.next_chunk;
            let c = &chunks[k];
            let context = |e: Error| match e {
                Error::Numerical(m) => Error::numerical(format!("epoch {}, chunk {k}: {m}", p.epoch)),
                other => other,
            };
            let mut tape = Tape::new();
            let mut state = match &carry {
                None => model.controller.start(&mut tape, batch)?,
                Some(s) => model.controller.resume(&mut tape, s)?,
            };
            let nll = model
                .controller
                .score_chunk(&mut tape, &model.params, &mut state, &c.inputs, &c.targets, &c.weights)
                .map_err(context)?;
            let value = tape.value(nll).item();
            if !value.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite training loss at epoch {}, chunk {k}",
                    p.epoch
                )));
            }
            let scale = (batch * c.len()) as f64;
            let mut grads = tape.backward(nll, &model.params).map_err(context)?;
            if let Some(clip) = cfg.clip {
                clip_grad_norm(&mut grads, clip * scale);
            }
            optimizer
                .update(&mut model.params, &grads, p.learning_rate / scale)
                .map_err(context)?;
            carry = Some(state.carry(&tape)?);
            p.epoch_nll += value;
            p.epoch_tokens += c.tokens();
            p.next_chunk += 1;
            if let Some(b) = budget.as_mut() {
                *b -= 1;
            }
        }
        let epoch = p.epoch;
        p.log.push(
            epoch,
            "train",
            "perplexity",
            (p.epoch_nll / p.epoch_tokens as f64).exp(),
        );
        let ppl = corpus_perplexity(&model, &data.valid, batch, cfg.chunk_len)?;
        p.log.push(epoch, "valid", "perplexity", ppl);
        p.log.push(epoch, "train", "learning_rate", p.learning_rate);
        if ppl < p.best_valid_ppl {
            p.best_valid_ppl = ppl;
            p.best_epoch = epoch;
            p.best_params = model.params.clone();
            p.stagnant = 0;
        } else {
            p.stagnant += 1;
            p.learning_rate /= cfg.lr_decay;
        }
        p.epoch += 1;
        p.next_chunk = 0;
        p.epoch_nll = 0.0;
        p.epoch_tokens = 0;
        carry = None;
    }
    let live = model.params.clone();
    model.params = p.best_params.clone();
    let test_ppl = match &data.test {
        Some(t) => {
            let ppl = corpus_perplexity(&model, t, batch, cfg.chunk_len)?;
            p.log.push(p.best_epoch, "test", "perplexity", ppl);
            Some(ppl)
        }
        None => None,
    };
    let mut ck = Checkpoint::from_model(&model, cfg, Some(&optimizer));
    let mut progress = p.clone();
    progress.best_params = model.params.clone();
    ck.params = live;
    ck.progress = Some(progress);
    Ok(CorpusOutcome {
        model,
        checkpoint: ck,
        log: p.log.clone(),
        best_valid_ppl: p.best_valid_ppl,
        best_epoch: p.best_epoch,
        test_ppl,
        finished: true,
    })
}
