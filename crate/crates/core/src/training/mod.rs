//! Training loops, evaluation, hyperparameter search and checkpoints.
//!
//! Two regimes are supported. CFL training backpropagates through whole
//! strings grouped into equal-length batches and selects parameters by the
//! validation gap between model and true cross-entropy. Corpus training runs
//! a long token stream in fixed-length chunks, carrying detached recurrent and
//! stack state across chunk boundaries.

mod cfl;
mod checkpoint;
mod corpus;
mod heatmap;
mod metrics;
mod optim;
mod search;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cfl::{evaluate, train_cfl, Bin, EvalReport, SequenceModel, TrainOutcome, UniformModel};
pub use checkpoint::{Checkpoint, CorpusProgress, CHECKPOINT_VERSION};
pub use corpus::{corpus_perplexity, train_corpus, CorpusData, CorpusOutcome, CorpusRun};
pub use heatmap::{action_heatmap, action_type_weights, marked_reversal_labels, ActionType};
pub use metrics::{MetricRecord, MetricsLog};
pub use optim::{clip_grad_norm, Adam, Optimizer, OptimizerKind};
pub use search::{search, SearchOptions, SearchOutcome, Strategy, Trial};

use crate::autodiff::ParamStore;
use crate::controller::{Controller, ControllerConfig, ModelFamily, StackOptions};
use crate::error::{Error, Result};

/// Default learning-rate grid for CFL searches.
pub const CFL_LEARNING_RATES: [f64; 4] = [0.01, 0.005, 0.001, 0.0005];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: ModelFamily,
    pub stack: StackOptions,
    pub hidden: usize,
    pub learning_rate: f64,
    /// Gradient-norm clipping threshold (on the mean loss for CFL runs; on
    /// the chunk-summed loss after scaling by batch×chunk for corpus runs).
    pub clip: Option<f64>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub chunk_len: usize,
    pub init_scale: f64,
    /// Corpus runs divide the learning rate by this after a stagnant epoch.
    pub lr_decay: f64,
    /// Corpus runs stop after this many consecutive stagnant epochs.
    pub patience: usize,
    /// CFL runs stop early once the validation gap falls below this.
    pub stop_below_gap: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for formal-language runs.
    pub fn cfl(family: ModelFamily) -> Self {
        TrainConfig {
            family,
            stack: StackOptions {
                states: 2,
                symbols: 3,
                m: 20,
                band: None,
                push_hidden: false,
                max_depth: None,
            },
            hidden: 20,
            learning_rate: 0.005,
            clip: Some(5.0),
            max_epochs: 200,
            batch_size: 10,
            chunk_len: 0,
            init_scale: 0.1,
            lr_decay: 1.0,
            patience: 0,
            stop_below_gap: None,
            seed: 0,
        }
    }

    /// Defaults for incremental corpus runs.
    pub fn corpus(family: ModelFamily) -> Self {
        TrainConfig {
            family,
            stack: StackOptions {
                states: 1,
                symbols: 2,
                m: 10,
                band: Some(35),
                push_hidden: false,
                max_depth: Some(10),
            },
            hidden: 256,
            learning_rate: 10.0,
            clip: Some(1e-4),
            max_epochs: 100,
            batch_size: 32,
            chunk_len: 35,
            init_scale: 0.05,
            lr_decay: 1.5,
            patience: 2,
            stop_below_gap: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::usage(m.to_string()));
        if self.hidden == 0 || self.batch_size == 0 {
            return bad("hidden size and batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return bad("clip threshold must be positive");
            }
        }
        if !(self.init_scale >= 0.0) {
            return bad("init scale must be non-negative");
        }
        Ok(())
    }
}

/// A controller, its parameters and the token table it reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub family: ModelFamily,
    pub controller: Controller,
    pub params: ParamStore<f64>,
    /// Output vocabulary; the end-of-sequence symbol is `vocab[eos]`.
    pub vocab: Vec<String>,
    pub eos: usize,
}

pub const EOS_TOKEN: &str = "<eos>";

impl Model {
    /// A model over `terminals` with an extra output for end of sequence.
    pub fn for_task(cfg: &TrainConfig, terminals: &[String]) -> Result<Model> {
        let mut vocab = terminals.to_vec();
        vocab.push(EOS_TOKEN.to_string());
        Self::build(cfg, terminals.len(), vocab, terminals.len())
    }

    /// A model whose inputs and outputs are the whole corpus vocabulary.
    pub fn for_corpus(cfg: &TrainConfig, vocab: &crate::tasks::corpus::Vocabulary) -> Result<Model> {
        Self::build(cfg, vocab.len(), vocab.tokens().to_vec(), vocab.eos())
    }

    fn build(cfg: &TrainConfig, input_size: usize, vocab: Vec<String>, eos: usize) -> Result<Model> {
        cfg.validate()?;
        let controller = Controller::new(ControllerConfig {
            input_size,
            output_size: vocab.len(),
            hidden: cfg.hidden,
            stack: cfg.family.stack(&cfg.stack)?,
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = controller.init_params(cfg.init_scale, &mut rng);
        Ok(Model {
            family: cfg.family,
            controller,
            params,
            vocab,
            eos,
        })
    }

    pub fn input_size(&self) -> usize {
        self.controller.config().input_size
    }

    /// `log p(w · EOS)`.
    pub fn log_prob(&self, w: &[usize]) -> Result<f64> {
        self.controller.log_likelihood(&self.params, w, self.eos)
    }
}

#[cfg(test)]
mod tests;
