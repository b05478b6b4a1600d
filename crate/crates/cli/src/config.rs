//! Settings shared by flags and the TOML config file. Every field is optional
//! so that flags, file and built-in defaults can be layered.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use stackwfa::controller::ModelFamily;
use stackwfa::error::{Error, Result};
use stackwfa::tasks::{Task, TaskParams};
use stackwfa::training::{SearchOptions, Strategy, TrainConfig, CFL_LEARNING_RATES};

pub const DATA_DIR_ENV: &str = "STACKWFA_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "stackwfa-data";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Whole-string training on a formal-language task.
    Cfl,
    /// Truncated BPTT over a text corpus.
    Corpus,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunSection {
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TaskSection {
    /// marked-reversal, unmarked-reversal, padded-reversal, dyck2 or hardest-cfl
    #[arg(long)]
    pub task: Option<String>,
    /// Number of strings to sample
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Probability mass of the recursive rules
    #[arg(long)]
    pub continuation: Option<f64>,
    /// Padding continuation (padded-reversal) or decoy continuation (hardest-cfl)
    #[arg(long)]
    pub padding: Option<f64>,
    /// Branching probability (hardest-cfl)
    #[arg(long)]
    pub branch: Option<f64>,
}

impl TaskSection {
    pub fn merge(self, lower: TaskSection) -> TaskSection {
        TaskSection {
            task: self.task.or(lower.task),
            count: self.count.or(lower.count),
            min_len: self.min_len.or(lower.min_len),
            max_len: self.max_len.or(lower.max_len),
            continuation: self.continuation.or(lower.continuation),
            padding: self.padding.or(lower.padding),
            branch: self.branch.or(lower.branch),
        }
    }

    pub fn task(&self) -> Result<Task> {
        self.task
            .as_deref()
            .ok_or_else(|| Error::usage("no task given (use --task or [task] task = ...)"))?
            .parse()
    }

    pub fn params(&self) -> TaskParams {
        let d = TaskParams::default();
        TaskParams {
            min_len: self.min_len.unwrap_or(d.min_len),
            max_len: self.max_len.unwrap_or(d.max_len),
            continuation: self.continuation,
            padding: self.padding,
            branch: self.branch,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainingSection {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// lstm, gref, jm, ns, ns+s, ns+u, ns+s+u (alias rns)
    #[arg(long)]
    pub family: Option<String>,
    /// PDA states |Q|
    #[arg(long)]
    pub states: Option<usize>,
    /// Stack alphabet size |Γ|
    #[arg(long)]
    pub symbols: Option<usize>,
    /// Stack vector size for gref and jm
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, visible_alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, visible_alias = "epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub chunk_len: Option<usize>,
    /// Band D for incremental nondeterministic stacks
    #[arg(long)]
    pub band: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub push_hidden: Option<bool>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub stop_below_gap: Option<f64>,
}

impl TrainingSection {
    pub fn merge(self, lower: TrainingSection) -> TrainingSection {
        TrainingSection {
            mode: self.mode.or(lower.mode),
            family: self.family.or(lower.family),
            states: self.states.or(lower.states),
            symbols: self.symbols.or(lower.symbols),
            m: self.m.or(lower.m),
            hidden: self.hidden.or(lower.hidden),
            learning_rate: self.learning_rate.or(lower.learning_rate),
            clip: self.clip.or(lower.clip),
            max_epochs: self.max_epochs.or(lower.max_epochs),
            batch_size: self.batch_size.or(lower.batch_size),
            chunk_len: self.chunk_len.or(lower.chunk_len),
            band: self.band.or(lower.band),
            max_depth: self.max_depth.or(lower.max_depth),
            push_hidden: self.push_hidden.or(lower.push_hidden),
            init_scale: self.init_scale.or(lower.init_scale),
            lr_decay: self.lr_decay.or(lower.lr_decay),
            patience: self.patience.or(lower.patience),
            stop_below_gap: self.stop_below_gap.or(lower.stop_below_gap),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::Cfl)
    }

    pub fn family(&self) -> Result<ModelFamily> {
        match &self.family {
            Some(f) => f.parse(),
            None => Ok(ModelFamily::NsSU),
        }
    }

    /// Mode defaults overridden by whatever is set here.
    pub fn resolve(&self, seed: u64) -> Result<TrainConfig> {
        self.resolve_family(self.family()?, seed)
    }

    pub fn resolve_family(&self, family: ModelFamily, seed: u64) -> Result<TrainConfig> {
        let mut c = match self.mode() {
            Mode::Cfl => TrainConfig::cfl(family),
            Mode::Corpus => TrainConfig::corpus(family),
        };
        let s = &mut c.stack;
        s.states = self.states.unwrap_or(s.states);
        s.symbols = self.symbols.unwrap_or(s.symbols);
        s.m = self.m.unwrap_or(s.m);
        s.band = self.band.or(s.band);
        s.max_depth = self.max_depth.or(s.max_depth);
        s.push_hidden = self.push_hidden.unwrap_or(s.push_hidden);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.learning_rate = self.learning_rate.unwrap_or(c.learning_rate);
        c.clip = self.clip.or(c.clip);
        c.max_epochs = self.max_epochs.unwrap_or(c.max_epochs);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.chunk_len = self.chunk_len.unwrap_or(c.chunk_len);
        c.init_scale = self.init_scale.unwrap_or(c.init_scale);
        c.lr_decay = self.lr_decay.unwrap_or(c.lr_decay);
        c.patience = self.patience.unwrap_or(c.patience);
        c.stop_below_gap = self.stop_below_gap.or(c.stop_below_gap);
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SearchSection {
    /// grid or random
    #[arg(long)]
    pub strategy: Option<String>,
    /// Comma-separated learning-rate grid
    #[arg(long, value_delimiter = ',')]
    pub learning_rates: Option<Vec<f64>>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Number of random-search draws
    #[arg(long)]
    pub draws: Option<usize>,
    /// Stop at the first trial whose metric falls below this
    #[arg(long)]
    pub stop_below: Option<f64>,
    /// Run trials one at a time
    #[arg(long)]
    pub sequential: Option<bool>,
}

impl SearchSection {
    pub fn merge(self, lower: SearchSection) -> SearchSection {
        SearchSection {
            strategy: self.strategy.or(lower.strategy),
            learning_rates: self.learning_rates.or(lower.learning_rates),
            restarts: self.restarts.or(lower.restarts),
            draws: self.draws.or(lower.draws),
            stop_below: self.stop_below.or(lower.stop_below),
            sequential: self.sequential.or(lower.sequential),
        }
    }

    pub fn resolve(&self, seed: u64) -> Result<SearchOptions> {
        let strategy: Strategy = match &self.strategy {
            Some(s) => s.parse()?,
            None => Strategy::Grid,
        };
        let mut o = match strategy {
            Strategy::Grid => SearchOptions::grid(
                self.learning_rates.as_deref().unwrap_or(&CFL_LEARNING_RATES),
                self.restarts.unwrap_or(5),
                seed,
            ),
            Strategy::Random => SearchOptions::random(self.draws.unwrap_or(10), seed),
        };
        o.stop_below = self.stop_below;
        o.parallel = !self.sequential.unwrap_or(false);
        Ok(o)
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub search: SearchSection,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::usage(format!("config {}: {e}", path.display())))
    }
}

/// Default artifact root: flag, then config file, then the environment.
pub fn data_dir(flag: &RunSection, file: &RunSection) -> PathBuf {
    flag.data_dir
        .clone()
        .or_else(|| file.data_dir.clone())
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}
