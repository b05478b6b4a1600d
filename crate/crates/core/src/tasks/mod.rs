//! The five context-free language modelling tasks, their exact probability
//! evaluators, dataset I/O and plain-text corpus ingestion.
//!
//! A [`TaskGrammar`] pairs a PCFG with a length window. Strings are drawn by
//! picking a length uniformly among the lengths the grammar can produce inside
//! the window and then sampling from the grammar conditioned on that length, so
//! the probability of any sampled string is computable exactly.

pub mod corpus;
mod dataset;
pub mod pcfg;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, Provenance};
pub use pcfg::{LengthTables, Pcfg, Rule, Sym};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    MarkedReversal,
    UnmarkedReversal,
    PaddedReversal,
    Dyck2,
    HardestCfl,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::MarkedReversal,
        Task::UnmarkedReversal,
        Task::PaddedReversal,
        Task::Dyck2,
        Task::HardestCfl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::MarkedReversal => "marked-reversal",
            Task::UnmarkedReversal => "unmarked-reversal",
            Task::PaddedReversal => "padded-reversal",
            Task::Dyck2 => "dyck2",
            Task::HardestCfl => "hardest-cfl",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let known: Vec<_> = Task::ALL.iter().map(|t| t.name()).collect();
            Error::usage(format!("unknown task `{s}` (expected one of {})", known.join(", ")))
        })
    }
}

/// Length window and grammar weights. `None` selects the task's default.
///
/// | task | `continuation` | `padding` | `branch` |
/// |---|---|---|---|
/// | marked-reversal | P(S→0S0)+P(S→1S1), default 59/61 | unused | unused |
/// | unmarked-reversal | same, default 30/31 | unused | unused |
/// | padded-reversal | same, default 20/21 | P(T→aT), default 19/20 | unused |
/// | dyck2 | P(D→(D)D)+P(D→\[D\]D), default 60/122 | unused | unused |
/// | hardest-cfl | P(D→(D)D)+P(D→\[D\]D), default 0.4375 | decoy continuation, default 0.5 | P(D→B D), default 0.1 |
///
/// Every default puts the mean unconditioned length at 60.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub min_len: usize,
    pub max_len: usize,
    pub continuation: Option<f64>,
    pub padding: Option<f64>,
    pub branch: Option<f64>,
}

impl TaskParams {
    pub fn new(min_len: usize, max_len: usize) -> Self {
        TaskParams {
            min_len,
            max_len,
            continuation: None,
            padding: None,
            branch: None,
        }
    }
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams::new(40, 80)
    }
}

/// Resolved grammar weights, after defaults are filled in.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Weights {
    continuation: f64,
    padding: Option<f64>,
    branch: Option<f64>,
}

fn open_unit(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(Error::usage(format!(
            "{name} must lie strictly between 0 and 1, got {v}"
        )))
    }
}

fn resolve(task: Task, p: &TaskParams) -> Result<Weights> {
    let c = p.continuation;
    let w = match task {
        Task::MarkedReversal => Weights {
            continuation: c.unwrap_or(59.0 / 61.0),
            padding: None,
            branch: None,
        },
        Task::UnmarkedReversal => Weights {
            continuation: c.unwrap_or(30.0 / 31.0),
            padding: None,
            branch: None,
        },
        Task::PaddedReversal => Weights {
            continuation: c.unwrap_or(20.0 / 21.0),
            padding: Some(open_unit("padding", p.padding.unwrap_or(19.0 / 20.0))?),
            branch: None,
        },
        Task::Dyck2 => Weights {
            continuation: c.unwrap_or(60.0 / 122.0),
            padding: None,
            branch: None,
        },
        Task::HardestCfl => Weights {
            continuation: c.unwrap_or(0.4375),
            padding: Some(open_unit("padding", p.padding.unwrap_or(0.5))?),
            branch: Some(open_unit("branch", p.branch.unwrap_or(0.1))?),
        },
    };
    open_unit("continuation", w.continuation)?;
    let subcritical = match task {
        Task::Dyck2 => w.continuation <= 0.5,
        Task::HardestCfl => 2.0 * w.continuation + w.branch.unwrap_or(0.0) < 1.0,
        _ => true,
    };
    if !subcritical {
        return Err(Error::usage(format!(
            "weights for {task} give an improper grammar (expected branching factor below 1)"
        )));
    }
    Ok(w)
}

struct Builder {
    nonterminals: Vec<String>,
    terminals: Vec<String>,
    rules: Vec<Rule>,
}

impl Builder {
    fn new(nonterminals: &[&str], terminals: &[&str]) -> Self {
        Builder {
            nonterminals: nonterminals.iter().map(|s| s.to_string()).collect(),
            terminals: terminals.iter().map(|s| s.to_string()).collect(),
            rules: Vec::new(),
        }
    }

    /// `rhs` is whitespace-separated; names of nonterminals win over terminals.
    fn rule(&mut self, lhs: &str, rhs: &str, prob: f64) -> &mut Self {
        let find = |names: &[String], s: &str| names.iter().position(|n| n == s);
        let lhs = find(&self.nonterminals, lhs).expect("known nonterminal");
        let rhs = rhs
            .split_whitespace()
            .map(|s| match find(&self.nonterminals, s) {
                Some(n) => Sym::N(n),
                None => Sym::T(find(&self.terminals, s).expect("known terminal")),
            })
            .collect();
        self.rules.push(Rule { lhs, rhs, prob });
        self
    }

    fn build(self) -> Result<Pcfg> {
        Pcfg::new(self.nonterminals, self.terminals, self.rules, 0)
    }
}

fn grammar_for(task: Task, w: &Weights) -> Result<Pcfg> {
    let c = w.continuation;
    match task {
        Task::MarkedReversal => {
            let mut b = Builder::new(&["S"], &["0", "1", "#"]);
            b.rule("S", "0 S 0", c / 2.0)
                .rule("S", "1 S 1", c / 2.0)
                .rule("S", "#", 1.0 - c);
            b.build()
        }
        Task::UnmarkedReversal => {
            let mut b = Builder::new(&["S"], &["0", "1"]);
            b.rule("S", "0 S 0", c / 2.0)
                .rule("S", "1 S 1", c / 2.0)
                .rule("S", "", 1.0 - c);
            b.build()
        }
        Task::PaddedReversal => {
            let d = w.padding.expect("resolved");
            let mut b = Builder::new(&["S", "P0", "P1"], &["0", "1"]);
            b.rule("S", "0 S 0", c / 2.0)
                .rule("S", "1 S 1", c / 2.0)
                .rule("S", "P0", (1.0 - c) / 2.0)
                .rule("S", "P1", (1.0 - c) / 2.0)
                .rule("P0", "0 P0", d)
                .rule("P0", "0", 1.0 - d)
                .rule("P1", "1 P1", d)
                .rule("P1", "1", 1.0 - d);
            b.build()
        }
        Task::Dyck2 => {
            let mut b = Builder::new(&["D"], &["(", ")", "[", "]"]);
            b.rule("D", "( D ) D", c / 2.0)
                .rule("D", "[ D ] D", c / 2.0)
                .rule("D", "", 1.0 - c);
            b.build()
        }
        Task::HardestCfl => {
            // Blocks end in `;`; each block is a `$`-separated list of
            // segments. A string is generated by writing a Dyck word, cutting
            // it into pieces, and hiding each piece among decoy segments.
            let x = w.padding.expect("resolved");
            let br = w.branch.expect("resolved");
            let mut b = Builder::new(&["S", "D", "B", "X"], &["(", ")", "[", "]", "$", ";"]);
            b.rule("S", "X $ D $ X ;", 1.0)
                .rule("D", "( D ) D", c / 2.0)
                .rule("D", "[ D ] D", c / 2.0)
                .rule("D", "B D", br)
                .rule("D", "", 1.0 - c - br)
                .rule("B", "$ X ; X $", 1.0);
            for a in ["(", ")", "[", "]", "$"] {
                b.rule("X", &format!("{a} X"), x / 5.0);
            }
            b.rule("X", "", 1.0 - x);
            b.build()
        }
    }
}

/// A task's PCFG together with the length window it is sampled in.
#[derive(Debug, Clone)]
pub struct TaskGrammar {
    task: Task,
    params: TaskParams,
    weights: Weights,
    pcfg: Pcfg,
    tables: LengthTables,
    achievable: Vec<usize>,
}

pub fn build_task_grammar(task: Task, params: TaskParams) -> Result<TaskGrammar> {
    if params.min_len > params.max_len {
        return Err(Error::usage(format!(
            "empty length range [{}, {}]",
            params.min_len, params.max_len
        )));
    }
    let weights = resolve(task, &params)?;
    let pcfg = grammar_for(task, &weights)?;
    let tables = pcfg.length_tables(params.max_len);
    let achievable = (params.min_len..=params.max_len)
        .filter(|&l| tables.mass(pcfg.start(), l) > 0.0)
        .collect();
    Ok(TaskGrammar {
        task,
        params,
        weights,
        pcfg,
        tables,
        achievable,
    })
}

impl TaskGrammar {
    pub fn task(&self) -> Task {
        self.task
    }

    pub fn params(&self) -> &TaskParams {
        &self.params
    }

    pub fn pcfg(&self) -> &Pcfg {
        &self.pcfg
    }

    pub fn vocab(&self) -> &[String] {
        self.pcfg.terminals()
    }

    /// Index of the end-of-sequence symbol in model outputs.
    pub fn eos(&self) -> usize {
        self.vocab().len()
    }

    pub fn achievable_lengths(&self) -> &[usize] {
        &self.achievable
    }

    /// Resolved grammar weights as key/value pairs, for provenance records.
    pub fn weight_record(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("continuation".into(), self.weights.continuation.to_string());
        if let Some(p) = self.weights.padding {
            m.insert("padding".into(), p.to_string());
        }
        if let Some(b) = self.weights.branch {
            m.insert("branch".into(), b.to_string());
        }
        m
    }

    pub fn inside_logprob(&self, w: &[usize]) -> f64 {
        self.pcfg.inside_logprob(w)
    }

    /// Log of the unconditioned PCFG mass on strings of length `len`.
    pub fn length_mass(&self, len: usize) -> f64 {
        if len <= self.tables.max_len() {
            self.tables.mass(self.pcfg.start(), len).ln()
        } else {
            self.pcfg.length_tables(len).mass(self.pcfg.start(), len).ln()
        }
    }

    /// Log probability of `w` followed by EOS under the sampling distribution.
    pub fn log_prob_with_eos(&self, w: &[usize]) -> f64 {
        if !self.achievable.contains(&w.len()) {
            return f64::NEG_INFINITY;
        }
        let p_len = -(self.achievable.len() as f64).ln();
        p_len + self.inside_logprob(w) - self.length_mass(w.len())
    }

    pub fn sample_string<R: Rng>(&self, len: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.tables.sample(&self.pcfg, self.pcfg.start(), len, rng)
    }

    /// `count` strings with lengths uniform over the achievable lengths.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Dataset> {
        if count == 0 {
            return Err(Error::usage("sample count must be at least 1"));
        }
        let mut rng = self.rng(seed)?;
        let mut strings = Vec::with_capacity(count);
        for _ in 0..count {
            let len = self.achievable[rng.gen_range(0..self.achievable.len())];
            strings.push(self.sample_string(len, &mut rng)?);
        }
        Ok(self.dataset(strings, seed))
    }

    /// `per_length` strings for every achievable length, in length order.
    pub fn sample_per_length(&self, per_length: usize, seed: u64) -> Result<Dataset> {
        if per_length == 0 {
            return Err(Error::usage("per-length count must be at least 1"));
        }
        let mut rng = self.rng(seed)?;
        let mut strings = Vec::with_capacity(per_length * self.achievable.len());
        for &len in &self.achievable {
            for _ in 0..per_length {
                strings.push(self.sample_string(len, &mut rng)?);
            }
        }
        Ok(self.dataset(strings, seed))
    }

    fn rng(&self, seed: u64) -> Result<ChaCha8Rng> {
        if self.achievable.is_empty() {
            return Err(Error::usage(format!(
                "{} produces no strings with length in [{}, {}]",
                self.task, self.params.min_len, self.params.max_len
            )));
        }
        Ok(ChaCha8Rng::seed_from_u64(seed))
    }

    fn dataset(&self, strings: Vec<Vec<usize>>, seed: u64) -> Dataset {
        let provenance = Provenance {
            task: self.task.name().to_string(),
            seed,
            min_len: self.params.min_len,
            max_len: self.params.max_len,
            size: strings.len(),
            params: self.weight_record(),
        };
        Dataset {
            vocab: self.vocab().to_vec(),
            strings,
            provenance,
        }
    }

    /// Per-symbol entropy of the sampling distribution measured on `dataset`.
    pub fn true_cross_entropy(&self, dataset: &Dataset) -> Result<f64> {
        true_cross_entropy(dataset, self)
    }
}

/// Rebuilds the grammar a dataset was sampled from, using its provenance.
pub fn grammar_for_dataset(ds: &Dataset) -> Result<TaskGrammar> {
    let p = &ds.provenance;
    let task: Task = p
        .task
        .parse()
        .map_err(|_| Error::data(format!("dataset provenance names unknown task `{}`", p.task)))?;
    let weight = |k: &str| -> Result<Option<f64>> {
        p.params
            .get(k)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::data(format!("provenance weight `{k}` is not a number")))
            })
            .transpose()
    };
    let params = TaskParams {
        min_len: p.min_len,
        max_len: p.max_len,
        continuation: weight("continuation")?,
        padding: weight("padding")?,
        branch: weight("branch")?,
    };
    let g = build_task_grammar(task, params)?;
    if g.vocab() != ds.vocab.as_slice() {
        return Err(Error::data(format!("dataset vocabulary does not match {task}")));
    }
    Ok(g)
}

/// `−Σ log p(w·EOS) / Σ (|w|+1)` under the grammar's sampling distribution.
pub fn true_cross_entropy(dataset: &Dataset, grammar: &TaskGrammar) -> Result<f64> {
    if dataset.vocab != grammar.vocab() {
        return Err(Error::usage("dataset vocabulary does not match the grammar"));
    }
    let mut nll = 0.0;
    let mut symbols = 0usize;
    for w in &dataset.strings {
        let lp = grammar.log_prob_with_eos(w);
        if !lp.is_finite() {
            return Err(Error::data(format!(
                "`{}` is not in the support of {}",
                dataset.render(w),
                grammar.task()
            )));
        }
        nll -= lp;
        symbols += w.len() + 1;
    }
    if symbols == 0 {
        return Err(Error::data("empty dataset"));
    }
    Ok(nll / symbols as f64)
}
