//! Probabilistic context-free grammars with arbitrary right-hand sides
//! (including empty ones): inside probabilities, per-length mass, and
//! length-conditioned ancestral sampling.
//!
//! Same-span (same-length) dependencies through nullable symbols are resolved
//! by iterating to a fixpoint, which is exact for grammars without unary or
//! nullable cycles.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::log_add;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sym {
    T(usize),
    N(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: usize,
    pub rhs: Vec<Sym>,
    pub prob: f64,
}

const MAX_FIXPOINT_ROUNDS: usize = 1000;

#[derive(Debug, Clone)]
pub struct Pcfg {
    nonterminals: Vec<String>,
    terminals: Vec<String>,
    rules: Vec<Rule>,
    start: usize,
    by_lhs: Vec<Vec<usize>>,
}

impl Pcfg {
    pub fn new(nonterminals: Vec<String>, terminals: Vec<String>, rules: Vec<Rule>, start: usize) -> Result<Self> {
        let nn = nonterminals.len();
        if start >= nn {
            return Err(Error::usage("start symbol out of range"));
        }
        let mut by_lhs = vec![Vec::new(); nn];
        for (i, r) in rules.iter().enumerate() {
            if r.lhs >= nn || !(0.0..=1.0).contains(&r.prob) {
                return Err(Error::usage(format!("malformed rule {i}")));
            }
            for s in &r.rhs {
                let ok = match *s {
                    Sym::T(t) => t < terminals.len(),
                    Sym::N(n) => n < nn,
                };
                if !ok {
                    return Err(Error::usage(format!("rule {i} uses an unknown symbol")));
                }
            }
            by_lhs[r.lhs].push(i);
        }
        for (a, rs) in by_lhs.iter().enumerate() {
            let total: f64 = rs.iter().map(|&r| rules[r].prob).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::usage(format!(
                    "productions of `{}` sum to {total}, not 1",
                    nonterminals[a]
                )));
            }
        }
        Ok(Pcfg {
            nonterminals,
            terminals,
            rules,
            start,
            by_lhs,
        })
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn start(&self) -> usize {
        self.start
    }

    /// Log of the total probability of all derivations of `w` from the start symbol.
    pub fn inside_logprob(&self, w: &[usize]) -> f64 {
        if w.iter().any(|&t| t >= self.terminals.len()) {
            return f64::NEG_INFINITY;
        }
        let n = w.len();
        let nn = self.nonterminals.len();
        let span = |i: usize, j: usize| i * (n + 1) + j;
        let cells = (n + 1) * (n + 1);
        let mut inside = vec![f64::NEG_INFINITY; nn * cells];
        // prefix items: items[r][m] over spans, for m = 1..=|rhs|
        let mut items: Vec<Vec<Vec<f64>>> = self
            .rules
            .iter()
            .map(|r| vec![vec![f64::NEG_INFINITY; cells]; r.rhs.len() + 1])
            .collect();
        let log_p: Vec<f64> = self.rules.iter().map(|r| r.prob.ln()).collect();
        for len in 0..=n {
            for i in 0..=n - len {
                let j = i + len;
                for _round in 0..MAX_FIXPOINT_ROUNDS {
                    let mut changed = false;
                    for (ri, r) in self.rules.iter().enumerate() {
                        let it = &mut items[ri];
                        it[0][span(i, j)] = if i == j { 0.0 } else { f64::NEG_INFINITY };
                        for m in 1..=r.rhs.len() {
                            let mut acc = f64::NEG_INFINITY;
                            match r.rhs[m - 1] {
                                Sym::T(t) => {
                                    if j > i && w[j - 1] == t {
                                        acc = it[m - 1][span(i, j - 1)];
                                    }
                                }
                                Sym::N(b) => {
                                    for k in i..=j {
                                        let left = it[m - 1][span(i, k)];
                                        if left == f64::NEG_INFINITY {
                                            continue;
                                        }
                                        let right = inside[b * cells + span(k, j)];
                                        if right != f64::NEG_INFINITY {
                                            acc = log_add(acc, left + right);
                                        }
                                    }
                                }
                            }
                            it[m][span(i, j)] = acc;
                        }
                    }
                    for a in 0..nn {
                        let mut v = f64::NEG_INFINITY;
                        for &ri in &self.by_lhs[a] {
                            let full = items[ri][self.rules[ri].rhs.len()][span(i, j)];
                            if full != f64::NEG_INFINITY {
                                v = log_add(v, log_p[ri] + full);
                            }
                        }
                        let cell = &mut inside[a * cells + span(i, j)];
                        if *cell != v {
                            *cell = v;
                            changed = true;
                        }
                    }
                    if !changed {
                        break;
                    }
                }
            }
        }
        inside[self.start * cells + span(0, n)]
    }

    /// Tables of probability mass by length up to `max_len`.
    pub fn length_tables(&self, max_len: usize) -> LengthTables {
        let nn = self.nonterminals.len();
        let mut mass = vec![vec![0.0; max_len + 1]; nn];
        let mut items: Vec<Vec<Vec<f64>>> = self
            .rules
            .iter()
            .map(|r| vec![vec![0.0; max_len + 1]; r.rhs.len() + 1])
            .collect();
        for len in 0..=max_len {
            for _round in 0..MAX_FIXPOINT_ROUNDS {
                let mut changed = false;
                for (ri, r) in self.rules.iter().enumerate() {
                    let it = &mut items[ri];
                    it[0][len] = if len == 0 { 1.0 } else { 0.0 };
                    for m in 1..=r.rhs.len() {
                        let v = match r.rhs[m - 1] {
                            Sym::T(_) => {
                                if len >= 1 {
                                    it[m - 1][len - 1]
                                } else {
                                    0.0
                                }
                            }
                            Sym::N(b) => (0..=len).map(|l| it[m - 1][len - l] * mass[b][l]).sum(),
                        };
                        it[m][len] = v;
                    }
                }
                for a in 0..nn {
                    let v: f64 = self.by_lhs[a]
                        .iter()
                        .map(|&ri| self.rules[ri].prob * items[ri][self.rules[ri].rhs.len()][len])
                        .sum();
                    if mass[a][len] != v {
                        mass[a][len] = v;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
        }
        LengthTables { max_len, mass, items }
    }
}

/// `mass[A][L]` = total probability of strings of length `L` derived from `A`,
/// plus the per-rule prefix tables needed to sample conditioned on length.
#[derive(Debug, Clone)]
pub struct LengthTables {
    max_len: usize,
    mass: Vec<Vec<f64>>,
    items: Vec<Vec<Vec<f64>>>,
}

impl LengthTables {
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn mass(&self, nonterminal: usize, len: usize) -> f64 {
        self.mass[nonterminal].get(len).copied().unwrap_or(0.0)
    }

    /// Sample a string of exactly `len` terminals from `nonterminal`.
    pub fn sample<R: Rng>(&self, g: &Pcfg, nonterminal: usize, len: usize, rng: &mut R) -> Result<Vec<usize>> {
        if len > self.max_len || self.mass(nonterminal, len) <= 0.0 {
            return Err(Error::usage(format!(
                "no string of length {len} can be derived from `{}`",
                g.nonterminals[nonterminal]
            )));
        }
        let mut out = Vec::with_capacity(len);
        self.expand(g, nonterminal, len, rng, &mut out);
        Ok(out)
    }

    fn expand<R: Rng>(&self, g: &Pcfg, a: usize, len: usize, rng: &mut R, out: &mut Vec<usize>) {
        let rules = &g.by_lhs[a];
        let weights: Vec<f64> = rules
            .iter()
            .map(|&ri| g.rules[ri].prob * self.items[ri][g.rules[ri].rhs.len()][len])
            .collect();
        let ri = rules[pick(&weights, rng)];
        let rhs = &g.rules[ri].rhs;
        let it = &self.items[ri];
        // choose the length of each right-hand-side symbol, last to first
        let mut lens = vec![0usize; rhs.len()];
        let mut rest = len;
        for m in (1..=rhs.len()).rev() {
            let l = match rhs[m - 1] {
                Sym::T(_) => 1,
                Sym::N(b) => {
                    let w: Vec<f64> = (0..=rest).map(|l| it[m - 1][rest - l] * self.mass[b][l]).collect();
                    pick(&w, rng)
                }
            };
            lens[m - 1] = l;
            rest -= l;
        }
        for (s, l) in rhs.iter().zip(lens) {
            match *s {
                Sym::T(t) => out.push(t),
                Sym::N(b) => self.expand(g, b, l, rng, out),
            }
        }
    }
}

/// Index drawn with probability proportional to `w`.
fn pick<R: Rng>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            if u < x {
                return i;
            }
            u -= x;
        }
    }
    w.iter().rposition(|&x| x > 0.0).expect("positive total weight")
}
