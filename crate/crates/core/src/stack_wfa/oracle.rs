//! Exponential-time reference implementations that simulate explicit stacks.
//!
//! Runs start in state q₀ with stack `[⊥]`. Replacing the only symbol rewrites
//! it; popping it kills the run.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::{log_add, Scalar};
use crate::stack_wfa::{reading_of, PdaSignature, ReadingMode, StackOp};
use crate::tensor::Tensor;

/// Largest sequence length the oracles accept.
pub const MAX_ORACLE_STEPS: usize = 12;
/// Largest number of configurations `|Q|·|Γ|` the oracles accept.
pub const MAX_ORACLE_CONFIGS: usize = 16;

/// Totals per `(r, y)` after each number of transitions, with both readings.
#[derive(Debug, Clone)]
pub struct BruteForce<T> {
    /// log α[t] as `[N]` tensors for `t = 0..=n`.
    pub alphas: Vec<Tensor<T>>,
    pub symbol_readings: Vec<Vec<T>>,
    pub joint_readings: Vec<Vec<T>>,
}

/// Posterior over which transition was taken at each step, given the end configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Posterior<T> {
    /// No run with positive weight ends in the conditioning configuration.
    Empty,
    /// `probs[i−1][δ]` for steps `i = 1..=t` and flat Δ index `δ`.
    Probabilities(Vec<Vec<T>>),
}

fn check_instance<T: Scalar>(sig: &PdaSignature, log_deltas: &[Tensor<T>]) -> Result<()> {
    if log_deltas.len() > MAX_ORACLE_STEPS || sig.num_configs() > MAX_ORACLE_CONFIGS {
        return Err(Error::usage(format!(
            "brute-force enumeration limited to n ≤ {MAX_ORACLE_STEPS} and |Q|·|Γ| ≤ {MAX_ORACLE_CONFIGS} (got n={}, |Q|·|Γ|={})",
            log_deltas.len(),
            sig.num_configs()
        )));
    }
    for (t, d) in log_deltas.iter().enumerate() {
        if d.numel() != sig.delta_len() {
            return Err(Error::usage(format!(
                "Δ[{}] has {} elements, expected {}",
                t + 1,
                d.numel(),
                sig.delta_len()
            )));
        }
    }
    Ok(())
}

/// Apply `op` to an explicit stack; `None` when the run dies.
fn apply(stack: &[u8], op: StackOp) -> Option<Vec<u8>> {
    let mut s = stack.to_vec();
    match op {
        StackOp::Push(y) => s.push(y as u8),
        StackOp::Replace(y) => *s.last_mut().expect("stack never empty") = y as u8,
        StackOp::Pop => {
            if s.len() == 1 {
                return None;
            }
            s.pop();
        }
    }
    Some(s)
}

/// Sum run weights by enumerating every reachable (state, stack) pair.
pub fn brute_force_marginals<T: Scalar>(sig: &PdaSignature, log_deltas: &[Tensor<T>]) -> Result<BruteForce<T>> {
    check_instance(sig, log_deltas)?;
    let g = sig.num_symbols;
    let totals = |m: &BTreeMap<(usize, Vec<u8>), T>| {
        let mut a = vec![T::neg_infinity(); sig.num_configs()];
        for ((q, s), &w) in m {
            let idx = q * g + *s.last().expect("non-empty") as usize;
            a[idx] = log_add(a[idx], w);
        }
        a
    };
    let mut live: BTreeMap<(usize, Vec<u8>), T> = BTreeMap::new();
    live.insert((0, vec![0]), T::zero());
    let mut alphas = vec![totals(&live)];
    for d in log_deltas {
        let d = d.data();
        let mut next: BTreeMap<(usize, Vec<u8>), T> = BTreeMap::new();
        for ((q, stack), &w) in &live {
            let x = *stack.last().expect("non-empty") as usize;
            for r in 0..sig.num_states {
                for o in 0..sig.num_ops() {
                    let op = sig.op_of(o);
                    let dw = d[sig.delta_index(*q, x, r, op)];
                    if dw == T::neg_infinity() {
                        continue;
                    }
                    if let Some(s) = apply(stack, op) {
                        let e = next.entry((r, s)).or_insert(T::neg_infinity());
                        *e = log_add(*e, w + dw);
                    }
                }
            }
        }
        live = next;
        alphas.push(totals(&live));
    }
    let symbol_readings = alphas
        .iter()
        .map(|a| reading_of(sig, a, ReadingMode::Symbols))
        .collect();
    let joint_readings = alphas.iter().map(|a| reading_of(sig, a, ReadingMode::Joint)).collect();
    Ok(BruteForce {
        alphas: alphas.into_iter().map(Tensor::from_vec).collect(),
        symbol_readings,
        joint_readings,
    })
}

struct Enumerator<'a, T> {
    sig: &'a PdaSignature,
    deltas: &'a [Tensor<T>],
    target: usize,
    path: Vec<usize>,
    total: T,
    acc: Vec<Vec<T>>,
}

impl<T: Scalar> Enumerator<'_, T> {
    fn walk(&mut self, q: usize, stack: &[u8], w: T) {
        let step = self.path.len();
        if step == self.deltas.len() {
            let top = *stack.last().expect("non-empty") as usize;
            if q * self.sig.num_symbols + top == self.target {
                self.total = log_add(self.total, w);
                for (i, &delta) in self.path.iter().enumerate() {
                    self.acc[i][delta] = log_add(self.acc[i][delta], w);
                }
            }
            return;
        }
        let x = *stack.last().expect("non-empty") as usize;
        let d = self.deltas[step].data();
        for r in 0..self.sig.num_states {
            for o in 0..self.sig.num_ops() {
                let op = self.sig.op_of(o);
                let idx = self.sig.delta_index(q, x, r, op);
                if d[idx] == T::neg_infinity() {
                    continue;
                }
                if let Some(s) = apply(stack, op) {
                    self.path.push(idx);
                    self.walk(r, &s, w + d[idx]);
                    self.path.pop();
                }
            }
        }
    }
}

/// For each step `i ≤ t` and transition δ, the total weight of runs that take δ
/// at step `i` and end in configuration `(r, y)` after `t` steps, divided by
/// the total weight of all runs ending there.
pub fn posterior_transition_probs<T: Scalar>(
    sig: &PdaSignature,
    log_deltas: &[Tensor<T>],
    t: usize,
    end: (usize, usize),
) -> Result<Posterior<T>> {
    check_instance(sig, log_deltas)?;
    if t > log_deltas.len() {
        return Err(Error::usage(format!(
            "step {t} beyond the {} given transition tensors",
            log_deltas.len()
        )));
    }
    if end.0 >= sig.num_states || end.1 >= sig.num_symbols {
        return Err(Error::usage(format!("configuration {end:?} outside the signature")));
    }
    let mut e = Enumerator {
        sig,
        deltas: &log_deltas[..t],
        target: end.0 * sig.num_symbols + end.1,
        path: Vec::with_capacity(t),
        total: T::neg_infinity(),
        acc: vec![vec![T::neg_infinity(); sig.delta_len()]; t],
    };
    e.walk(0, &[0], T::zero());
    if e.total == T::neg_infinity() {
        return Ok(Posterior::Empty);
    }
    let total = e.total;
    Ok(Posterior::Probabilities(
        e.acc
            .into_iter()
            .map(|row| row.into_iter().map(|w| (w - total).exp()).collect())
            .collect(),
    ))
}
