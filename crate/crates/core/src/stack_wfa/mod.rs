//! The nondeterministic stack: a weighted pushdown automaton simulated by the
//! stack-WFA dynamic program in log space.
//!
//! Layouts used throughout:
//! - a configuration `(q, x)` (state, top symbol) has flat index `q·|Γ| + x`;
//! - operations are numbered `push y = y`, `replace y = |Γ| + y`, `pop = 2|Γ|`;
//! - one transition tensor Δ[t] is `[B, |Q|, |Γ|, |Q|, 2|Γ|+1]`, flattened to
//!   `[B, N·|Q|·K]` with `N = |Q||Γ|`, `K = 2|Γ|+1`;
//! - α[t] is `[B, N]`; γ column `t` is `[B, rows, N, N]` for rows `i = lo..t−1`.
//!
//! Row `i = −1` is the bottom of the stack: γ[−1→0] is one at `(q₀,⊥)→(q₀,⊥)`
//! and α[−1] is one-hot there, so α[t] also counts runs that still have only
//! the (possibly replaced) bottom symbol.

pub(crate) mod kernel;
pub mod oracle;
mod verify;

use std::collections::VecDeque;
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernel::{first_row, AlphaCache, AlphaStep, ColumnCache, DeltaCache, Dims, GammaStep};

pub use oracle::{brute_force_marginals, posterior_transition_probs, BruteForce, Posterior};
pub use verify::{oracle_check, OracleCheck, OracleReport, MAX_GRADIENT_STEPS, ORACLE_SIGNATURES};

/// Discrete shape of the simulated PDA. The initial state and the bottom
/// symbol are both index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PdaSignature {
    pub num_states: usize,
    pub num_symbols: usize,
}

/// A stack operation of a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StackOp {
    Push(usize),
    Replace(usize),
    Pop,
}

impl PdaSignature {
    pub fn new(num_states: usize, num_symbols: usize) -> Result<Self> {
        if num_states == 0 || num_symbols == 0 {
            return Err(Error::usage(format!(
                "a PDA needs at least one state and one stack symbol (got |Q|={num_states}, |Γ|={num_symbols})"
            )));
        }
        Ok(PdaSignature {
            num_states,
            num_symbols,
        })
    }

    pub fn num_ops(&self) -> usize {
        2 * self.num_symbols + 1
    }

    /// Number of (state, top symbol) configurations.
    pub fn num_configs(&self) -> usize {
        self.num_states * self.num_symbols
    }

    /// Elements of one flattened Δ[t] (per batch element).
    pub fn delta_len(&self) -> usize {
        self.num_configs() * self.num_states * self.num_ops()
    }

    pub fn op_index(&self, op: StackOp) -> usize {
        match op {
            StackOp::Push(y) => y,
            StackOp::Replace(y) => self.num_symbols + y,
            StackOp::Pop => 2 * self.num_symbols,
        }
    }

    pub fn op_of(&self, index: usize) -> StackOp {
        let g = self.num_symbols;
        if index < g {
            StackOp::Push(index)
        } else if index < 2 * g {
            StackOp::Replace(index - g)
        } else {
            StackOp::Pop
        }
    }

    /// Flat index of `Δ[q, x → r, op]`.
    pub fn delta_index(&self, q: usize, x: usize, r: usize, op: StackOp) -> usize {
        ((q * self.num_symbols + x) * self.num_states + r) * self.num_ops() + self.op_index(op)
    }

    pub(crate) fn dims(&self) -> Dims {
        Dims::new(self.num_states, self.num_symbols)
    }
}

/// How controller outputs become transition weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WeightMode {
    /// Softmax over `(r, op)` per source configuration.
    Normalized,
    /// `log Δ` is the affine output itself.
    Unnormalized,
}

/// What the stack reading exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ReadingMode {
    /// Distribution over the top symbol.
    Symbols,
    /// Joint distribution over (state, top symbol).
    Joint,
}

impl ReadingMode {
    pub fn size(&self, sig: &PdaSignature) -> usize {
        match self {
            ReadingMode::Symbols => sig.num_symbols,
            ReadingMode::Joint => sig.num_configs(),
        }
    }
}

/// Turn raw affine outputs `[B, delta_len]` into log transition weights.
pub fn transition_weights<T: Scalar>(
    tape: &mut Tape<T>,
    affine: Var,
    sig: &PdaSignature,
    mode: WeightMode,
) -> Result<Var> {
    let shape = tape.shape(affine).to_vec();
    if shape.len() != 2 || shape[1] != sig.delta_len() {
        return Err(Error::usage(format!(
            "transition weights need shape [B, {}], got {:?}",
            sig.delta_len(),
            shape
        )));
    }
    match mode {
        WeightMode::Unnormalized => Ok(affine),
        WeightMode::Normalized => {
            let group = sig.num_states * sig.num_ops();
            let b = shape[0];
            let grouped = tape.reshape(affine, &[b * sig.num_configs(), group])?;
            let ls = tape.log_softmax(grouped);
            tape.reshape(ls, &[b, sig.delta_len()])
        }
    }
}

/// Normalized stack reading from log α `[B, N]`. An all-zero α reads as uniform.
pub fn reading<T: Scalar>(tape: &mut Tape<T>, alpha: Var, sig: &PdaSignature, mode: ReadingMode) -> Result<Var> {
    let shape = tape.shape(alpha).to_vec();
    if shape.len() != 2 || shape[1] != sig.num_configs() {
        return Err(Error::usage(format!(
            "α needs shape [B, {}], got {:?}",
            sig.num_configs(),
            shape
        )));
    }
    match mode {
        ReadingMode::Joint => Ok(tape.softmax(alpha)),
        ReadingMode::Symbols => {
            let b = shape[0];
            let per_state = tape.reshape(alpha, &[b, sig.num_states, sig.num_symbols])?;
            let marg = tape.logsumexp(per_state, 1)?;
            Ok(tape.softmax(marg))
        }
    }
}

pub(crate) struct ColumnEntry<T> {
    pub var: Var,
    pub cache: Rc<ColumnCache<T>>,
}

pub(crate) struct AlphaEntry<T> {
    pub var: Var,
    pub cache: Rc<AlphaCache<T>>,
}

/// The stack-WFA dynamic program for a batch of sequences, recorded on a tape.
///
/// With `band = Some(D)` only γ entries of span at most `D` are kept, and the
/// state holds just the columns and α entries later steps can still read.
pub struct StackWfa<T> {
    pub(crate) sig: PdaSignature,
    pub(crate) batch: usize,
    pub(crate) band: Option<usize>,
    pub(crate) t: usize,
    /// γ columns by absolute time, oldest first.
    pub(crate) columns: VecDeque<(usize, ColumnEntry<T>)>,
    /// α entries by absolute time (−1 for the bottom row), oldest first.
    pub(crate) alphas: VecDeque<(isize, AlphaEntry<T>)>,
    pub(crate) evict: bool,
}

impl<T: Scalar> StackWfa<T> {
    /// Initial state at t = 0. `band` must be at least 1 when given.
    pub fn new(tape: &mut Tape<T>, sig: PdaSignature, batch: usize, band: Option<usize>) -> Result<Self> {
        if band == Some(0) {
            return Err(Error::usage("band D must be at least 1"));
        }
        if batch == 0 {
            return Err(Error::usage("batch size must be positive"));
        }
        let n = sig.num_configs();
        let mut one_hot = vec![T::neg_infinity(); batch * n];
        for b in 0..batch {
            one_hot[b * n] = T::zero();
        }
        let mut col0 = vec![T::neg_infinity(); batch * n * n];
        for b in 0..batch {
            col0[b * n * n] = T::zero();
        }
        let mut s = StackWfa {
            sig,
            batch,
            band,
            t: 0,
            columns: VecDeque::new(),
            alphas: VecDeque::new(),
            evict: true,
        };
        s.push_column(tape, 0, -1, col0);
        s.push_alpha(tape, -1, one_hot.clone());
        s.push_alpha(tape, 0, one_hot);
        Ok(s)
    }

    pub(crate) fn push_column(&mut self, tape: &mut Tape<T>, t: usize, lo: isize, data: Vec<T>) {
        let n = self.sig.num_configs();
        let rows = (t as isize - lo) as usize;
        let cache = Rc::new(ColumnCache::new(self.sig.dims(), t, lo, self.batch, &data));
        let var = tape.constant(Tensor::new(vec![self.batch, rows, n, n], data).expect("column shape"));
        self.columns.push_back((t, ColumnEntry { var, cache }));
    }

    pub(crate) fn push_alpha(&mut self, tape: &mut Tape<T>, i: isize, data: Vec<T>) {
        let n = self.sig.num_configs();
        let cache = Rc::new(AlphaCache::new(n, &data));
        let var = tape.constant(Tensor::new(vec![self.batch, n], data).expect("alpha shape"));
        self.alphas.push_back((i, AlphaEntry { var, cache }));
    }

    pub fn signature(&self) -> &PdaSignature {
        &self.sig
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn band(&self) -> Option<usize> {
        self.band
    }

    /// Number of transitions consumed so far.
    pub fn time(&self) -> usize {
        self.t
    }

    /// log α at the current time, `[B, N]`.
    pub fn alpha(&self) -> Var {
        self.alphas.back().expect("α[0] always present").1.var
    }

    /// The γ column ending at `t`, if it is still held, with its first row index.
    pub fn gamma_column(&self, t: usize) -> Option<(Var, isize)> {
        self.columns
            .iter()
            .find(|(k, _)| *k == t)
            .map(|(_, e)| (e.var, e.cache.lo))
    }

    /// Number of γ columns and α entries currently held.
    pub fn held(&self) -> (usize, usize) {
        (self.columns.len(), self.alphas.len())
    }

    /// Scalars held in retained γ columns and α entries.
    pub fn held_scalars(&self) -> usize {
        let c: usize = self.columns.iter().map(|(_, e)| e.cache.lin.len()).sum();
        let a: usize = self.alphas.iter().map(|(_, e)| e.cache.lin.len()).sum();
        c + a
    }

    #[cfg(test)]
    pub(crate) fn overwrite_column(&mut self, tape: &mut Tape<T>, t: usize, value: T) {
        let pos = self.columns.iter().position(|(k, _)| *k == t).expect("column held");
        let (_, old) = self.columns.remove(pos).expect("column held");
        let data = vec![value; old.cache.lin.len()];
        let mut tmp = std::mem::take(&mut self.columns);
        self.push_column(tape, t, old.cache.lo, data);
        let entry = self.columns.pop_back().expect("just pushed");
        tmp.insert(pos, entry);
        self.columns = tmp;
    }

    fn column(&self, t: usize) -> Result<&ColumnEntry<T>> {
        self.columns
            .iter()
            .find(|(k, _)| *k == t)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::usage(format!("γ column {t} is no longer held")))
    }

    /// Consume Δ[t+1] (log weights `[B, delta_len]`) and return log α[t+1].
    pub fn step(&mut self, tape: &mut Tape<T>, log_delta: Var) -> Result<Var> {
        let dims = self.sig.dims();
        let dshape = tape.shape(log_delta);
        if dshape.len() != 2 || dshape[0] != self.batch || dshape[1] != dims.delta_len() {
            return Err(Error::usage(format!(
                "Δ needs shape [{}, {}], got {:?}",
                self.batch,
                dims.delta_len(),
                dshape
            )));
        }
        if !tape.value(log_delta).is_valid_log() {
            return Err(Error::numerical(format!(
                "transition weights at step {} contain NaN or +∞",
                self.t + 1
            )));
        }
        let t = self.t + 1;
        let lo = first_row(t, self.band);
        let delta = Rc::new(DeltaCache::new(dims, self.batch, tape.value(log_delta).data()));

        let needed = GammaStep::<T>::needed_columns(t, lo);
        let k_min = *needed.start();
        let mut inputs = vec![log_delta];
        let mut cols = Vec::with_capacity(needed.clone().count());
        for k in needed {
            let e = self.column(k)?;
            inputs.push(e.var);
            cols.push(e.cache.clone());
        }
        let op = GammaStep {
            dims,
            batch: self.batch,
            t,
            lo,
            delta,
            cols,
            k_min,
        };
        let value = op.forward();
        let rows = (t as isize - lo) as usize;
        let cache = Rc::new(ColumnCache::new(dims, t, lo, self.batch, &value));
        let n = dims.n;
        let var = tape.custom(
            inputs,
            Tensor::new(vec![self.batch, rows, n, n], value).expect("column shape"),
            Box::new(op),
        );
        self.columns.push_back((
            t,
            ColumnEntry {
                var,
                cache: cache.clone(),
            },
        ));

        let mut a_inputs = Vec::with_capacity(rows + 1);
        let mut a_caches = Vec::with_capacity(rows);
        for i in lo..t as isize {
            let e = self
                .alphas
                .iter()
                .find(|(k, _)| *k == i)
                .map(|(_, e)| e)
                .ok_or_else(|| Error::usage(format!("α[{i}] is no longer held")))?;
            a_inputs.push(e.var);
            a_caches.push(e.cache.clone());
        }
        a_inputs.push(var);
        let aop = AlphaStep {
            n,
            batch: self.batch,
            lo,
            alphas: a_caches,
            column: cache,
        };
        let avalue = aop.forward();
        let acache = Rc::new(AlphaCache::new(n, &avalue));
        let avar = tape.custom(
            a_inputs,
            Tensor::new(vec![self.batch, n], avalue).expect("alpha shape"),
            Box::new(aop),
        );
        self.alphas.push_back((
            t as isize,
            AlphaEntry {
                var: avar,
                cache: acache,
            },
        ));
        self.t = t;
        self.evict();
        Ok(avar)
    }

    /// Drop everything the next step can no longer read (banded mode only).
    fn evict(&mut self) {
        if self.band.is_none() || !self.evict {
            return;
        }
        let next = self.t + 1;
        let lo = first_row(next, self.band);
        let k_min = *GammaStep::<T>::needed_columns(next, lo).start();
        while self.columns.front().is_some_and(|(k, _)| *k < k_min) {
            self.columns.pop_front();
        }
        while self.alphas.front().is_some_and(|(i, _)| *i < lo) {
            self.alphas.pop_front();
        }
    }
}

/// Full (unbanded) DP over a single sequence of log transition weights,
/// returning log α[0..=n] as `[N]` tensors. Convenience for tests and tools.
pub fn forward_alphas<T: Scalar>(sig: &PdaSignature, log_deltas: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let mut wfa = StackWfa::new(&mut tape, *sig, 1, None)?;
    let mut out = vec![flat(tape.value(wfa.alpha()))];
    for d in log_deltas {
        let v = tape.constant(d.clone().reshape(&[1, sig.delta_len()])?);
        let a = wfa.step(&mut tape, v)?;
        out.push(flat(tape.value(a)));
    }
    Ok(out)
}

fn flat<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(t.data().to_vec())
}

/// Reading of a single log α vector `[N]`, computed without a tape.
pub fn reading_of<T: Scalar>(sig: &PdaSignature, log_alpha: &[T], mode: ReadingMode) -> Vec<T> {
    let g = sig.num_symbols;
    let logits: Vec<T> = match mode {
        ReadingMode::Joint => log_alpha.to_vec(),
        ReadingMode::Symbols => (0..g)
            .map(|y| {
                let col: Vec<T> = (0..sig.num_states).map(|r| log_alpha[r * g + y]).collect();
                crate::scalar::logsumexp_slice(&col)
            })
            .collect(),
    };
    let z = crate::scalar::logsumexp_slice(&logits);
    if z == T::neg_infinity() {
        let u = T::one() / T::lit(logits.len() as f64);
        return vec![u; logits.len()];
    }
    logits.iter().map(|&l| (l - z).exp()).collect()
}
