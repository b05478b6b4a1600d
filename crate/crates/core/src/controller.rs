//! LSTM controller coupled to a pluggable stack.
//!
//! At step `k` the controller reads `[x_k; r_{k−1}; h_{k−1}]`, emits logits
//! `y_k` from `h_k`, and (unless told otherwise) drives the stack with actions
//! computed from `h_k`, producing the reading `r_k` for the next step. Step 0
//! consumes a learned start vector instead of a token.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::banded_stack_wfa::WindowState;
use crate::baseline_stacks::{strat_update, superpos_update, StratStack, SuperposStack};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stack_wfa::{reading, transition_weights, PdaSignature, ReadingMode, StackWfa, WeightMode};
use crate::tensor::Tensor;

/// The stack attached to a controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StackKind {
    /// No stack: a plain LSTM.
    Null,
    /// Stratification stack with vectors of size `m`.
    Strat { m: usize },
    /// Superposition stack; with `push_hidden` the pushed vector is `h_t` itself.
    Superpos {
        m: usize,
        push_hidden: bool,
        max_depth: Option<usize>,
    },
    /// Nondeterministic stack, optionally banded.
    Nondet {
        signature: PdaSignature,
        weights: WeightMode,
        reading: ReadingMode,
        band: Option<usize>,
    },
}

/// Named model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ModelFamily {
    Lstm,
    Gref,
    Jm,
    Ns,
    NsS,
    NsU,
    NsSU,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 7] = [
        ModelFamily::Lstm,
        ModelFamily::Gref,
        ModelFamily::Jm,
        ModelFamily::Ns,
        ModelFamily::NsS,
        ModelFamily::NsU,
        ModelFamily::NsSU,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::Lstm => "lstm",
            ModelFamily::Gref => "gref",
            ModelFamily::Jm => "jm",
            ModelFamily::Ns => "ns",
            ModelFamily::NsS => "ns+s",
            ModelFamily::NsU => "ns+u",
            ModelFamily::NsSU => "ns+s+u",
        }
    }

    pub fn is_nondeterministic(&self) -> bool {
        matches!(
            self,
            ModelFamily::Ns | ModelFamily::NsS | ModelFamily::NsU | ModelFamily::NsSU
        )
    }

    /// The stack this family uses under the given sizes.
    pub fn stack(&self, opts: &StackOptions) -> Result<StackKind> {
        let nondet = |weights, reading| -> Result<StackKind> {
            Ok(StackKind::Nondet {
                signature: PdaSignature::new(opts.states, opts.symbols)?,
                weights,
                reading,
                band: opts.band,
            })
        };
        match self {
            ModelFamily::Lstm => Ok(StackKind::Null),
            ModelFamily::Gref => Ok(StackKind::Strat { m: opts.m }),
            ModelFamily::Jm => Ok(StackKind::Superpos {
                m: opts.m,
                push_hidden: opts.push_hidden,
                max_depth: opts.max_depth,
            }),
            ModelFamily::Ns => nondet(WeightMode::Normalized, ReadingMode::Symbols),
            ModelFamily::NsS => nondet(WeightMode::Normalized, ReadingMode::Joint),
            ModelFamily::NsU => nondet(WeightMode::Unnormalized, ReadingMode::Symbols),
            ModelFamily::NsSU => nondet(WeightMode::Unnormalized, ReadingMode::Joint),
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(' ', "");
        ModelFamily::ALL
            .iter()
            .copied()
            .find(|f| f.name() == norm || (norm == "rns" && *f == ModelFamily::NsSU))
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown model family `{s}` (expected one of lstm, gref, jm, ns, ns+s, ns+u, ns+s+u)"
                ))
            })
    }
}

/// Sizes used when turning a [`ModelFamily`] into a [`StackKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StackOptions {
    pub states: usize,
    pub symbols: usize,
    pub m: usize,
    pub band: Option<usize>,
    pub push_hidden: bool,
    pub max_depth: Option<usize>,
}

impl Default for StackOptions {
    fn default() -> Self {
        StackOptions {
            states: 2,
            symbols: 3,
            m: 3,
            band: None,
            push_hidden: false,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ControllerConfig {
    /// One-hot input width.
    pub input_size: usize,
    /// Number of output logits.
    pub output_size: usize,
    pub hidden: usize,
    pub stack: StackKind,
}

/// Controller input at one step.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a> {
    /// The learned start vector.
    Start,
    /// One token per batch row.
    Tokens(&'a [usize]),
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub logits: Var,
    /// Stack actions emitted at this step (log Δ for the nondeterministic stack).
    pub actions: Option<Var>,
    /// Reading produced by this step's stack update.
    pub reading: Option<Var>,
}

enum StackRuntime<T> {
    Null,
    Strat(StratStack),
    Superpos(SuperposStack),
    Nondet(StackWfa<T>),
}

/// Live recurrent state on a tape.
pub struct RunState<T> {
    pub h: Var,
    pub c: Var,
    /// Reading fed into the next step (absent for the null stack).
    pub reading: Option<Var>,
    batch: usize,
    steps: usize,
    stack: StackRuntime<T>,
}

impl<T: Scalar> RunState<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Controller steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Detached copy of everything needed to continue on a fresh tape.
    pub fn carry(&self, tape: &Tape<T>) -> Result<Carry<T>> {
        let stack = match &self.stack {
            StackRuntime::Null => StackCarry::Null,
            StackRuntime::Strat(_) => {
                return Err(Error::usage("the stratification stack cannot be carried across chunks"))
            }
            StackRuntime::Superpos(s) => StackCarry::Superpos {
                cells: tape.value(s.cells()).clone(),
                time: s.time(),
            },
            StackRuntime::Nondet(w) => StackCarry::Window(w.window(tape)?),
        };
        Ok(Carry {
            h: tape.value(self.h).clone(),
            c: tape.value(self.c).clone(),
            reading: self.reading.map(|r| tape.value(r).clone()),
            steps: self.steps,
            stack,
        })
    }
}

/// Detached recurrent state forwarded across truncated-BPTT boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Carry<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    pub reading: Option<Tensor<T>>,
    pub steps: usize,
    pub stack: StackCarry<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StackCarry<T> {
    Null,
    Superpos { cells: Tensor<T>, time: usize },
    Window(WindowState<T>),
}

/// Result of scoring sequences.
pub struct SequenceRun {
    /// Σ over batch and positions of −log p(target).
    pub nll: Var,
    pub steps: Vec<StepOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    config: ControllerConfig,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        if config.hidden == 0 || config.output_size == 0 || config.input_size == 0 {
            return Err(Error::usage("controller sizes must be positive"));
        }
        match config.stack {
            StackKind::Strat { m }
            | StackKind::Superpos {
                m, push_hidden: false, ..
            } if m == 0 => return Err(Error::usage("stack vector size must be positive")),
            StackKind::Nondet { band: Some(0), .. } => return Err(Error::usage("band D must be at least 1")),
            _ => {}
        }
        Ok(Controller { config })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Size of the stack reading fed back to the LSTM.
    pub fn reading_size(&self) -> usize {
        match self.config.stack {
            StackKind::Null => 0,
            StackKind::Strat { m } => m,
            StackKind::Superpos { m, push_hidden, .. } => {
                if push_hidden {
                    self.config.hidden
                } else {
                    m
                }
            }
            StackKind::Nondet { signature, reading, .. } => reading.size(&signature),
        }
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.config.hidden;
        let lstm_in = self.config.input_size + self.reading_size() + h;
        let mut v = vec![
            ("lstm.weight".to_string(), vec![4 * h, lstm_in]),
            ("lstm.bias".to_string(), vec![4 * h]),
            ("start".to_string(), vec![self.config.input_size]),
            ("out.weight".to_string(), vec![self.config.output_size, h]),
            ("out.bias".to_string(), vec![self.config.output_size]),
        ];
        let mut lin = |name: &str, out: usize| {
            v.push((format!("stack.{name}.weight"), vec![out, h]));
            v.push((format!("stack.{name}.bias"), vec![out]));
        };
        match self.config.stack {
            StackKind::Null => {}
            StackKind::Strat { m } => {
                lin("u", 1);
                lin("d", 1);
                lin("v", m);
            }
            StackKind::Superpos { m, push_hidden, .. } => {
                lin("a", 3);
                if !push_hidden {
                    lin("v", m);
                }
            }
            StackKind::Nondet { signature, .. } => lin("actions", signature.delta_len()),
        }
        v
    }

    /// Parameters drawn uniformly from `[−scale, scale]`.
    pub fn init_params<T: Scalar, R: Rng>(&self, scale: f64, rng: &mut R) -> ParamStore<T> {
        let mut p = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            p.insert(name, Tensor::zeros(&shape));
        }
        p.init_uniform(scale, rng);
        p
    }

    /// Check that `params` has exactly this controller's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        let want = self.param_shapes();
        if want.len() != params.len() {
            return Err(Error::usage(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for (name, shape) in want {
            let got = params.get(&name)?;
            if got.shape() != shape.as_slice() {
                return Err(Error::usage(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Fresh state for `batch` sequences: zero LSTM state, empty stack.
    pub fn start<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize) -> Result<RunState<T>> {
        if batch == 0 {
            return Err(Error::usage("batch size must be positive"));
        }
        let h = self.config.hidden;
        let hv = tape.constant(Tensor::zeros(&[batch, h]));
        let cv = tape.constant(Tensor::zeros(&[batch, h]));
        let (stack, reading) = match self.config.stack {
            StackKind::Null => (StackRuntime::Null, None),
            StackKind::Strat { m } => (
                StackRuntime::Strat(StratStack::new(batch, m)),
                Some(tape.constant(Tensor::zeros(&[batch, m]))),
            ),
            StackKind::Superpos { max_depth, .. } => {
                let m = self.reading_size();
                let s = SuperposStack::new(tape, batch, m, max_depth);
                let r = s.reading(tape)?;
                (StackRuntime::Superpos(s), Some(r))
            }
            StackKind::Nondet {
                signature,
                reading: mode,
                band,
                ..
            } => {
                let w = StackWfa::new(tape, signature, batch, band)?;
                let r = reading(tape, w.alpha(), &signature, mode)?;
                (StackRuntime::Nondet(w), Some(r))
            }
        };
        Ok(RunState {
            h: hv,
            c: cv,
            reading,
            batch,
            steps: 0,
            stack,
        })
    }

    /// Rebuild a state from a detached [`Carry`] on a fresh tape.
    pub fn resume<T: Scalar>(&self, tape: &mut Tape<T>, carry: &Carry<T>) -> Result<RunState<T>> {
        let batch = carry.h.shape().first().copied().unwrap_or(0);
        let shape_ok = carry.h.shape() == [batch, self.config.hidden] && carry.c.shape() == carry.h.shape();
        if !shape_ok || batch == 0 {
            return Err(Error::data(format!(
                "carried controller state has shape {:?}, expected [B, {}]",
                carry.h.shape(),
                self.config.hidden
            )));
        }
        let stack = match (&self.config.stack, &carry.stack) {
            (StackKind::Null, StackCarry::Null) => StackRuntime::Null,
            (StackKind::Superpos { max_depth, .. }, StackCarry::Superpos { cells, time }) => StackRuntime::Superpos(
                SuperposStack::from_values(tape, cells.clone(), *time, self.reading_size(), *max_depth)?,
            ),
            (StackKind::Nondet { signature, band, .. }, StackCarry::Window(w))
                if w.signature == *signature && Some(w.band) == *band =>
            {
                StackRuntime::Nondet(StackWfa::from_window(tape, w)?)
            }
            _ => return Err(Error::data("carried stack state does not match the model's stack")),
        };
        let reading = match (&carry.reading, self.reading_size()) {
            (None, 0) => None,
            (Some(r), n) if r.shape() == [batch, n] => Some(tape.constant(r.clone())),
            _ => return Err(Error::data("carried stack reading has the wrong shape")),
        };
        Ok(RunState {
            h: tape.constant(carry.h.clone()),
            c: tape.constant(carry.c.clone()),
            reading,
            batch,
            steps: carry.steps,
            stack,
        })
    }

    fn input<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        input: StepInput<'_>,
        batch: usize,
    ) -> Result<Var> {
        let n = self.config.input_size;
        match input {
            StepInput::Start => {
                let s = tape.param("start", params)?;
                let col = tape.reshape(s, &[n, 1])?;
                let ones = tape.constant(Tensor::filled(&[batch, 1], T::one()));
                tape.affine(ones, col, None)
            }
            StepInput::Tokens(toks) => {
                if toks.len() != batch {
                    return Err(Error::usage(format!("{} tokens for a batch of {batch}", toks.len())));
                }
                let mut data = vec![T::zero(); batch * n];
                for (b, &w) in toks.iter().enumerate() {
                    if w >= n {
                        return Err(Error::usage(format!("token id {w} outside vocabulary of size {n}")));
                    }
                    data[b * n + w] = T::one();
                }
                Ok(tape.constant(Tensor::new(vec![batch, n], data)?))
            }
        }
    }

    fn linear<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{name}.weight"), params)?;
        let b = tape.param(&format!("{name}.bias"), params)?;
        tape.affine(x, w, Some(b))
    }

    /// One controller step. With `update_stack` false the stack is left as is
    /// (used for the final prediction of a sequence).
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        state: &mut RunState<T>,
        input: StepInput<'_>,
        update_stack: bool,
    ) -> Result<StepOutput> {
        let batch = state.batch;
        let hsz = self.config.hidden;
        let x = self.input(tape, params, input, batch)?;
        let mut parts = vec![x];
        parts.extend(state.reading);
        parts.push(state.h);
        let z = tape.concat(&parts)?;
        let z = self.linear(tape, params, "lstm", z)?;
        let gate = |tape: &mut Tape<T>, k: usize| tape.slice(z, k * hsz, hsz);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i);
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f);
        let g = gate(tape, 2)?;
        let g = tape.tanh(g);
        let o = gate(tape, 3)?;
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        if !tape.value(h).all_finite() || !tape.value(c).all_finite() {
            return Err(Error::numerical(format!(
                "non-finite LSTM activation at step {}",
                state.steps
            )));
        }
        let logits = self.linear(tape, params, "out", h)?;
        state.h = h;
        state.c = c;
        state.steps += 1;
        let mut actions = None;
        let mut new_reading = None;
        if update_stack {
            let r = match (&mut state.stack, self.config.stack) {
                (StackRuntime::Null, _) => None,
                (StackRuntime::Strat(st), _) => {
                    let u = self.linear(tape, params, "stack.u", h)?;
                    let u = tape.sigmoid(u);
                    let d = self.linear(tape, params, "stack.d", h)?;
                    let d = tape.sigmoid(d);
                    let v = self.linear(tape, params, "stack.v", h)?;
                    let v = tape.tanh(v);
                    actions = Some(tape.concat(&[u, d])?);
                    Some(strat_update(tape, st, u, d, v)?)
                }
                (StackRuntime::Superpos(st), StackKind::Superpos { push_hidden, .. }) => {
                    let a = self.linear(tape, params, "stack.a", h)?;
                    let a = tape.softmax(a);
                    let v = if push_hidden {
                        h
                    } else {
                        let v = self.linear(tape, params, "stack.v", h)?;
                        tape.sigmoid(v)
                    };
                    actions = Some(a);
                    Some(superpos_update(tape, st, a, v)?)
                }
                (
                    StackRuntime::Nondet(w),
                    StackKind::Nondet {
                        signature,
                        weights,
                        reading: mode,
                        ..
                    },
                ) => {
                    let raw = self.linear(tape, params, "stack.actions", h)?;
                    let delta = transition_weights(tape, raw, &signature, weights)?;
                    actions = Some(delta);
                    let alpha = w.step(tape, delta)?;
                    Some(reading(tape, alpha, &signature, mode)?)
                }
                _ => unreachable!("stack runtime always matches its kind"),
            };
            if let Some(r) = r {
                state.reading = Some(r);
                new_reading = Some(r);
            }
        }
        Ok(StepOutput {
            logits,
            actions,
            reading: new_reading,
        })
    }

    /// Score a batch of equal-length sequences followed by `eos`: predictions
    /// `y_0..y_n` target `w_1..w_n, eos`.
    pub fn score_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        batch: &[&[usize]],
        eos: usize,
    ) -> Result<SequenceRun> {
        let b = batch.len();
        let n = batch.first().map_or(0, |s| s.len());
        if b == 0 || batch.iter().any(|s| s.len() != n) {
            return Err(Error::usage(
                "score_batch needs a non-empty batch of equal-length sequences",
            ));
        }
        if eos >= self.config.output_size {
            return Err(Error::usage(format!(
                "EOS id {eos} outside output size {}",
                self.config.output_size
            )));
        }
        for s in batch {
            if let Some(&w) = s
                .iter()
                .find(|&&w| w >= self.config.output_size || w >= self.config.input_size)
            {
                return Err(Error::usage(format!("unknown token id {w}")));
            }
        }
        let mut state = self.start(tape, b)?;
        let mut steps = Vec::with_capacity(n + 1);
        let mut total: Option<Var> = None;
        let mut toks = vec![0usize; b];
        for k in 0..=n {
            let out = if k == 0 {
                self.step(tape, params, &mut state, StepInput::Start, k < n)?
            } else {
                for (j, s) in batch.iter().enumerate() {
                    toks[j] = s[k - 1];
                }
                self.step(tape, params, &mut state, StepInput::Tokens(&toks), k < n)?
            };
            let targets: Vec<usize> = batch.iter().map(|s| if k < n { s[k] } else { eos }).collect();
            let lp = tape.log_softmax(out.logits);
            let picked = tape.pick(lp, &targets)?;
            let s = tape.sum(picked);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
            steps.push(out);
        }
        let ll = total.expect("at least one step");
        Ok(SequenceRun {
            nll: tape.scale(ll, -T::one()),
            steps,
        })
    }

    /// `log p(w · EOS)` for one sequence under frozen parameters.
    pub fn log_likelihood<T: Scalar>(&self, params: &ParamStore<T>, tokens: &[usize], eos: usize) -> Result<T> {
        let mut tape = Tape::new();
        let run = self.score_batch(&mut tape, params, &[tokens], eos)?;
        Ok(-tape.value(run.nll).item())
    }

    /// Run a chunk of a token stream: `inputs[k]` and `targets[k]` hold one
    /// id per batch row, `weights[k]` masks padded positions. Returns the
    /// summed weighted negative log-likelihood.
    pub fn score_chunk<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        state: &mut RunState<T>,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        weights: &[Vec<T>],
    ) -> Result<Var> {
        if inputs.is_empty() || inputs.len() != targets.len() || inputs.len() != weights.len() {
            return Err(Error::usage(
                "chunk inputs, targets and weights must be non-empty and aligned",
            ));
        }
        let mut total: Option<Var> = None;
        for k in 0..inputs.len() {
            let out = self.step(tape, params, state, StepInput::Tokens(&inputs[k]), true)?;
            let lp = tape.log_softmax(out.logits);
            let picked = tape.pick_weighted(lp, &targets[k], Some(weights[k].clone()))?;
            let s = tape.sum(picked);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        Ok(tape.scale(total.expect("non-empty chunk"), -T::one()))
    }
}

#[cfg(test)]
mod tests;
