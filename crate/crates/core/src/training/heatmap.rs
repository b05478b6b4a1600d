use crate::autodiff::Tape;
use crate::controller::StackKind;
use crate::error::{Error, Result};
use crate::stack_wfa::{PdaSignature, StackOp};

use super::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionType {
    Push,
    Replace,
    Pop,
}

impl ActionType {
    pub const ALL: [ActionType; 3] = [ActionType::Push, ActionType::Replace, ActionType::Pop];

    fn index(self) -> usize {
        match self {
            ActionType::Push => 0,
            ActionType::Replace => 1,
            ActionType::Pop => 2,
        }
    }
}

/// Mean transition weight per action type (push, replace, pop) for one
/// batch row of log Δ.
pub fn action_type_weights(sig: &PdaSignature, log_delta: &[f64]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = [0usize; 3];
    for q in 0..sig.num_states {
        for x in 0..sig.num_symbols {
            for r in 0..sig.num_states {
                for op in 0..sig.num_ops() {
                    let o = sig.op_of(op);
                    let ty = match o {
                        StackOp::Push(_) => ActionType::Push,
                        StackOp::Replace(_) => ActionType::Replace,
                        StackOp::Pop => ActionType::Pop,
                    };
                    sum[ty.index()] += log_delta[sig.delta_index(q, x, r, o)].exp();
                    count[ty.index()] += 1;
                }
            }
        }
    }
    [0, 1, 2].map(|i| sum[i] / count[i] as f64)
}

/// Correct action type after reading each symbol of a marked-reversal
/// string: push before the marker, replace on it, pop after it. Entry `k`
/// labels the action taken after reading `w[..=k]`.
pub fn marked_reversal_labels(w: &[usize], marker: usize) -> Vec<ActionType> {
    let mid = w.iter().position(|&t| t == marker).unwrap_or(w.len());
    (0..w.len())
        .map(|k| match k.cmp(&mid) {
            std::cmp::Ordering::Less => ActionType::Push,
            std::cmp::Ordering::Equal => ActionType::Replace,
            std::cmp::Ordering::Greater => ActionType::Pop,
        })
        .collect()
}

/// For each string, the normalized weight of the correct action type at each
/// position that updates the stack (all but the last symbol). Rows are ragged
/// when string lengths differ.
pub fn action_heatmap(
    model: &Model,
    strings: &[Vec<usize>],
    labels: &dyn Fn(&[usize]) -> Vec<ActionType>,
) -> Result<Vec<Vec<f64>>> {
    let sig = match model.controller.config().stack {
        StackKind::Nondet { signature, .. } => signature,
        _ => {
            return Err(Error::usage(format!(
                "action heatmaps need a nondeterministic-stack model, not {}",
                model.family
            )))
        }
    };
    let mut rows = Vec::with_capacity(strings.len());
    for w in strings {
        let lab = labels(w);
        let mut tape = Tape::new();
        let run = model
            .controller
            .score_batch(&mut tape, &model.params, &[w.as_slice()], model.eos)?;
        let mut row = Vec::new();
        // step k reads w[k-1]; its actions exist for k < |w|
        for k in 1..w.len() {
            let a = run.steps[k].actions.expect("nondeterministic stacks emit actions");
            let tw = action_type_weights(&sig, tape.value(a).data());
            let total: f64 = tw.iter().sum();
            row.push(tw[lab[k - 1].index()] / total);
        }
        rows.push(row);
    }
    Ok(rows)
}
