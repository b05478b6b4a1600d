//! Randomized comparison of the dynamic program against the brute-force oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::oracle::{brute_force_marginals, posterior_transition_probs, Posterior};
use super::{forward_alphas, reading_of, PdaSignature, ReadingMode, StackWfa};

/// Signatures exercised by [`oracle_check`]: `|Q| ∈ {1,2}`, `|Γ| ∈ {1,2,3}`.
pub const ORACLE_SIGNATURES: [(usize, usize); 6] = [(1, 1), (1, 2), (1, 3), (2, 1), (2, 2), (2, 3)];

/// Longest sequence used for gradient-posterior instances.
pub const MAX_GRADIENT_STEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleCheck {
    pub max_n: usize,
    /// Random weight draws per signature.
    pub trials: usize,
    /// Random gradient-posterior instances in total.
    pub gradient_trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    /// Largest absolute log-space difference over every α entry.
    pub max_alpha_error: f64,
    /// Largest absolute difference over both stack readings.
    pub max_reading_error: f64,
    pub gradient_instances: usize,
    pub max_gradient_error: f64,
}

impl OracleReport {
    pub fn max_log_error(&self) -> f64 {
        self.max_alpha_error.max(self.max_reading_error)
    }
}

fn log_abs_diff(x: f64, y: f64) -> f64 {
    if x == f64::NEG_INFINITY && y == f64::NEG_INFINITY {
        0.0
    } else {
        (x - y).abs()
    }
}

/// Draws `trials` weight sequences of length `max_n` for every signature and
/// compares α after every step and both readings with explicit enumeration;
/// then checks `∂ log α[n][r,y] / ∂ log Δ[i]` against the enumerated
/// posterior on `gradient_trials` instances.
pub fn oracle_check(opts: &OracleCheck) -> Result<OracleReport> {
    if opts.max_n == 0 || opts.max_n > super::oracle::MAX_ORACLE_STEPS {
        return Err(Error::usage(format!(
            "--max-n must be in 1..={}",
            super::oracle::MAX_ORACLE_STEPS
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = OracleReport {
        instances: 0,
        max_alpha_error: 0.0,
        max_reading_error: 0.0,
        gradient_instances: 0,
        max_gradient_error: 0.0,
    };
    for &(q, g) in &ORACLE_SIGNATURES {
        let sig = PdaSignature::new(q, g)?;
        for _ in 0..opts.trials {
            let ds = random_deltas(&sig, opts.max_n, &mut rng);
            let dp = forward_alphas(&sig, &ds)?;
            let bf = brute_force_marginals(&sig, &ds)?;
            for t in 0..=opts.max_n {
                for (&a, &b) in dp[t].data().iter().zip(bf.alphas[t].data()) {
                    report.max_alpha_error = report.max_alpha_error.max(log_abs_diff(a, b));
                }
                let pairs = [
                    (ReadingMode::Symbols, &bf.symbol_readings[t]),
                    (ReadingMode::Joint, &bf.joint_readings[t]),
                ];
                for (mode, expect) in pairs {
                    for (&a, &b) in reading_of(&sig, dp[t].data(), mode).iter().zip(expect) {
                        report.max_reading_error = report.max_reading_error.max((a - b).abs());
                    }
                }
            }
            report.instances += 1;
        }
    }
    let steps = opts.max_n.min(MAX_GRADIENT_STEPS);
    while report.gradient_instances < opts.gradient_trials {
        let (q, g) = ORACLE_SIGNATURES[rng.gen_range(0..ORACLE_SIGNATURES.len())];
        let sig = PdaSignature::new(q, g)?;
        let n = rng.gen_range(1..=steps);
        let ds = random_deltas(&sig, n, &mut rng);
        let target = rng.gen_range(0..sig.num_configs());
        let post = match posterior_transition_probs(&sig, &ds, n, (target / g, target % g))? {
            Posterior::Probabilities(p) => p,
            Posterior::Empty => continue,
        };
        let mut store = ParamStore::new();
        for (i, d) in ds.iter().enumerate() {
            store.insert(format!("delta.{}", i + 1), d.clone().reshape(&[1, d.numel()])?);
        }
        let mut tape = Tape::new();
        let mut wfa = StackWfa::new(&mut tape, sig, 1, None)?;
        let mut a = wfa.alpha();
        for i in 1..=n {
            let d = tape.param(&format!("delta.{i}"), &store)?;
            a = wfa.step(&mut tape, d)?;
        }
        let out = tape.pick(a, &[target])?;
        let grads = tape.backward(out, &store)?;
        for i in 1..=n {
            let gr = grads.get(&format!("delta.{i}"))?;
            for (&x, &y) in gr.data().iter().zip(&post[i - 1]) {
                report.max_gradient_error = report.max_gradient_error.max((x - y).abs());
            }
        }
        report.gradient_instances += 1;
    }
    Ok(report)
}

fn random_deltas(sig: &PdaSignature, n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    (0..n)
        .map(|_| Tensor::from_vec((0..sig.delta_len()).map(|_| rng.gen_range(-3.0..3.0)).collect()))
        .collect()
}
