//! Central finite-difference checks against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Magnitudes below this compare by absolute rather than relative error.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error (absolute below [`ABS_FALLBACK`]).
    pub max_error: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn eval<T, F>(f: &F, point: &ParamStore<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, point)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::usage("gradient check needs a scalar-valued function"));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::numerical(format!("function value {y} at probe point")));
    }
    Ok(y)
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < ABS_FALLBACK {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Compare the tape gradient of `f` at `point` against a five-point central-difference stencil
/// with the given `step`, over every coordinate of every parameter.
pub fn check_gradients<T, F>(f: F, point: &ParamStore<T>, step: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    check_gradients_sampled(f, point, step, None, 0)
}

/// As [`check_gradients`], probing at most `max_per_param` randomly chosen
/// coordinates of each parameter tensor (chosen deterministically from `seed`).
pub fn check_gradients_sampled<T, F>(
    f: F,
    point: &ParamStore<T>,
    step: T,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, point)?;
    let grads = tape.backward(out, point)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe = point.clone();
    for name in point.names() {
        let n = point.get(&name)?.numel();
        let coords: Vec<usize> = match max_per_param {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(&name)?.data().to_vec();
        for i in coords {
            let orig = point.get(&name)?.data()[i];
            let mut at = |k: f64| -> Result<f64> {
                probe.get_mut(&name)?.data_mut()[i] = orig + step * T::lit(k);
                eval(&f, &probe).map(|y| y.as_f64())
            };
            let (up1, down1, up2, down2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * step.as_f64());
            let a = analytic[i].as_f64();
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(err);
                if err >= report.max_error {
                    report.worst = Some((name.clone(), i));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
