//! Memory-limited stack WFA: γ entries of span greater than `D` are dropped,
//! which makes each step cost O(D²) and lets the state be carried across
//! truncated-BPTT chunk boundaries.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stack_wfa::kernel::first_row;
use crate::stack_wfa::{reading, transition_weights, PdaSignature, ReadingMode, StackWfa, WeightMode};

/// Band width and modes for a banded stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BandConfig {
    pub d: usize,
    pub signature: PdaSignature,
    pub weights: WeightMode,
    pub reading: ReadingMode,
}

impl BandConfig {
    pub fn new(d: usize, signature: PdaSignature, weights: WeightMode, reading: ReadingMode) -> Result<Self> {
        if d == 0 {
            return Err(Error::usage("band D must be at least 1"));
        }
        Ok(BandConfig {
            d,
            signature,
            weights,
            reading,
        })
    }
}

/// Detached values of everything a banded stack still needs: γ columns as
/// `(t, [B, rows, N, N])` and α entries as `(i, [B, N])`, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowState<T> {
    pub signature: PdaSignature,
    pub band: usize,
    pub batch: usize,
    pub time: usize,
    pub columns: Vec<(usize, Vec<T>)>,
    pub alphas: Vec<(isize, Vec<T>)>,
}

impl<T: Scalar> WindowState<T> {
    /// Number of stored scalars.
    pub fn num_scalars(&self) -> usize {
        self.columns.iter().map(|(_, c)| c.len()).sum::<usize>()
            + self.alphas.iter().map(|(_, a)| a.len()).sum::<usize>()
    }

    /// Rows of the γ column ending at `t`.
    pub fn column_rows(&self, t: usize) -> usize {
        (t as isize - first_row(t, Some(self.band))) as usize
    }

    /// Check that the stored slices are exactly those the next step reads.
    pub fn validate(&self) -> Result<()> {
        let n = self.signature.num_configs();
        let next = self.time + 1;
        let lo = first_row(next, Some(self.band));
        let k_min = ((lo + 1).max(0) as usize).min(self.time);
        let want_cols: Vec<usize> = (k_min..=self.time).collect();
        let got_cols: Vec<usize> = self.columns.iter().map(|(t, _)| *t).collect();
        let want_alphas: Vec<isize> = (lo..=self.time as isize).collect();
        let got_alphas: Vec<isize> = self.alphas.iter().map(|(i, _)| *i).collect();
        if want_cols != got_cols || want_alphas != got_alphas {
            return Err(Error::data(format!(
                "window at step {} holds columns {:?} and α {:?}; expected {:?} and {:?}",
                self.time, got_cols, got_alphas, want_cols, want_alphas
            )));
        }
        for (t, c) in &self.columns {
            if c.len() != self.batch * self.column_rows(*t) * n * n {
                return Err(Error::data(format!("window column {t} has {} values", c.len())));
            }
        }
        for (i, a) in &self.alphas {
            if a.len() != self.batch * n {
                return Err(Error::data(format!("window α[{i}] has {} values", a.len())));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> StackWfa<T> {
    /// Values of the retained slices, with no link to the tape.
    pub fn window(&self, tape: &Tape<T>) -> Result<WindowState<T>> {
        let band = self
            .band
            .ok_or_else(|| Error::usage("only a banded stack has a window"))?;
        Ok(WindowState {
            signature: self.sig,
            band,
            batch: self.batch,
            time: self.t,
            columns: self
                .columns
                .iter()
                .map(|(t, e)| (*t, tape.value(e.var).data().to_vec()))
                .collect(),
            alphas: self
                .alphas
                .iter()
                .map(|(i, e)| (*i, tape.value(e.var).data().to_vec()))
                .collect(),
        })
    }

    /// Rebuild a banded stack on `tape` from detached window values.
    pub fn from_window(tape: &mut Tape<T>, w: &WindowState<T>) -> Result<Self> {
        w.validate()?;
        let mut s = StackWfa {
            sig: w.signature,
            batch: w.batch,
            band: Some(w.band),
            t: w.time,
            columns: Default::default(),
            alphas: Default::default(),
            evict: true,
        };
        for (t, c) in &w.columns {
            s.push_column(tape, *t, first_row(*t, Some(w.band)), c.clone());
        }
        for (i, a) in &w.alphas {
            s.push_alpha(tape, *i, a.clone());
        }
        Ok(s)
    }
}

/// Same stack with its retained slices cut off from the tape, so no gradient
/// flows back past this point. Values are unchanged.
pub fn detach_window<T: Scalar>(tape: &mut Tape<T>, wfa: &StackWfa<T>) -> Result<StackWfa<T>> {
    let w = wfa.window(tape)?;
    StackWfa::from_window(tape, &w)
}

/// One banded step from raw controller outputs `[B, delta_len]`: transition
/// weights, the new α, and the stack reading.
pub fn banded_step<T: Scalar>(
    tape: &mut Tape<T>,
    wfa: &mut StackWfa<T>,
    config: &BandConfig,
    affine: Var,
) -> Result<(Var, Var)> {
    if wfa.band != Some(config.d) || wfa.sig != config.signature {
        return Err(Error::usage(format!(
            "window has band {:?} and signature {:?}; config wants D={} and {:?}",
            wfa.band, wfa.sig, config.d, config.signature
        )));
    }
    let delta = transition_weights(tape, affine, &config.signature, config.weights)?;
    let alpha = wfa.step(tape, delta)?;
    let r = reading(tape, alpha, &config.signature, config.reading)?;
    Ok((alpha, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::stack_wfa::{forward_alphas, reading_of, StackOp};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_deltas(sig: &PdaSignature, n: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_vec((0..sig.delta_len()).map(|_| rng.gen_range(-2.0..2.0)).collect()))
            .collect()
    }

    fn banded_alphas(sig: PdaSignature, d: usize, ds: &[Tensor<f64>]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let mut wfa = StackWfa::new(&mut tape, sig, 1, Some(d)).unwrap();
        ds.iter()
            .map(|x| {
                let v = tape.constant(x.clone().reshape(&[1, sig.delta_len()]).unwrap());
                let a = wfa.step(&mut tape, v).unwrap();
                tape.value(a).data().to_vec()
            })
            .collect()
    }

    #[test]
    fn wide_band_is_exact() {
        let sig = PdaSignature::new(2, 2).unwrap();
        let ds = random_deltas(&sig, 7, 4);
        let full = forward_alphas(&sig, &ds).unwrap();
        for d in [7, 9] {
            for (t, a) in banded_alphas(sig, d, &ds).iter().enumerate() {
                assert_eq!(a.as_slice(), full[t + 1].data());
            }
        }
    }

    #[test]
    fn unit_band_keeps_push_edges_only() {
        let sig = PdaSignature::new(2, 2).unwrap();
        let ds = random_deltas(&sig, 5, 6);
        let got = banded_alphas(sig, 1, &ds);
        let n = sig.num_configs();
        for t in 2..=5 {
            for r in 0..2 {
                for y in 0..2 {
                    let terms: Vec<f64> = (0..n)
                        .map(|c| got[t - 2][c] + ds[t - 1].data()[sig.delta_index(c / 2, c % 2, r, StackOp::Push(y))])
                        .collect();
                    let want = crate::scalar::logsumexp_slice(&terms);
                    assert!((got[t - 1][r * 2 + y] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn window_memory_is_bounded() {
        let sig = PdaSignature::new(1, 2).unwrap();
        let ds = random_deltas(&sig, 40, 1);
        let mut tape = Tape::new();
        let mut wfa = StackWfa::new(&mut tape, sig, 1, Some(5)).unwrap();
        let mut sizes = Vec::new();
        for x in &ds {
            let v = tape.constant(x.clone().reshape(&[1, sig.delta_len()]).unwrap());
            wfa.step(&mut tape, v).unwrap();
            sizes.push((wfa.held_scalars(), wfa.window(&tape).unwrap().num_scalars()));
        }
        assert!(sizes[10..].iter().all(|s| *s == sizes[10]));
    }

    #[test]
    fn window_round_trip_continues_identically() {
        let sig = PdaSignature::new(2, 2).unwrap();
        let ds = random_deltas(&sig, 12, 7);
        let straight = banded_alphas(sig, 4, &ds);
        let mut tape = Tape::new();
        let mut wfa = StackWfa::new(&mut tape, sig, 1, Some(4)).unwrap();
        for x in &ds[..6] {
            let v = tape.constant(x.clone().reshape(&[1, sig.delta_len()]).unwrap());
            wfa.step(&mut tape, v).unwrap();
        }
        let w = wfa.window(&tape).unwrap();
        w.validate().unwrap();
        let mut tape2 = Tape::new();
        let mut resumed = StackWfa::from_window(&mut tape2, &w).unwrap();
        for (t, x) in ds.iter().enumerate().skip(6) {
            let v = tape2.constant(x.clone().reshape(&[1, sig.delta_len()]).unwrap());
            let a = resumed.step(&mut tape2, v).unwrap();
            assert_eq!(tape2.value(a).data(), straight[t].as_slice());
        }
    }

    #[test]
    fn old_columns_are_never_read() {
        let sig = PdaSignature::new(2, 2).unwrap();
        let d = 3;
        let ds = random_deltas(&sig, 10, 8);
        let run = |mutate: Option<usize>| {
            let mut tape = Tape::new();
            let mut wfa = StackWfa::new(&mut tape, sig, 1, Some(d)).unwrap();
            wfa.evict = false;
            let mut out = Vec::new();
            for (t, x) in ds.iter().enumerate() {
                if t == 7 {
                    if let Some(k) = mutate {
                        wfa.overwrite_column(&mut tape, k, 1.5);
                    }
                }
                let v = tape.constant(x.clone().reshape(&[1, sig.delta_len()]).unwrap());
                let a = wfa.step(&mut tape, v).unwrap();
                out.push(reading_of(&sig, tape.value(a).data(), ReadingMode::Joint));
            }
            out
        };
        let base = run(None);
        // next column is 8, so columns 8−D−1 and older are out of reach
        assert_eq!(run(Some(4)), base);
        assert_eq!(run(Some(2)), base);
        assert_ne!(run(Some(6)), base);
    }

    #[test]
    fn detach_stops_gradients_but_keeps_values() {
        let sig = PdaSignature::new(1, 2).unwrap();
        let cfg = BandConfig::new(3, sig, WeightMode::Normalized, ReadingMode::Symbols).unwrap();
        let mut p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..6 {
            p.insert(
                format!("a{i}"),
                Tensor::new(
                    vec![1, sig.delta_len()],
                    (0..sig.delta_len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            );
        }
        let run = |detach: bool| {
            let mut tape = Tape::new();
            let mut wfa = StackWfa::new(&mut tape, sig, 1, Some(3)).unwrap();
            let mut last = None;
            for i in 0..6 {
                if detach && i == 3 {
                    wfa = detach_window(&mut tape, &wfa).unwrap();
                }
                let a = tape.param(&format!("a{i}"), &p).unwrap();
                last = Some(banded_step(&mut tape, &mut wfa, &cfg, a).unwrap().1);
            }
            let l = tape.pick(last.unwrap(), &[1]).unwrap();
            (tape.value(l).item(), tape.backward(l, &p).unwrap())
        };
        let (v0, g0) = run(false);
        let (v1, g1) = run(true);
        assert_eq!(v0, v1);
        assert!(g0.get("a0").unwrap().data().iter().any(|&x| x != 0.0));
        for i in 0..3 {
            assert!(g1.get(&format!("a{i}")).unwrap().data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(g0.get("a5").unwrap(), g1.get("a5").unwrap());
    }

    #[test]
    fn config_and_window_errors() {
        let sig = PdaSignature::new(1, 1).unwrap();
        assert!(BandConfig::new(0, sig, WeightMode::Normalized, ReadingMode::Joint).is_err());
        let mut tape = Tape::<f64>::new();
        let full = StackWfa::new(&mut tape, sig, 1, None).unwrap();
        assert!(matches!(full.window(&tape), Err(Error::Usage(_))));
        let banded = StackWfa::new(&mut tape, sig, 1, Some(2)).unwrap();
        let mut w = banded.window(&tape).unwrap();
        w.alphas.remove(0);
        assert!(matches!(StackWfa::from_window(&mut tape, &w), Err(Error::Data(_))));
        let cfg = BandConfig::new(3, sig, WeightMode::Normalized, ReadingMode::Joint).unwrap();
        let mut wfa = StackWfa::new(&mut tape, sig, 1, Some(2)).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            banded_step(&mut tape, &mut wfa, &cfg, x),
            Err(Error::Usage(_))
        ));
    }
}
