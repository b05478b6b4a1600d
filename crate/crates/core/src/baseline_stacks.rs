//! Continuous baseline stacks: the stratification stack (fractional-thickness
//! layers) and the superposition stack (interpolated shifted copies).

use crate::autodiff::{CustomOp, GradSink, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stratification stack: pushed vectors `V[i]` (each `[B, m]`) with thicknesses `s` (`[B, k]`).
#[derive(Debug, Clone)]
pub struct StratStack {
    pub(crate) values: Vec<Var>,
    pub(crate) thickness: Option<Var>,
    pub(crate) batch: usize,
    pub(crate) m: usize,
}

impl StratStack {
    pub fn new(batch: usize, m: usize) -> Self {
        StratStack {
            values: Vec::new(),
            thickness: None,
            batch,
            m,
        }
    }

    pub fn depth(&self) -> usize {
        self.values.len()
    }

    pub fn thickness(&self) -> Option<Var> {
        self.thickness
    }
}

/// `s'[i] = relu(s[i] − relu(u − Σ_{j>i} s[j]))` for old layers, then `s'[k] = d`.
struct Thickness {
    k: usize,
    batch: usize,
}

fn thickness_forward<T: Scalar>(s: &[T], u: &[T], d: &[T], k: usize, batch: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * (k + 1)];
    for b in 0..batch {
        let mut above = T::zero();
        for i in (0..k).rev() {
            let si = s[b * k + i];
            let shave = (u[b] - above).max(T::zero());
            out[b * (k + 1) + i] = (si - shave).max(T::zero());
            above += si;
        }
        out[b * (k + 1) + k] = d[b];
    }
    out
}

impl<T: Scalar> CustomOp<T> for Thickness {
    fn name(&self) -> &str {
        "strat.thickness"
    }

    fn backward(&self, inputs: &[Var], _out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (k, batch) = (self.k, self.batch);
        let (s_var, u_var, d_var) = (inputs[0], inputs[1], inputs[2]);
        let s = sink.value(s_var).data().to_vec();
        let u = sink.value(u_var).data().to_vec();
        let mut gs = vec![T::zero(); batch * k];
        let mut gu = vec![T::zero(); batch];
        for b in 0..batch {
            // suffix sums of s above each layer
            let mut above = vec![T::zero(); k];
            let mut acc = T::zero();
            for i in (0..k).rev() {
                above[i] = acc;
                acc += s[b * k + i];
            }
            // adjoint flowing into Σ_{j>i} s[j], accumulated from the top
            let mut g_above = vec![T::zero(); k];
            for i in 0..k {
                let g = grad[b * (k + 1) + i];
                let a = u[b] - above[i];
                let z = s[b * k + i] - a.max(T::zero());
                if z > T::zero() {
                    gs[b * k + i] += g;
                    if a > T::zero() {
                        gu[b] -= g;
                        g_above[i] += g;
                    }
                }
            }
            let mut run = T::zero();
            for j in 0..k {
                // s[j] sits above every layer i < j
                gs[b * k + j] += run;
                run += g_above[j];
            }
        }
        if let Some(g) = sink.grad_mut(s_var) {
            g.iter_mut().zip(&gs).for_each(|(a, &b)| *a += b);
        }
        if let Some(g) = sink.grad_mut(u_var) {
            g.iter_mut().zip(&gu).for_each(|(a, &b)| *a += b);
        }
        if let Some(g) = sink.grad_mut(d_var) {
            for b in 0..batch {
                g[b] += grad[b * (k + 1) + k];
            }
        }
    }
}

/// Reading coefficients `min(s[i], relu(1 − Σ_{j>i} s[j]))` for one batch row.
pub fn strat_coefficients<T: Scalar>(s: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); s.len()];
    let mut above = T::zero();
    for i in (0..s.len()).rev() {
        c[i] = s[i].min((T::one() - above).max(T::zero()));
        above += s[i];
    }
    c
}

struct StratRead {
    k: usize,
    m: usize,
    batch: usize,
}

impl<T: Scalar> CustomOp<T> for StratRead {
    fn name(&self) -> &str {
        "strat.read"
    }

    fn backward(&self, inputs: &[Var], _out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (k, m, batch) = (self.k, self.m, self.batch);
        let s = sink.value(inputs[0]).data().to_vec();
        let vals: Vec<Vec<T>> = (0..k).map(|i| sink.value(inputs[1 + i]).data().to_vec()).collect();
        let mut gs = vec![T::zero(); batch * k];
        let mut gv = vec![vec![T::zero(); batch * m]; k];
        for b in 0..batch {
            let sb = &s[b * k..(b + 1) * k];
            let g = &grad[b * m..(b + 1) * m];
            let mut above = vec![T::zero(); k];
            let mut acc = T::zero();
            for i in (0..k).rev() {
                above[i] = acc;
                acc += sb[i];
            }
            let mut g_above = vec![T::zero(); k];
            for i in 0..k {
                let cap = T::one() - above[i];
                let c = sb[i].min(cap.max(T::zero()));
                let gc: T = (0..m).map(|j| g[j] * vals[i][b * m + j]).sum();
                for j in 0..m {
                    gv[i][b * m + j] += c * g[j];
                }
                if sb[i] <= cap.max(T::zero()) {
                    gs[b * k + i] += gc;
                } else if cap > T::zero() {
                    g_above[i] -= gc;
                }
            }
            let mut run = T::zero();
            for j in 0..k {
                gs[b * k + j] += run;
                run += g_above[j];
            }
        }
        if let Some(g) = sink.grad_mut(inputs[0]) {
            g.iter_mut().zip(&gs).for_each(|(a, &b)| *a += b);
        }
        for i in 0..k {
            if let Some(g) = sink.grad_mut(inputs[1 + i]) {
                g.iter_mut().zip(&gv[i]).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

/// Push `v` with thickness `d` after popping `u` worth of thickness; returns the reading `[B, m]`.
/// `u` and `d` are `[B, 1]`, `v` is `[B, m]`.
pub fn strat_update<T: Scalar>(tape: &mut Tape<T>, stack: &mut StratStack, u: Var, d: Var, v: Var) -> Result<Var> {
    let (b, m) = (stack.batch, stack.m);
    if tape.value(u).numel() != b || tape.value(d).numel() != b || tape.shape(v) != [b, m] {
        return Err(Error::usage(format!(
            "stratification update expects u, d of {b} elements and v of shape [{b}, {m}]"
        )));
    }
    let k = stack.depth();
    let s_old = match stack.thickness {
        Some(s) => s,
        None => tape.constant(Tensor::zeros(&[b, 0])),
    };
    let value = thickness_forward(
        tape.value(s_old).data(),
        tape.value(u).data(),
        tape.value(d).data(),
        k,
        b,
    );
    let s_new = tape.custom(
        vec![s_old, u, d],
        Tensor::new(vec![b, k + 1], value)?,
        Box::new(Thickness { k, batch: b }),
    );
    stack.values.push(v);
    stack.thickness = Some(s_new);
    let k = k + 1;
    let mut r = vec![T::zero(); b * m];
    {
        let s = tape.value(s_new).data();
        for bi in 0..b {
            let c = strat_coefficients(&s[bi * k..(bi + 1) * k]);
            for (i, &ci) in c.iter().enumerate() {
                let vi = tape.value(stack.values[i]).data();
                for j in 0..m {
                    r[bi * m + j] += ci * vi[bi * m + j];
                }
            }
        }
    }
    let mut inputs = vec![s_new];
    inputs.extend(&stack.values);
    Ok(tape.custom(
        inputs,
        Tensor::new(vec![b, m], r)?,
        Box::new(StratRead { k, m, batch: b }),
    ))
}

/// Superposition stack stored as `[B, rows·m]`; row 0 is the staging slot.
#[derive(Debug, Clone)]
pub struct SuperposStack {
    pub(crate) cells: Var,
    pub(crate) rows: usize,
    pub(crate) time: usize,
    pub(crate) batch: usize,
    pub(crate) m: usize,
    /// Keep at most this many cells below the staging slot.
    pub(crate) max_depth: Option<usize>,
}

impl SuperposStack {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, batch: usize, m: usize, max_depth: Option<usize>) -> Self {
        SuperposStack {
            cells: tape.constant(Tensor::zeros(&[batch, m])),
            rows: 1,
            time: 0,
            batch,
            m,
            max_depth,
        }
    }

    /// Rebuild from detached cell values `[B, rows·m]` at a given time step.
    pub fn from_values<T: Scalar>(
        tape: &mut Tape<T>,
        cells: Tensor<T>,
        time: usize,
        m: usize,
        max_depth: Option<usize>,
    ) -> Result<Self> {
        let shape = cells.shape().to_vec();
        if shape.len() != 2 || m == 0 || !shape[1].is_multiple_of(m) || shape[1] == 0 {
            return Err(Error::data(format!(
                "superposition cells of shape {shape:?} with m={m}"
            )));
        }
        Ok(SuperposStack {
            rows: shape[1] / m,
            cells: tape.constant(cells),
            time,
            batch: shape[0],
            m,
            max_depth,
        })
    }

    pub fn cells(&self) -> Var {
        self.cells
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn time(&self) -> usize {
        self.time
    }

    /// Cell 1 (zero while the stack has no such row).
    pub fn reading<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        if self.rows < 2 {
            Ok(tape.constant(Tensor::zeros(&[self.batch, self.m])))
        } else {
            tape.slice(self.cells, self.m, self.m)
        }
    }
}

struct SuperposOp {
    rows_in: usize,
    rows_out: usize,
    /// Whether the last output row is the freshly appended zero row.
    fresh_last: bool,
    m: usize,
    batch: usize,
}

impl SuperposOp {
    fn forward<T: Scalar>(&self, prev: &[T], a: &[T], v: &[T]) -> Vec<T> {
        let (ri, ro, m) = (self.rows_in, self.rows_out, self.m);
        let mut out = vec![T::zero(); self.batch * ro * m];
        for b in 0..self.batch {
            let p = |i: usize, j: usize| if i < ri { prev[(b * ri + i) * m + j] } else { T::zero() };
            let (ap, an, ao) = (a[b * 3], a[b * 3 + 1], a[b * 3 + 2]);
            for j in 0..m {
                out[(b * ro) * m + j] = v[b * m + j];
            }
            let last = if self.fresh_last { ro - 1 } else { ro };
            for i in 1..last {
                for j in 0..m {
                    out[(b * ro + i) * m + j] = ap * p(i - 1, j) + an * p(i, j) + ao * p(i + 1, j);
                }
            }
        }
        out
    }
}

impl<T: Scalar> CustomOp<T> for SuperposOp {
    fn name(&self) -> &str {
        "superpos.step"
    }

    fn backward(&self, inputs: &[Var], _out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (ri, ro, m) = (self.rows_in, self.rows_out, self.m);
        let prev = sink.value(inputs[0]).data().to_vec();
        let a = sink.value(inputs[1]).data().to_vec();
        let mut gp = vec![T::zero(); prev.len()];
        let mut ga = vec![T::zero(); a.len()];
        let mut gv = vec![T::zero(); self.batch * m];
        let last = if self.fresh_last { ro - 1 } else { ro };
        for b in 0..self.batch {
            for j in 0..m {
                gv[b * m + j] += grad[(b * ro) * m + j];
            }
            for i in 1..last {
                for j in 0..m {
                    let g = grad[(b * ro + i) * m + j];
                    for (o, src) in [(0usize, i - 1), (1, i), (2, i + 1)] {
                        if src < ri {
                            let idx = (b * ri + src) * m + j;
                            ga[b * 3 + o] += g * prev[idx];
                            gp[idx] += g * a[b * 3 + o];
                        }
                    }
                }
            }
        }
        for (v, g) in [(inputs[0], gp), (inputs[1], ga), (inputs[2], gv)] {
            if let Some(dst) = sink.grad_mut(v) {
                dst.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
            }
        }
    }
}

/// Apply actions `a = (push, noop, pop)` (`[B, 3]`) and pushed value `v` (`[B, m]`);
/// returns the reading `[B, m]`.
pub fn superpos_update<T: Scalar>(tape: &mut Tape<T>, stack: &mut SuperposStack, a: Var, v: Var) -> Result<Var> {
    let (b, m) = (stack.batch, stack.m);
    if tape.shape(a) != [b, 3] || tape.shape(v) != [b, m] {
        return Err(Error::usage(format!(
            "superposition update expects actions [{b}, 3] and value [{b}, {m}], got {:?} and {:?}",
            tape.shape(a),
            tape.shape(v)
        )));
    }
    let t = stack.time + 1;
    let full = t + 1;
    let cap = stack.max_depth.map_or(usize::MAX, |d| d + 1);
    let rows_out = full.min(cap);
    let op = SuperposOp {
        rows_in: stack.rows,
        rows_out,
        fresh_last: rows_out == full,
        m,
        batch: b,
    };
    let value = op.forward(
        tape.value(stack.cells).data(),
        tape.value(a).data(),
        tape.value(v).data(),
    );
    stack.cells = tape.custom(
        vec![stack.cells, a, v],
        Tensor::new(vec![b, rows_out * m], value)?,
        Box::new(op),
    );
    stack.rows = rows_out;
    stack.time = t;
    stack.reading(tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(tape: &mut Tape<f64>, shape: &[usize], v: Vec<f64>) -> Var {
        tape.constant(Tensor::new(shape.to_vec(), v).unwrap())
    }

    #[test]
    fn strat_single_push_reads_value() {
        let mut tape = Tape::new();
        let mut st = StratStack::new(1, 2);
        let (u, d, v) = (
            c(&mut tape, &[1, 1], vec![0.0]),
            c(&mut tape, &[1, 1], vec![1.0]),
            c(&mut tape, &[1, 2], vec![0.3, -0.7]),
        );
        let r = strat_update(&mut tape, &mut st, u, d, v).unwrap();
        assert_eq!(tape.value(r).data(), &[0.3, -0.7]);
    }

    #[test]
    fn strat_two_half_pushes_mix() {
        let mut tape = Tape::new();
        let mut st = StratStack::new(1, 1);
        let z = c(&mut tape, &[1, 1], vec![0.0]);
        let h = c(&mut tape, &[1, 1], vec![0.5]);
        let v1 = c(&mut tape, &[1, 1], vec![2.0]);
        let v2 = c(&mut tape, &[1, 1], vec![6.0]);
        strat_update(&mut tape, &mut st, z, h, v1).unwrap();
        let r = strat_update(&mut tape, &mut st, z, h, v2).unwrap();
        assert_eq!(tape.value(r).data(), &[0.5 * 6.0 + 0.5 * 2.0]);
    }

    #[test]
    fn strat_pop_then_push() {
        let mut tape = Tape::new();
        let mut st = StratStack::new(1, 1);
        let z = c(&mut tape, &[1, 1], vec![0.0]);
        let one = c(&mut tape, &[1, 1], vec![1.0]);
        let v1 = c(&mut tape, &[1, 1], vec![2.0]);
        let v2 = c(&mut tape, &[1, 1], vec![5.0]);
        strat_update(&mut tape, &mut st, z, one, v1).unwrap();
        let r = strat_update(&mut tape, &mut st, one, one, v2).unwrap();
        assert_eq!(tape.value(r).data(), &[5.0]);
        assert_eq!(tape.value(st.thickness().unwrap()).data(), &[0.0, 1.0]);
    }

    #[test]
    fn superpos_examples() {
        let mut tape = Tape::new();
        let mut st = SuperposStack::new(&mut tape, 1, 2, None);
        let push = c(&mut tape, &[1, 3], vec![1.0, 0.0, 0.0]);
        let v1 = c(&mut tape, &[1, 2], vec![0.2, 0.9]);
        let v2 = c(&mut tape, &[1, 2], vec![0.4, 0.1]);
        let r1 = superpos_update(&mut tape, &mut st, push, v1).unwrap();
        assert_eq!(tape.value(r1).data(), &[0.0, 0.0]);
        let r2 = superpos_update(&mut tape, &mut st, push, v2).unwrap();
        assert_eq!(tape.value(r2).data(), &[0.2, 0.9]);
        let noop = c(&mut tape, &[1, 3], vec![0.0, 1.0, 0.0]);
        for _ in 0..4 {
            let r = superpos_update(&mut tape, &mut st, noop, v1).unwrap();
            assert_eq!(tape.value(r).data(), &[0.2, 0.9]);
        }
    }

    #[test]
    fn superpos_depth_limit_caps_rows() {
        let mut tape = Tape::new();
        let mut st = SuperposStack::new(&mut tape, 1, 1, Some(3));
        let push = c(&mut tape, &[1, 3], vec![1.0, 0.0, 0.0]);
        for k in 0..8 {
            let v = c(&mut tape, &[1, 1], vec![k as f64 + 1.0]);
            superpos_update(&mut tape, &mut st, push, v).unwrap();
        }
        assert_eq!(st.rows(), 4);
        assert_eq!(tape.value(st.cells()).data(), &[8.0, 7.0, 6.0, 5.0]);
    }

    /// Discrete list stack replaying the same case equations with one-hot actions.
    fn replay(script: &[(usize, f64)]) -> Vec<f64> {
        let mut s: Vec<f64> = vec![0.0];
        let mut out = Vec::new();
        for (t, &(a, v)) in script.iter().enumerate() {
            let t = t + 1;
            let mut n = vec![0.0; t + 1];
            n[0] = v;
            for i in 1..t {
                let src = match a {
                    0 => i as isize - 1,
                    1 => i as isize,
                    _ => i as isize + 1,
                };
                n[i] = s.get(src as usize).copied().unwrap_or(0.0);
            }
            s = n;
            out.push(s.get(1).copied().unwrap_or(0.0));
        }
        out
    }

    proptest! {
        #[test]
        fn superpos_matches_discrete_replay(script in proptest::collection::vec((0usize..3, -1.0f64..1.0), 1..=10)) {
            let want = replay(&script);
            let mut tape = Tape::new();
            let mut st = SuperposStack::new(&mut tape, 1, 1, None);
            for (k, &(a, v)) in script.iter().enumerate() {
                let mut onehot = vec![0.0; 3];
                onehot[a] = 1.0;
                let av = c(&mut tape, &[1, 3], onehot);
                let vv = c(&mut tape, &[1, 1], vec![v]);
                let r = superpos_update(&mut tape, &mut st, av, vv).unwrap();
                prop_assert_eq!(tape.value(r).data()[0], want[k]);
            }
        }

        #[test]
        fn strat_coefficients_bounded(s in proptest::collection::vec(0.0f64..1.0, 0..12)) {
            let c = strat_coefficients(&s);
            prop_assert!(c.iter().all(|&x| x >= 0.0));
            prop_assert!(c.iter().sum::<f64>() <= 1.0 + 1e-12);
        }

        #[test]
        fn thickness_stays_non_negative(us in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..12)) {
            let mut tape = Tape::new();
            let mut st = StratStack::new(1, 1);
            for (u, d) in us {
                let (u, d, v) = (c(&mut tape, &[1, 1], vec![u]), c(&mut tape, &[1, 1], vec![d]), c(&mut tape, &[1, 1], vec![1.0]));
                strat_update(&mut tape, &mut st, u, d, v).unwrap();
                prop_assert!(tape.value(st.thickness().unwrap()).data().iter().all(|&x| x >= 0.0));
            }
        }
    }

    fn random_store(rng: &mut ChaCha8Rng, steps: usize, b: usize, m: usize) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        for t in 0..steps {
            let mut put = |name: String, shape: Vec<usize>, lo: f64, hi: f64| {
                let n = shape.iter().product();
                p.insert(
                    name,
                    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap(),
                );
            };
            put(format!("u{t}"), vec![b, 1], -1.5, 1.5);
            put(format!("d{t}"), vec![b, 1], -1.5, 1.5);
            put(format!("v{t}"), vec![b, m], -1.0, 1.0);
            put(format!("a{t}"), vec![b, 3], -1.0, 1.0);
            put(format!("w{t}"), vec![b, m], -1.0, 1.0);
        }
        p
    }

    #[test]
    fn strat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_store(&mut rng, 6, 2, 3);
        let f = |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
            let mut st = StratStack::new(2, 3);
            let mut tot = None;
            for t in 0..6 {
                let u = tape.param(&format!("u{t}"), p)?;
                let u = tape.sigmoid(u);
                let d = tape.param(&format!("d{t}"), p)?;
                let d = tape.sigmoid(d);
                let v = tape.param(&format!("v{t}"), p)?;
                let v = tape.tanh(v);
                let r = strat_update(tape, &mut st, u, d, v)?;
                let w = tape.param(&format!("w{t}"), p)?;
                let s = tape.mul(r, w)?;
                let s = tape.sum(s);
                tot = Some(match tot {
                    None => s,
                    Some(x) => tape.add(x, s)?,
                });
            }
            Ok(tot.unwrap())
        };
        let rep = check_gradients(f, &p, 1e-6).unwrap();
        assert!(rep.max_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn superpos_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_store(&mut rng, 6, 2, 3);
        for depth in [None, Some(2)] {
            let f = |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
                let mut st = SuperposStack::new(tape, 2, 3, depth);
                let mut tot = None;
                for t in 0..6 {
                    let a = tape.param(&format!("a{t}"), p)?;
                    let a = tape.softmax(a);
                    let v = tape.param(&format!("v{t}"), p)?;
                    let v = tape.sigmoid(v);
                    let r = superpos_update(tape, &mut st, a, v)?;
                    let w = tape.param(&format!("w{t}"), p)?;
                    let s = tape.mul(r, w)?;
                    let s = tape.sum(s);
                    tot = Some(match tot {
                        None => s,
                        Some(x) => tape.add(x, s)?,
                    });
                }
                Ok(tot.unwrap())
            };
            let rep = check_gradients(f, &p, 1e-6).unwrap();
            assert!(rep.max_error < 1e-4, "{rep:?}");
        }
    }
}
