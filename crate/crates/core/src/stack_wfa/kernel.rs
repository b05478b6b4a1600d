//! Fused forward/backward kernels for the stack-WFA recurrences.
//!
//! Log weights are stored on the tape, but the contractions run on cached
//! linear copies: every `N×N` block of a γ column keeps `exp(block − max)` and
//! its max, so a column is exponentiated once when it is created and never
//! again. Products of blocks are combined with one `exp` per block pair.

use std::rc::Rc;

use crate::autodiff::{CustomOp, GradSink, Var};
use crate::scalar::{log_add, Scalar};
use crate::tensor::Tensor;

/// Index arithmetic for a signature with `q` states and `g` stack symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub q: usize,
    pub g: usize,
    /// Number of (state, top symbol) configurations.
    pub n: usize,
    /// Number of stack operations, `2g + 1`.
    pub k: usize,
}

impl Dims {
    pub fn new(q: usize, g: usize) -> Self {
        Dims {
            q,
            g,
            n: q * g,
            k: 2 * g + 1,
        }
    }

    /// Elements of one transition tensor.
    pub fn delta_len(&self) -> usize {
        self.n * self.q * self.k
    }

    #[inline]
    pub fn d(&self, from: usize, to_state: usize, op: usize) -> usize {
        (from * self.q + to_state) * self.k + op
    }

    pub fn block(&self) -> usize {
        self.n * self.n
    }

    pub fn pop(&self) -> usize {
        2 * self.g
    }
}

/// First row (origin time) present in column `t`; −1 is the bottom-of-stack row.
pub(crate) fn first_row(t: usize, band: Option<usize>) -> isize {
    match band {
        Some(d) if t > d => (t - d) as isize,
        _ => -1,
    }
}

fn max_of<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().fold(T::neg_infinity(), T::max)
}

fn scaled<T: Scalar>(xs: &[T], out: &mut Vec<T>) -> T {
    let m = max_of(xs);
    if m == T::neg_infinity() {
        out.extend(std::iter::repeat_n(T::zero(), xs.len()));
    } else {
        out.extend(xs.iter().map(|&x| (x - m).exp()));
    }
    m
}

#[inline]
fn ln_plus<T: Scalar>(lin: T, scale: T) -> T {
    if lin <= T::zero() || scale == T::neg_infinity() {
        T::neg_infinity()
    } else {
        lin.ln() + scale
    }
}

/// `exp(x)` for a rescaling factor, guarded against overflow.
#[inline]
fn factor<T: Scalar>(x: T) -> T {
    if x.is_nan() || x == T::neg_infinity() {
        T::zero()
    } else {
        x.min(T::lit(700.0)).exp()
    }
}

/// Linear copy of one transition tensor per batch element.
pub(crate) struct DeltaCache<T> {
    pub log: Vec<T>,
    pub scale: Vec<T>,
    pub lin: Vec<T>,
}

impl<T: Scalar> DeltaCache<T> {
    pub fn new(dims: Dims, batch: usize, log: &[T]) -> Self {
        let dl = dims.delta_len();
        let mut lin = Vec::with_capacity(log.len());
        let scale = (0..batch)
            .map(|b| scaled(&log[b * dl..(b + 1) * dl], &mut lin))
            .collect();
        DeltaCache {
            log: log.to_vec(),
            scale,
            lin,
        }
    }
}

/// One γ column `γ[i→t]` for rows `i ∈ [lo, t−1]`, laid out `[B, rows, N, N]`.
pub(crate) struct ColumnCache<T> {
    pub t: usize,
    pub lo: isize,
    pub rows: usize,
    pub scale: Vec<T>,
    pub lin: Vec<T>,
    nn: usize,
}

impl<T: Scalar> ColumnCache<T> {
    pub fn new(dims: Dims, t: usize, lo: isize, batch: usize, log: &[T]) -> Self {
        let nn = dims.block();
        let rows = (t as isize - lo) as usize;
        debug_assert_eq!(log.len(), batch * rows * nn);
        let mut lin = Vec::with_capacity(log.len());
        let scale = log.chunks(nn).map(|blk| scaled(blk, &mut lin)).collect();
        ColumnCache {
            t,
            lo,
            rows,
            scale,
            lin,
            nn,
        }
    }

    #[inline]
    pub fn row(&self, i: isize) -> usize {
        debug_assert!(i >= self.lo && i < self.t as isize);
        (i - self.lo) as usize
    }

    #[inline]
    pub fn offset(&self, b: usize, i: isize) -> usize {
        (b * self.rows + self.row(i)) * self.nn
    }

    #[inline]
    pub fn block(&self, b: usize, i: isize) -> (T, &[T]) {
        let r = b * self.rows + self.row(i);
        (self.scale[r], &self.lin[r * self.nn..(r + 1) * self.nn])
    }
}

/// α[i] per batch element, laid out `[B, N]`.
pub(crate) struct AlphaCache<T> {
    pub scale: Vec<T>,
    pub lin: Vec<T>,
}

impl<T: Scalar> AlphaCache<T> {
    pub fn new(n: usize, log: &[T]) -> Self {
        let mut lin = Vec::with_capacity(log.len());
        let scale = log.chunks(n).map(|blk| scaled(blk, &mut lin)).collect();
        AlphaCache { scale, lin }
    }
}

/// Computes column `t` of γ from Δ[t] and earlier columns.
pub(crate) struct GammaStep<T> {
    pub dims: Dims,
    pub batch: usize,
    pub t: usize,
    pub lo: isize,
    pub delta: Rc<DeltaCache<T>>,
    /// Columns `k_min ..= t−1`; the op's inputs are `[Δ, those columns...]`.
    pub cols: Vec<Rc<ColumnCache<T>>>,
    pub k_min: usize,
}

impl<T: Scalar> GammaStep<T> {
    /// Columns this step reads, for a column `t ≥ 1` whose first row is `lo`.
    pub fn needed_columns(t: usize, lo: isize) -> std::ops::RangeInclusive<usize> {
        let k_min = ((lo + 1).max(0) as usize).min(t - 1);
        k_min..=t - 1
    }

    fn col(&self, k: usize) -> &ColumnCache<T> {
        &self.cols[k - self.k_min]
    }

    fn rows(&self) -> usize {
        (self.t as isize - self.lo) as usize
    }

    /// Range of pop split points `k` for the current step (empty when `t < 2`).
    fn pop_ks(&self) -> std::ops::Range<usize> {
        let lo_k = (self.lo + 1).max(0) as usize;
        if self.t >= 2 {
            lo_k..self.t - 1
        } else {
            0..0
        }
    }

    /// `M_k[(u,y), r] = Σ_{s,z} γ̃[k→t−1][(u,y),(s,z)] Δ̃[t][(s,z) → r, pop]`, unscaled.
    fn pop_messages(&self, b: usize) -> Vec<T> {
        let Dims { n, q, .. } = self.dims;
        let dl = &self.delta.lin[b * self.dims.delta_len()..];
        let prev = self.col(self.t - 1);
        let ks = self.pop_ks();
        let mut m = vec![T::zero(); ks.len() * n * q];
        for (kk, k) in ks.enumerate() {
            let (_, lin) = prev.block(b, k as isize);
            let mk = &mut m[kk * n * q..(kk + 1) * n * q];
            for uy in 0..n {
                for sz in 0..n {
                    let a = lin[uy * n + sz];
                    if a == T::zero() {
                        continue;
                    }
                    for r in 0..q {
                        mk[uy * q + r] += a * dl[self.dims.d(sz, r, self.dims.pop())];
                    }
                }
            }
        }
        m
    }

    pub fn forward(&self) -> Vec<T> {
        let Dims { n, q, g, .. } = self.dims;
        let nn = n * n;
        let rows = self.rows();
        let t = self.t;
        let mut out = vec![T::neg_infinity(); self.batch * rows * nn];
        let prev = self.col(t - 1);
        let ks = self.pop_ks();
        let mut acc = vec![T::zero(); nn];
        for b in 0..self.batch {
            let dsc = self.delta.scale[b];
            let dl = &self.delta.lin[b * self.dims.delta_len()..(b + 1) * self.dims.delta_len()];
            let dlog = &self.delta.log[b * self.dims.delta_len()..(b + 1) * self.dims.delta_len()];
            let m = self.pop_messages(b);
            for row in 0..rows {
                let i = self.lo + row as isize;
                let o = &mut out[(b * rows + row) * nn..(b * rows + row + 1) * nn];
                if i == t as isize - 1 {
                    for c in 0..n {
                        for r in 0..q {
                            for y in 0..g {
                                o[c * n + r * g + y] = dlog[self.dims.d(c, r, y)];
                            }
                        }
                    }
                }
                if i <= t as isize - 2 {
                    let (s_i, lin_i) = prev.block(b, i);
                    if s_i > T::neg_infinity() && dsc > T::neg_infinity() {
                        let sc = s_i + dsc;
                        for c in 0..n {
                            for r in 0..q {
                                for y in 0..g {
                                    let mut v = T::zero();
                                    for sz in 0..n {
                                        v += lin_i[c * n + sz] * dl[self.dims.d(sz, r, g + y)];
                                    }
                                    let idx = c * n + r * g + y;
                                    o[idx] = log_add(o[idx], ln_plus(v, sc));
                                }
                            }
                        }
                    }
                }
                if dsc == T::neg_infinity() || i + 1 > t as isize - 2 {
                    continue;
                }
                // pop: Σ_k Σ_u γ[i→k][c,(u,y)] · M_k[(u,y),r]
                let first = (i + 1) as usize;
                let big = ks.clone().skip(first - ks.start).map(|k| {
                    let (s_ik, _) = self.col(k).block(b, i);
                    s_ik + prev.block(b, k as isize).0
                });
                let s_max = big.fold(T::neg_infinity(), T::max);
                if s_max == T::neg_infinity() {
                    continue;
                }
                acc.iter_mut().for_each(|a| *a = T::zero());
                for k in first..ks.end {
                    let (s_ik, lin_ik) = self.col(k).block(b, i);
                    let f = factor(s_ik + prev.block(b, k as isize).0 - s_max);
                    if f == T::zero() {
                        continue;
                    }
                    let mk = &m[(k - ks.start) * n * q..(k - ks.start + 1) * n * q];
                    for c in 0..n {
                        for y in 0..g {
                            for r in 0..q {
                                let mut v = T::zero();
                                for u in 0..q {
                                    let uy = u * g + y;
                                    v += lin_ik[c * n + uy] * mk[uy * q + r];
                                }
                                acc[c * n + r * g + y] += f * v;
                            }
                        }
                    }
                }
                let sc = s_max + dsc;
                for idx in 0..nn {
                    o[idx] = log_add(o[idx], ln_plus(acc[idx], sc));
                }
            }
        }
        out
    }
}

/// Per block: `W̃ = G·exp(σ − O)` with `σ` the block max of `O`.
fn adjoint_ratios<T: Scalar>(out: &[T], grad: &[T], nn: usize) -> (Vec<T>, Vec<T>, Vec<bool>) {
    let blocks = out.len() / nn;
    let mut w = vec![T::zero(); out.len()];
    let mut sig = vec![T::neg_infinity(); blocks];
    let mut live = vec![false; blocks];
    for blk in 0..blocks {
        let o = &out[blk * nn..(blk + 1) * nn];
        let gr = &grad[blk * nn..(blk + 1) * nn];
        if gr.iter().all(|&x| x == T::zero()) {
            continue;
        }
        let s = max_of(o);
        if s == T::neg_infinity() {
            continue;
        }
        sig[blk] = s;
        live[blk] = true;
        for j in 0..nn {
            if o[j] > T::neg_infinity() && gr[j] != T::zero() {
                w[blk * nn + j] = gr[j] * factor(s - o[j]);
            }
        }
    }
    (w, sig, live)
}

impl<T: Scalar> CustomOp<T> for GammaStep<T> {
    fn name(&self) -> &str {
        "stack_wfa.gamma"
    }

    fn backward(&self, inputs: &[Var], output: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let Dims { n, q, g, .. } = self.dims;
        let nn = n * n;
        let dlen = self.dims.delta_len();
        let rows = self.rows();
        let t = self.t;
        let delta_var = inputs[0];
        let col_var = |k: usize| inputs[1 + k - self.k_min];
        let prev = self.col(t - 1);
        let prev_var = col_var(t - 1);
        let ks = self.pop_ks();
        let (wt, sig, live) = adjoint_ratios(output.data(), grad, nn);
        let mut gd = vec![T::zero(); self.batch * dlen];
        for b in 0..self.batch {
            let dsc = self.delta.scale[b];
            let dl = &self.delta.lin[b * dlen..(b + 1) * dlen];
            let dlog = &self.delta.log[b * dlen..(b + 1) * dlen];
            let gdb = &mut gd[b * dlen..(b + 1) * dlen];
            let m = self.pop_messages(b);
            let mut gm = vec![T::zero(); ks.len() * n * q];
            for row in 0..rows {
                let blk = b * rows + row;
                if !live[blk] {
                    continue;
                }
                let i = self.lo + row as isize;
                let w = &wt[blk * nn..(blk + 1) * nn];
                let o = &output.data()[blk * nn..(blk + 1) * nn];
                let gr = &grad[blk * nn..(blk + 1) * nn];
                let sigma = sig[blk];
                if i == t as isize - 1 {
                    for c in 0..n {
                        for r in 0..q {
                            for y in 0..g {
                                let idx = c * n + r * g + y;
                                if o[idx] > T::neg_infinity() {
                                    let d = self.dims.d(c, r, y);
                                    gdb[d] += gr[idx] * factor(dlog[d] - o[idx]);
                                }
                            }
                        }
                    }
                }
                if i <= t as isize - 2 {
                    let (s_i, lin_i) = prev.block(b, i);
                    let cf = factor(s_i + dsc - sigma);
                    if cf > T::zero() {
                        let off = prev.offset(b, i);
                        let mut gcol = sink.grad_mut(prev_var);
                        for c in 0..n {
                            for sz in 0..n {
                                let a = lin_i[c * n + sz];
                                if a == T::zero() {
                                    continue;
                                }
                                let mut tot = T::zero();
                                for r in 0..q {
                                    for y in 0..g {
                                        let d = self.dims.d(sz, r, g + y);
                                        let p = cf * a * dl[d] * w[c * n + r * g + y];
                                        gdb[d] += p;
                                        tot += p;
                                    }
                                }
                                if let Some(gc) = gcol.as_deref_mut() {
                                    gc[off + c * n + sz] += tot;
                                }
                            }
                        }
                    }
                }
                if i + 1 > t as isize - 2 {
                    continue;
                }
                for k in (i + 1) as usize..ks.end {
                    let cc = self.col(k);
                    let (s_ik, lin_ik) = cc.block(b, i);
                    let cf = factor(s_ik + prev.block(b, k as isize).0 + dsc - sigma);
                    if cf == T::zero() {
                        continue;
                    }
                    let kk = k - ks.start;
                    let mk = &m[kk * n * q..(kk + 1) * n * q];
                    let gmk = &mut gm[kk * n * q..(kk + 1) * n * q];
                    let off = cc.offset(b, i);
                    let mut gcol = sink.grad_mut(col_var(k));
                    for c in 0..n {
                        for u in 0..q {
                            for y in 0..g {
                                let uy = u * g + y;
                                let a = lin_ik[c * n + uy];
                                if a == T::zero() {
                                    continue;
                                }
                                let mut tot = T::zero();
                                for r in 0..q {
                                    let p = cf * a * w[c * n + r * g + y];
                                    gmk[uy * q + r] += p;
                                    tot += p * mk[uy * q + r];
                                }
                                if let Some(gc) = gcol.as_deref_mut() {
                                    gc[off + c * n + uy] += tot;
                                }
                            }
                        }
                    }
                }
            }
            // Push the message adjoints through M_k = γ[k→t−1] · Δ_pop.
            for (kk, k) in ks.clone().enumerate() {
                let gmk = &gm[kk * n * q..(kk + 1) * n * q];
                if gmk.iter().all(|&x| x == T::zero()) {
                    continue;
                }
                let (_, lin) = prev.block(b, k as isize);
                let off = prev.offset(b, k as isize);
                let mut gcol = sink.grad_mut(prev_var);
                for uy in 0..n {
                    for sz in 0..n {
                        let a = lin[uy * n + sz];
                        if a == T::zero() {
                            continue;
                        }
                        let mut tot = T::zero();
                        for r in 0..q {
                            let d = self.dims.d(sz, r, self.dims.pop());
                            let p = a * dl[d] * gmk[uy * q + r];
                            gdb[d] += p;
                            tot += p;
                        }
                        if let Some(gc) = gcol.as_deref_mut() {
                            gc[off + uy * n + sz] += tot;
                        }
                    }
                }
            }
        }
        if let Some(gdv) = sink.grad_mut(delta_var) {
            for (a, &b) in gdv.iter_mut().zip(&gd) {
                *a += b;
            }
        }
    }
}

/// Computes α[t] = Σ_{i ∈ [lo, t−1]} Σ_c α[i][c] γ[i→t][c, ·].
pub(crate) struct AlphaStep<T> {
    pub n: usize,
    pub batch: usize,
    pub lo: isize,
    /// α[lo ..= t−1]; the op's inputs are `[those alphas..., column t]`.
    pub alphas: Vec<Rc<AlphaCache<T>>>,
    pub column: Rc<ColumnCache<T>>,
}

impl<T: Scalar> AlphaStep<T> {
    pub fn forward(&self) -> Vec<T> {
        let n = self.n;
        let mut out = vec![T::neg_infinity(); self.batch * n];
        let mut acc = vec![T::zero(); n];
        for b in 0..self.batch {
            let e: Vec<T> = self
                .alphas
                .iter()
                .enumerate()
                .map(|(j, a)| a.scale[b] + self.column.block(b, self.lo + j as isize).0)
                .collect();
            let s_max = max_of(&e);
            if s_max == T::neg_infinity() {
                continue;
            }
            acc.iter_mut().for_each(|a| *a = T::zero());
            for (j, a) in self.alphas.iter().enumerate() {
                let f = factor(e[j] - s_max);
                if f == T::zero() {
                    continue;
                }
                let (_, lin) = self.column.block(b, self.lo + j as isize);
                let al = &a.lin[b * n..(b + 1) * n];
                for c in 0..n {
                    let ac = al[c] * f;
                    if ac == T::zero() {
                        continue;
                    }
                    for ry in 0..n {
                        acc[ry] += ac * lin[c * n + ry];
                    }
                }
            }
            for ry in 0..n {
                out[b * n + ry] = ln_plus(acc[ry], s_max);
            }
        }
        out
    }
}

impl<T: Scalar> CustomOp<T> for AlphaStep<T> {
    fn name(&self) -> &str {
        "stack_wfa.alpha"
    }

    fn backward(&self, inputs: &[Var], output: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let n = self.n;
        let col_var = inputs[self.alphas.len()];
        let (wt, sig, live) = adjoint_ratios(output.data(), grad, n);
        for b in 0..self.batch {
            if !live[b] {
                continue;
            }
            let w = &wt[b * n..(b + 1) * n];
            for (j, a) in self.alphas.iter().enumerate() {
                let i = self.lo + j as isize;
                let (s_it, lin) = self.column.block(b, i);
                let cf = factor(a.scale[b] + s_it - sig[b]);
                if cf == T::zero() {
                    continue;
                }
                let al = &a.lin[b * n..(b + 1) * n];
                let off = self.column.offset(b, i);
                let mut ga_buf = vec![T::zero(); n];
                {
                    let mut gcol = sink.grad_mut(col_var);
                    for c in 0..n {
                        let ac = al[c] * cf;
                        if ac == T::zero() {
                            continue;
                        }
                        let mut tot = T::zero();
                        for ry in 0..n {
                            let p = ac * lin[c * n + ry] * w[ry];
                            tot += p;
                            if let Some(gc) = gcol.as_deref_mut() {
                                gc[off + c * n + ry] += p;
                            }
                        }
                        ga_buf[c] = tot;
                    }
                }
                if let Some(ga) = sink.grad_mut(inputs[j]) {
                    for c in 0..n {
                        ga[b * n + c] += ga_buf[c];
                    }
                }
            }
        }
    }
}
