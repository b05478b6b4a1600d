//! Dense row-major tensors and log-domain reductions.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::usage(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::usage(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// True when no element is NaN or +∞ (−∞ is allowed: it is the log of zero weight).
    pub fn is_valid_log(&self) -> bool {
        self.data.iter().all(|x| !x.is_nan() && *x != T::infinity())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Log-semiring sum along `axis`: `out[j] = log Σ_k exp(self[j,k])`.
    /// All-(−∞) slices reduce to −∞.
    pub fn logsumexp(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::usage(format!(
                "axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                buf.clear();
                buf.extend((0..len).map(|k| self.data[(o * len + k) * inner + i]));
                out.push(crate::scalar::logsumexp_slice(&buf));
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// Log-semiring product (element-wise addition of log weights).
    pub fn log_mul(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::usage(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| {
                    if a == T::neg_infinity() || b == T::neg_infinity() {
                        T::neg_infinity()
                    } else {
                        a + b
                    }
                })
                .collect(),
        })
    }

    /// Swap two axes (general permutation helper used by tests and oracles).
    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        if a >= self.rank() || b >= self.rank() {
            return Err(Error::usage("transpose axis out of range"));
        }
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let old_strides = strides(&self.shape);
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; self.rank()];
        for _ in 0..self.numel() {
            let off: usize = idx.iter().enumerate().map(|(d, &i)| i * old_strides[perm[d]]).sum();
            out.push(self.data[off]);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < new_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor {
            shape: new_shape,
            data: out,
        })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// (product of axes before, axis length, product of axes after)
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NEG: f64 = f64::NEG_INFINITY;

    #[test]
    fn logsumexp_trivial_cases() {
        let t = Tensor::from_vec(vec![NEG, NEG]);
        assert_eq!(t.logsumexp(0).unwrap().item(), NEG);
        let t = Tensor::from_vec(vec![0.0]);
        assert_eq!(t.logsumexp(0).unwrap().item(), 0.0);
        let t = Tensor::from_vec(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
        assert!((t.logsumexp(0).unwrap().item() - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_rejects_bad_axis() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(t.logsumexp(2), Err(Error::Usage(_))));
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        let t = Tensor::from_vec(vec![1e4f64, 1e4]);
        assert!((t.logsumexp(0).unwrap().item() - (1e4 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn neg_inf_is_absorbing_and_identity() {
        let a = Tensor::from_vec(vec![NEG, 1.0]);
        let b = Tensor::from_vec(vec![3.0, NEG]);
        let p = a.log_mul(&b).unwrap();
        assert_eq!(p.data(), &[NEG, NEG]);
        let s = Tensor::new(vec![2, 2], vec![NEG, 2.5, NEG, -1.0]).unwrap();
        let r = s.logsumexp(0).unwrap();
        assert_eq!(r.data()[0], NEG);
        assert!((r.data()[1] - (2.5f64.exp() + (-1f64).exp()).ln()).abs() < 1e-14);
    }

    fn small_tensor(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn logsumexp_commutes_across_axes(v in small_tensor(24)) {
            let t = Tensor::new(vec![2, 3, 4], v).unwrap();
            let a = t.logsumexp(0).unwrap().logsumexp(0).unwrap();
            let b = t.logsumexp(1).unwrap().logsumexp(0).unwrap();
            let tt = t.transpose(0, 1).unwrap();
            let c = tt.logsumexp(0).unwrap().logsumexp(0).unwrap();
            for k in 0..4 {
                prop_assert!((a.data()[k] - b.data()[k]).abs() < 1e-12);
                prop_assert!((a.data()[k] - c.data()[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn log_mul_distributes_over_logsumexp(v in small_tensor(6), w in -5.0f64..5.0) {
            // w ⊗ (⊕_k x_k) = ⊕_k (w ⊗ x_k)
            let t = Tensor::new(vec![2, 3], v).unwrap();
            let lhs = t.logsumexp(1).unwrap().map(|x| x + w);
            let shifted = t.log_mul(&Tensor::filled(&[2, 3], w)).unwrap();
            let rhs = shifted.logsumexp(1).unwrap();
            for k in 0..2 {
                prop_assert!((lhs.data()[k] - rhs.data()[k]).abs() < 1e-12);
            }
        }
    }
}
