//! Dense 64-bit tensor arithmetic, a bit-exact seeded RNG, and a
//! finite-difference gradient checker.
//!
//! All reductions run in a fixed left-to-right order so results are
//! bit-reproducible across runs and platforms.

use serde::{Deserialize, Serialize};

use crate::error::{HkrError, Result};

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(HkrError::ShapeMismatch(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 { self.shape[1] } else { 1 }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        let cols = self.cols();
        &mut self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix-vector product `self · v` (self is [m×k], v has length k).
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let (m, k) = (self.rows(), self.cols());
        debug_assert_eq!(k, v.len());
        let mut out = vec![0.0; m];
        for r in 0..m {
            let row = &self.data[r * k..(r + 1) * k];
            let mut acc = 0.0;
            for j in 0..k {
                acc += row[j] * v[j];
            }
            out[r] = acc;
        }
        out
    }

    /// Transposed matrix-vector product `selfᵀ · v` (self is [m×k], v has length m).
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        let (m, k) = (self.rows(), self.cols());
        debug_assert_eq!(m, v.len());
        let mut out = vec![0.0; k];
        for r in 0..m {
            let row = &self.data[r * k..(r + 1) * k];
            let vr = v[r];
            for j in 0..k {
                out[j] += vr * row[j];
            }
        }
        out
    }

    /// Rank-1 accumulation: `self += u ⊗ v`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        let (m, k) = (self.rows(), self.cols());
        debug_assert_eq!(m, u.len());
        debug_assert_eq!(k, v.len());
        for r in 0..m {
            let ur = u[r];
            let row = &mut self.data[r * k..(r + 1) * k];
            for j in 0..k {
                row[j] += ur * v[j];
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }
}

/// Dense matrix product with 64-bit accumulation in fixed summation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(HkrError::ShapeMismatch(format!(
            "matmul {:?} × {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(i, p) * b.at(p, j);
            }
            *out.at_mut(i, j) = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Mul,
    Sigmoid,
    Tanh,
}

/// Pointwise tensor operation; `b` is required for the binary ops.
pub fn elementwise(op: ElemOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match op {
        ElemOp::Add | ElemOp::Mul => {
            let b = b.ok_or_else(|| {
                HkrError::InvalidArgument("binary elementwise op needs two tensors".into())
            })?;
            if a.shape != b.shape {
                return Err(HkrError::ShapeMismatch(format!(
                    "elementwise {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
            let data = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| if op == ElemOp::Add { x + y } else { x * y })
                .collect();
            Ok(Tensor { shape: a.shape.clone(), data })
        }
        ElemOp::Sigmoid => Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| sigmoid(x)).collect(),
        }),
        ElemOp::Tanh => Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| x.tanh()).collect(),
        }),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable log-softmax over a slice.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    x.iter().map(|&v| v - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    log_softmax(x).iter().map(|&v| v.exp()).collect()
}

/// splitmix64 generator. Identical seeds give identical sequences on
/// every platform; uniform floats are `(next_u64 >> 11) × 2⁻⁵³`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize
    }

    /// ±1 with equal probability.
    pub fn sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 { 1.0 } else { -1.0 }
    }

    /// Standard normal via Box-Muller (one draw per pair of uniforms).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }

    /// First `k` positions of a Fisher-Yates shuffle of 0..n.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx
    }
}

/// Central-difference gradient check. Returns the max relative error over
/// coordinates, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, x0: &[f64], analytic_grad: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if x0.len() != analytic_grad.len() {
        return Err(HkrError::ShapeMismatch(format!(
            "x0 has {} coords, analytic grad {}",
            x0.len(),
            analytic_grad.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(HkrError::InvalidArgument(format!(
                "non-finite function value at coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic_grad[i];
        // Relative error for significant components, absolute below 1e-3:
        // central-difference roundoff (~|f|·1e-16/eps) swamps the relative
        // comparison on near-zero gradient entries.
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        max_err = max_err.max((a - numeric).abs() / denom);
    }
    Ok(max_err)
}

/// 64-bit FNV-1a over a byte slice, rendered as fixed-width hex.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let i = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let out = matmul(&i, &b).unwrap();
        assert_eq!(out.data, vec![3.0, 4.0]);
    }

    #[test]
    fn matmul_hand() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data, vec![11.0]);
    }

    #[test]
    fn matmul_vs_naive_oracle() {
        // Naive triple loop, independent of the production path.
        let mut rng = SeededRng::new(7);
        let a = Tensor::from_vec(&[8, 8], (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let b = Tensor::from_vec(&[8, 8], (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let got = matmul(&a, &b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for p in 0..8 {
                    acc += a.at(i, p) * b.at(p, j);
                }
                assert_eq!(got.at(i, j), acc, "bit equality at ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(
            elementwise(ElemOp::Add, &a, Some(&z)).unwrap().data,
            vec![1.0, 2.0]
        );
        let x = Tensor::vector(vec![0.5, -1.0]);
        let y = Tensor::vector(vec![0.2, 0.4]);
        assert_eq!(
            elementwise(ElemOp::Mul, &x, Some(&y)).unwrap().data,
            vec![0.1, -0.4]
        );
        let s = elementwise(ElemOp::Sigmoid, &Tensor::vector(vec![0.0]), None).unwrap();
        assert_eq!(s.data, vec![0.5]);
    }

    #[test]
    fn splitmix64_reference_sequence() {
        let mut rng = SeededRng::new(1);
        assert_eq!(rng.next_u64(), 0x910A2DEC89025CC1);
    }

    #[test]
    fn rng_determinism() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_float_range() {
        let mut rng = SeededRng::new(3);
        for _ in 0..1000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn finite_diff_quadratic() {
        let err = finite_diff_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn finite_diff_linear() {
        let x0 = vec![0.3, -1.2, 4.0];
        let err = finite_diff_check(|x| x.iter().sum(), &x0, &[1.0, 1.0, 1.0], 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn log_softmax_normalizes() {
        let ls = log_softmax(&[1.0, 2.0, 3.0]);
        let total: f64 = ls.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn identity_matmul_is_exact(n in 1usize..6, seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let a = Tensor::from_vec(
                &[n, n],
                (0..n * n).map(|_| rng.uniform(-10.0, 10.0)).collect(),
            ).unwrap();
            let mut eye = Tensor::zeros(&[n, n]);
            for i in 0..n {
                *eye.at_mut(i, i) = 1.0;
            }
            let out = matmul(&eye, &a).unwrap();
            prop_assert_eq!(out.data, a.data);
        }

        #[test]
        fn shuffle_is_permutation(n in 1usize..50, seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let mut v: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut v);
            let mut sorted = v.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }
}
