//! Dense row-major matrices, seeded random streams and the classification loss.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense 2-D array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite matrix entry {} at index {bad}",
                data[bad]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, x))
            .collect())
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape(format!(
                "transposed matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    /// `self += scale · u vᵀ`
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::shape(format!(
                "outer product {}x{} into {}x{}",
                u.len(),
                v.len(),
                self.rows,
                self.cols
            )));
        }
        let cols = self.cols;
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            for (m, &vc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(v) {
                *m += s * vc;
            }
        }
        Ok(())
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Frobenius distance `sqrt(Σ (m1 − m2)²)`.
pub fn frob_distance(m1: &Matrix, m2: &Matrix) -> Result<f64> {
    m1.check_same_shape(m2, "frob_distance")?;
    Ok(m1
        .data
        .iter()
        .zip(&m2.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// `softmax(logits) − onehot(label)` with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let c = logits.len();
    if c < 2 {
        return Err(Error::input(format!("need at least 2 classes, got {c}")));
    }
    if label >= c {
        return Err(Error::input(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// What a random stream is used for. Part of the stream identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamTag {
    Synthetic,
    Subsample,
    Partition,
    Split,
    Init,
    Pretrain,
    LocalTrain,
    Test,
}

impl StreamTag {
    fn code(self) -> u64 {
        match self {
            StreamTag::Synthetic => 1,
            StreamTag::Subsample => 2,
            StreamTag::Partition => 3,
            StreamTag::Split => 4,
            StreamTag::Init => 5,
            StreamTag::Pretrain => 6,
            StreamTag::LocalTrain => 7,
            StreamTag::Test => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub tag: StreamTag,
    pub client: u64,
    pub round: u64,
}

impl StreamId {
    pub fn new(tag: StreamTag, client: u64, round: u64) -> Self {
        Self { tag, client, round }
    }
}

/// A named random stream: the generator key is a SHA-256 digest of the
/// experiment seed and the stream id, so each (purpose, client, round)
/// triple gets its own sequence regardless of the order streams are opened.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"fedlora-stream-v1");
        hasher.update(seed.to_le_bytes());
        hasher.update(id.tag.code().to_le_bytes());
        hasher.update(id.client.to_le_bytes());
        hasher.update(id.round.to_le_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            seed,
            id,
            rng: ChaCha12Rng::from_seed(key),
        }
    }

    pub fn named(seed: u64, tag: StreamTag, client: u64, round: u64) -> Self {
        Self::new(seed, StreamId::new(tag, client, round))
    }

    /// Opens a sibling stream under the same experiment seed.
    pub fn derive(&self, tag: StreamTag, client: u64, round: u64) -> Self {
        Self::named(self.seed, tag, client, round)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn frob_distance_examples() {
        let a = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(frob_distance(&a, &a).unwrap(), 0.0);

        let b = m(&[vec![-2.0, -2.0], vec![3.0, 4.0]]);
        assert!((frob_distance(&a, &b).unwrap() - 5.0).abs() < 1e-15);

        let x = m(&[vec![2.0]]);
        let y = m(&[vec![-1.0]]);
        assert_eq!(frob_distance(&x, &y).unwrap(), 3.0);
    }

    #[test]
    fn frob_distance_shape_mismatch() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(frob_distance(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = softmax_cross_entropy(&[0.3; 5], 2).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);

        let (loss, grad) = softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!((grad[0] + 0.5).abs() < 1e-15 && (grad[1] - 0.5).abs() < 1e-15);

        // ln(1 + e^-10) = 4.539889921686465e-5 (50-digit mpmath evaluation)
        let (loss, _) = softmax_cross_entropy(&[10.0, 0.0], 0).unwrap();
        assert!((loss - 4.539_889_921_686_465e-5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 1.0], 2),
            Err(Error::Input(_))
        ));
        assert!(softmax_cross_entropy(&[0.0], 0).is_err());
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn matvec_and_transpose() {
        let a = m(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(a.matvec_t(&[1.0, 1.0]).unwrap(), vec![5.0, 7.0, 9.0]);
        assert!(a.matvec(&[1.0]).is_err());
    }

    #[test]
    fn rng_stream_reproducible() {
        let id = StreamId::new(StreamTag::LocalTrain, 3, 17);
        let mut a = RngStream::new(42, id);
        let mut b = RngStream::new(42, id);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_streams_differ_by_id() {
        let mut a = RngStream::named(42, StreamTag::LocalTrain, 0, 0);
        let mut b = RngStream::named(42, StreamTag::LocalTrain, 1, 0);
        let mut c = RngStream::named(42, StreamTag::Split, 0, 0);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_ne!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn rng_stream_uniform_moments() {
        // distinct streams should each look uniform; mean of 10^4 draws within 4 sigma of 0.5
        for client in 0..4 {
            let mut s = RngStream::named(7, StreamTag::Test, client, 0);
            let mean = (0..10_000).map(|_| s.uniform()).sum::<f64>() / 10_000.0;
            assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12f64).sqrt() / 100.0);
        }
    }

    fn mat_strategy() -> impl Strategy<Value = (Matrix, Matrix, Matrix)> {
        (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
            let v = || proptest::collection::vec(-10.0f64..10.0, r * c);
            (v(), v(), v()).prop_map(move |(a, b, d)| {
                (
                    Matrix::new(r, c, a).unwrap(),
                    Matrix::new(r, c, b).unwrap(),
                    Matrix::new(r, c, d).unwrap(),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn frob_distance_is_a_metric((a, b, c) in mat_strategy()) {
            let ab = frob_distance(&a, &b).unwrap();
            let ba = frob_distance(&b, &a).unwrap();
            let bc = frob_distance(&b, &c).unwrap();
            let ac = frob_distance(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn cross_entropy_grad_sums_to_zero(
            logits in proptest::collection::vec(-30.0f64..30.0, 2..12),
            pick in 0usize..100,
            shift in -50.0f64..50.0,
        ) {
            let label = pick % logits.len();
            let (loss, grad) = softmax_cross_entropy(&logits, label).unwrap();
            prop_assert!(grad.iter().sum::<f64>().abs() <= 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let (loss2, _) = softmax_cross_entropy(&shifted, label).unwrap();
            prop_assert!((loss - loss2).abs() <= 1e-9);
        }
    }
}
