//! Dense tensor core: row-major f32 storage, shape algebra, a seed-stable
//! RNG, and the reference matmul used as the correctness oracle by the
//! sparse kernels.

use crate::error::{CoreError, Result};
use rayon::prelude::*;

/// Row-major n-dimensional f32 array, rank 1..=4. The universal value
/// carrier of the crate. Immutable after construction except through
/// explicit `data_mut` access; safe to share read-only across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(CoreError::Rank(format!(
                "rank must be in [1, 4], got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::InvalidArgument(format!(
                "all extents must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// 2-D identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(CoreError::Rank(format!(
                "expected rank 2, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(CoreError::Rank(format!(
                "expected rank 3, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(CoreError::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        let (_, c) = (self.shape[0], self.shape[1]);
        self.data[i * c + j]
    }

    /// Euclidean norm of the whole buffer.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

// ---------------------------------------------------------------------------
// Reference kernels
// ---------------------------------------------------------------------------

/// Dense matrix product `[M,K] x [K,N] -> [M,N]`.
///
/// Accumulation is f32 with a fixed k-ascending reduction order per output
/// element, so results are bit-identical regardless of thread count. This is
/// the oracle every sparse kernel is compared against.
pub fn matmul_dense(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(CoreError::ShapeMismatch(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    // Partition output rows across workers; each cell is written by exactly
    // one worker and reduces over k in ascending order.
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ar = &ad[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    });
    DenseTensor::new(vec![m, n], out)
}

/// Transpose. Rank 2 swaps the axes; rank 3 transposes the trailing two
/// extents per leading index.
pub fn transpose2d(a: &DenseTensor) -> Result<DenseTensor> {
    match a.shape()[..] {
        [r, c] => {
            let mut out = vec![0f32; r * c];
            let ad = a.data();
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = ad[i * c + j];
                }
            }
            DenseTensor::new(vec![c, r], out)
        }
        [b, r, c] => {
            let mut out = vec![0f32; b * r * c];
            let ad = a.data();
            for bi in 0..b {
                let src = &ad[bi * r * c..(bi + 1) * r * c];
                let dst = &mut out[bi * r * c..(bi + 1) * r * c];
                for i in 0..r {
                    for j in 0..c {
                        dst[j * r + i] = src[i * c + j];
                    }
                }
            }
            DenseTensor::new(vec![b, c, r], out)
        }
        _ => Err(CoreError::Rank(format!(
            "transpose expects rank 2 or 3, got {:?}",
            a.shape()
        ))),
    }
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

/// Seed-stable generator with 64 bits of state (SplitMix64 steps).
///
/// The stream is a pure function of the seed: identical seeds yield
/// bit-identical tensors across runs and thread counts. Normal samples come
/// from a Box-Muller transform evaluated in f64 and truncated to f32, two
/// uniform draws per sample, no cached second value.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive an independent stream for a labeled sub-task (e.g. one epoch's
    /// shuffle) without consuming this stream.
    pub fn derive(&self, salt: u64) -> Rng {
        let mut r = Rng::new(self.state ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        r.next_u64();
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        // SplitMix64 (Steele et al.), public domain reference constants.
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_f32(&mut self) -> f32 {
        self.next_f64() as f32
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling to avoid modulo bias.
        let n64 = n as u64;
        let zone = u64::MAX - u64::MAX % n64;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n64) as usize;
            }
        }
    }

    /// Standard normal draw (f64 Box-Muller, cosine branch).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Tensor of normal draws with the given mean and standard deviation.
pub fn rng_normal(rng: &mut Rng, shape: &[usize], mean: f32, std: f32) -> Result<DenseTensor> {
    if std < 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "std must be >= 0, got {std}"
        )));
    }
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| mean + std * rng.normal() as f32)
        .collect();
    DenseTensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> DenseTensor {
        rng_normal(rng, shape, 0.0, 1.0).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut rng = Rng::new(7);
        let m = random_tensor(&mut rng, &[3, 3]);
        let got = matmul_dense(&DenseTensor::eye(3), &m).unwrap();
        assert_eq!(got, m);
    }

    #[test]
    fn zeros_times_anything_is_zeros() {
        let mut rng = Rng::new(11);
        let z = DenseTensor::zeros(&[2, 4]);
        let b = random_tensor(&mut rng, &[4, 5]);
        let got = matmul_dense(&z, &b).unwrap();
        assert_eq!(got, DenseTensor::zeros(&[2, 5]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = random_tensor(&mut rng, &[7, 5]);
        let b = random_tensor(&mut rng, &[5, 3]);
        let got = matmul_dense(&a, &b).unwrap();
        // Naive oracle with identical reduction order: exact bit equality.
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0f32;
                for p in 0..5 {
                    acc += a.at2(i, p) * b.at2(p, j);
                }
                assert_eq!(got.at2(i, j).to_bits(), acc.to_bits(), "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_identity_association() {
        let mut rng = Rng::new(5);
        let a = random_tensor(&mut rng, &[4, 6]);
        let b = random_tensor(&mut rng, &[6, 2]);
        let ai = matmul_dense(&a, &DenseTensor::eye(6)).unwrap();
        let left = matmul_dense(&ai, &b).unwrap();
        let right = matmul_dense(&a, &b).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DenseTensor::zeros(&[2, 3]);
        let b = DenseTensor::zeros(&[4, 2]);
        assert!(matmul_dense(&a, &b).is_err());
    }

    #[test]
    fn matmul_deterministic_across_repeats() {
        let mut rng = Rng::new(21);
        let a = random_tensor(&mut rng, &[33, 17]);
        let b = random_tensor(&mut rng, &[17, 29]);
        let first = matmul_dense(&a, &b).unwrap();
        for _ in 0..3 {
            assert_eq!(matmul_dense(&a, &b).unwrap(), first);
        }
    }

    #[test]
    fn transpose_involution() {
        let mut rng = Rng::new(9);
        let a = random_tensor(&mut rng, &[5, 8]);
        let back = transpose2d(&transpose2d(&a).unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn transpose_row_vector() {
        let a = DenseTensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = transpose2d(&a).unwrap();
        assert_eq!(t.shape(), &[4, 1]);
        assert_eq!(t.data(), a.data());
    }

    #[test]
    fn transpose_index_oracle() {
        let mut rng = Rng::new(13);
        let a = random_tensor(&mut rng, &[3, 4]);
        let t = transpose2d(&a).unwrap();
        assert_eq!(t.at2(2, 1).to_bits(), a.at2(1, 2).to_bits());
    }

    #[test]
    fn transpose_batched() {
        let a = DenseTensor::new(
            vec![2, 2, 3],
            (0..12).map(|v| v as f32).collect(),
        )
        .unwrap();
        let t = transpose2d(&a).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2]);
        // batch 1, original [i=1][j=2] = 11 -> transposed [j=2][i=1]
        assert_eq!(t.data()[1 * 6 + 2 * 2 + 1], 11.0);
    }

    #[test]
    fn transpose_rank_error() {
        let a = DenseTensor::zeros(&[4]);
        assert!(transpose2d(&a).is_err());
    }

    #[test]
    fn rng_same_seed_identical() {
        let mut r1 = Rng::new(42);
        let mut r2 = Rng::new(42);
        let a = rng_normal(&mut r1, &[100], 0.0, 1.0).unwrap();
        let b = rng_normal(&mut r2, &[100], 0.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rng_zero_std_is_constant() {
        let mut rng = Rng::new(1);
        let t = rng_normal(&mut rng, &[64], 2.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn rng_negative_std_rejected() {
        let mut rng = Rng::new(1);
        assert!(rng_normal(&mut rng, &[4], 0.0, -1.0).is_err());
    }

    #[test]
    fn rng_moments_at_one_million_draws() {
        let mut rng = Rng::new(1);
        let n = 1_000_000usize;
        let mut sum = 0f64;
        let mut sumsq = 0f64;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let std = (sumsq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((0.99..=1.01).contains(&std), "std {std}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(77);
        let mut xs: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn tensor_invariants_enforced() {
        assert!(DenseTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseTensor::new(vec![0, 3], vec![]).is_err());
        assert!(DenseTensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }
}
