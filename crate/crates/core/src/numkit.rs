//! Seeded random sources and the dense linear-algebra helpers shared by the
//! rest of the crate.
//!
//! Matrices are plain `ndarray` arrays of `f64`; the helpers here add the
//! dimension checks and the sampling routines the experiments need.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, dim_err, Result};

pub type DenseMatrix = Array2<f64>;
pub type DenseVector = Array1<f64>;

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id selecting an independent keystream,
/// so two streams with the same seed but different ids never overlap.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream with the same seed and a derived id. Children of
    /// distinct `(stream_id, tag)` pairs are distinct streams.
    pub fn child(&self, tag: u64) -> Self {
        let id = self
            .stream_id
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ tag.wrapping_add(0xD1B5_4A32_D192_ED03);
        Self::new(self.seed, id)
    }

    pub fn gauss(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        // p outside [0,1] is clamped by the comparison
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Matrix with i.i.d. `N(0, std²)` entries.
pub fn gauss_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return arg_err(format!("gauss_matrix needs positive dims, got {rows}x{cols}"));
    }
    if !(std > 0.0) || !std.is_finite() {
        return arg_err(format!("gauss_matrix std must be positive, got {std}"));
    }
    Ok(Array2::from_shape_simple_fn((rows, cols), || std * rng.gauss()))
}

pub fn gauss_vector(d: usize, std: f64, rng: &mut RngStream) -> Result<DenseVector> {
    if d == 0 {
        return arg_err("gauss_vector needs d >= 1");
    }
    if !(std > 0.0) || !std.is_finite() {
        return arg_err(format!("gauss_vector std must be positive, got {std}"));
    }
    Ok(Array1::from_shape_simple_fn(d, || std * rng.gauss()))
}

/// Uniform sample from `{-1, +1}^d`.
pub fn rademacher_vector(d: usize, rng: &mut RngStream) -> Result<DenseVector> {
    if d == 0 {
        return arg_err("rademacher_vector needs d >= 1");
    }
    Ok(Array1::from_shape_simple_fn(d, || if rng.next_u32() & 1 == 1 { 1.0 } else { -1.0 }))
}

/// `n` rows drawn uniformly from `{-1, +1}^d`.
pub fn rademacher_matrix(n: usize, d: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
    if n == 0 || d == 0 {
        return arg_err("rademacher_matrix needs positive dims");
    }
    Ok(Array2::from_shape_simple_fn((n, d), || if rng.next_u32() & 1 == 1 { 1.0 } else { -1.0 }))
}

/// `n` rows drawn uniformly from the unit sphere in R^d.
pub fn sphere_samples(n: usize, d: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
    let mut x = gauss_matrix(n, d, 1.0, rng)?;
    for mut row in x.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    Ok(x)
}

pub fn matvec(a: ArrayView2<f64>, x: ArrayView1<f64>) -> Result<DenseVector> {
    if a.ncols() != x.len() {
        return dim_err(format!("matvec {}x{} by {}", a.nrows(), a.ncols(), x.len()));
    }
    Ok(a.dot(&x))
}

pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<DenseMatrix> {
    if a.ncols() != b.nrows() {
        return dim_err(format!(
            "matmul {}x{} by {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        ));
    }
    Ok(a.dot(&b))
}

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return dim_err(format!("dot {} by {}", a.len(), b.len()));
    }
    Ok(a.dot(&b))
}

pub fn l2norm(a: ArrayView1<f64>) -> f64 {
    a.dot(&a).sqrt()
}

/// Per-row Euclidean norms.
pub fn row_norms(a: ArrayView2<f64>) -> DenseVector {
    a.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: ArrayView2<f64>, iters: usize) -> f64 {
    let n = a.ncols();
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    // a deterministic but non-degenerate start
    for (i, x) in v.iter_mut().enumerate() {
        *x *= 1.0 + 0.01 * ((i * 7919) % 101) as f64;
    }
    let mut sigma = 0.0;
    for _ in 0..iters {
        let av = a.dot(&v);
        let atav = a.t().dot(&av);
        let norm = l2norm(atav.view());
        if norm == 0.0 {
            return 0.0;
        }
        v = atav / norm;
        sigma = l2norm(a.dot(&v).view());
    }
    sigma
}

/// Random orthogonal matrix via modified Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal(d: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
    let mut q = gauss_matrix(d, d, 1.0, rng)?;
    for j in 0..d {
        for k in 0..j {
            let proj = q.column(j).dot(&q.column(k));
            let qk = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-proj, &qk);
        }
        let norm = l2norm(q.column(j));
        q.column_mut(j).mapv_inplace(|x| x / norm);
    }
    Ok(q)
}

pub fn all_finite(a: &DenseMatrix) -> bool {
    a.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_std_rejected() {
        let mut rng = RngStream::new(1, 0);
        assert!(gauss_matrix(2, 2, 0.0, &mut rng).is_err());
        assert!(gauss_matrix(0, 2, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gauss_mean_concentrates() {
        let mut rng = RngStream::new(7, 0);
        let std = 1.0 / 1000f64.sqrt();
        let m = gauss_matrix(1000, 1000, std, &mut rng).unwrap();
        let mean = m.mean().unwrap();
        assert!(mean.abs() < 3.0 * std / 1000.0, "mean {mean}");
        let var = m.mapv(|x| x * x).mean().unwrap();
        // variance within 5 sigma of std^2 at n = 1e6
        let sd_var = std * std * (2.0f64 / 1e6).sqrt();
        assert!((var - std * std).abs() < 5.0 * sd_var);
    }

    #[test]
    fn fixed_seed_reproduces() {
        let a = gauss_matrix(4, 3, 0.5, &mut RngStream::new(42, 0)).unwrap();
        let b = gauss_matrix(4, 3, 0.5, &mut RngStream::new(42, 0)).unwrap();
        assert_eq!(a, b);
        let c = gauss_matrix(4, 3, 0.5, &mut RngStream::new(42, 1)).unwrap();
        assert_ne!(a, c);
        let r1 = rademacher_vector(50, &mut RngStream::new(3, 9)).unwrap();
        let r2 = rademacher_vector(50, &mut RngStream::new(3, 9)).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn rademacher_values_and_balance() {
        let mut seen_pos = false;
        let mut seen_neg = false;
        for seed in 0..64 {
            let v = rademacher_vector(1, &mut RngStream::new(seed, 0)).unwrap();
            seen_pos |= v[0] == 1.0;
            seen_neg |= v[0] == -1.0;
        }
        assert!(seen_pos && seen_neg);
        let v = rademacher_vector(10_000, &mut RngStream::new(5, 0)).unwrap();
        assert!(v.iter().all(|&x| x == 1.0 || x == -1.0));
        assert!(v.mean().unwrap().abs() < 0.05);
    }

    #[test]
    fn bernoulli_rate_within_five_sigma() {
        let mut rng = RngStream::new(11, 2);
        let n = 100_000;
        let hits = (0..n).filter(|_| rng.bernoulli(0.3)).count() as f64;
        let sd = (n as f64 * 0.3 * 0.7).sqrt();
        assert!((hits - 0.3 * n as f64).abs() < 5.0 * sd);
    }

    #[test]
    fn hand_cases() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let x = array![1.0, 1.0];
        assert_eq!(matvec(a.view(), x.view()).unwrap(), array![3.0, 7.0]);
        let eye = Array2::<f64>::eye(2);
        assert_eq!(matvec(eye.view(), x.view()).unwrap(), x);
        assert_eq!(l2norm(Array1::<f64>::zeros(5).view()), 0.0);
        assert!(matvec(a.view(), array![1.0].view()).is_err());
        assert!(matmul(a.view(), Array2::<f64>::zeros((3, 1)).view()).is_err());
        assert!(dot(x.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn orthogonal_and_spectral_norm() {
        let mut rng = RngStream::new(9, 0);
        let q = random_orthogonal(20, &mut rng).unwrap();
        let qtq = q.t().dot(&q);
        let err = (&qtq - &Array2::<f64>::eye(20)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-12);
        assert!((spectral_norm(q.view(), 200) - 1.0).abs() < 1e-9);
        let d = Array2::from_diag(&array![3.0, -5.0, 1.0]);
        assert!((spectral_norm(d.view(), 500) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn sphere_rows_are_unit() {
        let x = sphere_samples(10, 7, &mut RngStream::new(1, 1)).unwrap();
        for n in row_norms(x.view()).iter() {
            assert!((n - 1.0).abs() < 1e-14);
        }
    }
}
