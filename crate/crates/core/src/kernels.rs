//! Dense linear-algebra and activation primitives.
//!
//! Every operation exists in two interchangeable backends: a naive scalar
//! reference and a wide-lane vectorized implementation. On x86-64 machines with
//! AVX2 and FMA the vectorized backend uses intrinsics; elsewhere (including
//! wasm32) it falls back to a portable eight-lane formulation that the compiler
//! lowers to whatever SIMD the target offers.
//!
//! Nothing in this module allocates on the hot path: callers own the output
//! buffers.

use std::fmt;

use thiserror::Error;

/// Lane width of the vectorized backend.
pub const LANES: usize = 8;

/// Inputs at or beyond this magnitude saturate `fast_tanh` to ±1.
pub const TANH_CLAMP: f32 = 6.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("matrix contains a non-finite value at index {0}")]
    NonFinite(usize),
}

/// Selects which implementation of the kernels is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Backend {
    Scalar,
    #[default]
    Vectorized,
}

impl Backend {
    pub const ALL: [Backend; 2] = [Backend::Scalar, Backend::Vectorized];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Scalar => "scalar",
            Backend::Vectorized => "vector",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "scalar" => Ok(Backend::Scalar),
            "vector" | "vectorized" | "simd" => Ok(Backend::Vectorized),
            other => Err(format!("unknown backend '{other}' (expected scalar|vector)")),
        }
    }
}

/// Row-major single-precision matrix. Immutable once constructed.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish_non_exhaustive()
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite(i));
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

    /// Builds a matrix from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// `y = W x`. `y` must have `W.rows()` entries and `x` must have `W.cols()`.
pub fn matvec(w: &DenseMatrix, x: &[f32], y: &mut [f32], backend: Backend) -> Result<(), KernelError> {
    check_dims("matvec", w, x, y)?;
    match backend {
        Backend::Scalar => scalar::matvec(w, x, y),
        Backend::Vectorized => vector::matvec(w, x, y),
    }
    Ok(())
}

/// `y = W x + b`.
pub fn affine(
    w: &DenseMatrix,
    b: &[f32],
    x: &[f32],
    y: &mut [f32],
    backend: Backend,
) -> Result<(), KernelError> {
    if b.len() != w.rows {
        return Err(KernelError::DimensionMismatch {
            op: "affine bias",
            expected: w.rows,
            actual: b.len(),
        });
    }
    matvec(w, x, y, backend)?;
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += *bi;
    }
    Ok(())
}

/// Convenience allocating wrapper around [`matvec`]; not for the control path.
pub fn matvec_alloc(w: &DenseMatrix, x: &[f32], backend: Backend) -> Result<Vec<f32>, KernelError> {
    let mut y = vec![0.0; w.rows];
    matvec(w, x, &mut y, backend)?;
    Ok(y)
}

fn check_dims(op: &'static str, w: &DenseMatrix, x: &[f32], y: &[f32]) -> Result<(), KernelError> {
    if x.len() != w.cols {
        return Err(KernelError::DimensionMismatch {
            op,
            expected: w.cols,
            actual: x.len(),
        });
    }
    if y.len() != w.rows {
        return Err(KernelError::DimensionMismatch {
            op,
            expected: w.rows,
            actual: y.len(),
        });
    }
    Ok(())
}

// Taylor coefficients of exp(v) up to v^5.
const EXP_C: [f32; 6] = [1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0];

/// Hyperbolic tangent approximation, |error| below 2e-5 everywhere.
///
/// Evaluated as `1 - 2 / (1 + E(|x|))` where `E` approximates `exp(2|x|)` by a
/// positive-coefficient polynomial in `|x|/4` squared three times. Each float
/// operation is monotone on non-negative inputs, so the result is monotone even
/// after rounding; the sign is restored afterwards for exact odd symmetry.
#[inline]
pub fn fast_tanh(x: f32) -> f32 {
    let t = x.abs().min(TANH_CLAMP);
    let v = t * 0.25;
    let mut e = EXP_C[5];
    e = e * v + EXP_C[4];
    e = e * v + EXP_C[3];
    e = e * v + EXP_C[2];
    e = e * v + EXP_C[1];
    e = e * v + EXP_C[0];
    e *= e;
    e *= e;
    e *= e;
    let r = 1.0 - 2.0 / (1.0 + e);
    r.copysign(x)
}

/// Logistic sigmoid defined as `0.5 * (1 + fast_tanh(x / 2))`.
#[inline]
pub fn fast_sigmoid(x: f32) -> f32 {
    0.5 * (1.0 + fast_tanh(0.5 * x))
}

/// Applies `fast_tanh` in place.
pub fn tanh_inplace(v: &mut [f32], backend: Backend) {
    match backend {
        Backend::Scalar => v.iter_mut().for_each(|x| *x = fast_tanh(*x)),
        Backend::Vectorized => vector::tanh_inplace(v),
    }
}

/// Applies `fast_sigmoid` in place.
pub fn sigmoid_inplace(v: &mut [f32], backend: Backend) {
    match backend {
        Backend::Scalar => v.iter_mut().for_each(|x| *x = fast_sigmoid(*x)),
        Backend::Vectorized => vector::sigmoid_inplace(v),
    }
}

mod scalar {
    use super::DenseMatrix;

    pub(super) fn matvec(w: &DenseMatrix, x: &[f32], y: &mut [f32]) {
        for (r, out) in y.iter_mut().enumerate() {
            let row = w.row(r);
            let mut acc = 0.0f32;
            for c in 0..row.len() {
                acc += row[c] * x[c];
            }
            *out = acc;
        }
    }
}

mod vector {
    use super::DenseMatrix;

    pub(super) fn matvec(w: &DenseMatrix, x: &[f32], y: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were detected just above.
                unsafe { avx2::matvec(w, x, y) };
                return;
            }
        }
        portable::matvec(w, x, y);
    }

    pub(super) fn tanh_inplace(v: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: AVX2 detected.
                unsafe { avx2::tanh_inplace(v) };
                return;
            }
        }
        portable::tanh_inplace(v);
    }

    pub(super) fn sigmoid_inplace(v: &mut [f32]) {
        for x in v.iter_mut() {
            *x *= 0.5;
        }
        tanh_inplace(v);
        for x in v.iter_mut() {
            *x = 0.5 * (1.0 + *x);
        }
    }

    mod portable {
        use super::super::{fast_tanh, DenseMatrix, LANES};

        pub(in super::super) fn matvec(w: &DenseMatrix, x: &[f32], y: &mut [f32]) {
            let cols = w.cols();
            let body = cols - cols % LANES;
            for (r, out) in y.iter_mut().enumerate() {
                let row = w.row(r);
                let mut acc = [0.0f32; LANES];
                for (wc, xc) in row[..body].chunks_exact(LANES).zip(x[..body].chunks_exact(LANES)) {
                    for l in 0..LANES {
                        acc[l] += wc[l] * xc[l];
                    }
                }
                let mut sum = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
                for c in body..cols {
                    sum += row[c] * x[c];
                }
                *out = sum;
            }
        }

        pub(in super::super) fn tanh_inplace(v: &mut [f32]) {
            for x in v.iter_mut() {
                *x = fast_tanh(*x);
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    mod avx2 {
        use std::arch::x86_64::*;

        use super::super::{fast_tanh, DenseMatrix, EXP_C, LANES, TANH_CLAMP};

        #[inline]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn hsum(v: __m256) -> f32 {
            let hi = _mm256_extractf128_ps::<1>(v);
            let lo = _mm256_castps256_ps128(v);
            let s = _mm_add_ps(lo, hi);
            let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
            let s = _mm_add_ss(s, _mm_shuffle_ps::<0b01>(s, s));
            _mm_cvtss_f32(s)
        }

        /// Four rows per pass share each load of `x`; two accumulators per row
        /// hide the FMA latency.
        #[target_feature(enable = "avx2,fma")]
        pub(in super::super) unsafe fn matvec(w: &DenseMatrix, x: &[f32], y: &mut [f32]) {
            let rows = w.rows();
            let cols = w.cols();
            let body = cols - cols % LANES;
            let wp = w.data().as_ptr();
            let xp = x.as_ptr();
            let mut r = 0;
            while r + 4 <= rows {
                let p0 = wp.add(r * cols);
                let p1 = wp.add((r + 1) * cols);
                let p2 = wp.add((r + 2) * cols);
                let p3 = wp.add((r + 3) * cols);
                let mut a0 = _mm256_setzero_ps();
                let mut a1 = _mm256_setzero_ps();
                let mut a2 = _mm256_setzero_ps();
                let mut a3 = _mm256_setzero_ps();
                let mut c = 0;
                while c < body {
                    let xv = _mm256_loadu_ps(xp.add(c));
                    a0 = _mm256_fmadd_ps(_mm256_loadu_ps(p0.add(c)), xv, a0);
                    a1 = _mm256_fmadd_ps(_mm256_loadu_ps(p1.add(c)), xv, a1);
                    a2 = _mm256_fmadd_ps(_mm256_loadu_ps(p2.add(c)), xv, a2);
                    a3 = _mm256_fmadd_ps(_mm256_loadu_ps(p3.add(c)), xv, a3);
                    c += LANES;
                }
                let mut s = [hsum(a0), hsum(a1), hsum(a2), hsum(a3)];
                for c in body..cols {
                    let xc = *xp.add(c);
                    s[0] += *p0.add(c) * xc;
                    s[1] += *p1.add(c) * xc;
                    s[2] += *p2.add(c) * xc;
                    s[3] += *p3.add(c) * xc;
                }
                y[r..r + 4].copy_from_slice(&s);
                r += 4;
            }
            while r < rows {
                let p = wp.add(r * cols);
                let mut a0 = _mm256_setzero_ps();
                let mut a1 = _mm256_setzero_ps();
                let mut c = 0;
                while c + 2 * LANES <= body {
                    a0 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(c)), _mm256_loadu_ps(xp.add(c)), a0);
                    a1 = _mm256_fmadd_ps(
                        _mm256_loadu_ps(p.add(c + LANES)),
                        _mm256_loadu_ps(xp.add(c + LANES)),
                        a1,
                    );
                    c += 2 * LANES;
                }
                while c < body {
                    a0 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(c)), _mm256_loadu_ps(xp.add(c)), a0);
                    c += LANES;
                }
                let mut s = hsum(_mm256_add_ps(a0, a1));
                for c in body..cols {
                    s += *p.add(c) * *xp.add(c);
                }
                y[r] = s;
                r += 1;
            }
        }

        /// Same operation sequence as the scalar `fast_tanh` (no FMA), so the
        /// two produce bit-identical results.
        #[target_feature(enable = "avx2")]
        pub(in super::super) unsafe fn tanh_inplace(v: &mut [f32]) {
            let n = v.len();
            let body = n - n % LANES;
            let sign_mask = _mm256_set1_ps(-0.0);
            let clamp = _mm256_set1_ps(TANH_CLAMP);
            let quarter = _mm256_set1_ps(0.25);
            let one = _mm256_set1_ps(1.0);
            let two = _mm256_set1_ps(2.0);
            let c: [__m256; 6] = [
                _mm256_set1_ps(EXP_C[0]),
                _mm256_set1_ps(EXP_C[1]),
                _mm256_set1_ps(EXP_C[2]),
                _mm256_set1_ps(EXP_C[3]),
                _mm256_set1_ps(EXP_C[4]),
                _mm256_set1_ps(EXP_C[5]),
            ];
            let p = v.as_mut_ptr();
            let mut i = 0;
            while i < body {
                let x = _mm256_loadu_ps(p.add(i));
                let sign = _mm256_and_ps(x, sign_mask);
                let t = _mm256_min_ps(_mm256_andnot_ps(sign_mask, x), clamp);
                let vv = _mm256_mul_ps(t, quarter);
                let mut e = c[5];
                e = _mm256_add_ps(_mm256_mul_ps(e, vv), c[4]);
                e = _mm256_add_ps(_mm256_mul_ps(e, vv), c[3]);
                e = _mm256_add_ps(_mm256_mul_ps(e, vv), c[2]);
                e = _mm256_add_ps(_mm256_mul_ps(e, vv), c[1]);
                e = _mm256_add_ps(_mm256_mul_ps(e, vv), c[0]);
                e = _mm256_mul_ps(e, e);
                e = _mm256_mul_ps(e, e);
                e = _mm256_mul_ps(e, e);
                let r = _mm256_sub_ps(one, _mm256_div_ps(two, _mm256_add_ps(one, e)));
                _mm256_storeu_ps(p.add(i), _mm256_or_ps(r, sign));
                i += LANES;
            }
            for x in &mut v[body..] {
                *x = fast_tanh(*x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_matvec() {
        for backend in Backend::ALL {
            let y = matvec_alloc(&DenseMatrix::identity(3), &[1.0, 2.0, 3.0], backend).unwrap();
            assert_eq!(y, vec![1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn hand_arithmetic() {
        let w = DenseMatrix::new(1, 2, vec![2.0, -1.0]).unwrap();
        for backend in Backend::ALL {
            assert_eq!(matvec_alloc(&w, &[3.0, 4.0], backend).unwrap(), vec![2.0]);
        }
    }

    #[test]
    fn backends_agree_on_96x256() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_matrix(&mut rng, 96, 256);
        let x: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = matvec_alloc(&w, &x, Backend::Scalar).unwrap();
        let b = matvec_alloc(&w, &x, Backend::Vectorized).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-4, "{p} vs {q}");
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let w = DenseMatrix::zeros(2, 3);
        let mut y = [0.0; 2];
        let err = matvec(&w, &[1.0, 2.0], &mut y, Backend::Scalar).unwrap_err();
        assert!(matches!(err, KernelError::DimensionMismatch { expected: 3, actual: 2, .. }));
        let mut short = [0.0; 1];
        assert!(matvec(&w, &[1.0, 2.0, 3.0], &mut short, Backend::Vectorized).is_err());
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![0.0, f32::NAN]),
            Err(KernelError::NonFinite(1))
        ));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(&mut rng, 37, 29);
        for backend in Backend::ALL {
            let y = matvec_alloc(&w, &[0.0; 29], backend).unwrap();
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tanh_examples() {
        assert_eq!(fast_tanh(0.0), 0.0);
        assert!((fast_tanh(20.0) - 1.0).abs() <= 1e-3);
        assert!((fast_tanh(0.5) - 0.462117).abs() <= 1e-3);
        assert!((fast_tanh(0.5) - 0.5f64.tanh() as f32).abs() <= 1e-3);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(fast_sigmoid(0.0), 0.5);
        assert!(fast_sigmoid(-30.0).abs() <= 1e-3);
        let exact = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((fast_sigmoid(1.0) as f64 - exact).abs() <= 1e-3);
        assert!((fast_sigmoid(1.0) - 0.731059).abs() <= 1e-3);
    }

    #[test]
    fn tanh_error_and_monotonicity_on_dense_grid() {
        let n = 1_000_000;
        let (lo, hi) = (-8.0f64, 8.0f64);
        let mut prev = f32::NEG_INFINITY;
        for i in 0..n {
            let x = (lo + (hi - lo) * i as f64 / (n - 1) as f64) as f32;
            let t = fast_tanh(x);
            assert!(t >= prev, "not monotone at {x}");
            assert!((-1.0..=1.0).contains(&t));
            assert!((t as f64 - (x as f64).tanh()).abs() <= 1e-3, "error at {x}");
            assert_eq!(fast_tanh(-x), -t);
            prev = t;
        }
    }

    #[test]
    fn sigmoid_error_on_grid() {
        for i in 0..=20_000 {
            let x = -40.0 + 80.0 * i as f32 / 20_000.0;
            let s = fast_sigmoid(x);
            let exact = 1.0 / (1.0 + (-(x as f64)).exp());
            assert!((s as f64 - exact).abs() <= 1e-3, "at {x}");
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn vectorized_activations_match_scalar_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f32> = (0..1003).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut a = v.clone();
        let mut b = v.clone();
        tanh_inplace(&mut a, Backend::Scalar);
        tanh_inplace(&mut b, Backend::Vectorized);
        assert_eq!(a, b);
        let mut a = v.clone();
        let mut b = v;
        sigmoid_inplace(&mut a, Backend::Scalar);
        sigmoid_inplace(&mut b, Backend::Vectorized);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-7);
        }
    }

    #[test]
    fn backend_parses() {
        assert_eq!("vector".parse::<Backend>().unwrap(), Backend::Vectorized);
        assert_eq!("Scalar".parse::<Backend>().unwrap(), Backend::Scalar);
        assert!("gpu".parse::<Backend>().is_err());
    }
}
