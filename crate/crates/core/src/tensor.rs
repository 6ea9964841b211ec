//! Dense row-major tensors.
//!
//! `Tensor<T>` is a flat buffer plus a shape. The scalar type is fixed for a
//! whole run through the [`Scalar`] trait, implemented for `f32` (default
//! compute type) and `f64` (used for gradient checks).
//!
//! Matrix products go through `matrixmultiply`, which is single threaded and
//! uses a fixed blocking order, so results are bit-identical across runs.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Floating point scalar usable as a tensor element.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn extend_le_bytes(self, out: &mut Vec<u8>);

    fn from_le_slice(bytes: &[u8]) -> Self;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers size every buffer from (m, k, n) and the
                // strides, which `Tensor` checks before dispatching here.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn extend_le_bytes(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le_slice(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("slice has scalar width"))
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense tensor in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expects {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("valid shape");
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("valid shape");
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        Self::new([rows.len(), cols], rows.concat())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same elements under a new shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    fn as_matrix(&self, op: &'static str, other: &Self) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn matmul_impl(&self, other: &Self, trans_a: bool, trans_b: bool, op: &'static str) -> Result<Self> {
        let (ar, ac) = self.as_matrix(op, other)?;
        let (br, bc) = other.as_matrix(op, self).map_err(|_| Error::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        })?;
        let (m, k, rsa, csa) = if trans_a {
            (ac, ar, 1, ac as isize)
        } else {
            (ar, ac, ac as isize, 1)
        };
        let (k2, n, rsb, csb) = if trans_b {
            (bc, br, 1, bc as isize)
        } else {
            (br, bc, bc as isize, 1)
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = Tensor::zeros([m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            rsa,
            csa,
            &other.data,
            rsb,
            csb,
            T::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        Ok(out)
    }

    /// `self · other` for `r×k` by `k×c` matrices.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_impl(other, false, false, "matmul")
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_impl(other, true, false, "t_matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        self.matmul_impl(other, false, true, "matmul_t")
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Self {
        self.map(sign)
    }

    pub fn abs(&self) -> Self {
        self.map(T::abs)
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: T) {
        for x in &mut self.data {
            *x = *x * factor;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    /// Number of elements that are exactly zero.
    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|x| x.is_zero()).count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Little-endian IEEE-754 bytes, no header.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::DTYPE.size_of());
        self.write_le_bytes(&mut out);
        out
    }

    pub fn write_le_bytes(&self, out: &mut Vec<u8>) {
        for &x in &self.data {
            x.extend_le_bytes(out);
        }
    }

    pub fn from_le_bytes(shape: impl Into<Vec<usize>>, bytes: &[u8]) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        let width = T::DTYPE.size_of();
        if bytes.len() != n * width {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expects {} bytes, got {}", n * width, bytes.len()),
            });
        }
        let data = bytes.chunks_exact(width).map(T::from_le_slice).collect();
        Ok(Tensor { shape, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// `sign(0) = 0`, otherwise ±1. NaN maps to 0.
pub fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                for l in 0..k {
                    out[i * c + j] += a[i * k + l] * b[l * c + j];
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn assert_rel_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            let scale = w.abs().max(1.0);
            assert!((g - w).abs() <= tol * scale, "{g} vs {w}");
        }
    }

    #[test]
    fn identity_product() {
        let i = Tensor::<f64>::eye(2);
        let m = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(i.matmul(&m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f64>::new([1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, [5, 7]);
        let b = random(&mut rng, [7, 3]);
        let want = naive_matmul(a.data(), b.data(), 5, 7, 3);
        assert_rel_close(a.matmul(&b).unwrap().data(), &want, 1e-12);
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, [4, 6]);
        let b = random(&mut rng, [4, 3]);
        let c = random(&mut rng, [5, 6]);
        let at = Tensor::from_fn([6, 4], |i| a.data()[(i % 4) * 6 + i / 4]);
        let ct = Tensor::from_fn([6, 5], |i| c.data()[(i % 5) * 6 + i / 5]);
        assert_rel_close(
            a.t_matmul(&b).unwrap().data(),
            at.matmul(&b).unwrap().data(),
            1e-12,
        );
        assert_rel_close(
            a.matmul_t(&c).unwrap().data(),
            a.matmul(&ct).unwrap().data(),
            1e-12,
        );
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(
            a.matmul(&b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn elementwise_examples() {
        let t = Tensor::<f64>::new([3], vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(t.sign().data(), &[-1.0, 0.0, 1.0]);
        let t = Tensor::<f64>::new([2], vec![-1.5, 2.0]).unwrap();
        assert_eq!(t.abs().data(), &[1.5, 2.0]);
        let t = Tensor::<f64>::new([2], vec![1.0, 2.0]).unwrap();
        assert_eq!(t.scale(0.5).data(), &[0.5, 1.0]);
        assert!(t.add(&Tensor::zeros([3])).is_err());
        assert_eq!(t.mul(&t).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(t.sub(&t).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new([0, 2], vec![]).is_err());
        let t = Tensor::<f32>::zeros([2, 3]);
        assert!(t.reshape([4]).is_err());
        assert_eq!(t.reshape([3, 2]).unwrap().shape(), &[3, 2]);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn le_bytes_layout() {
        let t = Tensor::<f32>::new([2], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_le_bytes();
        assert_eq!(&bytes[..4], &1.0f32.to_le_bytes());
        assert_eq!(Tensor::<f32>::from_le_bytes([2], &bytes).unwrap(), t);
        assert!(Tensor::<f32>::from_le_bytes([3], &bytes).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matmul_agrees_with_oracle(r in 1usize..=16, k in 1usize..=16, c in 1usize..=16, seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(&mut rng, [r, k]);
                let b = random(&mut rng, [k, c]);
                let want = naive_matmul(a.data(), b.data(), r, k, c);
                assert_rel_close(a.matmul(&b).unwrap().data(), &want, 1e-12);
            }

            #[test]
            fn elementwise_is_pure_and_shape_preserving(v in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
                let t = Tensor::new([v.len()], v.clone()).unwrap();
                let before = t.clone();
                for out in [t.sign(), t.abs(), t.scale(3.0), t.add(&t).unwrap(), t.mul(&t).unwrap()] {
                    prop_assert_eq!(out.shape(), t.shape());
                }
                prop_assert_eq!(&t, &before);
            }
        }
    }
}
