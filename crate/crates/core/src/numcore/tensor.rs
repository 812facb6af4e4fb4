use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::NumError;

/// Floating-point element type. `f32` is used for training and inference,
/// `f64` for gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Real> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self, NumError> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(NumError::Shape(format!("dims must be positive, got {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(NumError::Shape(format!("dims {dims:?} hold {numel} values, data has {}", data.len())));
        }
        Ok(Self { dims, data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![S::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn scalar(x: S) -> Self {
        Self { dims: vec![1], data: vec![x], requires_grad: false, grad: None }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self, NumError> {
        let n = rows.len();
        if n == 0 {
            return Err(NumError::Shape("matrix needs at least one row".into()));
        }
        let d = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(NumError::Shape(format!("row {i} has length {}, expected {d}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![n, d], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        if self.dims.len() == 1 {
            1
        } else {
            self.dims[..self.dims.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().expect("dims never empty")
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as trainable and allocates a zeroed gradient buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![S::zero(); self.data.len()]);
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self, NumError> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() || dims.is_empty() {
            return Err(NumError::Shape(format!("cannot reshape {:?} to {dims:?}", self.dims)));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| T::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|&x| T::of(x.as_f64())).collect()),
        }
    }

    pub fn transpose(&self) -> Result<Self, NumError> {
        let (r, c) = self.matrix_dims()?;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub(crate) fn matrix_dims(&self) -> Result<(usize, usize), NumError> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            d => Err(NumError::Shape(format!("expected a matrix, got dims {d:?}"))),
        }
    }
}

/// Matrix product of two eager tensors.
pub fn matmul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NumError> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(NumError::Shape(format!("matmul inner dims differ: {m}x{k} * {k2}x{n}")));
    }
    let mut out = vec![S::zero(); m * n];
    kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Row softmax with an optional keep-mask over columns (`true` = keep).
///
/// The mask either has one entry per column (shared by all rows) or one
/// entry per element.
pub fn softmax<S: Real>(x: &Tensor<S>, mask: Option<&[bool]>) -> Result<Tensor<S>, NumError> {
    let cols = x.cols();
    let rows = x.rows();
    if let Some(m) = mask {
        if m.len() != cols && m.len() != rows * cols {
            return Err(NumError::Shape(format!(
                "mask length {} fits neither {cols} columns nor {rows}x{cols}",
                m.len()
            )));
        }
    }
    let mut out = x.data().to_vec();
    kernels::softmax_rows(&mut out, rows, cols, mask)?;
    Tensor::new(x.dims().to_vec(), out)
}

pub(crate) mod kernels {
    use super::{NumError, Real};

    /// out += a[m×k] · b[k×n]
    pub fn gemm_nn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == S::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// out += a[m×k] · b[n×k]ᵀ
    pub fn gemm_nt<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * n + j] += acc;
            }
        }
    }

    /// out += a[k×m]ᵀ · b[k×n]
    pub fn gemm_tn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == S::zero() {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn softmax_rows<S: Real>(
        data: &mut [S],
        rows: usize,
        cols: usize,
        mask: Option<&[bool]>,
    ) -> Result<(), NumError> {
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let keep = |j: usize| match mask {
                None => true,
                Some(m) if m.len() == cols => m[j],
                Some(m) => m[r * cols + j],
            };
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                return Err(NumError::DegenerateMask { row: r });
            }
            let mut sum = S::zero();
            for (j, v) in row.iter_mut().enumerate() {
                if keep(j) {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = S::zero();
                }
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_a_is_a() {
        let a = t(&[2, 2], &[0.3, -1.5, 2.0, 7.25]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn zeros_annihilate() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let b = t(&[3, 4], &(0..12).map(f64::from).collect::<Vec<_>>());
        let c = matmul(&z, &b).unwrap();
        assert_eq!(c.dims(), &[2, 4]);
        assert!(c.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(NumError::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]), None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax(&t(&[2], &[1000.0, 0.0]), None).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let s = softmax(&t(&[2], &[0.4, 9.0]), Some(&[true, false])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let err = softmax(&t(&[2], &[0.4, 9.0]), Some(&[false, false]));
        assert!(matches!(err, Err(NumError::DegenerateMask { row: 0 })));
    }

    #[test]
    fn transposed_kernels_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect();
        let mut want = vec![0.0; 8];
        kernels::gemm_nn(&a, &b, &mut want, 2, 3, 4);
        let bt = t(&[3, 4], &b).transpose().unwrap();
        let mut got = vec![0.0; 8];
        kernels::gemm_nt(&a, bt.data(), &mut got, 2, 3, 4);
        assert_eq!(want, got);
        let at = t(&[2, 3], &a).transpose().unwrap();
        let mut got = vec![0.0; 8];
        kernels::gemm_tn(at.data(), &b, &mut got, 2, 3, 4);
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
