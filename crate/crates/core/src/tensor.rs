//! Dense row-major `f64` tensors.
//!
//! This is the value type carried by every node of the autodiff tape and by
//! all plain (non-differentiated) numeric code in the crate. Matrix products
//! go through `matrixmultiply::dgemm`; everything else is straightforward
//! loops over the flat buffer.

use crate::error::{CoreError, Result};

/// Dense tensor: a shape plus a row-major `f64` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows when viewed as a 2-D matrix (1-D tensors count as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Number of columns when viewed as a 2-D matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::Shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
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

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// self += c * other, shapes must match.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    /// Matrix product for 2-D tensors, `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(CoreError::Shape(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        // dgemm: out = 1.0 * self . other + 0.0 * out
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }

    /// out += alpha * self . other (accumulating matrix product).
    pub fn matmul_acc(&self, other: &Tensor, alpha: f64, out: &mut Tensor) {
        let (m, k) = (self.rows(), self.cols());
        let n = other.cols();
        debug_assert_eq!(k, other.rows());
        debug_assert_eq!(out.rows(), m);
        debug_assert_eq!(out.cols(), n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                1.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// Select rows by index, preserving order. Indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let n = self.cols();
        let mut out = Tensor::zeros(&[idx.len(), n]);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * n..(r + 1) * n].copy_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        out
    }

    /// Per-row sums, `[m,n] -> [m,1]`.
    pub fn row_sums(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[m, 1]);
        for i in 0..m {
            out.data[i] = self.data[i * n..(i + 1) * n].iter().sum();
        }
        out
    }
}

/// `out += a . b^T` with `a: [m,k]`, `b: [n,k]`, `out: [m,n]`, scaled by `alpha`.
pub fn acc_nt_scaled(a: &Tensor, b: &Tensor, alpha: f64, out: &mut Tensor) {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    debug_assert_eq!(out.rows(), m);
    debug_assert_eq!(out.cols(), n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            1,
            k as isize,
            1.0,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out += a^T . b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`, scaled by `alpha`.
pub fn acc_tn_scaled(a: &Tensor, b: &Tensor, alpha: f64, out: &mut Tensor) {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(b.rows(), m);
    debug_assert_eq!(out.rows(), k);
    debug_assert_eq!(out.cols(), n);
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            alpha,
            a.data().as_ptr(),
            1,
            k as isize,
            b.data().as_ptr(),
            n as isize,
            1,
            1.0,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out += a^T . b`.
pub fn acc_tn(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    acc_tn_scaled(a, b, 1.0, out);
}

/// Complex spectrum of a real signal, stored as separate real and imaginary
/// parts over the last axis. `original_len` is the time-domain length, needed
/// by the inverse transform's 1/n scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub real: Tensor,
    pub imag: Tensor,
    pub original_len: usize,
}

/// Cos/sin basis matrices for a length-n DFT: `cos[t*n+k] = cos(2 pi t k / n)`.
#[derive(Debug, Clone)]
pub struct DftBasis {
    pub n: usize,
    pub cos: Tensor,
    pub sin: Tensor,
}

impl DftBasis {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "DFT length must be >= 1");
        let mut cos = Tensor::zeros(&[n, n]);
        let mut sin = Tensor::zeros(&[n, n]);
        for t in 0..n {
            for k in 0..n {
                // Reduce t*k mod n first so large products stay accurate.
                let phase = 2.0 * std::f64::consts::PI * ((t * k) % n) as f64 / n as f64;
                cos.data_mut()[t * n + k] = phase.cos();
                sin.data_mut()[t * n + k] = phase.sin();
            }
        }
        DftBasis { n, cos, sin }
    }
}

/// Unnormalized forward DFT over the last axis: `X[k] = sum_t x[t] e^{-2 pi i t k / n}`.
pub fn dft(x: &Tensor) -> ComplexSpectrum {
    let n = x.cols();
    let basis = DftBasis::new(n);
    dft_with(x, &basis)
}

pub fn dft_with(x: &Tensor, basis: &DftBasis) -> ComplexSpectrum {
    debug_assert_eq!(x.cols(), basis.n);
    let real = x.matmul(&basis.cos).expect("dft shape");
    let imag = x.matmul(&basis.sin).expect("dft shape").scale(-1.0);
    ComplexSpectrum {
        real,
        imag,
        original_len: basis.n,
    }
}

/// Inverse DFT; divides by the length. Returns the real part of the
/// reconstruction (exact for spectra of real signals).
pub fn inverse_dft(s: &ComplexSpectrum) -> Tensor {
    let basis = DftBasis::new(s.original_len);
    inverse_dft_with(s, &basis)
}

pub fn inverse_dft_with(s: &ComplexSpectrum, basis: &DftBasis) -> Tensor {
    let n = s.original_len as f64;
    // Re(x[t]) = (1/n) sum_k Re[k] cos(2 pi t k/n) - Im[k] sin(2 pi t k/n);
    // the basis matrices are symmetric so no transpose is needed.
    let mut out = s.real.matmul(&basis.cos).expect("idft shape");
    s.imag.matmul_acc(&basis.sin, -1.0, &mut out);
    out.scale(1.0 / n)
}
