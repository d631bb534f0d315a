use std::fmt;

use crate::error::{bail, Result};

/// Dense row-major `f64` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            bail!(
                Shape,
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                data.len()
            );
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

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Only meaningful for rank-0 or single-element tensors.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// False if any value is NaN or infinite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            bail!(Shape, "add {:?} and {:?}", self.shape, other.shape);
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            bail!(Shape, "transpose needs a matrix, got {:?}", self.shape);
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Portable `self · rhs` with a fixed summation order, so results are
    /// bit-identical across machines. Used on the victim path where trace
    /// fixtures must not depend on the host's SIMD kernels.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix_dims()?;
        let (k2, n) = rhs.as_matrix_dims()?;
        if k != k2 {
            bail!(Shape, "matmul {:?} x {:?}", self.shape, rhs.shape);
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub(crate) fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => bail!(Shape, "expected a matrix, got shape {:?}", self.shape),
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let shown = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_list().entries(shown).finish()?;
        if self.data.len() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

/// Fast `C = op(A) · op(B)` through `matrixmultiply`; `a_t`/`b_t` select the
/// transposed view of the stored row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    a_t: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (m, k) = if a_t { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if b_t { (b_cols, b_rows) } else { (b_rows, b_cols) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, a_cols as isize)
    } else {
        (a_cols as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, b_cols as isize)
    } else {
        (b_cols as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
