//! Dense, row-major, double-precision tensors.
//!
//! Image batches use the channel-first layout `[N, C, H, W]` everywhere.
//! There is no broadcasting: every binary operation requires identical shapes.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor must have at least one dimension"));
    }
    if let Some(bad) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "extent {bad} of {shape:?} is zero; every extent must be >= 1"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// A tensor of the given shape with every element set to `fill`.
    pub fn new(shape: &[usize], fill: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-1 tensor holding `values`.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(&[values.len()], values.to_vec())
    }

    /// Rank-2 tensor from equal-length rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub(crate) fn zip_with(&self, other: &Self, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| x * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }

    /// Rows `idx` of the leading axis, gathered into a new tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::shape("gather_rows: empty index list"));
        }
        let width = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= self.shape[0] {
                return Err(Error::shape(format!(
                    "row {i} out of range for leading extent {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::from_vec(&shape, data)
    }

    /// `C = A · B` for rank-2 `A: [m, k]` and `B: [k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = as_matrix(self, "matmul lhs")?;
        let (k2, n) = as_matrix(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner extents differ ({:?} x {:?})",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            Layout::Normal,
            &other.data,
            Layout::Normal,
            &mut out,
            false,
        );
        Self::from_vec(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = as_matrix(self, "transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_vec(&[c, r], out)
    }

    /// Index of the largest element of a rank-1 tensor; ties go to the lowest index.
    pub fn argmax(&self) -> Result<usize> {
        if self.rank() != 1 {
            return Err(Error::shape(format!(
                "argmax expects a vector, got {:?}",
                self.shape
            )));
        }
        Ok(argmax(&self.data))
    }

    /// Patch matrix of a `[C, H, W]` image; see [`im2col_into`].
    pub fn im2col(&self, kh: usize, kw: usize, stride: usize) -> Result<Self> {
        let geom = ConvGeometry::new(self.shape(), kh, kw, stride)?;
        let mut out = vec![0.0; geom.patch_len() * geom.positions()];
        im2col_into(&self.data, &geom, &mut out);
        Self::from_vec(&[geom.patch_len(), geom.positions()], out)
    }

    /// Adjoint of [`Tensor::im2col`]: scatters-adds a patch matrix back to `[C, H, W]`.
    pub fn col2im(&self, image_shape: &[usize], kh: usize, kw: usize, stride: usize) -> Result<Self> {
        let geom = ConvGeometry::new(image_shape, kh, kw, stride)?;
        if self.shape != [geom.patch_len(), geom.positions()] {
            return Err(Error::shape(format!(
                "col2im: columns {:?} do not match image {image_shape:?} with {kh}x{kw} kernel",
                self.shape
            )));
        }
        let mut out = vec![0.0; geom.channels * geom.height * geom.width];
        col2im_add(&self.data, &geom, &mut out);
        Self::from_vec(image_shape, out)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        write!(f, "{head:?}")?;
        if self.data.len() > SHOWN {
            write!(f, " ..{} more", self.data.len() - SHOWN)?;
        }
        Ok(())
    }
}

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!(
            "{what}: expected rank 2, got {:?}",
            t.shape()
        ))),
    }
}

/// First index of the maximum; NaN entries never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// How a row-major operand is read by [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `C (+)= op(A) · op(B)` with `op(A): [m, k]`, `op(B): [k, n]`, `C: [m, n]`,
/// all stored row-major. When `accumulate` is false `C` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
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

/// Valid-padding sliding-window geometry over one `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(image_shape: &[usize], kh: usize, kw: usize, stride: usize) -> Result<Self> {
        let &[channels, height, width] = image_shape else {
            return Err(Error::shape(format!(
                "expected a [C, H, W] image, got {image_shape:?}"
            )));
        };
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::shape("kernel extents and stride must be >= 1"));
        }
        if kh > height || kw > width {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than input {height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            out_h: (height - kh) / stride + 1,
            out_w: (width - kw) / stride + 1,
        })
    }

    /// Rows of the patch matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the patch matrix: `OH * OW`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Writes the `[C*kh*kw, OH*OW]` patch matrix of `image` into `out`.
///
/// Column `j` is the receptive field of output position `j` (row-major over
/// the output grid); rows run channel-major, then row-major within the kernel.
pub fn im2col_into(image: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let positions = g.positions();
    debug_assert_eq!(image.len(), g.channels * g.height * g.width);
    debug_assert_eq!(out.len(), g.patch_len() * positions);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut out[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let src_row = (oi * g.stride + ki) * g.width + kj;
                    let dst_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if g.stride == 1 {
                        dst_row.copy_from_slice(&plane[src_row..src_row + g.out_w]);
                    } else {
                        for (oj, d) in dst_row.iter_mut().enumerate() {
                            *d = plane[src_row + oj * g.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adds the patch matrix `cols` back into `image` (the adjoint of [`im2col_into`]).
pub fn col2im_add(cols: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let positions = g.positions();
    debug_assert_eq!(image.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.patch_len() * positions);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let dst_row = (oi * g.stride + ki) * g.width + kj;
                    for oj in 0..g.out_w {
                        plane[dst_row + oj * g.stride] += src[oi * g.out_w + oj];
                    }
                }
                row += 1;
            }
        }
    }
}
