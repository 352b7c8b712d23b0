//! Orthonormal image transforms: separable 2-D DCT, multi-level 2-D
//! Haar wavelet, and projection onto a supplied orthonormal basis.
//!
//! Images vectorize in row-major raster order throughout, which is the
//! same order the 2-D grid neighborhoods index.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Basis orthonormality tolerance (max-abs of `BᵀB - I`).
const ORTHO_TOL: f64 = 1e-8;

/// A grayscale image with a stated peak intensity.
#[derive(Debug, Clone)]
pub struct ImageGrid {
    pixels: DMatrix<f64>,
    peak: f64,
}

impl ImageGrid {
    pub fn new(pixels: DMatrix<f64>, peak: f64) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::InvalidDimension("empty image".into()));
        }
        if peak <= 0.0 || !peak.is_finite() {
            return Err(Error::InvalidDimension(format!("bad peak {peak}")));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel".into()));
        }
        Ok(Self { pixels, peak })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    pub fn pixels(&self) -> &DMatrix<f64> {
        &self.pixels
    }

    /// Row-major raster vectorization.
    pub fn to_vector(&self) -> DVector<f64> {
        let (h, w) = self.pixels.shape();
        DVector::from_fn(h * w, |k, _| self.pixels[(k / w, k % w)])
    }

    /// Inverse of [`ImageGrid::to_vector`].
    pub fn from_vector(v: &DVector<f64>, height: usize, width: usize, peak: f64) -> Result<Self> {
        if v.len() != height * width {
            return Err(Error::InvalidDimension(format!(
                "vector length {} does not match {height}x{width}",
                v.len()
            )));
        }
        Self::new(
            DMatrix::from_fn(height, width, |i, j| v[i * width + j]),
            peak,
        )
    }
}

/// Orthonormal DCT-II matrix of size `n`, rows indexed by frequency.
fn dct_matrix(n: usize) -> DMatrix<f64> {
    let nf = n as f64;
    DMatrix::from_fn(n, n, |k, i| {
        let scale = if k == 0 {
            (1.0 / nf).sqrt()
        } else {
            (2.0 / nf).sqrt()
        };
        scale * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos()
    })
}

/// Forward orthonormal 2-D DCT; returns row-major coefficients.
pub fn dct2_forward(img: &ImageGrid) -> DVector<f64> {
    let ch = dct_matrix(img.height());
    let cw = dct_matrix(img.width());
    let coeffs = &ch * img.pixels() * cw.transpose();
    let (h, w) = coeffs.shape();
    DVector::from_fn(h * w, |k, _| coeffs[(k / w, k % w)])
}

/// Inverse orthonormal 2-D DCT for coefficients produced by
/// [`dct2_forward`].
pub fn dct2_inverse(
    coeffs: &DVector<f64>,
    height: usize,
    width: usize,
    peak: f64,
) -> Result<ImageGrid> {
    if coeffs.len() != height * width {
        return Err(Error::InvalidDimension(format!(
            "coefficient length {} does not match {height}x{width}",
            coeffs.len()
        )));
    }
    let c = DMatrix::from_fn(height, width, |i, j| coeffs[i * width + j]);
    let ch = dct_matrix(height);
    let cw = dct_matrix(width);
    let pixels = ch.transpose() * c * cw;
    ImageGrid::new(pixels, peak)
}

fn check_haar_dims(height: usize, width: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::InvalidDimension(
            "haar needs at least one level".into(),
        ));
    }
    let block = 1usize << levels;
    if height % block != 0 || width % block != 0 {
        return Err(Error::InvalidDimension(format!(
            "haar with {levels} levels needs dimensions divisible by {block}, got {height}x{width}"
        )));
    }
    Ok(())
}

/// One orthonormal Haar split of the leading `len` entries of each row:
/// averages land in the first half, differences in the second, both
/// scaled by 1/√2.
fn haar_rows_forward(m: &mut DMatrix<f64>, rows: usize, len: usize) {
    let half = len / 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut buf = vec![0.0; len];
    for i in 0..rows {
        for k in 0..half {
            let a = m[(i, 2 * k)];
            let b = m[(i, 2 * k + 1)];
            buf[k] = s * (a + b);
            buf[half + k] = s * (a - b);
        }
        for (j, v) in buf.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
}

fn haar_rows_inverse(m: &mut DMatrix<f64>, rows: usize, len: usize) {
    let half = len / 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut buf = vec![0.0; len];
    for i in 0..rows {
        for k in 0..half {
            let lo = m[(i, k)];
            let hi = m[(i, half + k)];
            buf[2 * k] = s * (lo + hi);
            buf[2 * k + 1] = s * (lo - hi);
        }
        for (j, v) in buf.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
}

/// Forward multi-level orthonormal 2-D Haar transform. Each level
/// splits the current approximation block, rows first then columns, so
/// the level-ℓ approximation occupies the top-left `(h/2^ℓ)×(w/2^ℓ)`
/// corner.
pub fn haar2_forward(img: &ImageGrid, levels: usize) -> Result<DVector<f64>> {
    check_haar_dims(img.height(), img.width(), levels)?;
    let mut m = img.pixels().clone();
    let (mut h, mut w) = m.shape();
    for _ in 0..levels {
        haar_rows_forward(&mut m, h, w);
        // Column pass via the transpose of the same butterfly.
        let mut t = m.view((0, 0), (h, w)).transpose();
        haar_rows_forward(&mut t, w, h);
        m.view_mut((0, 0), (h, w)).copy_from(&t.transpose());
        h /= 2;
        w /= 2;
    }
    let (fh, fw) = m.shape();
    Ok(DVector::from_fn(fh * fw, |k, _| m[(k / fw, k % fw)]))
}

/// Inverse of [`haar2_forward`].
pub fn haar2_inverse(
    coeffs: &DVector<f64>,
    height: usize,
    width: usize,
    levels: usize,
    peak: f64,
) -> Result<ImageGrid> {
    check_haar_dims(height, width, levels)?;
    if coeffs.len() != height * width {
        return Err(Error::InvalidDimension(format!(
            "coefficient length {} does not match {height}x{width}",
            coeffs.len()
        )));
    }
    let mut m = DMatrix::from_fn(height, width, |i, j| coeffs[i * width + j]);
    for level in (0..levels).rev() {
        let h = height >> level;
        let w = width >> level;
        let mut t = m.view((0, 0), (h, w)).transpose();
        haar_rows_inverse(&mut t, w, h);
        m.view_mut((0, 0), (h, w)).copy_from(&t.transpose());
        haar_rows_inverse(&mut m, h, w);
    }
    ImageGrid::new(m, peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Dct,
    Haar,
    Pca,
    Identity,
}

/// A square orthonormal synthesis operator whose columns are basis
/// vectors: coefficients are `Bᵀ·signal`, signals are `B·coefficients`.
#[derive(Debug, Clone)]
pub struct Basis {
    matrix: DMatrix<f64>,
    kind: BasisKind,
}

impl Basis {
    pub fn new(matrix: DMatrix<f64>, kind: BasisKind) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.is_empty() {
            return Err(Error::InvalidBasis(format!(
                "basis must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let n = matrix.ncols();
        let gram = matrix.tr_mul(&matrix);
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        if worst > ORTHO_TOL {
            return Err(Error::InvalidBasis(format!(
                "columns not orthonormal (max |BᵀB - I| = {worst:.3e})"
            )));
        }
        Ok(Self { matrix, kind })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
            kind: BasisKind::Identity,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Analysis: `Bᵀ·signal`.
    pub fn forward(&self, signal: &DVector<f64>) -> Result<DVector<f64>> {
        if signal.len() != self.dim() {
            return Err(Error::InvalidDimension(format!(
                "basis dim {} vs signal length {}",
                self.dim(),
                signal.len()
            )));
        }
        Ok(self.matrix.tr_mul(signal))
    }

    /// Synthesis: `B·coefficients`.
    pub fn inverse(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        if coeffs.len() != self.dim() {
            return Err(Error::InvalidDimension(format!(
                "basis dim {} vs coefficient length {}",
                self.dim(),
                coeffs.len()
            )));
        }
        Ok(&self.matrix * coeffs)
    }
}
