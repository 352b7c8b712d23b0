//! Random sensing matrices, measurement formation, and Gaussian noise
//! injection at a target SNR.
//!
//! Every matrix is column-normalized at construction so that the
//! diagonal of `AᵀA` is exactly one; the near-orthogonality of random
//! Bernoulli columns is what licenses the solver's linearized support
//! objective.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `AᵀA` is cached only up to this many columns; above it the memory
/// cost is quadratic and products are formed on demand.
pub const DEFAULT_GRAM_CAP: usize = 4096;

/// Project-wide seedable generator. All randomized operations in this
/// crate construct a fresh `ChaCha8Rng` from an explicit `u64` seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A dense M×N measurement operator with unit-norm columns and cached
/// Gram products.
#[derive(Debug, Clone)]
pub struct SensingMatrix {
    entries: DMatrix<f64>,
    gram_diag: DVector<f64>,
    gram: Option<DMatrix<f64>>,
}

impl SensingMatrix {
    /// Build from raw entries, scaling every column to unit norm.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        Self::from_entries_with_gram_cap(entries, DEFAULT_GRAM_CAP)
    }

    /// Same as [`SensingMatrix::from_entries`] with an explicit cap on
    /// the cached `AᵀA`.
    pub fn from_entries_with_gram_cap(mut entries: DMatrix<f64>, gram_cap: usize) -> Result<Self> {
        let (m, n) = entries.shape();
        if m == 0 || n == 0 {
            return Err(Error::InvalidDimension(format!(
                "sensing matrix must be non-empty, got {m}x{n}"
            )));
        }
        // Compression operators have at most as many rows as columns
        // (equality is the full-rank sanity case).
        if m > n {
            return Err(Error::InvalidDimension(format!(
                "sensing matrix must satisfy M <= N, got {m}x{n}"
            )));
        }
        for j in 0..n {
            let norm = entries.column(j).norm();
            if norm == 0.0 {
                return Err(Error::InvalidDimension(format!("column {j} is zero")));
            }
            let mut col = entries.column_mut(j);
            col /= norm;
        }
        let gram_diag = DVector::from_fn(n, |j, _| entries.column(j).norm_squared());
        let gram = if n <= gram_cap {
            Some(entries.transpose() * &entries)
        } else {
            None
        };
        Ok(Self {
            entries,
            gram_diag,
            gram,
        })
    }

    /// Random Bernoulli matrix: entries drawn i.i.d. from `{-1, +1}`
    /// with equal probability, then column-normalized, which makes
    /// every entry exactly `±1/√m`. Deterministic per seed.
    pub fn bernoulli(m: usize, n: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidDimension(format!(
                "Bernoulli matrix dimensions must be positive, got {m}x{n}"
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut entries = DMatrix::zeros(m, n);
        for j in 0..n {
            for i in 0..m {
                entries[(i, j)] = if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
        }
        Self::from_entries(entries)
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Diagonal of `AᵀA` (all ones by construction, kept explicit for
    /// the support objective).
    pub fn gram_diag(&self) -> &DVector<f64> {
        &self.gram_diag
    }

    /// Cached `AᵀA` when the column count is within the cap.
    pub fn gram(&self) -> Option<&DMatrix<f64>> {
        self.gram.as_ref()
    }

    /// `A·x`.
    pub fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.cols() {
            return Err(Error::InvalidDimension(format!(
                "measure: signal length {} does not match {} columns",
                x.len(),
                self.cols()
            )));
        }
        Ok(&self.entries * x)
    }

    /// `Aᵀ·v`.
    pub fn transpose_mul(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.rows() {
            return Err(Error::InvalidDimension(format!(
                "transpose_mul: vector length {} does not match {} rows",
                v.len(),
                self.rows()
            )));
        }
        Ok(self.entries.tr_mul(v))
    }
}

/// A measurement vector together with the noise level it was formed at.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub y: DVector<f64>,
    /// `f64::INFINITY` marks the noiseless case.
    pub snr_db: f64,
    /// The variance used during injection; diagnostics only.
    pub true_noise_variance: f64,
}

impl Measurement {
    pub fn is_noiseless(&self) -> bool {
        self.snr_db.is_infinite()
    }
}

/// Add i.i.d. zero-mean Gaussian noise so that the per-sample SNR is
/// `snr_db`: the noise variance is `(‖y‖²/M)·10^(−snr_db/10)`. An
/// infinite `snr_db` returns `y` unchanged with variance 0.
pub fn add_noise_snr(y: &DVector<f64>, snr_db: f64, seed: u64) -> Result<Measurement> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(Measurement {
            y: y.clone(),
            snr_db: f64::INFINITY,
            true_noise_variance: 0.0,
        });
    }
    let power = y.norm_squared() / y.len() as f64;
    if power == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    let variance = power * 10f64.powf(-snr_db / 10.0);
    let sd = variance.sqrt();
    let mut rng = seeded_rng(seed);
    let noisy = DVector::from_fn(y.len(), |i, _| {
        y[i] + sd * rng.sample::<f64, _>(StandardNormal)
    });
    Ok(Measurement {
        y: noisy,
        snr_db,
        true_noise_variance: variance,
    })
}
