//! Structure-free baseline: orthogonal matching pursuit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sensing::SensingMatrix;

/// Orthogonal matching pursuit: greedily pick the column most
/// correlated with the residual (lowest index on ties), refit by least
/// squares on the active set, stop at `k_max` atoms or once the
/// residual norm drops below `resid_tol`.
pub fn omp(
    a: &SensingMatrix,
    y: &DVector<f64>,
    k_max: usize,
    resid_tol: f64,
) -> Result<DVector<f64>> {
    let m = a.rows();
    let n = a.cols();
    if y.len() != m {
        return Err(Error::InvalidDimension(format!(
            "measurement length {} does not match {m} rows",
            y.len()
        )));
    }
    if k_max == 0 || k_max > m {
        return Err(Error::Capacity(format!(
            "k_max must satisfy 1 <= k_max <= {m}, got {k_max}"
        )));
    }

    let mut x = DVector::zeros(n);
    let mut residual = y.clone();
    let mut active: Vec<usize> = Vec::with_capacity(k_max);
    let mut in_active = vec![false; n];

    while active.len() < k_max {
        if residual.norm() < resid_tol {
            break;
        }
        let corr = a.transpose_mul(&residual)?;
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if in_active[j] {
                continue;
            }
            let mag = corr[j].abs();
            // Strictly-greater keeps the lowest index on ties.
            if best.is_none_or(|(_, b)| mag > b) {
                best = Some((j, mag));
            }
        }
        let (pick, mag) = best.expect("k_max <= m <= n leaves candidates");
        if mag == 0.0 {
            break; // residual orthogonal to every remaining column
        }
        active.push(pick);
        in_active[pick] = true;

        // Fresh least squares on the active set.
        let mut sub = DMatrix::zeros(m, active.len());
        for (c, &j) in active.iter().enumerate() {
            sub.column_mut(c).copy_from(&a.entries().column(j));
        }
        let coeffs = sub
            .clone()
            .svd(true, true)
            .solve(y, 1e-12)
            .map_err(|e| Error::Numeric(format!("least-squares refit failed: {e}")))?;
        x.fill(0.0);
        for (c, &j) in active.iter().enumerate() {
            x[j] = coeffs[c];
        }
        residual = y - &sub * &coeffs;
    }

    Ok(x)
}
