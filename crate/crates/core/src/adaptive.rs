//! Outer loop: threshold the current estimate into a binary mask,
//! rebuild the prior's graph from the mask, refit its weights by
//! pseudo-likelihood, and re-run the inner recovery. Also houses the
//! fixed-prior and oracle reference modes.

use nalgebra::DVector;

use crate::bench::psnr;
use crate::error::{Error, Result};
use crate::mrf::{
    learn_pseudolikelihood, update_graph, BoltzmannMachine, Graph, NeighborhoodSpec, SpinVector,
    PL_DEFAULT_STEP,
};
use crate::recovery::{
    estimate_sparse_signal, estimate_sparse_signal_warm, estimate_with_fixed_support,
    solve_signal_on_support, InnerOptions, InnerOutcome, SIGMA_FLOOR,
};
use crate::sensing::SensingMatrix;

/// Options for [`adaptive_mrf_recover`].
#[derive(Debug, Clone, Copy)]
pub struct OuterOptions {
    pub max_outer: usize,
    pub outer_rel_tol: f64,
    pub neighborhood: NeighborhoodSpec,
    pub inner: InnerOptions,
    pub pl_iters: usize,
    pub pl_step: f64,
    /// Re-use the previous outer iterate to start each inner run.
    /// Off by default: every inner run starts from zero.
    pub warm_start: bool,
}

impl OuterOptions {
    pub fn new(neighborhood: NeighborhoodSpec) -> Self {
        Self {
            max_outer: 5,
            outer_rel_tol: 1e-3,
            neighborhood,
            inner: InnerOptions::default(),
            pl_iters: 20,
            pl_step: PL_DEFAULT_STEP,
            warm_start: false,
        }
    }
}

/// One outer iteration's summary.
#[derive(Debug, Clone)]
pub struct OuterTraceRow {
    pub outer_iter: usize,
    /// Fraction of mask entries set active by the threshold.
    pub mask_density: f64,
    pub n_edges: usize,
    pub inner_iters: usize,
    pub cost_final: f64,
    /// Present only when a reference signal was supplied.
    pub psnr_db: Option<f64>,
}

/// Result of the adaptive outer loop.
#[derive(Debug, Clone)]
pub struct OuterOutcome {
    pub x: DVector<f64>,
    pub trace: Vec<OuterTraceRow>,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    /// Whether the loop exited on the relative-change tolerance rather
    /// than the iteration cap.
    pub stopped_by_tol: bool,
}

/// Mask rule: active where the magnitude exceeds the mean magnitude.
/// The strict comparison sends an all-zero (or all-equal) iterate to
/// the all-inactive mask.
pub fn threshold_support(x: &DVector<f64>) -> SpinVector {
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
    SpinVector::from_active(x.iter().map(|v| v.abs() > mean_abs).collect())
}

fn outer_rel_change(prev: &DVector<f64>, new: &DVector<f64>) -> Option<f64> {
    let prev_norm = prev.norm();
    if prev_norm > 0.0 {
        Some((prev - new).norm() / prev_norm)
    } else if new.norm() == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// Adaptive recovery: bootstrap with a fixed all-active run, then
/// alternate mask thresholding, graph update, pseudo-likelihood
/// refitting, and inner recovery until the iterate stabilizes or the
/// outer cap is reached.
pub fn adaptive_mrf_recover(
    a: &SensingMatrix,
    y: &DVector<f64>,
    opts: &OuterOptions,
    reference: Option<&DVector<f64>>,
) -> Result<OuterOutcome> {
    let n = a.cols();
    if opts.neighborhood.n_nodes() != n {
        return Err(Error::InvalidDimension(format!(
            "neighborhood over {} nodes vs {} columns",
            opts.neighborhood.n_nodes(),
            n
        )));
    }
    if opts.max_outer == 0 {
        return Err(Error::InvalidConfig("max_outer must be at least 1".into()));
    }

    let init = estimate_with_fixed_support(a, y, &opts.inner)?;
    let mut x = init.x;
    let mut inner_iters_total = init.state.iter;
    let mut previous_bm: Option<BoltzmannMachine> = None;
    let mut trace = Vec::new();
    let mut stopped_by_tol = false;
    let mut outer_iters = 0;

    for outer_iter in 1..=opts.max_outer {
        outer_iters = outer_iter;
        let b = threshold_support(&x);
        let bm = if b.support_size() == 0 {
            // An empty mask yields an empty graph and an ill-posed fit;
            // keep the previous prior (flat on the first iteration).
            previous_bm
                .clone()
                .unwrap_or_else(|| BoltzmannMachine::flat(opts.neighborhood))
        } else {
            let graph = update_graph(&b, opts.neighborhood)?;
            learn_pseudolikelihood(&b, graph, opts.pl_iters, opts.pl_step)?
        };

        let run = if opts.warm_start {
            estimate_sparse_signal_warm(a, y, &bm, &opts.inner, &x)?
        } else {
            estimate_sparse_signal(a, y, &bm, &opts.inner)?
        };
        inner_iters_total += run.state.iter;

        let rel = outer_rel_change(&x, &run.x);
        trace.push(OuterTraceRow {
            outer_iter,
            mask_density: b.support_size() as f64 / n as f64,
            n_edges: bm.graph().n_edges(),
            inner_iters: run.state.iter,
            cost_final: run
                .trace
                .last()
                .map(|r| r.cost_after_signal)
                .unwrap_or(f64::NAN),
            psnr_db: match reference {
                Some(r) => Some(psnr(r, &run.x, r.amax())?),
                None => None,
            },
        });

        x = run.x;
        previous_bm = Some(bm);

        if let Some(rel) = rel {
            if rel < opts.outer_rel_tol {
                stopped_by_tol = true;
                break;
            }
        }
    }

    Ok(OuterOutcome {
        x,
        trace,
        outer_iters,
        inner_iters_total,
        stopped_by_tol,
    })
}

/// Recovery under a fixed, pre-trained prior: one inner run, no
/// adaptation.
pub fn fixed_mrf_recover(
    a: &SensingMatrix,
    y: &DVector<f64>,
    bm_trained: &BoltzmannMachine,
    opts: &InnerOptions,
) -> Result<InnerOutcome> {
    estimate_sparse_signal(a, y, bm_trained, opts)
}

/// Pool a fixed prior from training masks: each mask is fitted by
/// pseudo-likelihood over the full neighborhood graph and the fitted
/// parameters are averaged entrywise.
pub fn train_fixed_bm(
    masks: &[SpinVector],
    spec: NeighborhoodSpec,
    pl_iters: usize,
    pl_step: f64,
) -> Result<BoltzmannMachine> {
    if masks.is_empty() {
        return Err(Error::InvalidConfig("no training masks supplied".into()));
    }
    let n = spec.n_nodes();
    let graph = Graph::full(spec);
    let mut unary_sum = DVector::zeros(n);
    let mut pairwise_sum = vec![0.0; graph.n_edges()];
    for mask in masks {
        if mask.len() != n {
            return Err(Error::InvalidDimension(format!(
                "training mask length {} vs {} nodes",
                mask.len(),
                n
            )));
        }
        let fit = learn_pseudolikelihood(mask, graph.clone(), pl_iters, pl_step)?;
        unary_sum += fit.unary();
        for (acc, w) in pairwise_sum.iter_mut().zip(fit.pairwise()) {
            *acc += w;
        }
    }
    let count = masks.len() as f64;
    unary_sum /= count;
    for w in &mut pairwise_sum {
        *w /= count;
    }
    BoltzmannMachine::new(graph, unary_sum, pairwise_sum)
}

/// Reference estimator that is handed the ground-truth support: one
/// closed-form signal solve with homogeneous parameters.
pub fn oracle_estimate(
    a: &SensingMatrix,
    y: &DVector<f64>,
    s_true: &SpinVector,
    sigma_n: f64,
    nu: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let ones;
    let nu = match nu {
        Some(v) => v,
        None => {
            ones = DVector::from_element(a.cols(), 1.0);
            &ones
        }
    };
    solve_signal_on_support(a, y, s_true, nu, sigma_n.max(SIGMA_FLOOR))
}
