//! Experiment runner: data ingestion, transforms, compression,
//! recovery with selectable solvers, PSNR/runtime reporting, and
//! sweeps over sampling rates and SNR levels.
//!
//! Results land in `results.csv` (one row per solver/cell/trial),
//! `summary.json` (per-cell means), and per-run outer trace CSVs.
//! Everything is deterministic given the config; only the runtime
//! columns vary between runs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{
    adaptive_mrf_recover, fixed_mrf_recover, oracle_estimate, threshold_support, train_fixed_bm,
    OuterOptions, OuterTraceRow,
};
use crate::baselines::omp;
use crate::error::{Error, Result};
use crate::io;
use crate::mrf::{BoltzmannMachine, NeighborhoodSpec, SpinVector};
use crate::recovery::{InnerOptions, SIGMA_FLOOR};
use crate::sensing::{add_noise_snr, seeded_rng, SensingMatrix};
use crate::transforms::{
    dct2_forward, dct2_inverse, haar2_forward, haar2_inverse, Basis, BasisKind, ImageGrid,
};

/// Peak signal-to-noise ratio in dB; identical inputs return the
/// `+infinity` sentinel.
pub fn psnr(x_ref: &DVector<f64>, x_rec: &DVector<f64>, peak: f64) -> Result<f64> {
    if x_ref.len() != x_rec.len() {
        return Err(Error::InvalidDimension(format!(
            "psnr: lengths {} vs {}",
            x_ref.len(),
            x_rec.len()
        )));
    }
    if peak <= 0.0 || !peak.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "psnr: peak must be positive, got {peak}"
        )));
    }
    let mse = (x_ref - x_rec).norm_squared() / x_ref.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR between two images at the reference image's peak.
pub fn psnr_image(img_ref: &ImageGrid, img_rec: &ImageGrid) -> Result<f64> {
    if img_ref.height() != img_rec.height() || img_ref.width() != img_rec.width() {
        return Err(Error::InvalidDimension(format!(
            "psnr: image shapes {}x{} vs {}x{}",
            img_ref.height(),
            img_ref.width(),
            img_rec.height(),
            img_rec.width()
        )));
    }
    psnr(&img_ref.to_vector(), &img_rec.to_vector(), img_ref.peak())
}

fn split_sizes(k: usize, clusters: usize) -> Vec<usize> {
    let base = k / clusters;
    let extra = k % clusters;
    (0..clusters)
        .map(|i| base + usize::from(i < extra))
        .collect()
}

/// Synthetic 1-D structured signal: `k` nonzeros arranged in
/// `cluster_count` contiguous runs separated by at least one zero, at
/// seeded random offsets; values are Gaussian scaled by `amplitude`.
pub fn gen_synthetic_structured(
    n: usize,
    k: usize,
    cluster_count: usize,
    amplitude: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    if k > n {
        return Err(Error::InvalidConfig(format!("k={k} exceeds N={n}")));
    }
    if k == 0 {
        return Ok(DVector::zeros(n));
    }
    if cluster_count == 0 || cluster_count > k {
        return Err(Error::InvalidConfig(format!(
            "cluster_count={cluster_count} must be in 1..=k ({k})"
        )));
    }
    if k + (cluster_count - 1) > n {
        return Err(Error::InvalidConfig(format!(
            "cannot fit {cluster_count} separated runs totaling {k} nonzeros in N={n}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let sizes = split_sizes(k, cluster_count);
    // Distribute the leftover zeros over the c+1 gaps around the runs
    // (one mandatory zero already separates adjacent runs).
    let free = n - k - (cluster_count - 1);
    let mut cuts: Vec<usize> = (0..cluster_count)
        .map(|_| rng.random_range(0..=free))
        .collect();
    cuts.sort_unstable();

    let mut x = DVector::zeros(n);
    let mut pos = 0usize;
    let mut prev_cut = 0usize;
    for (run, &cut) in sizes.iter().zip(&cuts) {
        pos += cut - prev_cut; // leading gap share
        prev_cut = cut;
        for _ in 0..*run {
            x[pos] = amplitude * rng.sample::<f64, _>(StandardNormal);
            pos += 1;
        }
        pos += 1; // mandatory separator
    }
    Ok(x)
}

/// Synthetic 2-D structured signal on an `height`×`width` grid:
/// `k` nonzeros grouped into `blob_count` rectangular patches at
/// seeded random non-overlapping offsets, returned in row-major order.
pub fn gen_synthetic_structured_2d(
    height: usize,
    width: usize,
    k: usize,
    blob_count: usize,
    amplitude: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    let n = height * width;
    if k > n {
        return Err(Error::InvalidConfig(format!("k={k} exceeds N={n}")));
    }
    if k == 0 {
        return Ok(DVector::zeros(n));
    }
    if blob_count == 0 || blob_count > k {
        return Err(Error::InvalidConfig(format!(
            "cluster_count={blob_count} must be in 1..=k ({k})"
        )));
    }
    let mut rng = seeded_rng(seed);
    let sizes = split_sizes(k, blob_count);
    let mut occupied = vec![false; n];
    let mut x = DVector::zeros(n);
    for &size in &sizes {
        // Near-square patch; the last row may be partial.
        let ph = ((size as f64).sqrt().ceil() as usize).clamp(1, height);
        let pw = size.div_ceil(ph);
        if pw > width {
            return Err(Error::InvalidConfig(format!(
                "blob of {size} cells does not fit a {height}x{width} grid"
            )));
        }
        let mut placed = false;
        for _attempt in 0..1000 {
            let r0 = rng.random_range(0..=height - ph);
            let c0 = rng.random_range(0..=width - pw);
            let cells: Vec<usize> = (0..size)
                .map(|t| (r0 + t / pw) * width + (c0 + t % pw))
                .collect();
            if cells.iter().any(|&c| occupied[c]) {
                continue;
            }
            for &c in &cells {
                occupied[c] = true;
                x[c] = amplitude * rng.sample::<f64, _>(StandardNormal);
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::InvalidConfig(format!(
                "could not place a blob of {size} cells without overlap"
            )));
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub k: usize,
    pub clusters: usize,
    pub amplitude: f64,
    /// When present, signals are 2-D blobs on this `[height, width]`
    /// grid (`height·width` must equal `n`) and the grid neighborhood
    /// applies.
    #[serde(default)]
    pub grid: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    /// Directory of PGM images.
    ImageDir(PathBuf),
    /// Directory of single-column CSV vectors.
    VectorDir(PathBuf),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSpec {
    #[default]
    None,
    Dct,
    Haar {
        levels: usize,
    },
    Pca {
        basis_path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiselessKeyword {
    Noiseless,
}

/// One SNR level: a finite value in dB or the noiseless keyword.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnrLevel {
    Db(f64),
    Keyword(NoiselessKeyword),
}

impl SnrLevel {
    pub fn to_db(self) -> f64 {
        match self {
            SnrLevel::Db(v) => v,
            SnrLevel::Keyword(_) => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Adaptive,
    Fixed,
    Oracle,
    Omp,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SolverKind::Adaptive => "adaptive",
            SolverKind::Fixed => "fixed",
            SolverKind::Oracle => "oracle",
            SolverKind::Omp => "omp",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(SolverKind::Adaptive),
            "fixed" => Ok(SolverKind::Fixed),
            "oracle" => Ok(SolverKind::Oracle),
            "omp" => Ok(SolverKind::Omp),
            other => Err(Error::InvalidConfig(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborhoodChoice {
    Chain2,
    Grid8,
}

fn default_trials() -> usize {
    10
}
fn default_training_trials() -> usize {
    10
}
fn default_write_traces() -> bool {
    true
}

/// Declarative description of one sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub transform: TransformSpec,
    pub sampling_rates: Vec<f64>,
    pub snr_levels_db: Vec<SnrLevel>,
    pub solvers: Vec<SolverKind>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    /// Override for the prior's neighborhood; by default 2-D data uses
    /// the 8-neighborhood and 1-D data the 2-neighbor chain.
    #[serde(default)]
    pub neighborhood: Option<NeighborhoodChoice>,
    /// Training-set size for the fixed-prior solver on synthetic data.
    #[serde(default = "default_training_trials")]
    pub training_trials: usize,
    /// Atom budget for OMP; defaults to the known synthetic sparsity
    /// or half the measurement count.
    #[serde(default)]
    pub omp_k_max: Option<usize>,
    #[serde(default = "default_write_traces")]
    pub write_traces: bool,
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One row of `results.csv`.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub solver: SolverKind,
    pub sampling_rate: f64,
    pub snr_db: f64,
    pub trial_index: usize,
    pub psnr_db: f64,
    pub runtime_seconds: f64,
    pub inner_iters_total: usize,
    pub outer_iters: usize,
}

pub const RESULTS_HEADER: &str =
    "solver,rate,snr_db,trial,psnr_db,runtime_s,inner_iters,outer_iters";

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

impl TrialResult {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.solver,
            self.sampling_rate,
            fmt_db(self.snr_db),
            self.trial_index,
            fmt_db(self.psnr_db),
            self.runtime_seconds,
            self.inner_iters_total,
            self.outer_iters
        )
    }
}

/// A loaded/generated test signal plus everything needed to score a
/// reconstruction of it.
#[derive(Debug, Clone)]
struct SignalCase {
    x_true: DVector<f64>,
    /// Original image when the dataset is image-based; reconstruction
    /// error is then measured in the image domain.
    image: Option<ImageGrid>,
    peak: f64,
}

#[derive(Debug, Clone)]
enum TransformOp {
    None,
    Dct {
        height: usize,
        width: usize,
    },
    Haar {
        levels: usize,
        height: usize,
        width: usize,
    },
    Pca {
        basis: Basis,
    },
}

impl TransformOp {
    fn inverse(&self, coeffs: &DVector<f64>, peak: f64) -> Result<DVector<f64>> {
        match self {
            TransformOp::None => Ok(coeffs.clone()),
            TransformOp::Dct { height, width } => {
                Ok(dct2_inverse(coeffs, *height, *width, peak)?.to_vector())
            }
            TransformOp::Haar {
                levels,
                height,
                width,
            } => Ok(haar2_inverse(coeffs, *height, *width, *levels, peak)?.to_vector()),
            TransformOp::Pca { basis } => basis.inverse(coeffs),
        }
    }
}

struct Dataset {
    cases: Vec<SignalCase>,
    /// Signals the fixed prior may train on (thresholded into masks).
    training_signals: Vec<DVector<f64>>,
    n: usize,
    grid_dims: Option<(usize, usize)>,
    transform: TransformOp,
    known_sparsity: Option<usize>,
}

fn signal_peak(x: &DVector<f64>) -> f64 {
    x.amax()
}

fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case(ext))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no .{ext} files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

const TRAINING_SEED_SALT: u64 = 0x7261_696e;
const SIGNAL_SEED_SALT: u64 = 0x7369_676e;
const NOISE_SEED_SALT: u64 = 0x6e6f_6973;

fn mix_seed(base: u64, salt: u64, index: u64) -> u64 {
    // splitmix64 over the combined words; decorrelates nearby indices.
    let mut z = base ^ salt.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn build_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetSpec::Synthetic(spec) => {
            if let Some([h, w]) = spec.grid {
                if h * w != spec.n {
                    return Err(Error::InvalidConfig(format!(
                        "grid {h}x{w} does not match n={}",
                        spec.n
                    )));
                }
            }
            let gen_one = |seed: u64| -> Result<DVector<f64>> {
                match spec.grid {
                    Some([h, w]) => gen_synthetic_structured_2d(
                        h,
                        w,
                        spec.k,
                        spec.clusters,
                        spec.amplitude,
                        seed,
                    ),
                    None => gen_synthetic_structured(
                        spec.n,
                        spec.k,
                        spec.clusters,
                        spec.amplitude,
                        seed,
                    ),
                }
            };
            let mut cases = Vec::with_capacity(config.trials);
            for t in 0..config.trials {
                let x = gen_one(mix_seed(config.base_seed, SIGNAL_SEED_SALT, t as u64))?;
                let peak = signal_peak(&x);
                if peak == 0.0 {
                    return Err(Error::InvalidConfig(
                        "synthetic signal is identically zero".into(),
                    ));
                }
                cases.push(SignalCase {
                    x_true: x,
                    image: None,
                    peak,
                });
            }
            let training_signals = (0..config.training_trials)
                .map(|t| gen_one(mix_seed(config.base_seed, TRAINING_SEED_SALT, t as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset {
                cases,
                training_signals,
                n: spec.n,
                grid_dims: spec.grid.map(|[h, w]| (h, w)),
                transform: TransformOp::None,
                known_sparsity: Some(spec.k),
            })
        }
        DatasetSpec::ImageDir(dir) => {
            let files = list_files(dir, "pgm")?;
            let images: Vec<ImageGrid> = files.iter().map(io::read_pgm).collect::<Result<_>>()?;
            let (h, w) = (images[0].height(), images[0].width());
            for (img, f) in images.iter().zip(&files) {
                if img.height() != h || img.width() != w {
                    return Err(Error::InvalidConfig(format!(
                        "image {} is {}x{}, expected {h}x{w}",
                        f.display(),
                        img.height(),
                        img.width()
                    )));
                }
            }
            let transform = resolve_transform(&config.transform, Some((h, w)))?;
            let mut cases = Vec::with_capacity(config.trials);
            for t in 0..config.trials {
                let img = images[t % images.len()].clone();
                let x_true = forward_transform(&transform, &img)?;
                cases.push(SignalCase {
                    peak: img.peak(),
                    x_true,
                    image: Some(img),
                });
            }
            let training_signals = images
                .iter()
                .map(|img| forward_transform(&transform, img))
                .collect::<Result<Vec<_>>>()?;
            let n = h * w;
            let grid_dims = match transform {
                TransformOp::Pca { .. } | TransformOp::Dct { .. } => None,
                _ => Some((h, w)),
            };
            Ok(Dataset {
                cases,
                training_signals,
                n,
                grid_dims,
                transform,
                known_sparsity: None,
            })
        }
        DatasetSpec::VectorDir(dir) => {
            let files = list_files(dir, "csv")?;
            let vectors: Vec<DVector<f64>> = files
                .iter()
                .map(io::read_vector_csv)
                .collect::<Result<_>>()?;
            let n = vectors[0].len();
            for (v, f) in vectors.iter().zip(&files) {
                if v.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "vector {} has length {}, expected {n}",
                        f.display(),
                        v.len()
                    )));
                }
            }
            if !matches!(config.transform, TransformSpec::None) {
                return Err(Error::InvalidConfig(
                    "transforms apply to image datasets only".into(),
                ));
            }
            let mut cases = Vec::with_capacity(config.trials);
            for t in 0..config.trials {
                let x = vectors[t % vectors.len()].clone();
                let peak = signal_peak(&x);
                if peak == 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "vector case {t} is identically zero"
                    )));
                }
                cases.push(SignalCase {
                    x_true: x,
                    image: None,
                    peak,
                });
            }
            Ok(Dataset {
                training_signals: vectors,
                cases,
                n,
                grid_dims: None,
                transform: TransformOp::None,
                known_sparsity: None,
            })
        }
    }
}

fn resolve_transform(
    spec: &TransformSpec,
    image_dims: Option<(usize, usize)>,
) -> Result<TransformOp> {
    match spec {
        TransformSpec::None => Ok(TransformOp::None),
        TransformSpec::Dct => {
            let (height, width) =
                image_dims.ok_or_else(|| Error::InvalidConfig("dct needs image data".into()))?;
            Ok(TransformOp::Dct { height, width })
        }
        TransformSpec::Haar { levels } => {
            let (height, width) =
                image_dims.ok_or_else(|| Error::InvalidConfig("haar needs image data".into()))?;
            let block = 1usize << *levels;
            if *levels == 0 || height % block != 0 || width % block != 0 {
                return Err(Error::InvalidConfig(format!(
                    "haar with {levels} levels does not divide {height}x{width}"
                )));
            }
            Ok(TransformOp::Haar {
                levels: *levels,
                height,
                width,
            })
        }
        TransformSpec::Pca { basis_path } => {
            let m = io::read_matrix_csv(basis_path)?;
            let n = image_dims.map(|(h, w)| h * w).unwrap_or(m.nrows());
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::InvalidBasis(format!(
                    "basis is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(TransformOp::Pca {
                basis: Basis::new(m, BasisKind::Pca)?,
            })
        }
    }
}

fn forward_transform(op: &TransformOp, img: &ImageGrid) -> Result<DVector<f64>> {
    match op {
        TransformOp::None => Ok(img.to_vector()),
        TransformOp::Dct { .. } => Ok(dct2_forward(img)),
        TransformOp::Haar { levels, .. } => haar2_forward(img, *levels),
        TransformOp::Pca { basis } => basis.forward(&img.to_vector()),
    }
}

fn resolve_neighborhood(config: &ExperimentConfig, ds: &Dataset) -> Result<NeighborhoodSpec> {
    let choice = match config.neighborhood {
        Some(NeighborhoodChoice::Chain2) => return Ok(NeighborhoodSpec::Chain2 { len: ds.n }),
        Some(NeighborhoodChoice::Grid8) => true,
        None => ds.grid_dims.is_some(),
    };
    if choice {
        match ds.grid_dims {
            Some((h, w)) => Ok(NeighborhoodSpec::Grid8 {
                height: h,
                width: w,
            }),
            None => Err(Error::InvalidConfig(
                "grid8 neighborhood requested but the data has no 2-D layout".into(),
            )),
        }
    } else {
        Ok(NeighborhoodSpec::Chain2 { len: ds.n })
    }
}

struct CellOutput {
    result: TrialResult,
    outer_trace: Option<Vec<OuterTraceRow>>,
}

/// Outputs of [`run_experiment`], also written to `output_dir`.
#[derive(Debug)]
pub struct ExperimentReport {
    pub results: Vec<TrialResult>,
    pub results_csv: PathBuf,
    pub summary_json: PathBuf,
}

fn validate_config(config: &ExperimentConfig, n: usize) -> Result<()> {
    if config.trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    if config.sampling_rates.is_empty()
        || config.snr_levels_db.is_empty()
        || config.solvers.is_empty()
    {
        return Err(Error::InvalidConfig(
            "sampling_rates, snr_levels_db and solvers must be non-empty".into(),
        ));
    }
    for &rate in &config.sampling_rates {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sampling rate {rate} outside (0, 1]"
            )));
        }
        let m = (rate * n as f64).round() as usize;
        if m < 1 {
            return Err(Error::InvalidConfig(format!(
                "cell rate={rate}: M = round({rate}·{n}) < 1"
            )));
        }
    }
    Ok(())
}

/// Run the full sweep described by `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let dataset = build_dataset(config)?;
    validate_config(config, dataset.n)?;
    let neighborhood = resolve_neighborhood(config, &dataset)?;

    let fixed_bm: Option<BoltzmannMachine> = if config.solvers.contains(&SolverKind::Fixed) {
        let masks: Vec<SpinVector> = dataset
            .training_signals
            .iter()
            .map(threshold_support)
            .collect();
        let opts = OuterOptions::new(neighborhood);
        Some(train_fixed_bm(
            &masks,
            neighborhood,
            opts.pl_iters,
            opts.pl_step,
        )?)
    } else {
        None
    };

    std::fs::create_dir_all(&config.output_dir)?;
    let traces_dir = config.output_dir.join("traces");
    if config.write_traces {
        std::fs::create_dir_all(&traces_dir)?;
    }

    // One work item per (rate, snr, trial, solver); the measurement
    // instance is shared within a (rate, snr, trial) cell so solver
    // comparisons are paired.
    struct WorkItem {
        order: usize,
        rate_idx: usize,
        snr_idx: usize,
        trial: usize,
        solver: SolverKind,
    }
    let mut items = Vec::new();
    let mut order = 0usize;
    for rate_idx in 0..config.sampling_rates.len() {
        for snr_idx in 0..config.snr_levels_db.len() {
            for trial in 0..config.trials {
                for &solver in &config.solvers {
                    items.push(WorkItem {
                        order,
                        rate_idx,
                        snr_idx,
                        trial,
                        solver,
                    });
                    order += 1;
                }
            }
        }
    }

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("AMRF_THREADS") {
        if let Ok(k) = v.parse::<usize>() {
            if k >= 1 {
                builder = builder.num_threads(k);
            }
        }
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let n = dataset.n;
    let n_snrs = config.snr_levels_db.len();
    let run_item = |item: &WorkItem| -> Result<(usize, CellOutput)> {
        let rate = config.sampling_rates[item.rate_idx];
        let snr = config.snr_levels_db[item.snr_idx].to_db();
        let m = (rate * n as f64).round() as usize;
        let cell_index =
            ((item.rate_idx * n_snrs + item.snr_idx) * config.trials + item.trial) as u64;

        let case = &dataset.cases[item.trial];
        let a = SensingMatrix::bernoulli(m, n, config.base_seed ^ cell_index)?;
        let y0 = a.measure(&case.x_true)?;
        let meas = add_noise_snr(
            &y0,
            snr,
            mix_seed(config.base_seed, NOISE_SEED_SALT, cell_index),
        )?;

        let started = Instant::now();
        let mut outer_trace = None;
        let (x_rec, inner_iters, outer_iters) = match item.solver {
            SolverKind::Adaptive => {
                let opts = OuterOptions::new(neighborhood);
                let out = adaptive_mrf_recover(&a, &meas.y, &opts, Some(&case.x_true))?;
                outer_trace = Some(out.trace);
                (out.x, out.inner_iters_total, out.outer_iters)
            }
            SolverKind::Fixed => {
                let bm = fixed_bm.as_ref().expect("trained before the sweep");
                let out = fixed_mrf_recover(&a, &meas.y, bm, &InnerOptions::default())?;
                (out.x, out.state.iter, 1)
            }
            SolverKind::Oracle => {
                let s_true =
                    SpinVector::from_active(case.x_true.iter().map(|&v| v != 0.0).collect());
                let sigma = meas.true_noise_variance.max(SIGMA_FLOOR);
                (oracle_estimate(&a, &meas.y, &s_true, sigma, None)?, 0, 0)
            }
            SolverKind::Omp => {
                let k_max = config
                    .omp_k_max
                    .or(dataset.known_sparsity)
                    .unwrap_or(m / 2)
                    .clamp(1, m);
                let resid_tol = if meas.is_noiseless() {
                    1e-9 * meas.y.norm()
                } else {
                    (m as f64 * meas.true_noise_variance).sqrt()
                };
                (omp(&a, &meas.y, k_max, resid_tol)?, k_max, 0)
            }
        };
        let runtime_seconds = started.elapsed().as_secs_f64();

        let psnr_db = match (&case.image, &dataset.transform) {
            (Some(img), op) => {
                let rec_pixels = op.inverse(&x_rec, img.peak())?;
                psnr(&img.to_vector(), &rec_pixels, img.peak())?
            }
            (None, _) => psnr(&case.x_true, &x_rec, case.peak)?,
        };

        Ok((
            item.order,
            CellOutput {
                result: TrialResult {
                    solver: item.solver,
                    sampling_rate: rate,
                    snr_db: snr,
                    trial_index: item.trial,
                    psnr_db,
                    runtime_seconds,
                    inner_iters_total: inner_iters,
                    outer_iters,
                },
                outer_trace,
            },
        ))
    };

    let mut outputs: Vec<(usize, CellOutput)> =
        pool.install(|| items.par_iter().map(run_item).collect::<Result<Vec<_>>>())?;
    outputs.sort_by_key(|(order, _)| *order);

    // results.csv in deterministic cell order.
    let mut csv = String::from(RESULTS_HEADER);
    csv.push('\n');
    let mut results = Vec::with_capacity(outputs.len());
    for (_, out) in &outputs {
        csv.push_str(&out.result.to_csv_row());
        csv.push('\n');
        results.push(out.result.clone());
    }
    let results_csv = config.output_dir.join("results.csv");
    std::fs::write(&results_csv, csv)?;

    if config.write_traces {
        for (_, out) in &outputs {
            if let Some(trace) = &out.outer_trace {
                let r = out.result.sampling_rate;
                let s = fmt_db(out.result.snr_db);
                let t = out.result.trial_index;
                let name = format!("adaptive_rate{r}_snr{s}_trial{t}.csv");
                write_outer_trace(traces_dir.join(name), trace)?;
            }
        }
    }

    let summary_json = config.output_dir.join("summary.json");
    std::fs::write(&summary_json, summarize(&results)?)?;

    Ok(ExperimentReport {
        results,
        results_csv,
        summary_json,
    })
}

/// Write an inner-run trace in the interchange CSV layout (`L` is the
/// latent cost at the end of each sweep).
pub fn write_inner_trace(
    path: impl AsRef<Path>,
    trace: &[crate::recovery::InnerTraceRow],
) -> Result<()> {
    let mut out = String::from("iter,L,k,sigma_n,rel_change\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.iter, row.cost_after_signal, row.support_size, row.sigma_n, row.rel_change
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write an outer-loop trace in the interchange CSV layout.
pub fn write_outer_trace(path: impl AsRef<Path>, trace: &[OuterTraceRow]) -> Result<()> {
    let mut out = String::from("outer_iter,mask_density,n_edges,inner_iters,L_final,psnr\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.outer_iter,
            row.mask_density,
            row.n_edges,
            row.inner_iters,
            row.cost_final,
            row.psnr_db.map(fmt_db).unwrap_or_default()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// JSON has no literal for non-finite floats; the sentinel values in
/// summary cells travel as the strings "inf"/"-inf"/"nan" instead of
/// serde_json's silent null.
mod json_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryCell {
    pub solver: String,
    pub rate: f64,
    #[serde(with = "json_f64")]
    pub snr_db: f64,
    pub trials: usize,
    #[serde(with = "json_f64")]
    pub mean_psnr_db: f64,
    #[serde(with = "json_f64")]
    pub std_psnr_db: f64,
    pub mean_runtime_s: f64,
    pub std_runtime_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<SummaryCell>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate per (solver, rate, snr) cell, in first-appearance order.
pub fn summarize(results: &[TrialResult]) -> Result<String> {
    let mut keys: Vec<(SolverKind, f64, f64)> = Vec::new();
    for r in results {
        let key = (r.solver, r.sampling_rate, r.snr_db);
        if !keys.iter().any(|k| {
            k.0 == key.0
                && k.1 == key.1
                && (k.2 == key.2 || (k.2.is_infinite() && key.2.is_infinite()))
        }) {
            keys.push(key);
        }
    }
    let mut cells = Vec::with_capacity(keys.len());
    for (solver, rate, snr) in keys {
        let group: Vec<&TrialResult> = results
            .iter()
            .filter(|r| {
                r.solver == solver
                    && r.sampling_rate == rate
                    && (r.snr_db == snr || (r.snr_db.is_infinite() && snr.is_infinite()))
            })
            .collect();
        let psnrs: Vec<f64> = group.iter().map(|r| r.psnr_db).collect();
        let runtimes: Vec<f64> = group.iter().map(|r| r.runtime_seconds).collect();
        let (mean_psnr_db, std_psnr_db) = mean_std(&psnrs);
        let (mean_runtime_s, std_runtime_s) = mean_std(&runtimes);
        cells.push(SummaryCell {
            solver: solver.to_string(),
            rate,
            snr_db: snr,
            trials: group.len(),
            mean_psnr_db,
            std_psnr_db,
            mean_runtime_s,
            std_runtime_s,
        });
    }
    Ok(serde_json::to_string_pretty(&Summary { cells })?)
}
