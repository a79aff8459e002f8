//! Condition diffusion sampling for training (CDST): a schedule that blends a
//! fixed training condition with draws from the backend's fitted condition
//! distribution, plus the statistical toolkit used to validate that
//! distribution (univariate and multivariate normality tests, exact earth
//! mover's distance, and cross-domain confidence scores).

mod confidence;
mod emd;
mod stats;

pub use confidence::{confidence_from_embeddings, confidence_score, ConfidenceReport};
pub use emd::{emd, EmdError};
pub use stats::{mardia_test, shapiro_wilk, MardiaResult, StatsError};

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CdstError {
    #[error("covariance is not symmetric within 1e-8 (max asymmetry {0})")]
    NotSymmetric(f64),
    #[error("covariance has eigenvalue {0} below -1e-8; not positive semidefinite")]
    NotPsd(f64),
    #[error("need at least 2 samples to fit a distribution, got {0}")]
    TooFewSamples(usize),
    #[error("iteration {iter} outside schedule range 0..={s}")]
    ScheduleRange { iter: usize, s: usize },
    #[error("schedule horizon must be at least 1")]
    BadHorizon,
    #[error("condition dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("distribution file corrupt: {0}")]
    Corrupt(String),
}

/// Multivariate normal model of the backend's condition space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionDistribution {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    /// Factor F with F Fᵀ = covariance, used for sampling.
    factor: DMatrix<f64>,
}

impl ConditionDistribution {
    /// Validates symmetry and positive semidefiniteness (within 1e-8) and
    /// precomputes the sampling factor.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, CdstError> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(CdstError::DimMismatch(covariance.nrows(), d));
        }
        let mut max_asym: f64 = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                max_asym = max_asym.max((covariance[(i, j)] - covariance[(j, i)]).abs());
            }
        }
        if max_asym > 1e-8 {
            return Err(CdstError::NotSymmetric(max_asym));
        }
        // Symmetrize before decomposing so the factor is well defined.
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        if let Some(min) = eig
            .eigenvalues
            .iter()
            .cloned()
            .min_by(|a, b| a.total_cmp(b))
        {
            if min < -1e-8 {
                return Err(CdstError::NotPsd(min));
            }
        }
        let mut factor = eig.eigenvectors.clone();
        for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
            let scale = lambda.max(0.0).sqrt();
            for r in 0..d {
                factor[(r, c)] *= scale;
            }
        }
        Ok(Self {
            mean,
            covariance,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// One draw, deterministic per seed.
    pub fn sample(&self, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        &self.mean + &self.factor * z
    }

    /// Writes `distribution.json`, `mean.bin`, `covariance.bin` into `dir`
    /// and returns a digest over all three.
    pub fn save(&self, dir: &Path) -> Result<String, CdstError> {
        fs::create_dir_all(dir).map_err(|e| CdstError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let header = DistributionHeader {
            version: 1,
            dim: self.dim(),
        };
        let header_bytes = serde_json::to_vec_pretty(&header)?;
        let mean_bytes: Vec<u8> = self.mean.iter().flat_map(|v| v.to_le_bytes()).collect();
        let cov_bytes: Vec<u8> = self
            .covariance
            .row_iter()
            .flat_map(|row| {
                row.iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect::<Vec<u8>>()
            })
            .collect();
        for (name, bytes) in [
            ("distribution.json", &header_bytes),
            ("mean.bin", &mean_bytes),
            ("covariance.bin", &cov_bytes),
        ] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| CdstError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        let mut hasher = Sha256::new();
        hasher.update(&header_bytes);
        hasher.update(&mean_bytes);
        hasher.update(&cov_bytes);
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    pub fn load(dir: &Path) -> Result<Self, CdstError> {
        let header_path = dir.join("distribution.json");
        let header_bytes = fs::read(&header_path).map_err(|e| CdstError::Io {
            path: header_path.display().to_string(),
            source: e,
        })?;
        let header: DistributionHeader = serde_json::from_slice(&header_bytes)?;
        let d = header.dim;
        let read_f64s = |name: &str, expected: usize| -> Result<Vec<f64>, CdstError> {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| CdstError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            if bytes.len() != expected * 8 {
                return Err(CdstError::Corrupt(format!(
                    "{name}: {} bytes, expected {}",
                    bytes.len(),
                    expected * 8
                )));
            }
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mean = DVector::from_vec(read_f64s("mean.bin", d)?);
        let cov_data = read_f64s("covariance.bin", d * d)?;
        let covariance = DMatrix::from_fn(d, d, |r, c| cov_data[r * d + c]);
        Self::new(mean, covariance)
    }
}

#[derive(Serialize, Deserialize)]
struct DistributionHeader {
    version: u32,
    dim: usize,
}

/// Fits a multivariate normal to sample rows: sample mean and covariance
/// with a small ridge on the diagonal.
pub fn fit_condition_distribution(samples: &DMatrix<f64>) -> Result<ConditionDistribution, CdstError> {
    let n = samples.nrows();
    if n < 2 {
        return Err(CdstError::TooFewSamples(n));
    }
    let d = samples.ncols();
    let mean_row = samples.row_mean();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean_row;
    }
    let mut covariance = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..d {
        covariance[(i, i)] += 1e-6;
    }
    ConditionDistribution::new(mean_row.transpose(), covariance)
}

/// Fixed condition, fitted distribution, and schedule horizon for CDST.
pub struct CdstState {
    pub condition: DVector<f64>,
    pub dist: ConditionDistribution,
    pub horizon: usize,
}

impl CdstState {
    pub fn new(
        condition: DVector<f64>,
        dist: ConditionDistribution,
        horizon: usize,
    ) -> Result<Self, CdstError> {
        if horizon < 1 {
            return Err(CdstError::BadHorizon);
        }
        if condition.len() != dist.dim() {
            return Err(CdstError::DimMismatch(condition.len(), dist.dim()));
        }
        Ok(Self {
            condition,
            dist,
            horizon,
        })
    }
}

/// Normalized blend weights at `iter` of `s` total: alpha and beta are the
/// square-root ramps, returned as (wC, wD) with wC + wD = 1.
pub fn schedule(iter: usize, s: usize) -> Result<(f64, f64), CdstError> {
    if s < 1 {
        return Err(CdstError::BadHorizon);
    }
    if iter > s {
        return Err(CdstError::ScheduleRange { iter, s });
    }
    let frac = iter as f64 / s as f64;
    let alpha = (1.0 - frac).sqrt();
    let beta = frac.sqrt();
    Ok((alpha / (alpha + beta), beta / (alpha + beta)))
}

/// The training condition at `iter`: the schedule's blend of the fixed
/// condition with one distribution draw. Deterministic per seed.
pub fn sample_condition(state: &CdstState, iter: usize, seed: u64) -> Result<DVector<f64>, CdstError> {
    let (w_c, w_d) = schedule(iter, state.horizon)?;
    let draw = state.dist.sample(seed);
    Ok(&state.condition * w_c + draw * w_d)
}
