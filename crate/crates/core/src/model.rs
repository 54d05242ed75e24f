//! The contract every latent-variable model implements.
//!
//! A model supplies the joint density `log p_θ(x, z)`, its gradient in `θ`
//! and a per-datapoint diagonal Gaussian proposal `q(z; x)`. Estimators are
//! written once against [`LatentVariableModel`].

use crate::error::{check_dim, Error, Result};
use crate::math::LN_2PI;
use crate::rng::RandomStream;

/// One observation unit. Layout (`features` row-major `T x D`, `responses`
/// of length `T`) is fixed by the owning dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub features: Vec<f64>,
    pub responses: Vec<f64>,
}

impl DataPoint {
    pub fn new(features: Vec<f64>, responses: Vec<f64>) -> Self {
        Self {
            features,
            responses,
        }
    }

    /// A point with a single real response and no features.
    pub fn scalar(x: f64) -> Self {
        Self {
            features: Vec::new(),
            responses: vec![x],
        }
    }
}

/// A collection of data points sharing one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub obs_per_point: usize,
    pub points: Vec<DataPoint>,
}

impl Dataset {
    pub fn new(feature_dim: usize, obs_per_point: usize, points: Vec<DataPoint>) -> Result<Self> {
        for p in &points {
            check_dim("responses", obs_per_point, p.responses.len())?;
            check_dim("features", obs_per_point * feature_dim, p.features.len())?;
        }
        Ok(Self {
            feature_dim,
            obs_per_point,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Diagonal Gaussian proposal `q(z; x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalDist {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl ProposalDist {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dim("proposal variance", mean.len(), var.len())?;
        if let Some(v) = var.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "proposal variance must be positive and finite, got {v}"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("proposal mean must be finite".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.mean.len());
        self.mean
            .iter()
            .zip(&self.var)
            .zip(z)
            .map(|((m, v), z)| -0.5 * (LN_2PI + v.ln()) - 0.5 * (z - m) * (z - m) / v)
            .sum()
    }

    /// Fills `out` with one draw.
    pub fn sample_into(&self, stream: &mut RandomStream, out: &mut [f64]) {
        for ((o, m), v) in out.iter_mut().zip(&self.mean).zip(&self.var) {
            *o = m + v.sqrt() * stream.normal();
        }
    }
}

/// Checked wrapper for [`ProposalDist::log_density`].
pub fn log_proposal_density(q: &ProposalDist, z: &[f64]) -> Result<f64> {
    check_dim("latent", q.dim(), z.len())?;
    Ok(q.log_density(z))
}

/// A model `p_θ(x, z) = p_θ(x | z) p_θ(z)` with a local latent `z` per point.
///
/// Implementations must be pure: estimators call them concurrently.
pub trait LatentVariableModel: Sync {
    fn param_dim(&self) -> usize;

    fn latent_dim(&self) -> usize;

    /// Human-readable parameter names in `θ` order.
    fn param_names(&self) -> Vec<String>;

    /// Validates the layout of one data point.
    fn check_point(&self, x: &DataPoint) -> Result<()>;

    /// `log p_θ(x | z) + log p_θ(z)`.
    fn log_joint(&self, x: &DataPoint, z: &[f64], theta: &[f64]) -> Result<f64>;

    /// `∇_θ log p_θ(x, z)` written into `grad`; returns the log joint.
    fn log_joint_with_grad(
        &self,
        x: &DataPoint,
        z: &[f64],
        theta: &[f64],
        grad: &mut [f64],
    ) -> Result<f64>;

    fn grad_log_joint(&self, x: &DataPoint, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.param_dim()];
        self.log_joint_with_grad(x, z, theta, &mut g)?;
        Ok(g)
    }

    /// Proposal approximating `p_θ(z | x)`.
    fn build_proposal(&self, x: &DataPoint, theta: &[f64]) -> Result<ProposalDist>;

    fn check_inputs(&self, x: &DataPoint, z: &[f64], theta: &[f64]) -> Result<()> {
        check_dim("theta", self.param_dim(), theta.len())?;
        check_dim("latent", self.latent_dim(), z.len())?;
        self.check_point(x)
    }
}
