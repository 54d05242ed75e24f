use crate::error::{check_dim, Result};
use crate::math::log_normal_pdf;
use crate::model::{DataPoint, LatentVariableModel, ProposalDist};

/// Proposal used by [`ConjugateGaussianModel`].
#[derive(Debug, Clone, PartialEq)]
pub enum ConjugateProposal {
    /// The exact posterior `p(z | x, θ)`: every importance weight equals `p(x)`.
    ExactPosterior,
    /// A fixed Gaussian independent of `x` and `θ`.
    Fixed { mean: f64, var: f64 },
}

/// Linear-Gaussian model with closed-form evidence.
///
/// `z ~ N(μ_0, τ_0²)`, `x | z ~ N(z, σ²)`, with
/// `θ = (μ_0, log τ_0², log σ²)`. The evidence is `x ~ N(μ_0, τ_0² + σ²)`.
#[derive(Debug, Clone)]
pub struct ConjugateGaussianModel {
    proposal: ConjugateProposal,
}

impl ConjugateGaussianModel {
    pub fn new(proposal: ConjugateProposal) -> Self {
        Self { proposal }
    }

    pub fn exact() -> Self {
        Self::new(ConjugateProposal::ExactPosterior)
    }

    pub fn proposal(&self) -> &ConjugateProposal {
        &self.proposal
    }

    /// Exact posterior `N(m, v)` of `z` given `x`.
    pub fn posterior(theta: &[f64], x: f64) -> (f64, f64) {
        let (mu0, tau2, sigma2) = (theta[0], theta[1].exp(), theta[2].exp());
        let v = 1.0 / (1.0 / tau2 + 1.0 / sigma2);
        let m = v * (mu0 / tau2 + x / sigma2);
        (m, v)
    }
}

/// `log N(x | μ_0, τ_0² + σ²)`.
pub fn conjugate_log_evidence(theta: &[f64], x: f64) -> f64 {
    log_normal_pdf(x, theta[0], theta[1].exp() + theta[2].exp())
}

impl LatentVariableModel for ConjugateGaussianModel {
    fn param_dim(&self) -> usize {
        3
    }

    fn latent_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu0".into(), "log_tau2".into(), "log_sigma2".into()]
    }

    fn check_point(&self, x: &DataPoint) -> Result<()> {
        check_dim("responses", 1, x.responses.len())?;
        check_dim("features", 0, x.features.len())
    }

    fn log_joint(&self, x: &DataPoint, z: &[f64], theta: &[f64]) -> Result<f64> {
        self.check_inputs(x, z, theta)?;
        Ok(log_normal_pdf(z[0], theta[0], theta[1].exp())
            + log_normal_pdf(x.responses[0], z[0], theta[2].exp()))
    }

    fn log_joint_with_grad(
        &self,
        x: &DataPoint,
        z: &[f64],
        theta: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_inputs(x, z, theta)?;
        check_dim("gradient buffer", 3, grad.len())?;
        let (z, xv) = (z[0], x.responses[0]);
        let (tau2, sigma2) = (theta[1].exp(), theta[2].exp());
        let dz = z - theta[0];
        let dx = xv - z;
        grad[0] = dz / tau2;
        grad[1] = -0.5 + 0.5 * dz * dz / tau2;
        grad[2] = -0.5 + 0.5 * dx * dx / sigma2;
        Ok(log_normal_pdf(z, theta[0], tau2) + log_normal_pdf(xv, z, sigma2))
    }

    fn build_proposal(&self, x: &DataPoint, theta: &[f64]) -> Result<ProposalDist> {
        check_dim("theta", 3, theta.len())?;
        self.check_point(x)?;
        match self.proposal {
            ConjugateProposal::ExactPosterior => {
                let (m, v) = Self::posterior(theta, x.responses[0]);
                ProposalDist::new(vec![m], vec![v])
            }
            ConjugateProposal::Fixed { mean, var } => ProposalDist::new(vec![mean], vec![var]),
        }
    }
}
