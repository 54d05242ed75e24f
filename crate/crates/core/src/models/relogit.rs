use crate::error::{check_dim, Error, Result};
use crate::math::{log_normal_pdf, sigmoid, softplus};
use crate::model::{DataPoint, LatentVariableModel, ProposalDist};
use crate::proposals::{laplace_1d, LaplaceOptions};

/// Random-effect logistic regression.
///
/// `z ~ N(0, τ²)`, `y_t ~ Bernoulli(σ(z + w_0 + wᵀx_t))` for `t = 1..T`,
/// with `θ = (η, w_0, w_1..w_D)` and `τ² = softplus(η)`.
#[derive(Debug, Clone)]
pub struct RandomEffectLogisticModel {
    feature_dim: usize,
    obs_per_point: usize,
    laplace: LaplaceOptions,
}

impl RandomEffectLogisticModel {
    pub fn new(feature_dim: usize, obs_per_point: usize) -> Self {
        Self {
            feature_dim,
            obs_per_point,
            laplace: LaplaceOptions::default(),
        }
    }

    pub fn with_laplace_options(mut self, opts: LaplaceOptions) -> Self {
        self.laplace = opts;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn obs_per_point(&self) -> usize {
        self.obs_per_point
    }

    /// `τ²` for the given `θ`.
    pub fn tau2(theta: &[f64]) -> f64 {
        softplus(theta[0])
    }

    /// Fixed-effect logits `a_t = w_0 + wᵀx_t`.
    fn offsets<'a>(&self, x: &'a DataPoint, theta: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        let d = self.feature_dim;
        let w0 = theta[1];
        let w = &theta[2..];
        (0..self.obs_per_point).map(move |t| {
            let row = &x.features[t * d..(t + 1) * d];
            w0 + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
        })
    }
}

impl LatentVariableModel for RandomEffectLogisticModel {
    fn param_dim(&self) -> usize {
        self.feature_dim + 2
    }

    fn latent_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["eta".to_string(), "w0".to_string()];
        names.extend((1..=self.feature_dim).map(|i| format!("w{i}")));
        names
    }

    fn check_point(&self, x: &DataPoint) -> Result<()> {
        check_dim("responses", self.obs_per_point, x.responses.len())?;
        check_dim(
            "features",
            self.obs_per_point * self.feature_dim,
            x.features.len(),
        )?;
        if x.responses.iter().any(|y| *y != 0.0 && *y != 1.0) {
            return Err(Error::InvalidArgument(
                "logistic responses must be 0 or 1".into(),
            ));
        }
        Ok(())
    }

    fn log_joint(&self, x: &DataPoint, z: &[f64], theta: &[f64]) -> Result<f64> {
        self.check_inputs(x, z, theta)?;
        let z = z[0];
        let tau2 = Self::tau2(theta);
        let mut lp = log_normal_pdf(z, 0.0, tau2);
        for (a, y) in self.offsets(x, theta).zip(&x.responses) {
            let u = z + a;
            // y log σ(u) + (1 - y) log(1 - σ(u)) = y u - softplus(u)
            lp += y * u - softplus(u);
        }
        Ok(lp)
    }

    fn log_joint_with_grad(
        &self,
        x: &DataPoint,
        z: &[f64],
        theta: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_inputs(x, z, theta)?;
        check_dim("gradient buffer", self.param_dim(), grad.len())?;
        let d = self.feature_dim;
        let z = z[0];
        let tau2 = Self::tau2(theta);
        let mut lp = log_normal_pdf(z, 0.0, tau2);

        grad.fill(0.0);
        // d/dη log N(z | 0, τ²) with dτ²/dη = σ(η)
        grad[0] = sigmoid(theta[0]) * (z * z - tau2) / (2.0 * tau2 * tau2);
        for (t, (a, y)) in self.offsets(x, theta).zip(&x.responses).enumerate() {
            let u = z + a;
            lp += y * u - softplus(u);
            let r = y - sigmoid(u);
            grad[1] += r;
            let row = &x.features[t * d..(t + 1) * d];
            for (g, xi) in grad[2..].iter_mut().zip(row) {
                *g += r * xi;
            }
        }
        Ok(lp)
    }

    fn build_proposal(&self, x: &DataPoint, theta: &[f64]) -> Result<ProposalDist> {
        check_dim("theta", self.param_dim(), theta.len())?;
        self.check_point(x)?;
        let tau2 = Self::tau2(theta);
        let offsets: Vec<f64> = self.offsets(x, theta).collect();
        let grad_hess = |z: f64| {
            let mut g = -z / tau2;
            let mut h = -1.0 / tau2;
            for (a, y) in offsets.iter().zip(&x.responses) {
                let s = sigmoid(z + a);
                g += y - s;
                h -= s * (1.0 - s);
            }
            (g, h)
        };
        laplace_1d(grad_hess, 0.0, self.laplace)
    }
}
