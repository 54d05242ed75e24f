//! Laplace-approximation proposals.
//!
//! For a scalar latent with strictly log-concave unnormalized posterior
//! `f(z) = log p_θ(x, z)`, the proposal is `N(ẑ, -1/f''(ẑ))` where `ẑ` is the
//! mode. The mode is found by Newton's method safeguarded with a bracket, so
//! a bad Newton step falls back to bisection instead of diverging.

use crate::error::{Error, Result};
use crate::model::ProposalDist;

#[derive(Debug, Clone, Copy)]
pub struct LaplaceOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

/// Finds the mode of a 1-D log-concave density given `z -> (f'(z), f''(z))`.
pub fn newton_mode_1d<F>(grad_hess: F, start: f64, opts: LaplaceOptions) -> Result<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    let (g0, _) = grad_hess(start);
    if !g0.is_finite() {
        return Err(Error::LaplaceFailure(format!("non-finite gradient at z = {start}")));
    }
    if g0 == 0.0 {
        return Ok(start);
    }

    // Bracket the root of f' by stepping downhill in |f'|.
    let dir = g0.signum();
    let (mut lo, mut hi) = (start, start);
    let mut step = 1.0;
    let mut found = false;
    for _ in 0..200 {
        let probe = start + dir * step;
        let (g, _) = grad_hess(probe);
        if !g.is_finite() {
            return Err(Error::LaplaceFailure(format!("non-finite gradient at z = {probe}")));
        }
        if g.signum() != dir || g == 0.0 {
            if dir > 0.0 {
                hi = probe;
            } else {
                lo = probe;
            }
            found = true;
            break;
        }
        if dir > 0.0 {
            lo = probe;
        } else {
            hi = probe;
        }
        step *= 2.0;
    }
    if !found {
        return Err(Error::LaplaceFailure("could not bracket the posterior mode".into()));
    }

    let mut z = start.clamp(lo, hi);
    for _ in 0..opts.max_iter {
        let (g, h) = grad_hess(z);
        if g == 0.0 {
            return Ok(z);
        }
        if g > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let newton = if h < 0.0 { z - g / h } else { f64::NAN };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - z).abs() <= opts.tol * (1.0 + z.abs()) || (hi - lo) <= opts.tol * (1.0 + z.abs()) {
            return Ok(next);
        }
        z = next;
    }
    Err(Error::LaplaceFailure(format!(
        "Newton iteration did not converge in {} steps (bracket [{lo}, {hi}])",
        opts.max_iter
    )))
}

/// Laplace proposal for a scalar latent.
pub fn laplace_1d<F>(grad_hess: F, start: f64, opts: LaplaceOptions) -> Result<ProposalDist>
where
    F: Fn(f64) -> (f64, f64),
{
    let mode = newton_mode_1d(&grad_hess, start, opts)?;
    let (_, h) = grad_hess(mode);
    if !(h < 0.0 && h.is_finite()) {
        return Err(Error::LaplaceFailure(format!(
            "curvature at mode is not negative: f''({mode}) = {h}"
        )));
    }
    ProposalDist::new(vec![mode], vec![-1.0 / h])
}
