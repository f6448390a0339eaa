//! Concept discovery: amortized Bernoulli posteriors over concept
//! indicators, their Binary-Concrete relaxation, mean thresholding for
//! inference and the KL divergence to a sparse Bernoulli prior.

use crate::error::{CfcbmError, Result};
use crate::numerics::{logit, matmul, sigmoid_scalar, Matrix};

/// Probabilities are kept inside `[PROB_FLOOR, 1 - PROB_FLOOR]` so that
/// logits and KL terms stay finite.
pub const PROB_FLOOR: f64 = 1e-7;

#[inline]
pub fn clamp_prob(q: f64) -> f64 {
    q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Whether `sigmoid(a)` falls inside the clamp range, i.e. whether the
/// clamped probability still depends on `a`.
#[inline]
pub fn logit_in_range(a: f64) -> bool {
    let q = sigmoid_scalar(a);
    q > PROB_FLOOR && q < 1.0 - PROB_FLOOR
}

#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliPosterior {
    pub probs: Matrix,
}

impl BernoulliPosterior {
    /// Wraps raw logits; probabilities are clamped.
    pub fn from_logits(logits: &Matrix) -> Self {
        BernoulliPosterior {
            probs: logits.map(|a| clamp_prob(sigmoid_scalar(a))),
        }
    }

    pub fn new(probs: Matrix) -> Result<Self> {
        if let Some(&q) = probs.data().iter().find(|&&q| !(q > 0.0 && q < 1.0)) {
            return Err(CfcbmError::Domain(format!(
                "posterior probability {q} is outside (0, 1)"
            )));
        }
        Ok(BernoulliPosterior { probs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Relaxed,
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSample {
    pub values: Matrix,
    pub mode: SampleMode,
}

/// `sigmoid(embeddings · amortization)`, rows×M.
pub fn posterior_probs(embeddings: &Matrix, amortization: &Matrix) -> Result<BernoulliPosterior> {
    Ok(BernoulliPosterior::from_logits(&matmul(
        embeddings,
        amortization,
    )?))
}

/// One Binary-Concrete sample per entry:
/// `sigmoid((logit(q) + log u − log(1−u)) / temperature)`.
pub fn sample_relaxed(
    posterior: &BernoulliPosterior,
    temperature: f64,
    uniforms: &Matrix,
) -> Result<IndicatorSample> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(CfcbmError::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if uniforms.shape() != posterior.probs.shape() {
        return Err(CfcbmError::dims(
            "relaxed sampler noise",
            uniforms.shape(),
            posterior.probs.shape(),
        ));
    }
    if let Some(&u) = uniforms.data().iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
        return Err(CfcbmError::Parameter(format!(
            "uniform draw {u} is outside (0, 1)"
        )));
    }
    let data = posterior
        .probs
        .data()
        .iter()
        .zip(uniforms.data())
        .map(|(&q, &u)| relaxed_scalar(q, u, temperature))
        .collect();
    Ok(IndicatorSample {
        values: Matrix::from_vec(uniforms.rows(), uniforms.cols(), data)?,
        mode: SampleMode::Relaxed,
    })
}

#[inline]
pub fn relaxed_scalar(q: f64, u: f64, temperature: f64) -> f64 {
    let q = clamp_prob(q);
    let noise = u.ln() - (-u).ln_1p();
    sigmoid_scalar((logit(q) + noise) / temperature)
}

/// d(sample)/d(q) for a sample `z` drawn at probability `q`.
#[inline]
pub fn relaxed_grad_wrt_prob(q: f64, z: f64, temperature: f64) -> f64 {
    z * (1.0 - z) / (temperature * q * (1.0 - q))
}

/// Hard indicators: 1 where the posterior mean exceeds `tau` (strictly).
pub fn threshold_mean(posterior: &BernoulliPosterior, tau: f64) -> IndicatorSample {
    IndicatorSample {
        values: posterior.probs.map(|q| if q > tau { 1.0 } else { 0.0 }),
        mode: SampleMode::Hard,
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CfcbmError::Parameter(format!(
            "prior probability must lie in (0, 1), got {alpha}"
        )))
    }
}

/// KL(Bernoulli(q) ‖ Bernoulli(alpha)) for one entry.
#[inline]
pub fn kl_entry(q: f64, alpha: f64) -> f64 {
    let q = clamp_prob(q);
    q * (q / alpha).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - alpha)).ln()
}

/// d KL / d q.
#[inline]
pub fn kl_entry_grad(q: f64, alpha: f64) -> f64 {
    let q = clamp_prob(q);
    logit(q) - logit(alpha)
}

/// Per-row KL summed over concepts.
pub fn kl_to_prior(posterior: &BernoulliPosterior, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let p = &posterior.probs;
    Ok((0..p.rows())
        .map(|r| p.row(r).iter().map(|&q| kl_entry(q, alpha)).sum())
        .collect())
}
