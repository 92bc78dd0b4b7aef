//! Generator and discriminator loss terms.
//!
//! Every probability is clamped to `[EPS, 1 - EPS]` before taking a log, so
//! all losses and their gradients stay finite. Each loss has a `_grad`
//! companion returning the gradient with respect to its input.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Perceptual (L1) weight.
    pub lambda1: f64,
    /// Surrogate forensics weight.
    pub lambda2: f64,
    /// Transcription weight.
    pub lambda3: f64,
    /// Adversarial weight.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 1e-4, lambda3: 1.0, lambda4: 0.01 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64) -> Result<Self> {
        let w = LossWeights { lambda1, lambda2, lambda3, lambda4 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("losses.{name}"), format!("weight must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// `mean log(1 - d)`; saturates when the discriminator is confident.
    Paper,
    /// `-mean log(d)`; same fixed point, stronger early gradients.
    #[default]
    NonSaturating,
}

/// Per-term values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub perceptual: f64,
    pub forensics: f64,
    pub transcription: f64,
    pub adversarial: f64,
    pub total: f64,
    pub disc_loss: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.perceptual, self.forensics, self.transcription, self.adversarial, self.total, self.disc_loss]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorTerms {
    pub perceptual: f64,
    pub forensics: f64,
    pub transcription: f64,
    pub adversarial: f64,
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Derivative of `log(clamp(p))`; zero where the clamp is active.
fn dlog_clamped(p: f64) -> f64 {
    if (EPS..=1.0 - EPS).contains(&p) {
        1.0 / p
    } else {
        0.0
    }
}

fn same_shape<T>(x: &Array3<T>, y: &Array3<T>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("loss inputs differ in shape: {:?} vs {:?}", x.dim(), y.dim())));
    }
    Ok(())
}

/// Mean absolute difference over every sample of every item.
pub fn perceptual_loss<T: Real>(x: &Array3<T>, y: &Array3<T>) -> Result<f64> {
    same_shape(x, y)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = x.iter().zip(y.iter()).map(|(&a, &b)| (a - b).to_f64_lossy().abs()).sum();
    Ok(s / x.len() as f64)
}

/// Gradient of [`perceptual_loss`] with respect to `y` (subgradient 0 at ties).
pub fn perceptual_loss_grad<T: Real>(x: &Array3<T>, y: &Array3<T>) -> Result<Array3<T>> {
    same_shape(x, y)?;
    let scale = T::lit(1.0 / x.len().max(1) as f64);
    let mut g = y - x;
    g.mapv_inplace(|d| {
        if d > T::zero() {
            scale
        } else if d < T::zero() {
            -scale
        } else {
            T::zero()
        }
    });
    Ok(g)
}

/// `-mean log(clamp(p))` over an `[M, B]` matrix of P(real).
pub fn forensics_loss(probs_real: &Array2<f64>) -> f64 {
    neg_mean_log(probs_real.iter().copied(), probs_real.len())
}

pub fn forensics_loss_grad(probs_real: &Array2<f64>) -> Array2<f64> {
    let n = probs_real.len().max(1) as f64;
    probs_real.mapv(|p| -dlog_clamped(p) / n)
}

fn neg_mean_log(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    -it.map(|p| clamp_p(p).ln()).sum::<f64>() / n as f64
}

pub fn adversarial_loss_g(d_on_attacked: &Array1<f64>, form: AdversarialForm) -> f64 {
    let n = d_on_attacked.len();
    match form {
        AdversarialForm::NonSaturating => neg_mean_log(d_on_attacked.iter().copied(), n),
        AdversarialForm::Paper => -neg_mean_log(d_on_attacked.iter().map(|&d| 1.0 - d), n),
    }
}

pub fn adversarial_loss_g_grad(d_on_attacked: &Array1<f64>, form: AdversarialForm) -> Array1<f64> {
    let n = d_on_attacked.len().max(1) as f64;
    match form {
        AdversarialForm::NonSaturating => d_on_attacked.mapv(|d| -dlog_clamped(d) / n),
        AdversarialForm::Paper => d_on_attacked.mapv(|d| -dlog_clamped(1.0 - d) / n),
    }
}

/// Standard binary cross-entropy: real pushed to 1, attacked to 0.
pub fn discriminator_loss(d_real: &Array1<f64>, d_attacked: &Array1<f64>) -> f64 {
    neg_mean_log(d_real.iter().copied(), d_real.len())
        + neg_mean_log(d_attacked.iter().map(|&d| 1.0 - d), d_attacked.len())
}

/// Gradients of [`discriminator_loss`] with respect to `(d_real, d_attacked)`.
pub fn discriminator_loss_grad(d_real: &Array1<f64>, d_attacked: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let nr = d_real.len().max(1) as f64;
    let na = d_attacked.len().max(1) as f64;
    (
        d_real.mapv(|d| -dlog_clamped(d) / nr),
        d_attacked.mapv(|d| dlog_clamped(1.0 - d) / na),
    )
}

pub fn total_generator_loss(terms: &GeneratorTerms, w: &LossWeights) -> f64 {
    w.lambda1 * terms.perceptual
        + w.lambda2 * terms.forensics
        + w.lambda3 * terms.transcription
        + w.lambda4 * terms.adversarial
}

pub fn breakdown(terms: &GeneratorTerms, w: &LossWeights, disc_loss: f64) -> LossBreakdown {
    LossBreakdown {
        perceptual: terms.perceptual,
        forensics: terms.forensics,
        transcription: terms.transcription,
        adversarial: terms.adversarial,
        total: total_generator_loss(terms, w),
        disc_loss,
    }
}
