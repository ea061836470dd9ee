//! The three DB-VAE objectives and their gated combination.
//!
//! * classification: mean binary cross-entropy on the logit, over every example;
//! * latent: KL divergence of `q(z|x)` from `N(0, I)`, over face examples only;
//! * reconstruction: mean squared error between image and decoder output,
//!   over face examples only.
//!
//! `total = classification + w_kl * kl + w_recon * reconstruction`.
//!
//! Non-faces contribute nothing to the latent or reconstruction terms, so the
//! decoder never receives gradient from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DecoderParams, EncoderVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (m, l) = (tape.input_ref(mu), tape.input_ref(logvar));
    let z = tape.reparameterize(m, l, eps.clone())?;
    Ok(tape.value(z).clone())
}

/// Batch mean of `0.5 * sum_i (exp(logvar_i) + mu_i^2 - 1 - logvar_i)`.
pub fn kl_loss(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (m, l) = (tape.input_ref(mu), tape.input_ref(logvar));
    let v = tape.kl_divergence(m, l)?;
    tape.value(v).item()
}

/// Mean squared error over all elements.
pub fn recon_loss(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.input_ref(x), tape.input_ref(xhat));
    let v = tape.mse(a, b)?;
    tape.value(v).item()
}

/// Mean binary cross-entropy computed from logits.
pub fn class_loss(labels: &[f64], logits: &Tensor) -> Result<f64> {
    check_labels(labels)?;
    let mut tape = Tape::new();
    let l = tape.input_ref(logits);
    let v = tape.bce_with_logits(l, labels)?;
    tape.value(v).item()
}

fn check_labels(labels: &[f64]) -> Result<()> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub kl: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kl: 0.005,
            recon: 1.0,
        }
    }
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub kl: f64,
    pub reconstruction: f64,
}

impl LossBreakdown {
    pub fn combine(classification: f64, kl: f64, reconstruction: f64, w: LossWeights) -> Self {
        LossBreakdown {
            total: classification + w.kl * kl + w.recon * reconstruction,
            classification,
            kl,
            reconstruction,
        }
    }
}

/// Tape handles for one recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct RecordedObjective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Records the gated DB-VAE objective on `tape`.
///
/// `eps` holds one standard-normal row per example (`[N, k]`); only face rows
/// are used. `decoder` may be `None` only when the batch has no faces.
pub fn record_objective<'a>(
    tape: &mut Tape<'a>,
    images: Var,
    labels: &[f64],
    enc: EncoderVars,
    decoder: Option<&'a DecoderParams>,
    eps: &Tensor,
    weights: LossWeights,
) -> Result<RecordedObjective> {
    check_labels(labels)?;
    let class = tape.bce_with_logits(enc.logit, labels)?;
    let faces: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == 1.0)
        .map(|(i, _)| i)
        .collect();
    let classification = tape.value(class).item()?;
    if faces.is_empty() {
        let total = tape.weighted_sum(&[(class, 1.0)])?;
        return Ok(RecordedObjective {
            total,
            breakdown: LossBreakdown::combine(classification, 0.0, 0.0, weights),
        });
    }
    let decoder = decoder.ok_or_else(|| {
        Error::InvalidArgument("batch contains faces but no decoder was supplied".into())
    })?;
    let mu = tape.gather_rows(enc.mu, &faces)?;
    let logvar = tape.gather_rows(enc.logvar, &faces)?;
    let kl = tape.kl_divergence(mu, logvar)?;
    let z = tape.reparameterize(mu, logvar, eps.gather_rows(&faces))?;
    let xhat = decoder.forward_tape(tape, z)?;
    let x = tape.gather_rows(images, &faces)?;
    let recon = tape.mse(xhat, x)?;
    let breakdown = LossBreakdown::combine(
        classification,
        tape.value(kl).item()?,
        tape.value(recon).item()?,
        weights,
    );
    let total = tape.weighted_sum(&[(class, 1.0), (kl, weights.kl), (recon, weights.recon)])?;
    Ok(RecordedObjective { total, breakdown })
}

#[allow(clippy::too_many_arguments)]
/// Evaluates the gated objective from already-computed model outputs.
///
/// `xhat` holds one reconstruction row per example; rows of non-faces are
/// ignored. `face_indicator` must equal the labels.
pub fn total_loss(
    images: &Tensor,
    labels: &[f64],
    face_indicator: &[bool],
    logits: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    xhat: &Tensor,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    check_labels(labels)?;
    if face_indicator.len() != labels.len()
        || face_indicator
            .iter()
            .zip(labels)
            .any(|(&f, &y)| f != (y == 1.0))
    {
        return Err(Error::InvalidArgument(
            "face indicator must match labels".into(),
        ));
    }
    let classification = class_loss(labels, logits)?;
    let faces: Vec<usize> = (0..labels.len()).filter(|&i| face_indicator[i]).collect();
    if faces.is_empty() {
        return Ok(LossBreakdown::combine(classification, 0.0, 0.0, weights));
    }
    let kl = kl_loss(&mu.gather_rows(&faces), &logvar.gather_rows(&faces))?;
    let recon = recon_loss(&images.gather_rows(&faces), &xhat.gather_rows(&faces))?;
    Ok(LossBreakdown::combine(classification, kl, recon, weights))
}
