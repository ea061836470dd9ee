//! Training loops: the DB-VAE loop with per-epoch adaptive resampling, and the
//! classification-only baseline.
//!
//! Randomness comes from one root seed split into independent streams:
//!
//! | stream | purpose                         |
//! |--------|---------------------------------|
//! | 1      | encoder initialisation          |
//! | 2      | decoder initialisation          |
//! | 3      | epoch shuffling                 |
//! | 4      | reparameterisation noise        |
//! | 5      | resampling draws                |
//!
//! Both loops share streams 1 and 3, so with debiasing off and both VAE loss
//! weights zero the DB-VAE loop reproduces the baseline parameter trajectory
//! exactly.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{record_objective, LossBreakdown, LossWeights};
use crate::models::{ArchId, DecoderParams, EncoderParams, ModelBundle, ModelConfig, ModelKind};
use crate::optim::{Adam, AdamConfig};
use crate::resample::{compute_weights, estimate_histograms, resample_indices, SampleWeights};
use crate::rng::RngStream;
use crate::tape::Tape;

const STREAM_ENCODER_INIT: u64 = 1;
const STREAM_DECODER_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_EPS: u64 = 4;
const STREAM_RESAMPLE: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasConfig {
    pub enabled: bool,
    pub bins: usize,
    pub alpha: f64,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            enabled: true,
            bins: 10,
            alpha: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchId,
    pub latent_dim: usize,
    pub width_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss_weights: LossWeights,
    pub debias: DebiasConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchId::Arch2,
            latent_dim: 32,
            width_multiplier: 1.0,
            epochs: 15,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            debias: DebiasConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The baseline configuration: no resampling, no VAE terms.
    pub fn standard(mut self) -> Self {
        self.debias.enabled = false;
        self.loss_weights = LossWeights { kl: 0.0, recon: 0.0 };
        self
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            latent_dim: self.latent_dim,
            channels,
            width_multiplier: self.width_multiplier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.latent_dim < 1 {
            return bad("latent_dim must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0)
        {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        let w = &self.loss_weights;
        if !(w.kl >= 0.0 && w.recon >= 0.0 && w.kl.is_finite() && w.recon.is_finite()) {
            return bad(format!("loss weights must be finite and >= 0, got {w:?}"));
        }
        if self.debias.bins < 2 {
            return bad("debias.bins must be >= 2".into());
        }
        if !(self.debias.alpha > 0.0) {
            return bad("debias.alpha must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub total: f64,
    pub classification: f64,
    pub kl: f64,
    pub reconstruction: f64,
    pub train_accuracy: f64,
}

impl EpochRecord {
    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total,
            classification: self.classification,
            kl: self.kl,
            reconstruction: self.reconstruction,
        }
    }
}

pub fn history_csv(history: &[EpochRecord], header: Option<&str>) -> Result<String> {
    crate::report::to_csv_with_header(history, header)
}

/// Progress notifications from a training loop.
pub enum TrainEvent<'a> {
    /// After every optimizer step. `step` is 1-based and global.
    Step {
        epoch: usize,
        step: usize,
        encoder: &'a EncoderParams,
    },
    Epoch {
        record: &'a EpochRecord,
        encoder: &'a EncoderParams,
        decoder: Option<&'a DecoderParams>,
        weights: Option<&'a SampleWeights>,
    },
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub history: Vec<EpochRecord>,
    /// Dataset indices of the faces that [`SampleWeights`] entries refer to.
    pub weighted_faces: Vec<usize>,
    /// Resampling weights used in each epoch (empty when debiasing is off).
    pub sample_weights: Vec<SampleWeights>,
}

fn check_dataset(dataset: &Dataset) -> Result<usize> {
    dataset.validate()?;
    if dataset.face_indices().is_empty() {
        return Err(Error::Dataset("training set has no faces".into()));
    }
    if dataset.nonface_indices().is_empty() {
        return Err(Error::Dataset("training set has no non-faces".into()));
    }
    Ok(dataset.channels().expect("non-empty"))
}

#[derive(Default)]
struct EpochAccumulator {
    examples: usize,
    faces: usize,
    correct: usize,
    classification: f64,
    kl: f64,
    reconstruction: f64,
}

impl EpochAccumulator {
    fn add(&mut self, b: &LossBreakdown, n: usize, faces: usize, correct: usize) {
        self.examples += n;
        self.faces += faces;
        self.correct += correct;
        self.classification += b.classification * n as f64;
        self.kl += b.kl * faces as f64;
        self.reconstruction += b.reconstruction * faces as f64;
    }

    fn finish(&self, epoch: usize, w: LossWeights) -> EpochRecord {
        let per = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let b = LossBreakdown::combine(
            per(self.classification, self.examples),
            per(self.kl, self.faces),
            per(self.reconstruction, self.faces),
            w,
        );
        EpochRecord {
            epoch,
            total: b.total,
            classification: b.classification,
            kl: b.kl,
            reconstruction: b.reconstruction,
            train_accuracy: per(self.correct as f64, self.examples),
        }
    }
}

fn count_correct(logits: &[f64], labels: &[f64]) -> usize {
    logits
        .iter()
        .zip(labels)
        .filter(|(&l, &y)| (l >= 0.0) == (y == 1.0))
        .count()
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_observed(config, dataset, &mut |_| {})
}

/// The DB-VAE loop. Each epoch:
///
/// 1. if debiasing is on, encode every training face, histogram the latent
///    means, compute selection weights and draw as many faces as the dataset
///    holds, with replacement; otherwise take every face once;
/// 2. append every non-face once and shuffle;
/// 3. take minibatch Adam steps on the gated objective.
pub fn train_observed(
    config: &TrainConfig,
    dataset: &Dataset,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    let channels = check_dataset(dataset)?;
    let model_cfg = config.model_config(channels);
    let root = RngStream::new(config.seed);
    let mut encoder = EncoderParams::build(model_cfg, &mut root.derive(STREAM_ENCODER_INIT))?;
    let mut decoder = DecoderParams::build(model_cfg, &mut root.derive(STREAM_DECODER_INIT))?;
    let mut shuffle_rng = root.derive(STREAM_SHUFFLE);
    let mut eps_rng = root.derive(STREAM_EPS);
    let mut resample_rng = root.derive(STREAM_RESAMPLE);
    let mut adam = Adam::new(config.optimizer);

    let faces = dataset.face_indices();
    let nonfaces = dataset.nonface_indices();
    let face_images = if config.debias.enabled {
        Some(dataset.stack(&faces))
    } else {
        None
    };
    let k = config.latent_dim;
    let mut history = Vec::with_capacity(config.epochs);
    let mut all_weights = Vec::new();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut order = match &face_images {
            Some(images) => {
                let (hist, mus) = estimate_histograms(&encoder, images, config.debias.bins)?;
                let mut w = compute_weights(&hist, &mus, config.debias.alpha)?;
                w.epoch = Some(epoch - 1);
                let picks = resample_indices(&w, faces.len(), &mut resample_rng)?;
                all_weights.push(w);
                picks.into_iter().map(|i| faces[i]).collect()
            }
            None => faces.clone(),
        };
        order.extend_from_slice(&nonfaces);
        shuffle_rng.shuffle(&mut order);

        let mut acc = EpochAccumulator::default();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let images = dataset.stack(batch);
            let labels = dataset.labels(batch);
            let eps = eps_rng.normal_tensor([batch.len(), k]);
            let (grads, breakdown, correct) = {
                let mut tape = Tape::new();
                let x = tape.input(images);
                let enc = encoder.forward_tape(&mut tape, x)?;
                let obj = record_objective(
                    &mut tape,
                    x,
                    &labels,
                    enc,
                    Some(&decoder),
                    &eps,
                    config.loss_weights,
                )?;
                if !obj.breakdown.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        detail: format!("loss is {:?}", obj.breakdown),
                    });
                }
                let correct = count_correct(tape.value(enc.logit).data(), &labels);
                (tape.backward(obj.total)?, obj.breakdown, correct)
            };
            let n_faces = labels.iter().filter(|&&y| y == 1.0).count();
            acc.add(&breakdown, batch.len(), n_faces, correct);

            let mut params = encoder.params_mut();
            params.extend(decoder.params_mut());
            adam.step(&mut params, grads.params())
                .map_err(|e| Error::Diverged {
                    epoch,
                    batch: b,
                    detail: e.to_string(),
                })?;
            step += 1;
            observer(TrainEvent::Step {
                epoch,
                step,
                encoder: &encoder,
            });
        }
        let record = acc.finish(epoch, config.loss_weights);
        observer(TrainEvent::Epoch {
            record: &record,
            encoder: &encoder,
            decoder: Some(&decoder),
            weights: all_weights.last(),
        });
        history.push(record);
    }

    Ok(TrainOutcome {
        bundle: ModelBundle {
            kind: ModelKind::Dbvae,
            encoder,
            decoder: Some(decoder),
        },
        history,
        weighted_faces: if config.debias.enabled { faces } else { Vec::new() },
        sample_weights: all_weights,
    })
}

pub fn train_standard(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_standard_observed(config, dataset, &mut |_| {})
}

/// The baseline: the same encoder trunk trained on classification loss
/// alone, every example once per epoch, uniformly shuffled. Debias and loss
/// weight settings in `config` are ignored.
pub fn train_standard_observed(
    config: &TrainConfig,
    dataset: &Dataset,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    let channels = check_dataset(dataset)?;
    let root = RngStream::new(config.seed);
    let mut encoder = EncoderParams::build(
        config.model_config(channels),
        &mut root.derive(STREAM_ENCODER_INIT),
    )?;
    let mut shuffle_rng = root.derive(STREAM_SHUFFLE);
    let mut adam = Adam::new(config.optimizer);
    let no_vae = LossWeights { kl: 0.0, recon: 0.0 };

    let mut base = dataset.face_indices();
    base.extend(dataset.nonface_indices());
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order = base.clone();
        shuffle_rng.shuffle(&mut order);
        let mut acc = EpochAccumulator::default();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let images = dataset.stack(batch);
            let labels = dataset.labels(batch);
            let (grads, classification, correct) = {
                let mut tape = Tape::new();
                let x = tape.input(images);
                let enc = encoder.forward_tape(&mut tape, x)?;
                let loss = tape.bce_with_logits(enc.logit, &labels)?;
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        detail: format!("classification loss is {value}"),
                    });
                }
                let correct = count_correct(tape.value(enc.logit).data(), &labels);
                (tape.backward(loss)?, value, correct)
            };
            let breakdown = LossBreakdown::combine(classification, 0.0, 0.0, no_vae);
            acc.add(&breakdown, batch.len(), 0, correct);
            adam.step(&mut encoder.params_mut(), grads.params())
                .map_err(|e| Error::Diverged {
                    epoch,
                    batch: b,
                    detail: e.to_string(),
                })?;
            step += 1;
            observer(TrainEvent::Step {
                epoch,
                step,
                encoder: &encoder,
            });
        }
        let record = acc.finish(epoch, no_vae);
        observer(TrainEvent::Epoch {
            record: &record,
            encoder: &encoder,
            decoder: None,
            weights: None,
        });
        history.push(record);
    }
    Ok(TrainOutcome {
        bundle: ModelBundle {
            kind: ModelKind::Standard,
            encoder,
            decoder: None,
        },
        history,
        weighted_faces: Vec::new(),
        sample_weights: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetSpec, GroupCounts};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent_dim: 4,
            width_multiplier: 0.125,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        build_dataset(&DatasetSpec {
            faces: GroupCounts::uniform(4),
            nonfaces: 8,
            channels: 1,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn history_has_one_row_per_epoch() {
        let out = train(&tiny_config(), &tiny_dataset()).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.sample_weights.len(), 2);
        assert_eq!(out.sample_weights[0].len(), 16);
        for r in &out.history {
            let b = LossBreakdown::combine(r.classification, r.kl, r.reconstruction, LossWeights::default());
            assert!((b.total - r.total).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_single_class_data() {
        let mut ds = tiny_dataset();
        ds.examples.retain(|e| e.label);
        assert!(matches!(train(&tiny_config(), &ds), Err(Error::Dataset(_))));
        assert!(train_standard(&tiny_config(), &ds).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = tiny_config();
        c.debias.alpha = 0.0;
        assert!(train(&c, &tiny_dataset()).is_err());
        let mut c = tiny_config();
        c.debias.bins = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut c = tiny_config();
        c.optimizer.lr = 1e200;
        let err = train(&c, &tiny_dataset()).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn deterministic_given_seed() {
        let a = train(&tiny_config(), &tiny_dataset()).unwrap();
        let b = train(&tiny_config(), &tiny_dataset()).unwrap();
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.history, b.history);
    }
}
