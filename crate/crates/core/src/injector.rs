//! Masked watermark injection, optionally under hidden-state perturbation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientMask, MaskedTrainer, ModelState, Optimizer};
use crate::verifier::{verify_model, DEFAULT_MAX_NEW};
use crate::watermark::{UserRegistry, WatermarkSuite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSpec {
    pub epochs: usize,
    pub lr: f64,
    pub adv_enabled: bool,
    pub adv_rho: f64,
    pub batch_order_seed: u64,
    pub optimizer: Optimizer,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        Self { epochs: 30, lr: 0.05, adv_enabled: true, adv_rho: 0.05, batch_order_seed: 0, optimizer: Optimizer::Sgd }
    }
}

impl EmbedSpec {
    /// Perturbation budget actually used per step.
    pub fn rho(&self) -> f64 {
        if self.adv_enabled {
            self.adv_rho
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("embedding learning rate {}", self.lr)));
        }
        if !(self.adv_rho >= 0.0 && self.adv_rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("perturbation budget {}", self.adv_rho)));
        }
        Ok(())
    }
}

/// Mean optimized loss of every epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedTrace {
    pub epoch_losses: Vec<f64>,
}

/// Fine-tunes only the masked entries of `m_o` on all suite samples, one
/// sample per step, in a fresh seeded order each epoch.
pub fn embed(
    m_o: &ModelState,
    suite: &WatermarkSuite,
    mask: &GradientMask,
    spec: &EmbedSpec,
) -> Result<(ModelState, EmbedTrace)> {
    spec.validate()?;
    mask.validate(m_o)?;
    let samples = suite.all_samples();
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut trainer = MaskedTrainer::new(m_o, Some(mask))?.with_optimizer(spec.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.batch_order_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = EmbedTrace::default();
    let rho = spec.rho();
    let mut step = 0;
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let loss = trainer
                .step(std::slice::from_ref(&samples[i]), spec.lr, rho)
                .map_err(|e| match e {
                    Error::TrainingDiverged { loss, .. } => Error::EmbedDiverged { step, loss },
                    other => other,
                })?;
            total += loss;
            step += 1;
        }
        trace.epoch_losses.push(total / samples.len() as f64);
    }
    let mut m_w = trainer.export(m_o);
    m_w.validate().map_err(|_| Error::EmbedDiverged { step, loss: f64::NAN })?;
    m_w.train_meta.steps_taken = m_o.train_meta.steps_taken + step;
    Ok((m_w, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub epoch_losses: Vec<f64>,
    pub final_wsr: f64,
    pub mask_digest: String,
    pub mask_size: usize,
    pub changed_params: usize,
    pub spec: EmbedSpec,
}

/// [`embed`] followed by a full-report verification of the result.
pub fn embed_with_report(
    m_o: &ModelState,
    suite: &WatermarkSuite,
    mask: &GradientMask,
    spec: &EmbedSpec,
    registry: &UserRegistry,
) -> Result<(ModelState, EmbedReport)> {
    let (m_w, trace) = embed(m_o, suite, mask, spec)?;
    let check = verify_model(&m_w, registry, &suite.watermark_inputs(), DEFAULT_MAX_NEW)?;
    let report = EmbedReport {
        epoch_losses: trace.epoch_losses,
        final_wsr: check.wsr,
        mask_digest: mask.digest(),
        mask_size: mask.total(),
        changed_params: m_o.diff_support(&m_w)?.len(),
        spec: spec.clone(),
    };
    Ok((m_w, report))
}
