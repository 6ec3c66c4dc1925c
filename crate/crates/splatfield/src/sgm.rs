//! Selective Gaussian Mechanism: the leaky importance gate, the
//! BCE-plus-regularizer gate loss, and threshold pruning.

use crate::scene::{decode_redundancy, SceneBundle};
use serde::Serialize;
use thiserror::Error;

/// Clamp applied to importance scores before the log terms of the gate loss.
pub const BETA_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateConfig {
    /// Importance threshold; scores at or below it fall in the leaky branch.
    pub tau: f64,
    /// Sub-threshold multiplier.
    pub leak: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { tau: 0.5, leak: 1e-3 }
    }
}

impl GateConfig {
    pub fn with_tau(tau: f64) -> Self {
        GateConfig { tau, ..GateConfig::default() }
    }

    pub fn validate(&self) -> Result<(), SgmError> {
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(SgmError::BadConfig(format!("tau = {} outside (0,1)", self.tau)));
        }
        if !(0.0 < self.leak && self.leak < 1.0) {
            return Err(SgmError::BadConfig(format!("leak = {} outside (0,1)", self.leak)));
        }
        Ok(())
    }
}

/// How the importance score enters blending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    /// Use beta as-is (inference / plain rendering).
    Identity,
    /// Leaky gate (training).
    Leaky(GateConfig),
}

impl GateMode {
    /// Gate value and its derivative with respect to beta.
    pub fn apply(&self, beta: f64) -> (f64, f64) {
        match self {
            GateMode::Identity => (beta, 1.0),
            GateMode::Leaky(cfg) => {
                // Strict inequality: beta == tau falls in the leaky branch.
                if beta > cfg.tau {
                    (beta, 1.0)
                } else {
                    (beta * cfg.leak, cfg.leak)
                }
            }
        }
    }
}

/// Leaky importance gate: beta above the threshold passes through,
/// anything at or below it is scaled by the leak factor.
pub fn gate(beta: f64, cfg: &GateConfig) -> f64 {
    GateMode::Leaky(*cfg).apply(beta).0
}

#[derive(Debug, Error)]
pub enum SgmError {
    #[error("invalid gate config: {0}")]
    BadConfig(String),
    #[error("gate loss over an empty score list")]
    EmptyScores,
}

/// BCE toward the thresholded binary target plus a mean-beta regularizer,
/// both averaged over the scores. The binary target is a constant during
/// differentiation.
pub fn gate_loss(betas: &[f64], cfg: &GateConfig) -> Result<(f64, Vec<f64>), SgmError> {
    if betas.is_empty() {
        return Err(SgmError::EmptyScores);
    }
    let n = betas.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(betas.len());
    for &beta in betas {
        let p = beta.clamp(BETA_EPS, 1.0 - BETA_EPS);
        let clamped = beta != p;
        if beta > cfg.tau {
            value += -p.ln() + beta;
            grad.push((if clamped { 0.0 } else { -1.0 / p } + 1.0) / n);
        } else {
            value += -(1.0 - p).ln() + beta;
            grad.push((if clamped { 0.0 } else { 1.0 / (1.0 - p) } + 1.0) / n);
        }
    }
    Ok((value / n, grad))
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneReport {
    pub kept: usize,
    pub discarded: usize,
    /// Confusion counts against ground-truth redundancy labels, when the
    /// bundle provenance carries them (synthetic scenes).
    pub confusion: Option<PruneConfusion>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneConfusion {
    /// Redundant and discarded.
    pub true_positive: usize,
    /// Redundant but kept.
    pub false_negative: usize,
    /// Not redundant but discarded.
    pub false_positive: usize,
    /// Not redundant and kept.
    pub true_negative: usize,
}

impl PruneConfusion {
    pub fn redundant_discard_rate(&self) -> f64 {
        let total = self.true_positive + self.false_negative;
        if total == 0 {
            return 1.0;
        }
        self.true_positive as f64 / total as f64
    }
}

/// Drops fine primitives whose importance is at or below the threshold.
/// The coarse field is untouched and survivors are copied unchanged.
pub fn prune(bundle: &SceneBundle, cfg: &GateConfig) -> (SceneBundle, PruneReport) {
    prune_with_labels(bundle, cfg, decode_redundancy(&bundle.provenance, bundle.fine.len()).as_deref())
}

/// `prune` with explicit redundancy labels (overrides provenance).
pub fn prune_with_labels(
    bundle: &SceneBundle,
    cfg: &GateConfig,
    labels: Option<&[bool]>,
) -> (SceneBundle, PruneReport) {
    let keep: Vec<bool> = bundle.fine.iter().map(|p| p.beta > cfg.tau).collect();
    let kept_prims: Vec<_> = bundle
        .fine
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| p.clone())
        .collect();
    let confusion = labels.filter(|l| l.len() == keep.len()).map(|labels| {
        let mut c = PruneConfusion {
            true_positive: 0,
            false_negative: 0,
            false_positive: 0,
            true_negative: 0,
        };
        for (&kept, &redundant) in keep.iter().zip(labels) {
            match (redundant, kept) {
                (true, false) => c.true_positive += 1,
                (true, true) => c.false_negative += 1,
                (false, false) => c.false_positive += 1,
                (false, true) => c.true_negative += 1,
            }
        }
        c
    });
    let report = PruneReport {
        kept: kept_prims.len(),
        discarded: bundle.fine.len() - kept_prims.len(),
        confusion,
    };
    let mut out = bundle.clone();
    out.fine = kept_prims;
    out.provenance = format!("{};pruned(tau={})", bundle.provenance, cfg.tau);
    (out, report)
}
