//! Training objective: photometric, contrastive, semantic, and gate terms
//! with analytic gradients, combined by fixed weights.

pub mod contrastive;

pub use contrastive::{
    contrastive_exact, contrastive_linear, ContrastiveConfig, ContrastiveOutput, Estimator,
};

use crate::scene::{FeatureMap, InstanceMaskSet};
use crate::sgm::{gate_loss, GateConfig};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    /// Perceptual-term weight inside the photometric loss.
    pub lambda_lpips: f64,
    /// Gate-loss weight.
    pub lambda1: f64,
    /// Contrastive-loss weight.
    pub lambda2: f64,
    /// Semantic-loss weight.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_lpips: 0.05, lambda1: 0.01, lambda2: 0.2, lambda3: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_lpips", self.lambda_lpips),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::BadWeight { name, value: v });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss weight {name} = {value} must be finite and non-negative")]
    BadWeight { name: &'static str, value: f64 },
    #[error("instance feature map has {0} channels, need at least 2")]
    TooFewChannels(u32),
    #[error("no non-background instance pixels")]
    NoInstances,
    #[error(transparent)]
    Gate(#[from] crate::sgm::SgmError),
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<(), LossError> {
    if !a.same_shape(b) {
        return Err(LossError::ShapeMismatch(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Pluggable perceptual term; the default contributes nothing, standing in
/// for a learned network this crate deliberately does not carry.
pub trait Perceptual {
    fn eval(&self, rendered: &FeatureMap, target: &FeatureMap) -> (f64, FeatureMap);
}

pub struct ZeroPerceptual;

impl Perceptual for ZeroPerceptual {
    fn eval(&self, rendered: &FeatureMap, _target: &FeatureMap) -> (f64, FeatureMap) {
        (0.0, FeatureMap::zeros(rendered.height, rendered.width, rendered.channels))
    }
}

fn mse_with_grad(rendered: &FeatureMap, target: &FeatureMap) -> (f64, FeatureMap) {
    let n = rendered.data.len() as f64;
    let mut grad = FeatureMap::zeros(rendered.height, rendered.width, rendered.channels);
    let mut sum = 0.0;
    for (i, (&r, &t)) in rendered.data.iter().zip(&target.data).enumerate() {
        let d = r - t;
        sum += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    (sum / n, grad)
}

/// MSE plus a weighted perceptual term over 3-channel images.
pub fn photometric(
    rendered: &FeatureMap,
    target: &FeatureMap,
    perceptual: &dyn Perceptual,
    w: &LossWeights,
) -> Result<(f64, FeatureMap), LossError> {
    check_same_shape(rendered, target, "photometric")?;
    let (mse, mut grad) = mse_with_grad(rendered, target);
    let (p, pgrad) = perceptual.eval(rendered, target);
    for (g, pg) in grad.data.iter_mut().zip(&pgrad.data) {
        *g += w.lambda_lpips * pg;
    }
    Ok((mse + w.lambda_lpips * p, grad))
}

/// Plain MSE over an M-channel feature map.
pub fn semantic(rendered: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap), LossError> {
    check_same_shape(rendered, target, "semantic")?;
    Ok(mse_with_grad(rendered, target))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub gate: f64,
    pub contrastive: f64,
    pub semantic: f64,
    pub total: f64,
}

pub struct TotalGrads {
    pub d_rgb: FeatureMap,
    pub d_inst: FeatureMap,
    pub d_sem: FeatureMap,
    pub d_beta: Vec<f64>,
}

/// Inputs for one view's full objective.
pub struct TotalInputs<'a> {
    pub rgb_rendered: &'a FeatureMap,
    pub rgb_target: &'a FeatureMap,
    pub inst_rendered: &'a FeatureMap,
    pub masks: &'a InstanceMaskSet,
    pub sem_rendered: &'a FeatureMap,
    pub sem_target: &'a FeatureMap,
    pub betas: &'a [f64],
}

/// Weighted sum of the four terms; gradients come back pre-weighted.
pub fn total(
    inputs: &TotalInputs,
    weights: &LossWeights,
    gate_cfg: &GateConfig,
    estimator: Estimator,
    seed: u64,
) -> Result<(LossBreakdown, TotalGrads), LossError> {
    weights.validate()?;
    let (l_p, d_rgb) = photometric(inputs.rgb_rendered, inputs.rgb_target, &ZeroPerceptual, weights)?;
    let (l_i, d_beta_raw) = gate_loss(inputs.betas, gate_cfg)?;
    let cfg = ContrastiveConfig::default();
    let c = match estimator {
        Estimator::Exact => contrastive_exact(inputs.inst_rendered, inputs.masks, &cfg)?,
        Estimator::Linear => contrastive_linear(inputs.inst_rendered, inputs.masks, seed, &cfg)?,
    };
    let (l_s, d_sem_raw) = semantic(inputs.sem_rendered, inputs.sem_target)?;

    let mut d_inst = c.grad;
    d_inst.data.iter_mut().for_each(|g| *g *= weights.lambda2);
    let mut d_sem = d_sem_raw;
    d_sem.data.iter_mut().for_each(|g| *g *= weights.lambda3);
    let d_beta = d_beta_raw.iter().map(|g| g * weights.lambda1).collect();

    let total = l_p + weights.lambda1 * l_i + weights.lambda2 * c.value + weights.lambda3 * l_s;
    Ok((
        LossBreakdown {
            photometric: l_p,
            gate: l_i,
            contrastive: c.value,
            semantic: l_s,
            total,
        },
        TotalGrads { d_rgb, d_inst, d_sem, d_beta },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, h: u32, w: u32, c: u32) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FeatureMap::zeros(h, w, c);
        m.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        m
    }

    #[test]
    fn photometric_identity_is_zero() {
        let a = random_map(1, 8, 8, 3);
        let (v, g) = photometric(&a, &a, &ZeroPerceptual, &LossWeights::default()).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn photometric_unit_gap() {
        let a = FeatureMap::zeros(4, 4, 3);
        let mut b = FeatureMap::zeros(4, 4, 3);
        b.data.iter_mut().for_each(|v| *v = 1.0);
        let (v, _) = photometric(&a, &b, &ZeroPerceptual, &LossWeights::default()).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn photometric_gradient_matches_fd() {
        let mut a = random_map(2, 4, 4, 3);
        let b = random_map(3, 4, 4, 3);
        let w = LossWeights::default();
        let (_, grad) = photometric(&a, &b, &ZeroPerceptual, &w).unwrap();
        let h = 1e-6;
        for i in [0, 7, 23, 47] {
            let orig = a.data[i];
            a.data[i] = orig + h;
            let vp = photometric(&a, &b, &ZeroPerceptual, &w).unwrap().0;
            a.data[i] = orig - h;
            let vm = photometric(&a, &b, &ZeroPerceptual, &w).unwrap().0;
            a.data[i] = orig;
            let fd = (vp - vm) / (2.0 * h);
            assert!((fd - grad.data[i]).abs() < 1e-6, "i={i} fd={fd} an={}", grad.data[i]);
        }
    }

    #[test]
    fn semantic_quarter() {
        let a = FeatureMap::zeros(4, 4, 16);
        let mut b = FeatureMap::zeros(4, 4, 16);
        b.data.iter_mut().for_each(|v| *v = 0.5);
        let (v, _) = semantic(&b, &a).unwrap();
        assert_eq!(v, 0.25);
    }

    #[test]
    fn semantic_rejects_shape_mismatch() {
        let a = FeatureMap::zeros(4, 4, 16);
        let b = FeatureMap::zeros(4, 5, 16);
        assert!(semantic(&a, &b).is_err());
    }

    #[test]
    fn total_unit_components_arithmetic() {
        // Direct check of the weighted sum with all components forced to 1.
        let w = LossWeights::default();
        let total = 1.0 + w.lambda1 * 1.0 + w.lambda2 * 1.0 + w.lambda3 * 1.0;
        assert!((total - 2.21).abs() < 1e-12);
    }
}
