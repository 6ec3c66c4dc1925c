//! Plain gradient descent over scene parameters against the combined
//! objective, plus the central-difference oracle every gradient contract
//! is checked against.

use crate::loss::{self, Estimator, LossBreakdown, LossError, LossWeights};
use crate::raster::{self, UpstreamGrads};
use crate::scene::{Camera, FeatureMap, InstanceMaskSet, SceneBundle};
use crate::sgm::{gate_loss, GateConfig, GateMode};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("no target views")]
    NoViews,
    #[error("targets have {what} for {got} views, cameras for {want}")]
    ViewMismatch { what: &'static str, got: usize, want: usize },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("non-finite value at perturbed point (parameter {0})")]
    NonFinite(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
}

/// Which parameter groups descent may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSet {
    pub beta: bool,
    pub alpha: bool,
    pub sh: bool,
    pub f_inst: bool,
    pub f_sem: bool,
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet { beta: true, alpha: false, sh: false, f_inst: false, f_sem: false }
    }
}

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr: f64,
    pub params: ParamSet,
    pub seed: u64,
    pub estimator: Estimator,
    pub gate: GateConfig,
    pub weights: LossWeights,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: 500,
            lr: 0.1,
            params: ParamSet::default(),
            seed: 0,
            estimator: Estimator::Linear,
            gate: GateConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl OptimConfig {
    fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OptimError::BadConfig(format!("lr = {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-view supervision. Contrastive and semantic terms are optional.
pub struct FitTargets<'a> {
    pub cameras: &'a [Camera],
    pub rgb: &'a [FeatureMap],
    pub masks: Option<&'a [InstanceMaskSet]>,
    pub sem: Option<&'a [FeatureMap]>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceStep {
    pub step: usize,
    pub photometric: f64,
    pub gate: f64,
    pub contrastive: f64,
    pub semantic: f64,
    pub total: f64,
}

pub type TraceLog = Vec<TraceStep>;

const LOGIT_LIMIT: f64 = 16.0;

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln().clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct ObjectiveEval {
    breakdown: LossBreakdown,
    grads: raster::ParamGrads,
    beta_grads: Vec<f64>,
}

/// One full evaluation of the objective and its parameter gradients,
/// averaged over target views; the gate term is per-scene, not per-view.
fn evaluate(
    bundle: &SceneBundle,
    targets: &FitTargets,
    cfg: &OptimConfig,
    step: usize,
) -> Result<ObjectiveEval, OptimError> {
    let views = targets.cameras.len();
    let inv_v = 1.0 / views as f64;
    let w = &cfg.weights;
    let mut grads: Option<raster::ParamGrads> = None;
    let (mut l_p, mut l_c, mut l_s) = (0.0, 0.0, 0.0);
    let mut contrastive_used = false;
    let mut semantic_used = false;
    for v in 0..views {
        let cam = &targets.cameras[v];
        let (out, tape) = raster::render_with_tape(bundle, cam, GateMode::Leaky(cfg.gate));
        let (p, mut d_rgb) =
            loss::photometric(&out.rgb, &targets.rgb[v], &loss::ZeroPerceptual, w)?;
        l_p += p * inv_v;
        d_rgb.data.iter_mut().for_each(|g| *g *= inv_v);

        let d_inst = match targets.masks {
            Some(masks) => {
                contrastive_used = true;
                let ccfg = loss::ContrastiveConfig::default();
                let seed = cfg
                    .seed
                    .wrapping_add(step as u64)
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(v as u64);
                let c = match cfg.estimator {
                    Estimator::Exact => loss::contrastive_exact(&out.inst, &masks[v], &ccfg)?,
                    Estimator::Linear => {
                        loss::contrastive_linear(&out.inst, &masks[v], seed, &ccfg)?
                    }
                };
                l_c += c.value * inv_v;
                let mut g = c.grad;
                g.data.iter_mut().for_each(|x| *x *= w.lambda2 * inv_v);
                Some(g)
            }
            None => None,
        };
        let d_sem = match targets.sem {
            Some(sem) => {
                semantic_used = true;
                let (s, mut g) = loss::semantic(&out.sem, &sem[v])?;
                l_s += s * inv_v;
                g.data.iter_mut().for_each(|x| *x *= w.lambda3 * inv_v);
                Some(g)
            }
            None => None,
        };
        let upstream = UpstreamGrads {
            rgb: Some(&d_rgb),
            inst: d_inst.as_ref(),
            sem: d_sem.as_ref(),
        };
        let view_grads = raster::blend_backward(bundle, cam, Some(&tape), &upstream)?;
        match &mut grads {
            None => grads = Some(view_grads),
            Some(acc) => {
                for (a, g) in acc.fine.iter_mut().zip(view_grads.fine) {
                    add_prim_grad(a, &g);
                }
                for (a, g) in acc.coarse.iter_mut().zip(view_grads.coarse) {
                    add_prim_grad(a, &g);
                }
            }
        }
    }
    let mut grads = grads.ok_or(OptimError::NoViews)?;
    let betas: Vec<f64> = bundle.fine.iter().map(|p| p.beta).collect();
    let (l_i, gate_grad) = gate_loss(&betas, &cfg.gate).map_err(LossError::from)?;
    let mut beta_grads = vec![0.0; bundle.fine.len()];
    for (i, g) in gate_grad.iter().enumerate() {
        beta_grads[i] = w.lambda1 * g + grads.fine[i].beta;
        grads.fine[i].beta = beta_grads[i];
    }
    let total = l_p
        + w.lambda1 * l_i
        + if contrastive_used { w.lambda2 * l_c } else { 0.0 }
        + if semantic_used { w.lambda3 * l_s } else { 0.0 };
    Ok(ObjectiveEval {
        breakdown: LossBreakdown {
            photometric: l_p,
            gate: l_i,
            contrastive: l_c,
            semantic: l_s,
            total,
        },
        grads,
        beta_grads,
    })
}

fn add_prim_grad(a: &mut raster::PrimGrad, b: &raster::PrimGrad) {
    for k in 0..3 {
        a.mu[k] += b.mu[k];
        a.scale[k] += b.scale[k];
    }
    for k in 0..4 {
        a.rot[k] += b.rot[k];
    }
    a.alpha += b.alpha;
    a.beta += b.beta;
    for (x, y) in a.sh.iter_mut().zip(&b.sh) {
        *x += y;
    }
    for (x, y) in a.payload.iter_mut().zip(&b.payload) {
        *x += y;
    }
}

/// Gradient descent on the selected parameter groups. Opacity-like
/// parameters move in logit space so clamping never freezes them.
pub fn fit(
    bundle: &SceneBundle,
    targets: &FitTargets,
    cfg: &OptimConfig,
) -> Result<(SceneBundle, TraceLog), OptimError> {
    cfg.validate()?;
    if targets.cameras.is_empty() {
        return Err(OptimError::NoViews);
    }
    for (what, len) in [
        ("rgb targets", Some(targets.rgb.len())),
        ("masks", targets.masks.map(|m| m.len())),
        ("semantic targets", targets.sem.map(|s| s.len())),
    ] {
        if let Some(len) = len {
            if len != targets.cameras.len() {
                return Err(OptimError::ViewMismatch {
                    what,
                    got: len,
                    want: targets.cameras.len(),
                });
            }
        }
    }
    let mut current = bundle.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut initial_total = None;
    for step in 0..cfg.steps {
        let eval = evaluate(&current, targets, cfg, step)?;
        let total = eval.breakdown.total;
        let initial = *initial_total.get_or_insert(total);
        if total > 10.0 * initial.max(1e-12) && step > 0 {
            return Err(OptimError::Diverged { step, loss: total, initial });
        }
        trace.push(TraceStep {
            step,
            photometric: eval.breakdown.photometric,
            gate: eval.breakdown.gate,
            contrastive: eval.breakdown.contrastive,
            semantic: eval.breakdown.semantic,
            total,
        });
        for (i, prim) in current.fine.iter_mut().enumerate() {
            let g = &eval.grads.fine[i];
            if cfg.params.beta {
                let theta = logit(prim.beta);
                let slope = prim.beta * (1.0 - prim.beta);
                prim.beta = sigmoid(theta - cfg.lr * eval.beta_grads[i] * slope);
            }
            if cfg.params.alpha {
                let theta = logit(prim.alpha);
                let slope = prim.alpha * (1.0 - prim.alpha);
                prim.alpha = sigmoid(theta - cfg.lr * g.alpha * slope);
            }
            if cfg.params.sh {
                for (p, grad) in prim.sh.iter_mut().zip(&g.sh) {
                    *p -= cfg.lr * grad;
                }
            }
            if cfg.params.f_inst {
                for (p, grad) in prim.f_inst.iter_mut().zip(&g.payload) {
                    *p -= cfg.lr * grad;
                }
            }
        }
        if cfg.params.f_sem {
            for (prim, g) in current.coarse.iter_mut().zip(&eval.grads.coarse) {
                if let Some(sem) = &mut prim.f_sem {
                    for (p, grad) in sem.iter_mut().zip(&g.payload) {
                        *p -= cfg.lr * grad;
                    }
                }
            }
        }
    }
    Ok((current, trace))
}

#[derive(Debug, Clone, Serialize)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    /// Max and mean over non-excluded parameters.
    pub max_rel: f64,
    pub mean_rel: f64,
    pub checked: usize,
    pub excluded: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Objective evaluated at a parameter vector; returns value and gradient.
pub type Objective<'a> = dyn FnMut(&[f64]) -> (f64, Vec<f64>) + 'a;

/// Central finite differences against an analytic gradient. `excluded`
/// marks parameters sitting near documented non-smooth points; they are
/// reported but left out of the aggregates.
pub fn fdcheck(
    f: &mut Objective<'_>,
    point: &[f64],
    h: f64,
    excluded: Option<&[bool]>,
) -> Result<FdReport, OptimError> {
    let (_, analytic) = f(point);
    let mut entries = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    let (mut max_rel, mut sum_rel, mut checked) = (0.0f64, 0.0, 0usize);
    for i in 0..point.len() {
        work[i] = point[i] + h;
        let (vp, _) = f(&work);
        work[i] = point[i] - h;
        let (vm, _) = f(&work);
        work[i] = point[i];
        if !vp.is_finite() || !vm.is_finite() {
            return Err(OptimError::NonFinite(i));
        }
        let numeric = (vp - vm) / (2.0 * h);
        let is_excluded = excluded.map(|e| e[i]).unwrap_or(false);
        let rel = rel_err(analytic[i], numeric);
        if !is_excluded {
            max_rel = max_rel.max(rel);
            sum_rel += rel;
            checked += 1;
        }
        entries.push(FdEntry { index: i, analytic: analytic[i], numeric, rel_err: rel, excluded: is_excluded });
    }
    let excluded_count = entries.iter().filter(|e| e.excluded).count();
    Ok(FdReport {
        entries,
        max_rel,
        mean_rel: if checked > 0 { sum_rel / checked as f64 } else { 0.0 },
        checked,
        excluded: excluded_count,
    })
}
