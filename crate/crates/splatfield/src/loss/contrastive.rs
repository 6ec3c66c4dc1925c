//! Contrastive instance loss over rendered feature maps: an exact
//! all-pairs form and a shuffled-pairing estimator whose intra-term work
//! is linear in the pixel count. Both report operation counts so scaling
//! claims are measurable.

use super::LossError;
use crate::scene::{FeatureMap, InstanceMaskSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f64 = 1e-8;
pub const LOG_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Exact,
    Linear,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ContrastiveConfig {
    /// Drop the cross-instance term entirely.
    pub drop_inter: bool,
    /// Leave the cross-instance term as a raw sum instead of a pair mean.
    pub raw_sum_inter: bool,
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub value: f64,
    pub intra: f64,
    pub inter: f64,
    pub grad: FeatureMap,
    /// Similarity evaluations spent on the pull-together term.
    pub intra_ops: u64,
    /// Similarity evaluations spent on the push-apart term.
    pub inter_ops: u64,
}

struct Pixel {
    row: u32,
    col: u32,
    inst: u16,
    norm: f64,
    unit: Vec<f64>,
}

fn gather_pixels(map: &FeatureMap, masks: &InstanceMaskSet) -> Result<Vec<Pixel>, LossError> {
    if map.channels < 2 {
        return Err(LossError::TooFewChannels(map.channels));
    }
    if map.height != masks.height || map.width != masks.width {
        return Err(LossError::ShapeMismatch(format!(
            "feature map {}x{} vs mask {}x{}",
            map.height, map.width, masks.height, masks.width
        )));
    }
    let mut out = Vec::new();
    for row in 0..map.height {
        for col in 0..map.width {
            let inst = masks.ids[(row * map.width + col) as usize];
            if inst == 0 {
                continue;
            }
            let feat = map.pixel(row, col).to_vec();
            let norm = feat.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(NORM_EPS);
            let unit = feat.iter().map(|v| v / d).collect();
            out.push(Pixel { row, col, inst, norm, unit });
        }
    }
    if out.is_empty() {
        return Err(LossError::NoInstances);
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Turns per-pixel gradients w.r.t. unit features into gradients w.r.t.
/// the raw map entries, through the clamped normalization.
fn backprop_normalization(pixels: &[Pixel], ghat: &[Vec<f64>], grad: &mut FeatureMap) {
    for (p, gh) in pixels.iter().zip(ghat) {
        let out = grad.pixel_mut(p.row, p.col);
        if p.norm > NORM_EPS {
            let along = dot(&p.unit, gh);
            for ch in 0..gh.len() {
                out[ch] += (gh[ch] - p.unit[ch] * along) / p.norm;
            }
        } else {
            for ch in 0..gh.len() {
                out[ch] += gh[ch] / NORM_EPS;
            }
        }
    }
}

/// The log argument is clamped to [LOG_CLAMP, 1]; outside that interval
/// the slope is zero. Returns (-log(clamped), d/d_mean).
fn neg_log_clamped(mean: f64) -> (f64, f64) {
    if mean <= LOG_CLAMP {
        (-(LOG_CLAMP.ln()), 0.0)
    } else if mean >= 1.0 {
        (0.0, 0.0)
    } else {
        (-mean.ln(), -1.0 / mean)
    }
}

/// All ordered same-instance pairs pulled together, all ordered
/// cross-instance pairs pushed apart. O(n^2) by construction.
pub fn contrastive_exact(
    map: &FeatureMap,
    masks: &InstanceMaskSet,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutput, LossError> {
    let pixels = gather_pixels(map, masks)?;
    let n = pixels.len();
    let dim = map.channels as usize;
    let mut ghat_intra = vec![vec![0.0; dim]; n];
    let mut ghat_inter = vec![vec![0.0; dim]; n];
    let (mut intra_sum, mut intra_pairs) = (0.0, 0u64);
    let (mut inter_sum, mut inter_pairs) = (0.0, 0u64);
    let (mut intra_ops, mut inter_ops) = (0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let s = dot(&pixels[i].unit, &pixels[j].unit);
            if pixels[i].inst == pixels[j].inst {
                // Both ordered directions of the pair.
                intra_sum += 2.0 * s;
                intra_pairs += 2;
                intra_ops += 1;
                for ch in 0..dim {
                    ghat_intra[i][ch] += 2.0 * pixels[j].unit[ch];
                    ghat_intra[j][ch] += 2.0 * pixels[i].unit[ch];
                }
            } else if !cfg.drop_inter {
                inter_sum += 2.0 * (1.0 - s);
                inter_pairs += 2;
                inter_ops += 1;
                for ch in 0..dim {
                    ghat_inter[i][ch] -= 2.0 * pixels[j].unit[ch];
                    ghat_inter[j][ch] -= 2.0 * pixels[i].unit[ch];
                }
            }
        }
    }

    let (intra, d_intra_sum) = if intra_pairs == 0 {
        (0.0, 0.0)
    } else {
        let (v, d_mean) = neg_log_clamped(intra_sum / intra_pairs as f64);
        (v, d_mean / intra_pairs as f64)
    };
    let (inter, inter_scale) = if inter_pairs == 0 {
        (0.0, 0.0)
    } else if cfg.raw_sum_inter {
        (inter_sum, 1.0)
    } else {
        (inter_sum / inter_pairs as f64, 1.0 / inter_pairs as f64)
    };

    let mut grad = FeatureMap::zeros(map.height, map.width, map.channels);
    let ghat: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..dim)
                .map(|ch| d_intra_sum * ghat_intra[i][ch] + inter_scale * ghat_inter[i][ch])
                .collect()
        })
        .collect();
    backprop_normalization(&pixels, &ghat, &mut grad);
    Ok(ContrastiveOutput { value: intra + inter, intra, inter, grad, intra_ops, inter_ops })
}

/// Fixed-point-free permutation when one exists within the retry budget.
fn shuffled_pairing(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    for _ in 0..16 {
        perm.shuffle(rng);
        if len == 1 || perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    perm
}

/// Pairs each pixel with one shuffled partner from its own instance and
/// represents instances by mean unit features for the cross term.
pub fn contrastive_linear(
    map: &FeatureMap,
    masks: &InstanceMaskSet,
    seed: u64,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutput, LossError> {
    let pixels = gather_pixels(map, masks)?;
    let n = pixels.len();
    let dim = map.channels as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Group pixel indices per instance, ascending id, map order inside.
    let mut ids: Vec<u16> = pixels.iter().map(|p| p.inst).collect();
    ids.sort_unstable();
    ids.dedup();
    let groups: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| (0..n).filter(|&i| pixels[i].inst == id).collect())
        .collect();

    let mut ghat = vec![vec![0.0; dim]; n];
    let (mut intra_sum, mut intra_count) = (0.0, 0u64);
    let mut intra_ops = 0u64;
    let mut ghat_intra = vec![vec![0.0; dim]; n];
    for group in &groups {
        if group.len() < 2 {
            // Self-paired; trivially 1, excluded from the mean.
            continue;
        }
        let perm = shuffled_pairing(group.len(), &mut rng);
        for (slot, &i) in group.iter().enumerate() {
            let j = group[perm[slot]];
            intra_sum += dot(&pixels[i].unit, &pixels[j].unit);
            intra_count += 1;
            intra_ops += 1;
            for ch in 0..dim {
                ghat_intra[i][ch] += pixels[j].unit[ch];
                ghat_intra[j][ch] += pixels[i].unit[ch];
            }
        }
    }
    let (intra, d_intra_sum) = if intra_count == 0 {
        (0.0, 0.0)
    } else {
        let (v, d_mean) = neg_log_clamped(intra_sum / intra_count as f64);
        (v, d_mean / intra_count as f64)
    };
    for i in 0..n {
        for ch in 0..dim {
            ghat[i][ch] += d_intra_sum * ghat_intra[i][ch];
        }
    }

    // Cross term over instance mean features.
    let mut inter = 0.0;
    let mut inter_ops = 0u64;
    let m = groups.len();
    if !cfg.drop_inter && m > 1 {
        let means: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| {
                let mut mu = vec![0.0; dim];
                for &i in g {
                    for ch in 0..dim {
                        mu[ch] += pixels[i].unit[ch] / g.len() as f64;
                    }
                }
                mu
            })
            .collect();
        let mu_norms: Vec<f64> = means
            .iter()
            .map(|mu| mu.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mu_units: Vec<Vec<f64>> = means
            .iter()
            .zip(&mu_norms)
            .map(|(mu, &nrm)| mu.iter().map(|v| v / nrm.max(NORM_EPS)).collect())
            .collect();
        let pairs = (m * (m - 1)) as f64;
        let scale = if cfg.raw_sum_inter { 1.0 } else { 1.0 / pairs };
        let mut g_mu_unit = vec![vec![0.0; dim]; m];
        let mut sum = 0.0;
        for a in 0..m {
            for b in a + 1..m {
                let s = dot(&mu_units[a], &mu_units[b]);
                sum += 2.0 * (1.0 - s);
                inter_ops += 1;
                for ch in 0..dim {
                    g_mu_unit[a][ch] -= 2.0 * scale * mu_units[b][ch];
                    g_mu_unit[b][ch] -= 2.0 * scale * mu_units[a][ch];
                }
            }
        }
        inter = sum * scale;
        // Through the mean normalization, then spread to member pixels.
        for (k, group) in groups.iter().enumerate() {
            let mut g_mu = vec![0.0; dim];
            if mu_norms[k] > NORM_EPS {
                let along = dot(&mu_units[k], &g_mu_unit[k]);
                for ch in 0..dim {
                    g_mu[ch] = (g_mu_unit[k][ch] - mu_units[k][ch] * along) / mu_norms[k];
                }
            } else {
                for ch in 0..dim {
                    g_mu[ch] = g_mu_unit[k][ch] / NORM_EPS;
                }
            }
            for &i in group {
                for ch in 0..dim {
                    ghat[i][ch] += g_mu[ch] / group.len() as f64;
                }
            }
        }
    }

    let mut grad = FeatureMap::zeros(map.height, map.width, map.channels);
    backprop_normalization(&pixels, &ghat, &mut grad);
    Ok(ContrastiveOutput { value: intra + inter, intra, inter, grad, intra_ops, inter_ops })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mask(h: u32, w: u32, ids: Vec<u16>, m: u32) -> InstanceMaskSet {
        InstanceMaskSet { width: w, height: h, ids, m }
    }

    /// Two-instance map: left half one-hot axis 0, right half axis 1.
    fn orthogonal_map(h: u32, w: u32) -> (FeatureMap, InstanceMaskSet) {
        let mut map = FeatureMap::zeros(h, w, 4);
        let mut ids = vec![0u16; (h * w) as usize];
        for r in 0..h {
            for c in 0..w {
                let inst = if c < w / 2 { 1 } else { 2 };
                ids[(r * w + c) as usize] = inst;
                map.pixel_mut(r, c)[inst as usize - 1] = 1.0;
            }
        }
        (map, mask(h, w, ids, 2))
    }

    fn noisy_map(h: u32, w: u32, m: u16, sigma: f64, seed: u64) -> (FeatureMap, InstanceMaskSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = FeatureMap::zeros(h, w, m as u32 + 1);
        let mut ids = vec![0u16; (h * w) as usize];
        for r in 0..h {
            for c in 0..w {
                let inst = rng.gen_range(0..m) + 1;
                ids[(r * w + c) as usize] = inst;
                let px = map.pixel_mut(r, c);
                px[inst as usize - 1] = 1.0;
                for v in px.iter_mut() {
                    *v += sigma * rng.gen_range(-1.0..1.0);
                }
            }
        }
        (map, mask(h, w, ids, m as u32))
    }

    #[test]
    fn orthogonal_instances_give_unit_loss() {
        let (map, masks) = orthogonal_map(4, 4);
        let cfg = ContrastiveConfig::default();
        let out = contrastive_exact(&map, &masks, &cfg).unwrap();
        assert_eq!(out.intra, 0.0);
        assert_eq!(out.inter, 1.0);
        assert_eq!(out.value, 1.0);
    }

    #[test]
    fn single_instance_identical_features_is_zero() {
        let mut map = FeatureMap::zeros(4, 4, 4);
        for r in 0..4 {
            for c in 0..4 {
                map.pixel_mut(r, c)[2] = 0.7;
            }
        }
        let masks = mask(4, 4, vec![1; 16], 1);
        let out = contrastive_exact(&map, &masks, &ContrastiveConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn linear_equals_exact_on_noiseless_features() {
        let (map, masks) = orthogonal_map(8, 8);
        let cfg = ContrastiveConfig::default();
        let exact = contrastive_exact(&map, &masks, &cfg).unwrap();
        for seed in 0..5 {
            let lin = contrastive_linear(&map, &masks, seed, &cfg).unwrap();
            assert_eq!(lin.value, exact.value);
        }
    }

    #[test]
    fn exact_matches_naive_double_loop_reference() {
        let (map, masks) = noisy_map(8, 8, 3, 0.05, 11);
        let out = contrastive_exact(&map, &masks, &ContrastiveConfig::default()).unwrap();
        // Independent reference: raw formula over explicit index pairs.
        let mut feats = Vec::new();
        let mut inst = Vec::new();
        for r in 0..8 {
            for c in 0..8 {
                let id = masks.ids[(r * 8 + c) as usize];
                if id == 0 {
                    continue;
                }
                let f = map.pixel(r, c);
                let nrm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                feats.push(f.iter().map(|v| v / nrm).collect::<Vec<_>>());
                inst.push(id);
            }
        }
        let (mut si, mut ci, mut se, mut ce) = (0.0, 0u64, 0.0, 0u64);
        for i in 0..feats.len() {
            for j in 0..feats.len() {
                if i == j {
                    continue;
                }
                let s = dot(&feats[i], &feats[j]);
                if inst[i] == inst[j] {
                    si += s;
                    ci += 1;
                } else {
                    se += 1.0 - s;
                    ce += 1;
                }
            }
        }
        let reference = -(si / ci as f64).clamp(LOG_CLAMP, 1.0).ln() + se / ce as f64;
        assert!((out.value - reference).abs() < 1e-10);
    }

    #[test]
    fn linear_close_to_exact_under_noise() {
        let (map, masks) = noisy_map(16, 16, 4, 0.05, 21);
        let cfg = ContrastiveConfig::default();
        let exact = contrastive_exact(&map, &masks, &cfg).unwrap().value;
        let mut total_err = 0.0;
        for seed in 0..100 {
            let lin = contrastive_linear(&map, &masks, seed, &cfg).unwrap().value;
            total_err += (lin - exact).abs() / exact;
        }
        assert!(total_err / 100.0 <= 0.05, "mean rel err {}", total_err / 100.0);
    }

    #[test]
    fn intra_work_scales_linearly_for_estimator() {
        let cfg = ContrastiveConfig::default();
        let (m1, k1) = noisy_map(16, 16, 4, 0.05, 1);
        let (m2, k2) = noisy_map(16, 32, 4, 0.05, 2);
        let lin1 = contrastive_linear(&m1, &k1, 0, &cfg).unwrap();
        let lin2 = contrastive_linear(&m2, &k2, 0, &cfg).unwrap();
        let ratio = lin2.intra_ops as f64 / lin1.intra_ops as f64;
        assert!(ratio < 2.5, "linear intra ratio {ratio}");
        let ex1 = contrastive_exact(&m1, &k1, &cfg).unwrap();
        let ex2 = contrastive_exact(&m2, &k2, &cfg).unwrap();
        let ratio = ex2.intra_ops as f64 / ex1.intra_ops as f64;
        assert!(ratio > 3.0, "exact intra ratio {ratio}");
    }

    #[test]
    fn both_variants_gradients_match_fd() {
        let (mut map, masks) = noisy_map(6, 6, 3, 0.1, 31);
        let cfg = ContrastiveConfig::default();
        let h = 1e-6;
        for (label, f) in [
            ("exact", Box::new(|m: &FeatureMap, k: &InstanceMaskSet| {
                contrastive_exact(m, k, &cfg).unwrap()
            }) as Box<dyn Fn(&FeatureMap, &InstanceMaskSet) -> ContrastiveOutput>),
            ("linear", Box::new(|m: &FeatureMap, k: &InstanceMaskSet| {
                contrastive_linear(m, k, 7, &cfg).unwrap()
            })),
        ] {
            let out = f(&map, &masks);
            for i in (0..map.data.len()).step_by(17) {
                let orig = map.data[i];
                map.data[i] = orig + h;
                let vp = f(&map, &masks).value;
                map.data[i] = orig - h;
                let vm = f(&map, &masks).value;
                map.data[i] = orig;
                let fd = (vp - vm) / (2.0 * h);
                let an = out.grad.data[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4, "{label} entry {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn exact_invariant_to_pixel_permutation() {
        let (map, masks) = noisy_map(6, 6, 3, 0.1, 41);
        let cfg = ContrastiveConfig::default();
        let base = contrastive_exact(&map, &masks, &cfg).unwrap().value;
        // Swap two rows of pixels together with their mask entries.
        let mut map2 = map.clone();
        let mut masks2 = masks.clone();
        for c in 0..6 {
            for ch in 0..map.channels {
                let a = map.idx(1, c, ch);
                let b = map.idx(4, c, ch);
                map2.data.swap(a, b);
            }
            masks2.ids.swap((6 + c) as usize, (4 * 6 + c) as usize);
        }
        let permuted = contrastive_exact(&map2, &masks2, &cfg).unwrap().value;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn scaling_features_leaves_loss_unchanged() {
        let (map, masks) = noisy_map(6, 6, 3, 0.1, 51);
        let cfg = ContrastiveConfig::default();
        let base = contrastive_exact(&map, &masks, &cfg).unwrap().value;
        let mut scaled = map.clone();
        scaled.data.iter_mut().for_each(|v| *v *= 3.5);
        let after = contrastive_exact(&scaled, &masks, &cfg).unwrap().value;
        assert!((base - after).abs() < 1e-9);
    }

    #[test]
    fn background_only_is_an_error() {
        let map = FeatureMap::zeros(4, 4, 4);
        let masks = mask(4, 4, vec![0; 16], 1);
        assert!(matches!(
            contrastive_exact(&map, &masks, &ContrastiveConfig::default()),
            Err(LossError::NoInstances)
        ));
    }

    #[test]
    fn single_pixel_instance_joins_only_inter_term() {
        let mut map = FeatureMap::zeros(2, 3, 4);
        // instance 1: two pixels axis 0; instance 2: one pixel axis 1
        let ids = vec![1, 1, 2, 0, 0, 0];
        map.pixel_mut(0, 0)[0] = 1.0;
        map.pixel_mut(0, 1)[0] = 1.0;
        map.pixel_mut(0, 2)[1] = 1.0;
        let masks = mask(2, 3, ids, 2);
        let cfg = ContrastiveConfig::default();
        let lin = contrastive_linear(&map, &masks, 0, &cfg).unwrap();
        assert_eq!(lin.intra, 0.0);
        assert_eq!(lin.inter, 1.0);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (map, masks) = noisy_map(8, 8, 3, 0.1, 61);
        let cfg = ContrastiveConfig::default();
        let a = contrastive_linear(&map, &masks, 9, &cfg).unwrap();
        let b = contrastive_linear(&map, &masks, 9, &cfg).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad.data, b.grad.data);
    }
}
