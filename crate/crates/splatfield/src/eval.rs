//! Image and segmentation metrics, and the storage accountant for the
//! dual-field layout.

use crate::scene::{FeatureMap, SceneBundle};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {h}x{w} smaller than the {win}x{win} window")]
    TooSmall { h: u32, w: u32, win: u32 },
    #[error("mask id {id} at pixel {pixel} exceeds class count {classes}")]
    BadClassId { id: u16, pixel: usize, classes: u16 },
}

pub const PSNR_CAP: f64 = 100.0;

fn check_same(a: &FeatureMap, b: &FeatureMap) -> Result<(), EvalError> {
    if !a.same_shape(b) {
        return Err(EvalError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for [0,1] images, capped at 100.
pub fn psnr(a: &FeatureMap, b: &FeatureMap) -> Result<f64, EvalError> {
    check_same(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: u32 = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as i64;
    let mut w = Vec::with_capacity((SSIM_WINDOW * SSIM_WINDOW) as usize);
    for r in -half..=half {
        for c in -half..=half {
            w.push((-((r * r + c * c) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

fn grayscale(m: &FeatureMap) -> Vec<f64> {
    let mut out = Vec::with_capacity((m.height * m.width) as usize);
    for r in 0..m.height {
        for c in 0..m.width {
            let px = m.pixel(r, c);
            out.push(px.iter().sum::<f64>() / px.len() as f64);
        }
    }
    out
}

/// Mean local SSIM over valid 11x11 windows of the channel-mean images.
pub fn ssim(a: &FeatureMap, b: &FeatureMap) -> Result<f64, EvalError> {
    check_same(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(EvalError::TooSmall { h: a.height, w: a.width, win: SSIM_WINDOW });
    }
    let (ga, gb) = (grayscale(a), grayscale(b));
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let w = a.width as usize;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in half..a.height - half {
        for c in half..a.width - half {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
            let mut k = 0;
            for dr in 0..SSIM_WINDOW {
                for dc in 0..SSIM_WINDOW {
                    let idx = (r + dr - half) as usize * w + (c + dc - half) as usize;
                    let (x, y) = (ga[idx], gb[idx]);
                    let wk = win[k];
                    k += 1;
                    mu_a += wk * x;
                    mu_b += wk * y;
                    aa += wk * x * x;
                    bb += wk * y * y;
                    ab += wk * x * y;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SegMetrics {
    /// IoU averaged over classes present in the ground truth.
    pub miou: f64,
    pub pixel_accuracy: f64,
}

/// mIoU and pixel accuracy between two id images of equal size.
pub fn seg_metrics(pred: &[u16], gt: &[u16], classes: u16) -> Result<SegMetrics, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch(format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    for (pixel, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        for id in [p, g] {
            if id >= classes {
                return Err(EvalError::BadClassId { id, pixel, classes });
            }
        }
    }
    let k = classes as usize;
    let mut intersection = vec![0u64; k];
    let mut pred_count = vec![0u64; k];
    let mut gt_count = vec![0u64; k];
    let mut correct = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        pred_count[p as usize] += 1;
        gt_count[g as usize] += 1;
        if p == g {
            intersection[p as usize] += 1;
            correct += 1;
        }
    }
    let mut iou_sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        if gt_count[c] == 0 {
            continue;
        }
        let union = pred_count[c] + gt_count[c] - intersection[c];
        iou_sum += intersection[c] as f64 / union as f64;
        present += 1;
    }
    Ok(SegMetrics {
        miou: if present > 0 { iou_sum / present as f64 } else { 0.0 },
        pixel_accuracy: correct as f64 / pred.len().max(1) as f64,
    })
}

/// Scalar count of the geometric payload at SH degree k:
/// position 3 + opacity 1 + rotation 4 + scale 3 + SH 3(k+1)^2.
pub fn geometry_scalars(k: u32) -> u64 {
    (3 + 1 + 4 + 3) as u64 + 3 * ((k + 1) * (k + 1)) as u64
}

#[derive(Debug, Clone, Copy)]
pub struct AccountConfig {
    /// SH degree assumed by the layout.
    pub sh_degree: u32,
    /// Count the importance score; off by default since pruned scenes no
    /// longer need it at inference.
    pub include_beta: bool,
}

impl Default for AccountConfig {
    fn default() -> Self {
        AccountConfig { sh_degree: 3, include_beta: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StorageReport {
    pub fine_count: u64,
    pub coarse_count: u64,
    pub scalars_per_fine: u64,
    pub scalars_per_coarse: u64,
    pub bytes_fine: u64,
    pub bytes_coarse: u64,
    pub bytes_total: u64,
    /// Decimal megabytes (1 MB = 1e6 bytes); the only convention that
    /// reproduces the published baseline arithmetic.
    pub mb_total: f64,
    /// Same pixel count, geometry only.
    pub baseline_plain_bytes: u64,
    pub baseline_plain_mb: f64,
    /// Same pixel count with a full M-dim semantic vector per primitive.
    pub baseline_semantic_bytes: u64,
    pub baseline_semantic_mb: f64,
}

const BYTES_PER_SCALAR: u64 = 4;
const MB: f64 = 1e6;

pub fn account(bundle: &SceneBundle, cfg: &AccountConfig) -> StorageReport {
    account_counts(
        bundle.fine.len() as u64,
        bundle.coarse.len() as u64,
        bundle.n_dim as u64,
        bundle.m_dim as u64,
        (bundle.views as u64) * (bundle.height as u64) * (bundle.width as u64),
        cfg,
    )
}

/// The arithmetic itself, usable for hypothetical layouts.
pub fn account_counts(
    fine_count: u64,
    coarse_count: u64,
    n_dim: u64,
    m_dim: u64,
    pixel_count: u64,
    cfg: &AccountConfig,
) -> StorageReport {
    let geom = geometry_scalars(cfg.sh_degree) + if cfg.include_beta { 1 } else { 0 };
    let scalars_per_fine = geom + n_dim;
    let scalars_per_coarse = geom + m_dim;
    let bytes_fine = fine_count * scalars_per_fine * BYTES_PER_SCALAR;
    let bytes_coarse = coarse_count * scalars_per_coarse * BYTES_PER_SCALAR;
    let bytes_total = bytes_fine + bytes_coarse;
    let baseline_plain_bytes = pixel_count * geom * BYTES_PER_SCALAR;
    let baseline_semantic_bytes = pixel_count * (geom + m_dim) * BYTES_PER_SCALAR;
    StorageReport {
        fine_count,
        coarse_count,
        scalars_per_fine,
        scalars_per_coarse,
        bytes_fine,
        bytes_coarse,
        bytes_total,
        mb_total: bytes_total as f64 / MB,
        baseline_plain_bytes,
        baseline_plain_mb: baseline_plain_bytes as f64 / MB,
        baseline_semantic_bytes,
        baseline_semantic_mb: baseline_semantic_bytes as f64 / MB,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: u32, w: u32) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FeatureMap::zeros(h, w, 3);
        m.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        m
    }

    #[test]
    fn psnr_identity_hits_cap() {
        let a = random_image(1, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_constant_gap_closed_form() {
        let a = FeatureMap::zeros(8, 8, 3);
        let mut b = FeatureMap::zeros(8, 8, 3);
        b.data.iter_mut().for_each(|v| *v = 0.5);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 10.0 * (1.0f64 / 0.25).log10()).abs() < 1e-12);
        assert!((v - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn psnr_is_symmetric_and_matches_direct_formula() {
        let a = random_image(2, 12, 12);
        let b = random_image(3, 12, 12);
        let ab = psnr(&a, &b).unwrap();
        assert_eq!(ab, psnr(&b, &a).unwrap());
        let mse: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.data.len() as f64;
        assert!((ab - (-10.0 * mse.log10())).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = random_image(4, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_penalizes_negative() {
        let a = random_image(5, 16, 16);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = FeatureMap::zeros(8, 8, 3);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_matches_naive_sliding_window() {
        // checkerboard vs a blurred copy
        let mut a = FeatureMap::zeros(16, 16, 3);
        for r in 0..16u32 {
            for c in 0..16u32 {
                let v = ((r / 2 + c / 2) % 2) as f64;
                a.pixel_mut(r, c).iter_mut().for_each(|x| *x = v);
            }
        }
        let mut b = a.clone();
        for r in 1..15u32 {
            for c in 1..15u32 {
                let mut sum = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        sum += a.pixel((r as i64 + dr) as u32, (c as i64 + dc) as u32)[0];
                    }
                }
                b.pixel_mut(r, c).iter_mut().for_each(|x| *x = sum / 9.0);
            }
        }
        let fast = ssim(&a, &b).unwrap();
        // naive reference: recompute with plain loops and f64 sums
        let (ga, gb) = (grayscale(&a), grayscale(&b));
        let win = gaussian_window();
        let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
        let mut total = 0.0;
        let mut count = 0;
        for r in 5..11i64 {
            for c in 5..11i64 {
                let (mut mu_a, mut mu_b, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                let mut k = 0;
                for dr in -5i64..=5 {
                    for dc in -5i64..=5 {
                        let idx = ((r + dr) * 16 + c + dc) as usize;
                        let wk = win[k];
                        k += 1;
                        mu_a += wk * ga[idx];
                        mu_b += wk * gb[idx];
                        aa += wk * ga[idx] * ga[idx];
                        bb += wk * gb[idx] * gb[idx];
                        ab += wk * ga[idx] * gb[idx];
                    }
                }
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * (ab - mu_a * mu_b) + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1)
                        * ((aa - mu_a * mu_a) + (bb - mu_b * mu_b) + c2));
                count += 1;
            }
        }
        let naive = total / count as f64;
        assert!((fast - naive).abs() < 1e-6, "fast {fast} naive {naive}");
    }

    #[test]
    fn seg_identity_and_complement() {
        let gt = vec![0u16, 0, 1, 1, 0, 1];
        let m = seg_metrics(&gt, &gt, 2).unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.pixel_accuracy, 1.0);
        let pred: Vec<u16> = gt.iter().map(|&v| 1 - v).collect();
        let m = seg_metrics(&pred, &gt, 2).unwrap();
        assert_eq!(m.miou, 0.0);
        assert_eq!(m.pixel_accuracy, 0.0);
    }

    #[test]
    fn seg_matches_confusion_matrix_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pred: Vec<u16> = (0..256).map(|_| rng.gen_range(0..4)).collect();
        let gt: Vec<u16> = (0..256).map(|_| rng.gen_range(0..4)).collect();
        let m = seg_metrics(&pred, &gt, 4).unwrap();
        let mut confusion = [[0u64; 4]; 4];
        for (&p, &g) in pred.iter().zip(&gt) {
            confusion[g as usize][p as usize] += 1;
        }
        let mut iou = 0.0;
        let mut present = 0;
        for c in 0..4 {
            let gt_c: u64 = confusion[c].iter().sum();
            if gt_c == 0 {
                continue;
            }
            let pred_c: u64 = (0..4).map(|g| confusion[g][c]).sum();
            iou += confusion[c][c] as f64 / (gt_c + pred_c - confusion[c][c]) as f64;
            present += 1;
        }
        assert!((m.miou - iou / present as f64).abs() < 1e-12);
        let correct: u64 = (0..4).map(|c| confusion[c][c]).sum();
        assert!((m.pixel_accuracy - correct as f64 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn geometry_is_59_scalars_at_degree_3() {
        assert_eq!(geometry_scalars(3), 59);
    }

    #[test]
    fn account_matches_published_baseline() {
        let cfg = AccountConfig::default();
        let report = account_counts(131_072, 0, 0, 512, 131_072, &cfg);
        assert_eq!(report.baseline_plain_bytes, 131_072 * 59 * 4);
        assert!((report.baseline_plain_mb - 30.93).abs() < 0.01);
    }

    #[test]
    fn account_dual_field_within_published_envelope() {
        let cfg = AccountConfig::default();
        let report = account_counts(87_700, 2 * 32 * 32, 8, 512, 131_072, &cfg);
        let residual = (report.mb_total - 25.58).abs() / 25.58;
        assert!(residual < 0.15, "total {} MB, residual {residual}", report.mb_total);
    }

    #[test]
    fn account_is_linear_in_counts() {
        let cfg = AccountConfig::default();
        let a = account_counts(1000, 32, 8, 512, 2048, &cfg);
        let b = account_counts(2000, 32, 8, 512, 2048, &cfg);
        assert_eq!(b.bytes_fine, 2 * a.bytes_fine);
        assert_eq!(b.bytes_coarse, a.bytes_coarse);
    }

    #[test]
    fn dual_field_beats_single_field_whenever_it_should() {
        let cfg = AccountConfig::default();
        // S > 1 and M > N: dual-field total under the all-M baseline
        let report = account_counts(2048, 32, 8, 512, 2048, &cfg);
        assert!(report.bytes_total < report.baseline_semantic_bytes);
    }
}
