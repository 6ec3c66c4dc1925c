//! Straightforward per-pixel renderer used as an oracle for the tiled
//! path: every pixel walks the full depth-sorted primitive list with the
//! same footprint, cutoff, and clamp rules.

use super::{depth_order, project, ProjectedGaussian, RenderOutput, SAMPLE_CUTOFF, TRANSMITTANCE_STOP};
use crate::scene::{Camera, FeatureMap, SceneBundle};
use crate::sgm::GateMode;

fn composite_naive(
    projected: &[ProjectedGaussian],
    width: u32,
    height: u32,
    payload_dim: u32,
    include_rgb: bool,
) -> (FeatureMap, FeatureMap, FeatureMap, Vec<f64>) {
    let order = depth_order(projected);
    let mut rgb = FeatureMap::zeros(height, width, 3);
    let mut feat = FeatureMap::zeros(height, width, payload_dim);
    let mut acc = FeatureMap::zeros(height, width, 1);
    let mut contrib = vec![0.0; projected.len()];
    for row in 0..height {
        for col in 0..width {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut transmittance = 1.0;
            for &idx in &order {
                let p = &projected[idx as usize];
                let Some(g) = p.footprint(px, py) else { continue };
                let u = p.alpha_eff * g;
                if u < SAMPLE_CUTOFF {
                    continue;
                }
                let w = transmittance * u;
                if include_rgb {
                    let out = rgb.pixel_mut(row, col);
                    for ch in 0..3 {
                        out[ch] += w * p.rgb[ch];
                    }
                }
                let out = feat.pixel_mut(row, col);
                for (dst, &v) in out.iter_mut().zip(&p.payload) {
                    *dst += w * v;
                }
                contrib[idx as usize] += w;
                transmittance *= 1.0 - u;
                if transmittance < TRANSMITTANCE_STOP {
                    break;
                }
            }
            acc.pixel_mut(row, col)[0] = 1.0 - transmittance;
        }
    }
    (rgb, feat, acc, contrib)
}

pub fn render_reference(bundle: &SceneBundle, camera: &Camera, gate: GateMode) -> RenderOutput {
    let (proj_fine, stats_f) = project(&bundle.fine, camera, gate, bundle.sh_degree);
    let (proj_coarse, stats_c) =
        project(&bundle.coarse, camera, GateMode::Identity, bundle.sh_degree);
    let (rgb, inst, acc, cf) =
        composite_naive(&proj_fine, bundle.width, bundle.height, bundle.n_dim, true);
    let (_, sem, _, cc) =
        composite_naive(&proj_coarse, bundle.width, bundle.height, bundle.m_dim, false);
    let mut contrib_fine = vec![0.0; bundle.fine.len()];
    for (p, &w) in proj_fine.iter().zip(&cf) {
        contrib_fine[p.source_index] = w;
    }
    let mut contrib_coarse = vec![0.0; bundle.coarse.len()];
    for (p, &w) in proj_coarse.iter().zip(&cc) {
        contrib_coarse[p.source_index] = w;
    }
    RenderOutput {
        rgb,
        inst,
        sem,
        acc,
        contrib_fine,
        contrib_coarse,
        stats: super::ProjectStats {
            culled_near: stats_f.culled_near + stats_c.culled_near,
        },
    }
}
