//! Analytic backward pass through compositing, projection, covariance
//! construction, and SH shading, driven by the forward tape.

use super::sh;
use super::{ProjectedGaussian, RasterError, RenderTape, FOOTPRINT_CLAMP};
use crate::scene::{Camera, FeatureMap, GaussianPrimitive, SceneBundle};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

/// Gradients for one primitive's parameters.
#[derive(Debug, Clone)]
pub struct PrimGrad {
    pub mu: [f64; 3],
    pub alpha: f64,
    pub beta: f64,
    pub rot: [f64; 4],
    pub scale: [f64; 3],
    pub sh: Vec<f64>,
    pub payload: Vec<f64>,
}

impl PrimGrad {
    fn zeros(sh_len: usize, payload_len: usize) -> Self {
        PrimGrad {
            mu: [0.0; 3],
            alpha: 0.0,
            beta: 0.0,
            rot: [0.0; 4],
            scale: [0.0; 3],
            sh: vec![0.0; sh_len],
            payload: vec![0.0; payload_len],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub fine: Vec<PrimGrad>,
    pub coarse: Vec<PrimGrad>,
}

/// Upstream gradients of the loss with respect to rendered maps.
/// Channels left as `None` contribute nothing.
#[derive(Default)]
pub struct UpstreamGrads<'a> {
    pub rgb: Option<&'a FeatureMap>,
    pub inst: Option<&'a FeatureMap>,
    pub sem: Option<&'a FeatureMap>,
}

/// Per-projection gradients accumulated by the compositing backward pass.
struct ProjGrad {
    center2d: Vector2<f64>,
    /// Gradient w.r.t. the full 2x2 covariance (both off-diagonals counted).
    cov: Matrix2<f64>,
    /// Sum over samples of dL/du * g; alpha and beta gradients factor
    /// through it.
    acc_ag: f64,
    rgb: [f64; 3],
    payload: Vec<f64>,
}

/// Backward through front-to-back compositing for one field. `up_rgb` and
/// `up_feat` are upstream gradients of the color and payload maps.
fn composite_backward(
    projected: &[ProjectedGaussian],
    tape: &super::BlendTape,
    width: u32,
    height: u32,
    payload_dim: usize,
    up_rgb: Option<&FeatureMap>,
    up_feat: Option<&FeatureMap>,
) -> Vec<ProjGrad> {
    let mut grads: Vec<ProjGrad> = projected
        .iter()
        .map(|_| ProjGrad {
            center2d: Vector2::zeros(),
            cov: Matrix2::zeros(),
            acc_ag: 0.0,
            rgb: [0.0; 3],
            payload: vec![0.0; payload_dim],
        })
        .collect();
    let zero_rgb = [0.0; 3];
    let zero_feat = vec![0.0; payload_dim];
    let mut suffix_feat = vec![0.0; payload_dim];
    for row in 0..height {
        for col in 0..width {
            let samples = &tape.samples[(row * width + col) as usize];
            if samples.is_empty() {
                continue;
            }
            let urgb = up_rgb.map(|m| m.pixel(row, col)).unwrap_or(&zero_rgb[..]);
            let ufeat = up_feat
                .map(|m| m.pixel(row, col))
                .unwrap_or(&zero_feat[..]);
            // Replay transmittance to get per-sample weights.
            let mut trans = Vec::with_capacity(samples.len());
            let mut t = 1.0;
            for s in samples {
                trans.push(t);
                t *= 1.0 - projected[s.proj as usize].alpha_eff * s.g;
            }
            // Reverse sweep with suffix sums of downstream weighted payloads.
            let mut suffix_rgb = [0.0; 3];
            suffix_feat.iter_mut().for_each(|v| *v = 0.0);
            for (k, s) in samples.iter().enumerate().rev() {
                let p = &projected[s.proj as usize];
                let u = p.alpha_eff * s.g;
                let w = trans[k] * u;
                let mut d_u = 0.0;
                if up_rgb.is_some() {
                    for ch in 0..3 {
                        d_u += urgb[ch] * (trans[k] * p.rgb[ch] - suffix_rgb[ch] / (1.0 - u));
                    }
                }
                if up_feat.is_some() {
                    for ch in 0..payload_dim {
                        d_u += ufeat[ch]
                            * (trans[k] * p.payload[ch] - suffix_feat[ch] / (1.0 - u));
                    }
                }
                let g = &mut grads[s.proj as usize];
                if up_rgb.is_some() {
                    for ch in 0..3 {
                        g.rgb[ch] += w * urgb[ch];
                    }
                }
                if up_feat.is_some() {
                    for ch in 0..payload_dim {
                        g.payload[ch] += w * ufeat[ch];
                    }
                }
                g.acc_ag += d_u * s.g;
                // Footprint gradient; the clamp has zero slope.
                if s.g < FOOTPRINT_CLAMP {
                    let d_g = d_u * p.alpha_eff;
                    let d = Vector2::new(
                        col as f64 + 0.5 - p.center2d[0],
                        row as f64 + 0.5 - p.center2d[1],
                    );
                    let [ia, ib, ic] = p.cov_inv();
                    let ad = Vector2::new(ia * d.x + ib * d.y, ib * d.x + ic * d.y);
                    // dG/dc2d = G * A d ; dG/dSigma = (G/2) (A d)(A d)^T
                    g.center2d += d_g * s.g * ad;
                    g.cov += (d_g * s.g * 0.5) * ad * ad.transpose();
                }
                for ch in 0..3 {
                    suffix_rgb[ch] += w * p.rgb[ch];
                }
                for ch in 0..payload_dim {
                    suffix_feat[ch] += w * p.payload[ch];
                }
            }
        }
    }
    grads
}

fn quat_partials(q_hat: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q_hat;
    [
        2.0 * Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0),
        2.0 * Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x),
        2.0 * Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y),
        2.0 * Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0),
    ]
}

/// Maps a projection-space gradient back to the primitive's parameters.
fn project_backward(
    prim: &GaussianPrimitive,
    camera: &Camera,
    proj: &ProjectedGaussian,
    pg: &ProjGrad,
    sh_degree: u32,
    out: &mut PrimGrad,
) {
    let frame = super::projection_frame(prim, camera)
        .expect("primitive was projected in the forward pass");
    let t = frame.t_cam;
    let z = t.z;
    let m2: Matrix2x3<f64> = frame.jac * frame.rot_wc;

    // alpha / beta via the shared sample accumulator.
    out.alpha += proj.gate_value * pg.acc_ag;
    out.beta += prim.alpha * proj.gate_deriv * pg.acc_ag;

    // Covariance chain: Sigma2d = M2 * Cov_w * M2^T, M2 = J * R_wc.
    let v = pg.cov;
    let g_sigma_w: Matrix3<f64> = m2.transpose() * v * m2;
    let g_m2: Matrix2x3<f64> = (v + v.transpose()) * m2 * frame.world_cov;
    let g_j: Matrix2x3<f64> = g_m2 * frame.rot_wc.transpose();

    // Camera-space gradient: center path J^T d_c2d plus the J(t) dependency.
    let mut g_t: Vector3<f64> = frame.jac.transpose() * pg.center2d;
    let (fx, fy) = (camera.fx, camera.fy);
    g_t.x += g_j[(0, 2)] * (-fx / (z * z));
    g_t.y += g_j[(1, 2)] * (-fy / (z * z));
    g_t.z += g_j[(0, 0)] * (-fx / (z * z))
        + g_j[(1, 1)] * (-fy / (z * z))
        + g_j[(0, 2)] * (2.0 * fx * t.x / (z * z * z))
        + g_j[(1, 2)] * (2.0 * fy * t.y / (z * z * z));
    let g_mu_cam: Vector3<f64> = frame.rot_wc.transpose() * g_t;
    for k in 0..3 {
        out.mu[k] += g_mu_cam[k];
    }

    // World covariance chain: Cov_w = Rq D Rq^T with D = diag(scale^2).
    let rq = frame.quat_rot;
    let d = Matrix3::from_diagonal(&Vector3::new(
        prim.scale[0] * prim.scale[0],
        prim.scale[1] * prim.scale[1],
        prim.scale[2] * prim.scale[2],
    ));
    let g_d: Matrix3<f64> = rq.transpose() * g_sigma_w * rq;
    for k in 0..3 {
        out.scale[k] += 2.0 * prim.scale[k] * g_d[(k, k)];
    }
    let g_rq: Matrix3<f64> = (g_sigma_w + g_sigma_w.transpose()) * rq * d;
    let qn = (prim.rot.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let q_hat = [
        prim.rot[0] / qn,
        prim.rot[1] / qn,
        prim.rot[2] / qn,
        prim.rot[3] / qn,
    ];
    let partials = quat_partials(q_hat);
    let mut g_qhat = [0.0; 4];
    for k in 0..4 {
        g_qhat[k] = (g_rq.component_mul(&partials[k])).sum();
    }
    // Through normalization: (I - qq^T)/|q|.
    let dot: f64 = (0..4).map(|k| g_qhat[k] * q_hat[k]).sum();
    for k in 0..4 {
        out.rot[k] += (g_qhat[k] - dot * q_hat[k]) / qn;
    }

    // SH shading; saturated channels have zero slope.
    if pg.rgb.iter().any(|v| *v != 0.0) {
        let n = sh::basis_len(sh_degree);
        let (basis, basis_grad) = sh::sh_basis(sh_degree, [frame.dir.x, frame.dir.y, frame.dir.z]);
        let mut g_dir = Vector3::zeros();
        for ch in 0..3 {
            if proj.rgb_clamped[ch] || pg.rgb[ch] == 0.0 {
                continue;
            }
            for i in 0..n {
                out.sh[ch * n + i] += pg.rgb[ch] * basis[i];
                for axis in 0..3 {
                    g_dir[axis] += pg.rgb[ch] * prim.sh[ch * n + i] * basis_grad[i][axis];
                }
            }
        }
        // dir = v/|v| with v = mu - camera center.
        let proj_tangent = g_dir - frame.dir * frame.dir.dot(&g_dir);
        for k in 0..3 {
            out.mu[k] += proj_tangent[k] / frame.dir_norm;
        }
    }

    for (o, g) in out.payload.iter_mut().zip(&pg.payload) {
        *o += g;
    }
}

/// Full backward pass: upstream map gradients to parameter gradients for
/// every fine and coarse primitive. Needs the tape from `render_with_tape`.
pub fn blend_backward(
    bundle: &SceneBundle,
    camera: &Camera,
    tape: Option<&RenderTape>,
    upstream: &UpstreamGrads,
) -> Result<ParamGrads, RasterError> {
    let tape = tape.ok_or(RasterError::MissingTape)?;
    for (name, map, ch) in [
        ("rgb", upstream.rgb, 3),
        ("inst", upstream.inst, bundle.n_dim),
        ("sem", upstream.sem, bundle.m_dim),
    ] {
        if let Some(m) = map {
            if m.height != bundle.height || m.width != bundle.width || m.channels != ch {
                return Err(RasterError::ShapeMismatch(format!(
                    "{name}: got {}x{}x{}, expected {}x{}x{}",
                    m.height, m.width, m.channels, bundle.height, bundle.width, ch
                )));
            }
        }
    }
    let sh_len = bundle.sh_len();

    let fine_proj_grads = composite_backward(
        &tape.projected_fine,
        &tape.fine_tape,
        bundle.width,
        bundle.height,
        bundle.n_dim as usize,
        upstream.rgb,
        upstream.inst,
    );
    let coarse_proj_grads = composite_backward(
        &tape.projected_coarse,
        &tape.coarse_tape,
        bundle.width,
        bundle.height,
        bundle.m_dim as usize,
        None,
        upstream.sem,
    );

    let mut grads = ParamGrads {
        fine: bundle
            .fine
            .iter()
            .map(|_| PrimGrad::zeros(sh_len, bundle.n_dim as usize))
            .collect(),
        coarse: bundle
            .coarse
            .iter()
            .map(|_| PrimGrad::zeros(sh_len, bundle.m_dim as usize))
            .collect(),
    };
    for (proj, pg) in tape.projected_fine.iter().zip(&fine_proj_grads) {
        project_backward(
            &bundle.fine[proj.source_index],
            camera,
            proj,
            pg,
            bundle.sh_degree,
            &mut grads.fine[proj.source_index],
        );
    }
    for (proj, pg) in tape.projected_coarse.iter().zip(&coarse_proj_grads) {
        project_backward(
            &bundle.coarse[proj.source_index],
            camera,
            proj,
            pg,
            bundle.sh_degree,
            &mut grads.coarse[proj.source_index],
        );
    }
    Ok(grads)
}
