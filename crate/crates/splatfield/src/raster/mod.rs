//! Software splatting: EWA-style projection of 3D Gaussians to screen
//! space, tile-binned front-to-back alpha compositing with importance
//! gating, and analytic gradients for every blended channel.
//!
//! The semantic channel composites only coarse-field primitives; RGB and
//! instance channels composite only fine-field primitives.

mod backward;
pub mod reference;
pub mod sh;

pub use backward::{blend_backward, ParamGrads, PrimGrad, UpstreamGrads};

use crate::scene::{Camera, FeatureMap, GaussianPrimitive, SceneBundle};
use crate::sgm::GateMode;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use thiserror::Error;

pub const NEAR_PLANE: f64 = 0.01;
/// Anti-aliasing floor added to the screen-space covariance diagonal.
pub const COV2D_FLOOR: f64 = 0.3;
/// Per-sample footprint values are clamped to this maximum.
pub const FOOTPRINT_CLAMP: f64 = 0.99;
/// Samples with gated opacity below this are skipped.
pub const SAMPLE_CUTOFF: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-12;
pub const TILE_SIZE: u32 = 16;
const BBOX_SIGMA: f64 = 3.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("backward pass requires the forward tape; render with render_with_tape")]
    MissingTape,
    #[error("upstream gradient shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// A splat after projection to a camera.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    /// Pixel coordinates of the projected center.
    pub center2d: [f64; 2],
    /// Screen-space covariance [[a,b],[b,c]] in pixels^2, floor applied.
    pub cov2d: [f64; 3],
    /// Camera-space depth.
    pub depth: f64,
    /// SH color toward the camera, clamped to [0,1].
    pub rgb: [f64; 3],
    /// Which channels the color clamp saturated (gradient is zero there).
    pub rgb_clamped: [bool; 3],
    /// Raw opacity.
    pub alpha: f64,
    /// Gate value g(beta) and its derivative.
    pub gate_value: f64,
    pub gate_deriv: f64,
    /// alpha * g(beta); what compositing actually multiplies.
    pub alpha_eff: f64,
    /// Feature carried for feature-map rendering (f_sem when present,
    /// otherwise f_inst).
    pub payload: Vec<f64>,
    /// Index into the bundle slice this projection came from.
    pub source_index: usize,
}

impl ProjectedGaussian {
    /// Inverse covariance as (a, b, c) of [[a,b],[b,c]].
    pub fn cov_inv(&self) -> [f64; 3] {
        let [a, b, c] = self.cov2d;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }

    /// Axis-aligned 3-sigma half extents.
    pub fn bbox_radii(&self) -> (f64, f64) {
        (BBOX_SIGMA * self.cov2d[0].sqrt(), BBOX_SIGMA * self.cov2d[2].sqrt())
    }

    /// Footprint value at a pixel center, respecting the bbox rule and the
    /// clamp; `None` when the pixel lies outside the bounding box.
    pub fn footprint(&self, px: f64, py: f64) -> Option<f64> {
        let (rx, ry) = self.bbox_radii();
        let dx = px - self.center2d[0];
        let dy = py - self.center2d[1];
        if dx.abs() > rx || dy.abs() > ry {
            return None;
        }
        let [ia, ib, ic] = self.cov_inv();
        let q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy;
        Some((-0.5 * q).exp().min(FOOTPRINT_CLAMP))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectStats {
    pub culled_near: usize,
}

fn quat_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub(crate) struct ProjectionFrame {
    pub t_cam: Vector3<f64>,
    pub jac: Matrix2x3<f64>,
    pub rot_wc: Matrix3<f64>,
    pub quat_rot: Matrix3<f64>,
    pub world_cov: Matrix3<f64>,
    pub dir: Vector3<f64>,
    pub dir_norm: f64,
}

/// Shared forward intermediates for projection and its backward pass.
pub(crate) fn projection_frame(
    prim: &GaussianPrimitive,
    camera: &Camera,
) -> Option<ProjectionFrame> {
    let t = camera.world_to_camera(prim.mu);
    let t_cam = Vector3::new(t[0], t[1], t[2]);
    if t_cam.z <= NEAR_PLANE {
        return None;
    }
    let z = t_cam.z;
    let jac = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * t_cam.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * t_cam.y / (z * z),
    );
    let r = &camera.rotation;
    let rot_wc = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
    let quat_rot = quat_matrix(prim.rot);
    let scale_sq = Matrix3::from_diagonal(&Vector3::new(
        prim.scale[0] * prim.scale[0],
        prim.scale[1] * prim.scale[1],
        prim.scale[2] * prim.scale[2],
    ));
    let world_cov = quat_rot * scale_sq * quat_rot.transpose();
    let cc = camera.center();
    let v = Vector3::new(prim.mu[0] - cc[0], prim.mu[1] - cc[1], prim.mu[2] - cc[2]);
    let dir_norm = v.norm();
    let dir = v / dir_norm;
    Some(ProjectionFrame { t_cam, jac, rot_wc, quat_rot, world_cov, dir, dir_norm })
}

/// Projects a bundle slice to screen space. Primitives behind the near
/// plane are culled silently; culls are counted in the stats.
pub fn project(
    prims: &[GaussianPrimitive],
    camera: &Camera,
    gate: GateMode,
    sh_degree: u32,
) -> (Vec<ProjectedGaussian>, ProjectStats) {
    let mut out = Vec::with_capacity(prims.len());
    let mut stats = ProjectStats::default();
    for (i, prim) in prims.iter().enumerate() {
        let Some(frame) = projection_frame(prim, camera) else {
            stats.culled_near += 1;
            continue;
        };
        let z = frame.t_cam.z;
        let center2d = [
            camera.fx * frame.t_cam.x / z + camera.cx,
            camera.fy * frame.t_cam.y / z + camera.cy,
        ];
        let m2: Matrix2x3<f64> = frame.jac * frame.rot_wc;
        let cov: Matrix2<f64> = m2 * frame.world_cov * m2.transpose();
        let cov2d = [cov[(0, 0)] + COV2D_FLOOR, cov[(0, 1)], cov[(1, 1)] + COV2D_FLOOR];
        let (rgb, rgb_clamped) =
            sh::sh_eval(sh_degree, &prim.sh, [frame.dir.x, frame.dir.y, frame.dir.z]);
        let (gate_value, gate_deriv) = gate.apply(prim.beta);
        let payload = prim.f_sem.clone().unwrap_or_else(|| prim.f_inst.clone());
        out.push(ProjectedGaussian {
            center2d,
            cov2d,
            depth: z,
            rgb,
            rgb_clamped,
            alpha: prim.alpha,
            gate_value,
            gate_deriv,
            alpha_eff: prim.alpha * gate_value,
            payload,
            source_index: i,
        });
    }
    (out, stats)
}

/// Depth-ascending order with source-index tie-break, for determinism.
pub fn depth_order(projected: &[ProjectedGaussian]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..projected.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&projected[a as usize], &projected[b as usize]);
        pa.depth
            .partial_cmp(&pb.depth)
            .unwrap()
            .then(pa.source_index.cmp(&pb.source_index))
    });
    order
}

/// One composited sample: which projection, and its clamped footprint value.
#[derive(Debug, Clone, Copy)]
pub struct TapeSample {
    pub proj: u32,
    pub g: f64,
}

/// Per-pixel sample lists recorded by the forward pass, in blend order.
#[derive(Debug, Clone, Default)]
pub struct BlendTape {
    pub samples: Vec<Vec<TapeSample>>,
}

#[derive(Debug, Clone)]
pub struct BlendOutput {
    /// C=3 color map; zeros when RGB was not requested.
    pub rgb: FeatureMap,
    /// Payload feature map.
    pub feat: FeatureMap,
    /// 1 - final transmittance per pixel.
    pub acc: FeatureMap,
    /// Per-projection total blended weight over all pixels.
    pub contrib: Vec<f64>,
}

/// Front-to-back composite of projected Gaussians over a pixel grid.
/// Primitives are tile-binned by their 3-sigma bounding box; each sample
/// respects the bbox rule, the footprint clamp, and the opacity cutoff.
pub fn blend(
    projected: &[ProjectedGaussian],
    width: u32,
    height: u32,
    payload_dim: u32,
    include_rgb: bool,
    with_tape: bool,
) -> (BlendOutput, Option<BlendTape>) {
    let order = depth_order(projected);
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for &idx in &order {
        let p = &projected[idx as usize];
        let (rx, ry) = p.bbox_radii();
        let x0 = ((p.center2d[0] - rx).floor().max(0.0)) as u32 / TILE_SIZE;
        let y0 = ((p.center2d[1] - ry).floor().max(0.0)) as u32 / TILE_SIZE;
        let x1 = (p.center2d[0] + rx).ceil().min(width as f64 - 1.0);
        let y1 = (p.center2d[1] + ry).ceil().min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as u32 / TILE_SIZE, y1 as u32 / TILE_SIZE);
        for ty in y0..=y1.min(tiles_y - 1) {
            for tx in x0..=x1.min(tiles_x - 1) {
                bins[(ty * tiles_x + tx) as usize].push(idx);
            }
        }
    }

    let mut out = BlendOutput {
        rgb: FeatureMap::zeros(height, width, 3),
        feat: FeatureMap::zeros(height, width, payload_dim),
        acc: FeatureMap::zeros(height, width, 1),
        contrib: vec![0.0; projected.len()],
    };
    let mut tape = with_tape.then(|| BlendTape {
        samples: vec![Vec::new(); (width * height) as usize],
    });

    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let bin = &bins[(ty * tiles_x + tx) as usize];
            if bin.is_empty() {
                continue;
            }
            for row in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
                for col in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                    let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                    let mut transmittance = 1.0;
                    for &idx in bin {
                        let p = &projected[idx as usize];
                        let Some(g) = p.footprint(px, py) else { continue };
                        let u = p.alpha_eff * g;
                        if u < SAMPLE_CUTOFF {
                            continue;
                        }
                        let w = transmittance * u;
                        if include_rgb {
                            let px_rgb = out.rgb.pixel_mut(row, col);
                            for ch in 0..3 {
                                px_rgb[ch] += w * p.rgb[ch];
                            }
                        }
                        let px_feat = out.feat.pixel_mut(row, col);
                        for (dst, &v) in px_feat.iter_mut().zip(&p.payload) {
                            *dst += w * v;
                        }
                        out.contrib[idx as usize] += w;
                        if let Some(t) = tape.as_mut() {
                            t.samples[(row * width + col) as usize].push(TapeSample { proj: idx, g });
                        }
                        transmittance *= 1.0 - u;
                        if transmittance < TRANSMITTANCE_STOP {
                            break;
                        }
                    }
                    out.acc.pixel_mut(row, col)[0] = 1.0 - transmittance;
                }
            }
        }
    }
    (out, tape)
}

/// Full render of a bundle: RGB + instance maps from the fine field,
/// semantic map from the coarse field.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: FeatureMap,
    pub inst: FeatureMap,
    pub sem: FeatureMap,
    /// Accumulated opacity of the fine field.
    pub acc: FeatureMap,
    /// Per fine / coarse primitive total blended weight (zero if culled).
    pub contrib_fine: Vec<f64>,
    pub contrib_coarse: Vec<f64>,
    pub stats: ProjectStats,
}

/// Everything the backward pass needs from a forward render.
pub struct RenderTape {
    pub projected_fine: Vec<ProjectedGaussian>,
    pub projected_coarse: Vec<ProjectedGaussian>,
    pub fine_tape: BlendTape,
    pub coarse_tape: BlendTape,
    pub gate: GateMode,
}

fn render_inner(
    bundle: &SceneBundle,
    camera: &Camera,
    gate: GateMode,
    with_tape: bool,
) -> (RenderOutput, Option<RenderTape>) {
    let (proj_fine, stats_f) = project(&bundle.fine, camera, gate, bundle.sh_degree);
    // Coarse primitives are not importance-gated; their beta stays as stored.
    let (proj_coarse, stats_c) = project(&bundle.coarse, camera, GateMode::Identity, bundle.sh_degree);
    let (fine_out, fine_tape) = blend(
        &proj_fine,
        bundle.width,
        bundle.height,
        bundle.n_dim,
        true,
        with_tape,
    );
    let (coarse_out, coarse_tape) = blend(
        &proj_coarse,
        bundle.width,
        bundle.height,
        bundle.m_dim,
        false,
        with_tape,
    );
    let mut contrib_fine = vec![0.0; bundle.fine.len()];
    for (p, &w) in proj_fine.iter().zip(&fine_out.contrib) {
        contrib_fine[p.source_index] = w;
    }
    let mut contrib_coarse = vec![0.0; bundle.coarse.len()];
    for (p, &w) in proj_coarse.iter().zip(&coarse_out.contrib) {
        contrib_coarse[p.source_index] = w;
    }
    let out = RenderOutput {
        rgb: fine_out.rgb,
        inst: fine_out.feat,
        sem: coarse_out.feat,
        acc: fine_out.acc,
        contrib_fine,
        contrib_coarse,
        stats: ProjectStats { culled_near: stats_f.culled_near + stats_c.culled_near },
    };
    let tape = with_tape.then(|| RenderTape {
        projected_fine: proj_fine,
        projected_coarse: proj_coarse,
        fine_tape: fine_tape.unwrap(),
        coarse_tape: coarse_tape.unwrap(),
        gate,
    });
    (out, tape)
}

pub fn render(bundle: &SceneBundle, camera: &Camera, gate: GateMode) -> RenderOutput {
    render_inner(bundle, camera, gate, false).0
}

pub fn render_with_tape(
    bundle: &SceneBundle,
    camera: &Camera,
    gate: GateMode,
) -> (RenderOutput, RenderTape) {
    let (out, tape) = render_inner(bundle, camera, gate, true);
    (out, tape.unwrap())
}
