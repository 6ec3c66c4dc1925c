//! Deterministic synthetic scene generator.
//!
//! Builds a pixel-wise two-field bundle from a handful of colored discs in
//! front of a background plane, with a configurable fraction of later-view
//! primitives duplicating first-view primitives. Duplicates are jittered
//! slightly toward the camera, given slightly higher opacity, and shaded
//! with a stale darker copy of the source color, so the redundant copy
//! shadows the original with the wrong color and photometric optimization
//! receives a signal it can only resolve by gating the copy off.

use super::{quantize_to_f32, Camera, FeatureMap, GaussianPrimitive, InstanceMaskSet, SceneBundle, SceneError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    /// View count, at least 2.
    pub views: u32,
    pub height: u32,
    pub width: u32,
    /// Disc count; needs objects + 1 <= n_dim and objects < m_dim.
    pub objects: u32,
    /// Fraction of all fine primitives that are redundant duplicates,
    /// realized inside views 2..V. Must satisfy overlap <= (V-1)/V.
    pub overlap: f64,
    /// Per-component Gaussian noise on instance features before renormalization.
    pub feature_noise: f64,
    pub downsample: u32,
    pub n_dim: u32,
    pub m_dim: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            views: 2,
            height: 32,
            width: 32,
            objects: 3,
            overlap: 0.5,
            feature_noise: 0.0,
            downsample: 8,
            n_dim: 8,
            m_dim: 512,
        }
    }
}

/// Generator output: bundle plus per-view ground truth.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub bundle: SceneBundle,
    /// One camera per input view.
    pub cameras: Vec<Camera>,
    /// A nearby camera excluded from any fitting target set.
    pub held_out: Camera,
    /// Per-view instance masks.
    pub masks: Vec<InstanceMaskSet>,
    /// Per-view one-hot M-dim semantic target maps.
    pub semantic_targets: Vec<FeatureMap>,
    /// Per-fine-primitive ground-truth redundancy labels.
    pub redundant: Vec<bool>,
}

impl SynthScene {
    /// The scene without its redundant duplicates, importance saturated.
    /// Rendering this is the ground truth for photometric targets.
    pub fn ideal_bundle(&self) -> SceneBundle {
        let mut b = self.bundle.clone();
        b.fine = b
            .fine
            .iter()
            .zip(&self.redundant)
            .filter(|(_, &r)| !r)
            .map(|(p, _)| {
                let mut p = p.clone();
                p.beta = 1.0;
                p
            })
            .collect();
        b.provenance = format!("{};ideal", self.bundle.provenance);
        b
    }
}

/// Encodes redundancy labels as a hex bitstring for the provenance tag.
pub fn encode_redundancy(labels: &[bool]) -> String {
    let mut out = String::with_capacity(labels.len() / 4 + 1);
    for chunk in labels.chunks(4) {
        let mut nibble = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            if b {
                nibble |= 1 << i;
            }
        }
        out.push(char::from_digit(nibble as u32, 16).unwrap());
    }
    out
}

/// Recovers redundancy labels from a provenance tag written by `synth_scene`.
pub fn decode_redundancy(provenance: &str, count: usize) -> Option<Vec<bool>> {
    let hex = provenance
        .split(';')
        .find_map(|field| field.strip_prefix("redundant="))?;
    let mut out = Vec::with_capacity(count);
    for ch in hex.chars() {
        let nibble = ch.to_digit(16)?;
        for i in 0..4 {
            out.push(nibble & (1 << i) != 0);
        }
    }
    if out.len() < count {
        return None;
    }
    out.truncate(count);
    Some(out)
}

const BACKGROUND_DEPTH: f64 = 6.0;
const ORIGINAL_ALPHA: f64 = 0.8;
const DUPLICATE_ALPHA: f64 = 0.9;
const INITIAL_BETA: f64 = 0.7;
const BASELINE: f64 = 0.005;
const SH_C0: f64 = 0.282_094_791_773_878_14;

fn validate_spec(spec: &SynthSpec) -> Result<(), SceneError> {
    let fail = |msg: String| Err(SceneError::Invalid(msg));
    if spec.views < 2 {
        return fail(format!("views = {} must be >= 2", spec.views));
    }
    if spec.objects == 0 {
        return fail("objects must be positive".into());
    }
    if spec.objects + 1 > spec.n_dim {
        return fail(format!(
            "objects + background = {} classes exceed instance dimension N = {}",
            spec.objects + 1,
            spec.n_dim
        ));
    }
    if spec.objects >= spec.m_dim {
        return fail(format!("objects = {} needs m_dim > objects", spec.objects));
    }
    if !(0.0..=1.0).contains(&spec.overlap) {
        return fail(format!("overlap = {} outside [0,1]", spec.overlap));
    }
    let max_overlap = (spec.views - 1) as f64 / spec.views as f64;
    if spec.overlap > max_overlap + 1e-12 {
        return fail(format!(
            "overlap = {} exceeds ({} - 1)/{} = {max_overlap}; later views cannot hold that many duplicates",
            spec.overlap, spec.views, spec.views
        ));
    }
    if spec.feature_noise < 0.0 {
        return fail("feature_noise must be >= 0".into());
    }
    if spec.downsample == 0
        || !spec.height.is_multiple_of(spec.downsample)
        || !spec.width.is_multiple_of(spec.downsample)
    {
        return fail(format!(
            "downsample = {} must divide {}x{}",
            spec.downsample, spec.height, spec.width
        ));
    }
    if spec.height < 4 || spec.width < 4 {
        return fail("image must be at least 4x4".into());
    }
    Ok(())
}

/// Instance-id layout shared by all views: discs over background.
fn paint_layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let (h, w) = (spec.height as i64, spec.width as i64);
    let mut ids = vec![0u16; (h * w) as usize];
    let mut centers = Vec::new();
    for k in 1..=spec.objects as u16 {
        let cx = rng.gen_range(0.2..0.8) * w as f64;
        let cy = rng.gen_range(0.2..0.8) * h as f64;
        let radius = rng.gen_range(0.12..0.22) * h.min(w) as f64;
        centers.push((cy, cx));
        for r in 0..h {
            for c in 0..w {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= radius * radius {
                    ids[(r * w + c) as usize] = k;
                }
            }
        }
    }
    // Later discs may fully cover earlier ones; every id must occur.
    for k in 1..=spec.objects as u16 {
        if !ids.contains(&k) {
            let (cy, cx) = centers[k as usize - 1];
            let r = (cy as i64).clamp(0, h - 1);
            let c = (cx as i64).clamp(0, w - 1);
            ids[(r * w + c) as usize] = k;
        }
    }
    ids
}

fn sample_instance_feature(
    class: u16,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> Vec<f64> {
    // Background uses axis 0; object k uses axis k. Orthogonal classes.
    let mut f = vec![0.0; spec.n_dim as usize];
    f[class as usize] = 1.0;
    if spec.feature_noise > 0.0 {
        for v in f.iter_mut() {
            *v += noise.sample(rng);
        }
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in f.iter_mut() {
            *v /= norm;
        }
    }
    f
}

/// One-hot semantic vector: object k uses channel k-1, background the last channel.
pub fn semantic_one_hot(class: u16, m_dim: u32) -> Vec<f64> {
    let mut f = vec![0.0; m_dim as usize];
    let ch = if class == 0 { m_dim as usize - 1 } else { class as usize - 1 };
    f[ch] = 1.0;
    f
}

pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene, SceneError> {
    validate_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.feature_noise.max(1e-300)).unwrap();
    let (h, w, v_count) = (spec.height, spec.width, spec.views);
    let per_view = (h * w) as usize;
    let focal = w as f64;

    let layout = paint_layout(spec, &mut rng);
    let mut depths = vec![BACKGROUND_DEPTH];
    let mut colors = vec![[0.65, 0.68, 0.72]];
    for _ in 0..spec.objects {
        depths.push(rng.gen_range(2.0..4.5));
        colors.push([
            rng.gen_range(0.2..0.85),
            rng.gen_range(0.2..0.85),
            rng.gen_range(0.2..0.85),
        ]);
    }

    let mut cameras = Vec::new();
    for v in 0..v_count {
        let center = [v as f64 * BASELINE, 0.0, 0.0];
        cameras.push(Camera::looking_forward(focal, w, h, center));
    }
    let held_out = Camera::looking_forward(
        focal,
        w,
        h,
        [(v_count - 1) as f64 * BASELINE / 2.0, 0.03, 0.0],
    );

    // Which later-view pixels duplicate view-1 primitives.
    let dup_total = (spec.overlap * (v_count as usize * per_view) as f64).round() as usize;
    let mut dup_sets: Vec<Vec<bool>> = vec![vec![false; per_view]; v_count as usize];
    let mut remaining = dup_total;
    for v in 1..v_count as usize {
        let views_left = v_count as usize - v;
        let take = (remaining / views_left).min(per_view);
        let mut order: Vec<usize> = (0..per_view).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for &pix in order.iter().take(take) {
            dup_sets[v][pix] = true;
        }
        remaining -= take;
    }

    let sh_from = |color: &[f64; 3]| vec![color[0] / SH_C0, color[1] / SH_C0, color[2] / SH_C0];

    let mut fine = Vec::with_capacity(v_count as usize * per_view);
    let mut redundant = Vec::with_capacity(v_count as usize * per_view);
    for v in 0..v_count as usize {
        let cam = &cameras[v];
        let cam_center = cam.center();
        for pix in 0..per_view {
            let (row, col) = (pix as u32 / w, pix as u32 % w);
            let class = layout[pix];
            let is_dup = dup_sets[v][pix];
            let f_inst = sample_instance_feature(class, spec, &mut rng, &noise);
            let prim = if is_dup {
                // Copy the view-1 primitive at the same pixel, nudged toward
                // the camera, more opaque, and with stale darker shading.
                // The shading mismatch matters: a same-colored duplicate can
                // be compensated by lowering both copies a little, which
                // stalls above the prune threshold, while an off-color copy
                // makes gating it off the only photometric optimum.
                let src: &GaussianPrimitive = &fine[pix];
                let shade = rng.gen_range(0.55..0.7);
                GaussianPrimitive {
                    mu: [
                        src.mu[0] + rng.gen_range(-0.002..0.002),
                        src.mu[1] + rng.gen_range(-0.002..0.002),
                        src.mu[2] - 0.02,
                    ],
                    alpha: DUPLICATE_ALPHA,
                    rot: src.rot,
                    scale: src.scale,
                    sh: src.sh.iter().map(|c| c * shade).collect(),
                    beta: INITIAL_BETA,
                    f_inst,
                    f_sem: None,
                }
            } else {
                let z = depths[class as usize];
                let dir = [
                    (col as f64 + 0.5 - cam.cx) / cam.fx,
                    (row as f64 + 0.5 - cam.cy) / cam.fy,
                    1.0,
                ];
                let s = 0.15 * z / focal;
                GaussianPrimitive {
                    mu: [
                        cam_center[0] + z * dir[0],
                        cam_center[1] + z * dir[1],
                        cam_center[2] + z * dir[2],
                    ],
                    alpha: ORIGINAL_ALPHA,
                    rot: [1.0, 0.0, 0.0, 0.0],
                    scale: [s, s, s],
                    sh: sh_from(&colors[class as usize]),
                    beta: INITIAL_BETA,
                    f_inst,
                    f_sem: None,
                }
            };
            fine.push(prim);
            redundant.push(is_dup);
        }
    }

    // Coarse field: cell-center downsample, semantic one-hot payloads,
    // footprints widened to cover their cell.
    let (coarse_geom, _sources) =
        crate::dualfield::downsample_coarse(&fine, v_count, h, w, spec.downsample, spec.m_dim)
            .map_err(|e| SceneError::Invalid(e.to_string()))?;
    let widen = spec.downsample as f64 / 2.0;
    let coarse: Vec<GaussianPrimitive> = coarse_geom
        .into_iter()
        .enumerate()
        .map(|(j, mut p)| {
            let cells = (h / spec.downsample) * (w / spec.downsample);
            let cell = j as u32 % cells;
            let (cr, cc) = (cell / (w / spec.downsample), cell % (w / spec.downsample));
            let row = cr * spec.downsample + spec.downsample / 2;
            let col = cc * spec.downsample + spec.downsample / 2;
            let class = layout[(row * w + col) as usize];
            p.f_sem = Some(semantic_one_hot(class, spec.m_dim));
            p.beta = 1.0;
            for s in &mut p.scale {
                *s *= widen;
            }
            p
        })
        .collect();

    let mask = InstanceMaskSet { width: w, height: h, ids: layout.clone(), m: spec.objects };
    let mut semantic = FeatureMap::zeros(h, w, spec.m_dim);
    for pix in 0..per_view {
        let (row, col) = (pix as u32 / w, pix as u32 % w);
        let one_hot = semantic_one_hot(layout[pix], spec.m_dim);
        semantic.pixel_mut(row, col).copy_from_slice(&one_hot);
    }
    let masks = vec![mask; v_count as usize];
    let semantic_targets = vec![semantic; v_count as usize];

    let provenance = format!(
        "synth;seed={};v={};h={};w={};objects={};overlap={};sigma={};redundant={}",
        spec.seed,
        spec.views,
        h,
        w,
        spec.objects,
        spec.overlap,
        spec.feature_noise,
        encode_redundancy(&redundant)
    );

    let mut bundle = SceneBundle {
        fine,
        coarse,
        n_dim: spec.n_dim,
        m_dim: spec.m_dim,
        sh_degree: 0,
        views: v_count,
        height: h,
        width: w,
        downsample: spec.downsample,
        provenance,
    };
    quantize_to_f32(&mut bundle);

    Ok(SynthScene { bundle, cameras, held_out, masks, semantic_targets, redundant })
}
