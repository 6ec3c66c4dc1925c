//! Scene domain types: Gaussian primitives, dual-field bundles, cameras,
//! masks, feature maps, plus validation and the synthetic-scene generator.
//!
//! Bundles are immutable after construction; every operation that "mutates"
//! a scene (pruning, optimization) builds a new bundle.

pub mod io;
mod synth;

pub use synth::{
    decode_redundancy, encode_redundancy, semantic_one_hot, synth_scene, SynthScene, SynthSpec,
};

use thiserror::Error;

/// One splat. `f_sem` is present only on coarse-field primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    /// World-space center.
    pub mu: [f64; 3],
    /// Opacity, post-activation, in [0,1].
    pub alpha: f64,
    /// Unit quaternion (w, x, y, z).
    pub rot: [f64; 4],
    /// Strictly positive axis scales.
    pub scale: [f64; 3],
    /// RGB spherical-harmonic coefficients, 3*(k+1)^2 scalars,
    /// channel-major: all R coefficients, then G, then B.
    pub sh: Vec<f64>,
    /// Importance score, post-sigmoid, pre-gate.
    pub beta: f64,
    /// Instance feature, length = bundle N.
    pub f_inst: Vec<f64>,
    /// Semantic feature, length = bundle M; coarse field only.
    pub f_sem: Option<Vec<f64>>,
}

impl GaussianPrimitive {
    /// Number of stored scalars for this primitive.
    pub fn scalar_count(&self) -> usize {
        11 + self.sh.len()
            + self.f_inst.len()
            + self.f_sem.as_ref().map_or(0, |f| f.len())
            + 1 // beta
    }
}

/// Fine field (instance-aware radiance) plus coarse field (semantics).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub fine: Vec<GaussianPrimitive>,
    pub coarse: Vec<GaussianPrimitive>,
    /// Instance-feature dimension N.
    pub n_dim: u32,
    /// Semantic-feature dimension M.
    pub m_dim: u32,
    /// SH degree k.
    pub sh_degree: u32,
    /// View count V.
    pub views: u32,
    /// Per-view pixel grid.
    pub height: u32,
    pub width: u32,
    /// Coarse-field downsample ratio S.
    pub downsample: u32,
    /// Free-text origin tag; not serialized.
    pub provenance: String,
}

impl SceneBundle {
    pub fn sh_len(&self) -> usize {
        3 * ((self.sh_degree + 1) * (self.sh_degree + 1)) as usize
    }
}

/// Pinhole camera: intrinsics plus world-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Rotation, row-major 3x3.
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    /// Translation.
    #[serde(rename = "t")]
    pub translation: [f64; 3],
}

impl Camera {
    /// Axis-aligned camera looking down +z from `center`.
    pub fn looking_forward(fx: f64, width: u32, height: u32, center: [f64; 3]) -> Self {
        Camera {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [-center[0], -center[1], -center[2]],
        }
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + self.translation[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + self.translation[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + self.translation[2],
        ]
    }

    /// Camera center in world coordinates, -R^T t.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            -(r[0] * t[0] + r[3] * t[1] + r[6] * t[2]),
            -(r[1] * t[0] + r[4] * t[1] + r[7] * t[2]),
            -(r[2] * t[0] + r[5] * t[1] + r[8] * t[2]),
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(format!("focal lengths must be positive: fx={} fy={}", self.fx, self.fy));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 {
            return Err(format!("cx={} out of [0,{})", self.cx, self.width));
        }
        if self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(format!("cy={} out of [0,{})", self.cy, self.height));
        }
        // R orthonormal within 1e-6
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[3 * i + k] * r[3 * j + k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(format!("rotation rows {i},{j} not orthonormal: dot={dot}"));
                }
            }
        }
        Ok(())
    }
}

/// Per-view integer mask image; id 0 is background, 1..=m are instances.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMaskSet {
    pub width: u32,
    pub height: u32,
    /// Row-major ids.
    pub ids: Vec<u16>,
    pub m: u32,
}

impl InstanceMaskSet {
    pub fn id_at(&self, row: u32, col: u32) -> u16 {
        self.ids[(row * self.width + col) as usize]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.ids.len() != (self.width * self.height) as usize {
            return Err(format!(
                "mask has {} ids, expected {}",
                self.ids.len(),
                self.width * self.height
            ));
        }
        for &id in &self.ids {
            if id as u32 > self.m {
                return Err(format!("mask id {} exceeds instance count {}", id, self.m));
            }
        }
        Ok(())
    }
}

/// Dense H x W x C map, row-major, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: u32, width: u32, channels: u32) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; (width * height * channels) as usize],
        }
    }

    #[inline]
    pub fn idx(&self, row: u32, col: u32, ch: u32) -> usize {
        ((row * self.width + col) * self.channels + ch) as usize
    }

    pub fn pixel(&self, row: u32, col: u32) -> &[f64] {
        let base = ((row * self.width + col) * self.channels) as usize;
        &self.data[base..base + self.channels as usize]
    }

    pub fn pixel_mut(&mut self, row: u32, col: u32) -> &mut [f64] {
        let base = ((row * self.width + col) * self.channels) as usize;
        &mut self.data[base..base + self.channels as usize]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found}")]
    BadVersion { found: u32 },
    #[error("truncated payload at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error("bundle violates invariants:\n{0}")]
    InvariantViolations(String),
}

/// One invariant breach, naming the offending primitive and field.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// "fine", "coarse", or "bundle".
    pub field_set: &'static str,
    /// Index within the field, when applicable.
    pub index: Option<usize>,
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}].{}: {}", self.field_set, i, self.field, self.message),
            None => write!(f, "{}.{}: {}", self.field_set, self.field, self.message),
        }
    }
}

fn check_primitive(
    set: &'static str,
    i: usize,
    p: &GaussianPrimitive,
    bundle: &SceneBundle,
    want_sem: bool,
    out: &mut Vec<Violation>,
) {
    let mut push = |field: &'static str, message: String| {
        out.push(Violation { field_set: set, index: Some(i), field, message });
    };
    if !(0.0..=1.0).contains(&p.alpha) {
        push("alpha", format!("{} outside [0,1]", p.alpha));
    }
    if !(0.0..=1.0).contains(&p.beta) {
        push("beta", format!("{} outside [0,1]", p.beta));
    }
    for (k, &s) in p.scale.iter().enumerate() {
        if !(s.is_finite() && s > 0.0) {
            push("scale", format!("component {k} = {s} not strictly positive"));
        }
    }
    let norm = p.rot.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        push("rot", format!("quaternion norm {norm} not within 1e-6 of 1"));
    }
    if p.sh.len() != bundle.sh_len() {
        push("sh", format!("length {} != 3*(k+1)^2 = {}", p.sh.len(), bundle.sh_len()));
    }
    if p.f_inst.len() != bundle.n_dim as usize {
        push("f_inst", format!("length {} != N = {}", p.f_inst.len(), bundle.n_dim));
    }
    match (&p.f_sem, want_sem) {
        (Some(f), true) => {
            if f.len() != bundle.m_dim as usize {
                push("f_sem", format!("length {} != M = {}", f.len(), bundle.m_dim));
            }
        }
        (Some(_), false) => push("f_sem", "present on fine-field primitive".into()),
        (None, true) => push("f_sem", "missing on coarse-field primitive".into()),
        (None, false) => {}
    }
    if !p.mu.iter().all(|v| v.is_finite()) {
        push("mu", "non-finite component".into());
    }
}

/// Collects every invariant breach; never aborts.
pub fn validate_bundle(bundle: &SceneBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    if bundle.n_dim == 0 || bundle.m_dim == 0 || bundle.views == 0 {
        out.push(Violation {
            field_set: "bundle",
            index: None,
            field: "dims",
            message: format!(
                "N={}, M={}, V={} must all be positive",
                bundle.n_dim, bundle.m_dim, bundle.views
            ),
        });
    }
    if bundle.downsample == 0
        || !bundle.height.is_multiple_of(bundle.downsample.max(1))
        || !bundle.width.is_multiple_of(bundle.downsample.max(1))
    {
        out.push(Violation {
            field_set: "bundle",
            index: None,
            field: "downsample",
            message: format!(
                "S={} must divide H={} and W={}",
                bundle.downsample, bundle.height, bundle.width
            ),
        });
    }
    for (i, p) in bundle.fine.iter().enumerate() {
        check_primitive("fine", i, p, bundle, false, &mut out);
    }
    for (i, p) in bundle.coarse.iter().enumerate() {
        check_primitive("coarse", i, p, bundle, true, &mut out);
    }
    out
}

/// Round every scalar through f32 so the bundle survives SPSC
/// serialization bit-exactly.
pub fn quantize_to_f32(bundle: &mut SceneBundle) {
    let q = |v: &mut f64| *v = *v as f32 as f64;
    for p in bundle.fine.iter_mut().chain(bundle.coarse.iter_mut()) {
        p.mu.iter_mut().for_each(&q);
        q(&mut p.alpha);
        p.rot.iter_mut().for_each(&q);
        p.scale.iter_mut().for_each(&q);
        p.sh.iter_mut().for_each(&q);
        q(&mut p.beta);
        p.f_inst.iter_mut().for_each(&q);
        if let Some(f) = p.f_sem.as_mut() {
            f.iter_mut().for_each(&q);
        }
    }
}
