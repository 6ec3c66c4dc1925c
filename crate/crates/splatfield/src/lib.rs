//! Compact dual-field Gaussian splatting toolkit: scene containers and
//! formats, a differentiable software rasterizer, importance gating and
//! pruning, instance/semantic feature fields with open-vocabulary queries,
//! training losses, a small descent harness, and evaluation metrics.

// Numeric kernels walk several parallel buffers with one channel index;
// iterator rewrites would obscure the math they mirror.
#![allow(clippy::needless_range_loop)]

pub mod dualfield;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod sgm;
