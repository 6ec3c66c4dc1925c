//! Property-based invariants: serialization round trips, compositing
//! conservation, contrastive symmetries, and gate monotonicity.

use proptest::prelude::*;
use splatfield::loss::{contrastive_exact, ContrastiveConfig};
use splatfield::raster;
use splatfield::scene::io;
use splatfield::scene::{
    quantize_to_f32, Camera, FeatureMap, GaussianPrimitive, InstanceMaskSet, SceneBundle,
};
use splatfield::sgm::{gate, GateConfig, GateMode};

fn arb_primitive(n_dim: usize, sem: Option<usize>) -> impl Strategy<Value = GaussianPrimitive> {
    (
        prop::array::uniform3(-0.8f64..0.8),
        0.05f64..0.95,
        prop::array::uniform4(-1.0f64..1.0),
        prop::array::uniform3(0.02f64..0.3),
        prop::collection::vec(0.0f64..2.0, 3),
        0.05f64..0.95,
        prop::collection::vec(0.05f64..1.0, n_dim),
        prop::collection::vec(0.05f64..1.0, sem.unwrap_or(0)),
    )
        .prop_filter_map("quaternion must not vanish", move |(mut mu, alpha, rot, scale, sh, beta, f_inst, f_sem)| {
            let norm = rot.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 0.1 {
                return None;
            }
            mu[2] += 2.0;
            Some(GaussianPrimitive {
                mu,
                alpha,
                rot: [rot[0] / norm, rot[1] / norm, rot[2] / norm, rot[3] / norm],
                scale,
                sh,
                beta,
                f_inst,
                f_sem: sem.map(|_| f_sem),
            })
        })
}

fn arb_bundle() -> impl Strategy<Value = SceneBundle> {
    let n_dim = 3usize;
    let m_dim = 4usize;
    (
        prop::collection::vec(arb_primitive(n_dim, None), 1..12),
        prop::collection::vec(arb_primitive(n_dim, Some(m_dim)), 1..4),
    )
        .prop_map(move |(fine, coarse)| SceneBundle {
            fine,
            coarse,
            n_dim: n_dim as u32,
            m_dim: m_dim as u32,
            sh_degree: 0,
            views: 1,
            height: 8,
            width: 8,
            downsample: 1,
            provenance: String::new(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bundles_round_trip_through_spsc(bundle in arb_bundle()) {
        let mut b = bundle;
        quantize_to_f32(&mut b);
        let bytes = io::bundle_to_bytes(&b);
        let back = io::read_bundle(&bytes[..]).unwrap();
        prop_assert_eq!(b, back);
    }

    #[test]
    fn accumulated_weights_never_exceed_one(bundle in arb_bundle(), seed in 0u64..1000) {
        let camera = Camera::looking_forward(8.0, 8, 8, [0.0, 0.0, 0.0]);
        let _ = seed;
        let out = raster::render(&bundle, &camera, GateMode::Identity);
        for &acc in &out.acc.data {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&acc));
        }
        // Every primitive's total blended weight stays within the image's
        // pixel budget and is never negative.
        for &c in &out.contrib_fine {
            prop_assert!(c >= 0.0);
            prop_assert!(c <= (8 * 8) as f64 + 1e-9);
        }
    }

    #[test]
    fn contrastive_is_scale_invariant(
        seed in 0u64..500,
        scale in 0.1f64..10.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (5u32, 5u32);
        let ids: Vec<u16> = (0..h * w).map(|_| rng.gen_range(1..=3)).collect();
        let masks = InstanceMaskSet { width: w, height: h, ids, m: 3 };
        let mut feats = FeatureMap::zeros(h, w, 4);
        feats.data.iter_mut().for_each(|v| *v = rng.gen_range(0.05..1.0));
        let cfg = ContrastiveConfig::default();
        let base = contrastive_exact(&feats, &masks, &cfg).unwrap();
        let mut scaled = feats.clone();
        scaled.data.iter_mut().for_each(|v| *v *= scale);
        let other = contrastive_exact(&scaled, &masks, &cfg).unwrap();
        // Features are normalized before the cosine terms, so a global
        // positive rescale must not move the loss beyond round-off.
        prop_assert!((base.value - other.value).abs() <= 1e-9);
    }

    #[test]
    fn gate_is_monotone_and_leaks_below_tau(
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let cfg = GateConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(gate(lo, &cfg) <= gate(hi, &cfg) + 1e-15);
        if lo <= cfg.tau {
            prop_assert!(gate(lo, &cfg) <= cfg.tau * cfg.leak + 1e-15);
        }
        if hi > cfg.tau {
            prop_assert_eq!(gate(hi, &cfg), hi);
        }
    }
}
