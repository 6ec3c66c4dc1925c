//! Release acceptance suite. Each test prints one pass/fail line for its
//! criterion (run with `--nocapture` to see them alongside the test output).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatfield::dualfield;
use splatfield::eval;
use splatfield::loss::{
    self, contrastive_exact, contrastive_linear, ContrastiveConfig, Estimator, LossWeights,
    TotalInputs, ZeroPerceptual,
};
use splatfield::optim::{self, FitTargets, OptimConfig};
use splatfield::raster::{self, reference, UpstreamGrads};
use splatfield::scene::io;
use splatfield::scene::{
    quantize_to_f32, semantic_one_hot, synth_scene, Camera, FeatureMap, GaussianPrimitive,
    InstanceMaskSet, SceneBundle, SceneError, SynthSpec,
};
use splatfield::sgm::{self, gate_loss, GateConfig, GateMode};

/// Runs a criterion body and prints a single pass/fail line for it.
fn criterion<F: FnOnce() + std::panic::UnwindSafe>(number: u32, name: &str, body: F) {
    let result = std::panic::catch_unwind(body);
    let verdict = if result.is_ok() { "pass" } else { "FAIL" };
    println!("criterion {number} ({name}): {verdict}");
    if let Err(payload) = result {
        std::panic::resume_unwind(payload);
    }
}

fn random_bundle(seed: u64, count: usize, h: u32, w: u32) -> (SceneBundle, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_dim = 4u32;
    let m_dim = 6u32;
    let mut fine = Vec::new();
    for _ in 0..count {
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        fine.push(GaussianPrimitive {
            mu: [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(1.5..4.0)],
            alpha: rng.gen_range(0.3..0.7),
            rot: [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm],
            scale: [
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
            ],
            sh: (0..3).map(|_| rng.gen_range(0.3..2.5)).collect(),
            beta: rng.gen_range(0.55..0.95),
            f_inst: (0..n_dim).map(|_| rng.gen_range(0.1..1.0)).collect(),
            f_sem: None,
        });
    }
    let mut coarse = Vec::new();
    for _ in 0..count.max(4) / 4 {
        let mut p = fine[rng.gen_range(0..count)].clone();
        p.f_sem = Some((0..m_dim).map(|_| rng.gen_range(0.1..1.0)).collect());
        coarse.push(p);
    }
    let bundle = SceneBundle {
        fine,
        coarse,
        n_dim,
        m_dim,
        sh_degree: 0,
        views: 1,
        height: h,
        width: w,
        downsample: 1,
        provenance: format!("acceptance;seed={seed}"),
    };
    let camera = Camera::looking_forward(w as f64, w, h, [0.0, 0.0, 0.0]);
    (bundle, camera)
}

#[test]
fn criterion_1_blending_correctness() {
    criterion(1, "blending correctness", || {
        // Tiled renderer against the naive full-sort reference.
        for seed in 0..20 {
            let count = 100 + seed as usize * 20;
            assert!(count <= 500);
            let (bundle, camera) = random_bundle(seed, count, 24, 36);
            let gate = GateMode::Leaky(GateConfig::default());
            let tiled = raster::render(&bundle, &camera, gate);
            let naive = reference::render_reference(&bundle, &camera, gate);
            for (name, a, b) in [
                ("rgb", &tiled.rgb, &naive.rgb),
                ("inst", &tiled.inst, &naive.inst),
                ("sem", &tiled.sem, &naive.sem),
                ("acc", &tiled.acc, &naive.acc),
            ] {
                let max = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                assert!(max <= 1e-6, "seed {seed} channel {name}: max diff {max}");
            }
        }
        // Telescoping identity: blended weights plus the residual
        // transmittance sum to one on every touched pixel.
        let mut checked = 0usize;
        for seed in 100..110 {
            let (bundle, camera) = random_bundle(seed, 160, 24, 24);
            let (_, tape) =
                raster::render_with_tape(&bundle, &camera, GateMode::Leaky(GateConfig::default()));
            for samples in &tape.fine_tape.samples {
                if samples.is_empty() {
                    continue;
                }
                let mut t = 1.0;
                let mut sum_w = 0.0;
                for s in samples {
                    let u = tape.projected_fine[s.proj as usize].alpha_eff * s.g;
                    sum_w += t * u;
                    t *= 1.0 - u;
                }
                assert!((sum_w + t - 1.0).abs() <= 1e-6, "seed {seed}: {}", sum_w + t);
                checked += 1;
            }
        }
        assert!(checked >= 1000, "only {checked} non-empty pixels exercised");
    });
}

fn random_map(rng: &mut ChaCha8Rng, h: u32, w: u32, c: u32) -> FeatureMap {
    let mut m = FeatureMap::zeros(h, w, c);
    m.data.iter_mut().for_each(|v| *v = rng.gen_range(0.05..1.0));
    m
}

fn random_masks(rng: &mut ChaCha8Rng, h: u32, w: u32, m: u32) -> InstanceMaskSet {
    let ids = (0..h * w).map(|_| rng.gen_range(1..=m as u16)).collect();
    InstanceMaskSet { width: w, height: h, ids, m }
}

#[test]
fn criterion_2_gradient_suite() {
    criterion(2, "gradient suite", || {
        let h = 1e-5;
        let tol = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let weights = LossWeights::default();
        let gate_cfg = GateConfig::default();

        // Photometric.
        let target = random_map(&mut rng, 6, 6, 3);
        let point = random_map(&mut rng, 6, 6, 3).data;
        let mut f = |x: &[f64]| {
            let mut m = FeatureMap::zeros(6, 6, 3);
            m.data.copy_from_slice(x);
            let (v, g) = loss::photometric(&m, &target, &ZeroPerceptual, &weights).unwrap();
            (v, g.data)
        };
        let rep = optim::fdcheck(&mut f, &point, h, None).unwrap();
        assert!(rep.max_rel <= tol, "photometric: {}", rep.max_rel);

        // Semantic.
        let target = random_map(&mut rng, 6, 6, 5);
        let point = random_map(&mut rng, 6, 6, 5).data;
        let mut f = |x: &[f64]| {
            let mut m = FeatureMap::zeros(6, 6, 5);
            m.data.copy_from_slice(x);
            let (v, g) = loss::semantic(&m, &target).unwrap();
            (v, g.data)
        };
        let rep = optim::fdcheck(&mut f, &point, h, None).unwrap();
        assert!(rep.max_rel <= tol, "semantic: {}", rep.max_rel);

        // Contrastive, both estimators.
        let masks = random_masks(&mut rng, 6, 6, 3);
        let point = random_map(&mut rng, 6, 6, 4).data;
        for (name, exact) in [("exact", true), ("linear", false)] {
            let masks = masks.clone();
            let mut f = |x: &[f64]| {
                let mut m = FeatureMap::zeros(6, 6, 4);
                m.data.copy_from_slice(x);
                let cfg = ContrastiveConfig::default();
                let out = if exact {
                    contrastive_exact(&m, &masks, &cfg).unwrap()
                } else {
                    contrastive_linear(&m, &masks, 3, &cfg).unwrap()
                };
                (out.value, out.grad.data)
            };
            let rep = optim::fdcheck(&mut f, &point, h, None).unwrap();
            assert!(rep.max_rel <= tol, "contrastive {name}: {}", rep.max_rel);
        }

        // Gate loss, excluding scores at the documented kink beta = tau.
        let point: Vec<f64> = (0..32).map(|_| rng.gen_range(0.05..0.95)).collect();
        let excluded: Vec<bool> =
            point.iter().map(|&b| (b - gate_cfg.tau).abs() <= 2.0 * h).collect();
        let mut f = |x: &[f64]| gate_loss(x, &gate_cfg).unwrap();
        let rep = optim::fdcheck(&mut f, &point, h, Some(&excluded)).unwrap();
        assert!(rep.max_rel <= tol, "gate_loss: {}", rep.max_rel);

        // Blend: scalar probe over all rendered channels, differentiated
        // with respect to position, opacity, and importance score.
        let (bundle, camera) = random_bundle(7, 8, 10, 10);
        let gate = GateMode::Leaky(GateConfig::default());
        let mut up_rgb = FeatureMap::zeros(10, 10, 3);
        let mut up_inst = FeatureMap::zeros(10, 10, 4);
        let mut up_sem = FeatureMap::zeros(10, 10, 6);
        for m in [&mut up_rgb, &mut up_inst, &mut up_sem] {
            m.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let value = |b: &SceneBundle| {
            let out = raster::render(b, &camera, gate);
            let dot = |a: &FeatureMap, u: &FeatureMap| {
                a.data.iter().zip(&u.data).map(|(x, y)| x * y).sum::<f64>()
            };
            dot(&out.rgb, &up_rgb) + dot(&out.inst, &up_inst) + dot(&out.sem, &up_sem)
        };
        let (_, tape) = raster::render_with_tape(&bundle, &camera, gate);
        let grads = raster::blend_backward(
            &bundle,
            &camera,
            Some(&tape),
            &UpstreamGrads { rgb: Some(&up_rgb), inst: Some(&up_inst), sem: Some(&up_sem) },
        )
        .unwrap();
        let mut max_rel = 0.0f64;
        let mut check = |analytic: f64, mutate: &dyn Fn(&mut SceneBundle, f64)| {
            let mut plus = bundle.clone();
            mutate(&mut plus, h);
            let mut minus = bundle.clone();
            mutate(&mut minus, -h);
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            if scale >= 1e-7 {
                max_rel = max_rel.max((analytic - numeric).abs() / scale.max(1e-8));
            }
        };
        for i in 0..bundle.fine.len() {
            for axis in 0..3 {
                check(grads.fine[i].mu[axis], &|b, d| b.fine[i].mu[axis] += d);
            }
            check(grads.fine[i].alpha, &|b, d| b.fine[i].alpha += d);
            check(grads.fine[i].beta, &|b, d| b.fine[i].beta += d);
        }
        assert!(max_rel <= tol, "blend: {max_rel}");

        // Full objective with respect to every direct input.
        let rgb_target = random_map(&mut rng, 6, 6, 3);
        let sem_target = random_map(&mut rng, 6, 6, 5);
        let masks = random_masks(&mut rng, 6, 6, 3);
        let sizes = [6 * 6 * 3, 6 * 6 * 4, 6 * 6 * 5, 12];
        let mut point = Vec::new();
        for (i, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                point.push(if i == 3 { rng.gen_range(0.55..0.95) } else { rng.gen_range(0.05..1.0) });
            }
        }
        let mut f = |x: &[f64]| {
            let mut rgb = FeatureMap::zeros(6, 6, 3);
            let mut inst = FeatureMap::zeros(6, 6, 4);
            let mut sem = FeatureMap::zeros(6, 6, 5);
            let mut off = 0;
            for (m, n) in [(&mut rgb, sizes[0]), (&mut inst, sizes[1]), (&mut sem, sizes[2])] {
                m.data.copy_from_slice(&x[off..off + n]);
                off += n;
            }
            let betas = &x[off..];
            let inputs = TotalInputs {
                rgb_rendered: &rgb,
                rgb_target: &rgb_target,
                inst_rendered: &inst,
                masks: &masks,
                sem_rendered: &sem,
                sem_target: &sem_target,
                betas,
            };
            let (breakdown, grads) =
                loss::total(&inputs, &weights, &gate_cfg, Estimator::Exact, 0).unwrap();
            let mut g = grads.d_rgb.data;
            g.extend(grads.d_inst.data);
            g.extend(grads.d_sem.data);
            g.extend(grads.d_beta);
            (breakdown.total, g)
        };
        let total_params = sizes.iter().sum::<usize>();
        let excluded: Vec<bool> = point
            .iter()
            .enumerate()
            .map(|(i, &v)| i >= total_params - 12 && (v - gate_cfg.tau).abs() <= 2.0 * h)
            .collect();
        let rep = optim::fdcheck(&mut f, &point, h, Some(&excluded)).unwrap();
        assert!(rep.max_rel <= tol, "total: {}", rep.max_rel);
    });
}

#[test]
fn criterion_3_redundancy_pruning() {
    criterion(3, "redundancy discovery and pruning", || {
        let spec =
            SynthSpec { seed: 5, overlap: 0.5, height: 24, width: 24, ..SynthSpec::default() };
        let scene = synth_scene(&spec).unwrap();
        let ideal = scene.ideal_bundle();
        let targets_rgb: Vec<_> = scene
            .cameras
            .iter()
            .map(|c| raster::render(&ideal, c, GateMode::Identity).rgb)
            .collect();
        let cfg = OptimConfig { steps: 600, lr: 10000.0, seed: 1, ..OptimConfig::default() };
        let targets = FitTargets {
            cameras: &scene.cameras,
            rgb: &targets_rgb,
            masks: Some(&scene.masks),
            sem: None,
        };
        let (fitted, _) = optim::fit(&scene.bundle, &targets, &cfg).unwrap();

        let gate = GateConfig::default();
        let (pruned, report) = sgm::prune_with_labels(&fitted, &gate, Some(&scene.redundant));
        let total = fitted.fine.len();
        let removed = report.discarded as f64 / total as f64;
        assert!(removed >= 0.30, "only {:.1}% of fine primitives removed", 100.0 * removed);
        let conf = report.confusion.expect("labels were supplied");
        let recall = conf.redundant_discard_rate();
        assert!(recall >= 0.90, "redundant discard rate {recall:.3} below 0.90");

        let held_target = raster::render(&ideal, &scene.held_out, GateMode::Identity).rgb;
        let leaky = GateMode::Leaky(gate);
        let unpruned = raster::render(&fitted, &scene.held_out, leaky).rgb;
        let after = raster::render(&pruned, &scene.held_out, leaky).rgb;
        let psnr_unpruned = eval::psnr(&unpruned, &held_target).unwrap();
        let psnr_pruned = eval::psnr(&after, &held_target).unwrap();
        assert!(
            psnr_unpruned - psnr_pruned <= 0.2,
            "held-out PSNR dropped {:.3} dB ({psnr_unpruned:.2} -> {psnr_pruned:.2})",
            psnr_unpruned - psnr_pruned
        );
    });
}

/// Orthogonal one-hot features per instance with optional Gaussian noise.
fn instance_features(
    masks: &InstanceMaskSet,
    dim: u32,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> FeatureMap {
    let mut map = FeatureMap::zeros(masks.height, masks.width, dim);
    for (pix, &id) in masks.ids.iter().enumerate() {
        let base = pix * dim as usize;
        map.data[base + id as usize % dim as usize] = 1.0;
        if sigma > 0.0 {
            for c in 0..dim as usize {
                map.data[base + c] += sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
    }
    map
}

#[test]
fn criterion_4_contrastive_estimator() {
    criterion(4, "contrastive estimator fidelity", || {
        let cfg = ContrastiveConfig::default();
        // Noiseless features: bit-for-bit agreement in the loss value.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for m in 2..=5u32 {
            let masks = random_masks(&mut rng, 16, 16, m);
            let feats = instance_features(&masks, 8, 0.0, &mut rng);
            let exact = contrastive_exact(&feats, &masks, &cfg).unwrap();
            let linear = contrastive_linear(&feats, &masks, 77, &cfg).unwrap();
            assert_eq!(
                exact.value.to_bits(),
                linear.value.to_bits(),
                "m={m}: exact {} vs linear {}",
                exact.value,
                linear.value
            );
        }
        // Noisy features: mean relative error over 100 seeds per m.
        for m in 2..=5u32 {
            let mut rel_sum = 0.0;
            for seed in 0..100u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
                let masks = random_masks(&mut rng, 16, 16, m);
                let feats = instance_features(&masks, 8, 0.05, &mut rng);
                let exact = contrastive_exact(&feats, &masks, &cfg).unwrap();
                let linear = contrastive_linear(&feats, &masks, seed, &cfg).unwrap();
                rel_sum += (linear.value - exact.value).abs() / exact.value.abs().max(1e-12);
            }
            let mean_rel = rel_sum / 100.0;
            assert!(mean_rel <= 0.05, "m={m}: mean relative error {mean_rel:.4}");
        }
        // Work scaling: intra-term operation counts at n = 256/1024/4096.
        let mut linear_ops = Vec::new();
        let mut exact_ops = Vec::new();
        for side in [16u32, 32, 64] {
            let mut rng = ChaCha8Rng::seed_from_u64(side as u64);
            let masks = random_masks(&mut rng, side, side, 4);
            let feats = instance_features(&masks, 8, 0.05, &mut rng);
            linear_ops.push(contrastive_linear(&feats, &masks, 1, &cfg).unwrap().intra_ops as f64);
            exact_ops.push(contrastive_exact(&feats, &masks, &cfg).unwrap().intra_ops as f64);
        }
        // 4x pixels per step: linear work should grow ~4x, exact ~16x.
        for step in 0..2 {
            let lin_ratio = linear_ops[step + 1] / linear_ops[step];
            let ex_ratio = exact_ops[step + 1] / exact_ops[step];
            assert!((3.0..6.0).contains(&lin_ratio), "linear intra ratio {lin_ratio}");
            assert!((10.0..26.0).contains(&ex_ratio), "exact intra ratio {ex_ratio}");
        }
    });
}

#[test]
fn criterion_5_storage_accounting() {
    criterion(5, "storage accounting", || {
        // Pixel-wise two-view 256x256 yields exactly 131,072 fine primitives.
        let spec = SynthSpec {
            seed: 1,
            height: 256,
            width: 256,
            n_dim: 8,
            m_dim: 8,
            downsample: 32,
            ..SynthSpec::default()
        };
        let scene = synth_scene(&spec).unwrap();
        assert_eq!(scene.bundle.fine.len(), 131_072);

        // Published single-field baseline: 59 scalars per primitive at SH
        // degree 3, four bytes each, in decimal megabytes.
        let cfg = eval::AccountConfig::default();
        assert_eq!(eval::geometry_scalars(3), 59);
        let baseline = eval::account_counts(131_072, 0, 0, 0, 131_072, &cfg);
        assert_eq!(baseline.scalars_per_fine, 59);
        assert!(
            (baseline.mb_total - 30.93).abs() <= 0.01,
            "baseline {} MB, expected 30.93 +- 0.01",
            baseline.mb_total
        );

        // Dual-field layout at the published counts, within 15% of 25.58 MB.
        let dual = eval::account_counts(87_700, 2_048, 8, 512, 131_072, &cfg);
        let residual = (dual.mb_total - 25.58).abs() / 25.58;
        assert!(
            residual <= 0.15,
            "dual-field {} MB vs 25.58 MB: residual {:.1}%",
            dual.mb_total,
            100.0 * residual
        );
        println!(
            "  storage: baseline {:.2} MB, dual-field {:.2} MB (residual {:.1}% of 25.58 MB)",
            baseline.mb_total,
            dual.mb_total,
            100.0 * residual
        );
    });
}

/// Clusters, attaches semantics, queries with one-hot class vectors, and
/// returns mIoU and pixel accuracy over confidently covered pixels.
fn query_scene(noise: f64, seed: u64) -> (f64, f64) {
    // Downsample 4 keeps a coarse cell center inside every disc (minimum
    // disc radius exceeds cell spacing / sqrt 2), so each instance cluster
    // receives a semantic vote during attachment.
    let spec = SynthSpec { seed, feature_noise: noise, downsample: 4, ..SynthSpec::default() };
    let scene = synth_scene(&spec).unwrap();
    let clustering = dualfield::cluster_instances(&scene.bundle.fine, 0.9).unwrap();
    let labeled = dualfield::attach_semantics(&clustering, &scene.bundle.coarse).unwrap();
    let mut queries: Vec<Vec<f64>> =
        (1..=spec.objects as u16).map(|k| semantic_one_hot(k, spec.m_dim)).collect();
    queries.push(semantic_one_hot(0, spec.m_dim));
    let camera = &scene.cameras[0];
    let result = dualfield::query(&labeled, &queries, &scene.bundle, camera).unwrap();

    let acc = raster::render(&scene.bundle, camera, GateMode::Identity).acc;
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (pix, &label) in result.labels.ids.iter().enumerate() {
        if acc.data[pix] <= 0.5 {
            continue;
        }
        // Query index j names object j+1; the last query is the background.
        let class = if label as u32 == spec.objects { 0 } else { label + 1 };
        pred.push(class);
        gt.push(scene.masks[0].ids[pix]);
    }
    let metrics = eval::seg_metrics(&pred, &gt, spec.objects as u16 + 1).unwrap();
    (metrics.miou, metrics.pixel_accuracy)
}

#[test]
fn criterion_6_query_end_to_end() {
    criterion(6, "dual-field query end to end", || {
        let (miou, acc) = query_scene(0.0, 2);
        assert_eq!(miou, 1.0, "noiseless mIoU {miou}");
        assert_eq!(acc, 1.0, "noiseless pixel accuracy {acc}");
        let (miou, _) = query_scene(0.05, 3);
        assert!(miou >= 0.95, "noisy mIoU {miou}");
    });
}

#[test]
fn criterion_7_serialization() {
    criterion(7, "serialization round trip and fuzz", || {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for case in 0..1000u64 {
            let count = rng.gen_range(1..8);
            let (mut bundle, _) = random_bundle(case, count, 4, 4);
            quantize_to_f32(&mut bundle);
            // Provenance is session metadata, not part of the file format.
            bundle.provenance.clear();
            let bytes = io::bundle_to_bytes(&bundle);
            let back = io::read_bundle(&bytes[..]).unwrap();
            assert_eq!(bundle, back, "case {case} did not round-trip bit-exactly");
        }

        let (mut bundle, _) = random_bundle(9000, 6, 4, 4);
        quantize_to_f32(&mut bundle);
        let bytes = io::bundle_to_bytes(&bundle);
        // Truncation at every prefix length fails with Truncated (or Io once
        // the reader hits a clean EOF boundary), never a panic.
        for cut in 0..bytes.len() {
            match io::read_bundle(&bytes[..cut]) {
                Err(SceneError::Truncated { .. }) | Err(SceneError::Io(_)) => {}
                other => panic!("cut {cut}: expected truncation error, got {other:?}"),
            }
        }
        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(io::read_bundle(&bad[..]), Err(SceneError::BadMagic { .. })));
        // Implausible counts must be rejected before any allocation.
        let mut bad = bytes.clone();
        for b in &mut bad[36..44] {
            *b = 0xff;
        }
        assert!(matches!(io::read_bundle(&bad[..]), Err(SceneError::Invalid(_))));
    });
}

#[test]
fn criterion_8_loss_weight_arithmetic() {
    criterion(8, "loss-weight arithmetic", || {
        let w = LossWeights::default();
        let total = 1.0 + w.lambda1 * 1.0 + w.lambda2 * 1.0 + w.lambda3 * 1.0;
        assert_eq!(total, 2.21);
        let cfg = GateConfig::default();
        assert_eq!(sgm::gate(0.7, &cfg), 0.7);
        assert_eq!(sgm::gate(0.3, &cfg), 0.0003);
    });
}
