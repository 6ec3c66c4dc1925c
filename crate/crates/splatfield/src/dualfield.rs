//! Dual feature fields: coarse-field construction by uniform center
//! downsampling, instance clustering over compressed features, semantic
//! label attachment, and open-vocabulary querying.

use crate::raster;
use crate::scene::{Camera, GaussianPrimitive, InstanceMaskSet, SceneBundle};
use crate::sgm::GateMode;
use thiserror::Error;

pub const DEFAULT_SIM_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error)]
pub enum DualFieldError {
    #[error("downsample ratio {s} does not divide {h}x{w}")]
    BadRatio { s: u32, h: u32, w: u32 },
    #[error("fine field has {got} primitives, pixel-wise layout needs {need}")]
    NotPixelWise { got: usize, need: usize },
    #[error("operation over an empty field")]
    Empty,
    #[error("non-finite instance feature at primitive {0}")]
    NonFinite(usize),
    #[error("similarity threshold {0} outside (0,1)")]
    BadThreshold(f64),
    #[error("clustering carries no semantic labels; run attach_semantics first")]
    Unlabeled,
    #[error("query vector has {got} channels, expected {want}")]
    BadQueryDim { got: usize, want: usize },
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    v.iter().map(|x| x / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt().max(1e-8) * nb.sqrt().max(1e-8))
}

/// Picks the primitive at the center pixel of each SxS cell of each view.
/// Geometry and instance features are copied; f_sem starts at zero.
/// Returns the coarse primitives and their source indices into `fine`.
pub fn downsample_coarse(
    fine: &[GaussianPrimitive],
    views: u32,
    height: u32,
    width: u32,
    s: u32,
    m_dim: u32,
) -> Result<(Vec<GaussianPrimitive>, Vec<usize>), DualFieldError> {
    if s == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
        return Err(DualFieldError::BadRatio { s, h: height, w: width });
    }
    let need = (views * height * width) as usize;
    if fine.len() != need {
        return Err(DualFieldError::NotPixelWise { got: fine.len(), need });
    }
    let mut out = Vec::new();
    let mut sources = Vec::new();
    for v in 0..views {
        for r in 0..height / s {
            for c in 0..width / s {
                let row = r * s + s / 2;
                let col = c * s + s / 2;
                let idx = (v * height * width + row * width + col) as usize;
                let mut p = fine[idx].clone();
                p.f_sem = Some(vec![0.0; m_dim as usize]);
                out.push(p);
                sources.push(idx);
            }
        }
    }
    Ok((out, sources))
}

#[derive(Debug, Clone)]
pub struct InstanceClustering {
    /// Cluster id per fine primitive.
    pub assignment: Vec<Option<usize>>,
    /// Unit-norm mean instance feature per cluster.
    pub centroids: Vec<Vec<f64>>,
    /// Semantic label per cluster, filled in by `attach_semantics`.
    pub sem_labels: Vec<Option<Vec<f64>>>,
}

/// Greedy centroid-threshold agglomeration in index order: join the first
/// cluster whose centroid similarity exceeds the threshold, else open a
/// new one. Centroids are running means, renormalized after each join.
pub fn cluster_instances(
    fine: &[GaussianPrimitive],
    sim_threshold: f64,
) -> Result<InstanceClustering, DualFieldError> {
    if fine.is_empty() {
        return Err(DualFieldError::Empty);
    }
    if !(0.0 < sim_threshold && sim_threshold < 1.0) {
        return Err(DualFieldError::BadThreshold(sim_threshold));
    }
    for (i, p) in fine.iter().enumerate() {
        if !p.f_inst.iter().all(|v| v.is_finite()) {
            return Err(DualFieldError::NonFinite(i));
        }
    }
    let mut assignment = vec![None; fine.len()];
    let mut centroids: Vec<Vec<f64>> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (i, p) in fine.iter().enumerate() {
        let f = normalized(&p.f_inst);
        let joined = centroids
            .iter()
            .position(|c| cosine(c, &f) > sim_threshold);
        match joined {
            Some(k) => {
                counts[k] += 1;
                for (s, v) in sums[k].iter_mut().zip(&f) {
                    *s += v;
                }
                centroids[k] = normalized(&sums[k]);
                assignment[i] = Some(k);
            }
            None => {
                assignment[i] = Some(centroids.len());
                centroids.push(f.clone());
                sums.push(f);
                counts.push(1);
            }
        }
    }
    let n = centroids.len();
    Ok(InstanceClustering { assignment, centroids, sem_labels: vec![None; n] })
}

/// Exact connected-components clustering over the pairwise similarity
/// graph. O(n^2); used as an oracle for the greedy path.
pub fn cluster_instances_components(
    fine: &[GaussianPrimitive],
    sim_threshold: f64,
) -> Result<InstanceClustering, DualFieldError> {
    if fine.is_empty() {
        return Err(DualFieldError::Empty);
    }
    if !(0.0 < sim_threshold && sim_threshold < 1.0) {
        return Err(DualFieldError::BadThreshold(sim_threshold));
    }
    let feats: Vec<Vec<f64>> = fine.iter().map(|p| normalized(&p.f_inst)).collect();
    let mut parent: Vec<usize> = (0..fine.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            if cosine(&feats[i], &feats[j]) > sim_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut ids = std::collections::HashMap::new();
    let mut assignment = vec![None; fine.len()];
    let mut sums: Vec<Vec<f64>> = Vec::new();
    for i in 0..feats.len() {
        let root = find(&mut parent, i);
        let next = ids.len();
        let k = *ids.entry(root).or_insert(next);
        if k == sums.len() {
            sums.push(vec![0.0; feats[i].len()]);
        }
        for (s, v) in sums[k].iter_mut().zip(&feats[i]) {
            *s += v;
        }
        assignment[i] = Some(k);
    }
    let centroids: Vec<Vec<f64>> = sums.iter().map(|s| normalized(s)).collect();
    let n = centroids.len();
    Ok(InstanceClustering { assignment, centroids, sem_labels: vec![None; n] })
}

/// Each coarse primitive votes its f_sem to the most similar cluster
/// centroid (cosine against its own f_inst); multiple votes average.
pub fn attach_semantics(
    clustering: &InstanceClustering,
    coarse: &[GaussianPrimitive],
) -> Result<InstanceClustering, DualFieldError> {
    if clustering.centroids.is_empty() {
        return Err(DualFieldError::Empty);
    }
    let mut out = clustering.clone();
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; clustering.centroids.len()];
    for p in coarse {
        let Some(sem) = &p.f_sem else { continue };
        let best = clustering
            .centroids
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                cosine(a, &p.f_inst)
                    .partial_cmp(&cosine(b, &p.f_inst))
                    .unwrap()
            })
            .map(|(k, _)| k)
            .unwrap();
        match &mut sums[best] {
            Some((acc, n)) => {
                for (a, v) in acc.iter_mut().zip(sem) {
                    *a += v;
                }
                *n += 1;
            }
            None => sums[best] = Some((sem.clone(), 1)),
        }
    }
    for (label, sum) in out.sem_labels.iter_mut().zip(sums) {
        *label = sum.map(|(acc, n)| acc.iter().map(|v| v / n as f64).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct QueryResult {
    /// Query index per pixel; `other_id` where nothing labeled renders.
    pub labels: InstanceMaskSet,
    /// Query index per fine primitive.
    pub primitive_labels: Vec<u16>,
    /// Query index per cluster.
    pub cluster_labels: Vec<u16>,
    /// Id used for unlabeled clusters and empty pixels.
    pub other_id: u16,
}

/// Labels clusters by argmax cosine similarity against the query vectors,
/// then renders cluster-id one-hot payloads and takes the per-pixel argmax
/// of the blended weights.
pub fn query(
    clustering: &InstanceClustering,
    queries: &[Vec<f64>],
    bundle: &SceneBundle,
    camera: &Camera,
) -> Result<QueryResult, DualFieldError> {
    if queries.is_empty() {
        return Err(DualFieldError::Empty);
    }
    for q in queries {
        if q.len() != bundle.m_dim as usize {
            return Err(DualFieldError::BadQueryDim { got: q.len(), want: bundle.m_dim as usize });
        }
    }
    if !clustering.sem_labels.iter().any(|l| l.is_some()) {
        return Err(DualFieldError::Unlabeled);
    }
    let other_id = queries.len() as u16;
    let cluster_labels: Vec<u16> = clustering
        .sem_labels
        .iter()
        .map(|label| match label {
            Some(sem) => queries
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| cosine(a, sem).partial_cmp(&cosine(b, sem)).unwrap())
                .map(|(k, _)| k as u16)
                .unwrap(),
            None => other_id,
        })
        .collect();
    let primitive_labels: Vec<u16> = clustering
        .assignment
        .iter()
        .map(|a| a.map(|k| cluster_labels[k]).unwrap_or(other_id))
        .collect();

    // Label each pixel by its dominant contributor: the sample with the
    // largest composited weight T*u. Summing weights per cluster and taking
    // the argmax instead would let many weak tails of a nearby foreign
    // instance outvote the primitive that actually covers the pixel.
    let (projected, _) =
        raster::project(&bundle.fine, camera, GateMode::Identity, bundle.sh_degree);
    let (_, tape) = raster::blend(&projected, bundle.width, bundle.height, 0, false, true);
    let tape = tape.expect("tape was requested");
    let mut ids = vec![other_id; (bundle.height * bundle.width) as usize];
    for (pix, samples) in tape.samples.iter().enumerate() {
        let mut t = 1.0;
        let mut best = 0.0;
        for s in samples {
            let p = &projected[s.proj as usize];
            let u = p.alpha_eff * s.g;
            let w = t * u;
            if w > best {
                best = w;
                ids[pix] = clustering.assignment[p.source_index]
                    .map(|k| cluster_labels[k])
                    .unwrap_or(other_id);
            }
            t *= 1.0 - u;
        }
    }
    Ok(QueryResult {
        labels: InstanceMaskSet {
            width: bundle.width,
            height: bundle.height,
            ids,
            m: queries.len() as u32 + 1,
        },
        primitive_labels,
        cluster_labels,
        other_id,
    })
}

/// Adjusted Rand index between two flat partitions of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map(|m| m + 1).unwrap_or(0);
    let kb = b.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * (x.saturating_sub(1))) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&x| c2(x)).sum();
    let sum_a: f64 = table.iter().map(|row| c2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| c2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let expected = sum_a * sum_b / c2(n as u64);
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}
