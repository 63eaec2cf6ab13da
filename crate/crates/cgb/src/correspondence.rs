//! Pseudo-supervision engine and consistency quantification.
//!
//! Landmark representations (probability-pooled feature vectors) are linked
//! into a KNN affinity graph under cosine similarity. Per-vertex confidence
//! is estimated either from ground-truth attribute labels (the closed-form
//! oracle: mean signed affinity of agreeing vs disagreeing neighbors) or by a
//! trained 1-layer graph convolution. Clusters emerge by linking every vertex
//! to its highest-affinity strictly-more-confident neighbor; cluster
//! centroids then provide the consistency score d = max cosine between a
//! representation and any centroid.

use crate::adam::{adam_step, AdamState, DEFAULT_BETAS, DEFAULT_EPS};
use crate::checkpoint;
use crate::graph::{Graph, GraphError};
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorrespondenceError {
    #[error("landmark {landmark}: pooled representation is all-zero")]
    ZeroVector { landmark: usize },
    #[error("feature/heatmap extent mismatch: {0}")]
    ExtentMismatch(String),
    #[error("need at least 2 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertex {0} has no attribute label")]
    Unlabeled(usize),
    #[error("k-means T = {t} exceeds {n} points")]
    BadT { t: usize, n: usize },
    #[error("GCN parameter dimensions {got:?} do not match feature dim {want}")]
    GcnDims { got: Vec<usize>, want: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
}

/// One landmark's D-dimensional representation, L2-normalized at extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkRep {
    pub vec: Vec<f64>,
    pub landmark_index: usize,
    pub image_id: u32,
    /// Ground-truth attribute label, synthetic/test data only.
    pub label: Option<u32>,
}

/// KNN affinity graph over landmark representations.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    pub vertices: Vec<LandmarkRep>,
    pub kappa: usize,
    /// Per-vertex neighbor list, sorted by descending affinity, ties broken
    /// by ascending vertex id.
    pub edges: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub t: usize,
    /// Unit-normalized centroids.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Per-vertex confidence used to form the clusters (cosine to the
    /// assigned centroid for the k-means baseline).
    pub confidence: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

// ---- representation extraction ----

/// Probability-weighted average pooling of a `[D, h, w]` feature stack under
/// K probability maps, L2-normalized per landmark.
pub fn extract_representations(
    features: &[f64],
    d: usize,
    prob: &crate::bottleneck::HeatmapStack,
    image_id: u32,
) -> Result<Vec<LandmarkRep>, CorrespondenceError> {
    let (k, h, w) = (prob.k, prob.h, prob.w);
    if features.len() != d * h * w {
        return Err(CorrespondenceError::ExtentMismatch(format!(
            "features len {} vs {d}x{h}x{w}",
            features.len()
        )));
    }
    let hw = h * w;
    let mut reps = Vec::with_capacity(k);
    for lm in 0..k {
        let p = prob.map(lm);
        let mut vec = vec![0.0; d];
        for (c, slot) in vec.iter_mut().enumerate() {
            let fc = &features[c * hw..(c + 1) * hw];
            *slot = (0..hw).map(|u| p[u] * fc[u]).sum();
        }
        let n = norm(&vec);
        if n == 0.0 {
            return Err(CorrespondenceError::ZeroVector { landmark: lm });
        }
        for v in vec.iter_mut() {
            *v /= n;
        }
        reps.push(LandmarkRep { vec, landmark_index: lm, image_id, label: None });
    }
    Ok(reps)
}

// ---- KNN affinity graph ----

/// Exact cosine K-nearest-neighbor graph (no approximation).
pub fn build_knn_graph(
    vertices: Vec<LandmarkRep>,
    kappa: usize,
) -> Result<AffinityGraph, CorrespondenceError> {
    let n = vertices.len();
    if n < 2 {
        return Err(CorrespondenceError::TooFewVertices(n));
    }
    let kappa_eff = kappa.min(n - 1);
    let norms: Vec<f64> = vertices.iter().map(|v| norm(&v.vec)).collect();
    let edges: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let s = (dot(&vertices[i].vec, &vertices[j].vec) / (norms[i] * norms[j]))
                        .clamp(-1.0, 1.0);
                    (j, s)
                })
                .collect();
            let by_affinity = |a: &(usize, f64), b: &(usize, f64)| {
                b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
            };
            if kappa_eff < cand.len() {
                cand.select_nth_unstable_by(kappa_eff, by_affinity);
                cand.truncate(kappa_eff);
            }
            cand.sort_unstable_by(by_affinity);
            cand
        })
        .collect();
    Ok(AffinityGraph { vertices, kappa: kappa_eff, edges })
}

// ---- confidence ----

/// Closed-form neighbor-label confidence: mean signed affinity, +s for
/// same-label neighbors and -s for different-label ones.
pub fn oracle_confidence(graph: &AffinityGraph) -> Result<Vec<f64>, CorrespondenceError> {
    let labels: Vec<u32> = graph
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| v.label.ok_or(CorrespondenceError::Unlabeled(i)))
        .collect::<Result<_, _>>()?;
    Ok(graph
        .edges
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            if nbrs.is_empty() {
                return 0.0;
            }
            let sum: f64 = nbrs
                .iter()
                .map(|&(j, s)| if labels[j] == labels[i] { s } else { -s })
                .sum();
            (sum / nbrs.len() as f64).clamp(-1.0, 1.0)
        })
        .collect())
}

pub const GCN_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// [D, hidden]
    pub w1: Tensor,
    /// [hidden, 1]
    pub w2: Tensor,
}

impl GcnParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let s1 = (2.0 / d as f64).sqrt();
        let s2 = (2.0 / GCN_HIDDEN as f64).sqrt();
        GcnParams {
            w1: Tensor::randn(&[d, GCN_HIDDEN], s1, rng),
            w2: Tensor::randn(&[GCN_HIDDEN, 1], s2, rng),
        }
    }
}

/// Rows of the degree-normalized affinity adjacency with self-loops,
/// `D^{-1/2} (A + I) D^{-1/2}`. Edges are the union-symmetrized KNN edges;
/// negative affinities are clamped to zero so degrees stay positive.
fn normalized_adjacency(graph: &AffinityGraph) -> Vec<Vec<(usize, f64)>> {
    let n = graph.vertices.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, nbrs) in graph.edges.iter().enumerate() {
        for &(j, s) in nbrs {
            let w = s.max(0.0);
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
    }
    for (i, row) in adj.iter_mut().enumerate() {
        row.sort_unstable_by_key(|&(j, _)| j);
        row.dedup_by_key(|&mut (j, _)| j);
        row.push((i, 1.0)); // self-loop
    }
    let deg: Vec<f64> = adj.iter().map(|row| row.iter().map(|&(_, w)| w).sum()).collect();
    for (i, row) in adj.iter_mut().enumerate() {
        for (j, w) in row.iter_mut() {
            *w /= (deg[i] * deg[*j]).sqrt();
        }
    }
    adj
}

/// `A_hat . X`: the aggregated feature matrix the GCN layer consumes.
fn aggregate_features(graph: &AffinityGraph) -> Vec<f64> {
    let n = graph.vertices.len();
    let d = graph.vertices[0].vec.len();
    let adj = normalized_adjacency(graph);
    let mut m = vec![0.0; n * d];
    for (i, row) in adj.iter().enumerate() {
        let mi = &mut m[i * d..(i + 1) * d];
        for &(j, w) in row {
            for (c, slot) in mi.iter_mut().enumerate() {
                *slot += w * graph.vertices[j].vec[c];
            }
        }
    }
    m
}

/// 1-layer GCN confidence: `tanh(relu(A_hat X W1) w2)` per vertex.
pub fn gcn_confidence(
    graph: &AffinityGraph,
    params: &GcnParams,
) -> Result<Vec<f64>, CorrespondenceError> {
    let d = graph.vertices[0].vec.len();
    if params.w1.shape != [d, GCN_HIDDEN] || params.w2.shape != [GCN_HIDDEN, 1] {
        return Err(CorrespondenceError::GcnDims {
            got: params.w1.shape.clone(),
            want: d,
        });
    }
    let n = graph.vertices.len();
    let m = aggregate_features(graph);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mi = &m[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for hcol in 0..GCN_HIDDEN {
            let mut h = 0.0;
            for c in 0..d {
                h += mi[c] * params.w1.data[c * GCN_HIDDEN + hcol];
            }
            if h > 0.0 {
                acc += h * params.w2.data[hcol];
            }
        }
        out.push(acc.tanh());
    }
    Ok(out)
}

#[derive(Debug)]
pub struct GcnTrainResult {
    pub params: GcnParams,
    /// Mean squared error per epoch, averaged over the training graphs.
    pub epoch_losses: Vec<f64>,
}

/// Train the GCN to regress oracle confidences on labeled graphs (MSE, Adam).
/// `A_hat` and `X` are constants during training, so the aggregated features
/// are precomputed once per graph.
pub fn train_confidence_gcn(
    graphs: &[AffinityGraph],
    epochs: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<GcnTrainResult, CorrespondenceError> {
    if graphs.is_empty() {
        return Err(CorrespondenceError::EmptyTrainingSet);
    }
    let d = graphs[0].vertices[0].vec.len();
    let mut params = GcnParams::init(d, rng);
    let mut state = AdamState::new(&[params.w1.clone(), params.w2.clone()]);
    let prepared: Vec<(Vec<f64>, Vec<f64>, usize)> = graphs
        .iter()
        .map(|g| {
            let targets = oracle_confidence(g)?;
            Ok((aggregate_features(g), targets, g.vertices.len()))
        })
        .collect::<Result<_, CorrespondenceError>>()?;

    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut loss_sum = 0.0;
        for (m, targets, n) in &prepared {
            let mut g = Graph::new();
            let mn = g.constant(&[*n, d], m.clone())?;
            let w1 = g.leaf(&params.w1.clone().with_grad());
            let w2 = g.leaf(&params.w2.clone().with_grad());
            let h = g.matmul(mn, w1)?;
            let hr = g.relu(h)?;
            let logits = g.matmul(hr, w2)?;
            let pred = g.tanh(logits)?;
            let tgt = g.constant(&[*n, 1], targets.clone())?;
            let diff = g.sub(pred, tgt)?;
            let sq = g.mul(diff, diff)?;
            let loss = g.mean(sq)?;
            g.eval_forward()?;
            g.backward()?;
            loss_sum += g.value(loss)?[0];
            let grads = vec![g.grad(w1)?.to_vec(), g.grad(w2)?.to_vec()];
            let mut ps = [params.w1.clone(), params.w2.clone()];
            adam_step(&mut ps, &grads, &mut state, lr, DEFAULT_BETAS, DEFAULT_EPS)
                .expect("finite gradients from finite graph");
            let [w1_new, w2_new] = ps;
            params.w1 = w1_new;
            params.w2 = w2_new;
        }
        epoch_losses.push(loss_sum / prepared.len() as f64);
    }
    Ok(GcnTrainResult { params, epoch_losses })
}

/// Mean absolute error of the GCN against the oracle over labeled graphs.
pub fn gcn_mae(
    params: &GcnParams,
    graphs: &[AffinityGraph],
) -> Result<f64, CorrespondenceError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for g in graphs {
        let oracle = oracle_confidence(g)?;
        let pred = gcn_confidence(g, params)?;
        total += oracle.iter().zip(&pred).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += oracle.len();
    }
    Ok(total / count as f64)
}

// ---- cluster extraction ----

/// Confidence-guided clustering: each vertex links to its highest-affinity
/// neighbor with strictly higher confidence (none -> the vertex is a root);
/// connected components of the links are the clusters.
pub fn extract_clusters(graph: &AffinityGraph, confidences: &[f64]) -> ClusterModel {
    let n = graph.vertices.len();
    assert_eq!(confidences.len(), n, "one confidence per vertex");
    let parent: Vec<usize> = (0..n)
        .map(|i| {
            graph.edges[i]
                .iter()
                .find(|&&(j, _)| confidences[j] > confidences[i])
                .map_or(i, |&(j, _)| j)
        })
        .collect();
    // confidences strictly increase along links, so chains terminate
    let root_of = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let roots: Vec<usize> = (0..n).map(|i| root_of(i)).collect();
    let mut root_ids: Vec<usize> = roots.clone();
    root_ids.sort_unstable();
    root_ids.dedup();
    let cluster_of = |r: usize| root_ids.binary_search(&r).expect("root present");
    let assignment: Vec<usize> = roots.iter().map(|&r| cluster_of(r)).collect();

    let t = root_ids.len();
    let d = graph.vertices[0].vec.len();
    let mut centroids = vec![vec![0.0; d]; t];
    let mut counts = vec![0usize; t];
    for (i, &c) in assignment.iter().enumerate() {
        for (slot, &v) in centroids[c].iter_mut().zip(&graph.vertices[i].vec) {
            *slot += v;
        }
        counts[c] += 1;
    }
    for (c, centroid) in centroids.iter_mut().enumerate() {
        for v in centroid.iter_mut() {
            *v /= counts[c] as f64;
        }
        let n = norm(centroid);
        if n > 0.0 {
            for v in centroid.iter_mut() {
                *v /= n;
            }
        }
    }
    ClusterModel { t, centroids, assignment, confidence: confidences.to_vec() }
}

// ---- k-means baseline ----

/// Lloyd iterations on unit-normalized vectors with cosine assignment and
/// greedy farthest-point seeding; empty clusters are re-seeded from the point
/// farthest from its centroid.
pub fn kmeans_baseline(
    reps: &[LandmarkRep],
    t: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<ClusterModel, CorrespondenceError> {
    let n = reps.len();
    if t == 0 || t > n {
        return Err(CorrespondenceError::BadT { t, n });
    }
    let points: Vec<Vec<f64>> = reps.iter().map(|r| normalized(&r.vec)).collect();
    let d = points[0].len();

    // farthest-point seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(t);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut min_dist: Vec<f64> = points.iter().map(|p| 1.0 - dot(p, &centroids[0])).collect();
    while centroids.len() < t {
        let far = (0..n)
            .max_by(|&a, &b| min_dist[a].total_cmp(&min_dist[b]).then(b.cmp(&a)))
            .expect("nonempty");
        centroids.push(points[far].clone());
        let c = centroids.last().expect("just pushed");
        for (i, p) in points.iter().enumerate() {
            min_dist[i] = min_dist[i].min(1.0 - dot(p, c));
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        // assign by max cosine, ties to the lowest cluster id
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..t)
                .max_by(|&a, &b| {
                    dot(p, &centroids[a]).total_cmp(&dot(p, &centroids[b])).then(b.cmp(&a))
                })
                .expect("t >= 1");
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        // recompute normalized-mean centroids
        let mut sums = vec![vec![0.0; d]; t];
        let mut counts = vec![0usize; t];
        for (i, &c) in assignment.iter().enumerate() {
            for (slot, &v) in sums[c].iter_mut().zip(&points[i]) {
                *slot += v;
            }
            counts[c] += 1;
        }
        for c in 0..t {
            if counts[c] == 0 {
                // re-seed from the point farthest from its own centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = 1.0 - dot(&points[a], &centroids[assignment[a]]);
                        let db = 1.0 - dot(&points[b], &centroids[assignment[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("nonempty");
                centroids[c] = points[far].clone();
                changed = true;
                continue;
            }
            let nrm = norm(&sums[c]);
            if nrm > 0.0 {
                centroids[c] = sums[c].iter().map(|v| v / nrm).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let confidence: Vec<f64> =
        points.iter().zip(&assignment).map(|(p, &c)| dot(p, &centroids[c]).clamp(-1.0, 1.0)).collect();
    Ok(ClusterModel { t, centroids, assignment, confidence })
}

/// Labeled synthetic cluster graphs for GCN confidence training: random unit
/// centers, per-point uniform perturbation, cluster count and noise level
/// drawn per graph. Purely synthetic, so oracle confidences are available
/// without touching any real labels.
pub fn synthetic_labeled_graphs(
    count: usize,
    n: usize,
    d: usize,
    kappa: usize,
    rng: &mut impl Rng,
) -> Vec<AffinityGraph> {
    (0..count)
        .map(|_| {
            let clusters = rng.gen_range(3..8);
            let noise = rng.gen_range(0.1..0.45);
            let centers: Vec<Vec<f64>> = (0..clusters)
                .map(|_| normalized(&(0..d).map(|_| rng.gen_range(-1.0f64..1.0)).collect::<Vec<_>>()))
                .collect();
            let reps: Vec<LandmarkRep> = (0..n)
                .map(|i| {
                    let label = rng.gen_range(0..clusters) as u32;
                    let v: Vec<f64> = centers[label as usize]
                        .iter()
                        .map(|c| c + noise * rng.gen_range(-1.0..1.0))
                        .collect();
                    LandmarkRep {
                        vec: normalized(&v),
                        landmark_index: 0,
                        image_id: i as u32,
                        label: Some(label),
                    }
                })
                .collect();
            build_knn_graph(reps, kappa).expect("n >= 2 synthetic vertices")
        })
        .collect()
}

// ---- consistency ----

/// Max cosine similarity between a representation and any cluster centroid.
pub fn consistency(rep: &[f64], model: &ClusterModel) -> f64 {
    model
        .centroids
        .iter()
        .map(|c| cosine(rep, c))
        .fold(f64::NEG_INFINITY, f64::max)
        .clamp(-1.0, 1.0)
}

// ---- serialization ----

/// Centroids into a CGB1 checkpoint, assignments into a CSV sidecar with
/// columns vertex_id, cluster_id, confidence.
pub fn write_cluster_model(
    model: &ClusterModel,
    ckpt_path: &Path,
    csv_path: &Path,
) -> Result<(), CorrespondenceError> {
    let d = model.centroids.first().map_or(0, Vec::len);
    let flat: Vec<f64> = model.centroids.iter().flatten().copied().collect();
    let centroids = Tensor::new(vec![model.t, d], flat).expect("centroid shape");
    checkpoint::save(ckpt_path, &[("centroids".to_string(), centroids)])?;
    let mut f = BufWriter::new(File::create(csv_path)?);
    writeln!(f, "vertex_id,cluster_id,confidence")?;
    for (i, (&c, &conf)) in model.assignment.iter().zip(&model.confidence).enumerate() {
        writeln!(f, "{i},{c},{conf}")?;
    }
    f.flush()?;
    Ok(())
}
