//! Quantitative metrics: forward/backward NME through a fitted linear
//! regressor, detector stability under similarity transforms, clustering
//! quality (silhouette, Calinski-Harabasz), reconstruction quality
//! (PSNR, SSIM) and CED curve data.
//!
//! Everything here is pure; callers own randomness, splits and I/O.

use crate::pipeline::{
    apply_to_points, checkpoint_sigmas, reconstruct, sample_deformation, DeformationRanges,
    DetectGraph, LoadedCheckpoint, PipelineError, SimilarityTransform,
};
use crate::seeds;
use crate::synthdata::{Dataset, Image};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{got} training pairs, need at least {need}")]
    TooFewPairs { got: usize, need: usize },
    #[error("normal equations are rank-deficient beyond ridge damping")]
    RankDeficient,
    #[error("mismatched inputs: {0}")]
    Mismatch(String),
    #[error("inter-ocular distance must be positive, got {0}")]
    BadInterOcular(f64),
    #[error("cluster quality needs at least 2 clusters")]
    SingleCluster,
    #[error("zero-norm representation at index {0}")]
    ZeroVector(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("bad image pair: {0}")]
    BadImage(String),
}

// ---- linear regression between point sets ----

/// Least-squares map from K-point sets to M-point sets, bias included.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    /// Row-major `[2M, 2K]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub k_in: usize,
    pub m_out: usize,
}

impl RegressorModel {
    pub fn predict(&self, pts: &[(f64, f64)]) -> Result<Vec<(f64, f64)>, EvalError> {
        if pts.len() != self.k_in {
            return Err(EvalError::Mismatch(format!(
                "predict got {} points, model takes {}",
                pts.len(),
                self.k_in
            )));
        }
        let n_in = 2 * self.k_in;
        let mut out = Vec::with_capacity(self.m_out);
        for m in 0..self.m_out {
            let mut coords = [self.bias[2 * m], self.bias[2 * m + 1]];
            for (axis, c) in coords.iter_mut().enumerate() {
                let row = &self.weight[(2 * m + axis) * n_in..(2 * m + axis + 1) * n_in];
                for (j, p) in pts.iter().enumerate() {
                    *c += row[2 * j] * p.0 + row[2 * j + 1] * p.1;
                }
            }
            out.push((coords[0], coords[1]));
        }
        Ok(out)
    }
}

/// Scale points into the unit square used by the regression metrics.
pub fn normalize_points(pts: &[(f64, f64)], side: f64) -> Vec<(f64, f64)> {
    pts.iter().map(|&(x, y)| (x / side, y / side)).collect()
}

/// Distance between the two eye-center ground-truth points (indices 0, 1).
pub fn inter_ocular(gt: &[(f64, f64)]) -> Result<f64, EvalError> {
    if gt.len() < 2 {
        return Err(EvalError::Mismatch(format!("{} ground-truth points, need 2 eyes", gt.len())));
    }
    let d = ((gt[0].0 - gt[1].0).powi(2) + (gt[0].1 - gt[1].1).powi(2)).sqrt();
    if d <= 0.0 {
        return Err(EvalError::BadInterOcular(d));
    }
    Ok(d)
}

const RIDGE: f64 = 1e-8;
const PIVOT_TOL: f64 = 1e-12;

/// Gaussian elimination with partial pivoting on an in-place augmented
/// system; `a` is n x n row-major, `rhs` holds `cols` stacked columns.
fn solve_multi(a: &mut [f64], rhs: &mut [f64], n: usize, cols: usize) -> Result<(), EvalError> {
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .expect("non-empty range");
        if a[pivot_row * n + col].abs() < PIVOT_TOL {
            return Err(EvalError::RankDeficient);
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..cols {
                rhs.swap(col * cols + j, pivot_row * cols + j);
            }
        }
        let pivot = a[col * n + col];
        for row in (col + 1)..n {
            let f = a[row * n + col] / pivot;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            for j in 0..cols {
                rhs[row * cols + j] -= f * rhs[col * cols + j];
            }
        }
    }
    for col in (0..n).rev() {
        let pivot = a[col * n + col];
        for j in 0..cols {
            let mut v = rhs[col * cols + j];
            for jj in (col + 1)..n {
                v -= a[col * n + jj] * rhs[jj * cols + j];
            }
            rhs[col * cols + j] = v / pivot;
        }
    }
    Ok(())
}

/// Ordinary least squares from point sets `x` (K points each) to point sets
/// `y` (M points each) via ridge-damped normal equations. Coordinates are
/// expected in the unit square (see `normalize_points`).
pub fn fit_regressor(
    x: &[Vec<(f64, f64)>],
    y: &[Vec<(f64, f64)>],
) -> Result<RegressorModel, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Mismatch(format!("{} inputs vs {} targets", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (k, m) = (x[0].len(), y[0].len());
    if k == 0 || m == 0 {
        return Err(EvalError::Mismatch("empty point sets".into()));
    }
    if let Some(bad) = x.iter().position(|p| p.len() != k) {
        return Err(EvalError::Mismatch(format!("input {bad} has {} points, not {k}", x[bad].len())));
    }
    if let Some(bad) = y.iter().position(|p| p.len() != m) {
        return Err(EvalError::Mismatch(format!("target {bad} has {} points, not {m}", y[bad].len())));
    }
    let need = 2 * k.max(m) + 1;
    if x.len() < need {
        return Err(EvalError::TooFewPairs { got: x.len(), need });
    }
    let finite = |pts: &[Vec<(f64, f64)>]| pts.iter().flatten().all(|p| p.0.is_finite() && p.1.is_finite());
    if !finite(x) || !finite(y) {
        return Err(EvalError::Mismatch("non-finite coordinates".into()));
    }

    // features per pair: [x0, y0, .., x_{K-1}, y_{K-1}, 1]
    let nf = 2 * k + 1;
    let nt = 2 * m;
    let feature = |pts: &[(f64, f64)], j: usize| -> f64 {
        if j == nf - 1 {
            1.0
        } else if j % 2 == 0 {
            pts[j / 2].0
        } else {
            pts[j / 2].1
        }
    };
    let mut ata = vec![0.0; nf * nf];
    let mut atb = vec![0.0; nf * nt];
    for (px, py) in x.iter().zip(y) {
        for i in 0..nf {
            let fi = feature(px, i);
            if fi == 0.0 {
                continue;
            }
            for j in i..nf {
                ata[i * nf + j] += fi * feature(px, j);
            }
            for (t, p) in py.iter().enumerate() {
                atb[i * nt + 2 * t] += fi * p.0;
                atb[i * nt + 2 * t + 1] += fi * p.1;
            }
        }
    }
    for i in 0..nf {
        for j in 0..i {
            ata[i * nf + j] = ata[j * nf + i];
        }
        ata[i * nf + i] += RIDGE;
    }
    solve_multi(&mut ata, &mut atb, nf, nt)?;
    if atb.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::RankDeficient);
    }

    // atb rows are features, columns targets; transpose into [2M, 2K] + bias
    let mut weight = vec![0.0; nt * 2 * k];
    let mut bias = vec![0.0; nt];
    for t in 0..nt {
        for j in 0..2 * k {
            weight[t * 2 * k + j] = atb[j * nt + t];
        }
        bias[t] = atb[(nf - 1) * nt + t];
    }
    Ok(RegressorModel { weight, bias, k_in: k, m_out: m })
}

fn regression_nme(
    model: &RegressorModel,
    inputs: &[Vec<(f64, f64)>],
    targets: &[Vec<(f64, f64)>],
    inter_ocular: &[f64],
) -> Result<f64, EvalError> {
    if inputs.len() != targets.len() || inputs.len() != inter_ocular.len() {
        return Err(EvalError::Mismatch(format!(
            "{} inputs, {} targets, {} inter-ocular distances",
            inputs.len(),
            targets.len(),
            inter_ocular.len()
        )));
    }
    if inputs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(&bad) = inter_ocular.iter().find(|&&d| !(d > 0.0)) {
        return Err(EvalError::BadInterOcular(bad));
    }
    let mut total = 0.0;
    for ((pts, gt), &iod) in inputs.iter().zip(targets).zip(inter_ocular) {
        let pred = model.predict(pts)?;
        if pred.len() != gt.len() {
            return Err(EvalError::Mismatch(format!(
                "model emits {} points, target has {}",
                pred.len(),
                gt.len()
            )));
        }
        let err: f64 = pred
            .iter()
            .zip(gt)
            .map(|(p, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
            .sum::<f64>()
            / pred.len() as f64;
        total += err / iod;
    }
    Ok(100.0 * total / inputs.len() as f64)
}

/// NME percent of discovered -> ground-truth regression on a held-out split.
pub fn forward_error(
    model: &RegressorModel,
    discovered: &[Vec<(f64, f64)>],
    gt: &[Vec<(f64, f64)>],
    inter_ocular: &[f64],
) -> Result<f64, EvalError> {
    regression_nme(model, discovered, gt, inter_ocular)
}

/// NME percent of the symmetric ground-truth -> discovered direction.
pub fn backward_error(
    model: &RegressorModel,
    gt: &[Vec<(f64, f64)>],
    discovered: &[Vec<(f64, f64)>],
    inter_ocular: &[f64],
) -> Result<f64, EvalError> {
    regression_nme(model, gt, discovered, inter_ocular)
}

// ---- stability ----

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// Mean `||psi_k(A(y)) - A(psi_k(y))||` per landmark, pixel units.
    pub per_landmark: Vec<f64>,
    pub mean: f64,
}

/// Equivariance error of a detector under per-image similarity transforms.
pub fn stability_error<F>(
    mut detect: F,
    images: &[Image],
    transforms: &[SimilarityTransform],
) -> Result<StabilityReport, EvalError>
where
    F: FnMut(&Image) -> Vec<(f64, f64)>,
{
    if images.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if images.len() != transforms.len() {
        return Err(EvalError::Mismatch(format!(
            "{} images vs {} transforms",
            images.len(),
            transforms.len()
        )));
    }
    let mut per_landmark: Vec<f64> = Vec::new();
    for (img, a) in images.iter().zip(transforms) {
        let base = detect(img);
        let on_warped = detect(&crate::pipeline::apply_transform(img, a));
        if base.len() != on_warped.len() {
            return Err(EvalError::Mismatch(format!(
                "detector emitted {} then {} landmarks",
                base.len(),
                on_warped.len()
            )));
        }
        if per_landmark.is_empty() {
            per_landmark = vec![0.0; base.len()];
        } else if per_landmark.len() != base.len() {
            return Err(EvalError::Mismatch(format!(
                "detector emitted {} landmarks, expected {}",
                base.len(),
                per_landmark.len()
            )));
        }
        let moved = apply_to_points(&base, a, img.w);
        for (slot, (p, q)) in per_landmark.iter_mut().zip(on_warped.iter().zip(&moved)) {
            *slot += ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        }
    }
    let n = images.len() as f64;
    for e in per_landmark.iter_mut() {
        *e /= n;
    }
    let mean = per_landmark.iter().sum::<f64>() / per_landmark.len() as f64;
    Ok(StabilityReport { per_landmark, mean })
}

// ---- clustering quality ----

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterQuality {
    /// Mean silhouette under 1 - cosine distance; singletons score 0.
    pub silhouette: f64,
    /// Calinski-Harabasz index, Euclidean.
    pub calinski_harabasz: f64,
}

pub fn cluster_quality(reps: &[Vec<f64>], assignment: &[usize]) -> Result<ClusterQuality, EvalError> {
    let n = reps.len();
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    if assignment.len() != n {
        return Err(EvalError::Mismatch(format!("{n} points vs {} labels", assignment.len())));
    }
    let dim = reps[0].len();
    if let Some(bad) = reps.iter().position(|r| r.len() != dim) {
        return Err(EvalError::Mismatch(format!("point {bad} has dim {}, not {dim}", reps[bad].len())));
    }
    let t = assignment.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; t];
    for &c in assignment {
        counts[c] += 1;
    }
    if t < 2 || counts.iter().any(|&c| c == 0) {
        return Err(EvalError::SingleCluster);
    }

    // cosine part works on unit vectors; zero vectors have no direction
    let mut unit = Vec::with_capacity(n);
    for (i, r) in reps.iter().enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EvalError::ZeroVector(i));
        }
        unit.push(r.iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    // sum of unit vectors per cluster: mean cosine distance from a point to a
    // cluster is then one dot product instead of a pass over members
    let mut sums = vec![0.0; t * dim];
    for (u, &c) in unit.iter().zip(assignment) {
        for (j, v) in u.iter().enumerate() {
            sums[c * dim + j] += v;
        }
    }
    let mut silhouette = 0.0;
    for (u, &c) in unit.iter().zip(assignment) {
        if counts[c] == 1 {
            continue; // convention: singleton silhouette is 0
        }
        let dots: Vec<f64> = (0..t)
            .map(|cl| u.iter().zip(&sums[cl * dim..(cl + 1) * dim]).map(|(a, b)| a * b).sum())
            .collect();
        // own-cluster mean excludes the point itself (self-distance 0)
        let a = 1.0 - (dots[c] - 1.0) / (counts[c] - 1) as f64;
        let b = (0..t)
            .filter(|&cl| cl != c)
            .map(|cl| 1.0 - dots[cl] / counts[cl] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            silhouette += (b - a) / denom;
        }
    }
    silhouette /= n as f64;

    // CH on the raw vectors
    let mut centroids = vec![0.0; t * dim];
    let mut grand = vec![0.0; dim];
    for (r, &c) in reps.iter().zip(assignment) {
        for (j, v) in r.iter().enumerate() {
            centroids[c * dim + j] += v;
            grand[j] += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        for j in 0..dim {
            centroids[c * dim + j] /= count as f64;
        }
    }
    for g in grand.iter_mut() {
        *g /= n as f64;
    }
    let mut within = 0.0;
    for (r, &c) in reps.iter().zip(assignment) {
        within += r
            .iter()
            .zip(&centroids[c * dim..(c + 1) * dim])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let mut between = 0.0;
    for (c, &count) in counts.iter().enumerate() {
        between += count as f64
            * centroids[c * dim..(c + 1) * dim]
                .iter()
                .zip(&grand)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
    }
    let calinski_harabasz = if within == 0.0 {
        if between == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (between / (t - 1) as f64) / (within / (n - t) as f64)
    };
    Ok(ClusterQuality { silhouette, calinski_harabasz })
}

// ---- reconstruction quality ----

#[derive(Debug, Clone, PartialEq)]
pub struct ReconQuality {
    /// `10 log10(1 / MSE)` dB; +inf for identical images.
    pub psnr: f64,
    /// Mean SSIM over non-overlapping 8x8 tiles of each channel.
    pub ssim: f64,
}

const SSIM_TILE: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn reconstruction_quality(pred: &Image, target: &Image) -> Result<ReconQuality, EvalError> {
    if pred.h != target.h || pred.w != target.w {
        return Err(EvalError::BadImage(format!(
            "{}x{} vs {}x{}",
            pred.h, pred.w, target.h, target.w
        )));
    }
    if pred.h < SSIM_TILE || pred.w < SSIM_TILE {
        return Err(EvalError::BadImage(format!("{}x{} is smaller than one SSIM tile", pred.h, pred.w)));
    }
    let in_range = |img: &Image| img.data.iter().all(|v| (0.0..=1.0).contains(v));
    if !in_range(pred) || !in_range(target) {
        return Err(EvalError::BadImage("pixel values outside [0, 1]".into()));
    }

    let mse = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.data.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };

    let (th, tw) = (pred.h / SSIM_TILE, pred.w / SSIM_TILE);
    let area = (SSIM_TILE * SSIM_TILE) as f64;
    let mut ssim = 0.0;
    for c in 0..3 {
        for ty in 0..th {
            for tx in 0..tw {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_TILE {
                    for dx in 0..SSIM_TILE {
                        let a = pred.at(c, ty * SSIM_TILE + dy, tx * SSIM_TILE + dx);
                        let b = target.at(c, ty * SSIM_TILE + dy, tx * SSIM_TILE + dx);
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / area, sy / area);
                let vx = sxx / area - mx * mx;
                let vy = syy / area - my * my;
                let cov = sxy / area - mx * my;
                ssim += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
    }
    ssim /= (3 * th * tw) as f64;
    Ok(ReconQuality { psnr, ssim })
}

// ---- CED ----

/// Cumulative error distribution sampled at 100 evenly spaced thresholds
/// from 0 to the maximum error.
pub fn ced_curve(errors: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(&bad) = errors.iter().find(|&&e| !(e >= 0.0)) {
        return Err(EvalError::Mismatch(format!("negative or non-finite error {bad}")));
    }
    let max = errors.iter().cloned().fold(0.0, f64::max);
    let n = errors.len() as f64;
    Ok((0..100)
        .map(|i| {
            let thr = max * i as f64 / 99.0;
            let frac = errors.iter().filter(|&&e| e <= thr).count() as f64 / n;
            (thr, frac)
        })
        .collect())
}

// ---- splits ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic 80/20 split keyed on image ids (multiplicative hashing),
/// independent of dataset order.
pub fn split_train_test(ids: &[u32]) -> Split {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, &id) in ids.iter().enumerate() {
        let h = (id as u64 ^ 0x5851_f42d_4c95_7f2d).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        // top byte: 256 * 0.8 = 204.8, so < 205 is the 80% side
        if (h >> 56) < 205 {
            train.push(idx);
        } else {
            test.push(idx);
        }
    }
    Split { train, test }
}

// ---- checkpoint evaluation ----

/// Scalar metrics of one checkpoint on one dataset, plus the per-image
/// forward NME that feeds the CED curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMetrics {
    pub forward_nme: f64,
    pub backward_nme: f64,
    pub stability_mean: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Forward NME per test image, CED input.
    pub per_image_nme: Vec<f64>,
    pub train_size: usize,
    pub test_size: usize,
}

/// Detects on (up to `limit`) dataset images, fits both regression directions
/// on the deterministic train split, and scores NME, stability, PSNR and SSIM
/// on the test split. Stability transforms flow from the EVAL_TRANSFORMS
/// stream of `seed`, so paired ablation runs score under common random
/// numbers. Regressions run in unit-square coordinates; stability stays in
/// pixels. Defined for arbitrary (including untrained) checkpoints.
pub fn evaluate_checkpoint(
    ckpt: &LoadedCheckpoint,
    dataset: &Dataset,
    limit: Option<usize>,
    seed: u64,
) -> Result<CheckpointMetrics, PipelineError> {
    let n = limit.map_or(dataset.images.len(), |l| l.min(dataset.images.len()));
    let images = &dataset.images[..n];
    let split = split_train_test(&dataset.ids[..n]);
    if split.train.is_empty() || split.test.is_empty() {
        return Err(PipelineError::Eval(EvalError::TooFewPairs { got: n, need: 2 }));
    }

    let side = ckpt.net.img as f64;
    let mut dg = DetectGraph::new(&ckpt.det)?;
    let mut detected = Vec::with_capacity(n);
    for img in images {
        detected.push(normalize_points(&dg.run(img)?.coords_img, side));
    }
    let gt: Vec<Vec<(f64, f64)>> =
        dataset.landmarks[..n].iter().map(|l| normalize_points(&l[..], side)).collect();
    let iod = gt.iter().map(|g| inter_ocular(g)).collect::<Result<Vec<f64>, EvalError>>()?;

    let take = |v: &[Vec<(f64, f64)>], idx: &[usize]| -> Vec<Vec<(f64, f64)>> {
        idx.iter().map(|&i| v[i].clone()).collect()
    };
    let det_train = take(&detected, &split.train);
    let det_test = take(&detected, &split.test);
    let gt_train = take(&gt, &split.train);
    let gt_test = take(&gt, &split.test);
    let iod_test: Vec<f64> = split.test.iter().map(|&i| iod[i]).collect();

    let fwd = fit_regressor(&det_train, &gt_train)?;
    let forward_nme = forward_error(&fwd, &det_test, &gt_test, &iod_test)?;
    let bwd = fit_regressor(&gt_train, &det_train)?;
    let backward_nme = backward_error(&bwd, &gt_test, &det_test, &iod_test)?;

    let mut per_image_nme = Vec::with_capacity(det_test.len());
    for ((d, g), &i) in det_test.iter().zip(&gt_test).zip(&iod_test) {
        let pred = fwd.predict(d)?;
        let err = pred
            .iter()
            .zip(g)
            .map(|(p, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
            .sum::<f64>()
            / pred.len() as f64;
        per_image_nme.push(100.0 * err / i);
    }

    let test_imgs: Vec<Image> = split.test.iter().map(|&i| images[i].clone()).collect();
    let mut rng = seeds::stream(seed, seeds::EVAL_TRANSFORMS);
    let transforms = test_imgs
        .iter()
        .map(|_| sample_deformation(&mut rng, &DeformationRanges::default()))
        .collect::<Result<Vec<SimilarityTransform>, PipelineError>>()?;
    let report = stability_error(
        |img| dg.run(img).expect("warped dataset image stays valid").coords_img,
        &test_imgs,
        &transforms,
    )?;

    let sigmas = checkpoint_sigmas(ckpt)?;
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for img in &test_imgs {
        let (recon, _) = reconstruct(img, img, &ckpt.det, &ckpt.rec, &sigmas)?;
        let q = reconstruction_quality(&recon, img)?;
        psnr += q.psnr;
        ssim += q.ssim;
    }
    let m = test_imgs.len() as f64;
    Ok(CheckpointMetrics {
        forward_nme,
        backward_nme,
        stability_mean: report.mean,
        psnr: psnr / m,
        ssim: ssim / m,
        per_image_nme,
        train_size: split.train.len(),
        test_size: split.test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
    use std::collections::HashMap;

    fn random_point_sets(n: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<(f64, f64)>> {
        (0..n)
            .map(|_| (0..k).map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect())
            .collect()
    }

    #[test]
    fn self_regression_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_point_sets(40, 5, &mut rng);
        let model = fit_regressor(&x, &x).unwrap();
        for (i, &w) in model.weight.iter().enumerate() {
            let expected = if i / 10 == i % 10 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(w, expected, epsilon = 1e-6);
        }
        for &b in &model.bias {
            assert_abs_diff_eq!(b, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn exact_affine_pair_has_tiny_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_point_sets(60, 4, &mut rng);
        // a fixed affine map applied pointwise
        let y: Vec<Vec<(f64, f64)>> = x
            .iter()
            .map(|pts| {
                pts.iter()
                    .map(|&(px, py)| (0.7 * px - 0.2 * py + 0.1, 0.3 * px + 1.1 * py - 0.05))
                    .collect()
            })
            .collect();
        let model = fit_regressor(&x, &y).unwrap();
        for (pts, target) in x.iter().zip(&y) {
            let pred = model.predict(pts).unwrap();
            for (p, q) in pred.iter().zip(target) {
                assert_abs_diff_eq!(p.0, q.0, epsilon = 1e-8);
                assert_abs_diff_eq!(p.1, q.1, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn underdetermined_fit_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_point_sets(10, 5, &mut rng);
        let y = random_point_sets(10, 5, &mut rng);
        assert_eq!(
            fit_regressor(&x, &y),
            Err(EvalError::TooFewPairs { got: 10, need: 11 })
        );
    }

    #[test]
    fn mismatched_point_counts_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = random_point_sets(12, 2, &mut rng);
        let y = random_point_sets(12, 2, &mut rng);
        x[3].push((0.5, 0.5));
        assert!(matches!(fit_regressor(&x, &y), Err(EvalError::Mismatch(_))));
        let x = random_point_sets(12, 2, &mut rng);
        assert!(matches!(fit_regressor(&x, &y[..11]), Err(EvalError::Mismatch(_))));
    }

    #[test]
    fn singular_solve_without_damping_is_rejected() {
        let mut a = vec![0.0; 9];
        let mut rhs = vec![1.0, 2.0, 3.0];
        assert_eq!(solve_multi(&mut a, &mut rhs, 3, 1), Err(EvalError::RankDeficient));
    }

    #[test]
    fn fit_residual_beats_zero_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_point_sets(30, 3, &mut rng);
        let y = random_point_sets(30, 3, &mut rng);
        let model = fit_regressor(&x, &y).unwrap();
        let sse = |pred: &dyn Fn(&[(f64, f64)]) -> Vec<(f64, f64)>| -> f64 {
            x.iter()
                .zip(&y)
                .map(|(px, py)| {
                    pred(px)
                        .iter()
                        .zip(py)
                        .map(|(p, q)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2))
                        .sum::<f64>()
                })
                .sum()
        };
        let fitted = sse(&|p| model.predict(p).unwrap());
        let zero = sse(&|p| vec![(0.0, 0.0); p.len()]);
        assert!(fitted <= zero, "fitted {fitted} vs zero-model {zero}");
    }

    #[test]
    fn nme_zero_on_exact_match_and_hundred_at_one_iod() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_point_sets(20, 3, &mut rng);
        let model = fit_regressor(&x, &x).unwrap();
        let iod = vec![0.25; x.len()];
        let zero = forward_error(&model, &x, &x, &iod).unwrap();
        assert_abs_diff_eq!(zero, 0.0, epsilon = 1e-4);
        // shift every target by exactly one inter-ocular distance
        let shifted: Vec<Vec<(f64, f64)>> =
            x.iter().map(|pts| pts.iter().map(|&(a, b)| (a + 0.25, b)).collect()).collect();
        let hundred = forward_error(&model, &x, &shifted, &iod).unwrap();
        assert_abs_diff_eq!(hundred, 100.0, epsilon = 1e-3);
    }

    #[test]
    fn nme_rejects_nonpositive_inter_ocular() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_point_sets(20, 2, &mut rng);
        let model = fit_regressor(&x, &x).unwrap();
        let bad = vec![0.0; x.len()];
        assert_eq!(
            forward_error(&model, &x, &x, &bad),
            Err(EvalError::BadInterOcular(0.0))
        );
    }

    #[test]
    fn forward_error_invariant_under_global_similarity() {
        // the linear regressor absorbs a similarity applied to its inputs
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_point_sets(50, 4, &mut rng);
        let y = random_point_sets(50, 4, &mut rng);
        let iod: Vec<f64> = (0..50).map(|_| rng.gen_range(0.1..0.3)).collect();
        let split = 30;
        let base_model = fit_regressor(&x[..split], &y[..split]).unwrap();
        let base = forward_error(&base_model, &x[split..], &y[split..], &iod[split..]).unwrap();
        let (s, c, sn) = (1.3, 0.4f64.cos(), 0.4f64.sin());
        let moved: Vec<Vec<(f64, f64)>> = x
            .iter()
            .map(|pts| {
                pts.iter()
                    .map(|&(px, py)| (s * (c * px - sn * py) + 0.2, s * (sn * px + c * py) - 0.1))
                    .collect()
            })
            .collect();
        let moved_model = fit_regressor(&moved[..split], &y[..split]).unwrap();
        let got = forward_error(&moved_model, &moved[split..], &y[split..], &iod[split..]).unwrap();
        // tolerance absorbs the ridge term, which is not similarity-invariant
        assert_abs_diff_eq!(got, base, epsilon = 1e-5);
    }

    #[test]
    fn inter_ocular_is_eye_distance() {
        let gt = vec![(10.0, 10.0), (13.0, 14.0), (32.0, 40.0)];
        assert_abs_diff_eq!(inter_ocular(&gt).unwrap(), 5.0, epsilon = 1e-12);
        assert_eq!(
            inter_ocular(&[(1.0, 1.0), (1.0, 1.0)]),
            Err(EvalError::BadInterOcular(0.0))
        );
    }

    #[test]
    fn constant_detector_scores_translation_norm() {
        let imgs: Vec<Image> = (0..4).map(|_| Image::zeros(64, 64)).collect();
        let a = SimilarityTransform::new(1.0, 0.0, 3.0, 4.0).unwrap();
        let transforms = vec![a; 4];
        let report = stability_error(
            |_| vec![(20.0, 20.0), (40.0, 30.0)],
            &imgs,
            &transforms,
        )
        .unwrap();
        for e in &report.per_landmark {
            assert_abs_diff_eq!(*e, 5.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(report.mean, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn equivariant_lookup_detector_scores_exactly_zero() {
        // detections for warped images are precomputed with the same
        // apply_to_points call stability_error uses, so the error is 0.0
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images: Vec<Image> = (0..5).map(|_| crate::synthdata::generate_scene(&mut rng).0).collect();
        let transforms: Vec<SimilarityTransform> = (0..5)
            .map(|_| {
                crate::pipeline::sample_deformation(&mut rng, &Default::default()).unwrap()
            })
            .collect();
        let base_points: Vec<Vec<(f64, f64)>> = (0..5)
            .map(|_| (0..3).map(|_| (rng.gen_range(5.0..59.0), rng.gen_range(5.0..59.0))).collect())
            .collect();
        let mut table: HashMap<Vec<u64>, Vec<(f64, f64)>> = HashMap::new();
        let key = |img: &Image| -> Vec<u64> { img.data.iter().map(|v| v.to_bits()).collect() };
        for ((img, a), pts) in images.iter().zip(&transforms).zip(&base_points) {
            table.insert(key(img), pts.clone());
            let warped = crate::pipeline::apply_transform(img, a);
            table.insert(key(&warped), apply_to_points(pts, a, img.w));
        }
        let report =
            stability_error(|img: &Image| table[&key(img)].clone(), &images, &transforms).unwrap();
        assert_eq!(report.per_landmark, vec![0.0; 3]);
        assert_eq!(report.mean, 0.0);
    }

    #[test]
    fn stability_rejects_mismatched_lengths() {
        let imgs = vec![Image::zeros(16, 16)];
        assert!(matches!(
            stability_error(|_| vec![(0.0, 0.0)], &imgs, &[]),
            Err(EvalError::Mismatch(_))
        ));
        assert!(matches!(
            stability_error(|_| vec![(0.0, 0.0)], &[], &[]),
            Err(EvalError::EmptyInput)
        ));
    }

    #[test]
    fn duplicate_far_clusters_have_unit_silhouette() {
        let mut reps = Vec::new();
        let mut assignment = Vec::new();
        for _ in 0..5 {
            reps.push(vec![1.0, 0.0, 0.0]);
            assignment.push(0);
        }
        for _ in 0..5 {
            reps.push(vec![0.0, 1.0, 0.0]);
            assignment.push(1);
        }
        let q = cluster_quality(&reps, &assignment).unwrap();
        assert_abs_diff_eq!(q.silhouette, 1.0, epsilon = 1e-9);
        assert!(q.calinski_harabasz.is_infinite());
    }

    #[test]
    fn single_cluster_is_rejected() {
        let reps = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(cluster_quality(&reps, &[0, 0]), Err(EvalError::SingleCluster));
        // a labeled-but-empty middle cluster also fails the precondition
        assert_eq!(cluster_quality(&reps, &[0, 2]), Err(EvalError::SingleCluster));
    }

    /// Naive per-point silhouette and textbook CH, for oracle comparison.
    fn brute_force_quality(reps: &[Vec<f64>], assignment: &[usize]) -> (f64, f64) {
        let n = reps.len();
        let t = assignment.iter().max().unwrap() + 1;
        let cos_dist = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            1.0 - dot / (na * nb)
        };
        let mut sil = 0.0;
        for i in 0..n {
            let own: Vec<usize> =
                (0..n).filter(|&j| j != i && assignment[j] == assignment[i]).collect();
            if own.is_empty() {
                continue;
            }
            let a: f64 =
                own.iter().map(|&j| cos_dist(&reps[i], &reps[j])).sum::<f64>() / own.len() as f64;
            let b = (0..t)
                .filter(|&c| c != assignment[i])
                .map(|c| {
                    let other: Vec<usize> = (0..n).filter(|&j| assignment[j] == c).collect();
                    other.iter().map(|&j| cos_dist(&reps[i], &reps[j])).sum::<f64>()
                        / other.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            sil += (b - a) / a.max(b);
        }
        sil /= n as f64;

        let dim = reps[0].len();
        let mut centroid = vec![vec![0.0; dim]; t];
        let mut count = vec![0usize; t];
        let mut grand = vec![0.0; dim];
        for (r, &c) in reps.iter().zip(assignment) {
            for j in 0..dim {
                centroid[c][j] += r[j];
                grand[j] += r[j];
            }
            count[c] += 1;
        }
        for c in 0..t {
            for j in 0..dim {
                centroid[c][j] /= count[c] as f64;
            }
        }
        for g in grand.iter_mut() {
            *g /= n as f64;
        }
        let within: f64 = reps
            .iter()
            .zip(assignment)
            .map(|(r, &c)| r.iter().zip(&centroid[c]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        let between: f64 = (0..t)
            .map(|c| {
                count[c] as f64
                    * centroid[c].iter().zip(&grand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum();
        let ch = (between / (t - 1) as f64) / (within / (n - t) as f64);
        (sil, ch)
    }

    #[test]
    fn quality_matches_brute_force_oracle_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..25 {
            let n = rng.gen_range(6..=50);
            let t = rng.gen_range(2..=4);
            let dim = rng.gen_range(2..=6);
            let mut reps = Vec::with_capacity(n);
            let mut assignment = Vec::with_capacity(n);
            for i in 0..n {
                let c = if i < t { i } else { rng.gen_range(0..t) }; // every cluster non-empty
                let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                v[c % dim] += 3.0;
                reps.push(v);
                assignment.push(c);
            }
            let got = cluster_quality(&reps, &assignment).unwrap();
            let (sil, ch) = brute_force_quality(&reps, &assignment);
            assert_abs_diff_eq!(got.silhouette, sil, epsilon = 1e-10);
            assert_abs_diff_eq!(got.calinski_harabasz, ch, epsilon = 1e-7);
        }
    }

    #[test]
    fn hand_placed_planar_clusters_match_oracle() {
        let reps = vec![
            vec![1.0, 0.1],
            vec![0.9, 0.2],
            vec![1.1, 0.15],
            vec![-0.2, 1.0],
            vec![-0.1, 0.9],
            vec![-0.15, 1.2],
        ];
        let assignment = vec![0, 0, 0, 1, 1, 1];
        let got = cluster_quality(&reps, &assignment).unwrap();
        let (sil, ch) = brute_force_quality(&reps, &assignment);
        assert_abs_diff_eq!(got.silhouette, sil, epsilon = 1e-12);
        assert_abs_diff_eq!(got.calinski_harabasz, ch, epsilon = 1e-9);
        assert!(got.silhouette > 0.5);
    }

    #[test]
    fn identical_images_have_perfect_quality() {
        let mut img = Image::zeros(16, 16);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 10.0;
        }
        let q = reconstruction_quality(&img, &img).unwrap();
        assert!(q.psnr.is_infinite() && q.psnr > 0.0);
        assert_abs_diff_eq!(q.ssim, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let mut a = Image::zeros(16, 16);
        let mut b = Image::zeros(16, 16);
        for v in a.data.iter_mut() {
            *v = 0.4;
        }
        for v in b.data.iter_mut() {
            *v = 0.5;
        }
        let q = reconstruction_quality(&a, &b).unwrap();
        assert_abs_diff_eq!(q.psnr, 20.0, epsilon = 1e-9);
        assert!(q.ssim < 1.0);
    }

    #[test]
    fn reconstruction_rejects_bad_pairs() {
        let a = Image::zeros(16, 16);
        let b = Image::zeros(32, 32);
        assert!(matches!(reconstruction_quality(&a, &b), Err(EvalError::BadImage(_))));
        let c = Image::zeros(4, 4);
        assert!(matches!(reconstruction_quality(&c, &c), Err(EvalError::BadImage(_))));
        let mut d = Image::zeros(16, 16);
        d.data[0] = 1.25;
        assert!(matches!(reconstruction_quality(&d, &a), Err(EvalError::BadImage(_))));
    }

    #[test]
    fn ced_point_mass_steps_at_its_value() {
        let rows = ced_curve(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(rows.len(), 100);
        assert_eq!(rows[0], (0.0, 0.0));
        for (thr, frac) in &rows[..99] {
            assert!(*thr < 1.0 && *frac == 0.0);
        }
        assert_eq!(rows[99], (1.0, 1.0));
    }

    #[test]
    fn ced_matches_brute_force_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let errors: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..5.0)).collect();
        let rows = ced_curve(&errors).unwrap();
        let max = errors.iter().cloned().fold(0.0, f64::max);
        for (i, &(thr, frac)) in rows.iter().enumerate() {
            assert_abs_diff_eq!(thr, max * i as f64 / 99.0, epsilon = 1e-12);
            let count = errors.iter().filter(|&&e| e <= thr).count();
            assert_abs_diff_eq!(frac, count as f64 / 20.0, epsilon = 1e-15);
        }
        let last = rows.last().unwrap();
        assert_eq!(last.1, 1.0);
        // monotone non-decreasing
        for pair in rows.windows(2) {
            assert!(pair[1].1 >= pair[0].1);
        }
    }

    #[test]
    fn ced_rejects_empty_and_negative() {
        assert_eq!(ced_curve(&[]), Err(EvalError::EmptyInput));
        assert!(matches!(ced_curve(&[0.5, -0.1]), Err(EvalError::Mismatch(_))));
    }

    #[test]
    fn split_is_a_deterministic_partition_near_80_20() {
        let ids: Vec<u32> = (0..1000).collect();
        let s1 = split_train_test(&ids);
        let s2 = split_train_test(&ids);
        assert_eq!(s1, s2);
        assert_eq!(s1.train.len() + s1.test.len(), 1000);
        let mut all: Vec<usize> = s1.train.iter().chain(&s1.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<usize>>());
        let frac = s1.train.len() as f64 / 1000.0;
        assert!((0.75..0.85).contains(&frac), "train fraction {frac}");
    }

    #[test]
    fn normalize_points_scales_by_side() {
        let pts = vec![(32.0, 16.0), (64.0, 0.0)];
        assert_eq!(normalize_points(&pts, 64.0), vec![(0.5, 0.25), (1.0, 0.0)]);
    }

    #[test]
    fn untrained_checkpoint_evaluates_completely_and_deterministically() {
        use crate::config::SigmaMode;
        use crate::pipeline::{DetectorParams, NetConfig, ReconstructorParams};

        let net = NetConfig::desk(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let det = DetectorParams::init(&net, &mut rng);
        let rec = ReconstructorParams::init(&net, &mut rng);
        let ckpt = LoadedCheckpoint {
            det,
            rec,
            consistency: None,
            centroids: None,
            epoch: 0,
            k: net.k,
            kappa: 20,
            sigma_min: 0.2,
            sigma_max: 5.0,
            sigma_mode: SigmaMode::Adaptive,
            seed: 1,
            net,
        };
        let n = 48;
        let mut scene_rng = ChaCha8Rng::seed_from_u64(7);
        let mut images = Vec::with_capacity(n);
        let mut landmarks = Vec::with_capacity(n);
        for _ in 0..n {
            let (img, spec) = crate::synthdata::generate_scene(&mut scene_rng);
            images.push(img);
            landmarks.push(spec.landmarks);
        }
        let dataset =
            Dataset { images, landmarks, ids: (0..n as u32).collect(), seed: 7 };

        let m = evaluate_checkpoint(&ckpt, &dataset, None, 1).unwrap();
        assert_eq!(m.train_size + m.test_size, n);
        assert_eq!(m.per_image_nme.len(), m.test_size);
        for v in [m.forward_nme, m.backward_nme, m.stability_mean, m.psnr, m.ssim] {
            assert!(v.is_finite(), "{m:?}");
        }
        assert!(m.stability_mean >= 0.0);
        assert!(m.per_image_nme.iter().all(|e| e.is_finite() && *e >= 0.0));

        let again = evaluate_checkpoint(&ckpt, &dataset, None, 1).unwrap();
        assert_eq!(m, again);

        // limiting the dataset shrinks the splits accordingly
        let small = evaluate_checkpoint(&ckpt, &dataset, Some(32), 1).unwrap();
        assert_eq!(small.train_size + small.test_size, 32);
    }
}
