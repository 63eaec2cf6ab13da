//! The consistency-guided bottleneck.
//!
//! Raw detector maps are renormalized per map to probability distributions,
//! condensed to continuous landmark coordinates by spatial expectation, and
//! re-rendered as Gaussian heatmaps whose per-landmark spread sigma_k is
//! modulated by the landmark's consistency d: raw value 1/exp(d), affinely
//! mapped onto [sigma_min, sigma_max] so d = 1 gives the tightest and d = -1
//! the widest Gaussian.
//!
//! Coordinate convention, fixed globally: x runs along the width, y along the
//! height, origin at the center of pixel (0, 0). All operations here are
//! built on [`crate::graph`] ops, so the same code path is differentiable in
//! training and reusable as a plain function (the array wrappers just build a
//! throwaway graph and evaluate it).

use crate::graph::{Graph, GraphError, NodeId};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BottleneckError {
    #[error("expected a {expected:?} stack, got {got:?}")]
    WrongKind { expected: HeatmapKind, got: HeatmapKind },
    #[error("stack data length {got}, shape wants {want}")]
    DataLength { got: usize, want: usize },
    #[error("sigma range invalid: sigma_min {smin} (must be > 0) < sigma_max {smax}")]
    SigmaRange { smin: f64, smax: f64 },
    #[error("landmark {k} at ({x}, {y}) is outside the {h}x{w} lattice")]
    OutOfLattice { k: usize, x: f64, y: f64, h: usize, w: usize },
    #[error("landmark arity mismatch: {0} coords vs {1} sigmas")]
    Arity(usize, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    RawScore,
    Probability,
    Rendered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub kind: HeatmapKind,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl HeatmapStack {
    pub fn new(
        kind: HeatmapKind,
        k: usize,
        h: usize,
        w: usize,
        data: Vec<f64>,
    ) -> Result<Self, BottleneckError> {
        if data.len() != k * h * w {
            return Err(BottleneckError::DataLength { got: data.len(), want: k * h * w });
        }
        Ok(HeatmapStack { kind, k, h, w, data })
    }

    pub fn map(&self, k: usize) -> &[f64] {
        &self.data[k * self.h * self.w..(k + 1) * self.h * self.w]
    }
}

/// K continuous landmark coordinates with per-landmark sigma and consistency.
/// Consistency is `None` until the first pseudo-supervision refresh.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub coords: Vec<(f64, f64)>,
    pub sigma: Vec<f64>,
    pub consistency: Vec<Option<f64>>,
}

impl LandmarkSet {
    pub fn k(&self) -> usize {
        self.coords.len()
    }
}

pub const DEFAULT_SIGMA_MIN: f64 = 0.2;
pub const DEFAULT_SIGMA_MAX: f64 = 5.0;

/// Sigma assigned before any consistency is known: the range midpoint.
pub fn sigma_default(sigma_min: f64, sigma_max: f64) -> f64 {
    (sigma_min + sigma_max) / 2.0
}

// ---- graph builders ----

/// Spatial expectation of a probability stack: nodes for the per-map expected
/// x and y coordinates, composed from constant coordinate grids.
pub fn softargmax_nodes(g: &mut Graph, prob: NodeId) -> Result<(NodeId, NodeId), GraphError> {
    let shape = g.shape(prob).to_vec();
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let mut gx = vec![0.0; k * h * w];
    let mut gy = vec![0.0; k * h * w];
    for map in 0..k {
        for y in 0..h {
            for x in 0..w {
                gx[(map * h + y) * w + x] = x as f64;
                gy[(map * h + y) * w + x] = y as f64;
            }
        }
    }
    let gxc = g.constant(&shape, gx)?;
    let gyc = g.constant(&shape, gy)?;
    let px = g.mul(prob, gxc)?;
    let py = g.mul(prob, gyc)?;
    let xs = g.sum_axes(px, &[1, 2])?;
    let ys = g.sum_axes(py, &[1, 2])?;
    Ok((xs, ys))
}

// ---- plain operations ----

fn eval_stack(
    mut g: Graph,
    node: NodeId,
    kind: HeatmapKind,
    k: usize,
    h: usize,
    w: usize,
) -> Result<HeatmapStack, BottleneckError> {
    g.eval_forward()?;
    HeatmapStack::new(kind, k, h, w, g.value(node)?.to_vec())
}

/// Renormalize each raw map to a probability distribution over the lattice.
pub fn spatial_softmax(raw: &HeatmapStack) -> Result<HeatmapStack, BottleneckError> {
    if raw.kind != HeatmapKind::RawScore {
        return Err(BottleneckError::WrongKind { expected: HeatmapKind::RawScore, got: raw.kind });
    }
    let mut g = Graph::new();
    let x = g.constant(&[raw.k, raw.h, raw.w], raw.data.clone())?;
    let s = g.spatial_softmax(x)?;
    eval_stack(g, s, HeatmapKind::Probability, raw.k, raw.h, raw.w)
}

/// Per-map expected coordinate of a probability stack.
pub fn softargmax(prob: &HeatmapStack) -> Result<Vec<(f64, f64)>, BottleneckError> {
    if prob.kind != HeatmapKind::Probability {
        return Err(BottleneckError::WrongKind {
            expected: HeatmapKind::Probability,
            got: prob.kind,
        });
    }
    let mut g = Graph::new();
    let x = g.constant(&[prob.k, prob.h, prob.w], prob.data.clone())?;
    let (xs, ys) = softargmax_nodes(&mut g, x)?;
    g.eval_forward()?;
    let xv = g.value(xs)?.to_vec();
    let yv = g.value(ys)?;
    Ok(xv.iter().zip(yv).map(|(&x, &y)| (x, y)).collect())
}

/// Map consistency to sigma: raw value r = 1/exp(d), then affine onto
/// [sigma_min, sigma_max]. Strictly monotone decreasing in d; missing
/// consistencies (pre-pseudo-supervision) get the range midpoint.
pub fn modulate_sigma(
    d: &[Option<f64>],
    sigma_min: f64,
    sigma_max: f64,
) -> Result<Vec<f64>, BottleneckError> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(BottleneckError::SigmaRange { smin: sigma_min, smax: sigma_max });
    }
    let e = std::f64::consts::E;
    let span = e - 1.0 / e;
    Ok(d.iter()
        .map(|d| match d {
            Some(d) => {
                let r = (-d.clamp(-1.0, 1.0)).exp();
                sigma_min + (sigma_max - sigma_min) * (r - 1.0 / e) / span
            }
            None => sigma_default(sigma_min, sigma_max),
        })
        .collect())
}

fn render_with_sigmas(
    landmarks: &LandmarkSet,
    sigmas: &[f64],
    h: usize,
    w: usize,
) -> Result<HeatmapStack, BottleneckError> {
    let k = landmarks.k();
    if sigmas.len() != k {
        return Err(BottleneckError::Arity(k, sigmas.len()));
    }
    for (i, &(x, y)) in landmarks.coords.iter().enumerate() {
        if !(0.0..=(w - 1) as f64).contains(&x) || !(0.0..=(h - 1) as f64).contains(&y) {
            return Err(BottleneckError::OutOfLattice { k: i, x, y, h, w });
        }
    }
    let mut g = Graph::new();
    let xs: Vec<f64> = landmarks.coords.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = landmarks.coords.iter().map(|c| c.1).collect();
    let xn = g.constant(&[k], xs)?;
    let yn = g.constant(&[k], ys)?;
    let r = g.gaussian_render(xn, yn, h, w, sigmas)?;
    eval_stack(g, r, HeatmapKind::Rendered, k, h, w)
}

/// Gaussian heatmaps centered on the landmarks, spread by their own sigmas.
pub fn render_adaptive_heatmaps(
    landmarks: &LandmarkSet,
    h: usize,
    w: usize,
) -> Result<HeatmapStack, BottleneckError> {
    render_with_sigmas(landmarks, &landmarks.sigma, h, w)
}

/// Ablation baseline: one constant sigma for every landmark.
pub fn fixed_sigma_render(
    landmarks: &LandmarkSet,
    sigma_const: f64,
    h: usize,
    w: usize,
) -> Result<HeatmapStack, BottleneckError> {
    if !(sigma_const > 0.0) {
        return Err(BottleneckError::SigmaRange { smin: sigma_const, smax: sigma_const });
    }
    render_with_sigmas(landmarks, &vec![sigma_const; landmarks.k()], h, w)
}

/// Ablation baseline: per-landmark sigma drawn uniformly from `range`.
pub fn random_sigma_render(
    landmarks: &LandmarkSet,
    rng: &mut impl rand::Rng,
    range: (f64, f64),
    h: usize,
    w: usize,
) -> Result<HeatmapStack, BottleneckError> {
    let (lo, hi) = range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(BottleneckError::SigmaRange { smin: lo, smax: hi });
    }
    let sigmas: Vec<f64> =
        (0..landmarks.k()).map(|_| if lo == hi { lo } else { rng.gen_range(lo..hi) }).collect();
    render_with_sigmas(landmarks, &sigmas, h, w)
}

// ---- exports ----

/// One heatmap as binary PGM (P5), values clamped to [0, 1] and scaled by 255.
pub fn write_pgm(map: &[f64], h: usize, w: usize, path: &Path) -> Result<(), BottleneckError> {
    if map.len() != h * w {
        return Err(BottleneckError::DataLength { got: map.len(), want: h * w });
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> =
        map.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// LandmarkSet as CSV: columns k, x, y, sigma, d (missing d written as nan).
pub fn write_landmarks_csv(landmarks: &LandmarkSet, path: &Path) -> Result<(), BottleneckError> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "k,x,y,sigma,d")?;
    for i in 0..landmarks.k() {
        let (x, y) = landmarks.coords[i];
        let d = landmarks.consistency[i].map_or("nan".to_string(), |d| d.to_string());
        writeln!(f, "{i},{x},{y},{},{d}", landmarks.sigma[i])?;
    }
    f.flush()?;
    Ok(())
}
