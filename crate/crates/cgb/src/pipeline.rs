//! End-to-end training: detector, bottleneck, reconstructor, and the
//! pseudo-supervision refresh schedule.
//!
//! A convolutional detector turns a 64x64 RGB image into K raw heatmaps at
//! 16x16 plus a 32-channel feature stack. The bottleneck condenses each
//! heatmap to a point (spatial softmax, softargmax) and re-renders it as a
//! Gaussian whose sigma is modulated by the landmark's consistency. The
//! reconstructor rebuilds the original image from its deformed version plus
//! the rendered heatmaps; the pixel L2 reconstruction error trains both
//! networks jointly through one Adam instance. Every PS_update epochs the
//! pseudo-supervision model (clusters over pooled landmark representations)
//! is refreshed and the per-landmark consistency cache with it.

use crate::adam::{adam_step, AdamError, AdamState, DEFAULT_BETAS, DEFAULT_EPS};
use crate::bottleneck::{
    self, sigma_default, softargmax_nodes, BottleneckError, HeatmapKind, HeatmapStack,
};
use crate::checkpoint::{self, tensor_u64, u64_tensor, CheckpointError};
use crate::config::{Config, ConfigError, SigmaMode};
use crate::correspondence::{
    self, build_knn_graph, extract_clusters, extract_representations, gcn_confidence,
    synthetic_labeled_graphs, train_confidence_gcn, ClusterModel, CorrespondenceError, GcnParams,
    LandmarkRep,
};
use crate::graph::{GradCheckReport, Graph, GraphError, NodeId};
use crate::seeds;
use crate::synthdata::{self, Image, SynthError};
use crate::tensor::Tensor;
use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("bad transform: {0}")]
    BadTransform(String),
    #[error("bad deformation ranges: {0}")]
    BadRanges(String),
    #[error("batch of {got} images, train state expects {want}")]
    BatchSize { got: usize, want: usize },
    #[error("non-finite loss at epoch {epoch} step {step} (diagnostics: {dump:?})")]
    NonFiniteLoss { epoch: usize, step: u64, dump: Option<PathBuf> },
    #[error("dataset of {got} images is smaller than one batch of {want}")]
    SmallDataset { got: usize, want: usize },
    #[error("representation landmark index {got} out of range for K = {k}")]
    BadRep { got: usize, k: usize },
    #[error("checkpoint missing field {0}")]
    CkptField(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Bottleneck(#[from] BottleneckError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Two stride-2 stages separate image and heatmap lattices.
pub const HEATMAP_FACTOR: f64 = 4.0;
/// Center of the 4x4 image cell a heatmap pixel covers.
pub const HEATMAP_OFFSET: f64 = 1.5;

pub fn heatmap_to_image(c: f64) -> f64 {
    HEATMAP_FACTOR * c + HEATMAP_OFFSET
}

/// Images sampled per pseudo-supervision refresh (capped by the dataset).
pub const PS_SAMPLE: usize = 512;
/// Confidence-GCN pre-training: graphs, vertices per graph, epochs, lr.
pub const GCN_TRAIN_GRAPHS: usize = 50;
pub const GCN_TRAIN_VERTICES: usize = 256;
pub const GCN_TRAIN_EPOCHS: usize = 120;
pub const GCN_TRAIN_LR: f64 = 1e-2;

// ---- network geometry ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub img: usize,
    pub k: usize,
    /// Feature channels pooled into landmark representations.
    pub d: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub rc1: usize,
    pub rc2: usize,
    pub res_blocks: usize,
}

impl NetConfig {
    pub fn desk(k: usize) -> Self {
        NetConfig { img: 64, k, d: 32, c1: 8, c2: 16, c3: 24, rc1: 8, rc2: 4, res_blocks: 2 }
    }

    /// Small enough for exhaustive finite-difference checking.
    pub fn reduced() -> Self {
        NetConfig { img: 16, k: 2, d: 4, c1: 3, c2: 4, c3: 5, rc1: 4, rc2: 3, res_blocks: 1 }
    }

    pub fn hm(&self) -> usize {
        self.img / 4
    }

    /// Residual-block width: downsampled channels plus concatenated heatmaps.
    pub fn res_ch(&self) -> usize {
        self.rc2 + self.k
    }
}

// ---- parameters ----

fn conv_w(co: usize, ci: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    Tensor::randn(&[co, ci, k, k], std, rng).with_grad()
}

fn convt_w(ci: usize, co: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    Tensor::randn(&[ci, co, k, k], std, rng).with_grad()
}

fn bias(co: usize) -> Tensor {
    Tensor::zeros(&[co]).with_grad()
}

/// Extra gain on the heatmap head at init. He-scaled logits start near zero,
/// which makes the spatial softmax near-uniform; pooling features under a
/// near-uniform map collapses every landmark representation toward the
/// global feature mean, and the consistency signal starts pinned at its
/// ceiling instead of growing as detections organize. The gain starts the
/// detector sharp at arbitrary locations (initial prob entropy around 2
/// nats on the 16x16 lattice) without touching the trunk scale.
const HEAD_GAIN: f64 = 10.0;

/// Convolutional encoder: three conv stages (stride 2, 2, 1), then a 3x3
/// heatmap head and a 1x1 feature head off the shared trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub net: NetConfig,
    /// w1, b1, w2, b2, w3, b3, wh, bh, wf, bf
    pub tensors: Vec<Tensor>,
}

impl DetectorParams {
    pub fn init(net: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut tensors = vec![
            conv_w(net.c1, 3, 3, rng),
            bias(net.c1),
            conv_w(net.c2, net.c1, 3, rng),
            bias(net.c2),
            conv_w(net.c3, net.c2, 3, rng),
            bias(net.c3),
            conv_w(net.k, net.c3, 3, rng),
            bias(net.k),
            conv_w(net.d, net.c3, 1, rng),
            bias(net.d),
        ];
        for v in &mut tensors[6].data {
            *v *= HEAD_GAIN;
        }
        DetectorParams { net: net.clone(), tensors }
    }

    pub fn names() -> Vec<String> {
        ["w1", "b1", "w2", "b2", "w3", "b3", "wh", "bh", "wf", "bf"]
            .iter()
            .map(|n| format!("det.{n}"))
            .collect()
    }

    fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    /// Wire the detector topology onto existing parameter leaves; returns
    /// (raw heatmaps, feature stack).
    fn wire(&self, g: &mut Graph, y: NodeId, lv: &[NodeId]) -> Result<(NodeId, NodeId), GraphError> {
        let h1 = g.conv2d(y, lv[0], lv[1], 2, 1)?;
        let h1 = g.relu(h1)?;
        let h2 = g.conv2d(h1, lv[2], lv[3], 2, 1)?;
        let h2 = g.relu(h2)?;
        let h3 = g.conv2d(h2, lv[4], lv[5], 1, 1)?;
        let h3 = g.relu(h3)?;
        let raw = g.conv2d(h3, lv[6], lv[7], 1, 1)?;
        let feat = g.conv2d(h3, lv[8], lv[9], 1, 0)?;
        Ok((raw, feat))
    }
}

/// Decoder: two stride-2 convolutions over the deformed image, heatmap
/// concatenation, residual blocks, two transposed convolutions back to RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructorParams {
    pub net: NetConfig,
    /// w1, b1, w2, b2, res{i}.{w1, b1, w2, b2}..., t1, tb1, t2, tb2
    pub tensors: Vec<Tensor>,
}

impl ReconstructorParams {
    pub fn init(net: &NetConfig, rng: &mut impl Rng) -> Self {
        let rc = net.res_ch();
        let mut tensors = vec![
            conv_w(net.rc1, 3, 4, rng),
            bias(net.rc1),
            conv_w(net.rc2, net.rc1, 4, rng),
            bias(net.rc2),
        ];
        for _ in 0..net.res_blocks {
            tensors.push(conv_w(rc, rc, 3, rng));
            tensors.push(bias(rc));
            tensors.push(conv_w(rc, rc, 3, rng));
            tensors.push(bias(rc));
        }
        tensors.push(convt_w(rc, net.rc1, 4, rng));
        tensors.push(bias(net.rc1));
        tensors.push(convt_w(net.rc1, 3, 4, rng));
        tensors.push(bias(3));
        ReconstructorParams { net: net.clone(), tensors }
    }

    pub fn names(net: &NetConfig) -> Vec<String> {
        let mut v: Vec<String> =
            ["rec.w1", "rec.b1", "rec.w2", "rec.b2"].iter().map(|s| s.to_string()).collect();
        for i in 0..net.res_blocks {
            for n in ["w1", "b1", "w2", "b2"] {
                v.push(format!("rec.res{i}.{n}"));
            }
        }
        v.extend(["rec.t1", "rec.tb1", "rec.t2", "rec.tb2"].iter().map(|s| s.to_string()));
        v
    }

    fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    fn wire(
        &self,
        g: &mut Graph,
        yw: NodeId,
        rendered: NodeId,
        lv: &[NodeId],
    ) -> Result<NodeId, GraphError> {
        let d1 = g.conv2d(yw, lv[0], lv[1], 2, 1)?;
        let d1 = g.relu(d1)?;
        let d2 = g.conv2d(d1, lv[2], lv[3], 2, 1)?;
        let d2 = g.relu(d2)?;
        let mut x = g.concat_ch(d2, rendered)?;
        let mut idx = 4;
        for _ in 0..self.net.res_blocks {
            let h = g.conv2d(x, lv[idx], lv[idx + 1], 1, 1)?;
            let h = g.relu(h)?;
            let h = g.conv2d(h, lv[idx + 2], lv[idx + 3], 1, 1)?;
            let s = g.add(x, h)?;
            x = g.relu(s)?;
            idx += 4;
        }
        let u1 = g.conv_t2d(x, lv[idx], lv[idx + 1], 2, 1)?;
        let u1 = g.relu(u1)?;
        g.conv_t2d(u1, lv[idx + 2], lv[idx + 3], 2, 1)
    }
}

// ---- detector inference ----

fn validate_image(img: &Image, side: usize) -> Result<(), PipelineError> {
    if img.h != side || img.w != side || img.data.len() != 3 * side * side {
        return Err(PipelineError::BadImage(format!(
            "expected 3x{side}x{side}, got 3x{}x{}",
            img.h, img.w
        )));
    }
    if !img.data.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(PipelineError::BadImage("pixel values outside [0, 1]".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DetectOutput {
    pub raw: HeatmapStack,
    pub prob: HeatmapStack,
    /// `[D, hm, hm]` flattened.
    pub features: Vec<f64>,
    /// Softargmax coordinates on the heatmap lattice.
    pub coords_hm: Vec<(f64, f64)>,
    /// The same points in image pixels.
    pub coords_img: Vec<(f64, f64)>,
}

/// Persistent detector graph; re-point the image leaf instead of rebuilding.
pub struct DetectGraph {
    g: Graph,
    y: NodeId,
    leaves: Vec<NodeId>,
    raw: NodeId,
    prob: NodeId,
    feat: NodeId,
    xs: NodeId,
    ys: NodeId,
    net: NetConfig,
}

impl DetectGraph {
    pub fn new(det: &DetectorParams) -> Result<Self, PipelineError> {
        let net = det.net.clone();
        let mut g = Graph::new();
        let y = g.leaf(&Tensor::zeros(&[3, net.img, net.img]));
        let leaves = det.leaves(&mut g);
        let (raw, feat) = det.wire(&mut g, y, &leaves)?;
        let prob = g.spatial_softmax(raw)?;
        let (xs, ys) = softargmax_nodes(&mut g, prob)?;
        Ok(DetectGraph { g, y, leaves, raw, prob, feat, xs, ys, net })
    }

    pub fn set_params(&mut self, det: &DetectorParams) -> Result<(), PipelineError> {
        for (&id, t) in self.leaves.iter().zip(&det.tensors) {
            self.g.set_leaf(id, &t.data)?;
        }
        Ok(())
    }

    pub fn run(&mut self, img: &Image) -> Result<DetectOutput, PipelineError> {
        validate_image(img, self.net.img)?;
        self.g.set_leaf(self.y, &img.data)?;
        self.g.eval_forward()?;
        let hm = self.net.hm();
        let raw = HeatmapStack::new(
            HeatmapKind::RawScore,
            self.net.k,
            hm,
            hm,
            self.g.value(self.raw)?.to_vec(),
        )?;
        let prob = HeatmapStack::new(
            HeatmapKind::Probability,
            self.net.k,
            hm,
            hm,
            self.g.value(self.prob)?.to_vec(),
        )?;
        let features = self.g.value(self.feat)?.to_vec();
        let xs = self.g.value(self.xs)?;
        let ys = self.g.value(self.ys)?;
        let coords_hm: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(&x, &y)| (x, y)).collect();
        let coords_img = coords_hm
            .iter()
            .map(|&(x, y)| (heatmap_to_image(x), heatmap_to_image(y)))
            .collect();
        Ok(DetectOutput { raw, prob, features, coords_hm, coords_img })
    }
}

/// One-shot detector forward pass (builds a throwaway graph).
pub fn detect(img: &Image, det: &DetectorParams) -> Result<DetectOutput, PipelineError> {
    DetectGraph::new(det)?.run(img)
}

/// Inference-time reconstruction: detect on `y`, render the landmarks with
/// the given sigmas, and rebuild from the deformed view `yw`. The output is
/// clamped to the unit pixel range.
pub fn reconstruct(
    y: &Image,
    yw: &Image,
    det: &DetectorParams,
    rec: &ReconstructorParams,
    sigmas: &[f64],
) -> Result<(Image, DetectOutput), PipelineError> {
    let net = &det.net;
    validate_image(y, net.img)?;
    validate_image(yw, net.img)?;
    let mut g = Graph::new();
    let y_id = g.leaf(&Tensor::new(vec![3, net.img, net.img], y.data.clone()).expect("validated"));
    let yw_id =
        g.leaf(&Tensor::new(vec![3, net.img, net.img], yw.data.clone()).expect("validated"));
    let det_leaves = det.leaves(&mut g);
    let rec_leaves = rec.leaves(&mut g);
    let (raw, feat) = det.wire(&mut g, y_id, &det_leaves)?;
    let prob = g.spatial_softmax(raw)?;
    let (xs, ys) = softargmax_nodes(&mut g, prob)?;
    let hm = net.hm();
    let rendered = g.gaussian_render(xs, ys, hm, hm, sigmas)?;
    let yhat = rec.wire(&mut g, yw_id, rendered, &rec_leaves)?;
    g.eval_forward()?;
    let mut out = Image::zeros(net.img, net.img);
    for (slot, &v) in out.data.iter_mut().zip(g.value(yhat)?) {
        *slot = v.clamp(0.0, 1.0);
    }
    let raw_stack =
        HeatmapStack::new(HeatmapKind::RawScore, net.k, hm, hm, g.value(raw)?.to_vec())?;
    let prob_stack =
        HeatmapStack::new(HeatmapKind::Probability, net.k, hm, hm, g.value(prob)?.to_vec())?;
    let features = g.value(feat)?.to_vec();
    let coords_hm: Vec<(f64, f64)> =
        g.value(xs)?.iter().zip(g.value(ys)?).map(|(&x, &y)| (x, y)).collect();
    let coords_img =
        coords_hm.iter().map(|&(x, y)| (heatmap_to_image(x), heatmap_to_image(y))).collect();
    Ok((
        out,
        DetectOutput { raw: raw_stack, prob: prob_stack, features, coords_hm, coords_img },
    ))
}

// ---- similarity transforms ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform =
        SimilarityTransform { scale: 1.0, theta: 0.0, tx: 0.0, ty: 0.0 };

    pub fn new(scale: f64, theta: f64, tx: f64, ty: f64) -> Result<Self, PipelineError> {
        if !(scale > 0.0 && scale.is_finite() && theta.is_finite() && tx.is_finite() && ty.is_finite())
        {
            return Err(PipelineError::BadTransform(format!(
                "scale {scale}, theta {theta}, t ({tx}, {ty})"
            )));
        }
        Ok(SimilarityTransform { scale, theta, tx, ty })
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let (c, s) = ((-self.theta).cos(), (-self.theta).sin());
        let inv = 1.0 / self.scale;
        SimilarityTransform {
            scale: inv,
            theta: -self.theta,
            tx: -inv * (c * self.tx - s * self.ty),
            ty: -inv * (s * self.tx + c * self.ty),
        }
    }

    /// `p' = s R (p - pivot) + pivot + t`
    pub fn apply_point(&self, p: (f64, f64), pivot: (f64, f64)) -> (f64, f64) {
        let (dx, dy) = (p.0 - pivot.0, p.1 - pivot.1);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        (
            pivot.0 + self.tx + self.scale * (c * dx - s * dy),
            pivot.1 + self.ty + self.scale * (s * dx + c * dy),
        )
    }
}

/// Center-of-frame pivot shared by image warps and point transforms.
pub fn pivot(h: usize, w: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

pub fn apply_to_points(
    pts: &[(f64, f64)],
    a: &SimilarityTransform,
    side: usize,
) -> Vec<(f64, f64)> {
    let piv = pivot(side, side);
    pts.iter().map(|&p| a.apply_point(p, piv)).collect()
}

fn bilinear(img: &Image, c: usize, x: f64, y: f64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (fx, fy) = (x - xf, y - yf);
    let (x0, y0) = (xf as isize, yf as isize);
    let sample = |xx: isize, yy: isize| -> f64 {
        if xx < 0 || yy < 0 || xx >= img.w as isize || yy >= img.h as isize {
            0.0
        } else {
            img.at(c, yy as usize, xx as usize)
        }
    };
    sample(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + sample(x0 + 1, y0) * fx * (1.0 - fy)
        + sample(x0, y0 + 1) * (1.0 - fx) * fy
        + sample(x0 + 1, y0 + 1) * fx * fy
}

/// Inverse-mapping bilinear warp; out-of-frame samples are zero.
pub fn apply_transform(img: &Image, a: &SimilarityTransform) -> Image {
    let inv = a.inverse();
    let piv = pivot(img.h, img.w);
    let mut out = Image::zeros(img.h, img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            let (sx, sy) = inv.apply_point((x as f64, y as f64), piv);
            for c in 0..3 {
                *out.at_mut(c, y, x) = bilinear(img, c, sx, sy);
            }
        }
    }
    out
}

// ---- deformation sampling ----

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationRanges {
    pub scale: (f64, f64),
    pub theta: (f64, f64),
    /// Max |tx|, |ty| in pixels.
    pub trans: f64,
}

impl Default for DeformationRanges {
    fn default() -> Self {
        DeformationRanges {
            scale: (0.8, 1.2),
            theta: (-30.0f64.to_radians(), 30.0f64.to_radians()),
            trans: 6.4,
        }
    }
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_deformation(
    rng: &mut impl Rng,
    r: &DeformationRanges,
) -> Result<SimilarityTransform, PipelineError> {
    if !(r.scale.0 > 0.0 && r.scale.0 <= r.scale.1 && r.theta.0 <= r.theta.1 && r.trans >= 0.0) {
        return Err(PipelineError::BadRanges(format!("{r:?}")));
    }
    let scale = draw(rng, r.scale.0, r.scale.1);
    let theta = draw(rng, r.theta.0, r.theta.1);
    let tx = draw(rng, -r.trans, r.trans);
    let ty = draw(rng, -r.trans, r.trans);
    SimilarityTransform::new(scale, theta, tx, ty)
}

// ---- training graph ----

/// One graph holding the whole batch: shared parameter leaves, per-image
/// subgraphs, terminal mean loss. Reused across all steps of a run.
struct BatchGraph {
    g: Graph,
    y: Vec<NodeId>,
    yw: Vec<NodeId>,
    render: Vec<NodeId>,
    yhat: Vec<NodeId>,
    det_leaves: Vec<NodeId>,
    rec_leaves: Vec<NodeId>,
}

impl BatchGraph {
    fn build(
        net: &NetConfig,
        det: &DetectorParams,
        rec: &ReconstructorParams,
        batch: usize,
        sigma0: f64,
    ) -> Result<Self, PipelineError> {
        let mut g = Graph::new();
        let det_leaves = det.leaves(&mut g);
        let rec_leaves = rec.leaves(&mut g);
        let hm = net.hm();
        let zero_img = Tensor::zeros(&[3, net.img, net.img]);
        let (mut y, mut yw, mut render, mut yhat) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut losses = Vec::new();
        for _ in 0..batch {
            let yi = g.leaf(&zero_img);
            let ywi = g.leaf(&zero_img);
            let (raw, _feat) = det.wire(&mut g, yi, &det_leaves)?;
            let prob = g.spatial_softmax(raw)?;
            let (xs, ys) = softargmax_nodes(&mut g, prob)?;
            let rendered = g.gaussian_render(xs, ys, hm, hm, &vec![sigma0; net.k])?;
            let yh = rec.wire(&mut g, ywi, rendered, &rec_leaves)?;
            let diff = g.sub(yh, yi)?;
            let sq = g.mul(diff, diff)?;
            losses.push(g.mean(sq)?);
            y.push(yi);
            yw.push(ywi);
            render.push(rendered);
            yhat.push(yh);
        }
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = g.add(acc, l)?;
        }
        g.scale(acc, 1.0 / batch as f64)?;
        Ok(BatchGraph { g, y, yw, render, yhat, det_leaves, rec_leaves })
    }
}

// ---- train state ----

pub struct TrainState {
    pub cfg: Config,
    pub net: NetConfig,
    pub det: DetectorParams,
    pub rec: ReconstructorParams,
    pub adam: AdamState,
    /// Trained lazily on synthetic labeled graphs; used by PS refreshes.
    pub gcn: Option<GcnParams>,
    pub epoch: usize,
    pub step: u64,
    pub cluster: Option<ClusterModel>,
    /// Per-landmark mean consistency, length K once present.
    pub consistency: Option<Vec<f64>>,
    pub deform_rng: ChaCha8Rng,
    pub sigma_rng: ChaCha8Rng,
    pub ps_rng: ChaCha8Rng,
    /// Where non-finite-loss diagnostics land.
    pub dump_dir: Option<PathBuf>,
    batch_graph: BatchGraph,
    detect_graph: DetectGraph,
    detect_dirty: bool,
}

impl TrainState {
    pub fn new(cfg: &Config) -> Result<Self, PipelineError> {
        Self::with_net(cfg, NetConfig::desk(cfg.k))
    }

    pub fn with_net(cfg: &Config, net: NetConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if net.k != cfg.k {
            return Err(PipelineError::BadConfig(format!(
                "net K {} != config K {}",
                net.k, cfg.k
            )));
        }
        let mut init_rng = seeds::stream(cfg.seed, seeds::PARAM_INIT);
        let det = DetectorParams::init(&net, &mut init_rng);
        let rec = ReconstructorParams::init(&net, &mut init_rng);
        let all: Vec<Tensor> = det.tensors.iter().chain(&rec.tensors).cloned().collect();
        let adam = AdamState::new(&all);
        let sigma0 = sigma_default(cfg.sigma_min, cfg.sigma_max);
        let batch_graph = BatchGraph::build(&net, &det, &rec, cfg.batch, sigma0)?;
        let detect_graph = DetectGraph::new(&det)?;
        Ok(TrainState {
            cfg: cfg.clone(),
            net,
            det,
            rec,
            adam,
            gcn: None,
            epoch: 0,
            step: 0,
            cluster: None,
            consistency: None,
            deform_rng: seeds::stream(cfg.seed, seeds::DEFORMATION),
            sigma_rng: seeds::stream(cfg.seed, seeds::SIGMA_RANDOM),
            ps_rng: seeds::stream(cfg.seed, seeds::PS_SAMPLING),
            dump_dir: None,
            batch_graph,
            detect_graph,
            detect_dirty: false,
        })
    }

    /// Train the confidence GCN once per run (deterministic per seed).
    pub fn ensure_gcn(&mut self) -> Result<(), PipelineError> {
        if self.gcn.is_some() {
            return Ok(());
        }
        self.gcn = Some(train_default_gcn(self.cfg.seed, self.net.d, self.cfg.kappa)?);
        Ok(())
    }

    fn sync_detect(&mut self) -> Result<(), PipelineError> {
        if self.detect_dirty {
            self.detect_graph.set_params(&self.det)?;
            self.detect_dirty = false;
        }
        Ok(())
    }

    /// Detector over the current parameters (kept in sync after steps).
    pub fn detector(&mut self) -> Result<&mut DetectGraph, PipelineError> {
        self.sync_detect()?;
        Ok(&mut self.detect_graph)
    }
}

/// Confidence-GCN training on synthetic labeled graphs, deterministic per
/// seed. The same recipe serves the training loop and standalone clustering.
pub fn train_default_gcn(seed: u64, d: usize, kappa: usize) -> Result<GcnParams, PipelineError> {
    let mut rng = seeds::stream(seed, seeds::GCN_TRAIN);
    let kappa = kappa.min(GCN_TRAIN_VERTICES - 1);
    let graphs = synthetic_labeled_graphs(GCN_TRAIN_GRAPHS, GCN_TRAIN_VERTICES, d, kappa, &mut rng);
    let trained = train_confidence_gcn(&graphs, GCN_TRAIN_EPOCHS, GCN_TRAIN_LR, &mut rng)?;
    Ok(trained.params)
}

/// Sigma vector for a step, or None when each image draws its own
/// (random mode). Fixed mode never consumes the consistency cache.
fn step_sigmas(
    mode: SigmaMode,
    cache: Option<&[f64]>,
    sigma_min: f64,
    sigma_max: f64,
    k: usize,
) -> Result<Option<Vec<f64>>, PipelineError> {
    let default = || vec![sigma_default(sigma_min, sigma_max); k];
    Ok(match mode {
        SigmaMode::Adaptive => Some(match cache {
            Some(c) if sigma_min < sigma_max => {
                let opt: Vec<Option<f64>> = c.iter().copied().map(Some).collect();
                bottleneck::modulate_sigma(&opt, sigma_min, sigma_max)?
            }
            _ => default(),
        }),
        SigmaMode::Fixed => Some(default()),
        SigmaMode::Random => None,
    })
}

fn dump_batch(state: &TrainState, images: &[&Image], loss: f64) -> Option<PathBuf> {
    let dir = state.dump_dir.as_ref()?;
    let path = dir.join(format!("nonfinite_epoch{}_step{}", state.epoch, state.step));
    fs::create_dir_all(&path).ok()?;
    for (i, img) in images.iter().enumerate() {
        let _ = synthdata::write_ppm(&path.join(format!("batch_{i:02}.ppm")), img);
    }
    let _ = fs::write(
        path.join("note.txt"),
        format!("non-finite loss {loss} at epoch {} step {}\n", state.epoch, state.step),
    );
    Some(path)
}

/// What one optimization step saw before its parameter update: the batch
/// loss and the batch-mean reconstruction quality of the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// One optimization step over a full batch: deform, detect on the original,
/// render adaptively, reconstruct from the deformed image, joint Adam update.
pub fn train_step(state: &mut TrainState, images: &[&Image]) -> Result<StepStats, PipelineError> {
    if images.len() != state.cfg.batch {
        return Err(PipelineError::BatchSize { got: images.len(), want: state.cfg.batch });
    }
    let k = state.net.k;
    let shared = step_sigmas(
        state.cfg.sigma_mode,
        state.consistency.as_deref(),
        state.cfg.sigma_min,
        state.cfg.sigma_max,
        k,
    )?;
    for (i, img) in images.iter().enumerate() {
        validate_image(img, state.net.img)?;
        let a = sample_deformation(&mut state.deform_rng, &DeformationRanges::default())?;
        let warped = apply_transform(img, &a);
        let sig = match &shared {
            Some(s) => s.clone(),
            None => {
                let (lo, hi) = (state.cfg.sigma_min, state.cfg.sigma_max);
                (0..k).map(|_| draw(&mut state.sigma_rng, lo, hi)).collect()
            }
        };
        let bg = &mut state.batch_graph;
        bg.g.set_leaf(bg.y[i], &img.data)?;
        bg.g.set_leaf(bg.yw[i], &warped.data)?;
        bg.g.set_render_sigmas(bg.render[i], &sig)?;
    }
    let loss = state.batch_graph.g.eval_forward()?.data[0];
    if !loss.is_finite() {
        let dump = dump_batch(state, images, loss);
        return Err(PipelineError::NonFiniteLoss { epoch: state.epoch, step: state.step, dump });
    }
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for (i, img) in images.iter().enumerate() {
        let vals = state.batch_graph.g.value(state.batch_graph.yhat[i])?;
        let mut recon = Image::zeros(state.net.img, state.net.img);
        for (slot, &v) in recon.data.iter_mut().zip(vals) {
            *slot = v.clamp(0.0, 1.0);
        }
        let q = crate::eval::reconstruction_quality(&recon, img)
            .map_err(|e| PipelineError::BadImage(e.to_string()))?;
        psnr += q.psnr;
        ssim += q.ssim;
    }
    state.batch_graph.g.backward()?;
    let grads: Vec<Vec<f64>> = state
        .batch_graph
        .det_leaves
        .iter()
        .chain(&state.batch_graph.rec_leaves)
        .map(|&id| state.batch_graph.g.grad(id).map(|s| s.to_vec()))
        .collect::<Result<_, _>>()?;
    let n_det = state.det.tensors.len();
    let mut all: Vec<Tensor> = Vec::with_capacity(grads.len());
    all.append(&mut state.det.tensors);
    all.append(&mut state.rec.tensors);
    let stepped = adam_step(&mut all, &grads, &mut state.adam, state.cfg.lr, DEFAULT_BETAS, DEFAULT_EPS);
    let rec_part = all.split_off(n_det);
    state.det.tensors = all;
    state.rec.tensors = rec_part;
    stepped?;
    for (&id, t) in state.batch_graph.det_leaves.iter().zip(&state.det.tensors) {
        state.batch_graph.g.set_leaf(id, &t.data)?;
    }
    for (&id, t) in state.batch_graph.rec_leaves.iter().zip(&state.rec.tensors) {
        state.batch_graph.g.set_leaf(id, &t.data)?;
    }
    state.detect_dirty = true;
    state.step += 1;
    let b = images.len() as f64;
    Ok(StepStats { loss, psnr: psnr / b, ssim: ssim / b })
}

// ---- pseudo-supervision ----

pub enum ConfidenceMode<'a> {
    Gcn(&'a GcnParams),
    /// Test mode: requires labeled representations.
    Oracle,
}

/// Cluster the representations and derive the per-landmark consistency
/// cache. Returns None when clustering degenerates to a single cluster over
/// at least 2K representations (callers keep their previous cache).
pub fn refresh_from_reps(
    reps: Vec<LandmarkRep>,
    kappa: usize,
    k: usize,
    conf: ConfidenceMode,
) -> Result<Option<(ClusterModel, Vec<f64>)>, PipelineError> {
    if let Some(bad) = reps.iter().find(|r| r.landmark_index >= k) {
        return Err(PipelineError::BadRep { got: bad.landmark_index, k });
    }
    let n = reps.len();
    let graph = build_knn_graph(reps, kappa)?;
    let confidences = match conf {
        ConfidenceMode::Gcn(p) => gcn_confidence(&graph, p)?,
        ConfidenceMode::Oracle => correspondence::oracle_confidence(&graph)?,
    };
    let model = extract_clusters(&graph, &confidences);
    if model.t == 1 && n >= 2 * k {
        return Ok(None);
    }
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for v in &graph.vertices {
        sums[v.landmark_index] += correspondence::consistency(&v.vec, &model);
        counts[v.landmark_index] += 1;
    }
    let cache: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(Some((model, cache)))
}

fn sample_without_replacement(rng: &mut impl Rng, n: usize, m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

/// Refresh the pseudo-supervision model from a random sample of original
/// (undeformed) images and update the consistency cache.
pub fn update_pseudo_supervision(
    state: &mut TrainState,
    images: &[Image],
) -> Result<(), PipelineError> {
    state.ensure_gcn()?;
    let k = state.net.k;
    let n_sample = PS_SAMPLE.min(images.len());
    let ids = sample_without_replacement(&mut state.ps_rng, images.len(), n_sample);
    state.sync_detect()?;
    let mut reps = Vec::with_capacity(n_sample * k);
    for &id in &ids {
        let out = state.detect_graph.run(&images[id])?;
        reps.extend(extract_representations(&out.features, state.net.d, &out.prob, id as u32)?);
    }
    let gcn = state.gcn.clone().expect("ensure_gcn filled it");
    match refresh_from_reps(reps, state.cfg.kappa, k, ConfidenceMode::Gcn(&gcn))? {
        Some((model, cache)) => {
            debug_assert_eq!(cache.len(), k);
            state.cluster = Some(model);
            state.consistency = Some(cache);
        }
        None => warn!(
            "degenerate pseudo-supervision at epoch {}: single cluster; keeping previous cache",
            state.epoch
        ),
    }
    Ok(())
}

// ---- checkpointing ----

fn rng_pos_entries(name: &str, rng: &ChaCha8Rng, out: &mut Vec<(String, Tensor)>) {
    let pos = rng.get_word_pos();
    out.push((format!("rng.{name}.hi"), u64_tensor((pos >> 64) as u64)));
    out.push((format!("rng.{name}.lo"), u64_tensor(pos as u64)));
}

pub fn save_train_state(state: &TrainState, path: &Path) -> Result<(), PipelineError> {
    let net = &state.net;
    let mut entries: Vec<(String, Tensor)> = vec![
        ("net.img".into(), u64_tensor(net.img as u64)),
        ("net.k".into(), u64_tensor(net.k as u64)),
        ("net.d".into(), u64_tensor(net.d as u64)),
        ("net.c1".into(), u64_tensor(net.c1 as u64)),
        ("net.c2".into(), u64_tensor(net.c2 as u64)),
        ("net.c3".into(), u64_tensor(net.c3 as u64)),
        ("net.rc1".into(), u64_tensor(net.rc1 as u64)),
        ("net.rc2".into(), u64_tensor(net.rc2 as u64)),
        ("net.res_blocks".into(), u64_tensor(net.res_blocks as u64)),
        ("epoch".into(), u64_tensor(state.epoch as u64)),
        ("adam.t".into(), u64_tensor(state.adam.t)),
        ("cfg.epochs".into(), u64_tensor(state.cfg.epochs as u64)),
        ("cfg.lr".into(), Tensor::scalar(state.cfg.lr)),
        ("cfg.batch".into(), u64_tensor(state.cfg.batch as u64)),
        ("cfg.k".into(), u64_tensor(state.cfg.k as u64)),
        ("cfg.kappa".into(), u64_tensor(state.cfg.kappa as u64)),
        ("cfg.sigma_min".into(), Tensor::scalar(state.cfg.sigma_min)),
        ("cfg.sigma_max".into(), Tensor::scalar(state.cfg.sigma_max)),
        (
            "cfg.sigma_mode".into(),
            u64_tensor(match state.cfg.sigma_mode {
                SigmaMode::Adaptive => 0,
                SigmaMode::Fixed => 1,
                SigmaMode::Random => 2,
            }),
        ),
        ("cfg.ps_update".into(), u64_tensor(state.cfg.ps_update as u64)),
        ("cfg.seed".into(), u64_tensor(state.cfg.seed)),
    ];
    let names: Vec<String> =
        DetectorParams::names().into_iter().chain(ReconstructorParams::names(net)).collect();
    let tensors = state.det.tensors.iter().chain(&state.rec.tensors);
    for ((name, t), (m, v)) in
        names.iter().zip(tensors).zip(state.adam.m.iter().zip(&state.adam.v))
    {
        entries.push((name.clone(), t.clone()));
        entries.push((
            format!("adam.m.{name}"),
            Tensor::new(t.shape.clone(), m.clone()).expect("moment shape"),
        ));
        entries.push((
            format!("adam.v.{name}"),
            Tensor::new(t.shape.clone(), v.clone()).expect("moment shape"),
        ));
    }
    if let Some(cache) = &state.consistency {
        entries.push((
            "ps.consistency".into(),
            Tensor::new(vec![cache.len()], cache.clone()).expect("cache shape"),
        ));
    }
    if let Some(model) = &state.cluster {
        let d = model.centroids.first().map_or(0, Vec::len);
        let flat: Vec<f64> = model.centroids.iter().flatten().copied().collect();
        entries.push((
            "ps.centroids".into(),
            Tensor::new(vec![model.t, d], flat).expect("centroid shape"),
        ));
    }
    rng_pos_entries("deform", &state.deform_rng, &mut entries);
    rng_pos_entries("sigma", &state.sigma_rng, &mut entries);
    rng_pos_entries("ps", &state.ps_rng, &mut entries);
    checkpoint::save(path, &entries)?;
    Ok(())
}

/// The model slice of a checkpoint: enough to detect, render and evaluate.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub net: NetConfig,
    pub det: DetectorParams,
    pub rec: ReconstructorParams,
    pub consistency: Option<Vec<f64>>,
    pub centroids: Option<Vec<Vec<f64>>>,
    pub epoch: u64,
    pub k: usize,
    pub kappa: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_mode: SigmaMode,
    pub seed: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, PipelineError> {
    let entries = checkpoint::load(path)?;
    let find = |name: &str| -> Result<&Tensor, PipelineError> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| PipelineError::CkptField(name.to_string()))
    };
    let u = |name: &str| -> Result<u64, PipelineError> { Ok(tensor_u64(find(name)?)) };
    let f = |name: &str| -> Result<f64, PipelineError> { Ok(find(name)?.data[0]) };
    let net = NetConfig {
        img: u("net.img")? as usize,
        k: u("net.k")? as usize,
        d: u("net.d")? as usize,
        c1: u("net.c1")? as usize,
        c2: u("net.c2")? as usize,
        c3: u("net.c3")? as usize,
        rc1: u("net.rc1")? as usize,
        rc2: u("net.rc2")? as usize,
        res_blocks: u("net.res_blocks")? as usize,
    };
    let mut det_tensors = Vec::new();
    for name in DetectorParams::names() {
        det_tensors.push(find(&name)?.clone().with_grad());
    }
    let mut rec_tensors = Vec::new();
    for name in ReconstructorParams::names(&net) {
        rec_tensors.push(find(&name)?.clone().with_grad());
    }
    let consistency = entries
        .iter()
        .find(|(n, _)| n == "ps.consistency")
        .map(|(_, t)| t.data.clone());
    let centroids = entries.iter().find(|(n, _)| n == "ps.centroids").map(|(_, t)| {
        let d = t.shape[1];
        t.data.chunks(d).map(|c| c.to_vec()).collect::<Vec<Vec<f64>>>()
    });
    Ok(LoadedCheckpoint {
        det: DetectorParams { net: net.clone(), tensors: det_tensors },
        rec: ReconstructorParams { net: net.clone(), tensors: rec_tensors },
        consistency,
        centroids,
        epoch: u("epoch")?,
        k: u("cfg.k")? as usize,
        kappa: u("cfg.kappa")? as usize,
        sigma_min: f("cfg.sigma_min")?,
        sigma_max: f("cfg.sigma_max")?,
        sigma_mode: match u("cfg.sigma_mode")? {
            0 => SigmaMode::Adaptive,
            1 => SigmaMode::Fixed,
            _ => SigmaMode::Random,
        },
        seed: u("cfg.seed")?,
        net,
    })
}

/// Inference-time sigma vector for a checkpoint: consistency-modulated in
/// adaptive mode once a cache exists, otherwise the range midpoint (which
/// also stands in for random mode's per-image draws).
pub fn checkpoint_sigmas(ckpt: &LoadedCheckpoint) -> Result<Vec<f64>, PipelineError> {
    if ckpt.sigma_mode == SigmaMode::Adaptive && ckpt.sigma_min < ckpt.sigma_max {
        if let Some(cache) = &ckpt.consistency {
            let opts: Vec<Option<f64>> = cache.iter().copied().map(Some).collect();
            return Ok(bottleneck::modulate_sigma(&opts, ckpt.sigma_min, ckpt.sigma_max)?);
        }
    }
    Ok(vec![sigma_default(ckpt.sigma_min, ckpt.sigma_max); ckpt.k])
}

// ---- training loop ----

fn fisher_yates(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log_path: PathBuf,
    pub final_ckpt: PathBuf,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("epoch", &self.epoch)
            .field("step", &self.step)
            .field("sigma_mode", &self.cfg.sigma_mode)
            .field("consistency", &self.consistency)
            .finish_non_exhaustive()
    }
}

/// Full training run: per-epoch shuffled batches, scheduled
/// pseudo-supervision refreshes, per-epoch CSV log, atomic checkpoints.
pub fn train_loop(cfg: &Config, dataset: &synthdata::Dataset) -> Result<TrainOutcome, PipelineError> {
    let n = dataset.images.len();
    if n < cfg.batch {
        return Err(PipelineError::SmallDataset { got: n, want: cfg.batch });
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let mut state = TrainState::new(cfg)?;
    state.dump_dir = Some(cfg.out_dir.join("diagnostic"));
    state.ensure_gcn()?;

    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    write!(log, "epoch,mean_loss")?;
    for k in 0..cfg.k {
        write!(log, ",d_{k}")?;
    }
    writeln!(log, ",T,cum_psnr,cum_ssim,wall_clock")?;

    let last_ckpt = cfg.out_dir.join("last.ckpt");
    let tmp_ckpt = cfg.out_dir.join("last.ckpt.tmp");
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        state.epoch = epoch;
        if epoch > 0 && epoch % cfg.ps_update == 0 {
            update_pseudo_supervision(&mut state, &dataset.images)?;
        }
        let mut order: Vec<usize> = (0..n).collect();
        fisher_yates(&mut order, &mut state.deform_rng);
        let (mut sum, mut cum_psnr, mut cum_ssim) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks_exact(cfg.batch) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &dataset.images[i]).collect();
            let stats = train_step(&mut state, &imgs)?;
            sum += stats.loss;
            cum_psnr += stats.psnr;
            cum_ssim += stats.ssim;
            batches += 1;
        }
        let mean_loss = sum / batches as f64;
        write!(log, "{epoch},{mean_loss}")?;
        match &state.consistency {
            Some(cache) => {
                for d in cache {
                    write!(log, ",{d}")?;
                }
            }
            None => {
                for _ in 0..cfg.k {
                    write!(log, ",nan")?;
                }
            }
        }
        let t = state.cluster.as_ref().map_or(0, |m| m.t);
        writeln!(log, ",{t},{cum_psnr},{cum_ssim},{:.3}", t0.elapsed().as_secs_f64())?;
        log.flush()?;
        // atomic swap keeps the previous epoch's checkpoint on interruption
        save_train_state(&state, &tmp_ckpt)?;
        fs::rename(&tmp_ckpt, &last_ckpt)?;
    }
    let final_ckpt = cfg.out_dir.join("final.ckpt");
    save_train_state(&state, &final_ckpt)?;
    Ok(TrainOutcome { state, log_path, final_ckpt })
}

// ---- gradient-check battery ----

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

fn merge_reports(reports: &[GradCheckReport]) -> GradCheckReport {
    GradCheckReport {
        max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        checked: reports.iter().map(|r| r.checked).sum(),
        excluded: reports.iter().map(|r| r.excluded).sum(),
        pass: reports.iter().all(|r| r.pass),
    }
}

/// Central-difference check of every autodiff op at tiny shapes, then of the
/// composed detect -> softmax -> softargmax -> render -> reconstruct -> L2
/// graph at reduced shapes. One merged report per entry, every
/// grad-requiring leaf probed.
pub fn gradcheck_battery(seed: u64) -> Result<Vec<(String, GradCheckReport)>, PipelineError> {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();

    // builds one op graph, finishes it to a scalar through a fixed random
    // weighting (plain mean would kill softmax/render gradients), checks
    // every grad leaf
    let mut run = |name: &str,
                   graphs: &mut [(Graph, Vec<NodeId>)]|
     -> Result<(), PipelineError> {
        let mut reports = Vec::new();
        for (g, leaves) in graphs.iter_mut() {
            g.eval_forward()?;
            for &leaf in leaves.iter() {
                reports.push(g.grad_check(leaf, GRADCHECK_STEP, GRADCHECK_TOL)?);
            }
        }
        out.push((name.to_string(), merge_reports(&reports)));
        Ok(())
    };
    let weighted_mean = |g: &mut Graph, node: NodeId, rng: &mut ChaCha8Rng| {
        let shape = g.shape(node).to_vec();
        let w = Tensor::randn(&shape, 1.0, rng);
        let w = g.constant(&shape, w.data).expect("shape from graph");
        let wx = g.mul(node, w).expect("same shape");
        g.mean(wx).expect("mean")
    };
    let leaf = |g: &mut Graph, shape: &[usize], rng: &mut ChaCha8Rng| {
        g.leaf(&Tensor::randn(shape, 0.6, rng).with_grad())
    };

    {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], &mut rng);
        let b = leaf(&mut g, &[2, 3], &mut rng);
        let s = g.add(a, b)?;
        weighted_mean(&mut g, s, &mut rng);
        run("add", &mut [(g, vec![a, b])])?;
    }
    {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], &mut rng);
        let b = leaf(&mut g, &[2, 3], &mut rng);
        let s = g.sub(a, b)?;
        weighted_mean(&mut g, s, &mut rng);
        run("sub", &mut [(g, vec![a, b])])?;
    }
    {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], &mut rng);
        let b = leaf(&mut g, &[2, 3], &mut rng);
        let s = g.mul(a, b)?;
        weighted_mean(&mut g, s, &mut rng);
        run("mul", &mut [(g, vec![a, b])])?;
    }
    {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[3, 4], &mut rng);
        let b = leaf(&mut g, &[4, 2], &mut rng);
        let s = g.matmul(a, b)?;
        weighted_mean(&mut g, s, &mut rng);
        run("matmul", &mut [(g, vec![a, b])])?;
    }
    {
        // both supported strides
        let mut graphs = Vec::new();
        for stride in [1, 2] {
            let mut g = Graph::new();
            let x = leaf(&mut g, &[2, 5, 5], &mut rng);
            let w = leaf(&mut g, &[3, 2, 3, 3], &mut rng);
            let b = leaf(&mut g, &[3], &mut rng);
            let s = g.conv2d(x, w, b, stride, 1)?;
            weighted_mean(&mut g, s, &mut rng);
            graphs.push((g, vec![x, w, b]));
        }
        run("conv2d", &mut graphs)?;
    }
    {
        let mut graphs = Vec::new();
        for stride in [1, 2] {
            let mut g = Graph::new();
            let x = leaf(&mut g, &[2, 4, 4], &mut rng);
            let w = leaf(&mut g, &[2, 3, 4, 4], &mut rng);
            let b = leaf(&mut g, &[3], &mut rng);
            let s = g.conv_t2d(x, w, b, stride, 1)?;
            weighted_mean(&mut g, s, &mut rng);
            graphs.push((g, vec![x, w, b]));
        }
        run("conv_t2d", &mut graphs)?;
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 4, 4], &mut rng);
        let s = g.relu(x)?;
        weighted_mean(&mut g, s, &mut rng);
        run("relu", &mut [(g, vec![x])])?;
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &mut rng);
        let s = g.exp(x)?;
        weighted_mean(&mut g, s, &mut rng);
        run("exp", &mut [(g, vec![x])])?;
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &mut rng);
        let s = g.tanh(x)?;
        weighted_mean(&mut g, s, &mut rng);
        run("tanh", &mut [(g, vec![x])])?;
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &mut rng);
        let s = g.scale(x, 1.7)?;
        weighted_mean(&mut g, s, &mut rng);
        run("scale", &mut [(g, vec![x])])?;
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3, 4], &mut rng);
        let s = g.sum_axes(x, &[0, 2])?;
        weighted_mean(&mut g, s, &mut rng);
        run("sum_axes", &mut [(g, vec![x])])?;
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[7], &mut rng);
        g.mean(x)?;
        run("mean", &mut [(g, vec![x])])?;
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 4, 4], &mut rng);
        let s = g.spatial_softmax(x)?;
        weighted_mean(&mut g, s, &mut rng);
        run("spatial_softmax", &mut [(g, vec![x])])?;
    }
    {
        let mut g = Graph::new();
        let xs = g.leaf(&Tensor::new(vec![2], vec![1.3, 3.6]).expect("shape").with_grad());
        let ys = g.leaf(&Tensor::new(vec![2], vec![2.2, 4.1]).expect("shape").with_grad());
        let s = g.gaussian_render(xs, ys, 6, 6, &[0.9, 1.6])?;
        weighted_mean(&mut g, s, &mut rng);
        run("gaussian_render", &mut [(g, vec![xs, ys])])?;
    }
    {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3, 3], &mut rng);
        let b = leaf(&mut g, &[1, 3, 3], &mut rng);
        let s = g.concat_ch(a, b)?;
        weighted_mean(&mut g, s, &mut rng);
        run("concat_ch", &mut [(g, vec![a, b])])?;
    }

    // the full training graph at reduced shapes
    let net = NetConfig::reduced();
    let cfg = Config { k: net.k, batch: 1, ..Config::default() };
    let mut state = TrainState::with_net(&cfg, net.clone())?;
    let y = Tensor::randn(&[3, net.img, net.img], 0.25, &mut rng);
    let y: Vec<f64> = y.data.iter().map(|v| (0.5 + v).clamp(0.0, 1.0)).collect();
    let yw = Tensor::randn(&[3, net.img, net.img], 0.25, &mut rng);
    let yw: Vec<f64> = yw.data.iter().map(|v| (0.5 + v).clamp(0.0, 1.0)).collect();
    let bg = &mut state.batch_graph;
    bg.g.set_leaf(bg.y[0], &y)?;
    bg.g.set_leaf(bg.yw[0], &yw)?;
    bg.g.set_render_sigmas(bg.render[0], &[0.9, 1.7])?;
    bg.g.eval_forward()?;
    let mut reports = Vec::new();
    for &leaf in bg.det_leaves.iter().chain(&bg.rec_leaves) {
        reports.push(bg.g.grad_check(leaf, GRADCHECK_STEP, GRADCHECK_TOL)?);
    }
    out.push(("composed".to_string(), merge_reports(&reports)));
    Ok(out)
}
