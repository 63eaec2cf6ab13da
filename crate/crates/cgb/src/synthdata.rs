//! Deterministic face-like synthetic scenes with known ground truth.
//!
//! Scenes are rasterized analytically (signed-distance coverage, 1 px
//! anti-aliasing ramp): a head ellipse, two eye blobs, a nose blob and a
//! mouth arc, drawn under a sampled similarity pose. The five ground-truth
//! landmarks (eye centers, nose tip, mouth corners) are the exact generator
//! parameters mapped through the pose, so forward/backward regression and
//! stability can be scored without any real dataset.

use crate::seeds;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FRAME: usize = 64;
pub const GT_LANDMARKS: usize = 5;
const CENTER: f64 = (FRAME as f64 - 1.0) / 2.0 + 0.5; // 32.0, template origin

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad ppm: {0}")]
    BadPpm(String),
    #[error("bad ground-truth csv: {0}")]
    BadCsv(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("need n >= 1 images")]
    EmptyDataset,
}

/// Planar RGB image, channel-major `[3, h, w]`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; 3 * h * w] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub scale: f64,
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { scale: 1.0, theta: 0.0, tx: 0.0, ty: 0.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// Template coordinates.
    pub center: (f64, f64),
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MouthArc {
    pub left: (f64, f64),
    pub right: (f64, f64),
    /// Quadratic Bezier control point (below the corners: the smile sag).
    pub control: (f64, f64),
    pub width: f64,
    pub color: [f64; 3],
}

/// Everything needed to re-rasterize one scene. Part geometry lives in
/// template coordinates; `landmarks` are the posed image-space points.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub background: [f64; 3],
    pub head_axes: (f64, f64),
    pub head_color: [f64; 3],
    pub eyes: [Blob; 2],
    pub nose: Blob,
    pub mouth: MouthArc,
    pub pose: Pose,
    /// eye centers x2, nose tip, mouth corners x2
    pub landmarks: [(f64, f64); GT_LANDMARKS],
}

pub const LANDMARK_MARGIN: f64 = 4.0;
pub const MIN_INTER_OCULAR: f64 = 8.0;

fn apply_pose(pose: &Pose, p: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (p.0 - CENTER, p.1 - CENTER);
    let (c, s) = (pose.theta.cos(), pose.theta.sin());
    (
        CENTER + pose.tx + pose.scale * (c * dx - s * dy),
        CENTER + pose.ty + pose.scale * (s * dx + c * dy),
    )
}

fn unpose(pose: &Pose, p: (f64, f64)) -> (f64, f64) {
    let dx = (p.0 - CENTER - pose.tx) / pose.scale;
    let dy = (p.1 - CENTER - pose.ty) / pose.scale;
    let (c, s) = (pose.theta.cos(), pose.theta.sin());
    (CENTER + c * dx + s * dy, CENTER - s * dx + c * dy)
}

fn sample_template(rng: &mut impl Rng) -> (SceneSpec, Pose) {
    let background = [
        rng.gen_range(0.10..0.25),
        rng.gen_range(0.10..0.25),
        rng.gen_range(0.12..0.28),
    ];
    let head_axes = (rng.gen_range(14.0..17.0), rng.gen_range(17.0..20.0));
    let head_color = [
        rng.gen_range(0.72..0.90),
        rng.gen_range(0.52..0.70),
        rng.gen_range(0.38..0.55),
    ];
    // shared offsets keep the eye pair mirror-symmetric in the template
    let ex = 8.0 + rng.gen_range(-1.5..1.5);
    let ey = -6.0 + rng.gen_range(-1.5..1.5);
    let eye = |sign: f64, rng: &mut dyn rand::RngCore| Blob {
        center: (CENTER + sign * ex, CENTER + ey),
        radius: rng.gen_range(1.8..2.6),
        color: [
            rng.gen_range(0.04..0.18),
            rng.gen_range(0.04..0.18),
            rng.gen_range(0.08..0.25),
        ],
    };
    let eyes = [eye(-1.0, rng), eye(1.0, rng)];
    let shade = rng.gen_range(0.72..0.88);
    let nose = Blob {
        center: (
            CENTER + rng.gen_range(-1.0..1.0),
            CENTER + 2.0 + rng.gen_range(-1.5..1.5),
        ),
        radius: rng.gen_range(1.5..2.1),
        color: [head_color[0] * shade, head_color[1] * shade, head_color[2] * shade],
    };
    let mx = 7.0 + rng.gen_range(-1.0..1.0);
    let my = 10.0 + rng.gen_range(-1.0..1.0);
    let mouth = MouthArc {
        left: (CENTER - mx, CENTER + my),
        right: (CENTER + mx, CENTER + my),
        control: (
            CENTER + rng.gen_range(-1.0..1.0),
            CENTER + my + 3.0 + rng.gen_range(-1.0..1.0),
        ),
        width: rng.gen_range(1.0..1.6),
        color: [
            rng.gen_range(0.55..0.72),
            rng.gen_range(0.15..0.30),
            rng.gen_range(0.20..0.35),
        ],
    };
    let pose = Pose {
        scale: rng.gen_range(0.75..1.1),
        theta: rng.gen_range(-25.0f64.to_radians()..25.0f64.to_radians()),
        tx: rng.gen_range(-6.0..6.0),
        ty: rng.gen_range(-6.0..6.0),
    };
    let spec = SceneSpec {
        background,
        head_axes,
        head_color,
        eyes,
        nose,
        mouth,
        pose: Pose::IDENTITY,
        landmarks: [(0.0, 0.0); GT_LANDMARKS],
    };
    (spec, pose)
}

fn landmarks_of(spec: &SceneSpec) -> [(f64, f64); GT_LANDMARKS] {
    let p = &spec.pose;
    [
        apply_pose(p, spec.eyes[0].center),
        apply_pose(p, spec.eyes[1].center),
        apply_pose(p, spec.nose.center),
        apply_pose(p, spec.mouth.left),
        apply_pose(p, spec.mouth.right),
    ]
}

fn invariants_hold(landmarks: &[(f64, f64); GT_LANDMARKS]) -> bool {
    let hi = FRAME as f64 - 1.0 - LANDMARK_MARGIN;
    let inside = landmarks
        .iter()
        .all(|&(x, y)| x >= LANDMARK_MARGIN && x <= hi && y >= LANDMARK_MARGIN && y <= hi);
    let (e0, e1) = (landmarks[0], landmarks[1]);
    let ocular = ((e0.0 - e1.0).powi(2) + (e0.1 - e1.1).powi(2)).sqrt();
    inside && ocular >= MIN_INTER_OCULAR
}

fn ellipse_dist(q: (f64, f64), center: (f64, f64), axes: (f64, f64)) -> f64 {
    let (x, y) = (q.0 - center.0, q.1 - center.1);
    let (a, b) = axes;
    let f = ((x / a).powi(2) + (y / b).powi(2)).sqrt();
    if f == 0.0 {
        return -a.min(b);
    }
    // first-order signed distance: (f - 1) / |grad f|
    let grad = ((x / (a * a)).powi(2) + (y / (b * b)).powi(2)).sqrt() / f;
    (f - 1.0) / grad.max(1e-9)
}

fn segment_dist(q: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (aqx, aqy) = (q.0 - a.0, q.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 { 0.0 } else { ((aqx * abx + aqy * aby) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (aqx - t * abx, aqy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

const ARC_SEGMENTS: usize = 24;

fn arc_dist(q: (f64, f64), m: &MouthArc) -> f64 {
    let bez = |t: f64| {
        let u = 1.0 - t;
        (
            u * u * m.left.0 + 2.0 * u * t * m.control.0 + t * t * m.right.0,
            u * u * m.left.1 + 2.0 * u * t * m.control.1 + t * t * m.right.1,
        )
    };
    let mut best = f64::INFINITY;
    let mut prev = bez(0.0);
    for i in 1..=ARC_SEGMENTS {
        let cur = bez(i as f64 / ARC_SEGMENTS as f64);
        best = best.min(segment_dist(q, prev, cur));
        prev = cur;
    }
    best - m.width / 2.0
}

fn rasterize(spec: &SceneSpec) -> Image {
    let mut img = Image::zeros(FRAME, FRAME);
    let s = spec.pose.scale;
    for y in 0..FRAME {
        for x in 0..FRAME {
            let q = unpose(&spec.pose, (x as f64, y as f64));
            let mut px = spec.background;
            // paint order: head, eyes, nose, mouth; coverage from template
            // signed distance scaled to image pixels, 1 px linear ramp
            let mut paint = |d_tpl: f64, color: &[f64; 3]| {
                let alpha = (0.5 - d_tpl * s).clamp(0.0, 1.0);
                for (c, &col) in px.iter_mut().zip(color) {
                    *c += alpha * (col - *c);
                }
            };
            paint(ellipse_dist(q, (CENTER, CENTER), spec.head_axes), &spec.head_color);
            for eye in &spec.eyes {
                let d = segment_dist(q, eye.center, eye.center) - eye.radius;
                paint(d, &eye.color);
            }
            let dn = segment_dist(q, spec.nose.center, spec.nose.center) - spec.nose.radius;
            paint(dn, &spec.nose.color);
            paint(arc_dist(q, &spec.mouth), &spec.mouth.color);
            for c in 0..3 {
                *img.at_mut(c, y, x) = px[c];
            }
        }
    }
    img
}

/// Sample one scene: template and pose are redrawn until the landmark
/// invariants hold (a handful of retries at most under these ranges).
pub fn generate_scene(rng: &mut impl Rng) -> (Image, SceneSpec) {
    for _ in 0..1000 {
        let (mut spec, pose) = sample_template(rng);
        spec.pose = pose;
        let landmarks = landmarks_of(&spec);
        if !invariants_hold(&landmarks) {
            continue;
        }
        spec.landmarks = landmarks;
        return (rasterize(&spec), spec);
    }
    unreachable!("scene invariants unreachable within retry bound");
}

// ---- PPM I/O ----

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), SynthError> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.w, img.h)?;
    let mut bytes = Vec::with_capacity(3 * img.h * img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                bytes.push((img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image, SynthError> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    let bad = |m: &str| SynthError::BadPpm(format!("{}: {m}", path.display()));
    // header: three whitespace-delimited tokens after the magic
    let mut pos = 0usize;
    let mut token = || -> Result<String, SynthError> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(SynthError::BadPpm("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("not a P6 file"));
    }
    let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    if token()? != "255" {
        return Err(bad("expected 8-bit maxval 255"));
    }
    let data_start = pos + 1; // single whitespace after maxval
    if raw.len() != data_start + 3 * w * h {
        return Err(bad("pixel payload length mismatch"));
    }
    let mut img = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = raw[data_start + (y * w + x) * 3 + c];
                *img.at_mut(c, y, x) = b as f64 / 255.0;
            }
        }
    }
    Ok(img)
}

// ---- dataset on disk ----

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub landmarks: Vec<[(f64, f64); GT_LANDMARKS]>,
    pub ids: Vec<u32>,
    pub seed: u64,
}

pub fn image_file_name(id: u32) -> String {
    format!("img_{id:05}.ppm")
}

/// Write `n` scenes (PPM), the ground-truth CSV and the manifest.
pub fn generate_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<(), SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    fs::create_dir_all(out_dir)?;
    let mut rng: ChaCha8Rng = seeds::stream(seed, seeds::DATA_GEN);
    let mut csv = BufWriter::new(File::create(out_dir.join("gt.csv"))?);
    writeln!(csv, "image_id,x0,y0,x1,y1,x2,y2,x3,y3,x4,y4")?;
    for id in 0..n {
        let (img, spec) = generate_scene(&mut rng);
        write_ppm(&out_dir.join(image_file_name(id as u32)), &img)?;
        write!(csv, "{id}")?;
        for (x, y) in spec.landmarks {
            write!(csv, ",{x},{y}")?;
        }
        writeln!(csv)?;
    }
    csv.flush()?;
    let mut manifest = File::create(out_dir.join("manifest.txt"))?;
    write!(manifest, "seed={seed}\ncount={n}\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut seed = None;
    let mut count = None;
    for line in manifest.lines() {
        if let Some(v) = line.strip_prefix("seed=") {
            seed = v.parse::<u64>().ok();
        } else if let Some(v) = line.strip_prefix("count=") {
            count = v.parse::<usize>().ok();
        }
    }
    let seed = seed.ok_or_else(|| SynthError::BadManifest("missing seed".into()))?;
    let count = count.ok_or_else(|| SynthError::BadManifest("missing count".into()))?;

    let csv = fs::read_to_string(dir.join("gt.csv"))?;
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or("");
    if header != "image_id,x0,y0,x1,y1,x2,y2,x3,y3,x4,y4" {
        return Err(SynthError::BadCsv(format!("unexpected header {header:?}")));
    }
    let mut ids = Vec::with_capacity(count);
    let mut landmarks = Vec::with_capacity(count);
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + 2 * GT_LANDMARKS {
            return Err(SynthError::BadCsv(format!("row with {} fields", fields.len())));
        }
        let id: u32 = fields[0].parse().map_err(|_| SynthError::BadCsv(format!("bad id {:?}", fields[0])))?;
        let mut pts = [(0.0, 0.0); GT_LANDMARKS];
        for (k, pt) in pts.iter_mut().enumerate() {
            let x: f64 = fields[1 + 2 * k].parse().map_err(|_| SynthError::BadCsv("bad coordinate".into()))?;
            let y: f64 = fields[2 + 2 * k].parse().map_err(|_| SynthError::BadCsv("bad coordinate".into()))?;
            *pt = (x, y);
        }
        ids.push(id);
        landmarks.push(pts);
    }
    if ids.len() != count {
        return Err(SynthError::BadCsv(format!("{} rows but manifest count {count}", ids.len())));
    }
    let images = ids
        .iter()
        .map(|&id| read_ppm(&dir.join(image_file_name(id))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { images, landmarks, ids, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bottleneck::{softargmax, HeatmapKind, HeatmapStack};
    use rand_chacha::rand_core::SeedableRng;
    use std::time::Instant;

    #[test]
    fn equal_seeds_give_bit_identical_scenes() {
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let (img1, spec1) = generate_scene(&mut r1);
        let (img2, spec2) = generate_scene(&mut r2);
        assert_eq!(img1, img2);
        assert_eq!(spec1, spec2);
    }

    #[test]
    fn invariants_hold_on_large_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10_000 {
            let (spec, pose) = sample_template(&mut rng);
            let mut spec = spec;
            spec.pose = pose;
            let lms = landmarks_of(&spec);
            if !invariants_hold(&lms) {
                continue; // generate_scene would resample; audit accepted draws
            }
            let hi = FRAME as f64 - 1.0 - LANDMARK_MARGIN;
            for &(x, y) in &lms {
                assert!(x >= LANDMARK_MARGIN && x <= hi && y >= LANDMARK_MARGIN && y <= hi);
            }
            let d = ((lms[0].0 - lms[1].0).powi(2) + (lms[0].1 - lms[1].1).powi(2)).sqrt();
            assert!(d >= MIN_INTER_OCULAR);
        }
        // and the public entry point always returns a valid scene
        let mut rng = ChaCha8Rng::seed_from_u64(124);
        for _ in 0..200 {
            let (_, spec) = generate_scene(&mut rng);
            assert!(invariants_hold(&spec.landmarks));
        }
    }

    #[test]
    fn identity_pose_has_symmetric_eyes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (mut spec, _) = sample_template(&mut rng);
            spec.pose = Pose::IDENTITY;
            let lms = landmarks_of(&spec);
            let mid = (lms[0].0 + lms[1].0) / 2.0;
            assert!((mid - CENTER).abs() < 1e-12, "eye midpoint {mid}");
            assert!((lms[0].1 - lms[1].1).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_pixels_are_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (img, _) = generate_scene(&mut rng);
        assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_n1_has_one_image_and_one_row() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(1, 3, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("gt.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2); // header + one row
        assert!(dir.path().join("img_00000.ppm").exists());
        assert!(!dir.path().join("img_00001.ppm").exists());
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest, "seed=3\ncount=1\n");
    }

    #[test]
    fn dataset_regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(3, 42, d1.path()).unwrap();
        generate_dataset(3, 42, d2.path()).unwrap();
        for name in ["gt.csv", "manifest.txt", "img_00000.ppm", "img_00001.ppm", "img_00002.ppm"] {
            let b1 = std::fs::read(d1.path().join(name)).unwrap();
            let b2 = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(b1, b2, "{name} differs");
        }
    }

    #[test]
    fn parity_split_is_a_partition() {
        let ids: Vec<u32> = (0..11).collect();
        let train: Vec<u32> = ids.iter().copied().filter(|i| i % 2 == 0).collect();
        let test: Vec<u32> = ids.iter().copied().filter(|i| i % 2 == 1).collect();
        assert!(train.iter().all(|i| !test.contains(i)));
        let mut all = [train, test].concat();
        all.sort_unstable();
        assert_eq!(all, ids);
    }

    #[test]
    fn dataset_rejects_unwritable_dir() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("occupied");
        std::fs::write(&blocker, b"file, not a directory").unwrap();
        assert!(generate_dataset(1, 0, &blocker).is_err());
    }

    #[test]
    fn load_matches_generated_coordinates_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::seeds::stream(11, crate::seeds::DATA_GEN);
        let expected: Vec<SceneSpec> = (0..4).map(|_| generate_scene(&mut rng).1).collect();
        generate_dataset(4, 11, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.seed, 11);
        assert_eq!(ds.ids, vec![0, 1, 2, 3]);
        for (row, spec) in ds.landmarks.iter().zip(&expected) {
            for (a, b) in row.iter().zip(&spec.landmarks) {
                // shortest round-trip display parses back to the same bits
                assert_eq!(a, b);
            }
        }
        assert_eq!(ds.images.len(), 4);
    }

    #[test]
    fn ppm_roundtrip_preserves_quantized_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (img, _) = generate_scene(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            let qa = (a.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            assert!((qa - b).abs() < 1e-12);
        }
    }

    #[test]
    fn read_ppm_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n2 2\n255\n0000").unwrap();
        assert!(matches!(read_ppm(&path), Err(SynthError::BadPpm(_))));
        std::fs::write(&path, b"P6\n2 2\n255\nshort").unwrap();
        assert!(matches!(read_ppm(&path), Err(SynthError::BadPpm(_))));
    }

    #[test]
    fn gt_roundtrips_through_delta_heatmap_softargmax() {
        // bilinear point-mass splat: the probability-map expectation
        // recovers the continuous coordinate
        let splat = |x: f64, y: f64| {
            let mut data = vec![0.0; FRAME * FRAME];
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (fx, fy) = (x - x.floor(), y - y.floor());
            data[y0 * FRAME + x0] = (1.0 - fx) * (1.0 - fy);
            data[y0 * FRAME + x0 + 1] = fx * (1.0 - fy);
            data[(y0 + 1) * FRAME + x0] = (1.0 - fx) * fy;
            data[(y0 + 1) * FRAME + x0 + 1] = fx * fy;
            HeatmapStack::new(HeatmapKind::Probability, 1, FRAME, FRAME, data).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let (_, spec) = generate_scene(&mut rng);
            for &(x, y) in &spec.landmarks {
                let stack = splat(x, y);
                let coords = softargmax(&stack).unwrap();
                assert!((coords[0].0 - x).abs() < 1e-9, "x {x} -> {}", coords[0].0);
                assert!((coords[0].1 - y).abs() < 1e-9, "y {y} -> {}", coords[0].1);
            }
        }
    }

    #[test]
    fn generation_throughput_at_least_100_per_second() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let start = Instant::now();
        let n = 200;
        for _ in 0..n {
            let (img, _) = generate_scene(&mut rng);
            std::hint::black_box(&img);
        }
        let per_sec = n as f64 / start.elapsed().as_secs_f64();
        assert!(per_sec >= 100.0, "generated {per_sec:.0} images/s");
    }
}
