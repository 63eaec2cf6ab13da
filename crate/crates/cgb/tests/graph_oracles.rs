//! Oracle tests for the differentiation engine: every op is checked against
//! central finite differences across 10 seeds, and convolution against an
//! independent nested-loop implementation.

use cgb::graph::{Graph, NodeId};
use cgb::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

/// Reduce any node to a scalar through a random elementwise weighting, so
/// every coordinate of the op's output contributes its own gradient direction.
fn to_scalar(g: &mut Graph, node: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = g.shape(node).to_vec();
    let n: usize = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(&shape, weights).unwrap();
    let prod = g.mul(node, w).unwrap();
    let axes: Vec<usize> = (0..shape.len()).collect();
    g.sum_axes(prod, &axes).unwrap()
}

/// Builds one randomized instance of each op and grad-checks every
/// differentiable leaf.
fn check_op(name: &str, seed: u64, build: impl Fn(&mut Graph, &mut ChaCha8Rng) -> Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let leaves = build(&mut g, &mut rng);
    for leaf in leaves {
        let report = g.grad_check(leaf, FD_STEP, FD_TOL).unwrap();
        assert!(
            report.pass,
            "{name} seed {seed} leaf {leaf:?}: max rel err {:.3e} over {} coords ({} excluded)",
            report.max_rel_err, report.checked, report.excluded
        );
    }
}

fn all_seeds(name: &str, build: impl Fn(&mut Graph, &mut ChaCha8Rng) -> Vec<NodeId> + Copy) {
    for seed in 0..10 {
        check_op(name, seed, build);
    }
}

#[test]
fn fd_add() {
    all_seeds("add", |g, rng| {
        let a = g.leaf(&rand_tensor(&[2, 3], rng));
        let b = g.leaf(&rand_tensor(&[2, 3], rng));
        let s = g.add(a, b).unwrap();
        to_scalar(g, s, rng);
        vec![a, b]
    });
}

#[test]
fn fd_sub() {
    all_seeds("sub", |g, rng| {
        let a = g.leaf(&rand_tensor(&[4], rng));
        let b = g.leaf(&rand_tensor(&[4], rng));
        let s = g.sub(a, b).unwrap();
        to_scalar(g, s, rng);
        vec![a, b]
    });
}

#[test]
fn fd_mul() {
    all_seeds("mul", |g, rng| {
        let a = g.leaf(&rand_tensor(&[3, 3], rng));
        let b = g.leaf(&rand_tensor(&[3, 3], rng));
        let s = g.mul(a, b).unwrap();
        to_scalar(g, s, rng);
        vec![a, b]
    });
}

#[test]
fn fd_matmul() {
    all_seeds("matmul", |g, rng| {
        let a = g.leaf(&rand_tensor(&[3, 4], rng));
        let b = g.leaf(&rand_tensor(&[4, 2], rng));
        let s = g.matmul(a, b).unwrap();
        to_scalar(g, s, rng);
        vec![a, b]
    });
}

#[test]
fn fd_conv2d_stride1() {
    all_seeds("conv2d/1", |g, rng| {
        let x = g.leaf(&rand_tensor(&[2, 5, 5], rng));
        let w = g.leaf(&rand_tensor(&[3, 2, 3, 3], rng));
        let b = g.leaf(&rand_tensor(&[3], rng));
        let s = g.conv2d(x, w, b, 1, 1).unwrap();
        to_scalar(g, s, rng);
        vec![x, w, b]
    });
}

#[test]
fn fd_conv2d_stride2() {
    all_seeds("conv2d/2", |g, rng| {
        let x = g.leaf(&rand_tensor(&[2, 6, 6], rng));
        let w = g.leaf(&rand_tensor(&[3, 2, 3, 3], rng));
        let b = g.leaf(&rand_tensor(&[3], rng));
        let s = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(s), &[3, 3, 3]);
        to_scalar(g, s, rng);
        vec![x, w, b]
    });
}

#[test]
fn fd_conv_t2d() {
    all_seeds("conv_t2d", |g, rng| {
        let x = g.leaf(&rand_tensor(&[2, 3, 3], rng));
        let w = g.leaf(&rand_tensor(&[2, 3, 4, 4], rng));
        let b = g.leaf(&rand_tensor(&[3], rng));
        let s = g.conv_t2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(s), &[3, 6, 6]);
        to_scalar(g, s, rng);
        vec![x, w, b]
    });
}

#[test]
fn fd_relu() {
    all_seeds("relu", |g, rng| {
        let x = g.leaf(&rand_tensor(&[3, 4], rng));
        let s = g.relu(x).unwrap();
        to_scalar(g, s, rng);
        vec![x]
    });
}

#[test]
fn fd_exp() {
    all_seeds("exp", |g, rng| {
        let x = g.leaf(&rand_tensor(&[2, 3], rng));
        let s = g.exp(x).unwrap();
        to_scalar(g, s, rng);
        vec![x]
    });
}

#[test]
fn fd_tanh() {
    all_seeds("tanh", |g, rng| {
        let x = g.leaf(&rand_tensor(&[2, 3], rng));
        let s = g.tanh(x).unwrap();
        to_scalar(g, s, rng);
        vec![x]
    });
}

#[test]
fn fd_sum_axes() {
    all_seeds("sum_axes", |g, rng| {
        let x = g.leaf(&rand_tensor(&[2, 3, 4], rng));
        let s = g.sum_axes(x, &[0, 2]).unwrap();
        assert_eq!(g.shape(s), &[3]);
        to_scalar(g, s, rng);
        vec![x]
    });
}

#[test]
fn fd_mean() {
    all_seeds("mean", |g, rng| {
        let x = g.leaf(&rand_tensor(&[3, 3], rng));
        let m = g.mean(x).unwrap();
        // already scalar; weight it anyway to vary the upstream gradient
        to_scalar(g, m, rng);
        vec![x]
    });
}

#[test]
fn fd_spatial_softmax() {
    all_seeds("spatial_softmax", |g, rng| {
        let x = g.leaf(&rand_tensor(&[2, 3, 3], rng));
        let s = g.spatial_softmax(x).unwrap();
        to_scalar(g, s, rng);
        vec![x]
    });
}

#[test]
fn fd_gaussian_render() {
    all_seeds("gaussian_render", |g, rng| {
        let k = 3;
        let xs_t = Tensor::new(vec![k], (0..k).map(|_| rng.gen_range(1.0..3.0)).collect())
            .unwrap()
            .with_grad();
        let ys_t = Tensor::new(vec![k], (0..k).map(|_| rng.gen_range(1.0..3.0)).collect())
            .unwrap()
            .with_grad();
        let sigmas: Vec<f64> = (0..k).map(|_| rng.gen_range(0.7..2.0)).collect();
        let xs = g.leaf(&xs_t);
        let ys = g.leaf(&ys_t);
        let r = g.gaussian_render(xs, ys, 5, 5, &sigmas).unwrap();
        to_scalar(g, r, rng);
        vec![xs, ys]
    });
}

#[test]
fn fd_concat_ch() {
    all_seeds("concat_ch", |g, rng| {
        let a = g.leaf(&rand_tensor(&[2, 3, 3], rng));
        let b = g.leaf(&rand_tensor(&[3, 3, 3], rng));
        let s = g.concat_ch(a, b).unwrap();
        to_scalar(g, s, rng);
        vec![a, b]
    });
}

#[test]
fn fd_scale() {
    all_seeds("scale", |g, rng| {
        let x = g.leaf(&rand_tensor(&[2, 4], rng));
        let s = g.scale(x, -1.7).unwrap();
        to_scalar(g, s, rng);
        vec![x]
    });
}

#[test]
fn fd_render_of_softargmax_composition() {
    // sum of an adaptive-heatmap render of a softargmax output: the chained
    // bottleneck gradient path (softmax -> expectation -> render).
    all_seeds("softargmax+render", |g, rng| {
        let k = 2;
        let (h, w) = (4, 5);
        let raw = g.leaf(&rand_tensor(&[k, h, w], rng));
        let prob = g.spatial_softmax(raw).unwrap();
        // expected coordinates via constant coordinate grids
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
        let gxc = g.constant(&[k, h, w], gx).unwrap();
        let gyc = g.constant(&[k, h, w], gy).unwrap();
        let px = g.mul(prob, gxc).unwrap();
        let py = g.mul(prob, gyc).unwrap();
        let xs = g.sum_axes(px, &[1, 2]).unwrap();
        let ys = g.sum_axes(py, &[1, 2]).unwrap();
        let rendered = g.gaussian_render(xs, ys, h, w, &[1.1, 0.8]).unwrap();
        let axes = [0, 1, 2];
        let _s = g.sum_axes(rendered, &axes).unwrap();
        vec![raw]
    });
}

// ---- convolution vs nested-loop oracle ----

fn conv_oracle(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    ci: usize,
    h: usize,
    wid: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for c_out in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[c_out];
                for c_in in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wid as isize {
                                continue;
                            }
                            acc += x[(c_in * h + iy as usize) * wid + ix as usize]
                                * w[((c_out * ci + c_in) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(c_out * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for &(ci, h, wid, co, kh, kw, stride, pad) in &[
        (1usize, 4usize, 4usize, 1usize, 3usize, 3usize, 1usize, 1usize),
        (2, 5, 7, 3, 3, 3, 1, 1),
        (3, 8, 8, 2, 3, 3, 2, 1),
        (2, 8, 6, 4, 4, 4, 2, 1),
        (1, 7, 7, 2, 1, 1, 1, 0),
        (2, 8, 8, 3, 5, 5, 1, 2),
    ] {
        let x: Vec<f64> = (0..ci * h * wid).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..co * ci * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expect = conv_oracle(&x, &w, &b, ci, h, wid, co, kh, kw, stride, pad);

        let mut g = Graph::new();
        let xn = g.constant(&[ci, h, wid], x).unwrap();
        let wn = g.constant(&[co, ci, kh, kw], w).unwrap();
        let bn = g.constant(&[co], b).unwrap();
        let y = g.conv2d(xn, wn, bn, stride, pad).unwrap();
        g.eval_forward().unwrap();
        let got = g.value(y).unwrap();
        assert_eq!(got.len(), expect.len());
        for (a, e) in got.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "conv mismatch: {a} vs {e}");
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> when conv_t uses the same kernel with
    // swapped channel roles and zero bias: the defining adjoint identity.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(ci, h, wid, co, k, stride, pad) in
        &[(2usize, 6usize, 6usize, 3usize, 3usize, 1usize, 1usize), (2, 8, 8, 3, 4, 2, 1)]
    {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wid + 2 * pad - k) / stride + 1;
        let x: Vec<f64> = (0..ci * h * wid).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..co * oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g1 = Graph::new();
        let xn = g1.constant(&[ci, h, wid], x.clone()).unwrap();
        let wn = g1.constant(&[co, ci, k, k], w.clone()).unwrap();
        let bn = g1.constant(&[co], vec![0.0; co]).unwrap();
        let cy = g1.conv2d(xn, wn, bn, stride, pad).unwrap();
        g1.eval_forward().unwrap();
        let lhs: f64 = g1.value(cy).unwrap().iter().zip(&y).map(|(a, b)| a * b).sum();

        // conv_t kernel layout is [Ci, Co, kh, kw] where Ci is its input
        // (here co) and Co its output (here ci); same tap values means
        // permuting [co, ci, k, k] -> [co][ci] stays in place.
        let mut g2 = Graph::new();
        let yn = g2.constant(&[co, oh, ow], y).unwrap();
        let wtn = g2.constant(&[co, ci, k, k], w).unwrap();
        let btn = g2.constant(&[ci], vec![0.0; ci]).unwrap();
        let ct = g2.conv_t2d(yn, wtn, btn, stride, pad).unwrap();
        assert_eq!(g2.shape(ct), &[ci, h, wid]);
        g2.eval_forward().unwrap();
        let rhs: f64 = g2.value(ct).unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();

        assert!((lhs - rhs).abs() < 1e-10, "adjoint identity broke: {lhs} vs {rhs}");
    }
}

#[test]
fn repeated_backward_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.leaf(&rand_tensor(&[2, 6, 6], &mut rng));
    let w = g.leaf(&rand_tensor(&[3, 2, 3, 3], &mut rng));
    let b = g.leaf(&rand_tensor(&[3], &mut rng));
    let c = g.conv2d(x, w, b, 2, 1).unwrap();
    let r = g.relu(c).unwrap();
    let _m = g.mean(r).unwrap();
    g.eval_forward().unwrap();
    g.backward().unwrap();
    let g1: Vec<f64> = g.grad(w).unwrap().to_vec();
    g.eval_forward().unwrap();
    g.backward().unwrap();
    let g2: Vec<f64> = g.grad(w).unwrap().to_vec();
    assert_eq!(g1, g2);
}
