//! Engine-level oracle tests: nested-loop convolution reference, hand
//! arithmetic cases, and central finite-difference checks for every
//! primitive in wide precision.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradient, spread_indices, Target};
use super::graph::{GraphBuilder, NodeRef, Padding};
use super::tensor::Tensor;
use super::{Executor, ParamStore, Scalar};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Brute-force reference convolution: six explicit loops, TF-style padding.
/// Independent of the kernels module by construction.
fn reference_conv2d(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    padding: Padding,
) -> Tensor<f64> {
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (oh, ow, ph, pw) = match padding {
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let th = ((oh - 1) * stride + kh).saturating_sub(h);
            let tw = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, th / 2, tw / 2)
        }
        Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
    };
    let mut out = Tensor::<f64>::zeros(&[n, oh, ow, cout]);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(&[ni, iy as usize, ix as usize, ci])
                                    * k.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out.set(&[ni, oy, ox, co], acc);
                }
            }
        }
    }
    out
}

/// Builds a tiny graph `inputs -> op -> mean_all` and FD-checks the gradient
/// w.r.t. the named input at spread indices.
fn fd_input_check<F: Scalar>(
    build: impl Fn(&mut GraphBuilder<F>) -> NodeRef,
    inputs: &[(&str, Tensor<F>)],
    target: &str,
    step: f64,
    tol: f64,
) {
    let mut b = GraphBuilder::<F>::new();
    let node = build(&mut b);
    let loss = b.mean_all(node);
    let graph = b.finish();
    let params = ParamStore::new();
    let numel = inputs
        .iter()
        .find(|(n, _)| *n == target)
        .unwrap()
        .1
        .numel();
    let idx = spread_indices(numel, 12);
    let rep = check_gradient(
        &graph,
        &params,
        inputs,
        loss,
        Target::Input(target),
        &idx,
        step,
    )
    .unwrap();
    assert!(
        rep.rel_err < tol,
        "fd check for '{}' failed: rel_err {} >= {} (worst idx {})",
        target,
        rep.rel_err,
        tol,
        rep.worst_index
    );
}

#[test]
fn conv2d_identity_kernel() {
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input("x", &[1, 1, 1, 1]).unwrap();
    let k = b.input("k", &[1, 1, 1, 1]).unwrap();
    let y = b.conv2d(x, k, 1, Padding::Same).unwrap();
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.set_input("x", &Tensor::from_vec(&[1, 1, 1, 1], vec![0.7]).unwrap())
        .unwrap();
    ex.set_input("k", &Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap())
        .unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    assert_eq!(ex.value(y).data(), &[0.7]);
}

#[test]
fn conv2d_ones_counts_overlap() {
    // All-ones 4x4 input, all-ones 3x3 kernel, same padding: centers see 9
    // taps, corners see 4.
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input("x", &[1, 4, 4, 1]).unwrap();
    let k = b.input("k", &[3, 3, 1, 1]).unwrap();
    let y = b.conv2d(x, k, 1, Padding::Same).unwrap();
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.set_input("x", &Tensor::filled(&[1, 4, 4, 1], 1.0)).unwrap();
    ex.set_input("k", &Tensor::filled(&[3, 3, 1, 1], 1.0)).unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    let out = ex.value(y);
    assert_eq!(out.at(&[0, 1, 1, 0]), 9.0);
    assert_eq!(out.at(&[0, 1, 2, 0]), 9.0);
    assert_eq!(out.at(&[0, 0, 0, 0]), 4.0);
    assert_eq!(out.at(&[0, 3, 3, 0]), 4.0);
    assert_eq!(out.at(&[0, 0, 1, 0]), 6.0);
}

#[test]
fn conv2d_matches_nested_loop_reference() {
    let mut r = rng(11);
    for (stride, padding) in [
        (1, Padding::Same),
        (2, Padding::Same),
        (1, Padding::Valid),
        (2, Padding::Valid),
    ] {
        let x = rand_tensor(&[1, 8, 8, 2], &mut r, -1.0, 1.0);
        let k = rand_tensor(&[3, 3, 2, 3], &mut r, -1.0, 1.0);
        let expect = reference_conv2d(&x, &k, stride, padding);

        let mut b = GraphBuilder::<f64>::new();
        let xn = b.input("x", x.shape()).unwrap();
        let kn = b.input("k", k.shape()).unwrap();
        let y = b.conv2d(xn, kn, stride, padding).unwrap();
        let g = b.finish();
        let mut ex = Executor::new(g);
        ex.set_input("x", &x).unwrap();
        ex.set_input("k", &k).unwrap();
        ex.forward(&ParamStore::new()).unwrap();
        let got = ex.value(y);
        assert_eq!(got.shape(), expect.shape());
        for (a, e) in got.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-6, "conv2d mismatch: {} vs {}", a, e);
        }
    }
}

#[test]
fn conv2d_shape_mismatch_is_config_error() {
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input("x", &[1, 4, 4, 2]).unwrap();
    let k = b.input("k", &[3, 3, 5, 1]).unwrap();
    assert!(b.conv2d(x, k, 1, Padding::Same).is_err());
    let k4 = b.input("k4", &[4, 4, 2, 1]).unwrap();
    assert!(b.conv2d(x, k4, 1, Padding::Same).is_err(), "k=4 out of range");
}

#[test]
fn dense_identity_and_hand_case() {
    // weight = identity, bias = 0 -> output equals input
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input("x", &[1, 3]).unwrap();
    let w = b.input("w", &[3, 3]).unwrap();
    let bias = b.input("b", &[3]).unwrap();
    let y = b.dense(x, w, bias).unwrap();
    let g = b.finish();
    let mut ex = Executor::new(g);
    let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    ex.set_input("x", &Tensor::from_vec(&[1, 3], vec![0.3, -2.0, 5.5]).unwrap())
        .unwrap();
    ex.set_input("w", &eye).unwrap();
    ex.set_input("b", &Tensor::zeros(&[3])).unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    assert_eq!(ex.value(y).data(), &[0.3, -2.0, 5.5]);

    // input [1,2], weight [[1],[1]], bias [3] -> [6]
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input("x", &[1, 2]).unwrap();
    let w = b.input("w", &[2, 1]).unwrap();
    let bias = b.input("b", &[1]).unwrap();
    let y = b.dense(x, w, bias).unwrap();
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.set_input("x", &Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    ex.set_input("w", &Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap())
        .unwrap();
    ex.set_input("b", &Tensor::from_vec(&[1], vec![3.0]).unwrap())
        .unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    assert_eq!(ex.value(y).data(), &[6.0]);
}

#[test]
fn bilinear_identity_mesh_and_midpoint() {
    // Identity mesh reproduces the image exactly.
    let mut r = rng(3);
    let img = rand_tensor(&[1, 4, 5, 2], &mut r, 0.0, 1.0);
    let mut grid = Tensor::<f64>::zeros(&[1, 4, 5, 2]);
    for y in 0..4 {
        for x in 0..5 {
            grid.set(&[0, y, x, 0], x as f64);
            grid.set(&[0, y, x, 1], y as f64);
        }
    }
    let mut b = GraphBuilder::<f64>::new();
    let im = b.input("img", img.shape()).unwrap();
    let gr = b.input("grid", grid.shape()).unwrap();
    let y = b.bilinear_sample(im, gr).unwrap();
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.set_input("img", &img).unwrap();
    ex.set_input("grid", &grid).unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    assert_eq!(ex.value(y).data(), img.data());

    // Two-pixel image [0, 1], sample at x = 0.5 -> 0.5.
    let img = Tensor::from_vec(&[1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
    let grid = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 0.0]).unwrap();
    let mut b = GraphBuilder::<f64>::new();
    let im = b.input("img", img.shape()).unwrap();
    let gr = b.input("grid", grid.shape()).unwrap();
    let y = b.bilinear_sample(im, gr).unwrap();
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.set_input("img", &img).unwrap();
    ex.set_input("grid", &grid).unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    assert_eq!(ex.value(y).data(), &[0.5]);
}

#[test]
fn bilinear_out_of_bounds_reads_zero() {
    let img = Tensor::from_vec(&[1, 1, 2, 1], vec![3.0, 4.0]).unwrap();
    let grid = Tensor::from_vec(
        &[1, 1, 3, 2],
        vec![-5.0, 0.0, 1.5, 0.0, -0.5, 0.0],
    )
    .unwrap();
    let mut b = GraphBuilder::<f64>::new();
    let im = b.input("img", img.shape()).unwrap();
    let gr = b.input("grid", grid.shape()).unwrap();
    let y = b.bilinear_sample(im, gr).unwrap();
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.set_input("img", &img).unwrap();
    ex.set_input("grid", &grid).unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    let out = ex.value(y).data();
    assert_eq!(out[0], 0.0);
    assert_eq!(out[1], 2.0, "x=1.5 blends 4.0 with zero padding");
    assert_eq!(out[2], 1.5, "x=-0.5 blends zero padding with 3.0");
}

#[test]
fn relu_and_sigmoid_basics() {
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input("x", &[3]).unwrap();
    let r = b.relu(x);
    let s = b.sigmoid(x);
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.set_input("x", &Tensor::from_vec(&[3], vec![-1.0, 2.0, 0.0]).unwrap())
        .unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    assert_eq!(ex.value(r).data(), &[0.0, 2.0, 0.0]);
    assert!((ex.value(s).data()[2] - 0.5).abs() < 1e-15);
}

#[test]
fn sigmoid_gradient_at_zero_is_quarter() {
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input("x", &[1]).unwrap();
    let s = b.sigmoid(x);
    let loss = b.sum_all(s);
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.want_input_grads(&["x"]);
    ex.set_input("x", &Tensor::scalar(0.0)).unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    ex.backward(loss).unwrap();
    assert!((ex.input_grad("x").unwrap().data()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn dct_round_trips() {
    let mut r = rng(5);
    let x = rand_tensor(&[1, 8, 8, 1], &mut r, -1.0, 1.0);
    let mut b = GraphBuilder::<f64>::new();
    let xn = b.input("x", x.shape()).unwrap();
    let f = b.dct8x8(xn, false).unwrap();
    let back = b.dct8x8(f, true).unwrap();
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.set_input("x", &x).unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    for (a, e) in ex.value(back).data().iter().zip(x.data()) {
        assert!((a - e).abs() < 1e-6);
    }
    // DC coefficient of a constant block is 8 * mean (orthonormal scaling).
    let ones = Tensor::filled(&[1, 8, 8, 1], 1.0);
    let mut ex2 = Executor::new({
        let mut b = GraphBuilder::<f64>::new();
        let xn = b.input("x", &[1, 8, 8, 1]).unwrap();
        b.dct8x8(xn, false).unwrap();
        b.finish()
    });
    ex2.set_input("x", &ones).unwrap();
    ex2.forward(&ParamStore::new()).unwrap();
}

#[test]
fn backward_sum_and_square() {
    // loss = sum(p) -> gradient all ones.
    let mut b = GraphBuilder::<f64>::new();
    let p = b.param("p", &[4]).unwrap();
    let loss = b.sum_all(p);
    let g = b.finish();
    let mut ex = Executor::new(g);
    let mut params = ParamStore::new();
    params.insert("p", Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    ex.forward(&params).unwrap();
    ex.backward(loss).unwrap();
    assert_eq!(ex.param_grad("p").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);

    // loss = sum(p^2) at p = [1,2] -> gradient [2,4].
    let mut b = GraphBuilder::<f64>::new();
    let p = b.param("p", &[2]).unwrap();
    let sq = b.mul(p, p).unwrap();
    let loss = b.sum_all(sq);
    let g = b.finish();
    let mut ex = Executor::new(g);
    let mut params = ParamStore::new();
    params.insert("p", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    ex.forward(&params).unwrap();
    ex.backward(loss).unwrap();
    assert_eq!(ex.param_grad("p").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut b = GraphBuilder::<f64>::new();
    let p = b.param("p", &[4]).unwrap();
    let y = b.relu(p);
    let g = b.finish();
    let mut ex = Executor::new(g);
    let mut params = ParamStore::new();
    params.insert("p", Tensor::zeros(&[4]));
    ex.forward(&params).unwrap();
    assert!(ex.backward(y).is_err());
}

#[test]
fn forward_rejects_non_finite() {
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input("x", &[2]).unwrap();
    let _s = b.sigmoid(x);
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.set_input("x", &Tensor::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap())
        .unwrap();
    assert!(ex.forward(&ParamStore::new()).is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(17);
    let x = rand_tensor(&[2, 8, 8, 3], &mut r, 0.0, 1.0);
    let k = rand_tensor(&[3, 3, 3, 4], &mut r, -0.5, 0.5);
    let mut b = GraphBuilder::<f64>::new();
    let xn = b.input("x", x.shape()).unwrap();
    let kn = b.input("k", k.shape()).unwrap();
    let c = b.conv2d(xn, kn, 2, Padding::Same).unwrap();
    let rl = b.relu(c);
    let y = b.mean_all(rl);
    let g = b.finish();
    let run = |g: &Arc<super::Graph<f64>>| {
        let mut ex = Executor::new(Arc::clone(g));
        ex.set_input("x", &x).unwrap();
        ex.set_input("k", &k).unwrap();
        ex.forward(&ParamStore::new()).unwrap();
        ex.value(y).data().to_vec()
    };
    assert_eq!(run(&g), run(&g));
}

// --- finite-difference checks over every primitive, wide precision ---

const FD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

#[test]
fn fd_conv2d() {
    let mut r = rng(100);
    for i in 0..10 {
        let x = rand_tensor(&[1, 6, 6, 2], &mut r, -1.0, 1.0);
        let k = rand_tensor(&[3, 3, 2, 2], &mut r, -1.0, 1.0);
        let stride = 1 + (i % 2);
        let inputs = [("x", x), ("k", k)];
        for t in ["x", "k"] {
            fd_input_check(
                |b| {
                    let xn = b.input("x", &[1, 6, 6, 2]).unwrap();
                    let kn = b.input("k", &[3, 3, 2, 2]).unwrap();
                    b.conv2d(xn, kn, stride, Padding::Same).unwrap()
                },
                &inputs,
                t,
                FD_STEP,
                FD_TOL,
            );
        }
    }
}

#[test]
fn fd_depthwise() {
    let mut r = rng(101);
    for _ in 0..10 {
        let x = rand_tensor(&[2, 6, 6, 3], &mut r, -1.0, 1.0);
        let k = rand_tensor(&[2, 5, 5], &mut r, -0.5, 0.5);
        let inputs = [("x", x), ("k", k)];
        for t in ["x", "k"] {
            fd_input_check(
                |b| {
                    let xn = b.input("x", &[2, 6, 6, 3]).unwrap();
                    let kn = b.input("k", &[2, 5, 5]).unwrap();
                    b.depthwise_conv2d(xn, kn).unwrap()
                },
                &inputs,
                t,
                FD_STEP,
                FD_TOL,
            );
        }
    }
}

#[test]
fn fd_row_broadcast_ops() {
    let mut r = rng(112);
    for _ in 0..10 {
        let x = rand_tensor(&[3, 4, 4, 3], &mut r, -1.0, 1.0);
        let s = rand_tensor(&[3], &mut r, 0.5, 1.5);
        let o = rand_tensor(&[3], &mut r, -0.3, 0.3);
        let bias = rand_tensor(&[3, 3], &mut r, -0.2, 0.2);
        let inputs = [("x", x), ("s", s), ("o", o), ("bias", bias)];
        for t in ["x", "s", "o", "bias"] {
            fd_input_check(
                |b| {
                    let xn = b.input("x", &[3, 4, 4, 3]).unwrap();
                    let sn = b.input("s", &[3]).unwrap();
                    let on = b.input("o", &[3]).unwrap();
                    let bn = b.input("bias", &[3, 3]).unwrap();
                    let ab = b.add_channel_bias(xn, bn).unwrap();
                    let sc = b.scale_rows(ab, sn).unwrap();
                    let of = b.offset_rows(sc, on).unwrap();
                    let gl = b.gray_luma(of, [0.299, 0.587, 0.114]).unwrap();
                    b.lerp_rows(of, gl, sn).unwrap()
                },
                &inputs,
                t,
                FD_STEP,
                FD_TOL,
            );
        }
    }
}

#[test]
fn fd_per_image_block_scale() {
    let mut r = rng(113);
    for _ in 0..5 {
        let x = rand_tensor(&[2, 8, 8, 3], &mut r, -1.0, 1.0);
        let t1 = rand_tensor(&[2, 8, 8, 3], &mut r, 0.5, 2.0);
        let inputs = [("x", x), ("t1", t1)];
        for t in ["x", "t1"] {
            fd_input_check(
                |b| {
                    let xn = b.input("x", &[2, 8, 8, 3]).unwrap();
                    let tn = b.input("t1", &[2, 8, 8, 3]).unwrap();
                    b.block_scale(xn, tn, true).unwrap()
                },
                &inputs,
                t,
                FD_STEP,
                FD_TOL,
            );
        }
    }
}

#[test]
fn fd_dense() {
    let mut r = rng(102);
    for _ in 0..10 {
        let x = rand_tensor(&[2, 5], &mut r, -1.0, 1.0);
        let w = rand_tensor(&[5, 4], &mut r, -1.0, 1.0);
        let bias = rand_tensor(&[4], &mut r, -1.0, 1.0);
        let inputs = [("x", x), ("w", w), ("b", bias)];
        for t in ["x", "w", "b"] {
            fd_input_check(
                |b| {
                    let xn = b.input("x", &[2, 5]).unwrap();
                    let wn = b.input("w", &[5, 4]).unwrap();
                    let bn = b.input("b", &[4]).unwrap();
                    b.dense(xn, wn, bn).unwrap()
                },
                &inputs,
                t,
                FD_STEP,
                FD_TOL,
            );
        }
    }
}

#[test]
fn fd_bilinear_image_and_grid() {
    let mut r = rng(103);
    for _ in 0..10 {
        let img = rand_tensor(&[1, 5, 5, 2], &mut r, 0.0, 1.0);
        // Continuous coordinates kept away from the integer lattice so the
        // central difference does not straddle an interpolation kink.
        let mut grid = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
        for i in 0..16 {
            let gx = r.gen_range(-0.7..4.7);
            let gy = r.gen_range(-0.7..4.7);
            let snap = |v: f64| {
                let fr = v - v.floor();
                if fr < 0.05 {
                    v + 0.1
                } else if fr > 0.95 {
                    v - 0.1
                } else {
                    v
                }
            };
            grid.data_mut()[i * 2] = snap(gx);
            grid.data_mut()[i * 2 + 1] = snap(gy);
        }
        let inputs = [("img", img), ("grid", grid)];
        for (t, tol) in [("img", FD_TOL), ("grid", 1e-4)] {
            fd_input_check(
                |b| {
                    let im = b.input("img", &[1, 5, 5, 2]).unwrap();
                    let gr = b.input("grid", &[1, 4, 4, 2]).unwrap();
                    b.bilinear_sample(im, gr).unwrap()
                },
                &inputs,
                t,
                FD_STEP,
                tol,
            );
        }
    }
}

#[test]
fn fd_affine_grid() {
    let mut r = rng(104);
    for _ in 0..10 {
        let mut theta = rand_tensor(&[1, 6], &mut r, -0.2, 0.2);
        theta.data_mut()[0] += 1.0;
        theta.data_mut()[4] += 1.0;
        let inputs = [("theta", theta)];
        fd_input_check(
            |b| {
                let t = b.input("theta", &[1, 6]).unwrap();
                b.affine_grid(t, 6, 6, 6, 6).unwrap()
            },
            &inputs,
            "theta",
            FD_STEP,
            FD_TOL,
        );
    }
}

#[test]
fn fd_elementwise_and_reductions() {
    let mut r = rng(105);
    for _ in 0..10 {
        let a = rand_tensor(&[2, 4, 4, 3], &mut r, -1.0, 1.0);
        let c = rand_tensor(&[2, 4, 4, 3], &mut r, -1.0, 1.0);
        let s = rand_tensor(&[1], &mut r, 0.5, 1.5);
        let bias = rand_tensor(&[3], &mut r, -0.3, 0.3);
        let inputs = [("a", a), ("c", c), ("s", s), ("bias", bias)];
        for t in ["a", "c", "s", "bias"] {
            fd_input_check(
                |b| {
                    let an = b.input("a", &[2, 4, 4, 3]).unwrap();
                    let cn = b.input("c", &[2, 4, 4, 3]).unwrap();
                    let sn = b.input("s", &[1]).unwrap();
                    let bn = b.input("bias", &[3]).unwrap();
                    let m = b.mul(an, cn).unwrap();
                    let sc = b.scale_by(m, sn).unwrap();
                    let of = b.offset_by(sc, sn).unwrap();
                    let ab = b.add_channel_bias(of, bn).unwrap();
                    let sub = b.sub(ab, cn).unwrap();
                    let mc = b.mul_const(sub, 0.7);
                    let ac = b.add_const(mc, 0.1);
                    let gl = b.gray_luma(ac, [0.299, 0.587, 0.114]).unwrap();
                    let cm = b
                        .color_matrix(
                            gl,
                            [[0.5, 0.2, 0.1], [0.1, 0.6, 0.2], [0.05, 0.15, 0.9]],
                            [0.01, -0.02, 0.03],
                        )
                        .unwrap();
                    let sm = b.spatial_mean(cm).unwrap();
                    b.reshape(sm, &[6]).unwrap()
                },
                &inputs,
                t,
                FD_STEP,
                FD_TOL,
            );
        }
    }
}

#[test]
fn fd_pools_upsample_concat() {
    let mut r = rng(106);
    for _ in 0..10 {
        let a = rand_tensor(&[1, 4, 4, 2], &mut r, -1.0, 1.0);
        let c = rand_tensor(&[1, 4, 4, 1], &mut r, -1.0, 1.0);
        let inputs = [("a", a), ("c", c)];
        for t in ["a", "c"] {
            fd_input_check(
                |b| {
                    let an = b.input("a", &[1, 4, 4, 2]).unwrap();
                    let cn = b.input("c", &[1, 4, 4, 1]).unwrap();
                    let cat = b.concat_channels(&[an, cn]).unwrap();
                    let up = b.upsample2x(cat).unwrap();
                    let mp = b.maxpool2x2(up).unwrap();
                    b.maxpool2x2(mp).unwrap()
                },
                &inputs,
                t,
                FD_STEP,
                FD_TOL,
            );
        }
    }
}

#[test]
fn fd_dct_blockscale() {
    let mut r = rng(107);
    for _ in 0..10 {
        let x = rand_tensor(&[1, 8, 8, 2], &mut r, -1.0, 1.0);
        let t1 = rand_tensor(&[8, 8, 2], &mut r, 0.5, 2.0);
        let t2 = rand_tensor(&[8, 8, 2], &mut r, 0.5, 2.0);
        let inputs = [("x", x), ("t1", t1), ("t2", t2)];
        for t in ["x", "t1", "t2"] {
            fd_input_check(
                |b| {
                    let xn = b.input("x", &[1, 8, 8, 2]).unwrap();
                    let t1n = b.input("t1", &[8, 8, 2]).unwrap();
                    let t2n = b.input("t2", &[8, 8, 2]).unwrap();
                    let f = b.dct8x8(xn, false).unwrap();
                    let d = b.block_scale(f, t1n, true).unwrap();
                    let m = b.block_scale(d, t2n, false).unwrap();
                    b.dct8x8(m, true).unwrap()
                },
                &inputs,
                t,
                FD_STEP,
                FD_TOL,
            );
        }
    }
}

#[test]
fn fd_jpeg_quant_soft() {
    // Values sampled away from the |x| = 0.5 kink, where the derivative is
    // well defined on both branches.
    let mut r = rng(111);
    for _ in 0..10 {
        let data: Vec<f64> = (0..32)
            .map(|_| {
                let v: f64 = if r.gen_bool(0.5) {
                    r.gen_range(0.0..0.45)
                } else {
                    r.gen_range(0.55..2.0)
                };
                if r.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::from_vec(&[32], data).unwrap();
        let inputs = [("x", x)];
        fd_input_check(
            |b| {
                let xn = b.input("x", &[32]).unwrap();
                b.jpeg_quant_soft(xn)
            },
            &inputs,
            "x",
            FD_STEP,
            FD_TOL,
        );
    }
}

#[test]
fn fd_pad_crop() {
    let mut r = rng(108);
    for _ in 0..10 {
        let x = rand_tensor(&[1, 6, 6, 2], &mut r, -1.0, 1.0);
        let inputs = [("x", x)];
        fd_input_check(
            |b| {
                let xn = b.input("x", &[1, 6, 6, 2]).unwrap();
                let p = b.pad_reflect_to8(xn).unwrap();
                b.crop_spatial(p, 6, 6).unwrap()
            },
            &inputs,
            "x",
            FD_STEP,
            FD_TOL,
        );
    }
}

#[test]
fn fd_bce_and_sigmoid() {
    let mut r = rng(109);
    for _ in 0..10 {
        let z = rand_tensor(&[2, 6], &mut r, -3.0, 3.0);
        let t: Tensor<f64> = Tensor::from_vec(
            &[2, 6],
            (0..12).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let inputs = [("z", z), ("t", t)];
        fd_input_check(
            |b| {
                let zn = b.input("z", &[2, 6]).unwrap();
                let tn = b.input("t", &[2, 6]).unwrap();
                let s = b.sigmoid(zn);
                let _ = s;
                b.bce_with_logits(zn, tn).unwrap()
            },
            &inputs,
            "z",
            FD_STEP,
            FD_TOL,
        );
    }
}

#[test]
fn fd_relu_sigmoid_clip_interior() {
    let mut r = rng(110);
    for _ in 0..10 {
        // Keep values away from the relu kink and inside the clip range so
        // the straight-through gradient equals the true one.
        let n: usize = 24;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = r.gen_range(0.1..0.9);
                if r.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::from_vec(&[n], data).unwrap();
        let inputs = [("x", x)];
        fd_input_check(
            |b| {
                let xn = b.input("x", &[24]).unwrap();
                let rl = b.relu(xn);
                let sg = b.sigmoid(rl);
                b.clip_ste(sg, 0.0, 1.0)
            },
            &inputs,
            "x",
            FD_STEP,
            FD_TOL,
        );
    }
}

#[test]
fn clip_ste_gradient_passes_through_outside_range() {
    // Straight-through by design: saturated values still get gradient 1.
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input("x", &[3]).unwrap();
    let c = b.clip_ste(x, 0.0, 1.0);
    let loss = b.sum_all(c);
    let g = b.finish();
    let mut ex = Executor::new(g);
    ex.want_input_grads(&["x"]);
    ex.set_input("x", &Tensor::from_vec(&[3], vec![-2.0, 0.5, 3.0]).unwrap())
        .unwrap();
    ex.forward(&ParamStore::new()).unwrap();
    assert_eq!(ex.value(c).data(), &[0.0, 0.5, 1.0]);
    ex.backward(loss).unwrap();
    assert_eq!(ex.input_grad("x").unwrap().data(), &[1.0, 1.0, 1.0]);
}
