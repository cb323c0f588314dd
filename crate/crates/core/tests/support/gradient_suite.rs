//! Finite-difference gradient checks shared by the `gradients` and `acceptance` targets.

use std::sync::Arc;

use morphoscope::autodiff::{Tape, Var};
use morphoscope::net::{init_params, ArchSpec, Layer, NetParams};
use morphoscope::tensor::{grid_points, rng_from_seed, whiten, ImageTensor};
use morphoscope::train::{loss_and_grad, loss_forward};
use morphoscope::LandmarkSet;
use rand::Rng;

const H: f64 = 1e-5;

fn random(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

/// Relative error between the tape gradient of `f` at `x0` and central differences.
fn check(x0: &[f64], shape: &[usize], f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(shape.to_vec(), x0.to_vec());
    let y = f(&mut tape, x);
    let analytic = tape
        .backward(y)
        .unwrap()
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x0.len()]);
    let eval = |i: usize, delta: f64| {
        let mut p = x0.to_vec();
        p[i] += delta;
        let mut tape = Tape::new();
        let x = tape.leaf(shape.to_vec(), p);
        let y = f(&mut tape, x);
        tape.scalar(y)
    };
    let numeric: Vec<f64> = (0..x0.len()).map(|i| (eval(i, H) - eval(i, -H)) / (2.0 * H)).collect();
    rel_err(&analytic, &numeric)
}

/// Scalar `c . v` with a fixed random `c`, exercising the whole Jacobian.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let n = tape.value(v).len();
    let c = tape.constant(vec![1, n], random(n, -1.0, 1.0, seed));
    let zero = tape.constant(vec![1], vec![0.0]);
    tape.dense(v, c, zero).unwrap()
}

pub fn assert_close(err: f64, tol: f64, what: &str) {
    assert!(err <= tol, "{what}: relative error {err:.3e} exceeds {tol:.0e}");
}

pub fn conv_2d_input_kernel_bias() {
    let (c, o) = (2, 3);
    let input = random(c * 7 * 6, -1.0, 1.0, 1);
    let kernel = random(o * c * 9, -1.0, 1.0, 2);
    let bias = random(o, -1.0, 1.0, 3);
    let (k2, b2) = (kernel.clone(), bias.clone());
    let e = check(&input, &[c, 7, 6], |t, x| {
        let k = t.constant(vec![o, c, 9], k2.clone());
        let b = t.constant(vec![o], b2.clone());
        let y = t.conv(x, k, b, 2).unwrap();
        project(t, y, 9)
    });
    assert_close(e, 1e-6, "conv d/input");
    let i2 = input.clone();
    let e = check(&kernel, &[o, c, 9], |t, k| {
        let x = t.constant(vec![c, 7, 6], i2.clone());
        let b = t.constant(vec![o], b2.clone());
        let y = t.conv(x, k, b, 2).unwrap();
        project(t, y, 9)
    });
    assert_close(e, 1e-6, "conv d/kernel");
    let e = check(&bias, &[o], |t, b| {
        let x = t.constant(vec![c, 7, 6], input.clone());
        let k = t.constant(vec![o, c, 9], kernel.clone());
        let y = t.conv(x, k, b, 1).unwrap();
        project(t, y, 9)
    });
    assert_close(e, 1e-6, "conv d/bias");
}

pub fn conv_3d_input_and_kernel() {
    let (c, o) = (2, 2);
    let input = random(c * 5 * 4 * 3, -1.0, 1.0, 4);
    let kernel = random(o * c * 27, -1.0, 1.0, 5);
    let k2 = kernel.clone();
    let e = check(&input, &[c, 5, 4, 3], |t, x| {
        let k = t.constant(vec![o, c, 27], k2.clone());
        let b = t.constant(vec![o], vec![0.1, -0.2]);
        let y = t.conv(x, k, b, 2).unwrap();
        project(t, y, 6)
    });
    assert_close(e, 1e-6, "conv3d d/input");
    let e = check(&kernel, &[o, c, 27], |t, k| {
        let x = t.constant(vec![c, 5, 4, 3], input.clone());
        let b = t.constant(vec![o], vec![0.1, -0.2]);
        let y = t.conv(x, k, b, 2).unwrap();
        project(t, y, 6)
    });
    assert_close(e, 1e-6, "conv3d d/kernel");
}

pub fn dense_all_arguments() {
    let (m, n) = (4, 6);
    let x0 = random(n, -1.0, 1.0, 10);
    let w0 = random(m * n, -1.0, 1.0, 11);
    let b0 = random(m, -1.0, 1.0, 12);
    let (w1, b1) = (w0.clone(), b0.clone());
    let e = check(&x0, &[n], |t, x| {
        let w = t.constant(vec![m, n], w1.clone());
        let b = t.constant(vec![m], b1.clone());
        let y = t.dense(x, w, b).unwrap();
        project(t, y, 13)
    });
    assert_close(e, 1e-6, "dense d/input");
    let x1 = x0.clone();
    let e = check(&w0, &[m, n], |t, w| {
        let x = t.constant(vec![n], x1.clone());
        let b = t.constant(vec![m], b1.clone());
        let y = t.dense(x, w, b).unwrap();
        let y = t.tanh(y);
        project(t, y, 13)
    });
    assert_close(e, 1e-6, "dense d/weights");
    let e = check(&b0, &[m], |t, b| {
        let x = t.constant(vec![n], x0.clone());
        let w = t.constant(vec![m, n], w0.clone());
        let y = t.dense(x, w, b).unwrap();
        t.sum_squares(y)
    });
    assert_close(e, 1e-6, "dense d/bias");
}

pub fn relu_away_from_kink() {
    let x0: Vec<f64> = random(40, -1.0, 1.0, 20)
        .into_iter()
        .map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v })
        .collect();
    let e = check(&x0, &[40], |t, x| {
        let y = t.relu(x);
        project(t, y, 21)
    });
    assert_close(e, 1e-6, "relu");
}

pub fn tanh_elementwise() {
    let x0 = random(40, -3.0, 3.0, 22);
    let e = check(&x0, &[40], |t, x| {
        let y = t.tanh(x);
        project(t, y, 23)
    });
    assert_close(e, 1e-6, "tanh");
}

pub fn plumbing_ops() {
    let x0 = random(6, -1.0, 1.0, 24);
    let target = Arc::new(random(6, -1.0, 1.0, 25));
    let e = check(&x0, &[3, 2], |t, x| {
        let y = t.scale(x, -1.5);
        let y = t.add(y, x).unwrap();
        let y = t.append_rows(y, &[0.5, 0.25]).unwrap();
        let y = t.reshape(y, vec![2, 4]).unwrap();
        let y = t.reshape(y, vec![4, 2]).unwrap();
        let y = t.pad_rows(y, 1).unwrap();
        let y = t.reshape(y, vec![10]).unwrap();
        let s = t.sum(y);
        let q = t.sum_squares(y);
        let m = t.mse(x, target.clone()).unwrap();
        let sq = t.add(s, q).unwrap();
        t.add(sq, m).unwrap()
    });
    assert_close(e, 1e-6, "plumbing");
}

/// Bilinear/trilinear sampling at coordinates at least 1e-3 (index space) from cell edges.
fn interior_coords(dims: &[usize], n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(n * dims.len());
    while out.len() < n * dims.len() {
        let p: Vec<f64> = dims.iter().map(|_| rng.gen_range(-0.95..0.95)).collect();
        let ok = p.iter().zip(dims).all(|(&x, &m)| {
            let f = (x + 1.0) * 0.5 * (m - 1) as f64;
            let frac = f - f.floor();
            frac > 1e-3 && frac < 1.0 - 1e-3
        });
        if ok {
            out.extend(p);
        }
    }
    out
}

pub fn sampler_2d_and_3d() {
    for dims in [vec![9usize, 7], vec![5, 6, 4]] {
        let len: usize = dims.iter().product();
        let img = ImageTensor::new(dims.clone(), random(len, 0.0, 1.0, 30)).unwrap();
        let coords = interior_coords(&dims, 25, 31);
        let d = dims.len();
        let e = check(&coords, &[25, d], |t, c| {
            let v = t.sample(&img, c).unwrap();
            project(t, v, 32)
        });
        assert_close(e, 1e-6, &format!("sample {dims:?}"));
    }
}

pub fn sampler_constant_image_has_zero_gradient() {
    let img = ImageTensor::new(vec![6, 6], vec![0.7; 36]).unwrap();
    let mut t = Tape::new();
    let c = t.leaf(vec![10, 2], random(20, -1.2, 1.2, 33));
    let v = t.sample(&img, c).unwrap();
    let s = t.sum(v);
    let g = t.backward(s).unwrap();
    assert!(g.get(c).unwrap().iter().all(|&x| x == 0.0));
}

fn random_landmarks(k: usize, d: usize, seed: u64) -> Vec<f64> {
    random(k * d, -0.9, 0.9, seed)
}

fn weights_energy(t: &mut Tape, sources: Var, targets: Var) -> Var {
    let (_, w) = t.tps_solve(sources, targets).unwrap();
    t.sum_squares(w)
}

pub fn tps_solve_wrt_sources() {
    let lt = random_landmarks(6, 2, 40);
    let ls = random_landmarks(6, 2, 41);
    let lt2 = lt.clone();
    let e = check(&ls, &[6, 2], |t, s| {
        let tg = t.constant(vec![6, 2], lt2.clone());
        weights_energy(t, s, tg)
    });
    assert_close(e, 1e-5, "solve d/l_S");
    // identical landmark sets: sources only move the interpolation values
    let e = check(&lt, &[6, 2], |t, s| {
        let tg = t.constant(vec![6, 2], lt.clone());
        weights_energy(t, s, tg)
    });
    assert_close(e, 1e-5, "solve d/l_S at l_S = l_T");
}

pub fn tps_solve_wrt_targets_2d_and_3d() {
    for (d, seed) in [(2usize, 42u64), (3, 43)] {
        let k = 8;
        let lt = random_landmarks(k, d, seed);
        let ls = random_landmarks(k, d, seed + 10);
        let e = check(&lt, &[k, d], |t, tg| {
            let s = t.constant(vec![k, d], ls.clone());
            weights_energy(t, s, tg)
        });
        assert_close(e, 1e-5, &format!("solve d/l_T ({d}d)"));
    }
}

pub fn tps_map_wrt_weights_and_targets() {
    for d in [2usize, 3] {
        let k = 7;
        let n_sys = k + d + 1;
        let lt = random_landmarks(k, d, 50 + d as u64);
        let w0 = random(n_sys * d, -0.5, 0.5, 60 + d as u64);
        let pts = Arc::new(random(40 * d, -1.0, 1.0, 70 + d as u64));
        let (lt2, p2) = (lt.clone(), pts.clone());
        let e = check(&w0, &[n_sys, d], |t, w| {
            let tg = t.constant(vec![k, d], lt2.clone());
            let y = t.tps_map(w, tg, p2.clone()).unwrap();
            project(t, y, 80)
        });
        assert_close(e, 1e-6, &format!("tps_map d/W ({d}d)"));
        let e = check(&lt, &[k, d], |t, tg| {
            let w = t.constant(vec![n_sys, d], w0.clone());
            let y = t.tps_map(w, tg, pts.clone()).unwrap();
            project(t, y, 80)
        });
        assert_close(e, 1e-6, &format!("tps_map d/l_T ({d}d)"));
    }
}

fn smooth_image(dims: &[usize], cx: f64, cy: f64) -> ImageTensor {
    ImageTensor::from_fn(dims.to_vec(), |p| {
        (-3.0 * (p[0] - cx).powi(2) - 5.0 * (p[1] - cy).powi(2)).exp() + 0.3 * (2.0 * p[1]).sin()
    })
}

pub fn targets_through_full_registration_loss() {
    let dims = [16usize, 16];
    let source = smooth_image(&dims, 0.1, -0.05);
    let target = Arc::new(smooth_image(&dims, -0.05, 0.1).into_data());
    let grid = Arc::new(grid_points(&dims));
    let k = 7;
    let lt = random_landmarks(k, 2, 90);
    let ls: Vec<f64> = lt.iter().map(|v| v + 0.05 * (v * 7.0).sin()).collect();
    let e = check(&lt, &[k, 2], |t, tg| {
        let s = t.constant(vec![k, 2], ls.clone());
        let (a, w) = t.tps_solve(s, tg).unwrap();
        let coords = t.tps_map(w, tg, grid.clone()).unwrap();
        let r = t.sample(&source, coords).unwrap();
        let m = t.mse(r, target.clone()).unwrap();
        let c = t.condition(a).unwrap();
        let c = t.scale(c, 1e-4);
        t.add(m, c).unwrap()
    });
    assert_close(e, 1e-4, "loss d/l_T");
}

pub fn condition_number_gradient() {
    let mut a0 = random(25, -1.0, 1.0, 100);
    for i in 0..5 {
        a0[i * 6] += 4.0;
    }
    let e = check(&a0, &[5, 5], |t, a| t.condition(a).unwrap());
    assert_close(e, 1e-6, "kappa_F");
}

pub fn condition_number_grows_near_singularity() {
    let base = random(16, -1.0, 1.0, 101);
    let mut last = (0.0, 0.0);
    for eps in [1e-1, 1e-2, 1e-3] {
        let mut a0 = base.clone();
        // make rows 0 and 1 nearly equal
        for j in 0..4 {
            a0[4 + j] = a0[j] + eps * (j as f64 + 1.0);
        }
        let mut t = Tape::new();
        let a = t.leaf(vec![4, 4], a0);
        let c = t.condition(a).unwrap();
        let kappa = t.scalar(c);
        let g = t.backward(c).unwrap();
        let gnorm = g.get(a).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(kappa > last.0 && gnorm > last.1, "eps {eps}: kappa {kappa}, |grad| {gnorm}");
        last = (kappa, gnorm);
    }
}

fn tiny_network(seed: u64) -> NetParams {
    let arch = ArchSpec {
        input_dims: vec![8, 8],
        layers: vec![
            Layer::Conv { out_channels: 2, stride: 2 },
            Layer::Tanh,
            Layer::Dense { units: 8 },
            Layer::Tanh,
        ],
    };
    let mut net = init_params(&arch, LandmarkSet::new(2, Vec::new()).unwrap(), seed).unwrap();
    // larger head weights so every parameter has a visible effect
    let len = net.params().len();
    for v in &mut net.params_mut()[len - 2].data {
        *v *= 30.0;
    }
    net
}

pub fn full_pipeline_every_parameter() {
    let net = tiny_network(3);
    let dims = [8usize, 8];
    let source = whiten(&smooth_image(&dims, 0.15, -0.1));
    let target = whiten(&smooth_image(&dims, -0.1, 0.05));
    let target_data = Arc::new(target.data().to_vec());
    let grid = Arc::new(grid_points(&dims));
    let lambda = 1e-3;
    let (_, grads) = loss_and_grad(&net, &source, &target, &source, &target_data, &grid, lambda).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (pi, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let eval = |delta: f64| {
                let mut p = net.clone();
                p.params_mut()[pi].data[i] += delta;
                loss_forward(&p, &source, &target, &source, &target, lambda).unwrap().total
            };
            analytic.push(g[i]);
            numeric.push((eval(H) - eval(-H)) / (2.0 * H));
        }
    }
    assert_eq!(analytic.len(), net.num_values());
    assert_close(rel_err(&analytic, &numeric), 1e-4, "full pipeline");
}

/// Every check, by name.
pub const CHECKS: &[(&str, fn())] = &[
    ("conv_2d_input_kernel_bias", conv_2d_input_kernel_bias),
    ("conv_3d_input_and_kernel", conv_3d_input_and_kernel),
    ("dense_all_arguments", dense_all_arguments),
    ("relu_away_from_kink", relu_away_from_kink),
    ("tanh_elementwise", tanh_elementwise),
    ("plumbing_ops", plumbing_ops),
    ("sampler_2d_and_3d", sampler_2d_and_3d),
    ("sampler_constant_image_has_zero_gradient", sampler_constant_image_has_zero_gradient),
    ("tps_solve_wrt_sources", tps_solve_wrt_sources),
    ("tps_solve_wrt_targets_2d_and_3d", tps_solve_wrt_targets_2d_and_3d),
    ("tps_map_wrt_weights_and_targets", tps_map_wrt_weights_and_targets),
    ("targets_through_full_registration_loss", targets_through_full_registration_loss),
    ("condition_number_gradient", condition_number_gradient),
    ("condition_number_grows_near_singularity", condition_number_grows_near_singularity),
    ("full_pipeline_every_parameter", full_pipeline_every_parameter),
];
