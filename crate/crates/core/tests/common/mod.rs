//! Finite-difference oracles shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snn_lottery::autograd::{SpikeFn, Tape, Var};
use snn_lottery::snn::lif::LifParams;
use snn_lottery::snn::network::{loss_gradients, LayerSpec, NetworkSpec, NeuronMode};
use snn_lottery::{NumArray, ParamKind};

pub const H: f64 = 1e-3;
pub const INSTANCES: u64 = 20;
pub const PRIMITIVE_TOL: f64 = 1e-3;
pub const NETWORK_TOL: f64 = 1e-2;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn arr(shape: &[usize], v: &[f64]) -> NumArray {
    NumArray::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` with respect to every input coordinate.
pub fn fd(inputs: &[Vec<f64>], f: &dyn Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    inputs
        .iter()
        .enumerate()
        .map(|(k, x)| {
            (0..x.len())
                .map(|i| {
                    let orig = work[k][i];
                    work[k][i] = orig + H;
                    let up = f(&work);
                    work[k][i] = orig - H;
                    let down = f(&work);
                    work[k][i] = orig;
                    (up - down) / (2.0 * H)
                })
                .collect()
        })
        .collect()
}

/// Norm-wise relative error.
pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(&a, &n)| (a as f64 - n).powi(2)).sum();
    let na: f64 = analytic.iter().map(|&a| (a as f64).powi(2)).sum();
    let nn: f64 = numeric.iter().map(|n| n * n).sum();
    (diff / na.max(nn).max(1e-12)).sqrt()
}

/// Largest relative error over the instances for one primitive. The scalar
/// objective is `sum(op(x) * r)` for a fixed random weighting `r`.
pub fn primitive_error(
    shapes: &[Vec<usize>],
    scale: f64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rand_vec(&mut rng, s.iter().product(), scale))
            .collect();

        let mut tape = Tape::new();
        let leaves: Vec<Var> = shapes.iter().zip(&inputs).map(|(s, x)| tape.param(arr(s, x))).collect();
        let y = build(&mut tape, &leaves);
        let out_shape = tape.value(y).shape().to_vec();
        let r = rand_vec(&mut rng, tape.value(y).len(), 1.0);
        let rv = tape.constant(arr(&out_shape, &r));
        let weighted = tape.mul(y, rv).unwrap();
        let loss = tape.sum(weighted);
        tape.backward(loss).unwrap();

        let objective = |xs: &[Vec<f64>]| dot(&reference(xs), &r);
        let numeric = fd(&inputs, &objective);
        for (k, leaf) in leaves.iter().enumerate() {
            worst = worst.max(rel_err(tape.grad(*leaf).expect("leaf gradient"), &numeric[k]));
        }
    }
    worst
}

pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn conv_ref(x: &[f64], w: &[f64], xs: [usize; 4], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [f, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((fi * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn smooth_step_ref(v: f64, w: f64) -> f64 {
    if v <= -w {
        0.0
    } else if v >= w {
        1.0
    } else if v <= 0.0 {
        (v + w).powi(2) / (2.0 * w * w)
    } else {
        1.0 - (w - v).powi(2) / (2.0 * w * w)
    }
}

pub fn cross_entropy_ref(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

/// Largest error of every primitive, by name.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let (m, k, n) = (3, 4, 5);
    out.push((
        "matmul".into(),
        primitive_error(&[vec![m, k], vec![k, n]], 1.0, &|t, v| t.matmul(v[0], v[1]).unwrap(), &|x| {
            matmul_ref(&x[0], &x[1], m, k, n)
        }),
    ));
    for (stride, pad, hw, k) in [(1, 1, 5, 3), (2, 0, 5, 3), (2, 1, 6, 2), (1, 0, 4, 1)] {
        let xs = [2, 2, hw, hw];
        let ws = [3, 2, k, k];
        out.push((
            format!("conv2d s{stride} p{pad} k{k}"),
            primitive_error(
                &[xs.to_vec(), ws.to_vec()],
                1.0,
                &|t, v| t.conv2d(v[0], v[1], stride, pad).unwrap(),
                &|x| conv_ref(&x[0], &x[1], xs, ws, stride, pad),
            ),
        ));
    }
    let (b, c, inner) = (2, 3, 4);
    out.push((
        "add_bias".into(),
        primitive_error(&[vec![b, c, 2, 2], vec![c]], 1.0, &|t, v| t.add_bias(v[0], v[1]).unwrap(), &|x| {
            (0..b * c * inner).map(|i| x[0][i] + x[1][(i / inner) % c]).collect()
        }),
    ));
    out.push((
        "channel_affine".into(),
        primitive_error(
            &[vec![b, c, 2, 2], vec![c], vec![c]],
            1.0,
            &|t, v| t.channel_affine(v[0], v[1], v[2]).unwrap(),
            &|x| {
                (0..b * c * inner)
                    .map(|i| x[0][i] * x[1][(i / inner) % c] + x[2][(i / inner) % c])
                    .collect()
            },
        ),
    ));
    out.push((
        "mul".into(),
        primitive_error(&[vec![3, 4], vec![3, 4]], 1.0, &|t, v| t.mul(v[0], v[1]).unwrap(), &|x| {
            x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()
        }),
    ));
    out.push((
        "add".into(),
        primitive_error(&[vec![3, 4], vec![3, 4]], 1.0, &|t, v| t.add(v[0], v[1]).unwrap(), &|x| {
            x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()
        }),
    ));
    out.push((
        "scalar_affine".into(),
        primitive_error(&[vec![12]], 1.0, &|t, v| t.scalar_affine(v[0], -0.7, 0.3), &|x| {
            x[0].iter().map(|a| -0.7 * a + 0.3).collect()
        }),
    ));
    out.push((
        "smooth spike".into(),
        primitive_error(&[vec![4, 5]], 2.0, &|t, v| t.spike(v[0], 1.0, 1.0, SpikeFn::Smooth), &|x| {
            x[0].iter().map(|&u| smooth_step_ref(u - 1.0, 1.0)).collect()
        }),
    ));
    out.push((
        "avg_pool2d".into(),
        primitive_error(&[vec![2, 3, 4, 4]], 1.0, &|t, v| t.avg_pool2d(v[0], 2).unwrap(), &|x| {
            let mut o = vec![0.0; 24];
            for p in 0..6 {
                for iy in 0..4 {
                    for ix in 0..4 {
                        o[p * 4 + (iy / 2) * 2 + ix / 2] += x[0][p * 16 + iy * 4 + ix] / 4.0;
                    }
                }
            }
            o
        }),
    ));
    out.push((
        "reshape".into(),
        primitive_error(&[vec![2, 3, 2]], 1.0, &|t, v| t.reshape(v[0], &[2, 6]).unwrap(), &|x| x[0].clone()),
    ));
    out.push(("relu".into(), relu_error()));
    out.push(("softmax cross-entropy".into(), cross_entropy_error()));
    out
}

/// ReLU with every coordinate at least 0.1 away from the kink.
fn relu_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x: Vec<f64> = (0..10)
            .map(|_| rng.random_range(0.1..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let r = rand_vec(&mut rng, 10, 1.0);
        let mut tape = Tape::new();
        let xv = tape.param(arr(&[10], &x));
        let y = tape.relu(xv);
        let rv = tape.constant(arr(&[10], &r));
        let w = tape.mul(y, rv).unwrap();
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        let numeric = fd(&[x.clone()], &|xs| xs[0].iter().zip(&r).map(|(a, b)| a.max(0.0) * b).sum());
        worst = worst.max(rel_err(tape.grad(xv).unwrap(), &numeric[0]));
    }
    worst
}

fn cross_entropy_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (n, c) = (4, 5);
        let logits = rand_vec(&mut rng, n * c, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut tape = Tape::new();
        let lv = tape.param(arr(&[n, c], &logits));
        let loss = tape.softmax_cross_entropy(lv, &labels).unwrap();
        let value = tape.value(loss).data()[0] as f64;
        if (value - cross_entropy_ref(&logits, &labels, c)).abs() > 1e-5 {
            return f64::INFINITY;
        }
        tape.backward(loss).unwrap();
        let numeric = fd(&[logits.clone()], &|xs| cross_entropy_ref(&xs[0], &labels, c));
        worst = worst.max(rel_err(tape.grad(lv).unwrap(), &numeric[0]));
    }
    worst
}

pub fn two_layer_spec(timesteps: usize) -> NetworkSpec {
    NetworkSpec {
        input_shape: [1, 3, 3],
        num_classes: 3,
        layers: vec![
            LayerSpec::Dense {
                out_features: 6,
                bias: true,
            },
            LayerSpec::Dense {
                out_features: 3,
                bias: true,
            },
        ],
        neuron: NeuronMode::Lif,
        timesteps,
        lif: LifParams::default(),
        exempt_first_last: false,
    }
}

/// Unrolled smooth-spike LIF network in f64: one hidden spiking layer,
/// hard reset to zero, output summed over time.
#[allow(clippy::too_many_arguments)]
pub fn lif_net_ref(
    x: &[f64],
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    labels: &[usize],
    lif: &LifParams,
    timesteps: usize,
) -> f64 {
    let (d, hdim, c) = (9, 6, 3);
    let n = labels.len();
    let mut current = matmul_ref(x, w1, n, d, hdim);
    for (i, v) in current.iter_mut().enumerate() {
        *v += b1[i % hdim];
    }
    let mut membrane: Option<Vec<f64>> = None;
    let mut acc = vec![0.0; n * c];
    let (leak, theta, width) = (lif.leak as f64, lif.threshold as f64, lif.surrogate_width as f64);
    for _ in 0..timesteps {
        let u: Vec<f64> = match &membrane {
            None => current.clone(),
            Some(prev) => prev.iter().zip(&current).map(|(p, i)| leak * p + i).collect(),
        };
        let s: Vec<f64> = u.iter().map(|&v| smooth_step_ref(v - theta, width)).collect();
        membrane = Some(u.iter().zip(&s).map(|(u, s)| u * (1.0 - s)).collect());
        let out = matmul_ref(&s, w2, n, hdim, c);
        for (i, v) in out.iter().enumerate() {
            acc[i] += v + b2[i % c];
        }
    }
    cross_entropy_ref(&acc, labels, c)
}

/// Largest error of the smoothed two-layer LIF network over all tensors and instances.
pub fn smoothed_lif_error() -> f64 {
    let timesteps = 4;
    let spec = two_layer_spec(timesteps);
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut params = spec.init_params(seed, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        for p in params.iter_mut() {
            if p.kind == ParamKind::Bias {
                for v in p.value.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        let n = 4;
        let x: Vec<f64> = rand_vec(&mut rng, n * 9, 1.0).iter().map(|v| v.abs()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();

        let (loss, grads) = loss_gradients(
            &spec,
            &params,
            None,
            &arr(&[n, 1, 3, 3], &x),
            &labels,
            timesteps,
            SpikeFn::Smooth,
        )
        .unwrap();

        let flat: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.value.data().iter().map(|&v| v as f64).collect())
            .collect();
        let objective =
            |ps: &[Vec<f64>]| lif_net_ref(&x, &ps[0], &ps[1], &ps[2], &ps[3], &labels, &spec.lif, timesteps);
        if (loss as f64 - objective(&flat)).abs() > 1e-4 {
            return f64::INFINITY;
        }
        let numeric = fd(&flat, &objective);
        for (k, g) in grads.iter().enumerate() {
            worst = worst.max(rel_err(g.value.data(), &numeric[k]));
        }
    }
    worst
}
