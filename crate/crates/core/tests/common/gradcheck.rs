//! Analytic tape gradients against central finite differences taken on the
//! 64-bit replay path.

use graphstitch::tensor::{replay_f64, Op, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const INSTANCES: usize = 10;

struct Case {
    op: Op,
    inputs: Vec<Tensor>,
    /// Which inputs are differentiated.
    differentiable: Vec<bool>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so no finite-difference step crosses a kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn one_hot(rng: &mut ChaCha8Rng, n: usize, c: usize, inner: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, c, inner]);
    for ni in 0..n {
        for q in 0..inner {
            let k = rng.gen_range(0..c);
            t.data_mut()[(ni * c + k) * inner + q] = 1.0;
        }
    }
    t
}

fn spatial(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)]
}

/// Pool inputs whose 2x2 windows have a unique maximum with a margin.
fn pool_input(rng: &mut ChaCha8Rng) -> Tensor {
    let [n, c, _, _] = spatial(rng);
    let (h, w) = (2 * rng.gen_range(1..=2), 2 * rng.gen_range(1..=2));
    let numel = n * c * h * w;
    let mut ranks: Vec<usize> = (0..numel).collect();
    for i in (1..numel).rev() {
        ranks.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(vec![n, c, h, w], ranks.iter().map(|&r| r as f32 * 0.05 - 1.0).collect()).unwrap()
}

fn cases(op_name: &str, rng: &mut ChaCha8Rng) -> Case {
    let all = |k: usize| vec![true; k];
    match op_name {
        "conv2d" => {
            let [n, c, h, w] = spatial(rng);
            let co = rng.gen_range(1..=3);
            Case {
                op: Op::Conv2d { padding: 1 },
                inputs: vec![
                    uniform(rng, &[n, c, h, w], -1.0, 1.0),
                    uniform(rng, &[co, c, 3, 3], -1.0, 1.0),
                    uniform(rng, &[co], -1.0, 1.0),
                ],
                differentiable: all(3),
            }
        }
        "conv2d_1x1" => {
            let [n, c, h, w] = spatial(rng);
            let co = rng.gen_range(1..=3);
            Case {
                op: Op::Conv2d1x1,
                inputs: vec![
                    uniform(rng, &[n, c, h, w], -1.0, 1.0),
                    uniform(rng, &[co, c, 1, 1], -1.0, 1.0),
                    uniform(rng, &[co], -1.0, 1.0),
                ],
                differentiable: all(3),
            }
        }
        "linear" => {
            let (n, i, o) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=4));
            Case {
                op: Op::Linear,
                inputs: vec![
                    uniform(rng, &[n, i], -1.0, 1.0),
                    uniform(rng, &[o, i], -1.0, 1.0),
                    uniform(rng, &[o], -1.0, 1.0),
                ],
                differentiable: all(3),
            }
        }
        "relu" | "leaky_relu" | "sigmoid" => {
            let s = spatial(rng);
            let op = match op_name {
                "relu" => Op::Relu,
                "leaky_relu" => Op::LeakyRelu { slope: 0.01 },
                _ => Op::Sigmoid,
            };
            Case {
                op,
                inputs: vec![away_from_zero(rng, &s)],
                differentiable: all(1),
            }
        }
        "instance_norm" => {
            let [n, c, h, w] = spatial(rng);
            Case {
                op: Op::InstanceNorm { eps: 1e-5 },
                inputs: vec![
                    uniform(rng, &[n, c, h.max(2), w.max(2)], -2.0, 2.0),
                    uniform(rng, &[c], 0.5, 1.5),
                    uniform(rng, &[c], -0.5, 0.5),
                ],
                differentiable: all(3),
            }
        }
        "max_pool" => Case {
            op: Op::MaxPool,
            inputs: vec![pool_input(rng)],
            differentiable: all(1),
        },
        "nearest_upsample" => {
            let s = spatial(rng);
            Case {
                op: Op::NearestUpsample,
                inputs: vec![uniform(rng, &s, -1.0, 1.0)],
                differentiable: all(1),
            }
        }
        "channel_concat" => {
            let [n, c, h, w] = spatial(rng);
            let c2 = rng.gen_range(1..=3);
            Case {
                op: Op::ChannelConcat,
                inputs: vec![uniform(rng, &[n, c, h, w], -1.0, 1.0), uniform(rng, &[n, c2, h, w], -1.0, 1.0)],
                differentiable: all(2),
            }
        }
        "softmax" => {
            let [n, _, h, w] = spatial(rng);
            let c = rng.gen_range(2..=4);
            Case {
                op: Op::Softmax,
                inputs: vec![uniform(rng, &[n, c, h, w], -2.0, 2.0)],
                differentiable: all(1),
            }
        }
        "elementwise_mean" => {
            let s = spatial(rng);
            Case {
                op: Op::ElementwiseMean,
                inputs: vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)],
                differentiable: all(2),
            }
        }
        "add" | "mul" | "mse" => {
            let s = spatial(rng);
            let op = match op_name {
                "add" => Op::Add,
                "mul" => Op::Mul,
                _ => Op::Mse,
            };
            Case {
                op,
                inputs: vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)],
                differentiable: all(2),
            }
        }
        "scale" | "sum" | "mean" => {
            let s = spatial(rng);
            let op = match op_name {
                "scale" => Op::Scale { factor: -1.7 },
                "sum" => Op::Sum,
                _ => Op::Mean,
            };
            Case {
                op,
                inputs: vec![uniform(rng, &s, -1.0, 1.0)],
                differentiable: all(1),
            }
        }
        "cross_entropy" | "soft_dice" => {
            let (n, c, inner) = (rng.gen_range(1..=2), rng.gen_range(2..=3), rng.gen_range(2..=9));
            let op = if op_name == "cross_entropy" { Op::CrossEntropy } else { Op::SoftDice };
            Case {
                op,
                inputs: vec![uniform(rng, &[n, c, inner], 0.05, 1.0), one_hot(rng, n, c, inner)],
                differentiable: vec![true, false],
            }
        }
        "batch_slice" => {
            let [_, c, h, w] = spatial(rng);
            let n = rng.gen_range(2..=4);
            let start = rng.gen_range(0..n - 1);
            Case {
                op: Op::BatchSlice {
                    start,
                    len: rng.gen_range(1..=n - start),
                },
                inputs: vec![uniform(rng, &[n, c, h, w], -1.0, 1.0)],
                differentiable: all(1),
            }
        }
        "batch_concat" => {
            let [_, c, h, w] = spatial(rng);
            let (n1, n2) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            Case {
                op: Op::BatchConcat,
                inputs: vec![
                    uniform(rng, &[n1, c, h, w], -1.0, 1.0),
                    uniform(rng, &[n2, c, h, w], -1.0, 1.0),
                ],
                differentiable: all(2),
            }
        }
        other => panic!("no generator for {other}"),
    }
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all
/// differentiable input elements.
fn max_relative_error(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = case
        .inputs
        .iter()
        .zip(&case.differentiable)
        .map(|(t, &d)| tape.leaf(&t.clone().with_requires_grad(d)))
        .collect();
    let y = tape.apply(case.op.clone(), &vars).unwrap();
    let weights = Tensor::from_fn(tape.value(y).shape(), |_| rng.gen_range(-1.0..1.0));
    let wv = tape.constant(weights.clone());
    let prod = tape.apply(Op::Mul, &[y, wv]).unwrap();
    let loss = tape.apply(Op::Sum, &[prod]).unwrap();
    let grads = tape.backward(loss).unwrap();

    let w64: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let mut inputs64: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let shapes: Vec<Vec<usize>> = case.inputs.iter().map(|t| t.shape().to_vec()).collect();
    let objective = |inputs: &[Vec<f64>]| -> f64 {
        let views: Vec<(&[f64], &[usize])> =
            inputs.iter().zip(&shapes).map(|(d, s)| (d.as_slice(), s.as_slice())).collect();
        let (out, _) = replay_f64(&case.op, &views).unwrap();
        out.iter().zip(&w64).map(|(a, b)| a * b).sum()
    };

    let mut worst: f64 = 0.0;
    for (slot, var) in vars.iter().enumerate() {
        if !case.differentiable[slot] {
            continue;
        }
        let analytic = grads.get(*var).expect("gradient for differentiable input");
        for j in 0..inputs64[slot].len() {
            let orig = inputs64[slot][j];
            inputs64[slot][j] = orig + STEP;
            let plus = objective(&inputs64);
            inputs64[slot][j] = orig - STEP;
            let minus = objective(&inputs64);
            inputs64[slot][j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = (analytic[j] as f64 - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_1x1",
    "linear",
    "relu",
    "leaky_relu",
    "instance_norm",
    "max_pool",
    "nearest_upsample",
    "channel_concat",
    "sigmoid",
    "softmax",
    "elementwise_mean",
    "add",
    "mul",
    "scale",
    "sum",
    "mean",
    "mse",
    "cross_entropy",
    "soft_dice",
    "batch_slice",
    "batch_concat",
];

/// Worst relative error of every instance of every op, seeded per op.
pub fn all_errors() -> Vec<(&'static str, Vec<f64>)> {
    OPS.iter()
        .enumerate()
        .map(|(k, name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let errs = (0..INSTANCES)
                .map(|_| {
                    let case = cases(name, &mut rng);
                    max_relative_error(&case, &mut rng)
                })
                .collect();
            (*name, errs)
        })
        .collect()
}
