#![allow(dead_code)]

use mstformer::attention::{AttentionParams, Linear};
use mstformer::model::ModelConfig;
use mstformer::tensor::gradcheck::check_gradients;
use mstformer::{Graph, Tensor, Var};
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Proptest settings with a fixed seed so failures reproduce.
pub fn cases(n: u32) -> Config {
    Config {
        cases: n,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

fn linear(g: &mut Graph, rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Linear {
    Linear {
        weight: g.param(uniform(rng, &[d_in, d_out], -0.8, 0.8)),
        bias: Some(g.param(uniform(rng, &[d_out], -0.2, 0.2))),
    }
}

/// Plain-loop multi-head attention used as the oracle. `xq: [Tq][d]`,
/// `xkv: [Tk][d]`; `omega(i, j)` scales raw scores and `visible(i, j)`
/// hides keys.
pub fn reference_attention(
    g: &Graph,
    p: &AttentionParams,
    xq: &[Vec<f64>],
    xkv: &[Vec<f64>],
    heads: usize,
    omega: impl Fn(usize, usize) -> f64,
    visible: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let proj = |lin: &Linear, rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let w = g.value(lin.weight);
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let b = lin.bias.map(|b| g.value(b).data().to_vec()).unwrap_or(vec![0.0; d_out]);
        rows.iter()
            .map(|x| {
                (0..d_out)
                    .map(|o| b[o] + (0..d_in).map(|i| x[i] * w.data()[i * d_out + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (proj(&p.query, xq), proj(&p.key, xkv), proj(&p.value, xkv));
    let d = q[0].len();
    let hd = d / heads;
    let mut merged = vec![vec![0.0; d]; xq.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..xq.len() {
            let keys: Vec<usize> = (0..xkv.len()).filter(|&j| visible(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                    dot * omega(i, j) / (hd as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (&j, e) in keys.iter().zip(&exps) {
                for c in cols.clone() {
                    merged[i][c] += e / total * v[j][c];
                }
            }
        }
    }
    proj(&p.output, &merged)
}

pub fn attention_params(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize) -> AttentionParams {
    AttentionParams {
        query: linear(g, rng, d, d),
        key: linear(g, rng, d, d),
        value: linear(g, rng, d, d),
        output: linear(g, rng, d, d),
    }
}

/// Small model used by gradient and invariance checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        channels: 3,
        patch_size: 8,
        d_model: 8,
        heads: 2,
        scales: 2,
        ..ModelConfig::default()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `sum(x * w)` for a fixed random `w`, turning any output into a scalar
/// whose gradient touches every element.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> mstformer::Result<Var> {
    let w = randn(&mut rng(seed ^ 0xabcd), g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

fn grad_error(inputs: &[Tensor], seed: u64, build: impl Fn(&mut Graph, &[Var]) -> mstformer::Result<Var>) -> f64 {
    check_gradients(
        |g, v| {
            let out = build(g, v)?;
            weighted_sum(g, out, seed)
        },
        inputs,
        1e-4,
    )
    .unwrap()
    .max_rel_error
}

/// Worst finite-difference relative error of every differentiable primitive
/// on random inputs with the given axis lengths (each at most 5).
pub fn primitive_checks(seed: u64, [a, b, c, n]: [usize; 4]) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[a, b], -2.0, 2.0);
    let row = randn(&mut r, &[b]);
    let pos = uniform(&mut r, &[a, b], 0.5, 3.0);
    let cube = randn(&mut r, &[a, b, c]);
    let other = randn(&mut r, &[a, 2, c]);
    let lhs = randn(&mut r, &[n, a, b]);
    let rhs = randn(&mut r, &[b, c]);
    let bias = randn(&mut r, &[c]);
    let d = b.max(2);
    let wide = uniform(&mut r, &[a, d], -2.0, 2.0);
    let gamma = uniform(&mut r, &[d], 0.5, 1.5);
    let beta = randn(&mut r, &[d]);
    let table = randn(&mut r, &[c.max(2), b]);
    let idx: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % c.max(2)).collect();
    let mask = Tensor::from_fn(&[b], |i| (i % 2) as f64);
    vec![
        ("add", grad_error(&[x.clone(), row.clone()], seed, |g, v| g.add(v[0], v[1]))),
        ("sub", grad_error(&[x.clone(), row.clone()], seed, |g, v| g.sub(v[1], v[0]))),
        ("mul", grad_error(&[x.clone(), row], seed, |g, v| g.mul(v[0], v[1]))),
        ("scale", grad_error(&[x.clone()], seed, |g, v| Ok(g.scale(v[0], -1.7)))),
        ("add_scalar", grad_error(&[x.clone()], seed, |g, v| Ok(g.add_scalar(v[0], 0.3)))),
        ("exp", grad_error(&[x.clone()], seed, |g, v| Ok(g.exp(v[0])))),
        ("log", grad_error(&[pos], seed, |g, v| g.log(v[0]))),
        ("sin", grad_error(&[x.clone()], seed, |g, v| Ok(g.sin(v[0])))),
        ("cos", grad_error(&[x.clone()], seed, |g, v| Ok(g.cos(v[0])))),
        ("gelu", grad_error(&[x.clone()], seed, |g, v| Ok(g.gelu(v[0])))),
        ("reshape", grad_error(&[cube.clone()], seed, |g, v| g.reshape(v[0], &[a * b, c]))),
        ("transpose", grad_error(&[cube.clone()], seed, |g, v| g.transpose(v[0], 0, 2))),
        ("slice", grad_error(&[cube.clone()], seed, |g, v| g.slice(v[0], 1, b / 2, b))),
        ("concat", grad_error(&[cube, other], seed, |g, v| g.concat(&[v[0], v[1]], 1))),
        ("sum", grad_error(&[x.clone()], seed, |g, v| g.sum(v[0], 1))),
        ("mean", grad_error(&[x.clone()], seed, |g, v| g.mean(v[0], 0))),
        ("sum_all", grad_error(&[x.clone()], seed, |g, v| {
            let s = g.sin(v[0]);
            Ok(g.sum_all(s))
        })),
        ("masked_fill", grad_error(&[x.clone()], seed, |g, v| g.masked_fill(v[0], &mask, -3.0))),
        ("softmax", grad_error(&[x.clone()], seed, |g, v| g.softmax(v[0], 1))),
        ("softmax_axis0", grad_error(&[x.clone()], seed, |g, v| g.softmax(v[0], 0))),
        ("log_softmax", grad_error(&[x.clone()], seed, |g, v| g.log_softmax(v[0], 1))),
        ("matmul", grad_error(&[lhs.clone(), rhs.clone()], seed, |g, v| g.matmul(v[0], v[1]))),
        ("linear", grad_error(&[lhs, rhs, bias], seed, |g, v| g.linear(v[0], v[1], Some(v[2])))),
        ("layer_norm", grad_error(&[wide, gamma, beta], seed, |g, v| g.layer_norm(v[0], v[1], v[2]))),
        ("embedding", grad_error(&[table], seed, |g, v| g.embedding(v[0], &idx))),
        ("shared_node", grad_error(&[x], seed, |g, v| {
            let s = g.sin(v[0]);
            let sq = g.mul(v[0], v[0])?;
            g.add(s, sq)
        })),
    ]
}
