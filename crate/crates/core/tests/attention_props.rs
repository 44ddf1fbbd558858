mod common;

use common::{attention_params, cases, max_abs_diff, randn, reference_attention as reference, rng, uniform};
use mstformer::attention::{
    cross_attention, logistic_decay, multi_head_self_attention, scaled_attention, spatial_attention,
    temporal_attention, AttentionParams, Linear, TimeScaleMatrix,
};
use mstformer::{Graph, Tensor, Var};
use proptest::prelude::*;

/// The `L` rows of token `n` of sample `b` in a `[B, L, N, d]` tensor.
fn visit_rows(t: &Tensor, b: usize, n: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (ll, nn, d) = (s[1], s[2], s[3]);
    (0..ll).map(|l| t.data()[((b * ll + l) * nn + n) * d..][..d].to_vec()).collect()
}

fn assert_rows_sum_to_one(w: &Tensor) {
    let k = *w.shape().last().unwrap();
    for row in w.data().chunks(k) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

fn increasing_times(r: &mut rand_chacha::ChaCha8Rng, l: usize) -> Vec<f64> {
    use rand::Rng;
    let mut t = r.gen_range(0.0..5.0);
    (0..l)
        .map(|_| {
            t += r.gen_range(0.25..4.0);
            t
        })
        .collect()
}

#[test]
fn temporal_attention_matches_reference() {
    let (b, l, n, d, heads) = (2, 4, 3, 6, 2);
    let mut r = rng(3);
    let mut g = Graph::new();
    let p = attention_params(&mut g, &mut r, d);
    let e = randn(&mut r, &[b, l, n, d]);
    let times: Vec<Vec<f64>> = (0..b).map(|_| increasing_times(&mut r, l)).collect();
    let omegas: Vec<TimeScaleMatrix> = times.iter().map(|t| TimeScaleMatrix::new(t, 0.5, 0.5).unwrap()).collect();
    let ones: Vec<TimeScaleMatrix> = (0..b).map(|_| TimeScaleMatrix::ones(l)).collect();
    let ev = g.constant(e.clone());

    for causal in [false, true] {
        let scaled = temporal_attention(&mut g, ev, &omegas, causal, &p, heads).unwrap();
        let plain = temporal_attention(&mut g, ev, &ones, causal, &p, heads).unwrap();
        let (scaled, plain) = (g.value(scaled.out).clone(), g.value(plain.out).clone());
        for bi in 0..b {
            for ni in 0..n {
                let x = visit_rows(&e, bi, ni);
                let vis = |i: usize, j: usize| !causal || j <= i;
                let want = reference(&g, &p, &x, &x, heads, |i, j| omegas[bi].get(i, j), vis);
                let vanilla = reference(&g, &p, &x, &x, heads, |_, _| 1.0, vis);
                let got = visit_rows(&scaled, bi, ni);
                let got_plain = visit_rows(&plain, bi, ni);
                for i in 0..l {
                    assert!(max_abs_diff(&got[i], &want[i]) < 1e-12);
                    assert!(max_abs_diff(&got_plain[i], &vanilla[i]) < 1e-12);
                }
            }
        }
    }
}

#[test]
fn cross_attention_matches_reference() {
    let (b, l, n, d, heads) = (2, 3, 4, 4, 2);
    let mut r = rng(5);
    let mut g = Graph::new();
    let p = attention_params(&mut g, &mut r, d);
    let dec = randn(&mut r, &[b, l, d]);
    let enc = randn(&mut r, &[b, l, n, d]);
    let (dv, ev) = (g.constant(dec.clone()), g.constant(enc.clone()));
    let out = cross_attention(&mut g, dv, ev, &p, heads).unwrap();
    assert_rows_sum_to_one(g.value(out.weights));
    let got = g.value(out.out).clone();
    for bi in 0..b {
        let q: Vec<Vec<f64>> = dec.data()[bi * l * d..(bi + 1) * l * d].chunks(d).map(<[f64]>::to_vec).collect();
        let kv: Vec<Vec<f64>> = enc.data()[bi * l * n * d..(bi + 1) * l * n * d].chunks(d).map(<[f64]>::to_vec).collect();
        let want = reference(&g, &p, &q, &kv, heads, |_, _| 1.0, |i, j| j / n <= i);
        for i in 0..l {
            let row = &got.data()[(bi * l + i) * d..][..d];
            assert!(max_abs_diff(row, &want[i]) < 1e-12);
        }
    }
}

#[test]
fn single_visit_cross_attention_is_plain_attention() {
    let (n, d) = (5, 4);
    let mut r = rng(8);
    let mut g = Graph::new();
    let p = attention_params(&mut g, &mut r, d);
    let dec = randn(&mut r, &[1, 1, d]);
    let enc = randn(&mut r, &[1, 1, n, d]);
    let (dv, ev) = (g.constant(dec.clone()), g.constant(enc.clone()));
    let out = cross_attention(&mut g, dv, ev, &p, 2).unwrap();
    let kv: Vec<Vec<f64>> = enc.data().chunks(d).map(<[f64]>::to_vec).collect();
    let want = reference(&g, &p, &[dec.data().to_vec()], &kv, 2, |_, _| 1.0, |_, _| true);
    assert!(max_abs_diff(g.value(out.out).data(), &want[0]) < 1e-12);
}

#[test]
fn uniform_memory_gives_equal_decoder_outputs() {
    let (b, l, n, d) = (1, 4, 3, 4);
    let mut r = rng(9);
    let mut g = Graph::new();
    let p = attention_params(&mut g, &mut r, d);
    let token = randn(&mut r, &[d]);
    let enc = Tensor::from_fn(&[b, l, n, d], |i| token.data()[i % d]);
    let dec = randn(&mut r, &[b, l, d]);
    let (dv, ev) = (g.constant(dec), g.constant(enc));
    let out = cross_attention(&mut g, dv, ev, &p, 2).unwrap().out;
    let out = g.value(out).clone();
    let first = &out.data()[..d];
    for row in out.data().chunks(d) {
        assert!(max_abs_diff(row, first) < 1e-12);
    }
}

fn value_then_output(g: &mut Graph, p: &AttentionParams, x: Var) -> Tensor {
    let v = p.value.apply(g, x).unwrap();
    let o = p.output.apply(g, v).unwrap();
    g.value(o).clone()
}

#[test]
fn single_element_attention_returns_values() {
    let d = 4;
    let mut r = rng(11);
    let mut g = Graph::new();
    let p = attention_params(&mut g, &mut r, d);

    // one token per image
    let x = g.constant(randn(&mut r, &[2, 3, 1, d]));
    let out = spatial_attention(&mut g, x, &p, 2).unwrap();
    let want = value_then_output(&mut g, &p, x);
    assert!(g.value(out.out).max_abs_diff(&want) < 1e-12);

    // one visit
    let x = g.constant(randn(&mut r, &[2, 1, 5, d]));
    let out = temporal_attention(&mut g, x, &vec![TimeScaleMatrix::new(&[3.0], 0.5, 0.5).unwrap(); 2], true, &p, 2).unwrap();
    let want = value_then_output(&mut g, &p, x);
    assert!(g.value(out.out).max_abs_diff(&want) < 1e-12);
}

#[test]
fn identical_tokens_give_identical_rows() {
    let d = 4;
    let mut r = rng(12);
    let mut g = Graph::new();
    let p = attention_params(&mut g, &mut r, d);
    let token = randn(&mut r, &[d]);
    let x = g.constant(Tensor::from_fn(&[1, 1, 6, d], |i| token.data()[i % d]));
    let out = spatial_attention(&mut g, x, &p, 2).unwrap().out;
    let out = g.value(out).clone();
    for row in out.data().chunks(d) {
        assert!(max_abs_diff(row, &out.data()[..d]) < 1e-12);
    }
}

#[test]
fn two_heads_with_identity_projections_split_the_width() {
    let (t, d) = (5, 6);
    let mut r = rng(13);
    let mut g = Graph::new();
    let eye = |g: &mut Graph| Linear {
        weight: g.param(Tensor::eye(d)),
        bias: None,
    };
    let p = AttentionParams {
        query: eye(&mut g),
        key: eye(&mut g),
        value: eye(&mut g),
        output: eye(&mut g),
    };
    let x = g.constant(randn(&mut r, &[t, d]));
    let multi = multi_head_self_attention(&mut g, x, &p, 2, None, None).unwrap();
    let mut halves = Vec::new();
    for h in 0..2 {
        let part = g.slice(x, 1, h * d / 2, (h + 1) * d / 2).unwrap();
        halves.push(scaled_attention(&mut g, part, part, part, None, None).unwrap().out);
    }
    let joined = g.concat(&halves, 1).unwrap();
    assert!(g.value(multi.out).max_abs_diff(g.value(joined)) < 1e-12);
}

#[test]
fn one_head_is_single_head_attention_plus_projection() {
    let (t, d) = (4, 6);
    let mut r = rng(14);
    let mut g = Graph::new();
    let p = attention_params(&mut g, &mut r, d);
    let x = g.constant(randn(&mut r, &[t, d]));
    let multi = multi_head_self_attention(&mut g, x, &p, 1, None, None).unwrap();
    let q = p.query.apply(&mut g, x).unwrap();
    let k = p.key.apply(&mut g, x).unwrap();
    let v = p.value.apply(&mut g, x).unwrap();
    let single = scaled_attention(&mut g, q, k, v, None, None).unwrap().out;
    let single = p.output.apply(&mut g, single).unwrap();
    assert!(g.value(multi.out).max_abs_diff(g.value(single)) < 1e-12);
}

#[test]
fn time_scaling_examples() {
    assert_eq!(logistic_decay(1.0, 0.5, 0.5), 0.5);
    assert!((logistic_decay(0.0, 0.5, 0.5) - 0.62246).abs() < 1e-5);
    let mut prev = 1.0;
    for step in 0..200 {
        let w = logistic_decay(step as f64 * 0.5, 0.5, 0.5);
        assert!(w < prev);
        prev = w;
    }
    assert!(prev < 1e-20);
}

fn permute_tokens(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let (n, d) = (s[2], s[3]);
    Tensor::from_fn(s, |i| {
        let (outer, rest) = (i / (n * d), i % (n * d));
        let (tok, c) = (rest / d, rest % d);
        t.data()[outer * n * d + perm[tok] * d + c]
    })
}

proptest! {
    #![proptest_config(cases(20))]

    #[test]
    fn omega_is_symmetric_bounded_and_decreasing(
        seed: u64,
        l in 1usize..=8,
        alpha in 0.05f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let ts = increasing_times(&mut rng(seed), l);
        let w = TimeScaleMatrix::new(&ts, alpha, beta).unwrap();
        for i in 0..l {
            for j in 0..l {
                prop_assert_eq!(w.get(i, j), w.get(j, i));
                prop_assert!(w.get(i, j) > 0.0 && w.get(i, j) < 1.0);
            }
        }
        for j in 1..l {
            prop_assert!(w.get(0, j) < w.get(0, j - 1));
        }
    }

    #[test]
    fn omega_is_shift_invariant(l in 1usize..=8, quarters in prop::collection::vec(1u32..16, 8), shift in -100i32..100) {
        // quarter-year steps and integer shifts keep the arithmetic exact
        let mut t = 0.0;
        let ts: Vec<f64> = quarters[..l].iter().map(|&q| { t += q as f64 / 4.0; t }).collect();
        let shifted: Vec<f64> = ts.iter().map(|x| x + shift as f64).collect();
        prop_assert_eq!(
            TimeScaleMatrix::new(&ts, 0.5, 0.5).unwrap(),
            TimeScaleMatrix::new(&shifted, 0.5, 0.5).unwrap()
        );
    }

    #[test]
    fn attention_rows_sum_to_one(seed: u64, b in 1usize..=2, l in 1usize..=4, n in 1usize..=4, heads in 1usize..=2) {
        let d = 4;
        let mut r = rng(seed);
        let mut g = Graph::new();
        let p = attention_params(&mut g, &mut r, d);
        let e = g.constant(uniform(&mut r, &[b, l, n, d], -2.0, 2.0));
        let omegas: Vec<TimeScaleMatrix> =
            (0..b).map(|_| TimeScaleMatrix::new(&increasing_times(&mut r, l), 0.5, 0.5).unwrap()).collect();
        let s = spatial_attention(&mut g, e, &p, heads).unwrap();
        assert_rows_sum_to_one(g.value(s.weights));
        prop_assert_eq!(g.shape(s.out), g.shape(e));
        for causal in [false, true] {
            let t = temporal_attention(&mut g, e, &omegas, causal, &p, heads).unwrap();
            assert_rows_sum_to_one(g.value(t.weights));
            prop_assert_eq!(g.shape(t.out), g.shape(e));
        }
        let dec = g.constant(randn(&mut r, &[b, l, d]));
        let c = cross_attention(&mut g, dec, e, &p, heads).unwrap();
        assert_rows_sum_to_one(g.value(c.weights));
        prop_assert_eq!(g.shape(c.out), g.shape(dec));
    }

    #[test]
    fn spatial_attention_is_permutation_equivariant(seed: u64, perm_index in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_index];
        let d = 4;
        let mut r = rng(seed);
        let mut g = Graph::new();
        let p = attention_params(&mut g, &mut r, d);
        let x = randn(&mut r, &[1, 2, 3, d]);
        let xv = g.constant(x.clone());
        let xp = g.constant(permute_tokens(&x, &perm));
        let out = spatial_attention(&mut g, xv, &p, 2).unwrap().out;
        let out = g.value(out).clone();
        let out_p = spatial_attention(&mut g, xp, &p, 2).unwrap().out;
        let out_p = g.value(out_p).clone();
        prop_assert!(permute_tokens(&out, &perm).max_abs_diff(&out_p) < 1e-12);
    }

    #[test]
    fn causal_temporal_attention_ignores_the_future(seed: u64, l in 2usize..=5, cut in 1usize..5) {
        let cut = cut.min(l - 1);
        let (b, n, d) = (2, 3, 4);
        let mut r = rng(seed);
        let mut g = Graph::new();
        let p = attention_params(&mut g, &mut r, d);
        let omegas: Vec<TimeScaleMatrix> =
            (0..b).map(|_| TimeScaleMatrix::new(&increasing_times(&mut r, l), 0.5, 0.5).unwrap()).collect();
        let e = randn(&mut r, &[b, l, n, d]);
        let noise = uniform(&mut r, &[b, l, n, d], -5.0, 5.0);
        let perturbed = Tensor::from_fn(e.shape(), |i| {
            let visit = (i / (n * d)) % l;
            if visit >= cut { e.data()[i] + noise.data()[i] } else { e.data()[i] }
        });
        let (ev, pv) = (g.constant(e), g.constant(perturbed));
        let a = temporal_attention(&mut g, ev, &omegas, true, &p, 2).unwrap().out;
        let a = g.value(a).clone();
        let z = temporal_attention(&mut g, pv, &omegas, true, &p, 2).unwrap().out;
        let z = g.value(z).clone();
        for i in 0..a.numel() {
            if (i / (n * d)) % l < cut {
                prop_assert_eq!(a.data()[i].to_bits(), z.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn cross_attention_ignores_future_visits(seed: u64, l in 2usize..=5, cut in 1usize..5) {
        let cut = cut.min(l - 1);
        let (b, n, d) = (2, 3, 4);
        let mut r = rng(seed);
        let mut g = Graph::new();
        let p = attention_params(&mut g, &mut r, d);
        let dec = randn(&mut r, &[b, l, d]);
        let enc = randn(&mut r, &[b, l, n, d]);
        let noise = uniform(&mut r, &[b, l, n, d], -5.0, 5.0);
        let enc_p = Tensor::from_fn(enc.shape(), |i| {
            if (i / (n * d)) % l >= cut { enc.data()[i] + noise.data()[i] } else { enc.data()[i] }
        });
        let dec_p = Tensor::from_fn(dec.shape(), |i| {
            if (i / d) % l >= cut { dec.data()[i] - 3.0 } else { dec.data()[i] }
        });
        let (dv, ev) = (g.constant(dec), g.constant(enc));
        let (dpv, epv) = (g.constant(dec_p), g.constant(enc_p));
        let a = cross_attention(&mut g, dv, ev, &p, 2).unwrap().out;
        let a = g.value(a).clone();
        let z = cross_attention(&mut g, dpv, epv, &p, 2).unwrap().out;
        let z = g.value(z).clone();
        for i in 0..a.numel() {
            if (i / d) % l < cut {
                prop_assert_eq!(a.data()[i].to_bits(), z.data()[i].to_bits());
            }
        }
    }
}
