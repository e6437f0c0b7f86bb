//! Library results against independent straight-line computations.

mod common;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use cocite::encoder::{Activation, Encoder, EncoderInput, InitScheme};
use cocite::eval::{distance_and_accuracy, tfidf_baseline, ScoredPair};
use cocite::moe::{mutual_information, swiglu_forward, ExpertMlp};
use cocite::pipeline::{Corpus, CorpusEntry, PairEntry};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Params = HashMap<String, (Vec<f64>, Vec<usize>)>;

fn vecmat(x: &[f64], w: &[f64], b: &[f64], cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum::<f64>())
        .collect()
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-12).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * w[i] + b[i]).collect()
}

fn act(x: f64, a: Activation) -> f64 {
    match a {
        Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        Activation::Relu => x.max(0.0),
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One sequence through the encoder, written out loop by loop. Returns
/// the last hidden state rows.
fn oracle_sequence(p: &Params, model: &Encoder, ids: &[u32], mask: &[u8]) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let (d, heads) = (cfg.hidden_dim, cfg.num_heads);
    let dh = d / heads;
    let g = |n: &str| &p[n].0;
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            let tok = &g("embeddings.token")[id as usize * d..(id as usize + 1) * d];
            let posv = &g("embeddings.position")[pos * d..(pos + 1) * d];
            layer_norm(&add(tok, posv), g("embeddings.norm.weight"), g("embeddings.norm.bias"))
        })
        .collect();
    for blk in 0..cfg.num_blocks {
        let name = |s: &str| format!("block.{blk}.{s}");
        let proj = |which: &str, rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    vecmat(
                        r,
                        g(&name(&format!("attention.{which}.weight"))),
                        g(&name(&format!("attention.{which}.bias"))),
                        d,
                    )
                })
                .collect()
        };
        let (q, k, v) = (proj("query", &x), proj("key", &x), proj("value", &x));
        let mut ctx = vec![vec![0.0; d]; x.len()];
        for h in 0..heads {
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..x.len())
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum();
                        dot / (dh as f64).sqrt() + if mask[j] == 1 { 0.0 } else { -1e9 }
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..x.len() {
                    for c in 0..dh {
                        ctx[i][h * dh + c] += e[j] / z * v[j][h * dh + c];
                    }
                }
            }
        }
        let attn = proj("output", &ctx);
        let hidden: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn)
            .map(|(xi, ai)| layer_norm(&add(xi, ai), g(&name("attention_norm.weight")), g(&name("attention_norm.bias"))))
            .collect();
        x = hidden
            .iter()
            .map(|hi| {
                let inner: Vec<f64> = vecmat(hi, g(&name("mlp.w1")), g(&name("mlp.b1")), cfg.intermediate_dim)
                    .into_iter()
                    .map(|u| act(u, cfg.activation))
                    .collect();
                let ff = vecmat(&inner, g(&name("mlp.w2")), g(&name("mlp.b2")), d);
                layer_norm(&add(hi, &ff), g(&name("output_norm.weight")), g(&name("output_norm.bias")))
            })
            .collect();
    }
    x
}

fn oracle_pool(p: &Params, x0: &[f64]) -> Vec<f64> {
    vecmat(x0, &p["pooler.weight"].0, &p["pooler.bias"].0, x0.len())
        .into_iter()
        .map(f64::tanh)
        .collect()
}

fn relative_gap(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn encoder_case(activation: Activation, dtype: DType, seed: u64) -> (f64, f64) {
    let v = vocab(&["cvd"]);
    let cfg = tiny_config(v.len(), 8, 2, 6, activation);
    let model = Encoder::new(cfg, v, InitScheme::new(seed), dtype).unwrap();
    randomize(&model, seed, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_input(&model, &mut rng, 3, 6, &[]);
    let out = model.forward(&input).unwrap();
    let pooled = host(&model.pool(out.last_hidden()).unwrap());
    let last = host(out.last_hidden());
    let p = param_map(&model);
    let ids = input.ids.to_vec2::<u32>().unwrap();
    let (mut hidden_gap, mut pool_gap) = (0.0f64, 0.0f64);
    for b in 0..3 {
        let rows = oracle_sequence(&p, &model, &ids[b], &input.mask[b]);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        hidden_gap = hidden_gap.max(relative_gap(&last[b * 48..(b + 1) * 48], &flat));
        let want = oracle_pool(&p, &rows[0]);
        pool_gap = pool_gap.max(relative_gap(&pooled[b * 8..(b + 1) * 8], &want));
    }
    (hidden_gap, pool_gap)
}

#[test]
fn encoder_matches_straight_line_oracle() {
    for (i, activation) in [Activation::Gelu, Activation::Relu].into_iter().enumerate() {
        for dtype in [DType::F64, DType::F32] {
            let (hidden, pooled) = encoder_case(activation, dtype, 10 + i as u64);
            assert!(hidden < 1e-5, "{activation:?} {dtype:?}: hidden gap {hidden:e}");
            assert!(pooled < 1e-6 || dtype == DType::F32, "{activation:?}: pooled gap {pooled:e}");
            assert!(pooled < 1e-5, "{activation:?} {dtype:?}: pooled gap {pooled:e}");
        }
    }
}

#[test]
fn zero_pooler_gives_zero_vector() {
    let model = tiny_model(8, 1, DType::F32, 3);
    set_host(&model.weights().pooler.weight, vec![0.0; 64]);
    let input = model.prepare(&["heart risk"], &[Some("cvd")]).unwrap();
    let (pooled, _) = model.embed(&input).unwrap();
    assert!(host(&pooled).iter().all(|&v| v == 0.0));
}

#[test]
fn swiglu_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (rows, d, inner) = (3, 4, 5);
    let expert = ExpertMlp {
        w1: random_var(&mut rng, &[d, inner], 0.7),
        b1: random_var(&mut rng, &[inner], 0.7),
        w2: random_var(&mut rng, &[inner, d], 0.7),
        b2: random_var(&mut rng, &[d], 0.7),
        w3: random_var(&mut rng, &[d, inner], 0.7),
        b3: random_var(&mut rng, &[inner], 0.7),
    };
    let x = random_tensor(&mut rng, &[rows, d], 1.0);
    let got = host(&swiglu_forward(&expert, &x, Activation::Gelu).unwrap());
    let (xh, w1, b1, w2, b2, w3, b3) = (
        host(&x),
        host(expert.w1.as_tensor()),
        host(expert.b1.as_tensor()),
        host(expert.w2.as_tensor()),
        host(expert.b2.as_tensor()),
        host(expert.w3.as_tensor()),
        host(expert.b3.as_tensor()),
    );
    for r in 0..rows {
        for c in 0..d {
            let mut y = b2[c];
            for k in 0..inner {
                let mut a = b1[k];
                let mut g = b3[k];
                for i in 0..d {
                    a += xh[r * d + i] * w1[i * inner + k];
                    g += xh[r * d + i] * w3[i * inner + k];
                }
                y += act(a, Activation::Gelu) * g * w2[k * d + c];
            }
            assert!((got[r * d + c] - y).abs() < 1e-6, "({r},{c}): {} vs {y}", got[r * d + c]);
        }
    }
}

#[test]
fn mutual_information_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (b, e) = (rng.random_range(2..12), rng.random_range(2..5));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let raw: Vec<f64> = (0..b * e).map(|_| rng.random::<f64>() + 1e-3).collect();
        let probs: Vec<f64> = raw
            .chunks(e)
            .flat_map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().map(move |v| v / s)
            })
            .collect();
        let t = Tensor::from_vec(probs.clone(), (b, e), &Device::Cpu).unwrap();
        let got = host(&mutual_information(&t, &labels).unwrap())[0];

        let mut mi = 0.0;
        let doms: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        let mut p_e = vec![0.0; e];
        let mut cond = HashMap::new();
        for &dom in &doms {
            let members: Vec<usize> = (0..b).filter(|&i| labels[i] == dom).collect();
            let p_dom = members.len() as f64 / b as f64;
            let c: Vec<f64> = (0..e)
                .map(|x| members.iter().map(|&i| probs[i * e + x]).sum::<f64>() / members.len() as f64)
                .collect();
            for x in 0..e {
                p_e[x] += p_dom * c[x];
            }
            cond.insert(dom, (p_dom, c));
        }
        for (p_dom, c) in cond.values() {
            for x in 0..e {
                mi += p_dom * c[x] * (c[x] / p_e[x]).ln();
            }
        }
        assert!((got - mi).abs() < 1e-10, "{got} vs {mi}");
    }
}

#[test]
fn tfidf_matches_hand_computation() {
    let docs = ["apple banana apple", "banana cherry", "cherry cherry date"];
    let corpus = Corpus::new(
        docs.iter()
            .enumerate()
            .map(|(i, t)| CorpusEntry {
                id: format!("d{i}"),
                domain: "x".into(),
                abstract_text: t.to_string(),
            })
            .collect(),
    )
    .unwrap();
    let pair = |a: usize, b: usize| PairEntry {
        id_a: format!("d{a}"),
        id_b: format!("d{b}"),
        label: 1,
        weight: 1,
        domain: "x".into(),
    };
    let scored = tfidf_baseline(&corpus, &[pair(0, 1), pair(1, 2), pair(0, 2)]).unwrap();

    // N = 3; df: apple 1, banana 2, cherry 2, date 1.
    let rare = (4.0f64 / 2.0).ln() + 1.0;
    let common = (4.0f64 / 3.0).ln() + 1.0;
    // Components over (apple, banana, cherry, date).
    let d0 = [2.0 * rare, common, 0.0, 0.0];
    let d1 = [0.0, common, common, 0.0];
    let d2 = [0.0, 0.0, 2.0 * common, rare];
    let cos = |a: &[f64; 4], b: &[f64; 4]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let want = [cos(&d0, &d1), cos(&d1, &d2), 0.0];
    for (s, w) in scored.iter().zip(want) {
        assert!((s.similarity - w).abs() < 1e-10, "{} vs {w}", s.similarity);
    }
}

#[test]
fn distance_and_accuracy_match_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scored: Vec<ScoredPair> = (0..500)
        .map(|i| ScoredPair {
            id_a: format!("a{i}"),
            id_b: format!("b{i}"),
            similarity: rng.random_range(-1.0..1.0),
            label: rng.random_range(0..2),
            domain: "x".into(),
        })
        .collect();
    let cutoff = 0.13;
    let (dist, acc) = distance_and_accuracy(&scored, cutoff);
    let mut sum = 0.0;
    let mut right = 0usize;
    for p in &scored {
        sum += (p.similarity - f64::from(p.label)).abs();
        let predicted = if p.similarity >= cutoff { 1 } else { 0 };
        if predicted == p.label {
            right += 1;
        }
    }
    assert_eq!(dist, sum / 500.0);
    assert_eq!(acc, right as f64 / 500.0);
}

#[test]
fn padding_does_not_change_pooled_embedding() {
    let model = tiny_model(16, 2, DType::F32, 9);
    randomize(&model, 2, 0.3);
    let short = model.tokenize("heart valve risk", Some("cvd")).unwrap();
    let alone = model.input_from_sequences(&[short.clone()], vec![Some("cvd".into())]).unwrap();
    let (a, _) = model.embed(&alone).unwrap();
    // Same sequence with every padded column of the full length kept.
    let padded = EncoderInput {
        ids: Tensor::from_vec(short.ids.clone(), (1, short.ids.len()), &Device::Cpu).unwrap(),
        mask: vec![short.mask.clone()],
        domains: vec![Some("cvd".into())],
    };
    let (b, _) = model.embed(&padded).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-5);
    // And next to a longer sequence in one batch.
    let long = model.tokenize("lung airway smoke flow dose rate cell", Some("copd")).unwrap();
    let batch = model
        .input_from_sequences(&[short, long], vec![Some("cvd".into()), Some("copd".into())])
        .unwrap();
    let (c, _) = model.embed(&batch).unwrap();
    assert!(max_abs_diff(&a, &c.narrow(0, 0, 1).unwrap()) < 1e-5);
}

#[test]
fn forward_is_deterministic() {
    let model = tiny_model(16, 2, DType::F32, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = random_input(&model, &mut rng, 4, 8, &["cvd"]);
    let a = host(&model.embed(&input).unwrap().0);
    let b = host(&model.embed(&input).unwrap().0);
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn zero_blocks_is_normalized_embedding_sum() {
    let v = vocab(&["cvd"]);
    let cfg = tiny_config(v.len(), 8, 0, 6, Activation::Gelu);
    let model = Encoder::new(cfg, v, InitScheme::new(1), DType::F64).unwrap();
    randomize(&model, 1, 0.5);
    let input = model.prepare(&["heart lung"], &[Some("cvd")]).unwrap();
    let out = model.forward(&input).unwrap();
    assert_eq!(out.hidden_states.len(), 1);
    let p = param_map(&model);
    let ids = input.ids.to_vec2::<u32>().unwrap();
    let rows = oracle_sequence(&p, &model, &ids[0], &input.mask[0]);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    assert!(relative_gap(&host(out.last_hidden()), &flat) < 1e-12);
}
