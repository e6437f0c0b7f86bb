#![allow(dead_code)]

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use cocite::encoder::{Activation, Encoder, EncoderInput, InitScheme, ModelConfig, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const WORDS: [&str; 12] = [
    "heart", "lung", "valve", "airway", "pressure", "smoke", "failure", "rate", "risk", "cell", "flow", "dose",
];

pub fn vocab(domains: &[&str]) -> Vocabulary {
    Vocabulary::build([WORDS.join(" ").as_str()], domains, 64).unwrap()
}

pub fn tiny_config(vocab_size: usize, d: usize, blocks: usize, max_len: usize, activation: Activation) -> ModelConfig {
    ModelConfig {
        vocab_size,
        hidden_dim: d,
        intermediate_dim: 2 * d,
        num_blocks: blocks,
        num_heads: 2,
        max_seq_len: max_len,
        activation,
    }
}

pub fn tiny_model(d: usize, blocks: usize, dtype: DType, seed: u64) -> Encoder {
    let v = vocab(&["cvd", "copd"]);
    let cfg = tiny_config(v.len(), d, blocks, 8, Activation::Gelu);
    Encoder::new(cfg, v, InitScheme::new(seed), dtype).unwrap()
}

pub fn host(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn set_host(var: &Var, values: Vec<f64>) {
    let t = Tensor::from_vec(values, var.dims(), &Device::Cpu)
        .unwrap()
        .to_dtype(var.dtype())
        .unwrap();
    var.set(&t).unwrap();
}

/// Replaces every parameter with normal noise so that no gradient vanishes
/// by construction (zero biases, unit norm scales, zero gate branch).
pub fn randomize(model: &Encoder, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for (name, var) in model.named_params() {
        let base = if name.contains("norm.weight") { 1.0 } else { 0.0 };
        let values = (0..var.elem_count()).map(|_| base + normal.sample(&mut rng)).collect();
        set_host(&var, values);
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn random_var(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Var {
    Var::from_tensor(&random_tensor(rng, shape, std)).unwrap()
}

/// Random batch of ids with a random number of real tokens per row; row
/// `i` gets domain `domains[i % len]`.
pub fn random_input(model: &Encoder, rng: &mut ChaCha8Rng, batch: usize, len: usize, domains: &[&str]) -> EncoderInput {
    let v = model.vocab().len() as u32;
    let mut ids = Vec::with_capacity(batch * len);
    let mut mask = Vec::with_capacity(batch);
    let mut doms = Vec::with_capacity(batch);
    for i in 0..batch {
        let real = rng.random_range(1..=len);
        let mut row_mask = vec![0u8; len];
        for (p, m) in row_mask.iter_mut().enumerate() {
            if p < real {
                *m = 1;
                ids.push(if p == 0 { 2 } else { rng.random_range(4..v) });
            } else {
                ids.push(0);
            }
        }
        mask.push(row_mask);
        doms.push(if domains.is_empty() {
            None
        } else {
            Some(domains[i % domains.len()].to_string())
        });
    }
    EncoderInput {
        ids: Tensor::from_vec(ids, (batch, len), &Device::Cpu).unwrap(),
        mask,
        domains: doms,
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    host(a)
        .iter()
        .zip(host(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Parameters as host arrays keyed by name.
pub fn param_map(model: &Encoder) -> HashMap<String, (Vec<f64>, Vec<usize>)> {
    model
        .named_params()
        .into_iter()
        .map(|(n, v)| (n, (host(v.as_tensor()), v.dims().to_vec())))
        .collect()
}

/// Relative error with a small floor so that two near-zero values compare
/// as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Checks the analytic gradient of `loss` w.r.t. every element of every
/// variable against central differences. Returns the worst relative error.
pub fn gradient_check(vars: &[(String, Var)], loss: &dyn Fn() -> Tensor, h: f64) -> (f64, String) {
    let value = loss();
    let grads = value.backward().unwrap();
    let mut worst = (0.0, String::new());
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => host(g),
            None => vec![0.0; var.elem_count()],
        };
        let original = host(var.as_tensor());
        for i in 0..original.len() {
            let mut probe = original.clone();
            probe[i] = original[i] + h;
            set_host(var, probe.clone());
            let up = host(&loss())[0];
            probe[i] = original[i] - h;
            set_host(var, probe);
            let down = host(&loss())[0];
            set_host(var, original.clone());
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[i], numeric);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]: analytic {} numeric {numeric}", analytic[i]));
            }
        }
    }
    worst
}

pub mod grad {
    //! Finite-difference scenarios shared by the gradient tests and the
    //! acceptance run. Each returns the worst relative error and where it
    //! occurred.

    use super::*;
    use cocite::moe::{
        extend_model, mutual_information_loss, router_ce_loss, swiglu_forward, ExpertMlp, Granularity, MoeConfig,
        RoutingStrategy,
    };
    use cocite::train::{mnr_loss, TemperatureParam};

    const H: f64 = 1e-5;

    pub fn mnr(seed: u64) -> (f64, String) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let left = random_var(&mut rng, &[4, 8], 0.5);
        let right = random_var(&mut rng, &[4, 8], 0.5);
        let temp = TemperatureParam::new(3.0, DType::F64).unwrap();
        let vars = vec![
            ("left".to_string(), left.clone()),
            ("right".to_string(), right.clone()),
            ("log_t".to_string(), temp.var().clone()),
        ];
        gradient_check(&vars, &|| mnr_loss(left.as_tensor(), right.as_tensor(), &temp).unwrap(), H)
    }

    pub fn router_ce(seed: u64) -> (f64, String) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_var(&mut rng, &[5, 3], 1.0);
        let b = random_var(&mut rng, &[7, 3], 1.0);
        let targets = vec![vec![0, 2, 1, 1, 0], vec![2, 2, 0, 1, 0, 1, 2]];
        let vars = vec![("block0".to_string(), a.clone()), ("block1".to_string(), b.clone())];
        gradient_check(
            &vars,
            &|| router_ce_loss(&[a.as_tensor().clone(), b.as_tensor().clone()], &targets).unwrap(),
            H,
        )
    }

    pub fn mutual_info(seed: u64) -> (f64, String) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_var(&mut rng, &[6, 3], 1.0);
        let b = random_var(&mut rng, &[6, 3], 1.0);
        let labels = vec![0, 1, 1, 0, 2, 1];
        let softmax = |t: &Tensor| {
            let e = t.exp().unwrap();
            e.broadcast_div(&e.sum_keepdim(1).unwrap()).unwrap()
        };
        let vars = vec![("logits0".to_string(), a.clone()), ("logits1".to_string(), b.clone())];
        gradient_check(
            &vars,
            &|| mutual_information_loss(&[softmax(a.as_tensor()), softmax(b.as_tensor())], &labels, 0.7).unwrap(),
            H,
        )
    }

    pub fn swiglu(seed: u64) -> (f64, String) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, inner) = (4, 6);
        let expert = ExpertMlp {
            w1: random_var(&mut rng, &[d, inner], 0.5),
            b1: random_var(&mut rng, &[inner], 0.5),
            w2: random_var(&mut rng, &[inner, d], 0.5),
            b2: random_var(&mut rng, &[d], 0.5),
            w3: random_var(&mut rng, &[d, inner], 0.5),
            b3: random_var(&mut rng, &[inner], 0.5),
        };
        let x = random_var(&mut rng, &[3, d], 1.0);
        let weights = random_tensor(&mut rng, &[3, d], 1.0);
        let vars = vec![
            ("x".to_string(), x.clone()),
            ("w1".to_string(), expert.w1.clone()),
            ("b1".to_string(), expert.b1.clone()),
            ("w2".to_string(), expert.w2.clone()),
            ("b2".to_string(), expert.b2.clone()),
            ("w3".to_string(), expert.w3.clone()),
            ("b3".to_string(), expert.b3.clone()),
        ];
        gradient_check(
            &vars,
            &|| {
                let y = swiglu_forward(&expert, x.as_tensor(), Activation::Gelu).unwrap();
                (y * &weights).unwrap().sum_all().unwrap()
            },
            H,
        )
    }

    fn encoder_loss(model: &Encoder, input: &EncoderInput, w_pool: &Tensor, w_last: &Tensor) -> Tensor {
        let out = model.forward(input).unwrap();
        let pooled = model.pool(out.last_hidden()).unwrap();
        let a = (pooled * w_pool).unwrap().sum_all().unwrap();
        let b = (out.last_hidden() * w_last).unwrap().sum_all().unwrap();
        (a + b).unwrap()
    }

    /// Dense tiny encoder, every parameter.
    pub fn encoder(seed: u64) -> (f64, String) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = tiny_model(8, 2, DType::F64, seed);
        randomize(&model, seed + 1, 0.3);
        let input = random_input(&model, &mut rng, 2, 5, &["cvd", "copd"]);
        let w_pool = random_tensor(&mut rng, &[2, 8], 1.0);
        let w_last = random_tensor(&mut rng, &[2, 5, 8], 1.0);
        gradient_check(&model.named_params(), &|| encoder_loss(&model, &input, &w_pool, &w_last), H)
    }

    /// Tiny encoder with learned top-2 token routing in every block, every
    /// parameter including experts and routers.
    pub fn moe_encoder(seed: u64) -> (f64, String) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = tiny_model(8, 2, DType::F64, seed);
        let cfg = MoeConfig {
            num_experts: 3,
            granularity: Granularity::Token,
            top_k: 2,
            strategy: RoutingStrategy::RouterCe,
            ..MoeConfig::enforced(&["cvd", "copd"], vec![0, 1])
        };
        let model = extend_model(&base, &cfg, seed).unwrap();
        randomize(&model, seed + 1, 0.3);
        let input = random_input(&model, &mut rng, 2, 4, &["cvd", "copd"]);
        let w_pool = random_tensor(&mut rng, &[2, 8], 1.0);
        let w_last = random_tensor(&mut rng, &[2, 4, 8], 1.0);
        gradient_check(&model.named_params(), &|| encoder_loss(&model, &input, &w_pool, &w_last), H)
    }
}

pub mod oracle {
    //! Independent re-derivations used by the property and acceptance tests.

    use std::collections::{BTreeMap, HashMap, HashSet};

    use cocite::eval::{ScoredPair, ThresholdRange};
    use cocite::pipeline::{CitationGraph, PairDataset, PaperRecord, SplitConfig};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn f1_at(scored: &[ScoredPair], threshold: f64) -> f64 {
        let positives = scored.iter().filter(|p| p.label == 1).count();
        let predicted = scored.iter().filter(|p| p.similarity >= threshold).count();
        let tp = scored.iter().filter(|p| p.label == 1 && p.similarity >= threshold).count();
        if predicted + positives == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (predicted + positives) as f64
        }
    }

    /// Best F1 over the range endpoints, every distinct similarity inside
    /// the range and every midpoint between neighbouring ones, each
    /// threshold evaluated by a full pass.
    pub fn brute_f1max(scored: &[ScoredPair], range: ThresholdRange) -> f64 {
        let mut sims: Vec<f64> = scored.iter().map(|p| p.similarity).filter(|s| range.contains(*s)).collect();
        sims.sort_by(f64::total_cmp);
        sims.dedup();
        let mut candidates = vec![range.lo, range.hi];
        candidates.extend(&sims);
        candidates.extend(sims.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        candidates.into_iter().map(|t| f1_at(scored, t)).fold(0.0, f64::max)
    }

    pub fn f1_at_cutoff(scored: &[ScoredPair], cutoff: f64) -> f64 {
        f1_at(scored, cutoff)
    }

    /// Random scored pairs. With `grid`, similarities come from a coarse
    /// grid so that ties are common.
    pub fn random_scored(rng: &mut ChaCha8Rng, n: usize, grid: bool) -> Vec<ScoredPair> {
        (0..n)
            .map(|i| {
                let similarity = if grid {
                    f64::from(rng.random_range(-20i32..=20)) / 20.0
                } else {
                    rng.random_range(-1.0..=1.0)
                };
                ScoredPair {
                    id_a: format!("a{i}"),
                    id_b: format!("b{i}"),
                    similarity,
                    label: u8::from(rng.random_bool(0.4)),
                    domain: "x".into(),
                }
            })
            .collect()
    }

    /// Citation graph over `papers` records spread across `domains`. Each
    /// paper cites a few others of its own domain (some ids unknown), and
    /// gets a random citation count.
    pub fn random_graph(rng: &mut ChaCha8Rng, papers: usize, domains: &[&str], max_refs: usize) -> Vec<PaperRecord> {
        let per = papers / domains.len();
        (0..papers)
            .map(|i| {
                let d = (i / per.max(1)).min(domains.len() - 1);
                let lo = d * per;
                let hi = if d + 1 == domains.len() { papers } else { lo + per };
                let n_refs = rng.random_range(0..=max_refs);
                let mut references: Vec<String> = (0..n_refs)
                    .map(|_| format!("p{}", rng.random_range(lo..hi)))
                    .filter(|r| *r != format!("p{i}"))
                    .collect();
                if rng.random_bool(0.05) {
                    references.push(format!("missing{i}"));
                }
                PaperRecord {
                    id: format!("p{i}"),
                    abstract_text: format!("abstract {i}"),
                    domain: domains[d].to_string(),
                    year: rng.random_range(2010..=2023),
                    references,
                    citation_count: rng.random_range(0..40),
                }
            })
            .collect()
    }

    /// Co-citation multiplicities by direct enumeration of `C(n, 2)` pairs
    /// per citing paper, keyed by sorted id pairs.
    pub fn cocitation_counts(records: &[PaperRecord]) -> HashMap<(String, String), u32> {
        let known: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let mut out = HashMap::new();
        for r in records {
            let refs: Vec<&str> = {
                let set: std::collections::BTreeSet<&str> =
                    r.references.iter().map(String::as_str).filter(|id| known.contains(id)).collect();
                set.into_iter().collect()
            };
            for i in 0..refs.len() {
                for j in i + 1..refs.len() {
                    *out.entry((refs[i].to_string(), refs[j].to_string())).or_insert(0) += 1;
                }
            }
        }
        out
    }

    fn sorted(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    }

    /// Checks a dataset against the graph it came from; returns the first
    /// violation found.
    pub fn audit(records: &[PaperRecord], dataset: &PairDataset, cfg: &SplitConfig) -> Result<(), String> {
        let graph = CitationGraph::from_records(records.to_vec()).map_err(|e| e.to_string())?;
        // Same-domain co-citations only: cross-domain references never form
        // a pair.
        let mut expected: HashMap<(String, String), u32> = HashMap::new();
        for domain in graph.domains() {
            let sub: Vec<PaperRecord> = records.iter().filter(|r| r.domain == domain).cloned().collect();
            expected.extend(cocitation_counts(&sub));
        }
        let all_cocited = cocitation_counts(records);

        let mut seen: BTreeMap<(String, String), &str> = BTreeMap::new();
        let mut train_copies: HashMap<(String, String), u32> = HashMap::new();
        for (name, split) in [("train", &dataset.train), ("valid", &dataset.valid), ("test", &dataset.test)] {
            let mut local = HashSet::new();
            for p in split {
                let key = sorted(&p.id_a, &p.id_b);
                if p.id_a == p.id_b {
                    return Err(format!("{name}: self pair {}", p.id_a));
                }
                if p.label == 1 {
                    let m = *expected.get(&key).ok_or_else(|| format!("{name}: positive {key:?} never co-cited"))?;
                    if p.weight != m {
                        return Err(format!("{name}: weight {} for {key:?}, multiplicity {m}", p.weight));
                    }
                    if name == "train" {
                        *train_copies.entry(key.clone()).or_insert(0) += 1;
                    } else if !local.insert(key.clone()) {
                        return Err(format!("{name}: duplicate {key:?}"));
                    }
                    let recent = [&p.id_a, &p.id_b]
                        .iter()
                        .any(|id| graph.get(id).map(|r| r.year >= cfg.recent_year).unwrap_or(false));
                    if recent != (name == "test") {
                        return Err(format!("{name}: {key:?} in the wrong split for its years"));
                    }
                } else {
                    if name != "valid" {
                        return Err(format!("{name}: holds a negative"));
                    }
                    if all_cocited.contains_key(&key) {
                        return Err(format!("negative {key:?} was co-cited"));
                    }
                    for id in [&p.id_a, &p.id_b] {
                        let cites = graph.get(id).ok_or_else(|| format!("unknown id {id}"))?.citation_count;
                        if cites < cfg.min_citations {
                            return Err(format!("negative member {id} has {cites} citations"));
                        }
                    }
                    if !local.insert(key.clone()) {
                        return Err(format!("duplicate negative {key:?}"));
                    }
                    continue;
                }
                if let Some(other) = seen.get(&key) {
                    if *other != name {
                        return Err(format!("{key:?} in both {other} and {name}"));
                    }
                }
                seen.insert(key, name);
            }
        }
        for (key, copies) in &train_copies {
            if *copies != expected[key] {
                return Err(format!("train holds {copies} copies of {key:?}, multiplicity {}", expected[key]));
            }
        }
        let positives = seen.len();
        if positives != expected.len() {
            return Err(format!("{} co-cited pairs but {positives} placed", expected.len()));
        }
        let valid_pos = dataset.valid.iter().filter(|p| p.label == 1).count();
        let valid_neg = dataset.valid.len() - valid_pos;
        if valid_pos != valid_neg {
            return Err(format!("valid has {valid_pos} positives and {valid_neg} negatives"));
        }
        Ok(())
    }
}
