//! A naive nested-loop forward pass rebuilt from the named parameters,
//! compared against the tape-based model.

use reatt::corpus::{BOS_ID, EOS_ID};
use reatt::model::{Model, ModelConfig, Side, HEAD_LOGITS};
use reatt::scoring::{relevance, HeadWeights};
use reatt::tape::Tape;
use reatt::training::target_distribution;

type M = Vec<Vec<f64>>;

struct Oracle<'a> {
    model: &'a Model,
    cfg: ModelConfig,
}

impl Oracle<'_> {
    fn w(&self, name: &str) -> M {
        let m = self.model.params().by_name(name).unwrap_or_else(|| panic!("{name}"));
        (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
    }

    fn mm(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    fn rms(&self, x: &M, gain: &str) -> M {
        let g = &self.w(gain)[0];
        x.iter()
            .map(|row| {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                let inv = 1.0 / (ms + 1e-6).sqrt();
                row.iter().zip(g).map(|(v, gv)| v * inv * gv).collect()
            })
            .collect()
    }

    fn add(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    /// Returns the output and the per-head logits `[head][row][col]`.
    fn attention(&self, xq: &M, xkv: &M, prefix: &str, allowed: impl Fn(usize, usize) -> bool) -> (M, Vec<M>) {
        let (h, e) = (self.cfg.heads, self.cfg.head_dim);
        let q = Self::mm(xq, &self.w(&format!("{prefix}.q")));
        let k = Self::mm(xkv, &self.w(&format!("{prefix}.k")));
        let v = Self::mm(xkv, &self.w(&format!("{prefix}.v")));
        let mut cat = vec![vec![0.0; h * e]; xq.len()];
        let mut all_logits = Vec::new();
        for head in 0..h {
            let mut logits = vec![vec![0.0; xkv.len()]; xq.len()];
            for i in 0..xq.len() {
                for j in 0..xkv.len() {
                    let dot: f64 = (0..e).map(|c| q[i][head * e + c] * k[j][head * e + c]).sum();
                    logits[i][j] = dot / (e as f64).sqrt();
                }
                let max = (0..xkv.len())
                    .filter(|&j| allowed(i, j))
                    .map(|j| logits[i][j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = (0..xkv.len())
                    .map(|j| if allowed(i, j) { (logits[i][j] - max).exp() } else { 0.0 })
                    .collect();
                let z: f64 = weights.iter().sum();
                for c in 0..e {
                    cat[i][head * e + c] = (0..xkv.len()).map(|j| weights[j] / z * v[j][head * e + c]).sum();
                }
            }
            all_logits.push(logits);
        }
        (Self::mm(&cat, &self.w(&format!("{prefix}.o"))), all_logits)
    }

    fn ffn(&self, x: &M, prefix: &str) -> M {
        let n = self.rms(x, &format!("{prefix}.norm"));
        let mut h = Self::mm(&n, &self.w(&format!("{prefix}.in")));
        h.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
        Self::add(x, &Self::mm(&h, &self.w(&format!("{prefix}.out"))))
    }

    fn embed(&self, tokens: &[u32], pos: &str) -> M {
        let table = self.w("embed");
        let p = self.w(pos);
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| table[t as usize].iter().zip(&p[i]).map(|(a, b)| a + b).collect())
            .collect()
    }

    fn encoder_layer(&self, x: &M, l: usize, mask: &[bool]) -> M {
        let n = self.rms(x, &format!("enc.{l}.attn.norm"));
        let (a, _) = self.attention(&n, &n, &format!("enc.{l}.attn"), |_, j| mask[j]);
        let x = Self::add(x, &a);
        self.ffn(&x, &format!("enc.{l}.ffn"))
    }

    fn bi(&self, tokens: &[u32]) -> M {
        let mask = vec![true; tokens.len()];
        let mut x = self.embed(tokens, "enc.pos");
        for l in 0..self.cfg.bi_layers {
            x = self.encoder_layer(&x, l, &mask);
        }
        x
    }

    /// Layer-`B` projection (`q` or `k`) of one head of a bi-encoded sequence.
    fn retrieval_vectors(&self, tokens: &[u32], which: &str, head: usize) -> M {
        let b = self.cfg.bi_layers;
        let n = self.rms(&self.bi(tokens), &format!("enc.{b}.attn.norm"));
        let all = Self::mm(&n, &self.w(&format!("enc.{b}.attn.{which}")));
        let e = self.cfg.head_dim;
        all.iter().map(|r| r[head * e..(head + 1) * e].to_vec()).collect()
    }

    fn joint(&self, query: &[u32], doc: &[u32]) -> M {
        let mut x = self.bi(query);
        x.extend(self.bi(doc));
        let mask = vec![true; x.len()];
        for l in self.cfg.bi_layers..self.cfg.layers {
            x = self.encoder_layer(&x, l, &mask);
        }
        self.rms(&x, "enc.final.norm")
    }

    /// Teacher-forced NLL and the last layer's first-row cross logits.
    fn decode(&self, query: &[u32], docs: &[&[u32]], answer: &[u32]) -> (f64, Vec<Vec<f64>>) {
        let memory: M = docs.iter().flat_map(|d| self.joint(query, d)).collect();
        let mut tokens = vec![BOS_ID];
        tokens.extend_from_slice(answer);
        let mut x = self.embed(&tokens, "dec.pos");
        let mut last = Vec::new();
        for l in 0..self.cfg.decoder_layers {
            let n = self.rms(&x, &format!("dec.{l}.self.norm"));
            let (a, _) = self.attention(&n, &n, &format!("dec.{l}.self"), |i, j| j <= i);
            x = Self::add(&x, &a);
            let n = self.rms(&x, &format!("dec.{l}.cross.norm"));
            let (a, logits) = self.attention(&n, &memory, &format!("dec.{l}.cross"), |_, _| true);
            x = Self::add(&x, &a);
            last = logits.into_iter().map(|m| m[0].clone()).collect();
            x = self.ffn(&x, &format!("dec.{l}.ffn"));
        }
        let h = self.rms(&x, "dec.final.norm");
        let table = self.w("embed");
        let mut targets = answer.to_vec();
        targets.push(EOS_ID);
        let mut nll = 0.0;
        for (row, &t) in h.iter().zip(&targets) {
            let logits: Vec<f64> = table.iter().map(|e| e.iter().zip(row).map(|(a, b)| a * b).sum()).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - logits[t as usize];
        }
        (nll, last)
    }
}

fn config() -> ModelConfig {
    ModelConfig {
        layers: 3,
        bi_layers: 1,
        decoder_layers: 2,
        heads: 2,
        head_dim: 4,
        ffn_dim: 12,
        vocab_size: 40,
        max_query_len: 8,
        max_doc_len: 10,
        max_answer_len: 6,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn perturbed_model(seed: u64) -> Model {
    let mut model = Model::new(config(), seed).unwrap();
    let ids: Vec<usize> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.name.ends_with(".norm"))
        .map(|(i, _)| i)
        .collect();
    for (n, id) in ids.into_iter().enumerate() {
        for (j, v) in model.params_mut().get_mut(id).data_mut().iter_mut().enumerate() {
            *v = 1.0 + 0.1 * (((n * 7 + j * 3) % 11) as f64 - 5.0) / 5.0;
        }
    }
    let h = model.param_id(HEAD_LOGITS).unwrap();
    model.params_mut().get_mut(h).data_mut().copy_from_slice(&[0.0005, -0.0007]);
    model
}

const QUERY: [u32; 4] = [5, 9, 12, 7];
const DOC_A: [u32; 6] = [6, 9, 30, 31, 12, 8];
const DOC_B: [u32; 3] = [20, 21, 5];
const ANSWER: [u32; 2] = [30, 31];

#[test]
fn answer_nll_matches_naive_forward() {
    for seed in [1, 2, 3] {
        let model = perturbed_model(seed);
        let oracle = Oracle { model: &model, cfg: config() };
        let got = model.answer_nll(&QUERY, &[&DOC_A, &DOC_B], &ANSWER).unwrap();
        let (want, _) = oracle.decode(&QUERY, &[&DOC_A, &DOC_B], &ANSWER);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn retrieval_vectors_and_relevance_match_naive_forward() {
    let model = perturbed_model(4);
    let oracle = Oracle { model: &model, cfg: config() };
    let q = model.encode_query(&QUERY).unwrap();
    let d = model.encode_doc(&DOC_A).unwrap();
    let e = config().head_dim as f64;
    let mut per_head = Vec::new();
    for h in 0..2 {
        let oq = oracle.retrieval_vectors(&QUERY, "q", h);
        let ok = oracle.retrieval_vectors(&DOC_A, "k", h);
        for (i, row) in oq.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((q.heads[h].get(i, c) - v).abs() < 1e-12);
            }
        }
        for (i, row) in ok.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((d.heads[h].get(i, c) - v).abs() < 1e-12);
            }
        }
        let avg_max = oq
            .iter()
            .map(|qi| {
                ok.iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / e.sqrt())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / oq.len() as f64;
        per_head.push(avg_max);
    }
    let tau = 0.001;
    let (w0, w1): (f64, f64) = (0.0005 / tau, -0.0007 / tau);
    let p0 = 1.0 / (1.0 + (w1 - w0).exp());
    let want = p0 * per_head[0] + (1.0 - p0) * per_head[1];
    let weights = HeadWeights::new(vec![0.0005, -0.0007], tau);
    let got = relevance(&q, &d, &weights).unwrap();
    assert!((got.combined - want).abs() < 1e-12, "{} vs {want}", got.combined);
}

#[test]
fn retrieval_attention_is_the_joint_layer_logit_block() {
    let model = perturbed_model(5);
    let mut tape = Tape::new();
    let qb = model.encode_bi(&mut tape, &QUERY, Side::Query).unwrap();
    let db = model.encode_bi(&mut tape, &DOC_A, Side::Document).unwrap();
    let oracle = Oracle { model: &model, cfg: config() };
    let b = config().bi_layers;
    let mut x = oracle.bi(&QUERY);
    x.extend(oracle.bi(&DOC_A));
    let n = oracle.rms(&x, &format!("enc.{b}.attn.norm"));
    let (_, logits) = oracle.attention(&n, &n, &format!("enc.{b}.attn"), |_, _| true);
    let q = model.encoded_query(&tape, &qb);
    let d = model.encoded_doc(&tape, &db);
    for h in 0..2 {
        let a = reatt::scoring::attention_matrix(&q, &d, h).unwrap();
        for i in 0..QUERY.len() {
            for j in 0..DOC_A.len() {
                assert!((a.get(i, j) - logits[h][i][QUERY.len() + j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn target_attention_matches_naive_forward() {
    let model = perturbed_model(6);
    let oracle = Oracle { model: &model, cfg: config() };
    let mut tape = Tape::new();
    let encs = model.encode_pairs(&mut tape, &QUERY, &[&DOC_A, &DOC_B]).unwrap();
    let out = model.decode_fid(&mut tape, &ANSWER, &encs).unwrap();
    let (_, last) = oracle.decode(&QUERY, &[&DOC_A, &DOC_B], &ANSWER);
    let split = QUERY.len() + DOC_A.len();
    let mut p = [0.0; 2];
    for (h, row) in last.iter().enumerate() {
        let got: Vec<f64> = out.target_attention.logits[h].concat();
        assert_eq!(got.len(), row.len());
        for (g, w) in got.iter().zip(row) {
            assert!((g - w).abs() < 1e-12);
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let first: f64 = row[..split].iter().map(|v| (v - max).exp()).sum::<f64>() / z;
        p[0] += first / 2.0;
        p[1] += (1.0 - first) / 2.0;
    }
    let got = target_distribution(&out.target_attention);
    assert!((got[0] - p[0]).abs() < 1e-12 && (got[1] - p[1]).abs() < 1e-12);
}
