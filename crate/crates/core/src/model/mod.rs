//! The encoder-decoder transformer.
//!
//! Encoder layers `0..B` run over one sequence at a time (bi-encoder). The
//! query/key/value projections of layer `B` are computed in that same
//! sequence-local pass, so the retrieval attention between a query and a
//! document is exactly the pre-softmax logit block that layer `B` sees when
//! the two sequences are later concatenated. Layers `B..L` run over the
//! concatenated pair (cross-encoder), and the decoder fuses any number of
//! pair encodings through cross-attention.
//!
//! Blocks are pre-norm residual blocks with RMS normalization, ReLU
//! feed-forward layers and learned absolute positions restarting at 0 for
//! every sequence. Output logits reuse the token embedding matrix.

mod config;
mod params;

use std::cell::Cell;
use std::path::Path;

pub use config::ModelConfig;
pub use params::{
    load_checkpoint, save_checkpoint, NamedTensor, ParamStore, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::corpus::{BOS_ID, EOS_ID, MASK_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::scoring::HeadWeights;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

pub const HEAD_LOGITS: &str = "retrieval.head_logits";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Query,
    Document,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    norm: usize,
    w_in: usize,
    w_out: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn_norm: usize,
    attn: AttnIds,
    ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_norm: usize,
    self_attn: AttnIds,
    cross_norm: usize,
    cross_attn: AttnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: usize,
    decoder: Vec<DecoderLayer>,
    dec_norm: usize,
    head_logits: usize,
}

impl Layout {
    /// Registers every tensor with its initial deterministic value (gains 1,
    /// everything else 0) and returns the ids.
    fn build(cfg: &ModelConfig, store: &mut ParamStore) -> Layout {
        let d = cfg.d_model();
        let hd = cfg.heads * cfg.head_dim;
        let attn = |store: &mut ParamStore, prefix: &str| AttnIds {
            q: store.push(format!("{prefix}.q"), Matrix::zeros(d, hd)),
            k: store.push(format!("{prefix}.k"), Matrix::zeros(d, hd)),
            v: store.push(format!("{prefix}.v"), Matrix::zeros(d, hd)),
            o: store.push(format!("{prefix}.o"), Matrix::zeros(hd, d)),
        };
        let ffn = |store: &mut ParamStore, prefix: &str| FfnIds {
            norm: store.push(format!("{prefix}.norm"), Matrix::filled(1, d, 1.0)),
            w_in: store.push(format!("{prefix}.in"), Matrix::zeros(d, cfg.ffn_dim)),
            w_out: store.push(format!("{prefix}.out"), Matrix::zeros(cfg.ffn_dim, d)),
        };

        let embed = store.push("embed", Matrix::zeros(cfg.vocab_size, d));
        let enc_pos = store.push("enc.pos", Matrix::zeros(cfg.max_encoder_positions(), d));
        let dec_pos = store.push("dec.pos", Matrix::zeros(cfg.max_answer_len, d));
        let encoder = (0..cfg.layers)
            .map(|i| {
                let attn_norm = store.push(format!("enc.{i}.attn.norm"), Matrix::filled(1, d, 1.0));
                let a = attn(store, &format!("enc.{i}.attn"));
                let f = ffn(store, &format!("enc.{i}.ffn"));
                EncoderLayer {
                    attn_norm,
                    attn: a,
                    ffn: f,
                }
            })
            .collect();
        let enc_norm = store.push("enc.final.norm", Matrix::filled(1, d, 1.0));
        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                let self_norm = store.push(format!("dec.{i}.self.norm"), Matrix::filled(1, d, 1.0));
                let self_attn = attn(store, &format!("dec.{i}.self"));
                let cross_norm =
                    store.push(format!("dec.{i}.cross.norm"), Matrix::filled(1, d, 1.0));
                let cross_attn = attn(store, &format!("dec.{i}.cross"));
                let f = ffn(store, &format!("dec.{i}.ffn"));
                DecoderLayer {
                    self_norm,
                    self_attn,
                    cross_norm,
                    cross_attn,
                    ffn: f,
                }
            })
            .collect();
        let dec_norm = store.push("dec.final.norm", Matrix::filled(1, d, 1.0));
        let head_logits = store.push(HEAD_LOGITS, Matrix::zeros(1, cfg.heads));
        Layout {
            embed,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            head_logits,
        }
    }
}

/// Layer-`B` output of one sequence plus the layer-`B+1` projections.
#[derive(Clone, Debug)]
pub struct BiEncoding {
    pub side: Side,
    pub mask: Vec<bool>,
    /// Residual stream after `B` layers, `len × d_model`.
    pub hidden: Var,
    /// Layer-`B+1` query projections, all heads side by side.
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl BiEncoding {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Per-head layer-`B+1` query vectors of a query, `|q| × e` each.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedQuery {
    pub heads: Vec<Matrix>,
    pub mask: Vec<bool>,
}

/// Per-head layer-`B+1` key vectors of a document, `|d| × e` each.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDoc {
    pub heads: Vec<Matrix>,
    pub mask: Vec<bool>,
}

fn split_heads(m: &Matrix, heads: usize, head_dim: usize) -> Vec<Matrix> {
    (0..heads).map(|h| m.slice_cols(h * head_dim, head_dim)).collect()
}

thread_local! {
    static LIVE_JOINT: Cell<usize> = const { Cell::new(0) };
    static PEAK_JOINT: Cell<usize> = const { Cell::new(0) };
}

/// Instrumentation for the number of joint (cross-encoded) pair encodings
/// alive at once on the current thread.
pub mod joint_gauge {
    use super::{LIVE_JOINT, PEAK_JOINT};

    /// Resets the peak to the current live count.
    pub fn reset_peak() {
        PEAK_JOINT.with(|p| p.set(LIVE_JOINT.with(|l| l.get())));
    }

    pub fn peak() -> usize {
        PEAK_JOINT.with(|p| p.get())
    }

    pub fn live() -> usize {
        LIVE_JOINT.with(|l| l.get())
    }
}

#[derive(Debug)]
struct JointGuard;

impl JointGuard {
    fn new() -> Self {
        let now = LIVE_JOINT.with(|l| {
            l.set(l.get() + 1);
            l.get()
        });
        PEAK_JOINT.with(|p| p.set(p.get().max(now)));
        JointGuard
    }
}

impl Drop for JointGuard {
    fn drop(&mut self) {
        LIVE_JOINT.with(|l| l.set(l.get().saturating_sub(1)));
    }
}

/// Cross-encoder output `E_{q,d}` for one pair, query rows first.
#[derive(Debug)]
pub struct JointEncoding {
    pub states: Var,
    pub mask: Vec<bool>,
    pub query_len: usize,
    _guard: JointGuard,
}

impl JointEncoding {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Pre-softmax cross-attention logits of the first decoder position in the
/// last decoder layer, split by fused pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAttention {
    /// `[head][pair][position]`
    pub logits: Vec<Vec<Vec<f64>>>,
    /// `[pair][position]`, true for real (non-pad) positions.
    pub masks: Vec<Vec<bool>>,
}

impl TargetAttention {
    pub fn heads(&self) -> usize {
        self.logits.len()
    }

    pub fn pairs(&self) -> usize {
        self.masks.len()
    }
}

pub struct DecoderOutput {
    /// One row of vocabulary logits per decoder input position.
    pub logits: Var,
    pub target_attention: TargetAttention,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh model with scaled-normal weights, unit gains and equal head
    /// logits.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params);
        params::init_normal(&mut params, config.init_std, seed);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Wraps existing parameters, checking names and shapes against the
    /// layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamStore::new();
        let layout = Layout::build(&config, &mut expected);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (want, got) in expected.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Format(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params) = load_checkpoint(path)?;
        Self::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    /// Parameter id of a named tensor.
    pub fn param_id(&self, name: &str) -> Option<usize> {
        self.params.id_of(name)
    }

    pub fn head_logits_id(&self) -> usize {
        self.layout.head_logits
    }

    pub fn head_weights(&self) -> HeadWeights {
        HeadWeights::new(
            self.params.get(self.layout.head_logits).data().to_vec(),
            self.config.tau,
        )
    }

    fn p(&self, tape: &mut Tape, id: usize) -> Var {
        tape.param(id, self.params.get(id))
    }

    fn attn_scale(&self) -> f64 {
        1.0 / (self.config.head_dim as f64).sqrt()
    }

    fn embed(&self, tape: &mut Tape, tokens: &[u32], pos_table: usize) -> Var {
        let table = self.p(tape, self.layout.embed);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather(table, &ids);
        let pos_t = self.p(tape, pos_table);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather(pos_t, &positions);
        let x = tape.add(tok, pos);
        tape.dropout(x)
    }

    /// Multi-head attention from projected inputs; returns the output
    /// projection and the per-head pre-softmax logits.
    fn attend(
        &self,
        tape: &mut Tape,
        q_all: Var,
        k_all: Var,
        v_all: Var,
        wo: usize,
        allowed: &[bool],
    ) -> (Var, Vec<Var>) {
        let e = self.config.head_dim;
        let mut outs = Vec::with_capacity(self.config.heads);
        let mut logits = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q_all, h * e, e);
            let kh = tape.slice_cols(k_all, h * e, e);
            let vh = tape.slice_cols(v_all, h * e, e);
            let raw = tape.matmul_nt(qh, kh);
            let s = tape.scale(raw, self.attn_scale());
            let p = tape.softmax_rows(s, Some(allowed));
            outs.push(tape.matmul(p, vh));
            logits.push(s);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        let wo = self.p(tape, wo);
        (tape.matmul(cat, wo), logits)
    }

    fn project(&self, tape: &mut Tape, normed: Var, ids: AttnIds) -> (Var, Var, Var) {
        let wq = self.p(tape, ids.q);
        let wk = self.p(tape, ids.k);
        let wv = self.p(tape, ids.v);
        (
            tape.matmul(normed, wq),
            tape.matmul(normed, wk),
            tape.matmul(normed, wv),
        )
    }

    fn ffn(&self, tape: &mut Tape, x: Var, ids: FfnIds) -> Var {
        let g = self.p(tape, ids.norm);
        let n = tape.rms_norm(x, g);
        let w_in = self.p(tape, ids.w_in);
        let w_out = self.p(tape, ids.w_out);
        let h = tape.matmul(n, w_in);
        let h = tape.relu(h);
        let o = tape.matmul(h, w_out);
        let o = tape.dropout(o);
        tape.add(x, o)
    }

    /// Everything of an encoder layer after the q/k/v projections.
    fn finish_encoder_layer(
        &self,
        tape: &mut Tape,
        x: Var,
        qkv: (Var, Var, Var),
        layer: EncoderLayer,
        key_mask: &[bool],
    ) -> Var {
        let rows = tape.value(qkv.0).rows();
        let allowed: Vec<bool> = (0..rows).flat_map(|_| key_mask.iter().copied()).collect();
        let (a, _) = self.attend(tape, qkv.0, qkv.1, qkv.2, layer.attn.o, &allowed);
        let a = tape.dropout(a);
        let x = tape.add(x, a);
        self.ffn(tape, x, layer.ffn)
    }

    fn encoder_qkv(&self, tape: &mut Tape, x: Var, layer: EncoderLayer) -> (Var, Var, Var) {
        let g = self.p(tape, layer.attn_norm);
        let n = tape.rms_norm(x, g);
        self.project(tape, n, layer.attn)
    }

    fn max_len(&self, side: Side) -> usize {
        match side {
            Side::Query => self.config.max_query_len,
            Side::Document => self.config.max_doc_len,
        }
    }

    /// Bi-encoder pass over one sequence; the mask marks non-pad tokens.
    pub fn encode_bi(&self, tape: &mut Tape, tokens: &[u32], side: Side) -> Result<BiEncoding> {
        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        self.encode_bi_masked(tape, tokens, &mask, side)
    }

    /// [`Model::encode_bi`] with an explicit validity mask.
    pub fn encode_bi_masked(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        mask: &[bool],
        side: Side,
    ) -> Result<BiEncoding> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.max_len(side) {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.max_len(side),
            });
        }
        if mask.len() != tokens.len() {
            return Err(Error::Shape("mask length differs from token count".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let mut x = self.embed(tape, tokens, self.layout.enc_pos);
        for l in 0..self.config.bi_layers {
            let layer = self.layout.encoder[l];
            let qkv = self.encoder_qkv(tape, x, layer);
            x = self.finish_encoder_layer(tape, x, qkv, layer, mask);
        }
        let (q, k, v) = self.encoder_qkv(tape, x, self.layout.encoder[self.config.bi_layers]);
        Ok(BiEncoding {
            side,
            mask: mask.to_vec(),
            hidden: x,
            q,
            k,
            v,
        })
    }

    /// Joint encoding of a query and a document from their bi-encoder
    /// states: layers `B+1..=L` over the concatenation, query first.
    pub fn encode_cross(
        &self,
        tape: &mut Tape,
        query: &BiEncoding,
        doc: &BiEncoding,
    ) -> Result<JointEncoding> {
        if query.side != Side::Query || doc.side != Side::Document {
            return Err(Error::Shape("encode_cross expects (query, document)".into()));
        }
        let mut mask = query.mask.clone();
        mask.extend_from_slice(&doc.mask);
        let guard = JointGuard::new();

        let x = tape.concat_rows(&[query.hidden, doc.hidden]);
        let q = tape.concat_rows(&[query.q, doc.q]);
        let k = tape.concat_rows(&[query.k, doc.k]);
        let v = tape.concat_rows(&[query.v, doc.v]);
        let b = self.config.bi_layers;
        let mut x = self.finish_encoder_layer(tape, x, (q, k, v), self.layout.encoder[b], &mask);
        for l in b + 1..self.config.layers {
            let layer = self.layout.encoder[l];
            let qkv = self.encoder_qkv(tape, x, layer);
            x = self.finish_encoder_layer(tape, x, qkv, layer, &mask);
        }
        let g = self.p(tape, self.layout.enc_norm);
        let states = tape.rms_norm(x, g);
        Ok(JointEncoding {
            states,
            mask,
            query_len: query.len(),
            _guard: guard,
        })
    }

    /// Fusion-in-decoder pass. The decoder input is `BOS` followed by
    /// `prefix`; row `t` of the logits predicts token `t` of the answer.
    pub fn decode_fid(
        &self,
        tape: &mut Tape,
        prefix: &[u32],
        encodings: &[JointEncoding],
    ) -> Result<DecoderOutput> {
        if encodings.is_empty() {
            return Err(Error::Empty("encoding list"));
        }
        let steps = prefix.len() + 1;
        if steps > self.config.max_answer_len {
            return Err(Error::SequenceTooLong {
                len: steps,
                max: self.config.max_answer_len,
            });
        }
        let mut tokens = Vec::with_capacity(steps);
        tokens.push(BOS_ID);
        tokens.extend_from_slice(prefix);

        let states: Vec<Var> = encodings.iter().map(|e| e.states).collect();
        let memory = if states.len() == 1 {
            states[0]
        } else {
            tape.concat_rows(&states)
        };
        let mem_mask: Vec<bool> = encodings.iter().flat_map(|e| e.mask.iter().copied()).collect();
        let causal: Vec<bool> = (0..steps)
            .flat_map(|i| (0..steps).map(move |j| j <= i))
            .collect();
        let cross_allowed: Vec<bool> = (0..steps).flat_map(|_| mem_mask.iter().copied()).collect();

        let mut x = self.embed(tape, &tokens, self.layout.dec_pos);
        let mut last_cross = Vec::new();
        for layer in &self.layout.decoder {
            let g = self.p(tape, layer.self_norm);
            let n = tape.rms_norm(x, g);
            let (q, k, v) = self.project(tape, n, layer.self_attn);
            let (a, _) = self.attend(tape, q, k, v, layer.self_attn.o, &causal);
            let a = tape.dropout(a);
            x = tape.add(x, a);

            let g = self.p(tape, layer.cross_norm);
            let n = tape.rms_norm(x, g);
            let wq = self.p(tape, layer.cross_attn.q);
            let wk = self.p(tape, layer.cross_attn.k);
            let wv = self.p(tape, layer.cross_attn.v);
            let q = tape.matmul(n, wq);
            let k = tape.matmul(memory, wk);
            let v = tape.matmul(memory, wv);
            let (a, logits) = self.attend(tape, q, k, v, layer.cross_attn.o, &cross_allowed);
            let a = tape.dropout(a);
            x = tape.add(x, a);
            last_cross = logits;

            x = self.ffn(tape, x, layer.ffn);
        }
        let g = self.p(tape, self.layout.dec_norm);
        let h = tape.rms_norm(x, g);
        let table = self.p(tape, self.layout.embed);
        let logits = tape.matmul_nt(h, table);

        let spans: Vec<usize> = encodings.iter().map(JointEncoding::len).collect();
        let target_logits = last_cross
            .iter()
            .map(|&s| {
                let row = tape.value(s).row(0);
                let mut offset = 0;
                spans
                    .iter()
                    .map(|&len| {
                        let part = row[offset..offset + len].to_vec();
                        offset += len;
                        part
                    })
                    .collect()
            })
            .collect();
        Ok(DecoderOutput {
            logits,
            target_attention: TargetAttention {
                logits: target_logits,
                masks: encodings.iter().map(|e| e.mask.clone()).collect(),
            },
        })
    }

    /// `softmax(w / τ)` over the head logits, as a `1×H` node.
    pub fn head_distribution_var(&self, tape: &mut Tape) -> Var {
        let w = self.p(tape, self.layout.head_logits);
        let scaled = tape.scale(w, 1.0 / self.config.tau);
        tape.softmax_rows(scaled, None)
    }

    /// Per-head avg-max relevance `r_h(q, d)` as a `1×H` node.
    pub fn head_scores_var(&self, tape: &mut Tape, q: Var, q_mask: &[bool], k: Var, k_mask: &[bool]) -> Result<Var> {
        tape.avg_max_heads(q, k, self.config.head_dim, self.attn_scale(), q_mask, k_mask)
    }

    /// `r(q, d) = Σ_h P_head[h]·r_h(q, d)` as a `1×1` node.
    pub fn relevance_var(
        &self,
        tape: &mut Tape,
        p_head: Var,
        query: &BiEncoding,
        doc: &BiEncoding,
    ) -> Result<Var> {
        let r = self.head_scores_var(tape, query.q, &query.mask, doc.k, &doc.mask)?;
        Ok(tape.matmul_nt(p_head, r))
    }

    pub fn encoded_query(&self, tape: &Tape, bi: &BiEncoding) -> EncodedQuery {
        EncodedQuery {
            heads: split_heads(tape.value(bi.q), self.config.heads, self.config.head_dim),
            mask: bi.mask.clone(),
        }
    }

    pub fn encoded_doc(&self, tape: &Tape, bi: &BiEncoding) -> EncodedDoc {
        EncodedDoc {
            heads: split_heads(tape.value(bi.k), self.config.heads, self.config.head_dim),
            mask: bi.mask.clone(),
        }
    }

    /// Inference-only query encoding.
    pub fn encode_query(&self, tokens: &[u32]) -> Result<EncodedQuery> {
        let mut tape = Tape::new();
        let bi = self.encode_bi(&mut tape, tokens, Side::Query)?;
        Ok(self.encoded_query(&tape, &bi))
    }

    /// Inference-only document encoding.
    pub fn encode_doc(&self, tokens: &[u32]) -> Result<EncodedDoc> {
        let mut tape = Tape::new();
        let bi = self.encode_bi(&mut tape, tokens, Side::Document)?;
        Ok(self.encoded_doc(&tape, &bi))
    }

    /// Builds the pair encodings of a query against each document.
    pub fn encode_pairs(
        &self,
        tape: &mut Tape,
        query: &[u32],
        docs: &[&[u32]],
    ) -> Result<Vec<JointEncoding>> {
        let q = self.encode_bi(tape, query, Side::Query)?;
        docs.iter()
            .map(|d| {
                let bi = self.encode_bi(tape, d, Side::Document)?;
                self.encode_cross(tape, &q, &bi)
            })
            .collect()
    }

    /// Teacher-forced `−log P(answer, EOS | query, docs)`.
    pub fn answer_nll(&self, query: &[u32], docs: &[&[u32]], answer: &[u32]) -> Result<f64> {
        let mut tape = Tape::new();
        let encs = self.encode_pairs(&mut tape, query, docs)?;
        let out = self.decode_fid(&mut tape, answer, &encs)?;
        let targets = answer_targets(answer);
        let loss = tape.cross_entropy(out.logits, &targets);
        Ok(tape.value(loss).item())
    }

    /// Greedy decoding of at most `max_len` tokens, stopping at EOS.
    pub fn generate(&self, query: &[u32], docs: &[&[u32]], max_len: usize) -> Result<Vec<u32>> {
        let mut tape = Tape::new();
        let encs = self.encode_pairs(&mut tape, query, docs)?;
        let limit = max_len.min(self.config.max_answer_len - 1);
        let mut out = Vec::new();
        while out.len() < limit {
            let dec = self.decode_fid(&mut tape, &out, &encs)?;
            let logits = tape.value(dec.logits);
            let row = logits.row(logits.rows() - 1);
            let mut best = EOS_ID;
            let mut best_v = f64::NEG_INFINITY;
            for (id, &v) in row.iter().enumerate() {
                let id = id as u32;
                if matches!(id, PAD_ID | BOS_ID | MASK_ID) {
                    continue;
                }
                if v > best_v {
                    best_v = v;
                    best = id;
                }
            }
            if best == EOS_ID {
                break;
            }
            out.push(best);
        }
        Ok(out)
    }
}

/// Decoder targets for a teacher-forced answer: the answer followed by EOS.
pub fn answer_targets(answer: &[u32]) -> Vec<usize> {
    answer
        .iter()
        .map(|&t| t as usize)
        .chain(std::iter::once(EOS_ID as usize))
        .collect()
}
