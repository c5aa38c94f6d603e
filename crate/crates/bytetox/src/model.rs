//! The assembled network: named parameter store, initialization, and the
//! forward paths (classification with regression head, seq2seq denoising).
//!
//! Parameters live outside any tape in shared buffers; a [`Session`] binds
//! them into a fresh tape per example, which keeps concurrent forwards cheap
//! (Arc clones) and single-owner training sound.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bytes::{embed_sequence, ByteSequence, BYTE_VOCAB, PAD_ID};
use crate::elem::Elem;
use crate::gbst::{gbst_forward, GbstConfig, GbstParams};
use crate::heads::{
    first_pool, regression_logits, sigmoid_bce_loss, AttributeLabels, RegressionHead,
};
use crate::tensor::{Gradients, Tape, TensorError, Var};
use crate::transformer::{
    decode, encode, AttentionParams, DecoderLayerParams, DecoderParams, EncoderLayerParams,
    EncoderOutput, EncoderParams, ModelConfig, Runtime,
};

/// Full architecture description, serialized into every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchConfig {
    pub model: ModelConfig,
    /// None disables the learnable tokenizer: the encoder runs directly over
    /// byte embeddings (the byte-level baseline in the throughput ablation).
    pub gbst: Option<GbstConfig>,
    pub max_len: usize,
    /// Sentinel ids appended after the byte vocabulary for span corruption.
    pub max_sentinels: usize,
    /// Regression attributes; empty means no head (pretraining).
    pub attributes: Vec<String>,
}

impl ArchConfig {
    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB + self.max_sentinels
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.model.validate()?;
        if let Some(g) = &self.gbst {
            g.validate()?;
            if g.d_model != self.model.d_model {
                return Err(TensorError::InvalidArgument {
                    op: "arch_config",
                    details: format!(
                        "gbst d_model {} != transformer d_model {}",
                        g.d_model, self.model.d_model
                    ),
                });
            }
        }
        if self.max_len < 2 {
            return Err(TensorError::InvalidArgument {
                op: "arch_config",
                details: "max_len must be >= 2".into(),
            });
        }
        Ok(())
    }
}

/// One named host-side parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<F: Elem> {
    pub name: String,
    pub data: Arc<Vec<F>>,
    pub rows: usize,
    pub cols: usize,
}

/// Ordered, named parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Elem> {
    entries: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Elem> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<F>, rows: usize, cols: usize) {
        let name = name.into();
        assert_eq!(data.len(), rows * cols, "parameter {name} has wrong length");
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, data: Arc::new(data), rows, cols });
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.slot(name).map(|i| &self.entries[i])
    }

    pub fn entry(&self, slot: usize) -> &Param<F> {
        &self.entries[slot]
    }

    /// Mutable view of one parameter buffer (clones only if a tape still
    /// holds the old version).
    pub fn entry_data_mut(&mut self, slot: usize) -> &mut Vec<F> {
        Arc::make_mut(&mut self.entries[slot].data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.entries.iter()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }
}

/// The model: architecture plus parameters.
#[derive(Debug, Clone)]
pub struct Net<F: Elem> {
    pub cfg: ArchConfig,
    pub params: ParamStore<F>,
}

fn normal<F: Elem>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<F> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(z * std)
        })
        .collect()
}

impl<F: Elem> Net<F> {
    /// Fresh parameters, deterministic in `seed`.
    pub fn init(cfg: ArchConfig, seed: u64) -> Result<Self, TensorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = cfg.model.d_model;
        let vocab = cfg.vocab_size();

        params.insert("embed.table", normal(&mut rng, vocab * d, 1.0), vocab, d);

        if let Some(g) = &cfg.gbst {
            for b in 1..=g.max_block {
                let w = g.conv_width_for_block(b);
                let std = 1.0 / ((w * d) as f64).sqrt();
                params.insert(
                    format!("gbst.conv{b}"),
                    normal(&mut rng, w * d * d, std),
                    w * d,
                    d,
                );
            }
            params.insert("gbst.score", normal(&mut rng, d, 1.0 / (d as f64).sqrt()), d, 1);
        }

        let m = &cfg.model;
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = 1.0 / (m.d_kv as f64).sqrt();
        let attn_params = |params: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: &str| {
            for h in 0..m.n_heads {
                params.insert(
                    format!("{prefix}.q{h}"),
                    normal(rng, d * m.d_kv, proj_std),
                    d,
                    m.d_kv,
                );
                params.insert(
                    format!("{prefix}.k{h}"),
                    normal(rng, d * m.d_kv, proj_std),
                    d,
                    m.d_kv,
                );
                params.insert(
                    format!("{prefix}.v{h}"),
                    normal(rng, d * m.d_kv, proj_std),
                    d,
                    m.d_kv,
                );
                params.insert(
                    format!("{prefix}.o{h}"),
                    normal(rng, m.d_kv * d, out_std),
                    m.d_kv,
                    d,
                );
            }
        };

        if m.n_enc_layers > 0 {
            params.insert(
                "enc.rel_bias",
                vec![F::zero(); m.n_heads * m.rel_bias_buckets],
                m.n_heads,
                m.rel_bias_buckets,
            );
            for i in 0..m.n_enc_layers {
                params.insert(format!("enc.l{i}.attn.norm"), vec![F::one(); d], 1, d);
                attn_params(&mut params, &mut rng, &format!("enc.l{i}.attn"));
                params.insert(format!("enc.l{i}.ff.norm"), vec![F::one(); d], 1, d);
                params.insert(
                    format!("enc.l{i}.ff.w1"),
                    normal(&mut rng, d * m.d_ff, proj_std),
                    d,
                    m.d_ff,
                );
                params.insert(
                    format!("enc.l{i}.ff.w2"),
                    normal(&mut rng, m.d_ff * d, 1.0 / (m.d_ff as f64).sqrt()),
                    m.d_ff,
                    d,
                );
            }
            params.insert("enc.final_norm", vec![F::one(); d], 1, d);
        }

        if m.n_dec_layers > 0 {
            params.insert(
                "dec.rel_bias",
                vec![F::zero(); m.n_heads * m.rel_bias_buckets],
                m.n_heads,
                m.rel_bias_buckets,
            );
            for i in 0..m.n_dec_layers {
                params.insert(format!("dec.l{i}.self.norm"), vec![F::one(); d], 1, d);
                attn_params(&mut params, &mut rng, &format!("dec.l{i}.self"));
                params.insert(format!("dec.l{i}.cross.norm"), vec![F::one(); d], 1, d);
                attn_params(&mut params, &mut rng, &format!("dec.l{i}.cross"));
                params.insert(format!("dec.l{i}.ff.norm"), vec![F::one(); d], 1, d);
                params.insert(
                    format!("dec.l{i}.ff.w1"),
                    normal(&mut rng, d * m.d_ff, proj_std),
                    d,
                    m.d_ff,
                );
                params.insert(
                    format!("dec.l{i}.ff.w2"),
                    normal(&mut rng, m.d_ff * d, 1.0 / (m.d_ff as f64).sqrt()),
                    m.d_ff,
                    d,
                );
            }
            params.insert("dec.final_norm", vec![F::one(); d], 1, d);
            params.insert(
                "dec.lm_head",
                normal(&mut rng, d * vocab, proj_std),
                d,
                vocab,
            );
        }

        if !cfg.attributes.is_empty() {
            let k = cfg.attributes.len();
            params.insert("head.mlp.w1", normal(&mut rng, d * d, proj_std), d, d);
            // Small output projection keeps the pooling MLP near identity at
            // the start of finetuning.
            params.insert("head.mlp.w2", normal(&mut rng, d * d, 0.1 * proj_std), d, d);
            params.insert("head.wr", normal(&mut rng, d * k, proj_std), d, k);
        }

        Ok(Net { cfg, params })
    }

    /// Reconfigure a pretrained seq2seq net for regression finetuning: the
    /// decoder detaches, a fresh head attaches, and every surviving parameter
    /// keeps its exact values.
    pub fn into_finetune(mut self, attributes: Vec<String>, head_seed: u64) -> Result<Self, TensorError> {
        if attributes.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "into_finetune",
                details: "need at least one attribute".into(),
            });
        }
        let survivors: Vec<Param<F>> = self
            .params
            .entries
            .drain(..)
            .filter(|p| !p.name.starts_with("dec.") && !p.name.starts_with("head."))
            .collect();
        let mut params = ParamStore::new();
        for p in survivors {
            params.index.insert(p.name.clone(), params.entries.len());
            params.entries.push(p);
        }
        let d = self.cfg.model.d_model;
        let k = attributes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
        let proj_std = 1.0 / (d as f64).sqrt();
        params.insert("head.mlp.w1", normal(&mut rng, d * d, proj_std), d, d);
        params.insert("head.mlp.w2", normal(&mut rng, d * d, 0.1 * proj_std), d, d);
        params.insert("head.wr", normal(&mut rng, d * k, proj_std), d, k);

        let mut cfg = self.cfg;
        cfg.model.n_dec_layers = 0;
        cfg.attributes = attributes;
        Ok(Net { cfg, params })
    }
}

/// One forward pass worth of state: a tape plus lazily bound parameters.
pub struct Session<'n, F: Elem> {
    pub net: &'n Net<F>,
    pub tape: Tape<F>,
    bound: Vec<Option<Var>>,
}

impl<'n, F: Elem> Session<'n, F> {
    pub fn new(net: &'n Net<F>) -> Self {
        Session { net, tape: Tape::new(), bound: vec![None; net.params.len()] }
    }

    pub fn inference(net: &'n Net<F>) -> Self {
        Session { net, tape: Tape::inference(), bound: vec![None; net.params.len()] }
    }

    /// Bind a named parameter into the tape (cached per session).
    pub fn p(&mut self, name: &str) -> Result<Var, TensorError> {
        let slot = self.net.params.slot(name).ok_or_else(|| TensorError::InvalidArgument {
            op: "session",
            details: format!("unknown parameter {name}"),
        })?;
        if let Some(v) = self.bound[slot] {
            return Ok(v);
        }
        let p = self.net.params.entry(slot);
        let v = self.tape.leaf_shared(Arc::clone(&p.data), p.rows, p.cols, true)?;
        self.bound[slot] = Some(v);
        Ok(v)
    }

    /// (slot, var) pairs for every parameter this session touched.
    pub fn bindings(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    /// Gradients indexed by parameter slot.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<Option<Vec<F>>> {
        let mut out = vec![None; self.net.params.len()];
        for (slot, var) in self.bindings() {
            if let Some(g) = grads.get(var) {
                out[slot] = Some(g.to_vec());
            }
        }
        out
    }

    fn bind_gbst(&mut self, g: &GbstConfig) -> Result<GbstParams, TensorError> {
        let conv_kernels = (1..=g.max_block)
            .map(|b| self.p(&format!("gbst.conv{b}")))
            .collect::<Result<_, _>>()?;
        Ok(GbstParams { conv_kernels, score_w: self.p("gbst.score")? })
    }

    fn bind_attention(&mut self, prefix: &str) -> Result<AttentionParams, TensorError> {
        let heads = self.net.cfg.model.n_heads;
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        let mut wo = Vec::with_capacity(heads);
        for h in 0..heads {
            wq.push(self.p(&format!("{prefix}.q{h}"))?);
            wk.push(self.p(&format!("{prefix}.k{h}"))?);
            wv.push(self.p(&format!("{prefix}.v{h}"))?);
            wo.push(self.p(&format!("{prefix}.o{h}"))?);
        }
        Ok(AttentionParams { wq, wk, wv, wo })
    }

    fn bind_encoder(&mut self) -> Result<EncoderParams, TensorError> {
        let n = self.net.cfg.model.n_enc_layers;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            layers.push(EncoderLayerParams {
                attn_norm: self.p(&format!("enc.l{i}.attn.norm"))?,
                attn: self.bind_attention(&format!("enc.l{i}.attn"))?,
                ff_norm: self.p(&format!("enc.l{i}.ff.norm"))?,
                ff_w1: self.p(&format!("enc.l{i}.ff.w1"))?,
                ff_w2: self.p(&format!("enc.l{i}.ff.w2"))?,
            });
        }
        // A zero-layer encoder never touches these; bind something harmless.
        let (rel_bias, final_norm) = if n > 0 {
            (self.p("enc.rel_bias")?, self.p("enc.final_norm")?)
        } else {
            let d = self.net.cfg.model.d_model;
            let dummy = self.tape.constant(vec![F::one(); d], 1, d)?;
            (dummy, dummy)
        };
        Ok(EncoderParams { layers, rel_bias, final_norm })
    }

    fn bind_decoder(&mut self) -> Result<DecoderParams, TensorError> {
        let n = self.net.cfg.model.n_dec_layers;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            layers.push(DecoderLayerParams {
                self_norm: self.p(&format!("dec.l{i}.self.norm"))?,
                self_attn: self.bind_attention(&format!("dec.l{i}.self"))?,
                cross_norm: self.p(&format!("dec.l{i}.cross.norm"))?,
                cross_attn: self.bind_attention(&format!("dec.l{i}.cross"))?,
                ff_norm: self.p(&format!("dec.l{i}.ff.norm"))?,
                ff_w1: self.p(&format!("dec.l{i}.ff.w1"))?,
                ff_w2: self.p(&format!("dec.l{i}.ff.w2"))?,
            });
        }
        Ok(DecoderParams {
            layers,
            rel_bias: self.p("dec.rel_bias")?,
            final_norm: self.p("dec.final_norm")?,
            lm_head: self.p("dec.lm_head")?,
        })
    }

    fn bind_head(&mut self) -> Result<RegressionHead, TensorError> {
        Ok(RegressionHead {
            mlp_w1: self.p("head.mlp.w1")?,
            mlp_w2: self.p("head.mlp.w2")?,
            wr: self.p("head.wr")?,
        })
    }

    /// Bytes -> embeddings -> (optional) latent subwords -> encoder stack.
    pub fn encode_sequence<R: Rng>(
        &mut self,
        seq: &ByteSequence,
        rt: &mut Runtime<R>,
    ) -> Result<EncoderOutput, TensorError> {
        let table = self.p("embed.table")?;
        let x = embed_sequence(&mut self.tape, table, seq)?;
        let (latent, mask) = match self.net.cfg.gbst.clone() {
            Some(g) => {
                let params = self.bind_gbst(&g)?;
                let out = gbst_forward(&mut self.tape, x, &seq.mask, &g, &params)?;
                (out.latent, out.mask)
            }
            None => (x, seq.mask.clone()),
        };
        let cfg = self.net.cfg.model.clone();
        let params = self.bind_encoder()?;
        encode(&mut self.tape, latent, &mask, &cfg, &params, rt)
    }

    /// Pre-sigmoid attribute logits for one example.
    pub fn classify_logits<R: Rng>(
        &mut self,
        seq: &ByteSequence,
        rt: &mut Runtime<R>,
    ) -> Result<Var, TensorError> {
        let enc = self.encode_sequence(seq, rt)?;
        let head = self.bind_head()?;
        let pooled = first_pool(&mut self.tape, &enc, &head)?;
        regression_logits(&mut self.tape, pooled, &head)
    }

    /// Sigmoid BCE finetuning loss for one labeled example.
    pub fn finetune_loss<R: Rng>(
        &mut self,
        seq: &ByteSequence,
        labels: &AttributeLabels,
        rt: &mut Runtime<R>,
    ) -> Result<Var, TensorError> {
        let logits = self.classify_logits(seq, rt)?;
        sigmoid_bce_loss(&mut self.tape, logits, labels)
    }

    /// Teacher-forced denoising loss for one (input, target) pair.
    pub fn pretrain_loss<R: Rng>(
        &mut self,
        input: &ByteSequence,
        target: &ByteSequence,
        rt: &mut Runtime<R>,
    ) -> Result<Var, TensorError> {
        let enc = self.encode_sequence(input, rt)?;
        let logits = self.decode_target(&enc, target, rt)?;
        self.tape.softmax_cross_entropy(logits, &target.ids, &target.mask)
    }

    /// Decoder logits over the full target (teacher forcing, shifted right).
    pub fn decode_target<R: Rng>(
        &mut self,
        enc: &EncoderOutput,
        target: &ByteSequence,
        rt: &mut Runtime<R>,
    ) -> Result<Var, TensorError> {
        let (dec_input_ids, dec_input_mask) = shift_right(target);
        let table = self.p("embed.table")?;
        let emb = self.tape.embed(table, &dec_input_ids, &dec_input_mask)?;
        let cfg = self.net.cfg.model.clone();
        let params = self.bind_decoder()?;
        decode(&mut self.tape, enc, emb, &dec_input_mask, &cfg, &params, rt)
    }
}

/// Decoder input: pad-id start token followed by the target, dropping its last
/// position.
pub fn shift_right(target: &ByteSequence) -> (Vec<u16>, Vec<bool>) {
    let n = target.ids.len();
    let mut ids = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    ids.push(PAD_ID);
    mask.push(true);
    ids.extend_from_slice(&target.ids[..n - 1]);
    mask.extend_from_slice(&target.mask[..n - 1]);
    (ids, mask)
}

/// Score texts against every configured attribute. Each text runs on its own
/// inference tape; results are order-stable and identical whether or not the
/// caller batches.
pub fn score_texts<F: Elem>(net: &Net<F>, texts: &[String]) -> Result<Vec<Vec<f64>>, TensorError> {
    use rayon::prelude::*;
    texts
        .par_iter()
        .map(|text| {
            let seq = crate::bytes::encode_text(text, net.cfg.max_len, true);
            let mut session = Session::inference(net);
            let logits = session.classify_logits(&seq, &mut Runtime::inference())?;
            let probs = session.tape.sigmoid(logits);
            Ok(session.tape.value(probs).iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytes::encode_text;
    use crate::gradcheck::grad_check;

    fn tiny_cfg() -> ArchConfig {
        ArchConfig {
            model: ModelConfig {
                d_model: 8,
                d_ff: 16,
                d_kv: 4,
                n_heads: 2,
                n_enc_layers: 2,
                n_dec_layers: 2,
                dropout_rate: 0.0,
                rel_bias_buckets: 8,
                rel_bias_max_distance: 32,
            },
            gbst: Some(GbstConfig { max_block: 4, conv_width: 5, downsample: 2, d_model: 8 }),
            max_len: 24,
            max_sentinels: 4,
            attributes: vec!["toxicity".into(), "insult".into()],
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: Net<f64> = Net::init(tiny_cfg(), 7).unwrap();
        let b: Net<f64> = Net::init(tiny_cfg(), 7).unwrap();
        let c: Net<f64> = Net::init(tiny_cfg(), 8).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.data, pb.data);
        }
        assert!(a.params.iter().zip(c.params.iter()).any(|(x, y)| x.data != y.data));
    }

    #[test]
    fn classify_shapes_and_determinism() {
        let net: Net<f64> = Net::init(tiny_cfg(), 3).unwrap();
        let seq = encode_text("some text", net.cfg.max_len, true);
        let run = || {
            let mut s = Session::inference(&net);
            let logits = s.classify_logits(&seq, &mut Runtime::inference()).unwrap();
            assert_eq!(s.tape.shape(logits), (1, 2));
            s.tape.value(logits).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scores_lie_in_unit_interval() {
        let net: Net<f64> = Net::init(tiny_cfg(), 3).unwrap();
        let scores =
            score_texts(&net, &["hello".to_string(), "\u{1f600}\u{1f600}".to_string()]).unwrap();
        for row in &scores {
            assert_eq!(row.len(), 2);
            assert!(row.iter().all(|&s| (0.0..1.0).contains(&s) && s > 0.0));
        }
    }

    #[test]
    fn padding_length_does_not_change_loss() {
        let mut cfg_short = tiny_cfg();
        cfg_short.max_len = 24;
        let mut cfg_long = cfg_short.clone();
        cfg_long.max_len = 48;
        let short: Net<f64> = Net::init(cfg_short, 5).unwrap();
        // Same parameters, longer padding.
        let long = Net { cfg: cfg_long, params: short.params.clone() };

        let labels = AttributeLabels::all_present(vec![1.0, 0.0]);
        let loss_of = |net: &Net<f64>| {
            let seq = encode_text("short text", net.cfg.max_len, true);
            let mut s = Session::inference(net);
            let loss = s.finetune_loss(&seq, &labels, &mut Runtime::inference()).unwrap();
            s.tape.scalar(loss)
        };
        let a = loss_of(&short);
        let b = loss_of(&long);
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn pretrain_loss_runs_and_is_finite() {
        let net: Net<f64> = Net::init(tiny_cfg(), 9).unwrap();
        let input = encode_text("corrupted input", net.cfg.max_len, false);
        let target = encode_text("span", net.cfg.max_len, false);
        let mut s = Session::new(&net);
        let loss = s.pretrain_loss(&input, &target, &mut Runtime::inference()).unwrap();
        assert!(s.tape.scalar(loss).is_finite());
    }

    #[test]
    fn finetune_reconfiguration_keeps_encoder_values() {
        let pre: Net<f64> = Net::init(tiny_cfg(), 11).unwrap();
        let before: Vec<(String, Vec<f64>)> = pre
            .params
            .iter()
            .map(|p| (p.name.clone(), p.data.to_vec()))
            .collect();
        let fine = pre.clone().into_finetune(vec!["toxicity".into()], 99).unwrap();
        assert_eq!(fine.cfg.model.n_dec_layers, 0);
        // Every non-decoder parameter survives bit-identically.
        for (name, data) in &before {
            if name.starts_with("dec.") {
                assert!(fine.params.get(name).is_none(), "{name} should be dropped");
            } else if name.starts_with("head.") {
                // replaced by a fresh head
            } else {
                let p = fine.params.get(name).unwrap_or_else(|| panic!("{name} missing"));
                assert_eq!(&*p.data, data, "{name} changed");
            }
        }
        assert!(fine.params.get("head.wr").is_some());
    }

    #[test]
    fn full_graph_grad_check_tiny() {
        // One instance of the full classification graph; the acceptance suite
        // sweeps more sizes and instances.
        let mut cfg = tiny_cfg();
        cfg.model.n_dec_layers = 0;
        cfg.max_len = 16;
        let net: Net<f64> = Net::init(cfg, 13).unwrap();
        let seq = encode_text("abcdef", net.cfg.max_len, true);
        let labels = AttributeLabels::all_present(vec![1.0, 0.0]);
        let specs = grad_check_specs(&net);
        let report = grad_check(
            &|tape: &mut Tape<f64>, vs: &[Var]| {
                run_with_probe_params(&net, tape, vs, |s| {
                    s.finetune_loss(&seq, &labels, &mut Runtime::inference())
                })
            },
            &specs,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel error {}", report.max_rel_error);
    }
}

/// Parameter specs for [`crate::gradcheck::grad_check`] in the net's slot
/// order, so probe leaves can stand in for the real parameters.
pub fn grad_check_specs(net: &Net<f64>) -> Vec<crate::gradcheck::ParamSpec> {
    net.params
        .iter()
        .map(|p| crate::gradcheck::ParamSpec::new(p.name.clone(), p.data.to_vec(), p.rows, p.cols))
        .collect()
}

/// Run a session whose parameter bindings are the given probe leaves (in slot
/// order) instead of the stored values. The tape is borrowed from the caller
/// so gradient checking can drive the full model graph.
pub fn run_with_probe_params<T>(
    net: &Net<f64>,
    tape: &mut Tape<f64>,
    probe: &[Var],
    f: impl FnOnce(&mut Session<f64>) -> Result<T, TensorError>,
) -> Result<T, TensorError> {
    assert_eq!(probe.len(), net.params.len(), "probe vars must cover every slot");
    let inner = std::mem::take(tape);
    let mut session =
        Session { net, tape: inner, bound: probe.iter().copied().map(Some).collect() };
    let result = f(&mut session);
    *tape = session.tape;
    result
}
