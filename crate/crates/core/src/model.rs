//! Dual-encoder, shared-decoder transformer and scheme-driven weight init.
//!
//! One parameter store holds every named tensor; forward passes are built on
//! a [`Graph`](crate::graph::Graph) per step and reference parameters through
//! their store ids, so two branches touching the same name accumulate into
//! one gradient buffer. Naming is load-bearing: checkpoint records, init
//! copy rules, and tying sets are all expressed as name prefixes.
//!
//! Layer layout is pre-norm throughout. The speech front-end averages frame
//! pairs (stride 2) before the linear projection so speech sequences stay
//! longer than text but within the positional budget. Sinusoidal positions
//! are added at both front-ends; embeddings are scaled by sqrt(d) at lookup.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::data::{BOS, SPECIALS};
use crate::error::ModelError;
use crate::graph::{AttnSegment, Graph, Var};
use crate::rng::{child_seed, fnv1a, rng_from};
use crate::tensor::Tensor;

/// Hyperparameters shared by every architecture in the workspace.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_speech_lower_layers: usize,
    pub n_shared_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub speech_feature_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough for grad checks, big enough that
    /// attention heads and both encoder stacks are exercised.
    pub fn desk_default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            n_speech_lower_layers: 2,
            n_shared_encoder_layers: 2,
            n_decoder_layers: 2,
            src_vocab: 40,
            tgt_vocab: 44,
            speech_feature_dim: 16,
            dropout: 0.1,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::Contract(format!(
                "d_model {} must be even for sinusoidal positions",
                self.d_model
            )));
        }
        if self.d_ffn == 0 {
            return Err(ModelError::Contract("d_ffn must be positive".into()));
        }
        if self.n_speech_lower_layers == 0
            || self.n_shared_encoder_layers == 0
            || self.n_decoder_layers == 0
        {
            return Err(ModelError::Contract("layer counts must be >= 1".into()));
        }
        if self.src_vocab < SPECIALS || self.tgt_vocab < SPECIALS {
            return Err(ModelError::Contract(format!(
                "vocabularies must include the {SPECIALS} reserved ids"
            )));
        }
        if self.speech_feature_dim == 0 {
            return Err(ModelError::Contract(
                "speech_feature_dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Contract(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.max_positions == 0 {
            return Err(ModelError::Contract("max_positions must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable digest of the full configuration, for checkpoint metadata.
    pub fn digest(&self) -> u64 {
        let s = format!(
            "d={} h={} ffn={} sl={} se={} dec={} sv={} tv={} fd={} p={} mp={}",
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.n_speech_lower_layers,
            self.n_shared_encoder_layers,
            self.n_decoder_layers,
            self.src_vocab,
            self.tgt_vocab,
            self.speech_feature_dim,
            self.dropout,
            self.max_positions
        );
        fnv1a(s.as_bytes())
    }
}

/// Joint-training initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    St,
    Jt,
    JtSAsr,
    JtSMt,
    JtProposed,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "st" => Some(Self::St),
            "jt" => Some(Self::Jt),
            "jt-s-asr" => Some(Self::JtSAsr),
            "jt-s-mt" => Some(Self::JtSMt),
            "jt-proposed" => Some(Self::JtProposed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::St => "st",
            Self::Jt => "jt",
            Self::JtSAsr => "jt-s-asr",
            Self::JtSMt => "jt-s-mt",
            Self::JtProposed => "jt-proposed",
        }
    }

    /// Whether the text encoder reuses the shared (speech-side) stack.
    pub fn shares_encoder(self) -> bool {
        matches!(self, Self::JtSAsr | Self::JtSMt | Self::JtProposed)
    }

    /// Whether the architecture carries a text branch at all. Loss weights
    /// are orthogonal: CAR and KD are enabled by lambda and alpha, not by
    /// the scheme name.
    pub fn has_text_branch(self) -> bool {
        self != Self::St
    }
}

/// Which architecture a parameter store describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Speech encoder + decoder over the source vocabulary.
    Asr,
    /// Text encoder + decoder over the target vocabulary.
    Mt,
    /// Speech-to-text with an optional text branch, per scheme.
    Joint(Scheme),
}

impl ModelKind {
    fn has_speech(self) -> bool {
        !matches!(self, Self::Mt)
    }

    fn has_text(self) -> bool {
        match self {
            Self::Mt => true,
            Self::Asr | Self::Joint(Scheme::St) => false,
            Self::Joint(_) => true,
        }
    }

    /// True when the text branch runs through its own `text_encoder.*` stack
    /// instead of the shared one.
    fn text_has_own_stack(self) -> bool {
        matches!(self, Self::Joint(Scheme::Jt))
    }

    fn decoder_vocab(self, cfg: &ModelConfig) -> usize {
        match self {
            Self::Asr => cfg.src_vocab,
            _ => cfg.tgt_vocab,
        }
    }
}

/// One named tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Insertion-ordered parameter table with name lookup.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn insert(&mut self, name: String, value: Tensor) -> usize {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.params.len();
        let grad = vec![0.0; value.numel()];
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Parameter)> {
        self.params.iter().enumerate()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Pulls accumulated gradients out of a finished graph into the store.
    pub fn accumulate_grads(&mut self, g: &Graph) {
        let pairs: Vec<(usize, Var)> = g.param_leaves().collect();
        for (id, var) in pairs {
            if let Some(grad) = g.grad(var) {
                let acc = &mut self.params[id].grad;
                for (a, &gv) in acc.iter_mut().zip(grad) {
                    *a += gv;
                }
            }
        }
    }
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

fn embed_init(rng: &mut impl Rng, rows: usize, d: usize) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("std");
    let data: Vec<f64> = (0..rows * d).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, d], data).expect("init shape")
}

/// The model: a config, a kind, and a named parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    kind: ModelKind,
    store: ParamStore,
    pos_table: Vec<f64>,
}

/// Packed encoder output: `h` is [B * t_max, d] with per-item real lengths.
pub struct Encoded {
    pub h: Var,
    pub t_max: usize,
    pub lens: Vec<usize>,
}

/// Packed decoder output over teacher-forced targets.
pub struct Decoded {
    pub logits: Var,
    pub k_max: usize,
    pub lens: Vec<usize>,
    /// Post-residual output of each decoder layer, [B * k_max, d].
    pub layer_states: Vec<Var>,
}

/// Single-sample eval forward with the probes analysis needs.
pub struct ForwardTrace {
    pub encoder: Tensor,
    pub layer_states: Vec<Tensor>,
    pub logits: Tensor,
}

/// Input side of a single-sample forward.
pub enum SampleInput<'a> {
    Speech(&'a Tensor),
    Text(&'a [usize]),
}

impl Model {
    pub fn new(cfg: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let d = cfg.d_model;

        let norm = |store: &mut ParamStore, seed: u64, prefix: &str| {
            let name = format!("{prefix}.gain");
            let _ = child_seed(seed, &name);
            store.insert(name, Tensor::new(vec![1, d], vec![1.0; d]).expect("shape"));
            store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![1, d]));
        };
        let linear = |store: &mut ParamStore, seed: u64, w: String, b: String, din: usize, dout: usize| {
            let mut rng = rng_from(child_seed(seed, &w));
            store.insert(w, xavier(&mut rng, din, dout));
            store.insert(b, Tensor::zeros(vec![1, dout]));
        };
        let attn = |store: &mut ParamStore, seed: u64, prefix: &str| {
            for pair in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
                linear(
                    store,
                    seed,
                    format!("{prefix}.{}", pair.0),
                    format!("{prefix}.{}", pair.1),
                    d,
                    d,
                );
            }
        };
        let ffn = |store: &mut ParamStore, seed: u64, prefix: &str| {
            linear(
                store,
                seed,
                format!("{prefix}.w1"),
                format!("{prefix}.b1"),
                d,
                cfg.d_ffn,
            );
            linear(
                store,
                seed,
                format!("{prefix}.w2"),
                format!("{prefix}.b2"),
                cfg.d_ffn,
                d,
            );
        };
        let encoder_layer = |store: &mut ParamStore, seed: u64, prefix: &str| {
            norm(store, seed, &format!("{prefix}.self_attn_norm"));
            attn(store, seed, &format!("{prefix}.self_attn"));
            norm(store, seed, &format!("{prefix}.ffn_norm"));
            ffn(store, seed, &format!("{prefix}.ffn"));
        };
        let decoder_layer = |store: &mut ParamStore, seed: u64, prefix: &str| {
            norm(store, seed, &format!("{prefix}.self_attn_norm"));
            attn(store, seed, &format!("{prefix}.self_attn"));
            norm(store, seed, &format!("{prefix}.cross_attn_norm"));
            attn(store, seed, &format!("{prefix}.cross_attn"));
            norm(store, seed, &format!("{prefix}.ffn_norm"));
            ffn(store, seed, &format!("{prefix}.ffn"));
        };

        if kind.has_speech() {
            linear(
                &mut store,
                seed,
                "speech_frontend.proj.weight".into(),
                "speech_frontend.proj.bias".into(),
                cfg.speech_feature_dim,
                d,
            );
            for i in 0..cfg.n_speech_lower_layers {
                encoder_layer(&mut store, seed, &format!("speech_encoder.{i}"));
            }
        }
        // The shared stack exists for every speech-bearing kind and for the
        // text-only kind, whose single stack reuses the shared names so that
        // encoder-sharing init schemes reduce to prefix copies.
        for i in 0..cfg.n_shared_encoder_layers {
            encoder_layer(&mut store, seed, &format!("shared_encoder.{i}"));
        }
        norm(&mut store, seed, "shared_encoder.final_norm");

        if kind.has_text() {
            let emb = "text_embed.weight".to_string();
            let mut rng = rng_from(child_seed(seed, &emb));
            store.insert(emb, embed_init(&mut rng, cfg.src_vocab, d));
            if kind.text_has_own_stack() {
                for i in 0..cfg.n_shared_encoder_layers {
                    encoder_layer(&mut store, seed, &format!("text_encoder.{i}"));
                }
                norm(&mut store, seed, "text_encoder.final_norm");
            }
        }

        let dec_vocab = kind.decoder_vocab(&cfg);
        {
            let emb = "decoder.embed.weight".to_string();
            let mut rng = rng_from(child_seed(seed, &emb));
            store.insert(emb, embed_init(&mut rng, dec_vocab, d));
        }
        for i in 0..cfg.n_decoder_layers {
            decoder_layer(&mut store, seed, &format!("decoder.{i}"));
        }
        norm(&mut store, seed, "decoder.final_norm");
        linear(
            &mut store,
            seed,
            "output_proj.weight".into(),
            "output_proj.bias".into(),
            d,
            dec_vocab,
        );

        let pos_table = sinusoid_table(cfg.max_positions, d);
        Ok(Self { cfg, kind, store, pos_table })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn decoder_vocab(&self) -> usize {
        self.kind.decoder_vocab(&self.cfg)
    }

    /// Names whose gradients receive contributions from both branches during
    /// joint training. Empty when only one branch exists.
    pub fn tied_parameters(&self) -> Vec<String> {
        let scheme = match self.kind {
            ModelKind::Joint(s) => s,
            _ => return Vec::new(),
        };
        if scheme == Scheme::St {
            return Vec::new();
        }
        let mut out: Vec<String> = self
            .store
            .names()
            .filter(|n| {
                n.starts_with("decoder.")
                    || n.starts_with("output_proj.")
                    || (scheme.shares_encoder() && n.starts_with("shared_encoder."))
            })
            .map(str::to_string)
            .collect();
        out.sort();
        out
    }

    fn p(&self, g: &mut Graph, name: &str, live: bool) -> Result<Var, ModelError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| ModelError::MissingTensor { name: name.to_string() })?;
        let value = &self.store.get(id).value;
        Ok(if live {
            g.param_leaf(id, value)
        } else {
            g.const_param_leaf(id, value)
        })
    }

    fn positions(&self, g: &mut Graph, batch: usize, t_max: usize) -> Var {
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(batch * t_max * d);
        for _ in 0..batch {
            data.extend_from_slice(&self.pos_table[..t_max * d]);
        }
        g.constant(Tensor::new(vec![batch * t_max, d], data).expect("shape"))
    }

    fn linear_apply(
        &self,
        g: &mut Graph,
        x: Var,
        w: &str,
        b: &str,
        live: bool,
    ) -> Result<Var, ModelError> {
        let wv = self.p(g, w, live)?;
        let bv = self.p(g, b, live)?;
        let y = g.matmul(x, wv)?;
        Ok(g.add_rows(y, bv)?)
    }

    fn norm_apply(&self, g: &mut Graph, x: Var, prefix: &str, live: bool) -> Result<Var, ModelError> {
        let gain = self.p(g, &format!("{prefix}.gain"), live)?;
        let bias = self.p(g, &format!("{prefix}.bias"), live)?;
        Ok(g.layer_norm(x, gain, bias)?)
    }

    fn attn_apply(
        &self,
        g: &mut Graph,
        q_src: Var,
        kv_src: Var,
        prefix: &str,
        segments: &[AttnSegment],
        causal: bool,
        live: bool,
    ) -> Result<Var, ModelError> {
        let q = self.linear_apply(g, q_src, &format!("{prefix}.wq"), &format!("{prefix}.bq"), live)?;
        let k = self.linear_apply(g, kv_src, &format!("{prefix}.wk"), &format!("{prefix}.bk"), live)?;
        let v = self.linear_apply(g, kv_src, &format!("{prefix}.wv"), &format!("{prefix}.bv"), live)?;
        let a = g.attention(q, k, v, self.cfg.n_heads, segments, causal)?;
        self.linear_apply(g, a, &format!("{prefix}.wo"), &format!("{prefix}.bo"), live)
    }

    fn self_attn_block(
        &self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        segments: &[AttnSegment],
        causal: bool,
        live: bool,
    ) -> Result<Var, ModelError> {
        let n = self.norm_apply(g, x, &format!("{prefix}.self_attn_norm"), live)?;
        let o = self.attn_apply(g, n, n, &format!("{prefix}.self_attn"), segments, causal, live)?;
        let o = g.dropout(o, self.cfg.dropout)?;
        Ok(g.add(x, o)?)
    }

    fn cross_attn_block(
        &self,
        g: &mut Graph,
        x: Var,
        enc: Var,
        prefix: &str,
        segments: &[AttnSegment],
        live: bool,
    ) -> Result<Var, ModelError> {
        let n = self.norm_apply(g, x, &format!("{prefix}.cross_attn_norm"), live)?;
        let o = self.attn_apply(g, n, enc, &format!("{prefix}.cross_attn"), segments, false, live)?;
        let o = g.dropout(o, self.cfg.dropout)?;
        Ok(g.add(x, o)?)
    }

    fn ffn_block(&self, g: &mut Graph, x: Var, prefix: &str, live: bool) -> Result<Var, ModelError> {
        let n = self.norm_apply(g, x, &format!("{prefix}.ffn_norm"), live)?;
        let h = self.linear_apply(g, n, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"), live)?;
        let h = g.gelu(h)?;
        let h = self.linear_apply(g, h, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"), live)?;
        let h = g.dropout(h, self.cfg.dropout)?;
        Ok(g.add(x, h)?)
    }

    fn encoder_stack(
        &self,
        g: &mut Graph,
        mut x: Var,
        stack: &str,
        n_layers: usize,
        segments: &[AttnSegment],
        live: bool,
    ) -> Result<Var, ModelError> {
        for i in 0..n_layers {
            let prefix = format!("{stack}.{i}");
            x = self.self_attn_block(g, x, &prefix, segments, false, live)?;
            x = self.ffn_block(g, x, &prefix, live)?;
        }
        Ok(x)
    }

    /// Encodes a batch of raw speech features ([N_i, d_s] each) into the
    /// packed representation H^s. Frame pairs are averaged before the
    /// projection, so output lengths are ceil(N_i / 2).
    pub fn encode_speech_batch(
        &self,
        g: &mut Graph,
        feats: &[&Tensor],
        live: bool,
    ) -> Result<Encoded, ModelError> {
        if !self.kind.has_speech() {
            return Err(ModelError::Contract(
                "model has no speech branch".into(),
            ));
        }
        if feats.is_empty() {
            return Err(ModelError::Contract("empty speech batch".into()));
        }
        let d_s = self.cfg.speech_feature_dim;
        let mut subs = Vec::with_capacity(feats.len());
        for f in feats {
            let (n, fd) = f.dims2()?;
            if fd != d_s {
                return Err(ModelError::Contract(format!(
                    "speech features have width {fd}, model expects {d_s}"
                )));
            }
            if n > self.cfg.max_positions {
                return Err(ModelError::Length { len: n, max: self.cfg.max_positions });
            }
            subs.push(subsample_frames(f)?);
        }
        let lens: Vec<usize> = subs.iter().map(|s| s.shape()[0]).collect();
        let t_max = *lens.iter().max().expect("nonempty");
        let b = subs.len();

        let mut packed = vec![0.0; b * t_max * d_s];
        for (i, s) in subs.iter().enumerate() {
            let rows = lens[i];
            packed[i * t_max * d_s..i * t_max * d_s + rows * d_s].copy_from_slice(s.data());
        }
        let x = g.constant(Tensor::new(vec![b * t_max, d_s], packed).expect("shape"));
        let x = self.linear_apply(
            g,
            x,
            "speech_frontend.proj.weight",
            "speech_frontend.proj.bias",
            live,
        )?;
        let pos = self.positions(g, b, t_max);
        let x = g.add(x, pos)?;
        let x = g.dropout(x, self.cfg.dropout)?;

        let segments: Vec<AttnSegment> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| AttnSegment {
                q_start: i * t_max,
                q_len: l,
                kv_start: i * t_max,
                kv_len: l,
            })
            .collect();
        let x = self.encoder_stack(
            g,
            x,
            "speech_encoder",
            self.cfg.n_speech_lower_layers,
            &segments,
            live,
        )?;
        let x = self.encoder_stack(
            g,
            x,
            "shared_encoder",
            self.cfg.n_shared_encoder_layers,
            &segments,
            live,
        )?;
        let h = self.norm_apply(g, x, "shared_encoder.final_norm", live)?;
        Ok(Encoded { h, t_max, lens })
    }

    /// Encodes a batch of source token sequences into the packed H^t.
    pub fn encode_text_batch(
        &self,
        g: &mut Graph,
        seqs: &[&[usize]],
        live: bool,
    ) -> Result<Encoded, ModelError> {
        if !self.kind.has_text() {
            return Err(ModelError::Contract("model has no text branch".into()));
        }
        if seqs.is_empty() {
            return Err(ModelError::Contract("empty text batch".into()));
        }
        for s in seqs {
            if s.is_empty() {
                return Err(ModelError::Contract("empty text sequence".into()));
            }
            if s.len() > self.cfg.max_positions {
                return Err(ModelError::Length { len: s.len(), max: self.cfg.max_positions });
            }
            for &id in *s {
                if id >= self.cfg.src_vocab {
                    return Err(ModelError::Vocab { id, vocab: self.cfg.src_vocab });
                }
            }
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let t_max = *lens.iter().max().expect("nonempty");
        let b = seqs.len();
        let mut ids = vec![crate::data::PAD; b * t_max];
        for (i, s) in seqs.iter().enumerate() {
            ids[i * t_max..i * t_max + s.len()].copy_from_slice(s);
        }

        let table = self.p(g, "text_embed.weight", live)?;
        let x = g.gather(table, &ids)?;
        let x = g.scale(x, (self.cfg.d_model as f64).sqrt())?;
        let pos = self.positions(g, b, t_max);
        let x = g.add(x, pos)?;
        let x = g.dropout(x, self.cfg.dropout)?;

        let segments: Vec<AttnSegment> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| AttnSegment {
                q_start: i * t_max,
                q_len: l,
                kv_start: i * t_max,
                kv_len: l,
            })
            .collect();
        let (stack, final_norm) = if self.kind.text_has_own_stack() {
            ("text_encoder", "text_encoder.final_norm")
        } else {
            ("shared_encoder", "shared_encoder.final_norm")
        };
        let x = self.encoder_stack(
            g,
            x,
            stack,
            self.cfg.n_shared_encoder_layers,
            &segments,
            live,
        )?;
        let h = self.norm_apply(g, x, final_norm, live)?;
        Ok(Encoded { h, t_max, lens })
    }

    /// Teacher-forced decode: inputs are the targets shifted right behind
    /// BOS, logits predict each target position. `y` must not be empty.
    pub fn decode_batch(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        targets: &[&[usize]],
        live: bool,
    ) -> Result<Decoded, ModelError> {
        if targets.len() != enc.lens.len() {
            return Err(ModelError::Contract(format!(
                "decode batch size {} does not match encoder batch {}",
                targets.len(),
                enc.lens.len()
            )));
        }
        let vocab = self.decoder_vocab();
        for y in targets {
            if y.is_empty() {
                return Err(ModelError::Contract("empty target sequence".into()));
            }
            if y.len() > self.cfg.max_positions {
                return Err(ModelError::Length { len: y.len(), max: self.cfg.max_positions });
            }
            for &id in *y {
                if id >= vocab {
                    return Err(ModelError::Vocab { id, vocab });
                }
            }
        }
        let lens: Vec<usize> = targets.iter().map(|y| y.len()).collect();
        let k_max = *lens.iter().max().expect("nonempty");
        let b = targets.len();

        let mut ids = vec![crate::data::PAD; b * k_max];
        for (i, y) in targets.iter().enumerate() {
            ids[i * k_max] = BOS;
            for (j, &t) in y[..y.len() - 1].iter().enumerate() {
                ids[i * k_max + 1 + j] = t;
            }
        }

        let table = self.p(g, "decoder.embed.weight", live)?;
        let x = g.gather(table, &ids)?;
        let x = g.scale(x, (self.cfg.d_model as f64).sqrt())?;
        let pos = self.positions(g, b, k_max);
        let x = g.add(x, pos)?;
        let mut x = g.dropout(x, self.cfg.dropout)?;

        let self_segs: Vec<AttnSegment> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| AttnSegment {
                q_start: i * k_max,
                q_len: l,
                kv_start: i * k_max,
                kv_len: l,
            })
            .collect();
        let cross_segs: Vec<AttnSegment> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| AttnSegment {
                q_start: i * k_max,
                q_len: l,
                kv_start: i * enc.t_max,
                kv_len: enc.lens[i],
            })
            .collect();

        let mut layer_states = Vec::with_capacity(self.cfg.n_decoder_layers);
        for i in 0..self.cfg.n_decoder_layers {
            let prefix = format!("decoder.{i}");
            x = self.self_attn_block(g, x, &prefix, &self_segs, true, live)?;
            x = self.cross_attn_block(g, x, enc.h, &prefix, &cross_segs, live)?;
            x = self.ffn_block(g, x, &prefix, live)?;
            layer_states.push(x);
        }
        let x = self.norm_apply(g, x, "decoder.final_norm", live)?;
        let logits = self.linear_apply(g, x, "output_proj.weight", "output_proj.bias", live)?;
        Ok(Decoded { logits, k_max, lens, layer_states })
    }

    /// Single-sample eval encode of raw speech features, values only.
    pub fn encode_speech(&self, feats: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let enc = self.encode_speech_batch(&mut g, &[feats], false)?;
        Ok(g.value(enc.h).clone())
    }

    /// Single-sample eval encode of a token sequence, values only.
    pub fn encode_text(&self, ids: &[usize]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let enc = self.encode_text_batch(&mut g, &[ids], false)?;
        Ok(g.value(enc.h).clone())
    }

    /// Full eval forward against teacher-forced targets, returning the
    /// encoder output, per-decoder-layer states, and logits as plain values.
    pub fn forward_trace(
        &self,
        input: SampleInput<'_>,
        y: &[usize],
    ) -> Result<ForwardTrace, ModelError> {
        let mut g = Graph::new();
        let enc = match input {
            SampleInput::Speech(f) => self.encode_speech_batch(&mut g, &[f], false)?,
            SampleInput::Text(ids) => self.encode_text_batch(&mut g, &[ids], false)?,
        };
        let dec = self.decode_batch(&mut g, &enc, &[y], false)?;
        Ok(ForwardTrace {
            encoder: g.value(enc.h).clone(),
            layer_states: dec
                .layer_states
                .iter()
                .map(|&v| g.value(v).clone())
                .collect(),
            logits: g.value(dec.logits).clone(),
        })
    }

    /// Exports every parameter as f32 records plus run metadata.
    pub fn to_checkpoint(&self, step: u64, epoch: u64) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (_, p) in self.store.iter() {
            let data: Vec<f32> = p.value.data().iter().map(|&v| v as f32).collect();
            c.insert(&p.name, p.value.shape().to_vec(), data)
                .expect("canonical names are valid records");
        }
        c.set_meta(step, epoch, self.cfg.digest());
        c
    }

    /// Loads every parameter from a checkpoint. The tensor name sets must
    /// match exactly; metadata records are ignored.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        for extra in ckpt.tensor_names() {
            if self.store.id(extra).is_none() {
                return Err(ModelError::Contract(format!(
                    "checkpoint record {extra} has no matching parameter"
                )));
            }
        }
        for id in 0..self.store.len() {
            let name = self.store.get(id).name.clone();
            let rec = ckpt
                .get(&name)
                .ok_or_else(|| ModelError::MissingTensor { name: name.clone() })?;
            let p = self.store.get_mut(id);
            if rec.shape != p.value.shape() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    found: rec.shape.clone(),
                    expected: p.value.shape().to_vec(),
                });
            }
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&rec.data) {
                *dst = src as f64;
            }
        }
        Ok(())
    }
}

/// Averages frame pairs with stride 2; an odd trailing frame passes through.
/// Output length is ceil(N / 2).
pub fn subsample_frames(x: &Tensor) -> Result<Tensor, ModelError> {
    let (n, d) = x.dims2()?;
    let out_rows = n.div_ceil(2);
    let mut data = vec![0.0; out_rows * d];
    let xv = x.data();
    for r in 0..out_rows {
        let a = 2 * r;
        let b = (2 * r + 1).min(n - 1);
        for c in 0..d {
            data[r * d + c] = 0.5 * (xv[a * d + c] + xv[b * d + c]);
        }
    }
    Ok(Tensor::new(vec![out_rows, d], data).expect("shape"))
}

/// Sinusoidal position table, row-major [max_pos, d].
fn sinusoid_table(max_pos: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; max_pos * d];
    for p in 0..max_pos {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[p * d + 2 * i] = angle.sin();
            out[p * d + 2 * i + 1] = angle.cos();
        }
    }
    out
}

/// Which pretraining run a parameter is copied from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainSource {
    Asr,
    Mt,
}

/// Prefix copy rules for a scheme: (joint-model prefix, source run, prefix
/// inside the source checkpoint).
pub fn init_rules(scheme: Scheme) -> Vec<(&'static str, PretrainSource, &'static str)> {
    use PretrainSource::{Asr, Mt};
    let mut rules = vec![
        ("speech_frontend.", Asr, "speech_frontend."),
        ("speech_encoder.", Asr, "speech_encoder."),
        (
            "shared_encoder.",
            if matches!(scheme, Scheme::JtSMt | Scheme::JtProposed) {
                Mt
            } else {
                Asr
            },
            "shared_encoder.",
        ),
        ("decoder.", Mt, "decoder."),
        ("output_proj.", Mt, "output_proj."),
    ];
    match scheme {
        Scheme::St => {}
        Scheme::Jt => {
            rules.push(("text_embed.", Mt, "text_embed."));
            // The standalone text model keeps its stack under the shared
            // names; in the two-stack scheme those weights land in the
            // text-only stack.
            rules.push(("text_encoder.", Mt, "shared_encoder."));
        }
        Scheme::JtSAsr | Scheme::JtSMt | Scheme::JtProposed => {
            rules.push(("text_embed.", Mt, "text_embed."));
        }
    }
    rules
}

/// Maps a joint-model parameter to its pretrained origin, if the scheme
/// copies it. Every parameter is covered for all schemes today; the Option
/// keeps callers honest about future partial schemes.
pub fn pretrained_source(scheme: Scheme, name: &str) -> Option<(PretrainSource, String)> {
    for (prefix, src, ckpt_prefix) in init_rules(scheme) {
        if let Some(rest) = name.strip_prefix(prefix) {
            return Some((src, format!("{ckpt_prefix}{rest}")));
        }
    }
    None
}

/// Builds a joint model and overwrites every parameter from the two
/// pretraining checkpoints according to the scheme's copy rules.
pub fn init_from_scheme(
    cfg: ModelConfig,
    scheme: Scheme,
    asr: &Checkpoint,
    mt: &Checkpoint,
    seed: u64,
) -> Result<Model, ModelError> {
    let mut model = Model::new(cfg, ModelKind::Joint(scheme), seed)?;
    for id in 0..model.store.len() {
        let name = model.store.get(id).name.clone();
        let (src, ckpt_name) = pretrained_source(scheme, &name).ok_or_else(|| {
            ModelError::Contract(format!("no init rule covers parameter {name}"))
        })?;
        let ckpt = match src {
            PretrainSource::Asr => asr,
            PretrainSource::Mt => mt,
        };
        let rec = ckpt
            .get(&ckpt_name)
            .ok_or_else(|| ModelError::MissingTensor { name: ckpt_name.clone() })?;
        let p = model.store.get_mut(id);
        if rec.shape != p.value.shape() {
            return Err(ModelError::ShapeMismatch {
                name: ckpt_name,
                found: rec.shape.clone(),
                expected: p.value.shape().to_vec(),
            });
        }
        for (dst, &src_v) in p.value.data_mut().iter_mut().zip(&rec.data) {
            *dst = src_v as f64;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 24,
            n_speech_lower_layers: 1,
            n_shared_encoder_layers: 2,
            n_decoder_layers: 2,
            src_vocab: 11,
            tgt_vocab: 13,
            speech_feature_dim: 6,
            dropout: 0.1,
            max_positions: 32,
        }
    }

    fn random_feats(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let mut c = tiny_cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.tgt_vocab = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn subsample_averages_pairs_and_keeps_odd_tail() {
        let x = Tensor::from_rows(&[
            vec![2.0, 0.0],
            vec![4.0, 2.0],
            vec![1.0, 1.0],
            vec![3.0, 5.0],
            vec![8.0, 6.0],
        ])
        .unwrap();
        let s = subsample_frames(&x).unwrap();
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.row(0), &[3.0, 1.0]);
        assert_eq!(s.row(1), &[2.0, 3.0]);
        assert_eq!(s.row(2), &[8.0, 6.0]);
    }

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let a = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::Jt), 5).unwrap();
        let b = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::Jt), 5).unwrap();
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.1.name, pb.1.name);
            assert_eq!(pa.1.value.data(), pb.1.value.data());
        }
        let c = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::Jt), 6).unwrap();
        let wa = a.store.by_name("decoder.0.self_attn.wq").unwrap();
        let wc = c.store.by_name("decoder.0.self_attn.wq").unwrap();
        assert_ne!(wa.value.data(), wc.value.data());
        // Same name, same seed, different kind: identical draw.
        let asr = Model::new(tiny_cfg(), ModelKind::Asr, 5).unwrap();
        let shared_a = a.store.by_name("shared_encoder.0.ffn.w1").unwrap();
        let shared_asr = asr.store.by_name("shared_encoder.0.ffn.w1").unwrap();
        assert_eq!(shared_a.value.data(), shared_asr.value.data());
    }

    #[test]
    fn param_name_sets_follow_the_kind() {
        let cfg = tiny_cfg();
        let st = Model::new(cfg.clone(), ModelKind::Joint(Scheme::St), 1).unwrap();
        assert!(st.store.by_name("text_embed.weight").is_none());
        assert!(st.store.by_name("speech_frontend.proj.weight").is_some());

        let jt = Model::new(cfg.clone(), ModelKind::Joint(Scheme::Jt), 1).unwrap();
        assert!(jt.store.by_name("text_encoder.1.ffn.w2").is_some());
        assert!(jt.store.by_name("text_encoder.final_norm.gain").is_some());

        let shared = Model::new(cfg.clone(), ModelKind::Joint(Scheme::JtSMt), 1).unwrap();
        assert!(shared.store.by_name("text_encoder.0.ffn.w2").is_none());
        assert!(shared.store.by_name("text_embed.weight").is_some());

        let mt = Model::new(cfg.clone(), ModelKind::Mt, 1).unwrap();
        assert!(mt.store.by_name("speech_frontend.proj.weight").is_none());
        assert!(mt.store.by_name("shared_encoder.0.self_attn.wq").is_some());
        let emb = mt.store.by_name("decoder.embed.weight").unwrap();
        assert_eq!(emb.value.shape(), &[cfg.tgt_vocab, cfg.d_model]);

        let asr = Model::new(cfg.clone(), ModelKind::Asr, 1).unwrap();
        let emb = asr.store.by_name("decoder.embed.weight").unwrap();
        assert_eq!(emb.value.shape(), &[cfg.src_vocab, cfg.d_model]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::St), 3).unwrap();
        let feats = random_feats(9, 6, 11);
        let y = [5, 7, 4, 2];
        let a = m.forward_trace(SampleInput::Speech(&feats), &y).unwrap();
        let b = m.forward_trace(SampleInput::Speech(&feats), &y).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        assert_eq!(a.encoder.data(), b.encoder.data());
        assert_eq!(a.layer_states.len(), 2);
        assert_eq!(a.logits.shape(), &[4, 13]);
        assert_eq!(a.encoder.shape(), &[5, 16]);
    }

    #[test]
    fn decoder_is_causal_over_targets() {
        let m = Model::new(tiny_cfg(), ModelKind::Mt, 9).unwrap();
        let src = [4, 5, 6, 7];
        let y: Vec<usize> = vec![5, 6, 7, 8, 9];
        let base = m.forward_trace(SampleInput::Text(&src), &y).unwrap();
        // Changing y[2] feeds input position 3, so logits rows 0..=2 must
        // stay bitwise identical and some later row must move.
        let mut y2 = y.clone();
        y2[2] = 10;
        let pert = m.forward_trace(SampleInput::Text(&src), &y2).unwrap();
        let v = m.decoder_vocab();
        for r in 0..3 {
            assert_eq!(
                &base.logits.data()[r * v..(r + 1) * v],
                &pert.logits.data()[r * v..(r + 1) * v],
                "row {r} changed"
            );
        }
        let tail_moved = (3..5).any(|r| {
            base.logits.data()[r * v..(r + 1) * v] != pert.logits.data()[r * v..(r + 1) * v]
        });
        assert!(tail_moved);
    }

    #[test]
    fn positions_make_order_matter() {
        let m = Model::new(tiny_cfg(), ModelKind::Mt, 2).unwrap();
        let a = m.encode_text(&[4, 5, 6]).unwrap();
        let b = m.encode_text(&[6, 5, 4]).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn batched_forward_matches_single_samples() {
        let m = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::JtSMt), 21).unwrap();
        let feats: Vec<Tensor> = [7usize, 12, 4]
            .iter()
            .enumerate()
            .map(|(i, &n)| random_feats(n, 6, 40 + i as u64))
            .collect();
        let ys: Vec<Vec<usize>> = vec![vec![4, 5, 6], vec![7, 8], vec![9, 10, 11, 12]];

        let mut g = Graph::new();
        let refs: Vec<&Tensor> = feats.iter().collect();
        let enc = m.encode_speech_batch(&mut g, &refs, false).unwrap();
        let yrefs: Vec<&[usize]> = ys.iter().map(|y| y.as_slice()).collect();
        let dec = m.decode_batch(&mut g, &enc, &yrefs, false).unwrap();
        let h = g.value(enc.h).clone();
        let logits = g.value(dec.logits).clone();
        let v = m.decoder_vocab();
        let d = m.cfg().d_model;

        for i in 0..3 {
            let single = m
                .forward_trace(SampleInput::Speech(&feats[i]), &ys[i])
                .unwrap();
            let hrows = enc.lens[i];
            for r in 0..hrows {
                let batch_row = &h.data()[(i * enc.t_max + r) * d..(i * enc.t_max + r + 1) * d];
                for (a, b) in batch_row.iter().zip(single.encoder.row(r)) {
                    assert!((a - b).abs() < 1e-12, "encoder row {r} of item {i}");
                }
            }
            for r in 0..ys[i].len() {
                let batch_row =
                    &logits.data()[(i * dec.k_max + r) * v..(i * dec.k_max + r + 1) * v];
                for (a, b) in batch_row.iter().zip(single.logits.row(r)) {
                    assert!((a - b).abs() < 1e-12, "logits row {r} of item {i}");
                }
            }
        }
    }

    #[test]
    fn input_contracts_are_enforced() {
        let m = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::JtSMt), 1).unwrap();
        let feats = random_feats(40, 6, 1);
        assert!(matches!(
            m.encode_speech(&feats),
            Err(ModelError::Length { len: 40, max: 32 })
        ));
        assert!(matches!(
            m.encode_text(&[4, 99]),
            Err(ModelError::Vocab { id: 99, vocab: 11 })
        ));
        let ok = random_feats(8, 6, 2);
        let enc_err = m.forward_trace(SampleInput::Speech(&ok), &[13]);
        assert!(matches!(enc_err, Err(ModelError::Vocab { id: 13, vocab: 13 })));
        let mt = Model::new(tiny_cfg(), ModelKind::Mt, 1).unwrap();
        assert!(mt.encode_speech(&ok).is_err());
    }

    #[test]
    fn single_target_position_decodes() {
        let m = Model::new(tiny_cfg(), ModelKind::Mt, 4).unwrap();
        let tr = m.forward_trace(SampleInput::Text(&[4, 5]), &[6]).unwrap();
        assert_eq!(tr.logits.shape(), &[1, 13]);
    }

    #[test]
    fn tied_parameter_sets_per_scheme() {
        let cfg = tiny_cfg();
        let st = Model::new(cfg.clone(), ModelKind::Joint(Scheme::St), 1).unwrap();
        assert!(st.tied_parameters().is_empty());

        let jt = Model::new(cfg.clone(), ModelKind::Joint(Scheme::Jt), 1).unwrap();
        let tied = jt.tied_parameters();
        assert!(tied.iter().all(|n| n.starts_with("decoder.") || n.starts_with("output_proj.")));
        assert!(tied.contains(&"decoder.embed.weight".to_string()));
        assert!(tied.contains(&"output_proj.weight".to_string()));
        assert!(!tied.iter().any(|n| n.starts_with("shared_encoder.")));

        let prop = Model::new(cfg, ModelKind::Joint(Scheme::JtProposed), 1).unwrap();
        let tied = prop.tied_parameters();
        assert!(tied.iter().any(|n| n.starts_with("shared_encoder.")));
        assert!(!tied.iter().any(|n| n.starts_with("speech_encoder.")));
        assert!(!tied.iter().any(|n| n.starts_with("text_embed.")));
    }

    #[test]
    fn checkpoint_round_trip_preserves_values() {
        let cfg = tiny_cfg();
        let m = Model::new(cfg.clone(), ModelKind::Joint(Scheme::JtProposed), 8).unwrap();
        let ckpt = m.to_checkpoint(17, 2);
        assert_eq!(ckpt.meta_config_digest(), Some(cfg.digest()));
        let mut m2 = Model::new(cfg, ModelKind::Joint(Scheme::JtProposed), 999).unwrap();
        m2.load_checkpoint(&ckpt).unwrap();
        for ((_, a), (_, b)) in m.store.iter().zip(m2.store.iter()) {
            let same = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| (*x as f32) == (*y as f32));
            assert!(same, "{} drifted through f32", a.name);
        }
    }

    #[test]
    fn load_checkpoint_rejects_mismatches() {
        let cfg = tiny_cfg();
        let m = Model::new(cfg.clone(), ModelKind::Mt, 1).unwrap();
        let ckpt = m.to_checkpoint(0, 0);
        let mut asr = Model::new(cfg.clone(), ModelKind::Asr, 1).unwrap();
        // The MT checkpoint lacks the speech front-end entirely.
        assert!(asr.load_checkpoint(&ckpt).is_err());
        let mut grown = cfg;
        grown.tgt_vocab = 17;
        let mut big = Model::new(grown, ModelKind::Mt, 1).unwrap();
        let err = big.load_checkpoint(&ckpt).unwrap_err();
        assert!(matches!(err, ModelError::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn scheme_init_copies_the_right_sources() {
        let cfg = tiny_cfg();
        let asr = Model::new(cfg.clone(), ModelKind::Asr, 100).unwrap();
        let mt = Model::new(cfg.clone(), ModelKind::Mt, 200).unwrap();
        let asr_ck = asr.to_checkpoint(0, 0);
        let mt_ck = mt.to_checkpoint(0, 0);

        let same = |m: &Model, name: &str, src: &Model, src_name: &str| {
            let a = m.store.by_name(name).unwrap();
            let b = src.store.by_name(src_name).unwrap();
            a.value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| (*x as f32) == (*y as f32))
        };

        for scheme in [Scheme::St, Scheme::Jt, Scheme::JtSAsr, Scheme::JtSMt, Scheme::JtProposed] {
            let m = init_from_scheme(cfg.clone(), scheme, &asr_ck, &mt_ck, 7).unwrap();
            assert!(same(&m, "speech_frontend.proj.weight", &asr, "speech_frontend.proj.weight"));
            assert!(same(&m, "decoder.1.cross_attn.wv", &mt, "decoder.1.cross_attn.wv"));
            assert!(same(&m, "output_proj.bias", &mt, "output_proj.bias"));
            let shared_src = if matches!(scheme, Scheme::JtSMt | Scheme::JtProposed) {
                &mt
            } else {
                &asr
            };
            assert!(same(&m, "shared_encoder.1.ffn.w1", shared_src, "shared_encoder.1.ffn.w1"));
            if scheme == Scheme::Jt {
                assert!(same(&m, "text_encoder.0.self_attn.wq", &mt, "shared_encoder.0.self_attn.wq"));
                assert!(same(&m, "text_encoder.final_norm.gain", &mt, "shared_encoder.final_norm.gain"));
            }
        }
    }

    #[test]
    fn scheme_init_reports_missing_and_mismatched_tensors() {
        let cfg = tiny_cfg();
        let asr = Model::new(cfg.clone(), ModelKind::Asr, 1).unwrap().to_checkpoint(0, 0);
        let mt = Model::new(cfg.clone(), ModelKind::Mt, 2).unwrap().to_checkpoint(0, 0);

        let empty = Checkpoint::new();
        let err = init_from_scheme(cfg.clone(), Scheme::St, &empty, &mt, 7).unwrap_err();
        assert!(matches!(err, ModelError::MissingTensor { .. }), "{err}");

        let mut small = cfg.clone();
        small.d_ffn = 8;
        let bad_mt = Model::new(small, ModelKind::Mt, 2).unwrap().to_checkpoint(0, 0);
        let err = init_from_scheme(cfg, Scheme::St, &asr, &bad_mt, 7).unwrap_err();
        assert!(matches!(err, ModelError::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn shared_scheme_matches_standalone_text_model_at_step_zero() {
        let cfg = tiny_cfg();
        let asr = Model::new(cfg.clone(), ModelKind::Asr, 100).unwrap();
        let mut mt = Model::new(cfg.clone(), ModelKind::Mt, 200).unwrap();
        let mt_ck = mt.to_checkpoint(0, 0);
        // Round the standalone model through f32 so both sides saw the same
        // quantization.
        mt.load_checkpoint(&mt_ck).unwrap();
        let joint =
            init_from_scheme(cfg, Scheme::JtSMt, &asr.to_checkpoint(0, 0), &mt_ck, 7).unwrap();

        let src = [4, 9, 6, 5, 10];
        let y = [5, 6, 12, 8];
        let a = mt.forward_trace(SampleInput::Text(&src), &y).unwrap();
        let b = joint.forward_trace(SampleInput::Text(&src), &y).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn train_mode_backward_reaches_both_ends() {
        let m = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::St), 6).unwrap();
        let feats = random_feats(10, 6, 3);
        let mut g = Graph::with_seed(1);
        let enc = m.encode_speech_batch(&mut g, &[&feats], true).unwrap();
        let y: &[usize] = &[4, 5, 6];
        let dec = m.decode_batch(&mut g, &enc, &[y], true).unwrap();
        let loss = g.sum(dec.logits);
        g.backward(loss).unwrap();

        let mut store = m.store().clone();
        store.zero_grads();
        store.accumulate_grads(&g);
        for name in ["speech_frontend.proj.weight", "output_proj.weight", "decoder.embed.weight"] {
            let p = store.by_name(name).unwrap();
            assert!(p.grad.iter().any(|&v| v != 0.0), "{name} has zero grad");
        }
    }
}
