//! A small pre-LN encoder-decoder transformer with optional adapters.
//!
//! Adapters sit after the feed-forward residual of every block: with `h` the
//! block output, the block emits `h + delta(h)`. Adapted layers are numbered
//! 1..=L on the encoder and L+1..=2L on the decoder.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AttentionLayout, Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::moe::{MixPhmMeta, MixPhmModule, Mode, RoutingKind, FACTOR_INIT_STD};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::phm::PhmConfig;
use crate::rsa::{ActivationDump, LayerActivations, SampleActivations, Side};
use crate::seed::derive_seed;
use crate::tasks::{Sample, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Blocks per stack.
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d: 32,
            heads: 4,
            d_ff: 64,
            vocab: 64,
            max_len: 24,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let BackboneConfig {
            layers,
            d,
            heads,
            d_ff,
            vocab,
            max_len,
        } = *self;
        if layers == 0 || d == 0 || heads == 0 || vocab <= EOS || max_len < 2 {
            return Err(Error::Config(format!("degenerate backbone {self:?}")));
        }
        if d % heads != 0 {
            return Err(Error::Config(format!("d={d} not divisible by {heads} heads")));
        }
        if d_ff < d {
            return Err(Error::Config(format!("d_ff={d_ff} smaller than d={d}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttentionIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FeedForwardIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm_self: NormIds,
    self_attn: AttentionIds,
    cross: Option<(NormIds, AttentionIds)>,
    norm_ff: NormIds,
    ff: FeedForwardIds,
}

/// Frozen-able transformer weights.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    enc_norm: NormIds,
    dec_norm: NormIds,
    head_w: ParamId,
    head_b: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = Matrix::random_normal(rows, cols, std, &mut self.rng);
        self.store.add(name, m, ParamGroup::Backbone)
    }

    fn filled(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Matrix::filled(rows, cols, v), ParamGroup::Backbone)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.filled(format!("{prefix}/gain"), 1, d, 1.0),
            bias: self.filled(format!("{prefix}/bias"), 1, d, 0.0),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize, out_std: f64) -> AttentionIds {
        let std = (1.0 / d as f64).sqrt();
        AttentionIds {
            q: self.normal(format!("{prefix}/q"), d, d, std),
            k: self.normal(format!("{prefix}/k"), d, d, std),
            v: self.normal(format!("{prefix}/v"), d, d, std),
            o: self.normal(format!("{prefix}/o"), d, d, out_std),
        }
    }

    fn block(&mut self, prefix: &str, c: &BackboneConfig, cross: bool) -> Block {
        let d = c.d;
        let out_std = (1.0 / (2 * c.layers * d) as f64).sqrt();
        Block {
            norm_self: self.norm(&format!("{prefix}/ln_self"), d),
            self_attn: self.attention(&format!("{prefix}/self"), d, out_std),
            cross: cross.then(|| (self.norm(&format!("{prefix}/ln_cross"), d), self.attention(&format!("{prefix}/cross"), d, out_std))),
            norm_ff: self.norm(&format!("{prefix}/ln_ff"), d),
            ff: FeedForwardIds {
                w1: self.normal(format!("{prefix}/ff/w1"), d, c.d_ff, (1.0 / d as f64).sqrt()),
                b1: self.filled(format!("{prefix}/ff/b1"), 1, c.d_ff, 0.0),
                w2: self.normal(format!("{prefix}/ff/w2"), c.d_ff, d, (1.0 / (2 * c.layers * c.d_ff) as f64).sqrt()),
                b2: self.filled(format!("{prefix}/ff/b2"), 1, d, 0.0),
            },
        }
    }
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone/init")),
        };
        let c = config;
        let tok_emb = init.normal("backbone/tok_emb".into(), c.vocab, c.d, 1.0);
        let enc_pos = init.normal("backbone/enc_pos".into(), c.max_len, c.d, 0.5);
        let dec_pos = init.normal("backbone/dec_pos".into(), c.max_len, c.d, 0.5);
        let encoder = (1..=c.layers).map(|l| init.block(&format!("backbone/enc{l}"), &c, false)).collect();
        let decoder = (1..=c.layers).map(|l| init.block(&format!("backbone/dec{l}"), &c, true)).collect();
        let enc_norm = init.norm("backbone/enc_norm", c.d);
        let dec_norm = init.norm("backbone/dec_norm", c.d);
        let head_w = init.normal("backbone/head/w".into(), c.d, c.vocab, (1.0 / c.d as f64).sqrt());
        let head_b = init.filled("backbone/head/b".into(), 1, c.vocab, 0.0);
        Ok(Self {
            config,
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            head_w,
            head_b,
        })
    }
}

/// Plain bottleneck adapters `act(h W_dn) W_up`, one per block, without biases.
#[derive(Clone, Debug)]
pub struct PlainAdapters {
    pub d_r: usize,
    pub activation: Activation,
    pub layers: Vec<(ParamId, ParamId)>,
}

impl PlainAdapters {
    /// Down projections start at N(0, 0.02²), up projections at zero.
    pub fn new(store: &mut ParamStore, d: usize, d_r: usize, n_layers: usize, activation: Activation, seed: u64) -> Result<Self> {
        if d_r == 0 {
            return Err(Error::Config("adapter bottleneck must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "adapter/init"));
        let layers = (1..=n_layers)
            .map(|l| {
                (
                    store.add(
                        format!("adapter/layer{l}/down"),
                        Matrix::random_normal(d, d_r, FACTOR_INIT_STD, &mut rng),
                        ParamGroup::Adapter,
                    ),
                    store.add(format!("adapter/layer{l}/up"), Matrix::zeros(d_r, d), ParamGroup::Adapter),
                )
            })
            .collect();
        Ok(Self { d_r, activation, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

#[derive(Clone, Debug)]
pub enum Adapters {
    None,
    Plain(PlainAdapters),
    MixPhm(MixPhmModule),
}

impl Adapters {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Adapters::None => Vec::new(),
            Adapters::Plain(p) => p.param_ids(),
            Adapters::MixPhm(m) => m.param_ids(),
        }
    }
}

/// Which adapter family to insert.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AdapterSpec {
    None,
    Plain {
        d_r: usize,
        activation: Activation,
    },
    Mixphm {
        n: usize,
        d_r: usize,
        d_k: usize,
        n_experts: usize,
        activation: Activation,
        routing: RoutingKind,
    },
}

impl AdapterSpec {
    /// The 968-parameter default mixture on the default backbone.
    pub fn default_mixphm() -> Self {
        AdapterSpec::Mixphm {
            n: 2,
            d_r: 8,
            d_k: 2,
            n_experts: 2,
            activation: Activation::Gelu,
            routing: RoutingKind::BatchRandom,
        }
    }

    /// Plain adapter with bottleneck 4: 1,024 parameters on the default backbone.
    pub fn matched_plain() -> Self {
        AdapterSpec::Plain {
            d_r: 4,
            activation: Activation::Gelu,
        }
    }

    pub fn build(&self, store: &mut ParamStore, d: usize, n_layers: usize, seed: u64) -> Result<Adapters> {
        Ok(match *self {
            AdapterSpec::None => Adapters::None,
            AdapterSpec::Plain { d_r, activation } => {
                Adapters::Plain(PlainAdapters::new(store, d, d_r, n_layers, activation, seed)?)
            }
            AdapterSpec::Mixphm {
                n,
                d_r,
                d_k,
                n_experts,
                activation,
                routing,
            } => {
                if !RoutingKind::TRAINING.contains(&routing) {
                    return Err(Error::Config(format!("{} is not a training routing", routing.as_str())));
                }
                Adapters::MixPhm(MixPhmModule::new(
                    store,
                    PhmConfig::new(n, d, d_r, d_k)?,
                    n_experts,
                    n_layers,
                    activation,
                    routing,
                    seed,
                )?)
            }
        })
    }
}

/// Padded token ids for a batch. Row `b·len + t` is token `t` of sample `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub n_b: usize,
    pub src_len: usize,
    pub src: Vec<usize>,
    pub src_valid: Vec<usize>,
    pub tgt_len: usize,
    /// `[BOS, y…]`.
    pub dec_in: Vec<usize>,
    /// `[y…, EOS]`, `None` at padding.
    pub targets: Vec<Option<usize>>,
    pub tgt_valid: Vec<usize>,
}

impl Batch {
    pub fn new(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Protocol("empty batch".into()));
        }
        let src_len = samples.iter().map(|s| s.input.len()).max().unwrap_or(0);
        let tgt_len = samples.iter().map(|s| s.answer.len() + 1).max().unwrap_or(1);
        if samples.iter().any(|s| s.input.is_empty()) {
            return Err(Error::Protocol("empty input sequence".into()));
        }
        let n_b = samples.len();
        let mut b = Batch {
            n_b,
            src_len,
            src: vec![PAD; n_b * src_len],
            src_valid: Vec::with_capacity(n_b),
            tgt_len,
            dec_in: vec![PAD; n_b * tgt_len],
            targets: vec![None; n_b * tgt_len],
            tgt_valid: Vec::with_capacity(n_b),
        };
        for (i, s) in samples.iter().enumerate() {
            b.src[i * src_len..i * src_len + s.input.len()].copy_from_slice(&s.input);
            b.src_valid.push(s.input.len());
            let row = i * tgt_len;
            b.dec_in[row] = BOS;
            for (t, &y) in s.answer.iter().enumerate() {
                b.dec_in[row + t + 1] = y;
                b.targets[row + t] = Some(y);
            }
            b.targets[row + s.answer.len()] = Some(EOS);
            b.tgt_valid.push(s.answer.len() + 1);
        }
        Ok(b)
    }

    /// Whether every sample has the same source and target length.
    pub fn is_uniform(&self) -> bool {
        self.src_valid.iter().all(|&n| n == self.src_len) && self.tgt_valid.iter().all(|&n| n == self.tgt_len)
    }
}

/// Adapter input and delta captured at one adapted layer.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub layer: usize,
    pub side: Side,
    pub h: Var,
    pub delta: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Final encoder output, `n_b·src_len` rows.
    pub enc_out: Var,
    /// Final decoder output, `n_b·tgt_len` rows.
    pub dec_out: Var,
    pub taps: Vec<Tap>,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub backbone: Backbone,
    pub adapters: Adapters,
}

/// Sidecar describing how to rebuild a model from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub backbone: BackboneConfig,
    pub adapter: AdapterMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AdapterMeta {
    None,
    Plain { d_r: usize, activation: Activation },
    Mixphm(MixPhmMeta),
}

struct Ctx<'a> {
    store: &'a ParamStore,
    mode: Mode,
    rule: Vec<Var>,
    taps: Vec<Tap>,
}

impl Seq2Seq {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(store, config, seed)?,
            adapters: Adapters::None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    /// Number of adapted layers, encoder and decoder together.
    pub fn adapted_layers(&self) -> usize {
        2 * self.backbone.config.layers
    }

    /// Freezes the backbone and inserts adapters built from `spec`.
    pub fn insert_adapters(&mut self, store: &mut ParamStore, spec: &AdapterSpec, seed: u64) -> Result<()> {
        if !matches!(self.adapters, Adapters::None) {
            return Err(Error::Config("model already has adapters".into()));
        }
        store.set_trainable_group(ParamGroup::Backbone, false);
        self.adapters = spec.build(store, self.backbone.config.d, self.adapted_layers(), seed)?;
        Ok(())
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, batch: &Batch, mode: Mode) -> Result<ForwardOutput> {
        let mut ctx = self.context(tape, store, mode)?;
        let enc_out = self.encode(tape, &mut ctx, batch)?;
        let dec_out = self.decode(tape, &mut ctx, enc_out, batch, &batch.dec_in, batch.tgt_len, &batch.tgt_valid)?;
        let logits = self.head(tape, store, dec_out)?;
        Ok(ForwardOutput {
            logits,
            enc_out,
            dec_out,
            taps: ctx.taps,
        })
    }

    fn context<'a>(&self, tape: &mut Tape, store: &'a ParamStore, mode: Mode) -> Result<Ctx<'a>> {
        let rule = match &self.adapters {
            Adapters::MixPhm(m) => m.rule_vars(tape, store)?,
            _ => Vec::new(),
        };
        Ok(Ctx {
            store,
            mode,
            rule,
            taps: Vec::new(),
        })
    }

    fn head(&self, tape: &mut Tape, store: &ParamStore, dec_out: Var) -> Result<Var> {
        let w = tape.param(store, self.backbone.head_w);
        let b = tape.param(store, self.backbone.head_b);
        let logits = tape.matmul(dec_out, w)?;
        tape.add_row(logits, b)
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], len: usize, pos: ParamId) -> Result<Var> {
        let c = &self.backbone.config;
        if len > c.max_len {
            return Err(Error::Contract(format!("sequence length {len} exceeds max_len {}", c.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::Contract(format!("token {bad} outside vocabulary of {}", c.vocab)));
        }
        let emb = tape.param(store, self.backbone.tok_emb);
        let tok = tape.gather_rows(emb, ids)?;
        let pos_table = tape.param(store, pos);
        let positions: Vec<usize> = (0..ids.len()).map(|r| r % len).collect();
        let p = tape.gather_rows(pos_table, &positions)?;
        tape.add(tok, p)
    }

    fn norm(tape: &mut Tape, store: &ParamStore, x: Var, ids: NormIds) -> Result<Var> {
        let g = tape.param(store, ids.gain);
        let b = tape.param(store, ids.bias);
        tape.layer_norm(x, g, b)
    }

    fn attend(tape: &mut Tape, store: &ParamStore, x: Var, memory: Var, ids: AttentionIds, layout: AttentionLayout) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            tape.param(store, ids.q),
            tape.param(store, ids.k),
            tape.param(store, ids.v),
            tape.param(store, ids.o),
        );
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(memory, wk)?;
        let v = tape.matmul(memory, wv)?;
        let a = tape.attention(q, k, v, layout)?;
        tape.matmul(a, wo)
    }

    fn feed_forward(tape: &mut Tape, store: &ParamStore, x: Var, ids: FeedForwardIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(store, ids.w1),
            tape.param(store, ids.b1),
            tape.param(store, ids.w2),
            tape.param(store, ids.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        tape.add_row(h, b2)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        tape: &mut Tape,
        ctx: &mut Ctx<'_>,
        block: &Block,
        x: Var,
        self_layout: AttentionLayout,
        cross: Option<(Var, AttentionLayout)>,
        layer: usize,
        side: Side,
    ) -> Result<Var> {
        let store = ctx.store;
        let n = Self::norm(tape, store, x, block.norm_self)?;
        let a = Self::attend(tape, store, n, n, block.self_attn, self_layout.clone())?;
        let mut x = tape.add(x, a)?;
        if let (Some((norm, attn)), Some((memory, layout))) = (block.cross, cross) {
            let n = Self::norm(tape, store, x, norm)?;
            let a = Self::attend(tape, store, n, memory, attn, layout)?;
            x = tape.add(x, a)?;
        }
        let n = Self::norm(tape, store, x, block.norm_ff)?;
        let f = Self::feed_forward(tape, store, n, block.ff)?;
        let h = tape.add(x, f)?;
        self.adapt(tape, ctx, h, layer, side, self_layout.batch, self_layout.q_len)
    }

    #[allow(clippy::too_many_arguments)]
    fn adapt(&mut self, tape: &mut Tape, ctx: &mut Ctx<'_>, h: Var, layer: usize, side: Side, n_b: usize, n_t: usize) -> Result<Var> {
        let store = ctx.store;
        let (out, delta) = match &mut self.adapters {
            Adapters::None => return Ok(h),
            Adapters::Plain(p) => {
                let (dn, up) = p.layers[layer - 1];
                let dn = tape.param(store, dn);
                let up = tape.param(store, up);
                let pre = tape.matmul(h, dn)?;
                let hidden = tape.activation(pre, p.activation);
                let delta = tape.matmul(hidden, up)?;
                (tape.add(delta, h)?, delta)
            }
            Adapters::MixPhm(m) => m.forward_layer(tape, store, &ctx.rule, layer - 1, h, n_b, n_t, ctx.mode)?,
        };
        ctx.taps.push(Tap { layer, side, h, delta });
        Ok(out)
    }

    fn encode(&mut self, tape: &mut Tape, ctx: &mut Ctx<'_>, batch: &Batch) -> Result<Var> {
        let store = ctx.store;
        let mut x = self.embed(tape, store, &batch.src, batch.src_len, self.backbone.enc_pos)?;
        let layout = AttentionLayout {
            batch: batch.n_b,
            q_len: batch.src_len,
            k_len: batch.src_len,
            heads: self.backbone.config.heads,
            causal: false,
            key_valid: batch.src_valid.clone(),
        };
        let blocks = self.backbone.encoder.clone();
        for (l, block) in blocks.iter().enumerate() {
            x = self.block(tape, ctx, block, x, layout.clone(), None, l + 1, Side::Encoder)?;
        }
        Self::norm(tape, store, x, self.backbone.enc_norm)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &mut self,
        tape: &mut Tape,
        ctx: &mut Ctx<'_>,
        enc_out: Var,
        batch: &Batch,
        dec_in: &[usize],
        tgt_len: usize,
        tgt_valid: &[usize],
    ) -> Result<Var> {
        let store = ctx.store;
        let mut x = self.embed(tape, store, dec_in, tgt_len, self.backbone.dec_pos)?;
        let heads = self.backbone.config.heads;
        let self_layout = AttentionLayout {
            batch: batch.n_b,
            q_len: tgt_len,
            k_len: tgt_len,
            heads,
            causal: true,
            key_valid: tgt_valid.to_vec(),
        };
        let cross_layout = AttentionLayout {
            batch: batch.n_b,
            q_len: tgt_len,
            k_len: batch.src_len,
            heads,
            causal: false,
            key_valid: batch.src_valid.clone(),
        };
        let offset = self.backbone.config.layers;
        let blocks = self.backbone.decoder.clone();
        for (l, block) in blocks.iter().enumerate() {
            x = self.block(
                tape,
                ctx,
                block,
                x,
                self_layout.clone(),
                Some((enc_out, cross_layout.clone())),
                offset + l + 1,
                Side::Decoder,
            )?;
        }
        Self::norm(tape, store, x, self.backbone.dec_norm)
    }

    /// Greedy decoding in inference mode; each output stops before the first EOS.
    pub fn greedy_decode(&mut self, store: &ParamStore, samples: &[Sample]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::new(&refs)?;
            let steps = batch.tgt_len.min(self.backbone.config.max_len);
            let mut tape = Tape::new();
            let mut ctx = self.context(&mut tape, store, Mode::Inference)?;
            let enc_out = self.encode(&mut tape, &mut ctx, &batch)?;
            let n_b = batch.n_b;
            let mut generated: Vec<Vec<usize>> = vec![Vec::new(); n_b];
            let mut done = vec![false; n_b];
            for t in 1..=steps {
                let mut dec_in = Vec::with_capacity(n_b * t);
                for g in &generated {
                    dec_in.push(BOS);
                    dec_in.extend(g.iter().copied().chain(std::iter::repeat(PAD)).take(t - 1));
                }
                let dec_out = self.decode(&mut tape, &mut ctx, enc_out, &batch, &dec_in, t, &vec![t; n_b])?;
                let logits = self.head(&mut tape, store, dec_out)?;
                let values = tape.value(logits);
                for b in 0..n_b {
                    if done[b] {
                        continue;
                    }
                    let row = values.row(b * t + t - 1);
                    let next = argmax(row);
                    if next == EOS {
                        done[b] = true;
                    } else {
                        generated[b].push(next);
                    }
                }
                if done.iter().all(|&d| d) {
                    break;
                }
            }
            out.extend(generated);
        }
        Ok(out)
    }

    /// Captures `(H, H_a, H̃)` per adapted layer for every sample, teacher-forced on the gold answer.
    pub fn activation_dump(&mut self, store: &ParamStore, samples: &[Sample]) -> Result<ActivationDump> {
        if matches!(self.adapters, Adapters::None) {
            return Err(Error::Report("model has no adapters to analyse".into()));
        }
        let mut dump = ActivationDump {
            encoder_layers: self.backbone.config.layers,
            samples: Vec::with_capacity(samples.len()),
        };
        let mut next_id = 0;
        for chunk in samples.chunks(64) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::new(&refs)?;
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, store, &batch, Mode::Inference)?;
            for b in 0..batch.n_b {
                let layers = fwd
                    .taps
                    .iter()
                    .map(|tap| {
                        let (len, valid, out) = match tap.side {
                            Side::Encoder => (batch.src_len, batch.src_valid[b], fwd.enc_out),
                            Side::Decoder => (batch.tgt_len, batch.tgt_valid[b], fwd.dec_out),
                        };
                        let rows = |v: Var| rows_of(tape.value(v), b * len, valid);
                        Ok(LayerActivations {
                            layer: tap.layer,
                            side: tap.side,
                            h: rows(tap.h)?,
                            ha: rows(tap.delta)?,
                            htilde: rows(out)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                dump.samples.push(SampleActivations { sample: next_id, layers });
                next_id += 1;
            }
        }
        Ok(dump)
    }

    /// Records of every live parameter, in store order.
    pub fn records(&self, store: &ParamStore) -> Vec<(String, Matrix)> {
        store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            backbone: self.backbone.config,
            adapter: match &self.adapters {
                Adapters::None => AdapterMeta::None,
                Adapters::Plain(p) => AdapterMeta::Plain {
                    d_r: p.d_r,
                    activation: p.activation,
                },
                Adapters::MixPhm(m) => AdapterMeta::Mixphm(m.meta()),
            },
        }
    }

    /// Writes `path` (tensor container) and `path.json` (sidecar).
    pub fn save(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let records: Vec<(String, Matrix)> = self
            .records(store)
            .into_iter()
            .filter(|(name, _)| !name.starts_with("critic/"))
            .collect();
        checkpoint::save(path, &records)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    /// Loads a model saved by [`Seq2Seq::save`] into a fresh store.
    /// The backbone is frozen whenever adapters are present.
    pub fn load(path: &Path) -> Result<(ParamStore, Self)> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!("checkpoint {} not found", path.display())));
        }
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
            Error::Checkpoint(format!("sidecar {}: {e}", sidecar_path(path).display()))
        })?)?;
        let records = checkpoint::load(path)?;
        Self::from_records(&meta, &records)
    }

    pub fn from_records(meta: &ModelMeta, records: &[(String, Matrix)]) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let mut model = Seq2Seq::new(&mut store, meta.backbone, 0)?;
        match &meta.adapter {
            AdapterMeta::None => {}
            AdapterMeta::Plain { d_r, activation } => {
                let spec = AdapterSpec::Plain {
                    d_r: *d_r,
                    activation: *activation,
                };
                model.insert_adapters(&mut store, &spec, 0)?;
            }
            AdapterMeta::Mixphm(m) => {
                store.set_trainable_group(ParamGroup::Backbone, false);
                model.adapters = Adapters::MixPhm(MixPhmModule::from_records(&mut store, m, records)?);
            }
        }
        let mut assigned = 0;
        for (name, value) in records {
            let Some(id) = store.find(name) else {
                if name.starts_with("mixphm/") && matches!(meta.adapter, AdapterMeta::Mixphm(_)) {
                    continue;
                }
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            };
            if store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} in file, {:?} expected",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            store.get_mut(id).value = value.clone();
            assigned += 1;
        }
        let live = store.iter().count();
        if assigned != live {
            return Err(Error::Checkpoint(format!("checkpoint provides {assigned} of {live} tensors")));
        }
        Ok((store, model))
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn rows_of(m: &Matrix, start: usize, len: usize) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = (start..start + len).map(|r| m.row(r).to_vec()).collect();
    Matrix::from_rows(&rows)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Fraction of samples whose decoded answer equals the gold answer exactly.
pub fn exact_match(predictions: &[Vec<usize>], samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(samples).filter(|(p, s)| **p == s.answer).count();
    hits as f64 / samples.len() as f64
}

/// A random permutation of `0..n`.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
