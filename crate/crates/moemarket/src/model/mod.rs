//! A 2-layer character-level transformer whose feed-forward sublayers are
//! pools of 8 experts managed by the market.
//!
//! Pre-norm blocks: `x + attn(rms(x))` then `x + moe(rms(x))`, followed by a
//! final RMS norm and the vocabulary projection. Every parameter tensor is its
//! own optimizer group, so a group whose gradient is identically zero in a
//! step (a dormant expert, a dormant router column) is skipped bit-exactly.

mod experts;

pub use experts::{
    expert_param_count, route_logits, select_top_k, ExpertSlot, LayerRecords, MoeLayer,
    TokenRouting,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{adam_step, AdamParams, AdamState, Tape, Tensor, TensorId};
use crate::{Error, Result};

use experts::{moe_layer_forward, ExpertIds, MoeIds};

pub const N_LAYERS: usize = 2;
pub const EXPERTS_PER_LAYER: usize = 8;
const INIT_STD: f64 = 0.02;

/// A parameter tensor together with its Adam accumulators.
pub struct Param {
    pub value: Tensor,
    pub adam: AdamState,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let (r, c) = value.shape();
        Param { value, adam: AdamState::new(r, c) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context: usize,
    pub top_k: usize,
    pub base_width: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("vocab must have at least 2 symbols".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context == 0 {
            return Err(Error::Config("context must be positive".into()));
        }
        if !(1..=2).contains(&self.top_k) {
            return Err(Error::Config(format!("top_k must be 1 or 2, got {}", self.top_k)));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        Ok(())
    }
}

/// Addresses of every parameter group in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKey {
    Embed,
    Pos,
    LmHead,
    AttnWq(usize),
    AttnWk(usize),
    AttnWv(usize),
    AttnWo(usize),
    RouterCol { layer: usize, slot: usize },
    ExpertW1 { layer: usize, slot: usize },
    ExpertB1 { layer: usize, slot: usize },
    ExpertW2 { layer: usize, slot: usize },
    ExpertB2 { layer: usize, slot: usize },
}

struct Attention {
    wq: Param,
    wk: Param,
    wv: Param,
    wo: Param,
}

struct Block {
    attn: Attention,
    moe: MoeLayer,
}

pub struct Model {
    pub cfg: ModelConfig,
    embed: Param,
    pos: Param,
    blocks: Vec<Block>,
    lm_head: Param,
    next_expert_id: u64,
}

/// Routing records plus per-token losses for one batch.
pub struct StepRecords {
    pub layers: Vec<LayerRecords>,
    pub per_token_loss: Vec<f64>,
}

pub struct StepOutput {
    pub mean_loss: f64,
    pub records: StepRecords,
}

struct BuiltGraph {
    logits: TensorId,
    bindings: Vec<(ParamKey, TensorId)>,
    records: Vec<LayerRecords>,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = Param::new(Tensor::randn(cfg.vocab, d, INIT_STD, rng));
        let pos = Param::new(Tensor::randn(cfg.context, d, INIT_STD, rng));
        let mut blocks = Vec::with_capacity(N_LAYERS);
        let mut next_id = 0u64;
        for layer in 0..N_LAYERS {
            let attn = Attention {
                wq: Param::new(Tensor::randn(d, d, INIT_STD, rng)),
                wk: Param::new(Tensor::randn(d, d, INIT_STD, rng)),
                wv: Param::new(Tensor::randn(d, d, INIT_STD, rng)),
                wo: Param::new(Tensor::randn(d, d, INIT_STD, rng)),
            };
            let router_cols =
                (0..EXPERTS_PER_LAYER).map(|_| Param::new(Tensor::randn(d, 1, INIT_STD, rng))).collect();
            let mut slots = Vec::with_capacity(EXPERTS_PER_LAYER);
            for _ in 0..EXPERTS_PER_LAYER {
                slots.push(new_expert(next_id, layer, cfg.base_width, d, 0, rng));
                next_id += 1;
            }
            blocks.push(Block { attn, moe: MoeLayer { experts: slots, router_cols } });
        }
        let lm_head = Param::new(Tensor::randn(d, cfg.vocab, INIT_STD, rng));
        Ok(Model { cfg, embed, pos, blocks, lm_head, next_expert_id: next_id })
    }

    pub fn next_expert_id(&self) -> u64 {
        self.next_expert_id
    }

    pub fn expert(&self, layer: usize, slot: usize) -> &ExpertSlot {
        &self.blocks[layer].moe.experts[slot]
    }

    pub fn moe_layer(&self, layer: usize) -> &MoeLayer {
        &self.blocks[layer].moe
    }

    /// Age every slot of `layer` by one market evaluation, except a slot that
    /// was just spawned in the same evaluation.
    pub fn increment_ages(&mut self, layer: usize, skip_slot: Option<usize>) {
        for (slot, e) in self.blocks[layer].moe.experts.iter_mut().enumerate() {
            if Some(slot) != skip_slot {
                e.age_market_steps += 1;
            }
        }
    }

    /// Replace `slot` with a newborn: fresh random weights, sampled width,
    /// age 0, and a reinitialized router column. Returns the newborn's id.
    pub fn replace_expert(
        &mut self,
        layer: usize,
        slot: usize,
        width_choices: &[usize],
        birth_step: u64,
        rng: &mut ChaCha8Rng,
    ) -> u64 {
        let id = self.next_expert_id;
        self.next_expert_id += 1;
        let d = self.cfg.d_model;
        let width = width_choices[rng.gen_range(0..width_choices.len())];
        let moe = &mut self.blocks[layer].moe;
        moe.experts[slot] = new_expert(id, layer, width, d, birth_step, rng);
        moe.router_cols[slot] = Param::new(Tensor::randn(d, 1, INIT_STD, rng));
        id
    }

    /// Every parameter group, in a fixed deterministic order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = vec![ParamKey::Embed, ParamKey::Pos];
        for l in 0..self.blocks.len() {
            keys.extend([
                ParamKey::AttnWq(l),
                ParamKey::AttnWk(l),
                ParamKey::AttnWv(l),
                ParamKey::AttnWo(l),
            ]);
            for s in 0..EXPERTS_PER_LAYER {
                keys.push(ParamKey::RouterCol { layer: l, slot: s });
                keys.push(ParamKey::ExpertW1 { layer: l, slot: s });
                keys.push(ParamKey::ExpertB1 { layer: l, slot: s });
                keys.push(ParamKey::ExpertW2 { layer: l, slot: s });
                keys.push(ParamKey::ExpertB2 { layer: l, slot: s });
            }
        }
        keys.push(ParamKey::LmHead);
        keys
    }

    pub fn param(&self, key: ParamKey) -> &Param {
        match key {
            ParamKey::Embed => &self.embed,
            ParamKey::Pos => &self.pos,
            ParamKey::LmHead => &self.lm_head,
            ParamKey::AttnWq(l) => &self.blocks[l].attn.wq,
            ParamKey::AttnWk(l) => &self.blocks[l].attn.wk,
            ParamKey::AttnWv(l) => &self.blocks[l].attn.wv,
            ParamKey::AttnWo(l) => &self.blocks[l].attn.wo,
            ParamKey::RouterCol { layer, slot } => &self.blocks[layer].moe.router_cols[slot],
            ParamKey::ExpertW1 { layer, slot } => &self.blocks[layer].moe.experts[slot].w1,
            ParamKey::ExpertB1 { layer, slot } => &self.blocks[layer].moe.experts[slot].b1,
            ParamKey::ExpertW2 { layer, slot } => &self.blocks[layer].moe.experts[slot].w2,
            ParamKey::ExpertB2 { layer, slot } => &self.blocks[layer].moe.experts[slot].b2,
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Param {
        match key {
            ParamKey::Embed => &mut self.embed,
            ParamKey::Pos => &mut self.pos,
            ParamKey::LmHead => &mut self.lm_head,
            ParamKey::AttnWq(l) => &mut self.blocks[l].attn.wq,
            ParamKey::AttnWk(l) => &mut self.blocks[l].attn.wk,
            ParamKey::AttnWv(l) => &mut self.blocks[l].attn.wv,
            ParamKey::AttnWo(l) => &mut self.blocks[l].attn.wo,
            ParamKey::RouterCol { layer, slot } => &mut self.blocks[layer].moe.router_cols[slot],
            ParamKey::ExpertW1 { layer, slot } => &mut self.blocks[layer].moe.experts[slot].w1,
            ParamKey::ExpertB1 { layer, slot } => &mut self.blocks[layer].moe.experts[slot].b1,
            ParamKey::ExpertW2 { layer, slot } => &mut self.blocks[layer].moe.experts[slot].w2,
            ParamKey::ExpertB2 { layer, slot } => &mut self.blocks[layer].moe.experts[slot].b2,
        }
    }

    fn validate_batch(&self, seqs: &[Vec<usize>]) -> Result<(usize, usize)> {
        if seqs.is_empty() || seqs[0].is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let t = seqs[0].len();
        if t > self.cfg.context {
            return Err(Error::Config(format!(
                "sequence length {} exceeds context {}",
                t, self.cfg.context
            )));
        }
        for s in seqs {
            if s.len() != t {
                return Err(Error::Config("ragged batch".into()));
            }
            if let Some(&tok) = s.iter().find(|&&tok| tok >= self.cfg.vocab) {
                return Err(Error::Config(format!(
                    "token {} out of vocabulary (size {})",
                    tok, self.cfg.vocab
                )));
            }
        }
        Ok((seqs.len(), t))
    }

    fn build(&self, tape: &mut Tape, seqs: &[Vec<usize>], train: bool) -> Result<BuiltGraph> {
        let (b, t) = self.validate_batch(seqs)?;
        let bt = b * t;
        let d = self.cfg.d_model;
        let n_heads = self.cfg.n_heads;
        let head_dim = d / n_heads;

        let mut bindings = Vec::new();
        let mut reg = |tape: &mut Tape, key: ParamKey, p: &Param| -> TensorId {
            if train {
                let id = tape.leaf(p.value.clone());
                bindings.push((key, id));
                id
            } else {
                tape.constant(p.value.clone())
            }
        };

        // Register all parameters up front in a fixed order.
        let embed_id = reg(tape, ParamKey::Embed, &self.embed);
        let pos_id = reg(tape, ParamKey::Pos, &self.pos);
        let mut layer_ids = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let wq = reg(tape, ParamKey::AttnWq(l), &block.attn.wq);
            let wk = reg(tape, ParamKey::AttnWk(l), &block.attn.wk);
            let wv = reg(tape, ParamKey::AttnWv(l), &block.attn.wv);
            let wo = reg(tape, ParamKey::AttnWo(l), &block.attn.wo);
            let mut router_cols = Vec::with_capacity(EXPERTS_PER_LAYER);
            let mut expert_ids = Vec::with_capacity(EXPERTS_PER_LAYER);
            for s in 0..EXPERTS_PER_LAYER {
                router_cols.push(reg(
                    tape,
                    ParamKey::RouterCol { layer: l, slot: s },
                    &block.moe.router_cols[s],
                ));
            }
            for s in 0..EXPERTS_PER_LAYER {
                let e = &block.moe.experts[s];
                expert_ids.push(ExpertIds {
                    w1: reg(tape, ParamKey::ExpertW1 { layer: l, slot: s }, &e.w1),
                    b1: reg(tape, ParamKey::ExpertB1 { layer: l, slot: s }, &e.b1),
                    w2: reg(tape, ParamKey::ExpertW2 { layer: l, slot: s }, &e.w2),
                    b2: reg(tape, ParamKey::ExpertB2 { layer: l, slot: s }, &e.b2),
                });
            }
            layer_ids.push((wq, wk, wv, wo, MoeIds { router_cols, experts: expert_ids }));
        }
        let lm_head_id = reg(tape, ParamKey::LmHead, &self.lm_head);

        // token + positional embeddings
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        let pos_rows: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok_emb = tape.gather_rows(embed_id, flat);
        let pos_emb = tape.gather_rows(pos_id, pos_rows);
        let mut x = tape.add(tok_emb, pos_emb);

        let mut records = Vec::with_capacity(self.blocks.len());
        for (l, (wq, wk, wv, wo, moe_ids)) in layer_ids.iter().enumerate() {
            // attention sublayer
            let xn = tape.rms_norm(x);
            let q = tape.matmul(xn, *wq);
            let k = tape.matmul(xn, *wk);
            let v = tape.matmul(xn, *wv);
            let scale = 1.0 / (head_dim as f64).sqrt();
            let mut seq_outs = Vec::with_capacity(b);
            for s in 0..b {
                let qs = tape.slice_rows(q, s * t, t);
                let ks = tape.slice_rows(k, s * t, t);
                let vs = tape.slice_rows(v, s * t, t);
                let mut head_outs = Vec::with_capacity(n_heads);
                for h in 0..n_heads {
                    let qh = tape.slice_cols(qs, h * head_dim, head_dim);
                    let kh = tape.slice_cols(ks, h * head_dim, head_dim);
                    let vh = tape.slice_cols(vs, h * head_dim, head_dim);
                    let kt = tape.transpose(kh);
                    let scores = tape.matmul(qh, kt);
                    let scaled = tape.scale(scores, scale);
                    let attn = tape.causal_softmax_rows(scaled);
                    head_outs.push(tape.matmul(attn, vh));
                }
                seq_outs.push(tape.concat_cols(&head_outs));
            }
            let attn_cat = tape.concat_rows(&seq_outs);
            let attn_out = tape.matmul(attn_cat, *wo);
            x = tape.add(x, attn_out);

            // MoE sublayer
            let xn = tape.rms_norm(x);
            let (y, layer_records) = moe_layer_forward(tape, xn, moe_ids, l, self.cfg.top_k);
            x = tape.add(x, y);
            records.push(layer_records);
        }

        let xn = tape.rms_norm(x);
        let logits = tape.matmul(xn, lm_head_id);
        debug_assert_eq!(tape.value(logits).shape(), (bt, self.cfg.vocab));
        Ok(BuiltGraph { logits, bindings, records })
    }

    /// Forward pass without loss: logits of shape `(B*T) x V` plus records.
    pub fn forward_logits(&self, seqs: &[Vec<usize>]) -> Result<(Tensor, StepRecords)> {
        let mut tape = Tape::new();
        let built = self.build(&mut tape, seqs, false)?;
        let logits = tape.value(built.logits).clone();
        Ok((logits, StepRecords { layers: built.records, per_token_loss: Vec::new() }))
    }

    /// Loss on a batch without touching any parameter.
    pub fn forward_loss(&self, seqs: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<(f64, StepRecords)> {
        let mut tape = Tape::new();
        let built = self.build(&mut tape, seqs, false)?;
        let flat: Vec<usize> = targets.iter().flatten().copied().collect();
        let loss_id = tape.mean_cross_entropy(built.logits, &flat);
        let loss = tape.value(loss_id).item();
        let records = StepRecords {
            layers: built.records,
            per_token_loss: tape.per_token_losses(loss_id).to_vec(),
        };
        Ok((loss, records))
    }

    /// Loss plus per-parameter gradients, with no update applied.
    pub fn loss_and_grads(
        &self,
        seqs: &[Vec<usize>],
        targets: &[Vec<usize>],
    ) -> Result<(f64, Vec<(ParamKey, Tensor)>, StepRecords)> {
        let mut tape = Tape::new();
        let built = self.build(&mut tape, seqs, true)?;
        let flat: Vec<usize> = targets.iter().flatten().copied().collect();
        let loss_id = tape.mean_cross_entropy(built.logits, &flat);
        let loss = tape.value(loss_id).item();
        tape.backward(loss_id)?;
        let grads = built
            .bindings
            .iter()
            .filter_map(|&(key, id)| tape.grad(id).map(|g| (key, g.clone())))
            .collect();
        let records = StepRecords {
            layers: built.records,
            per_token_loss: tape.per_token_losses(loss_id).to_vec(),
        };
        Ok((loss, grads, records))
    }

    /// One forward/backward/Adam update. Parameter groups with an all-zero
    /// (or absent) gradient are left bit-identical.
    pub fn train_step(
        &mut self,
        seqs: &[Vec<usize>],
        targets: &[Vec<usize>],
        hp: &AdamParams,
        step: u64,
    ) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let built = self.build(&mut tape, seqs, true)?;
        let flat: Vec<usize> = targets.iter().flatten().copied().collect();
        let loss_id = tape.mean_cross_entropy(built.logits, &flat);
        let mean_loss = tape.value(loss_id).item();
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(loss_id)?;
        for &(key, id) in &built.bindings {
            if let Some(g) = tape.grad(id) {
                let g = g.clone();
                let p = self.param_mut(key);
                adam_step(&mut p.value, &g, &mut p.adam, hp)?;
            }
        }
        let records = StepRecords {
            layers: built.records,
            per_token_loss: tape.per_token_losses(loss_id).to_vec(),
        };
        Ok(StepOutput { mean_loss, records })
    }

    /// Mean cross-entropy over a held-out batch; no state is touched.
    pub fn eval_loss(&self, seqs: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<f64> {
        Ok(self.forward_loss(seqs, targets)?.0)
    }
}

fn new_expert(
    id: u64,
    layer: usize,
    width: usize,
    d_model: usize,
    birth_step: u64,
    rng: &mut ChaCha8Rng,
) -> ExpertSlot {
    ExpertSlot {
        id,
        layer,
        width,
        birth_step,
        age_market_steps: 0,
        w1: Param::new(Tensor::randn(d_model, width, INIT_STD, rng)),
        b1: Param::new(Tensor::zeros(1, width)),
        w2: Param::new(Tensor::randn(width, d_model, INIT_STD, rng)),
        b2: Param::new(Tensor::zeros(1, d_model)),
    }
}

#[cfg(test)]
mod tests;
