//! The market layer: per-interval expert statistics, cost-penalized fitness,
//! the grace ramp, and the replacement rule.
//!
//! Every `market_interval` training steps each layer's pool is evaluated:
//! quality, demand, exclusivity and a FLOPs cost proxy are folded into a
//! fitness score (modes A/B/C), newborns are discounted by the linear grace
//! ramp, and the worst slot is replaced when it falls below `mean - sigma *
//! std`. A slot still inside its grace window is never the one replaced; its
//! discounted score still enters the pool statistics, which is what lets a
//! single newborn calm the whole layer's churn.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{LayerRecords, Model, StepRecords, EXPERTS_PER_LAYER, N_LAYERS};

/// Cap applied to quality when an expert's routed tokens have ~zero loss.
pub const QUALITY_CAP: f64 = 1e6;

/// Probability margin above which a top-1 routing counts as exclusive.
pub const EXCLUSIVITY_MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitnessMode {
    A,
    B,
    C,
}

impl FitnessMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitnessMode::A => "A",
            FitnessMode::B => "B",
            FitnessMode::C => "C",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub fitness_mode: FitnessMode,
    /// Market evaluations of newborn protection; 0 disables the ramp.
    pub grace_steps: u64,
    /// Training steps between evaluations.
    pub market_interval: u64,
    /// Training steps before any market action.
    pub warmup_steps: u64,
    /// Threshold multiplier in `mean - sigma * std`.
    pub replacement_sigma: f64,
    pub newborn_width_choices: Vec<usize>,
}

/// Per-slot accumulators for one market interval.
#[derive(Clone, Debug, Default)]
pub struct ExpertStats {
    pub expert_id: u64,
    /// Full per-token loss added once per selection of this slot.
    pub sum_token_loss: f64,
    /// 1/k per selection; the spec's `tokens_processed_i`.
    pub weighted_tokens: f64,
    /// Raw selection count; denominator of the mean per-token loss.
    pub raw_tokens: u64,
    /// Tokens where this slot was top-1 with margin strictly above 0.1.
    pub exclusive_count: u64,
}

/// One layer's interval accumulators.
#[derive(Clone, Debug)]
pub struct IntervalStats {
    pub slots: Vec<ExpertStats>,
    /// Total tokens routed through the layer this interval.
    pub total_tokens: u64,
}

impl IntervalStats {
    pub fn new() -> Self {
        IntervalStats { slots: vec![ExpertStats::default(); EXPERTS_PER_LAYER], total_tokens: 0 }
    }

    pub fn reset(&mut self, expert_ids: &[u64]) {
        for (s, &id) in self.slots.iter_mut().zip(expert_ids) {
            *s = ExpertStats { expert_id: id, ..ExpertStats::default() };
        }
        self.total_tokens = 0;
    }

    /// Fold one batch of routing records into the accumulators.
    pub fn accumulate(&mut self, records: &LayerRecords, per_token_loss: &[f64]) {
        for (t, tok) in records.tokens.iter().enumerate() {
            let loss = per_token_loss[t];
            let k = tok.picks.len() as f64;
            for &slot in &tok.picks {
                let s = &mut self.slots[slot];
                s.sum_token_loss += loss;
                s.weighted_tokens += 1.0 / k;
                s.raw_tokens += 1;
            }
            if tok.margin > EXCLUSIVITY_MARGIN {
                self.slots[tok.picks[0]].exclusive_count += 1;
            }
            self.total_tokens += 1;
        }
    }

    pub fn demand(&self, slot: usize) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.slots[slot].weighted_tokens / self.total_tokens as f64
        }
    }

    pub fn exclusivity(&self, slot: usize) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.slots[slot].exclusive_count as f64 / self.total_tokens as f64
        }
    }
}

impl Default for IntervalStats {
    fn default() -> Self {
        Self::new()
    }
}

/// Inverse mean per-token loss, capped at [`QUALITY_CAP`]; 0 without tokens.
pub fn quality(sum_token_loss: f64, tokens: u64) -> f64 {
    if tokens == 0 {
        0.0
    } else {
        (tokens as f64 / sum_token_loss).min(QUALITY_CAP)
    }
}

/// Compute cost proxy: `2 * params * tokens_processed`.
pub fn flops_cost(params: u64, tokens_processed: f64) -> f64 {
    2.0 * params as f64 * tokens_processed
}

/// Fitness under the selected mode. `flops_norm` is the pool-mean FLOPs of
/// the interval (1 when every slot is idle), making the penalty dimensionless.
pub fn fitness(mode: FitnessMode, q: f64, d: f64, e: f64, flops: f64, flops_norm: f64) -> f64 {
    match mode {
        FitnessMode::A => q * d,
        FitnessMode::B => q * d / (1.0 + flops / flops_norm),
        FitnessMode::C => q * d * e / (1.0 + flops / flops_norm),
    }
}

/// Linear grace ramp: `min(1, age / grace_steps)`; 1 when disabled.
pub fn grace_factor(age_market_steps: u64, grace_steps: u64) -> f64 {
    if grace_steps == 0 {
        1.0
    } else {
        (age_market_steps as f64 / grace_steps as f64).min(1.0)
    }
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// The replacement rule: the worst slot is returned iff it lies strictly
/// below `mean - sigma * std` (population std). Zero variance means no signal
/// and therefore no replacement. Ties resolve to the lowest slot index.
pub fn replacement_check(effective_fitness: &[f64], sigma: f64) -> Option<usize> {
    let n = effective_fitness.len() as f64;
    let mean = effective_fitness.iter().sum::<f64>() / n;
    let var = effective_fitness.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return None;
    }
    let worst = argmin(effective_fitness);
    (effective_fitness[worst] < mean - sigma * std).then_some(worst)
}

/// Outcome of one layer evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    /// No replacement; `worst` is the lowest-fitness slot at decision time.
    Keep { worst: usize },
    Replace { slot: usize },
}

/// Replacement decision with infant protection: if the threshold-crossing
/// slot is still inside its grace window it is kept (the ramp shields it),
/// and nothing else is replaced this evaluation.
pub fn decide(effective_fitness: &[f64], ages: &[u64], grace_steps: u64, sigma: f64) -> Decision {
    match replacement_check(effective_fitness, sigma) {
        Some(slot) if ages[slot] >= grace_steps => Decision::Replace { slot },
        Some(slot) => Decision::Keep { worst: slot },
        None => Decision::Keep { worst: argmin(effective_fitness) },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    EvaluationKept,
    ExpertReplaced,
    ExpertSpawned,
    DomainShift,
}

/// One line of the event log. Field order is the wire order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketEvent {
    pub step: u64,
    pub layer: Option<usize>,
    pub kind: EventKind,
    pub expert_id: Option<u64>,
    pub replacement_id: Option<u64>,
    /// Effective fitness of all 8 slots at decision time; null for shifts.
    pub fitness: Option<Vec<f64>>,
}

/// Census entry for one expert slot at one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusEntry {
    pub id: u64,
    pub width: usize,
    /// Market evaluations survived, after this evaluation.
    pub age: u64,
    /// Raw tokens routed to the slot's occupant in the just-ended interval
    /// (0 for a slot replaced at this evaluation).
    pub tokens: u64,
    /// Hash of the occupant's parameter bytes after this evaluation.
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusRow {
    pub step: u64,
    pub layer: usize,
    pub experts: Vec<CensusEntry>,
}

pub struct EvaluationOutcome {
    pub events: Vec<MarketEvent>,
    pub census: Vec<CensusRow>,
}

/// Derived per-slot fitness inputs for one layer and interval.
pub struct FitnessBreakdown {
    pub quality: Vec<f64>,
    pub demand: Vec<f64>,
    pub exclusivity: Vec<f64>,
    pub flops: Vec<f64>,
    pub flops_norm: f64,
    pub raw_fitness: Vec<f64>,
    pub effective_fitness: Vec<f64>,
}

/// Fitness inputs and scores for one layer, from its interval stats.
pub fn layer_fitness(
    model: &Model,
    layer: usize,
    stats: &IntervalStats,
    cfg: &MarketConfig,
) -> FitnessBreakdown {
    let mut q = Vec::with_capacity(EXPERTS_PER_LAYER);
    let mut d = Vec::with_capacity(EXPERTS_PER_LAYER);
    let mut e = Vec::with_capacity(EXPERTS_PER_LAYER);
    let mut f = Vec::with_capacity(EXPERTS_PER_LAYER);
    for slot in 0..EXPERTS_PER_LAYER {
        let s = &stats.slots[slot];
        q.push(quality(s.sum_token_loss, s.raw_tokens));
        d.push(stats.demand(slot));
        e.push(stats.exclusivity(slot));
        f.push(flops_cost(model.expert(layer, slot).param_count(), s.weighted_tokens));
    }
    let active: Vec<f64> = f.iter().copied().filter(|&x| x > 0.0).collect();
    let flops_norm =
        if active.is_empty() { 1.0 } else { active.iter().sum::<f64>() / active.len() as f64 };
    let raw: Vec<f64> = (0..EXPERTS_PER_LAYER)
        .map(|s| fitness(cfg.fitness_mode, q[s], d[s], e[s], f[s], flops_norm))
        .collect();
    let eff: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(s, &v)| v * grace_factor(model.expert(layer, s).age_market_steps, cfg.grace_steps))
        .collect();
    FitnessBreakdown {
        quality: q,
        demand: d,
        exclusivity: e,
        flops: f,
        flops_norm,
        raw_fitness: raw,
        effective_fitness: eff,
    }
}

/// One market evaluation across all layers.
///
/// During warmup (`step <= warmup_steps`) no events fire; ages still advance
/// and interval stats still reset, so the initial population exits warmup at
/// exactly `warmup_steps / market_interval` market steps of age. After
/// warmup, at most one replacement happens per layer per evaluation.
pub fn market_evaluation(
    step: u64,
    model: &mut Model,
    stats: &mut [IntervalStats],
    cfg: &MarketConfig,
    spawn_rng: &mut ChaCha8Rng,
) -> EvaluationOutcome {
    debug_assert!(step > 0 && step % cfg.market_interval == 0);
    let mut events = Vec::new();
    let mut census = Vec::new();

    for layer in 0..N_LAYERS {
        let mut spawned_slot = None;
        let mut interval_tokens: Vec<u64> =
            stats[layer].slots.iter().map(|s| s.raw_tokens).collect();

        if step > cfg.warmup_steps {
            let breakdown = layer_fitness(model, layer, &stats[layer], cfg);
            let ages: Vec<u64> =
                (0..EXPERTS_PER_LAYER).map(|s| model.expert(layer, s).age_market_steps).collect();
            let snapshot = breakdown.effective_fitness.clone();
            match decide(&snapshot, &ages, cfg.grace_steps, cfg.replacement_sigma) {
                Decision::Keep { worst } => {
                    events.push(MarketEvent {
                        step,
                        layer: Some(layer),
                        kind: EventKind::EvaluationKept,
                        expert_id: Some(model.expert(layer, worst).id),
                        replacement_id: None,
                        fitness: Some(snapshot),
                    });
                }
                Decision::Replace { slot } => {
                    let old_id = model.expert(layer, slot).id;
                    let new_id = model.replace_expert(
                        layer,
                        slot,
                        &cfg.newborn_width_choices,
                        step,
                        spawn_rng,
                    );
                    spawned_slot = Some(slot);
                    interval_tokens[slot] = 0;
                    events.push(MarketEvent {
                        step,
                        layer: Some(layer),
                        kind: EventKind::ExpertReplaced,
                        expert_id: Some(old_id),
                        replacement_id: Some(new_id),
                        fitness: Some(snapshot.clone()),
                    });
                    events.push(MarketEvent {
                        step,
                        layer: Some(layer),
                        kind: EventKind::ExpertSpawned,
                        expert_id: Some(new_id),
                        replacement_id: None,
                        fitness: Some(snapshot),
                    });
                }
            }
        }

        model.increment_ages(layer, spawned_slot);

        let entries = (0..EXPERTS_PER_LAYER)
            .map(|slot| {
                let e = model.expert(layer, slot);
                CensusEntry {
                    id: e.id,
                    width: e.width,
                    age: e.age_market_steps,
                    tokens: interval_tokens[slot],
                    params_hash: format!("{:016x}", e.params_hash()),
                }
            })
            .collect();
        census.push(CensusRow { step, layer, experts: entries });

        let ids: Vec<u64> = (0..EXPERTS_PER_LAYER).map(|s| model.expert(layer, s).id).collect();
        stats[layer].reset(&ids);
    }

    EvaluationOutcome { events, census }
}

/// Fold a full step's records into the per-layer interval stats.
pub fn accumulate_step(stats: &mut [IntervalStats], records: &StepRecords) {
    for layer_rec in &records.layers {
        stats[layer_rec.layer].accumulate(layer_rec, &records.per_token_loss);
    }
}
