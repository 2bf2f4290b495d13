//! Expert slots, the per-layer expert pool, and top-k routing.

use crate::numerics::{softmax, Tape, TensorId};
use crate::Result;

use super::Param;

/// Feed-forward parameters per expert: `2*d*w` weights plus `w + d` biases.
pub fn expert_param_count(d_model: usize, width: usize) -> u64 {
    (2 * d_model * width + width + d_model) as u64
}

/// One expert: identity, age, and its 2-layer MLP parameters.
pub struct ExpertSlot {
    pub id: u64,
    pub layer: usize,
    pub width: usize,
    pub birth_step: u64,
    /// Market evaluations survived; drives the grace ramp.
    pub age_market_steps: u64,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl ExpertSlot {
    pub fn param_count(&self) -> u64 {
        let d_model = self.w1.value.rows();
        expert_param_count(d_model, self.width)
    }

    /// FNV-1a over the little-endian bytes of all four parameter tensors.
    pub fn params_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for v in t.value.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// One token's routing outcome.
#[derive(Clone, Debug)]
pub struct TokenRouting {
    /// Selected slot indices, best first; ties broken by lowest slot index.
    pub picks: Vec<usize>,
    /// Renormalized gate weights aligned with `picks`; sum to 1.
    pub gates: Vec<f64>,
    /// Full softmax distribution over all slots.
    pub probs: Vec<f64>,
    /// Top-1 probability minus top-2 probability.
    pub margin: f64,
}

/// All routing decisions of one MoE layer for one batch, token-major.
#[derive(Clone, Debug)]
pub struct LayerRecords {
    pub layer: usize,
    pub tokens: Vec<TokenRouting>,
}

/// The k largest entries (ties to the lowest index) and the top-1 margin.
pub fn select_top_k(probs: &[f64], k: usize) -> (Vec<usize>, f64) {
    debug_assert!(probs.len() >= 2 && k >= 1 && k <= probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let margin = probs[order[0]] - probs[order[1]];
    order.truncate(k);
    (order, margin)
}

/// Routing decision for a single gating logit row.
pub fn route_logits(logits: &[f64], k: usize) -> Result<TokenRouting> {
    let probs = softmax(logits)?;
    let (picks, margin) = select_top_k(&probs, k);
    let gates = softmax(&picks.iter().map(|&i| logits[i]).collect::<Vec<_>>())?;
    Ok(TokenRouting { picks, gates, probs, margin })
}

/// One layer's pool of expert slots plus its per-slot router columns.
pub struct MoeLayer {
    pub experts: Vec<ExpertSlot>,
    pub router_cols: Vec<Param>,
}

impl MoeLayer {
    /// Route a single token representation (probabilities, top-k, margin).
    pub fn route(&self, token_repr: &[f64], k: usize) -> Result<TokenRouting> {
        let logits: Vec<f64> = self
            .router_cols
            .iter()
            .map(|col| token_repr.iter().zip(col.value.data()).map(|(x, w)| x * w).sum())
            .collect();
        route_logits(&logits, k)
    }
}

/// Tape node ids of one MoE layer's parameters.
pub(crate) struct MoeIds {
    pub router_cols: Vec<TensorId>,
    pub experts: Vec<ExpertIds>,
}

pub(crate) struct ExpertIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Top-k MoE layer: route, dispatch to selected experts, gate-weighted combine.
///
/// Experts that receive no tokens contribute no tape nodes at all, so their
/// parameters (and, through the top-k gate construction, their router
/// columns) receive exactly zero gradient.
pub(crate) fn moe_layer_forward(
    tape: &mut Tape,
    xn: TensorId,
    ids: &MoeIds,
    layer_idx: usize,
    k: usize,
) -> (TensorId, LayerRecords) {
    let n_slots = ids.router_cols.len();
    let gating = tape.concat_cols(&ids.router_cols);
    let logits = tape.matmul(xn, gating);
    let bt = tape.value(logits).rows();

    let mut tokens: Vec<TokenRouting> = Vec::with_capacity(bt);
    let mut picks: Vec<Vec<usize>> = Vec::with_capacity(bt);
    for t in 0..bt {
        let probs = softmax(tape.value(logits).row(t)).expect("slots >= 1");
        let (pick, margin) = select_top_k(&probs, k);
        picks.push(pick.clone());
        tokens.push(TokenRouting { picks: pick, gates: Vec::new(), probs, margin });
    }

    let gates = tape.topk_softmax(logits, picks);
    for (t, tok) in tokens.iter_mut().enumerate() {
        tok.gates = tape.value(gates).row(t).to_vec();
    }

    let mut combined: Option<TensorId> = None;
    for (slot, expert) in ids.experts.iter().enumerate().take(n_slots) {
        let mut rows = Vec::new();
        let mut coords = Vec::new();
        for (t, tok) in tokens.iter().enumerate() {
            if let Some(j) = tok.picks.iter().position(|&p| p == slot) {
                rows.push(t);
                coords.push((t, j));
            }
        }
        if rows.is_empty() {
            continue;
        }
        let xg = tape.gather_rows(xn, rows.clone());
        let h = tape.matmul(xg, expert.w1);
        let h = tape.add_row(h, expert.b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, expert.w2);
        let o = tape.add_row(o, expert.b2);
        let gcol = tape.gather_entries(gates, coords);
        let y = tape.scatter_add_scaled(o, gcol, rows, bt);
        combined = Some(match combined {
            Some(acc) => tape.add(acc, y),
            None => y,
        });
    }

    let y = combined.expect("every token selects at least one expert");
    (y, LayerRecords { layer: layer_idx, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_hand_values() {
        assert_eq!(expert_param_count(1, 1), 4);
        assert_eq!(expert_param_count(128, 256), 65_920);
        assert!(expert_param_count(16, 32) < expert_param_count(16, 64));
    }

    #[test]
    fn route_uniform_logits() {
        let r = route_logits(&[0.5; 8], 2).unwrap();
        for &p in &r.probs {
            assert!((p - 0.125).abs() < 1e-12);
        }
        assert_eq!(r.picks, vec![0, 1]);
        assert_eq!(r.margin, 0.0);
        assert!((r.gates[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn route_dominant_logit() {
        let mut logits = [0.0; 8];
        logits[5] = 1000.0;
        let r = route_logits(&logits, 2).unwrap();
        assert_eq!(r.picks[0], 5);
        assert!((r.probs[5] - 1.0).abs() < 1e-12);
        assert!((r.margin - 1.0).abs() < 1e-9);
    }

    #[test]
    fn route_hand_computed_margin() {
        // softmax of [2,0,...,0]: top prob e^2/(e^2+7)
        let logits = [2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let r = route_logits(&logits, 2).unwrap();
        assert!((r.probs[0] - 0.5135).abs() < 1e-4);
        assert!((r.margin - 0.4440).abs() < 1e-4);
    }

    #[test]
    fn gates_sum_to_one() {
        let r = route_logits(&[0.3, -1.0, 2.0, 0.0, 0.7, -0.2, 1.1, 0.9], 2).unwrap();
        assert!((r.gates.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.margin >= 0.0 && r.margin <= 1.0);
    }
}
