use serde::{Deserialize, Serialize};

use crate::data::SynthKind;
use crate::market::{FitnessMode, MarketConfig};
use crate::model::ModelConfig;
use crate::numerics::AdamParams;
use crate::{Error, Result};

/// The seven bundled run variants.
pub const PRESET_NAMES: [&str; 7] = ["A2", "B2", "C2", "B2b", "C2b", "B2c", "C2c"];

/// Fixed generator seeds so every run variant trains on the same corpora.
const CHAR_CORPUS_SEED: u64 = 11;
const CODE_CORPUS_SEED: u64 = 12;
const DEFAULT_CORPUS_LEN: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSource {
    Synthetic { kind: SynthKind, seed: u64, length: usize },
    File { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub source: DomainSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftPoint {
    pub step: u64,
    pub domain: String,
}

/// Full run configuration. Serializes losslessly; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub fitness_mode: FitnessMode,
    /// Market evaluations of newborn protection (0 disables grace).
    pub grace_steps: u64,
    pub market_interval: u64,
    pub warmup_steps: u64,
    pub replacement_sigma: f64,
    pub newborn_width_choices: Vec<usize>,
    pub total_steps: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub context: usize,
    pub batch_size: usize,
    pub top_k: usize,
    pub base_width: usize,
    pub adam: AdamParams,
    pub domains: Vec<DomainSpec>,
    pub initial_domain: String,
    pub shift_schedule: Vec<ShiftPoint>,
    pub eval_interval: u64,
    pub eval_batches: usize,
    pub smoothing_window: usize,
}

impl RunConfig {
    /// Shared defaults for all presets; mode/grace/shifts vary per variant.
    pub fn base(name: &str, seed: u64) -> RunConfig {
        let d_model = 128;
        RunConfig {
            name: name.to_string(),
            seed,
            fitness_mode: FitnessMode::A,
            grace_steps: 0,
            market_interval: 10,
            warmup_steps: 500,
            replacement_sigma: 1.0,
            newborn_width_choices: vec![d_model, 2 * d_model, 3 * d_model],
            total_steps: 4000,
            d_model,
            n_heads: 4,
            context: 128,
            batch_size: 16,
            top_k: 2,
            base_width: 2 * d_model,
            adam: AdamParams::default(),
            domains: vec![
                DomainSpec {
                    name: "data_char".into(),
                    source: DomainSource::Synthetic {
                        kind: SynthKind::ProseLike,
                        seed: CHAR_CORPUS_SEED,
                        length: DEFAULT_CORPUS_LEN,
                    },
                },
                DomainSpec {
                    name: "data_code".into(),
                    source: DomainSource::Synthetic {
                        kind: SynthKind::CodeLike,
                        seed: CODE_CORPUS_SEED,
                        length: DEFAULT_CORPUS_LEN,
                    },
                },
            ],
            initial_domain: "data_char".into(),
            shift_schedule: vec![ShiftPoint { step: 1500, domain: "data_code".into() }],
            eval_interval: 50,
            eval_batches: 4,
            smoothing_window: 3,
        }
    }

    /// One of the seven bundled variants.
    pub fn preset(name: &str, seed: u64) -> Result<RunConfig> {
        let mut cfg = RunConfig::base(name, seed);
        let round_trip = vec![
            ShiftPoint { step: 1500, domain: "data_code".into() },
            ShiftPoint { step: 3000, domain: "data_char".into() },
        ];
        match name {
            "A2" => cfg.fitness_mode = FitnessMode::A,
            "B2" => cfg.fitness_mode = FitnessMode::B,
            "C2" => cfg.fitness_mode = FitnessMode::C,
            "B2b" => {
                cfg.fitness_mode = FitnessMode::B;
                cfg.grace_steps = 50;
            }
            "C2b" => {
                cfg.fitness_mode = FitnessMode::C;
                cfg.grace_steps = 50;
            }
            "B2c" => {
                cfg.fitness_mode = FitnessMode::B;
                cfg.grace_steps = 50;
                cfg.shift_schedule = round_trip;
            }
            "C2c" => {
                cfg.fitness_mode = FitnessMode::C;
                cfg.grace_steps = 50;
                cfg.shift_schedule = round_trip;
            }
            other => {
                return Err(Error::Usage(format!(
                    "unknown preset '{}', valid presets: {}",
                    other,
                    PRESET_NAMES.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.market_interval == 0 {
            return Err(Error::Config("market_interval must be >= 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_interval == 0 || self.eval_batches == 0 {
            return Err(Error::Config("eval settings must be >= 1".into()));
        }
        if self.smoothing_window == 0 {
            return Err(Error::Config("smoothing_window must be >= 1".into()));
        }
        if self.newborn_width_choices.is_empty()
            || self.newborn_width_choices.iter().any(|&w| w == 0)
        {
            return Err(Error::Config("newborn_width_choices must be positive".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain required".into()));
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("domain names must be unique".into()));
        }
        let resolves = |n: &str| self.domains.iter().any(|d| d.name == n);
        if !resolves(&self.initial_domain) {
            return Err(Error::Config(format!(
                "initial domain '{}' is not a loaded domain",
                self.initial_domain
            )));
        }
        for s in &self.shift_schedule {
            if !resolves(&s.domain) {
                return Err(Error::Config(format!(
                    "shift target '{}' is not a loaded domain",
                    s.domain
                )));
            }
        }
        for w in self.shift_schedule.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::Config("shift steps must be strictly increasing".into()));
            }
        }
        // model-level checks (d_model/heads/top_k) with a placeholder vocab
        ModelConfig {
            vocab: 2,
            d_model: self.d_model,
            n_heads: self.n_heads,
            context: self.context,
            top_k: self.top_k,
            base_width: self.base_width,
        }
        .validate()?;
        Ok(())
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            d_model: self.d_model,
            n_heads: self.n_heads,
            context: self.context,
            top_k: self.top_k,
            base_width: self.base_width,
        }
    }

    pub fn market_config(&self) -> MarketConfig {
        MarketConfig {
            fitness_mode: self.fitness_mode,
            grace_steps: self.grace_steps,
            market_interval: self.market_interval,
            warmup_steps: self.warmup_steps,
            replacement_sigma: self.replacement_sigma,
            newborn_width_choices: self.newborn_width_choices.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_the_variant_table() {
        let a2 = RunConfig::preset("A2", 0).unwrap();
        assert_eq!(a2.fitness_mode, FitnessMode::A);
        assert_eq!(a2.grace_steps, 0);
        assert_eq!(a2.shift_schedule.len(), 1);
        assert_eq!(a2.shift_schedule[0].step, 1500);
        assert_eq!(a2.shift_schedule[0].domain, "data_code");

        let c2b = RunConfig::preset("C2b", 0).unwrap();
        assert_eq!(c2b.fitness_mode, FitnessMode::C);
        assert_eq!(c2b.grace_steps, 50);
        assert_eq!(c2b.shift_schedule.len(), 1);

        let c2c = RunConfig::preset("C2c", 0).unwrap();
        assert_eq!(c2c.fitness_mode, FitnessMode::C);
        assert_eq!(c2c.grace_steps, 50);
        assert_eq!(
            c2c.shift_schedule,
            vec![
                ShiftPoint { step: 1500, domain: "data_code".into() },
                ShiftPoint { step: 3000, domain: "data_char".into() },
            ]
        );

        let b2 = RunConfig::preset("B2", 0).unwrap();
        assert_eq!(b2.fitness_mode, FitnessMode::B);
        assert_eq!(b2.grace_steps, 0);

        for name in PRESET_NAMES {
            let cfg = RunConfig::preset(name, 3).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.warmup_steps, 500);
            assert_eq!(cfg.market_interval, 10);
            assert_eq!(cfg.total_steps, 4000);
        }
    }

    #[test]
    fn unknown_preset_is_usage_error() {
        let err = RunConfig::preset("NOPE", 0);
        match err {
            Err(Error::Usage(msg)) => assert!(msg.contains("A2") && msg.contains("C2c")),
            other => panic!("expected usage error, got {:?}", other.map(|c| c.name)),
        }
    }

    #[test]
    fn config_round_trips_losslessly() {
        let cfg = RunConfig::preset("B2c", 9).unwrap();
        let json = cfg.to_json();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut json: serde_json::Value =
            serde_json::from_str(&RunConfig::preset("A2", 0).unwrap().to_json()).unwrap();
        json.as_object_mut().unwrap().insert("bogus_key".into(), 1.into());
        let err = RunConfig::from_json(&json.to_string());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn validate_rejects_unresolvable_shift() {
        let mut cfg = RunConfig::preset("A2", 0).unwrap();
        cfg.shift_schedule = vec![ShiftPoint { step: 100, domain: "nope".into() }];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
