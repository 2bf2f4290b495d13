use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_synthetic_domain, sample_batch, Domain, ShiftSchedule, Vocab};
use crate::market::{
    accumulate_step, market_evaluation, CensusRow, EventKind, IntervalStats, MarketEvent,
};
use crate::model::{Model, N_LAYERS};
use crate::{Error, Result};

use super::config::{DomainSource, RunConfig};

/// One row of `loss.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub domain: String,
}

/// Everything a run produces. `valid` is false when the run aborted early;
/// partial artifacts are kept for diagnosis, never deleted.
pub struct RunArtifacts {
    pub config: RunConfig,
    pub events: Vec<MarketEvent>,
    pub loss: Vec<LossPoint>,
    pub census: Vec<CensusRow>,
    pub valid: bool,
    pub abort: Option<String>,
}

impl RunArtifacts {
    pub fn replacement_count(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::ExpertReplaced).count()
    }
}

/// RNG stream ids derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_SPAWN: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct LoadedDomain {
    name: String,
    train_ids: Vec<usize>,
    eval_ids: Vec<usize>,
}

fn load_domains(cfg: &RunConfig) -> Result<(Vec<Domain>, Vocab)> {
    let mut domains = Vec::with_capacity(cfg.domains.len());
    for spec in &cfg.domains {
        let corpus = match &spec.source {
            DomainSource::Synthetic { kind, seed, length } => {
                generate_synthetic_domain(*kind, *seed, *length).corpus
            }
            DomainSource::File { path } => std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read corpus file '{}': {}", path, e))
            })?,
        };
        if corpus.chars().count() < 10 * cfg.context {
            return Err(Error::Config(format!(
                "domain '{}' shorter than 10x context ({} chars)",
                spec.name,
                corpus.chars().count()
            )));
        }
        domains.push(Domain { name: spec.name.clone(), corpus });
    }
    let vocab = Vocab::build(&domains)?;
    Ok((domains, vocab))
}

/// First 90% of each corpus trains; the final 10% is held out for eval.
fn split_domain(domain: &Domain, vocab: &Vocab, context: usize) -> Result<LoadedDomain> {
    let ids = vocab.encode(&domain.corpus)?;
    let cut = (ids.len() * 9) / 10;
    let (train, eval) = ids.split_at(cut);
    if train.len() < context + 1 || eval.len() < context + 1 {
        return Err(Error::Config(format!(
            "domain '{}' too short to split into train/eval at context {}",
            domain.name, context
        )));
    }
    Ok(LoadedDomain { name: domain.name.clone(), train_ids: train.to_vec(), eval_ids: eval.to_vec() })
}

/// Execute a full training run with market evaluations and domain shifts.
///
/// Deterministic in `(config, seed)`: an aborted run (non-finite loss)
/// returns partial artifacts flagged invalid rather than an error.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (domains, vocab) = load_domains(cfg)?;
    let loaded: Vec<LoadedDomain> = domains
        .iter()
        .map(|d| split_domain(d, &vocab, cfg.context))
        .collect::<Result<_>>()?;
    let schedule = ShiftSchedule::new(
        cfg.initial_domain.clone(),
        cfg.shift_schedule.iter().map(|s| (s.step, s.domain.clone())).collect(),
    )?;

    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut train_rng = stream(cfg.seed, STREAM_TRAIN);
    let mut eval_rng = stream(cfg.seed, STREAM_EVAL);
    let mut spawn_rng = stream(cfg.seed, STREAM_SPAWN);

    let mut model = Model::new(cfg.model_config(vocab.size()), &mut init_rng)?;
    let market_cfg = cfg.market_config();
    let mut stats: Vec<IntervalStats> = (0..N_LAYERS).map(|_| IntervalStats::new()).collect();

    let mut events: Vec<MarketEvent> = Vec::new();
    let mut loss_trace: Vec<LossPoint> = Vec::new();
    let mut census: Vec<CensusRow> = Vec::new();
    let mut train_window: Vec<f64> = Vec::new();
    let mut active = cfg.initial_domain.clone();

    let domain_by_name = |name: &str| -> &LoadedDomain {
        loaded.iter().find(|d| d.name == name).expect("validated domain name")
    };

    for step in 1..=cfg.total_steps {
        if schedule.active_domain(step) != active {
            active = schedule.active_domain(step).to_string();
            events.push(MarketEvent {
                step,
                layer: None,
                kind: EventKind::DomainShift,
                expert_id: None,
                replacement_id: None,
                fitness: None,
            });
        }

        let dom = domain_by_name(&active);
        let (xs, ys) = sample_batch(&dom.train_ids, &mut train_rng, cfg.context, cfg.batch_size)?;
        let out = match model.train_step(&xs, &ys, &cfg.adam, step) {
            Ok(out) => out,
            Err(Error::NonFiniteLoss { step }) => {
                return Ok(RunArtifacts {
                    config: cfg.clone(),
                    events,
                    loss: loss_trace,
                    census,
                    valid: false,
                    abort: Some(format!("non-finite training loss at step {}", step)),
                });
            }
            Err(e) => return Err(e),
        };
        accumulate_step(&mut stats, &out.records);
        train_window.push(out.mean_loss);

        if step % cfg.eval_interval == 0 {
            let mut total = 0.0;
            for _ in 0..cfg.eval_batches {
                let (exs, eys) =
                    sample_batch(&dom.eval_ids, &mut eval_rng, cfg.context, cfg.batch_size)?;
                total += model.eval_loss(&exs, &eys)?;
            }
            let eval_loss = total / cfg.eval_batches as f64;
            if !eval_loss.is_finite() {
                return Ok(RunArtifacts {
                    config: cfg.clone(),
                    events,
                    loss: loss_trace,
                    census,
                    valid: false,
                    abort: Some(format!("non-finite eval loss at step {}", step)),
                });
            }
            let train_loss = train_window.iter().sum::<f64>() / train_window.len() as f64;
            train_window.clear();
            loss_trace.push(LossPoint { step, train_loss, eval_loss, domain: active.clone() });
        }

        if step % cfg.market_interval == 0 {
            let outcome = market_evaluation(step, &mut model, &mut stats, &market_cfg, &mut spawn_rng);
            events.extend(outcome.events);
            census.extend(outcome.census);
        }
    }

    Ok(RunArtifacts { config: cfg.clone(), events, loss: loss_trace, census, valid: true, abort: None })
}
