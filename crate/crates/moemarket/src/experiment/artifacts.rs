//! Artifact files of a run directory.
//!
//! - `events.jsonl` — one JSON object per market event
//! - `loss.csv` — header `step,train_loss,eval_loss,domain`
//! - `census.jsonl` — one JSON object per (evaluation, layer)
//! - `resolved-config.json` — the exact config the run executed
//! - `abort.json` — present only when a run was flagged invalid
//!
//! No timestamps anywhere: identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::market::{CensusRow, MarketEvent};
use crate::{Error, Result};

use super::config::RunConfig;
use super::runner::{LossPoint, RunArtifacts};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const LOSS_FILE: &str = "loss.csv";
pub const CENSUS_FILE: &str = "census.jsonl";
pub const CONFIG_FILE: &str = "resolved-config.json";
pub const ABORT_FILE: &str = "abort.json";

pub fn events_to_jsonl(events: &[MarketEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(ev).expect("event serializes"));
        out.push('\n');
    }
    out
}

pub fn events_from_jsonl(text: &str) -> Result<Vec<MarketEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Artifact(format!("bad event line: {}", e)))
        })
        .collect()
}

pub fn loss_to_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("step,train_loss,eval_loss,domain\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.step, p.train_loss, p.eval_loss, p.domain);
    }
    out
}

pub fn loss_from_csv(text: &str) -> Result<Vec<LossPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("step,train_loss,eval_loss,domain") => {}
        other => {
            return Err(Error::Artifact(format!("bad loss.csv header: {:?}", other)));
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::Artifact(format!("bad loss.csv row: {}", l)));
            }
            Ok(LossPoint {
                step: cols[0]
                    .parse()
                    .map_err(|e| Error::Artifact(format!("bad step '{}': {}", cols[0], e)))?,
                train_loss: cols[1]
                    .parse()
                    .map_err(|e| Error::Artifact(format!("bad train_loss: {}", e)))?,
                eval_loss: cols[2]
                    .parse()
                    .map_err(|e| Error::Artifact(format!("bad eval_loss: {}", e)))?,
                domain: cols[3].to_string(),
            })
        })
        .collect()
}

pub fn census_to_jsonl(rows: &[CensusRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("census serializes"));
        out.push('\n');
    }
    out
}

pub fn census_from_jsonl(text: &str) -> Result<Vec<CensusRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Artifact(format!("bad census line: {}", e)))
        })
        .collect()
}

/// Write the four artifact files (plus `abort.json` for invalid runs).
pub fn write_run_dir(dir: &Path, artifacts: &RunArtifacts) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(EVENTS_FILE), events_to_jsonl(&artifacts.events))?;
    fs::write(dir.join(LOSS_FILE), loss_to_csv(&artifacts.loss))?;
    fs::write(dir.join(CENSUS_FILE), census_to_jsonl(&artifacts.census))?;
    fs::write(dir.join(CONFIG_FILE), artifacts.config.to_json())?;
    if let Some(reason) = &artifacts.abort {
        let diag = serde_json::json!({ "valid": false, "reason": reason });
        fs::write(dir.join(ABORT_FILE), serde_json::to_string_pretty(&diag)?)?;
    }
    Ok(())
}

/// Load a run directory back into memory, rejecting missing/corrupt files.
pub fn load_run_dir(dir: &Path) -> Result<RunArtifacts> {
    let read = |name: &str| -> Result<String> {
        fs::read_to_string(dir.join(name)).map_err(|e| {
            Error::Artifact(format!("missing artifact {} in {}: {}", name, dir.display(), e))
        })
    };
    let config = RunConfig::from_json(&read(CONFIG_FILE)?)
        .map_err(|e| Error::Artifact(format!("bad {}: {}", CONFIG_FILE, e)))?;
    let events = events_from_jsonl(&read(EVENTS_FILE)?)?;
    let loss = loss_from_csv(&read(LOSS_FILE)?)?;
    let census = census_from_jsonl(&read(CENSUS_FILE)?)?;
    let abort_path = dir.join(ABORT_FILE);
    let abort = if abort_path.exists() {
        let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(abort_path)?)?;
        Some(diag["reason"].as_str().unwrap_or("unknown").to_string())
    } else {
        None
    };
    let valid = abort.is_none();
    Ok(RunArtifacts { config, events, loss, census, valid, abort })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{CensusEntry, EventKind};

    #[test]
    fn event_lines_have_the_exact_field_set() {
        let ev = MarketEvent {
            step: 510,
            layer: Some(1),
            kind: EventKind::ExpertReplaced,
            expert_id: Some(3),
            replacement_id: Some(16),
            fitness: Some(vec![0.0; 8]),
        };
        let line = serde_json::to_string(&ev).unwrap();
        // wire order is the struct declaration order
        let positions: Vec<usize> =
            ["\"step\"", "\"layer\"", "\"kind\"", "\"expert_id\"", "\"replacement_id\"", "\"fitness\""]
                .iter()
                .map(|k| line.find(k).expect("field present"))
                .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "field order wrong: {}", line);
        assert!(line.contains("\"kind\":\"expert_replaced\""));

        let shift = MarketEvent {
            step: 1500,
            layer: None,
            kind: EventKind::DomainShift,
            expert_id: None,
            replacement_id: None,
            fitness: None,
        };
        let v: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&shift).unwrap()).unwrap();
        assert!(v["fitness"].is_null());
        assert!(v["layer"].is_null());
        assert_eq!(v["kind"], "domain_shift");
    }

    #[test]
    fn events_round_trip() {
        let events = vec![
            MarketEvent {
                step: 510,
                layer: Some(0),
                kind: EventKind::EvaluationKept,
                expert_id: Some(2),
                replacement_id: None,
                fitness: Some(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]),
            },
            MarketEvent {
                step: 1500,
                layer: None,
                kind: EventKind::DomainShift,
                expert_id: None,
                replacement_id: None,
                fitness: None,
            },
        ];
        let text = events_to_jsonl(&events);
        assert_eq!(events_from_jsonl(&text).unwrap(), events);
    }

    #[test]
    fn loss_round_trip() {
        let pts = vec![
            LossPoint { step: 50, train_loss: 2.25, eval_loss: 2.5, domain: "data_char".into() },
            LossPoint { step: 100, train_loss: 1.75, eval_loss: 2.0, domain: "data_code".into() },
        ];
        let text = loss_to_csv(&pts);
        assert!(text.starts_with("step,train_loss,eval_loss,domain\n"));
        assert_eq!(loss_from_csv(&text).unwrap(), pts);
    }

    #[test]
    fn census_round_trip() {
        let rows = vec![CensusRow {
            step: 10,
            layer: 0,
            experts: vec![CensusEntry {
                id: 0,
                width: 64,
                age: 1,
                tokens: 17,
                params_hash: "00ff00ff00ff00ff".into(),
            }],
        }];
        let text = census_to_jsonl(&rows);
        assert_eq!(census_from_jsonl(&text).unwrap(), rows);
    }

    #[test]
    fn corrupt_loss_header_is_artifact_error() {
        assert!(matches!(loss_from_csv("nope\n1,2,3,x"), Err(Error::Artifact(_))));
    }
}
