use crate::market::EventKind;

use super::runner::RunArtifacts;

/// Trailing moving average over `(step, value)` points. Early points average
/// over however many points exist, so window 1 is the identity.
pub fn smooth_loss(trace: &[(u64, f64)], window: usize) -> Vec<(u64, f64)> {
    assert!(window >= 1, "smoothing window must be >= 1");
    let mut out = Vec::with_capacity(trace.len());
    for i in 0..trace.len() {
        let lo = (i + 1).saturating_sub(window);
        let span = &trace[lo..=i];
        let mean = span.iter().map(|p| p.1).sum::<f64>() / span.len() as f64;
        out.push((trace[i].0, mean));
    }
    out
}

/// Steps from `shift_step` until the smoothed trace first drops to
/// `threshold` at or after the shift; `None` if it never does.
pub fn recovery_steps(smoothed: &[(u64, f64)], shift_step: u64, threshold: f64) -> Option<u64> {
    smoothed
        .iter()
        .find(|(step, value)| *step >= shift_step && *value <= threshold)
        .map(|(step, _)| step - shift_step)
}

/// Initial-learning time over re-adaptation time.
pub fn speedup_ratio(t_initial: u64, t_return: u64) -> f64 {
    assert!(t_initial > 0 && t_return > 0, "recovery times must be positive");
    t_initial as f64 / t_return as f64
}

/// One schedule-induced phase of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseCount {
    pub domain: String,
    /// Inclusive start step (the shift applies AT this step).
    pub start: u64,
    /// Exclusive end step.
    pub end: u64,
    pub replacements: usize,
    pub spawns: usize,
}

/// Bucket replacement/spawn events into the phases the schedule induces.
pub fn phase_event_counts(artifacts: &RunArtifacts) -> Vec<PhaseCount> {
    let cfg = &artifacts.config;
    let mut bounds = vec![(0u64, cfg.initial_domain.clone())];
    for s in &cfg.shift_schedule {
        bounds.push((s.step, s.domain.clone()));
    }
    let mut phases: Vec<PhaseCount> = Vec::with_capacity(bounds.len());
    for (i, (start, domain)) in bounds.iter().enumerate() {
        let end = bounds.get(i + 1).map_or(cfg.total_steps + 1, |b| b.0);
        phases.push(PhaseCount {
            domain: domain.clone(),
            start: *start,
            end,
            replacements: 0,
            spawns: 0,
        });
    }
    for ev in &artifacts.events {
        let slot = phases.iter_mut().rev().find(|p| ev.step >= p.start);
        if let Some(p) = slot {
            match ev.kind {
                EventKind::ExpertReplaced => p.replacements += 1,
                EventKind::ExpertSpawned => p.spawns += 1,
                _ => {}
            }
        }
    }
    phases
}

/// Recovery metrics of one run under the relative threshold rule.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryReport {
    /// Smoothed steady state of the initial phase (mean of its last 10
    /// smoothed eval points) times 1.05.
    pub threshold: Option<f64>,
    /// Steps from step 0 to the first smoothed point at or below threshold.
    pub t_initial: Option<u64>,
    /// Steps from the return shift to re-recovery (round-trip runs only).
    pub t_return: Option<u64>,
    pub speedup: Option<f64>,
    /// Step of the return shift, when the schedule returns to the initial domain.
    pub return_shift: Option<u64>,
}

/// Number of trailing eval points that define a phase's steady state.
const STEADY_POINTS: usize = 10;
/// Relative margin over steady state that counts as recovered.
const THRESHOLD_FACTOR: f64 = 1.05;

pub fn eval_points(artifacts: &RunArtifacts) -> Vec<(u64, f64)> {
    artifacts.loss.iter().map(|p| (p.step, p.eval_loss)).collect()
}

/// Steady-state level of the phase that ends right before `end_step`:
/// mean of the last [`STEADY_POINTS`] smoothed eval points below it.
fn steady_before(smoothed: &[(u64, f64)], end_step: u64) -> Option<f64> {
    let phase: Vec<f64> =
        smoothed.iter().filter(|(s, _)| *s < end_step).map(|(_, v)| *v).collect();
    if phase.is_empty() {
        return None;
    }
    let tail = &phase[phase.len().saturating_sub(STEADY_POINTS)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Recovery analysis of one run: relative threshold, initial learning time,
/// and (for round-trip schedules) the return recovery time and speedup.
pub fn recovery_analysis(artifacts: &RunArtifacts) -> RecoveryReport {
    let cfg = &artifacts.config;
    let smoothed = smooth_loss(&eval_points(artifacts), cfg.smoothing_window);
    let first_shift = cfg.shift_schedule.first().map(|s| s.step);
    let threshold = first_shift.and_then(|fs| steady_before(&smoothed, fs)).map(|s| s * THRESHOLD_FACTOR);
    let t_initial = threshold.and_then(|th| recovery_steps(&smoothed, 0, th));
    let return_shift = cfg
        .shift_schedule
        .last()
        .filter(|s| s.domain == cfg.initial_domain)
        .map(|s| s.step);
    let t_return = match (threshold, return_shift) {
        (Some(th), Some(rs)) => recovery_steps(&smoothed, rs, th),
        _ => None,
    };
    let speedup = match (t_initial, t_return) {
        (Some(a), Some(b)) if a > 0 && b > 0 => Some(speedup_ratio(a, b)),
        _ => None,
    };
    RecoveryReport { threshold, t_initial, t_return, speedup, return_shift }
}

/// Shape of the smoothed eval-loss curve around one domain shift.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftShape {
    pub shift_step: u64,
    /// Last smoothed value strictly before the shift.
    pub pre_shift: f64,
    /// Maximum smoothed value inside the phase that starts at the shift.
    pub spike: f64,
    /// Whether the spike reached 1.05x the pre-shift value.
    pub spiked: bool,
    /// Steady-state * 1.05 of the phase that starts at the shift.
    pub recovery_threshold: f64,
    /// Whether the smoothed loss came back under the phase threshold.
    pub recovered: bool,
}

/// Spike-then-recover analysis for every shift in the schedule.
pub fn shift_shapes(artifacts: &RunArtifacts) -> Vec<ShiftShape> {
    let cfg = &artifacts.config;
    let smoothed = smooth_loss(&eval_points(artifacts), cfg.smoothing_window);
    let mut shapes = Vec::new();
    for (i, shift) in cfg.shift_schedule.iter().enumerate() {
        let phase_end = cfg
            .shift_schedule
            .get(i + 1)
            .map_or(cfg.total_steps + 1, |s| s.step);
        let pre = smoothed.iter().rev().find(|(s, _)| *s < shift.step).map(|(_, v)| *v);
        let phase: Vec<(u64, f64)> = smoothed
            .iter()
            .filter(|(s, _)| *s >= shift.step && *s < phase_end)
            .copied()
            .collect();
        let (Some(pre), false) = (pre, phase.is_empty()) else { continue };
        let spike = phase.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let steady = steady_before(&smoothed, phase_end).unwrap_or(f64::INFINITY);
        let threshold = steady * THRESHOLD_FACTOR;
        let recovered = phase.iter().any(|(_, v)| *v <= threshold);
        shapes.push(ShiftShape {
            shift_step: shift.step,
            pre_shift: pre,
            spike,
            spiked: spike >= pre * THRESHOLD_FACTOR,
            recovery_threshold: threshold,
            recovered,
        });
    }
    shapes
}

/// One run's row in a side-by-side comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub mode: String,
    pub grace_steps: u64,
    pub total_replacements: usize,
    pub phase_replacements: Vec<usize>,
    pub t_initial: Option<u64>,
    pub t_return: Option<u64>,
    pub speedup: Option<f64>,
}

pub struct Comparison {
    pub rows: Vec<RunSummary>,
    /// Set when the compared runs have differing shift schedules; recovery
    /// columns are blanked in that case.
    pub schedule_mismatch: bool,
}

/// Side-by-side totals, per-phase counts and recovery metrics, sorted by run
/// name for stable diffs.
pub fn compare_runs(artifacts: &[&RunArtifacts]) -> Comparison {
    let schedule_mismatch = artifacts
        .windows(2)
        .any(|w| w[0].config.shift_schedule != w[1].config.shift_schedule);
    let mut rows: Vec<RunSummary> = artifacts
        .iter()
        .map(|a| {
            let phases = phase_event_counts(a);
            let rec = recovery_analysis(a);
            RunSummary {
                name: a.config.name.clone(),
                mode: a.config.fitness_mode.as_str().to_string(),
                grace_steps: a.config.grace_steps,
                total_replacements: a.replacement_count(),
                phase_replacements: phases.iter().map(|p| p.replacements).collect(),
                t_initial: if schedule_mismatch { None } else { rec.t_initial },
                t_return: if schedule_mismatch { None } else { rec.t_return },
                speedup: if schedule_mismatch { None } else { rec.speedup },
            }
        })
        .collect();
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    Comparison { rows, schedule_mismatch }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_window_one_is_identity() {
        let t = vec![(0u64, 1.0), (50, 2.0), (100, 3.0)];
        assert_eq!(smooth_loss(&t, 1), t);
    }

    #[test]
    fn smooth_constant_is_unchanged() {
        let t: Vec<(u64, f64)> = (0..10).map(|i| (i * 50, 2.5)).collect();
        for (_, v) in smooth_loss(&t, 4) {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_attenuates_a_spike_by_the_window() {
        let mut t: Vec<(u64, f64)> = (0..12).map(|i| (i * 50, 1.0)).collect();
        t[6].1 = 1.0 + 3.0; // spike of height 3
        let s = smooth_loss(&t, 3);
        assert!((s[6].1 - (1.0 + 3.0 / 3.0)).abs() < 1e-12);
        assert!((s[9].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovery_zero_when_already_below() {
        let t = vec![(3000u64, 1.0), (3050, 0.9)];
        assert_eq!(recovery_steps(&t, 3000, 1.15), Some(0));
    }

    #[test]
    fn recovery_none_when_never_reached() {
        let t = vec![(3000u64, 2.0), (3050, 1.9)];
        assert_eq!(recovery_steps(&t, 3000, 1.15), None);
    }

    #[test]
    fn recovery_is_monotone_in_threshold() {
        let t: Vec<(u64, f64)> =
            (0..20).map(|i| (3000 + i * 50, 2.0 - 0.08 * i as f64)).collect();
        let loose = recovery_steps(&t, 3000, 1.5).unwrap();
        let tight = recovery_steps(&t, 3000, 1.0).unwrap();
        assert!(loose <= tight);
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup_ratio(1350, 150), 9.0);
        assert_eq!(speedup_ratio(1150, 100), 11.5);
        assert_eq!(speedup_ratio(700, 700), 1.0);
    }
}
