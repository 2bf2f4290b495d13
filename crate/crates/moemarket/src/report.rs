//! Rendering of run artifacts: phase tables, recovery metrics, comparison
//! tables, and a hand-emitted SVG line chart of the eval loss.
//!
//! Reports are pure functions of artifact files and never re-run training.

use std::fmt::Write as _;

use crate::experiment::{
    compare_runs, eval_points, phase_event_counts, recovery_analysis, Comparison, RunArtifacts,
};
use crate::market::EventKind;

fn fmt_opt_u64(v: Option<u64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn fmt_opt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}x", x))
}

/// Phase label without commas so it can live in a CSV cell.
fn phase_label(start: u64, end: u64, domain: &str) -> String {
    format!("{}..{} {}", start, end, domain)
}

/// Human-readable report: run header, phase table, recovery metrics.
pub fn render_report_text(artifacts: &RunArtifacts) -> String {
    let cfg = &artifacts.config;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "run {} | mode {} | grace {} | seed {} | steps {}{}",
        cfg.name,
        cfg.fitness_mode.as_str(),
        cfg.grace_steps,
        cfg.seed,
        cfg.total_steps,
        if artifacts.valid { "" } else { " | INVALID (aborted)" },
    );
    let _ = writeln!(out, "\nphase                                replacements  spawns");
    for p in phase_event_counts(artifacts) {
        let _ = writeln!(
            out,
            "{:<38} {:>11} {:>7}",
            phase_label(p.start, p.end, &p.domain),
            p.replacements,
            p.spawns
        );
    }
    let rec = recovery_analysis(artifacts);
    let _ = writeln!(out, "\ntotal replacements: {}", artifacts.replacement_count());
    match rec.threshold {
        Some(th) => {
            let _ = writeln!(out, "recovery threshold (steady x 1.05): {:.4}", th);
            let _ = writeln!(out, "t_initial: {} steps", fmt_opt_u64(rec.t_initial));
            if let Some(rs) = rec.return_shift {
                let _ = writeln!(
                    out,
                    "t_return (shift at {}): {} steps",
                    rs,
                    fmt_opt_u64(rec.t_return)
                );
                let _ = writeln!(out, "speedup: {}", fmt_opt_ratio(rec.speedup));
            }
        }
        None => {
            let _ = writeln!(out, "recovery metrics unavailable (no shift in schedule)");
        }
    }
    out
}

/// Machine-readable phase counts: `phase,replacements,spawns`.
pub fn render_report_csv(artifacts: &RunArtifacts) -> String {
    let mut out = String::from("phase,replacements,spawns\n");
    for p in phase_event_counts(artifacts) {
        let _ = writeln!(
            out,
            "{},{},{}",
            phase_label(p.start, p.end, &p.domain),
            p.replacements,
            p.spawns
        );
    }
    out
}

/// Comparison table over several runs, one row per run, sorted by name.
pub fn render_compare(artifacts: &[&RunArtifacts], csv: bool) -> String {
    let Comparison { rows, schedule_mismatch } = compare_runs(artifacts);
    let mut out = String::new();
    if csv {
        out.push_str("name,mode,grace,replacements,per_phase,t_initial,t_return,speedup\n");
        for r in rows {
            let per_phase: Vec<String> =
                r.phase_replacements.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.name,
                r.mode,
                r.grace_steps,
                r.total_replacements,
                per_phase.join("/"),
                fmt_opt_u64(r.t_initial),
                fmt_opt_u64(r.t_return),
                fmt_opt_ratio(r.speedup),
            );
        }
    } else {
        let _ = writeln!(
            out,
            "{:<14} {:>4} {:>5} {:>12} {:>12} {:>9} {:>8} {:>8}",
            "name", "mode", "grace", "replacements", "per-phase", "t_initial", "t_return", "speedup"
        );
        for r in rows {
            let per_phase: Vec<String> =
                r.phase_replacements.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{:<14} {:>4} {:>5} {:>12} {:>12} {:>9} {:>8} {:>8}",
                r.name,
                r.mode,
                r.grace_steps,
                r.total_replacements,
                per_phase.join("/"),
                fmt_opt_u64(r.t_initial),
                fmt_opt_u64(r.t_return),
                fmt_opt_ratio(r.speedup),
            );
        }
        if schedule_mismatch {
            out.push_str("note: shift schedules differ; recovery columns blanked\n");
        }
    }
    out
}

const SVG_W: f64 = 960.0;
const SVG_H: f64 = 480.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Eval-loss line chart: one polyline per contiguous domain segment, dashed
/// vertical rules at shift steps, dots at replacement events.
pub fn render_svg(artifacts: &RunArtifacts) -> String {
    let points = eval_points(artifacts);
    let cfg = &artifacts.config;
    let x_max = cfg.total_steps.max(1) as f64;
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, v) in &points {
        y_min = y_min.min(*v);
        y_max = y_max.max(*v);
    }
    if points.is_empty() {
        y_min = 0.0;
        y_max = 1.0;
    }
    let pad = 0.05 * (y_max - y_min).max(1e-9);
    y_min -= pad;
    y_max += pad;

    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let sx = |step: f64| MARGIN_L + step / x_max * plot_w;
    let sy = |v: f64| MARGIN_T + (y_max - v) / (y_max - y_min) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        SVG_W, SVG_H, SVG_W, SVG_H
    );
    let _ = writeln!(out, r#"<rect width="{}" height="{}" fill="white"/>"#, SVG_W, SVG_H);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" font-family="monospace" font-size="14">{} eval loss (seed {})</text>"#,
        MARGIN_L, xml_escape(&cfg.name), cfg.seed
    );

    // axes
    let _ = writeln!(
        out,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        MARGIN_L,
        MARGIN_T,
        MARGIN_L,
        SVG_H - MARGIN_B
    );
    let _ = writeln!(
        out,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        MARGIN_L,
        SVG_H - MARGIN_B,
        SVG_W - MARGIN_R,
        SVG_H - MARGIN_B
    );
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(
            out,
            r#"<text x="8" y="{:.1}" font-family="monospace" font-size="11">{:.2}</text>"#,
            y + 4.0,
            v
        );
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            MARGIN_L,
            y,
            SVG_W - MARGIN_R,
            y
        );
    }
    for i in 0..=4 {
        let step = x_max * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="11">{}</text>"#,
            sx(step) - 12.0,
            SVG_H - MARGIN_B + 18.0,
            step as u64
        );
    }

    // one polyline per contiguous domain segment
    let mut segments: Vec<(String, Vec<(u64, f64)>)> = Vec::new();
    for p in &artifacts.loss {
        match segments.last_mut() {
            Some((dom, seg)) if *dom == p.domain => seg.push((p.step, p.eval_loss)),
            _ => segments.push((p.domain.clone(), vec![(p.step, p.eval_loss)])),
        }
    }
    let mut domain_order: Vec<String> = Vec::new();
    for (dom, _) in &segments {
        if !domain_order.contains(dom) {
            domain_order.push(dom.clone());
        }
    }
    for (dom, seg) in &segments {
        let color_idx = domain_order.iter().position(|d| d == dom).unwrap_or(0);
        let pts: Vec<String> =
            seg.iter().map(|(s, v)| format!("{:.1},{:.1}", sx(*s as f64), sy(*v))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[color_idx % PALETTE.len()],
            pts.join(" ")
        );
    }

    // dashed rules at shift steps
    for shift in &cfg.shift_schedule {
        let x = sx(shift.step as f64);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{}" x2="{:.1}" y2="{}" stroke="#888888" stroke-dasharray="5 4"/>"##,
            x,
            MARGIN_T,
            x,
            SVG_H - MARGIN_B
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="11">{}@{}</text>"#,
            x + 3.0,
            MARGIN_T + 12.0,
            xml_escape(&shift.domain),
            shift.step
        );
    }

    // replacement events as dots at the nearest eval point
    for ev in &artifacts.events {
        if ev.kind != EventKind::ExpertReplaced {
            continue;
        }
        let y = points
            .iter()
            .min_by_key(|(s, _)| s.abs_diff(ev.step))
            .map(|(_, v)| *v)
            .unwrap_or(y_min);
        let _ = writeln!(
            out,
            r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#ff7f0e"/>"##,
            sx(ev.step as f64),
            sy(y)
        );
    }

    // legend
    let mut lx = MARGIN_L + 10.0;
    for (i, dom) in domain_order.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#,
            lx,
            SVG_H - 22.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="11">{}</text>"#,
            lx + 14.0,
            SVG_H - 13.0,
            xml_escape(dom)
        );
        lx += 130.0;
    }

    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{LossPoint, RunConfig};
    use crate::market::MarketEvent;

    fn fake_artifacts() -> RunArtifacts {
        let config = RunConfig::preset("B2c", 1).unwrap();
        let mut loss = Vec::new();
        for i in 1..=80 {
            let step = i * 50;
            let domain = if step >= 3000 {
                "data_char"
            } else if step >= 1500 {
                "data_code"
            } else {
                "data_char"
            };
            loss.push(LossPoint {
                step,
                train_loss: 3.0 - 0.02 * i as f64,
                eval_loss: 3.0 - 0.02 * i as f64,
                domain: domain.into(),
            });
        }
        let events = vec![MarketEvent {
            step: 510,
            layer: Some(0),
            kind: EventKind::ExpertReplaced,
            expert_id: Some(0),
            replacement_id: Some(16),
            fitness: Some(vec![0.0; 8]),
        }];
        RunArtifacts { config, events, loss, census: vec![], valid: true, abort: None }
    }

    #[test]
    fn csv_report_has_the_documented_schema() {
        let text = render_report_csv(&fake_artifacts());
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("phase,replacements,spawns"));
        // three phases for a round-trip schedule
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn text_report_mentions_phases_and_totals() {
        let text = render_report_text(&fake_artifacts());
        assert!(text.contains("total replacements: 1"));
        assert!(text.contains("data_code"));
    }

    #[test]
    fn svg_has_one_polyline_per_domain_segment() {
        let svg = render_svg(&fake_artifacts());
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // char -> code -> char: three segments
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert_eq!(svg.matches("stroke-dasharray").count(), 2);
        assert!(svg.contains("<circle"));
        // balanced open/close tags for a well-formed document
        assert_eq!(svg.matches("<svg").count(), svg.matches("</svg>").count());
    }

    #[test]
    fn compare_with_itself_gives_identical_rows() {
        let a = fake_artifacts();
        let text = render_compare(&[&a, &a], true);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], lines[2]);
    }
}
