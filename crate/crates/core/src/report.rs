// SPDX-License-Identifier: MIT OR Apache-2.0

//! Static run reports: alignment plot, conflict histogram, metrics table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{conflict_histogram, ConflictHistogram, MetricsReport};
use crate::unlearn::AlignmentTrace;

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn fmt(x: f64) -> String {
    format!("{x:.2}")
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        out,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD / 2.0
    );
}

/// A_f and A_r against step. Missing values break the line.
pub fn alignment_svg(trace: &AlignmentTrace, title: &str) -> String {
    let mut out = String::new();
    svg_open(&mut out, title);
    let series: [(&str, &str, Vec<Option<f64>>); 2] = [
        ("A_f", "#c0392b", trace.rows.iter().map(|r| r.a_f).collect()),
        ("A_r", "#2471a3", trace.rows.iter().map(|r| r.a_r).collect()),
    ];
    let values = series.iter().flat_map(|s| s.2.iter().flatten().copied());
    let (mut lo, mut hi) = values.fold((0.0f64, 1.0f64), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    lo -= 0.05 * (hi - lo);
    hi += 0.05 * (hi - lo);
    let n = trace.len().max(2) as f64 - 1.0;
    let x = |i: usize| PAD + (W - 1.5 * PAD) * i as f64 / n;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    for tick in [lo, 0.0, hi].into_iter().filter(|t| (lo..=hi).contains(t)) {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, fmt(y(tick) + 4.0), fmt(tick));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, W / 2.0, H - 12.0);
    for (k, (name, color, vals)) in series.iter().enumerate() {
        let mut d = String::new();
        let mut pen_down = false;
        for (i, v) in vals.iter().enumerate() {
            match v {
                Some(v) => {
                    let _ = write!(d, "{}{} {} ", if pen_down { "L" } else { "M" }, fmt(x(i)), fmt(y(*v)));
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        let _ = writeln!(out, r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, d.trim_end());
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(out, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, W - PAD * 1.5, fmt(ly));
    }
    out.push_str("</svg>\n");
    out
}

/// Bars for the three cos ψ buckets of each labelled trace.
pub fn histogram_svg(histograms: &[(String, ConflictHistogram)], title: &str) -> String {
    let mut out = String::new();
    svg_open(&mut out, title);
    let buckets = ["[-1, -0.02)", "[-0.02, 0.02]", "(0.02, 1]"];
    let colors = ["#c0392b", "#7f8c8d", "#27ae60"];
    let max = histograms.iter().map(|(_, h)| h.conflicting.max(h.neutral).max(h.aligned)).max().unwrap_or(0).max(1) as f64;
    let groups = histograms.len().max(1) as f64;
    let group_w = (W - 1.5 * PAD) / groups;
    let bar_w = group_w / 4.0;
    for (g, (label, h)) in histograms.iter().enumerate() {
        let x0 = PAD + g as f64 * group_w + bar_w / 2.0;
        for (b, count) in [h.conflicting, h.neutral, h.aligned].into_iter().enumerate() {
            let bh = (H - 2.0 * PAD) * count as f64 / max;
            let x = x0 + b as f64 * bar_w;
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"><title>{label} {}: {count}</title></rect>"#,
                fmt(x),
                fmt(H - PAD - bh),
                fmt(bar_w * 0.9),
                fmt(bh),
                colors[b],
                buckets[b]
            );
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{count}</text>"#, fmt(x + bar_w * 0.45), fmt(H - PAD - bh - 4.0));
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#, fmt(x0 + 1.5 * bar_w), H - PAD + 16.0);
    }
    for (b, name) in buckets.iter().enumerate() {
        let _ = writeln!(out, r#"<text x="{}" y="{}" fill="{}">{name}</text>"#, W - PAD * 2.5, fmt(PAD + 16.0 * b as f64), colors[b]);
    }
    out.push_str("</svg>\n");
    out
}

pub fn summary_markdown(metrics: &[MetricsReport], histograms: &[(String, ConflictHistogram)]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    let mut out = String::from("# Run summary\n\n");
    if !metrics.is_empty() {
        out.push_str("| model | AUC | ACC | LogLoss | JSD (forget) | unlearn s | conflict rate |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for m in metrics {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {:.5} | {:.2} | {:.3} |",
                m.label,
                opt(m.auc),
                m.acc,
                m.logloss,
                m.jsd_forget,
                m.unlearn_wall_seconds,
                m.conflict_rate
            );
        }
        out.push('\n');
    }
    if !histograms.is_empty() {
        out.push_str("| trace | cos < -0.02 | neutral | cos > 0.02 | undefined |\n|---|---|---|---|---|\n");
        for (label, h) in histograms {
            let _ = writeln!(out, "| {label} | {} | {} | {} | {} |", h.conflicting, h.neutral, h.aligned, h.undefined);
        }
        out.push('\n');
    }
    out.push_str("Plots: `alignment-*.svg`, `conflicts.svg`.\n");
    out
}

/// Trace files (`trace-<label>.csv`) in `dir`, sorted by name.
fn list(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(format!("run directory {} does not exist", dir.display())));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(label) = name.strip_prefix(prefix).and_then(|n| n.strip_suffix(suffix)) {
            out.push((label.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Writes the SVGs and `summary.md` into `dir`; returns the files written.
pub fn write_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let traces = list(dir, "trace-", ".csv")?;
    if traces.is_empty() {
        return Err(Error::MissingInput(format!("no trace-*.csv in {}", dir.display())));
    }
    let mut written = Vec::new();
    let mut histograms = Vec::new();
    for (label, path) in &traces {
        let trace = AlignmentTrace::load(path)?;
        if trace.is_empty() {
            return Err(Error::MissingInput(format!("trace {} has no steps", path.display())));
        }
        let svg_path = dir.join(format!("alignment-{label}.svg"));
        std::fs::write(&svg_path, alignment_svg(&trace, &format!("alignment ({label})")))?;
        written.push(svg_path);
        histograms.push((label.clone(), conflict_histogram(&trace)));
    }
    let hist_path = dir.join("conflicts.svg");
    std::fs::write(&hist_path, histogram_svg(&histograms, "shared-group cos psi"))?;
    written.push(hist_path);
    let mut metrics = Vec::new();
    for (_, path) in list(dir, "metrics-", ".json")? {
        metrics.push(serde_json::from_str::<MetricsReport>(&std::fs::read_to_string(&path)?)?);
    }
    let md = dir.join("summary.md");
    std::fs::write(&md, summary_markdown(&metrics, &histograms))?;
    written.push(md);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unlearn::TraceRow;

    fn trace(n: usize) -> AlignmentTrace {
        AlignmentTrace {
            rows: (0..n)
                .map(|i| TraceRow {
                    step: i,
                    l_f: 0.0,
                    l_r: 0.0,
                    l: 0.0,
                    a_f: Some(0.1 * i as f64),
                    a_r: (i != 2).then_some(0.5),
                    cos_psi: Some(if i % 2 == 0 { -0.5 } else { 0.5 }),
                    conflict: i % 2 == 0,
                    wall_ms: 1.0,
                    cos_psi_raw: None,
                })
                .collect(),
        }
    }

    #[test]
    fn svgs_are_deterministic() {
        let t = trace(5);
        assert_eq!(alignment_svg(&t, "x"), alignment_svg(&t, "x"));
        let h = vec![("cure".to_string(), conflict_histogram(&t))];
        assert_eq!(histogram_svg(&h, "y"), histogram_svg(&h, "y"));
        assert!(alignment_svg(&t, "x").starts_with("<svg"));
    }

    #[test]
    fn report_needs_a_trace() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_report(dir.path()), Err(Error::MissingInput(_))));
        AlignmentTrace::default().save(&dir.path().join("trace-cure.csv")).unwrap();
        assert!(matches!(write_report(dir.path()), Err(Error::MissingInput(_))));
        trace(4).save(&dir.path().join("trace-cure.csv")).unwrap();
        let files = write_report(dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let h = conflict_histogram(&trace(4));
        assert_eq!(h.defined() + h.undefined, 4);
    }
}
