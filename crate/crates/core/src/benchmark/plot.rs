//! Minimal SVG charts for benchmark reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::report::BenchmarkReport;
use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, (LEFT + W - RIGHT) / 2.0, escape(title));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (LEFT + W - RIGHT) / 2.0, H - 14.0, escape(x_label));
    let _ = writeln!(out, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, (TOP + H - BOTTOM) / 2.0, (TOP + H - BOTTOM) / 2.0, escape(y_label));
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = H - BOTTOM - v * (H - TOP - BOTTOM);
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, W - RIGHT);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(out, r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - LEFT - RIGHT, H - TOP - BOTTOM);
}

fn legend(out: &mut String, i: usize, label: &str) {
    let y = TOP + 10.0 + 18.0 * i as f64;
    let x = W - RIGHT + 12.0;
    let _ = writeln!(out, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"#, y - 10.0, COLORS[i % COLORS.len()]);
    let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, x + 18.0, escape(label));
}

/// Line chart with values in `[0, 1]` on the y axis and one tick per
/// distinct x.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = String::new();
    frame(&mut out, title, x_label, y_label);
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let (x0, x1) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| LEFT + (x - x0) / span * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - y.clamp(0.0, 1.0) * (H - TOP - BOTTOM);
    for &x in &xs {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#, px(x), H - BOTTOM + 18.0);
    }
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, pts.join(" "));
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, px(x), py(y));
        }
        legend(&mut out, i, &s.label);
    }
    out + "</svg>\n"
}

/// Grouped bar chart: one group per entry of `groups`, one bar per value,
/// bars named by `bar_labels`.
pub fn bar_chart_svg(title: &str, y_label: &str, groups: &[(String, Vec<f64>)], bar_labels: &[&str]) -> String {
    let mut out = String::new();
    frame(&mut out, title, "", y_label);
    let n = groups.len().max(1) as f64;
    let gw = (W - LEFT - RIGHT) / n;
    let nb = bar_labels.len().max(1) as f64;
    let bw = gw * 0.8 / nb;
    let py = |y: f64| H - BOTTOM - y.clamp(0.0, 1.0) * (H - TOP - BOTTOM);
    for (g, (name, vals)) in groups.iter().enumerate() {
        let gx = LEFT + g as f64 * gw + gw * 0.1;
        for (b, &v) in vals.iter().enumerate() {
            let x = gx + b as f64 * bw;
            let _ = writeln!(out, r#"<rect x="{x:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{}"/>"#, py(v), H - BOTTOM - py(v), COLORS[b % COLORS.len()]);
        }
        let _ = writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, gx + gw * 0.4, H - BOTTOM + 18.0, escape(name));
    }
    for (b, l) in bar_labels.iter().enumerate() {
        legend(&mut out, b, l);
    }
    out + "</svg>\n"
}

/// RR, MS and SRR curves over the report thresholds, one series per
/// report, plus a bar chart of MS at 3 px (or the nearest threshold) and
/// SRR per report, e.g. across a λ sweep.
pub fn write_plots(reports: &[(String, BenchmarkReport)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() || reports.iter().any(|(_, r)| r.rows.is_empty()) {
        return Err(Error::Config("cannot plot an empty report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let curves = |f: &dyn Fn(&BenchmarkReport) -> Vec<f64>| -> Vec<Series> {
        reports
            .iter()
            .map(|(name, r)| Series {
                label: name.clone(),
                points: r.thresholds.iter().copied().zip(f(r)).collect(),
            })
            .collect()
    };
    let charts = [
        ("rr.svg", line_chart_svg("Repeatable rate", "threshold (px)", "RR", &curves(&|r| r.mean_rr()))),
        ("ms.svg", line_chart_svg("Matching score", "threshold (px)", "MS", &curves(&|r| r.mean_ms()))),
        ("srr.svg", line_chart_svg("Successful registration rate", "RE threshold", "SRR", &curves(&|r| r.srr_curve()))),
    ];
    let groups: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|(name, r)| {
            let i = (0..r.thresholds.len()).min_by(|&a, &b| (r.thresholds[a] - 3.0).abs().total_cmp(&(r.thresholds[b] - 3.0).abs())).unwrap_or(0);
            (name.clone(), vec![r.mean_ms()[i], r.srr()])
        })
        .collect();
    let mut out = Vec::new();
    for (name, svg) in charts.into_iter().chain([("sweep.svg", bar_chart_svg("MS@3px and SRR per report", "value", &groups, &["MS@3px", "SRR"]))]) {
        let p = out_dir.join(name);
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}
