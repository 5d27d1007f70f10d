use std::fmt::Write as _;
use std::path::Path;

use super::LengthExtensionReport;
use crate::carry::BatchMode;
use crate::error::{Error, Result};
use crate::provenance::Provenance;

fn mode_name(m: BatchMode) -> &'static str {
    match m {
        BatchMode::Contiguous => "contiguous",
        BatchMode::Shuffled => "shuffled",
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// One row per length: `length, ppl, nll, tokens, mode, carry, classification` plus provenance.
pub fn write_report_csv(path: &Path, report: &LengthExtensionReport, prov: &Provenance) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["length", "ppl", "nll", "tokens", "mode", "carry", "classification"];
    header.extend(Provenance::CSV_COLUMNS);
    w.write_record(&header).map_err(csv_err)?;
    let class = report.classification.map(|c| c.name()).unwrap_or("");
    for i in 0..report.lengths.len() {
        let mut row = vec![
            report.lengths[i].to_string(),
            report.perplexity[i].to_string(),
            report.nll[i].to_string(),
            report.tokens[i].to_string(),
            mode_name(report.mode).to_string(),
            report.carry.to_string(),
            class.to_string(),
        ];
        row.extend(prov.csv_fields());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(path: &Path, report: &LengthExtensionReport, prov: &Provenance) -> Result<()> {
    let v = serde_json::json!({ "provenance": prov, "report": report });
    std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Perplexity-vs-length line chart with a log-2 x axis.
pub fn render_svg(series: &[(String, &LengthExtensionReport)], title: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (64.0, 160.0, 36.0, 48.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, r)| r.lengths.iter().zip(&r.perplexity).map(|(&l, &p)| ((l as f64).log2(), p)))
        .filter(|(_, p)| p.is_finite())
        .collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title));
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (mut x0, mut x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if x1 - x0 < 1.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.08).max(1e-3);
    y0 -= pad;
    y1 += pad;
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for e in (x0.ceil() as i64)..=(x1.floor() as i64) {
        let x = sx(e as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            top,
            top + ph,
            top + ph + 16.0,
            1u64 << e.max(0)
        );
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#eee"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"##,
            left + pw,
            left - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">evaluation length</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">perplexity</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (label, r)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = r
            .lengths
            .iter()
            .zip(&r.perplexity)
            .filter(|(_, p)| p.is_finite())
            .map(|(&l, &p)| format!("{:.1},{:.1}", sx((l as f64).log2()), sy(p)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
