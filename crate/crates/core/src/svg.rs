//! Static line charts of metrics CSVs as standalone SVG documents.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::ValueEnum;

use crate::cli_report::{parse_metrics_csv, write_atomic, ReportRow};
use crate::error::{EditError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Es,
    Ps,
    Ns,
    S,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Es => "ES (%)",
            Metric::Ps => "PS (%)",
            Metric::Ns => "NS (%)",
            Metric::S => "S",
        }
    }

    /// Value on the 0–100 scale.
    fn value(self, row: &ReportRow) -> f64 {
        match self {
            Metric::Es => 100.0 * row.es,
            Metric::Ps => 100.0 * row.ps,
            Metric::Ns => 100.0 * row.ns,
            Metric::S => row.s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    /// One line per batch size against edits so far.
    BatchSize,
    /// One line per algorithm against log10 λ.
    Lambda,
    /// One line per algorithm against the edited layer.
    Layer,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug)]
struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn group_rows(rows: &[ReportRow], metric: Metric, group_by: GroupBy) -> Result<(String, Vec<Series>)> {
    let mut groups: BTreeMap<(u64, String), Vec<(f64, f64)>> = BTreeMap::new();
    let x_label;
    match group_by {
        GroupBy::BatchSize => {
            x_label = "edits so far";
            for r in rows {
                groups
                    .entry((r.batch_size as u64, format!("batch {}", r.batch_size)))
                    .or_default()
                    .push((r.edits_so_far as f64, metric.value(r)));
            }
        }
        GroupBy::Layer => {
            x_label = "layer";
            for r in rows {
                groups
                    .entry((0, r.algorithm.to_string()))
                    .or_default()
                    .push((r.layer as f64, metric.value(r)));
            }
        }
        GroupBy::Lambda => {
            x_label = "log10 lambda (0 plotted one decade left)";
            let mut lambdas = Vec::with_capacity(rows.len());
            for r in rows {
                let lambda = r.lambda().ok_or_else(|| {
                    EditError::SchemaMismatch(format!(
                        "run_id {:?} carries no lambda; group-by lambda needs lambda-sweep output",
                        r.run_id
                    ))
                })?;
                lambdas.push(lambda);
            }
            let min_log = lambdas
                .iter()
                .filter(|&&l| l > 0.0)
                .map(|l| l.log10())
                .fold(f64::INFINITY, f64::min);
            let zero_at = if min_log.is_finite() { min_log - 1.0 } else { 0.0 };
            for (r, lambda) in rows.iter().zip(lambdas) {
                let x = if lambda > 0.0 { lambda.log10() } else { zero_at };
                groups
                    .entry((0, r.algorithm.to_string()))
                    .or_default()
                    .push((x, metric.value(r)));
            }
        }
    }
    let series = groups
        .into_iter()
        .map(|((_, label), mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect();
    Ok((x_label.to_string(), series))
}

fn render(series: &[Series], metric: Metric, x_label: &str) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x_min, mut x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
    }
    if x_max - x_min < 1e-12 {
        x_min -= 0.5;
        x_max += 0.5;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| TOP + (1.0 - y.clamp(0.0, 100.0) / 100.0) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{LEFT} {TOP} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = sy(tick);
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{tick}</text>"##,
            LEFT,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for x in [x_min, x_max] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(x),
            TOP + plot_h + 16.0,
            format_tick(x)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x_label}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        metric.label()
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
    }

    let lx = WIDTH - RIGHT + 16.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<g class="legend-entry"><rect x="{lx:.2}" y="{:.2}" width="12" height="4" fill="{color}"/><text x="{:.2}" y="{ly:.2}">{}</text></g>"#,
            ly - 5.0,
            lx + 18.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn format_tick(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders rows already in memory.
pub fn render_plot_svg(rows: &[ReportRow], metric: Metric, group_by: GroupBy) -> Result<String> {
    let (x_label, series) = group_rows(rows, metric, group_by)?;
    Ok(render(&series, metric, &x_label))
}

/// Reads a metrics CSV and writes a chart of `metric` grouped by `group_by`.
pub fn emit_plot_svg(csv_path: &Path, metric: Metric, group_by: GroupBy, out_path: &Path) -> Result<()> {
    let text = fs::read_to_string(csv_path)?;
    let rows = parse_metrics_csv(&text)?;
    let doc = render_plot_svg(&rows, metric, group_by)?;
    write_atomic(out_path, doc.as_bytes())
}
