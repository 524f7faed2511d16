//! Deterministic SVG line plots of training diagnostics.
//!
//! Pure string assembly with fixed-precision coordinates, so identical
//! inputs always render byte-identical files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::DiagRow;

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN_L: f64 = 46.0;
const MARGIN_R: f64 = 12.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 34.0;
const LEGEND_H: f64 = 20.0;

const SERIES_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One named line; points with negative y are sentinel "unavailable" values
/// and are left out of the drawing.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// One titled axis region holding any number of series.
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn render_panel(out: &mut String, panel: &Panel, origin_x: f64, origin_y: f64) {
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let x0 = origin_x + MARGIN_L;
    let y0 = origin_y + MARGIN_T;

    let visible: Vec<Vec<(f64, f64)>> = panel
        .series
        .iter()
        .map(|s| s.points.iter().copied().filter(|&(_, y)| y >= 0.0).collect())
        .collect();
    let x_max = visible
        .iter()
        .flatten()
        .map(|&(x, _)| x)
        .fold(0.0f64, f64::max)
        .max(1.0);
    let y_max = visible
        .iter()
        .flatten()
        .map(|&(_, y)| y)
        .fold(0.0f64, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };

    let sx = |x: f64| x0 + x / x_max * plot_w;
    let sy = |y: f64| y0 + (1.0 - y / y_max) * plot_h;

    out.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        fmt(x0),
        fmt(y0),
        fmt(plot_w),
        fmt(plot_h)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
        fmt(x0 + plot_w / 2.0),
        fmt(origin_y + MARGIN_T - 10.0),
        panel.title
    ));

    // x ticks on whole levels
    let step = (x_max / 8.0).ceil().max(1.0);
    let mut level = 0.0;
    while level <= x_max {
        out.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y1}\" x2=\"{x}\" y2=\"{y2}\" stroke=\"#444\"/>\n",
            x = fmt(sx(level)),
            y1 = fmt(y0 + plot_h),
            y2 = fmt(y0 + plot_h + 4.0)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
            fmt(sx(level)),
            fmt(y0 + plot_h + 16.0),
            level as u32
        ));
        level += step;
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">level</text>\n",
        fmt(x0 + plot_w / 2.0),
        fmt(y0 + plot_h + 30.0)
    ));

    // y ticks on quarters of the range
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        out.push_str(&format!(
            "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#444\"/>\n",
            x1 = fmt(x0 - 4.0),
            x2 = fmt(x0),
            y = fmt(sy(v))
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{}</text>\n",
            fmt(x0 - 7.0),
            fmt(sy(v) + 3.0),
            fmt(v)
        ));
    }

    for (i, pts) in visible.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y))))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            coords.join(" ")
        ));
    }
}

/// Render panels side by side with a shared legend strip on top.
pub fn render_panels(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len() as f64;
    let height = LEGEND_H + PANEL_H;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" \
         font-family=\"monospace\">\n",
        fmt(width),
        fmt(height)
    ));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n",
        fmt(width),
        fmt(height)
    ));

    // legend from the first panel's series labels
    if let Some(first) = panels.first() {
        let mut x = MARGIN_L;
        for (i, s) in first.series.iter().enumerate() {
            let color = SERIES_COLORS[i % SERIES_COLORS.len()];
            out.push_str(&format!(
                "<line x1=\"{x1}\" y1=\"12\" x2=\"{x2}\" y2=\"12\" stroke=\"{color}\" \
                 stroke-width=\"2\"/>\n",
                x1 = fmt(x),
                x2 = fmt(x + 18.0)
            ));
            out.push_str(&format!(
                "<text x=\"{}\" y=\"15\" font-size=\"11\">{}</text>\n",
                fmt(x + 22.0),
                s.label
            ));
            x += 26.0 + 8.0 * s.label.len() as f64;
        }
    }

    for (i, panel) in panels.iter().enumerate() {
        render_panel(&mut out, panel, PANEL_W * i as f64, LEGEND_H);
    }
    out.push_str("</svg>\n");
    out
}

/// Mean value per level across a run's trees, skipping sentinel values.
fn level_means(rows: &[DiagRow], pick: impl Fn(&DiagRow) -> f64) -> Vec<(f64, f64)> {
    let mut acc: Vec<(f64, u32)> = Vec::new();
    for r in rows {
        let v = pick(r);
        let level = r.level as usize;
        if acc.len() <= level {
            acc.resize(level + 1, (0.0, 0));
        }
        if v >= 0.0 {
            acc[level].0 += v;
            acc[level].1 += 1;
        }
    }
    acc.iter()
        .enumerate()
        .map(|(l, &(sum, n))| {
            let v = if n > 0 { sum / n as f64 } else { -1.0 };
            (l as f64, v)
        })
        .collect()
}

/// The three-panel diagnostics figure: entropy, chi-square distance, and KL
/// divergence per tree level, one series per alpha.
pub fn diagnostics_svg(per_alpha: &[(f64, Vec<DiagRow>)]) -> String {
    let picks: [(&str, fn(&DiagRow) -> f64); 3] = [
        ("label entropy", |r| r.entropy),
        ("chi-square distance", |r| r.chi2),
        ("KL divergence", |r| r.kl),
    ];
    let panels: Vec<Panel> = picks
        .iter()
        .map(|(title, pick)| Panel {
            title: title.to_string(),
            series: per_alpha
                .iter()
                .map(|(alpha, rows)| Series {
                    label: format!("alpha={alpha}"),
                    points: level_means(rows, pick),
                })
                .collect(),
        })
        .collect();
    render_panels(&panels)
}

pub fn write_svg(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}
