//! Minimal SVG line plots for sweep results: mean accuracy against the swept
//! value with one-standard-deviation whiskers. Grid points are evenly spaced
//! and labeled with their value, so linear and logarithmic grids both render
//! readably.

use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 25.0;
const MARGIN_T: f64 = 45.0;
const MARGIN_B: f64 = 60.0;

pub struct SeriesPoint {
    pub label: String,
    pub mean: Option<f64>,
    pub std: f64,
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 10000.0) {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:e}")
    }
}

/// Renders the plot and writes it to `path`.
pub fn sweep_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[SeriesPoint],
    path: &Path,
) -> anyhow::Result<()> {
    let present: Vec<(usize, f64, f64)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.mean.map(|m| (i, m, p.std)))
        .collect();
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, m, s) in &present {
        y_min = y_min.min(m - s);
        y_max = y_max.max(m + s);
    }
    if present.is_empty() {
        y_min = 0.0;
        y_max = 1.0;
    }
    let pad = ((y_max - y_min) * 0.1).max(0.5);
    y_min -= pad;
    y_max += pad;

    let plot_w = W - MARGIN_L - MARGIN_R;
    let plot_h = H - MARGIN_T - MARGIN_B;
    let xs = |i: usize| {
        if points.len() <= 1 {
            MARGIN_L + plot_w / 2.0
        } else {
            MARGIN_L + plot_w * i as f64 / (points.len() - 1) as f64
        }
    };
    let ys = |v: f64| MARGIN_T + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    let mut svg = String::new();
    write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )?;
    write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    write!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>"#,
        W / 2.0
    )?;

    // Axes.
    write!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black"/>"#,
        H - MARGIN_B
    )?;
    write!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B
    )?;

    // Y ticks.
    for t in 0..=4 {
        let v = y_min + (y_max - y_min) * t as f64 / 4.0;
        let y = ys(v);
        write!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{MARGIN_L}" y2="{y}" stroke="black"/>"#,
            MARGIN_L - 5.0
        )?;
        write!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_num(v)
        )?;
    }

    // X ticks and labels.
    for (i, p) in points.iter().enumerate() {
        let x = xs(i);
        write!(
            svg,
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/>"#,
            H - MARGIN_B,
            H - MARGIN_B + 5.0
        )?;
        write!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            H - MARGIN_B + 20.0,
            p.label
        )?;
    }
    write!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{x_label}</text>"#,
        MARGIN_L + plot_w / 2.0,
        H - 15.0
    )?;
    write!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {})">{y_label}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    )?;

    // Error bars and the mean polyline.
    for (i, m, s) in &present {
        let x = xs(*i);
        write!(
            svg,
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="steelblue"/>"#,
            ys(m - s),
            ys(m + s)
        )?;
        for yv in [m - s, m + s] {
            write!(
                svg,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="steelblue"/>"#,
                x - 4.0,
                ys(yv),
                x + 4.0,
                ys(yv)
            )?;
        }
    }
    if present.len() > 1 {
        let pts: Vec<String> = present
            .iter()
            .map(|(i, m, _)| format!("{},{}", xs(*i), ys(*m)))
            .collect();
        write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            pts.join(" ")
        )?;
    }
    for (i, m, _) in &present {
        write!(
            svg,
            r#"<circle cx="{}" cy="{}" r="3.5" fill="steelblue"/>"#,
            xs(*i),
            ys(*m)
        )?;
    }
    // Diverged cells get a marker on the axis.
    for (i, p) in points.iter().enumerate() {
        if p.mean.is_none() {
            write!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11" fill="crimson">diverged</text>"#,
                xs(i),
                MARGIN_T + 14.0
            )?;
        }
    }
    write!(svg, "</svg>")?;
    std::fs::write(path, svg)?;
    Ok(())
}
