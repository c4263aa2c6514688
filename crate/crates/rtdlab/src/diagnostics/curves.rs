//! Loss-curve capture: trailing moving average, a wide CSV, and a small
//! self-contained SVG plot.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One labeled series, e.g. the MLM loss of one sharing mode.
#[derive(Debug, Clone)]
pub struct CurveSeries {
    pub label: String,
    pub steps: Vec<u64>,
    pub values: Vec<f64>,
}

/// Trailing moving average: out[i] is the mean of the last `window` points
/// up to and including i (fewer near the start). Window 1 copies the input.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be at least 1");
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= window {
            sum -= series[i - window];
        }
        let count = (i + 1).min(window);
        out.push(sum / count as f64);
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];

/// Smooths each series, writes a wide CSV (step plus one column per label),
/// and draws all series into one SVG.
pub fn curve_capture(
    series: &[CurveSeries],
    window: usize,
    csv_path: &Path,
    svg_path: &Path,
) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Diagnostics("no series to capture".into()));
    }
    if window == 0 {
        return Err(Error::config("smoothing_window", "must be at least 1"));
    }
    for s in series {
        if s.values.is_empty() {
            return Err(Error::Diagnostics(format!("series {} is empty", s.label)));
        }
        if s.steps.len() != s.values.len() {
            return Err(Error::Diagnostics(format!(
                "series {} has {} steps but {} values",
                s.label,
                s.steps.len(),
                s.values.len()
            )));
        }
    }

    let smoothed: Vec<Vec<f64>> = series.iter().map(|s| moving_average(&s.values, window)).collect();

    let mut all_steps: Vec<u64> = series.iter().flat_map(|s| s.steps.iter().copied()).collect();
    all_steps.sort_unstable();
    all_steps.dedup();

    let mut csv = String::new();
    csv.push_str("step");
    for s in series {
        csv.push(',');
        csv.push_str(&csv_field(&s.label));
    }
    csv.push('\n');
    for &step in &all_steps {
        write!(csv, "{step}").expect("string write");
        for (s, sm) in series.iter().zip(&smoothed) {
            csv.push(',');
            if let Ok(idx) = s.steps.binary_search(&step) {
                write!(csv, "{:?}", sm[idx]).expect("string write");
            }
        }
        csv.push('\n');
    }
    std::fs::write(csv_path, csv)?;
    std::fs::write(svg_path, render_svg(series, &smoothed))?;
    Ok(())
}

/// RFC-4180 quoting: only fields containing commas, quotes, or newlines are
/// wrapped, with inner quotes doubled.
fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

fn render_svg(series: &[CurveSeries], smoothed: &[Vec<f64>]) -> String {
    let (w, h) = (860.0, 480.0);
    let (left, right, top, bottom) = (70.0, 20.0, 20.0, 56.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (s, sm) in series.iter().zip(smoothed) {
        for (&st, &v) in s.steps.iter().zip(sm) {
            x_min = x_min.min(st as f64);
            x_max = x_max.max(st as f64);
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    let pad = (y_max - y_min) * 0.05;
    let (y_min, y_max) = (y_min - pad, y_max + pad);

    let sx = |x: f64| left + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| top + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
    .expect("string write");
    // axes
    write!(
        svg,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"#333\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h,
        top + plot_h
    )
    .expect("string write");
    // y ticks
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = sy(v);
        write!(
            svg,
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{left}\" y2=\"{y:.1}\" stroke=\"#333\"/>\n\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>\n",
            left - 5.0,
            left - 8.0,
            y + 4.0
        )
        .expect("string write");
    }
    // x labels
    write!(
        svg,
        "<text x=\"{left}\" y=\"{}\" text-anchor=\"start\">{x_min:.0}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x_max:.0}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>\n",
        top + plot_h + 18.0,
        left + plot_w,
        top + plot_h + 18.0,
        left + plot_w / 2.0,
        top + plot_h + 38.0
    )
    .expect("string write");

    for (i, (s, sm)) in series.iter().zip(smoothed).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for (&st, &v) in s.steps.iter().zip(sm) {
            write!(points, "{:.2},{:.2} ", sx(st as f64), sy(v)).expect("string write");
        }
        write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.trim_end()
        )
        .expect("string write");
        let ly = top + 16.0 + i as f64 * 18.0;
        write!(
            svg,
            "<rect x=\"{}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{:.1}\">{}</text>\n",
            left + plot_w - 130.0,
            ly - 10.0,
            left + plot_w - 112.0,
            ly,
            escape_xml(&s.label)
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape_xml(raw: &str) -> String {
    raw.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
