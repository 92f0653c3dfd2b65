//! SVG scatter plots with a TSV sidecar.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 24.0;
const LEGEND_WIDTH: f64 = 160.0;
const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

fn color(i: usize) -> String {
    if i < PALETTE.len() {
        return PALETTE[i].to_string();
    }
    // Golden-angle hues beyond the fixed palette.
    let hue = (i as f64 * 137.508) % 360.0;
    format!("hsl({hue:.1},65%,45%)")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Write an SVG scatter (one color per distinct label, with legend) to
/// `path` and the raw points to `path` with extension `tsv`. Returns the
/// sidecar path.
pub fn render_scatter(points: &[[f64; 2]], labels: &[String], path: &Path) -> Result<PathBuf> {
    if points.is_empty() {
        return Err(Error::Input("nothing to plot: no points".into()));
    }
    if points.len() != labels.len() {
        return Err(Error::Input(format!("{} points but {} labels", points.len(), labels.len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("cannot plot non-finite points".into()));
    }
    let mut classes: Vec<&str> = Vec::new();
    for l in labels {
        if !classes.contains(&l.as_str()) {
            classes.push(l);
        }
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let sx = if x1 > x0 { (WIDTH - 2.0 * MARGIN) / (x1 - x0) } else { 0.0 };
    let sy = if y1 > y0 { (HEIGHT - 2.0 * MARGIN) / (y1 - y0) } else { 0.0 };
    let px = |x: f64| if sx > 0.0 { MARGIN + (x - x0) * sx } else { WIDTH / 2.0 };
    let py = |y: f64| if sy > 0.0 { HEIGHT - MARGIN - (y - y0) * sy } else { HEIGHT / 2.0 };

    let mut svg = String::new();
    let total = WIDTH + LEGEND_WIDTH;
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{HEIGHT}" viewBox="0 0 {total} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r##"<rect x="0" y="0" width="{total}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#cccccc"/>"##,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(svg, r#"<g id="points">"#);
    for (p, l) in points.iter().zip(labels) {
        let c = classes.iter().position(|k| k == l).unwrap();
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{}" fill-opacity="0.85"><title>{}</title></circle>"#,
            px(p[0]),
            py(p[1]),
            color(c),
            escape(l)
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, r#"<g id="legend" font-family="sans-serif" font-size="12">"#);
    for (i, l) in classes.iter().enumerate() {
        let y = MARGIN + 10.0 + 18.0 * i as f64;
        let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{y:.1}" r="5" fill="{}"/>"#, WIDTH + 8.0, color(i));
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, WIDTH + 20.0, y + 4.0, escape(l));
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");

    let mut tsv = String::from("x\ty\tlabel\n");
    for (p, l) in points.iter().zip(labels) {
        let _ = writeln!(tsv, "{}\t{}\t{l}", p[0], p[1]);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, svg)?;
    let sidecar = path.with_extension("tsv");
    std::fs::write(&sidecar, tsv)?;
    Ok(sidecar)
}
