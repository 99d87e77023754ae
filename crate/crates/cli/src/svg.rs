//! Minimal SVG line plot: axes, one polyline per series, a legend.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders every series on shared axes. Non-finite points are drawn at the
/// plot edge rather than dropped so each polyline keeps one vertex per input.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let finite = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let sx = |x: f64| MARGIN + if x.is_finite() { (x - x0) / (x1 - x0) * pw } else { pw };
    let sy = |y: f64| HEIGHT - MARGIN - if y.is_finite() { (y - y0) / (y1 - y0) * ph } else { ph };

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15" font-family="sans-serif">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, bottom, right, top) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(out, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{left}" y1="{bottom}" x2="{left}" y2="{top}" stroke="black"/>"#);
    let small = r#"font-size="11" font-family="sans-serif""#;
    let _ = writeln!(out, r#"<text x="{left}" y="{}" {small}>{}</text>"#, bottom + 16.0, short(x0));
    let _ = writeln!(out, r#"<text x="{right}" y="{}" text-anchor="end" {small}>{}</text>"#, bottom + 16.0, short(x1));
    let _ = writeln!(out, r#"<text x="{}" y="{bottom}" text-anchor="end" {small}>{}</text>"#, left - 4.0, short(y0));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" {small}>{}</text>"#, left - 4.0, top + 4.0, short(y1));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" {small}>{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})" {small}>{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y)))).collect();
        let _ = writeln!(
            out,
            r#"<polyline data-label="{}" data-points="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(s.label),
            s.points.len(),
            pts.join(" ")
        );
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(out, r#"<text x="{}" y="{ly}" text-anchor="end" fill="{color}" {small}>{}</text>"#, right, escape(s.label));
    }
    out.push_str("</svg>\n");
    out
}

fn short(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Number of vertices in each polyline, in document order.
pub fn polyline_sizes(svg: &str) -> Vec<usize> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let start = l.find(" points=\"").map(|i| i + 9).unwrap_or(l.len());
            let end = l[start..].find('"').map(|i| start + i).unwrap_or(l.len());
            l[start..end].split_whitespace().count()
        })
        .collect()
}
