//! Minimal hand-written SVG charts: polylines with axes, and bar charts.
//! Output depends only on the inputs, so files diff cleanly.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn axes(out: &mut String, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(out, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let py = y0 + (y1 - y0) * f;
        let px = x0 + (x1 - x0) * f;
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.4}</text>"#, x0 - 6.0, py + 4.0, y.0 + (y.1 - y.0) * f);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px, y0 + 18.0, fmt_tick(x.0 + (x.1 - x.0) * f));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Line chart of named `(x, y)` series with a legend.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xr = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    axes(&mut out, xr, yr, xlabel, ylabel);
    let sx = |x: f64| LEFT + (x - xr.0) / (xr.1 - xr.0) * (W - LEFT - RIGHT);
    let sy = |y: f64| (H - BOTTOM) - (y - yr.0) / (yr.1 - yr.0) * (H - BOTTOM - TOP);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, path.join(" "));
        let ly = TOP + 6.0 + 16.0 * i as f64;
        let _ = writeln!(out, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - 170.0, W - 150.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, W - 145.0, ly + 4.0, escape(name));
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart, one bar per `(label, value)`.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let yr = (0.0, if top > 0.0 { top * 1.1 } else { 1.0 });
    let (x0, y0) = (LEFT, H - BOTTOM);
    let _ = writeln!(out, r#"<path d="M{x0} {TOP} L{x0} {y0} L{} {y0}" stroke="black" fill="none"/>"#, W - RIGHT);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let py = y0 - (y0 - TOP) * f;
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.4}</text>"#, x0 - 6.0, py + 4.0, yr.1 * f);
    }
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (y0 + TOP) / 2.0,
        escape(ylabel)
    );
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (v / yr.1).clamp(0.0, 1.0) * (y0 - TOP);
        let x = x0 + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            y0 - h,
            slot * 0.7,
            COLORS[i % COLORS.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(out, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle" font-size="10">{v:.4}</text>"#, y0 - h - 4.0);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{0:.2}" text-anchor="end" transform="rotate(-35 {cx:.2} {0:.2})">{1}</text>"#,
            y0 + 14.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}
