//! Minimal SVG scatter and line plots. Diagnostic only; numbers are written
//! with fixed precision so output is byte-stable.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 480.0;
const PAD: f64 = 36.0;

const PALETTE: [&str; 10] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{PAD}" y="20" font-family="sans-serif" font-size="13">{}</text>"#, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of 2-D points colored by class; `reference` points (if any) are
/// drawn first in light grey.
pub fn scatter(title: &str, points: &[[f64; 2]], classes: &[usize], reference: &[[f64; 2]]) -> String {
    let all = || points.iter().chain(reference);
    let f = Frame::fit(all().map(|p| p[0]), all().map(|p| p[1]));
    let mut s = header(title);
    for p in reference {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="#cccccc"/>"##, f.px(p[0]), f.py(p[1]));
    }
    for (p, &c) in points.iter().zip(classes) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{}" fill-opacity="0.8"/>"#, f.px(p[0]), f.py(p[1]), PALETTE[c % PALETTE.len()]);
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot of named series over shared x values.
pub fn lines(title: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let ys = || series.iter().flat_map(|(_, v)| v.iter().copied());
    let f = Frame::fit(xs.iter().copied(), ys());
    let mut s = header(title);
    for (i, (name, v)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = xs.iter().zip(v).map(|(&x, &y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#, W - 150.0, 40.0 + 14.0 * i as f64, escape(name));
    }
    for &x in xs {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{x}</text>"#, f.px(x), H - PAD + 14.0);
    }
    s.push_str("</svg>\n");
    s
}
