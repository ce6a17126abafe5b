//! Minimal SVG line and scatter plots. CSVs are the authoritative output;
//! these are for quick inspection.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        let pad = |lo: &mut f64, hi: &mut f64| {
            let span = (*hi - *lo).max(1e-12 * lo.abs().max(1.0));
            *lo -= 0.05 * span;
            *hi += 0.05 * span;
        };
        pad(&mut f.x0, &mut f.x1);
        pad(&mut f.y0, &mut f.y1);
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str, xl: &str, yl: &str, f: Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for (v, x) in [(f.x0, MARGIN), (f.x1, W - MARGIN)] {
        let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="middle">{v:.3}</text>"#, H - MARGIN + 16.0);
    }
    for (v, y) in [(f.y0, H - MARGIN), (f.y1, MARGIN)] {
        let _ = writeln!(out, r#"<text x="{}" y="{y}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xl));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(yl)
    );
}

/// One polyline per series, with a legend.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut out = String::new();
    header(&mut out, title, x_label, y_label, f);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(&s.name),
            pts.join(" ")
        );
        let ly = MARGIN + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            W - MARGIN - 6.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Points coloured by `value` from blue (low) to red (high).
pub fn scatter_plot(title: &str, points: &[(f64, f64, f64)]) -> String {
    let xy: Vec<(f64, f64)> = points.iter().map(|&(x, y, _)| (x, y)).collect();
    let f = Frame::fit(xy.iter());
    let (lo, hi) = points
        .iter()
        .map(|p| p.2)
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut out = String::new();
    header(&mut out, title, "x", "y", f);
    for &(x, y, v) in points {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let s = if hi > lo && v.is_finite() { (v - lo) / (hi - lo) } else { 0.0 };
        let r = (255.0 * s) as u8;
        let b = (255.0 * (1.0 - s)) as u8;
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="rgb({r},40,{b})"/>"#, f.px(x), f.py(y));
    }
    out.push_str("</svg>\n");
    out
}

pub fn write(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}
