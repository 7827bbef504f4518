//! Minimal static SVG charts for the plot CSVs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use ndarray::Array2;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn axes(s: &mut String, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (PAD, W - PAD / 2.0, H - PAD, PAD);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for (v, px) in [(x.0, x0), (x.1, x1)] {
        let _ = writeln!(s, r#"<text x="{px}" y="{}" text-anchor="middle">{v:.3}</text>"#, y0 + 16.0);
    }
    for (v, py) in [(y.0, y0), (y.1, y1)] {
        let _ = writeln!(s, r#"<text x="{}" y="{py}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

/// One polyline per named series; non-finite points are skipped.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> Result<()> {
    let xr = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let yr = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let px = |v: f64| PAD + (v - xr.0) / (xr.1 - xr.0) * (W - 1.5 * PAD);
    let py = |v: f64| H - PAD - (v - yr.0) / (yr.1 - yr.0) * (H - 2.0 * PAD);
    let mut s = open(title);
    axes(&mut s, xr, yr, x_label, y_label);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let _ =
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        let ly = PAD + 16.0 * k as f64;
        let _ =
            writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#, W - PAD, escape(name));
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

/// Horizontal bars, top to bottom in the given order.
pub fn bar_chart(path: &Path, title: &str, labels: &[String], values: &[f64]) -> Result<()> {
    let mut s = open(title);
    let max = values.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let left = 160.0;
    let mid = left + (W - left - PAD / 2.0) / 2.0;
    let half = (W - left - PAD / 2.0) / 2.0;
    let row = ((H - 2.0 * PAD) / labels.len().max(1) as f64).min(28.0);
    let _ = writeln!(s, r#"<line x1="{mid}" y1="{PAD}" x2="{mid}" y2="{}" stroke="black"/>"#, H - PAD);
    for (k, (label, v)) in labels.iter().zip(values).enumerate() {
        let y = PAD + row * k as f64;
        let w = v.abs() / max * half;
        let x = if *v >= 0.0 { mid } else { mid - w };
        let color = if *v >= 0.0 { COLORS[1] } else { COLORS[0] };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{:.2}" fill="{color}"/>"#,
            y + 2.0,
            row - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + row / 2.0 + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

/// Grey-scale matrix, darker for larger values.
pub fn heatmap(path: &Path, title: &str, m: &Array2<f64>) -> Result<()> {
    let mut s = open(title);
    let (lo, hi) = range(m.iter().copied());
    let (n, k) = m.dim();
    let cell = ((H - 2.0 * PAD) / n.max(k).max(1) as f64).min(40.0);
    for ((i, j), v) in m.indexed_iter() {
        let shade = (255.0 * (1.0 - (v - lo) / (hi - lo))).round().clamp(0.0, 255.0) as u8;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
            PAD + cell * j as f64,
            PAD + cell * i as f64
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}
