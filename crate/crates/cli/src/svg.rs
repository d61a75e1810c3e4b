//! Minimal self-contained SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const ML: f64 = 64.0;
const MR: f64 = 150.0;
const MT: f64 = 36.0;
const MB: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { name: name.into(), points }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.05 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn frame(title: &str, xl: &str, yl: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, (ML + W - MR) / 2.0, esc(title));
    let (pw, ph) = (W - ML - MR, H - MT - MB);
    let _ = write!(s, r#"<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="dimgray"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (ML + f * pw, MT + ph - f * ph);
        let _ = write!(s, r#"<line x1="{px}" y1="{}" x2="{px}" y2="{}" stroke="dimgray"/>"#, MT + ph, MT + ph + 4.0);
        let _ = write!(s, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, MT + ph + 16.0, tick(xv));
        let _ = write!(s, r#"<line x1="{}" y1="{py}" x2="{ML}" y2="{py}" stroke="dimgray"/>"#, ML - 4.0);
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, ML - 6.0, py + 4.0, tick(yv));
    }
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, ML + pw / 2.0, H - 10.0, esc(xl));
    let _ = write!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        MT + ph / 2.0,
        MT + ph / 2.0,
        esc(yl)
    );
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = MT + 10.0 + 16.0 * i as f64;
        let x = W - MR + 12.0;
        let _ = write!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 8.0, PALETTE[i % PALETTE.len()]);
        let _ = write!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, esc(n));
    }
}

/// Polyline chart of one or more series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut s = frame(title, x_label, y_label, xs, ys);
    let (pw, ph) = (W - ML - MR, H - MT - MB);
    for (i, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    ML + (x - xs.0) / (xs.1 - xs.0) * pw,
                    MT + ph - (y - ys.0) / (ys.1 - ys.0) * ph
                )
            })
            .collect();
        let color = PALETTE[i % PALETTE.len()];
        if pts.len() == 1 {
            let (x, y) = pts[0].split_once(',').unwrap_or(("0", "0"));
            let _ = write!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        } else {
            let _ = write!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        }
    }
    legend(&mut s, &series.iter().map(|x| x.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>");
    s
}

/// Overlaid step histograms on shared bins.
pub fn histogram_chart(title: &str, x_label: &str, groups: &[(String, Vec<f64>)], bins: usize) -> String {
    let (lo, hi) = bounds(groups.iter().flat_map(|g| g.1.iter().copied()));
    let width = (hi - lo) / bins as f64;
    let dens: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, xs)| {
            let mut h = vec![0.0; bins];
            for &x in xs.iter().filter(|x| x.is_finite()) {
                let b = (((x - lo) / width) as usize).min(bins - 1);
                h[b] += 1.0 / (xs.len() as f64 * width);
            }
            h
        })
        .collect();
    let ymax = dens.iter().flatten().cloned().fold(0.0, f64::max).max(1e-12);
    let mut s = frame(title, x_label, "density", (lo, hi), (0.0, ymax));
    let (pw, ph) = (W - ML - MR, H - MT - MB);
    for (i, h) in dens.iter().enumerate() {
        let mut pts = vec![format!("{ML:.2},{:.2}", MT + ph)];
        for (b, d) in h.iter().enumerate() {
            let y = MT + ph - d / ymax * ph;
            pts.push(format!("{:.2},{y:.2}", ML + b as f64 / bins as f64 * pw));
            pts.push(format!("{:.2},{y:.2}", ML + (b + 1) as f64 / bins as f64 * pw));
        }
        pts.push(format!("{:.2},{:.2}", ML + pw, MT + ph));
        let color = PALETTE[i % PALETTE.len()];
        let _ = write!(
            s,
            r#"<polyline fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
    }
    legend(&mut s, &groups.iter().map(|g| g.0.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_closed_svg() {
        let c = line_chart("a<b", "x", "y", &[Series::new("s", vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(c.starts_with("<svg") && c.ends_with("</svg>") && c.contains("a&lt;b"));
        let h = histogram_chart("h", "x", &[("g".into(), vec![0.0, 1.0, 1.0, 2.0])], 4);
        assert!(h.contains("polyline"));
        let flat = line_chart("flat", "x", "y", &[Series::new("s", vec![(0.0, 3.0)])]);
        assert!(flat.contains("circle"));
    }
}
