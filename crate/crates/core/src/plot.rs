//! Minimal native SVG rendering of predictive plots.
//!
//! A 1-D panel draws a filled mean +- 2 std band, sample traces, the mean line and the
//! data. A 2-D panel draws a heatmap of one value per grid cell with the data on top.
//! Axes are linear over the padded data range. Output carries no timestamps.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BandPanel {
    pub title: String,
    pub xs: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub data: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapPanel {
    pub title: String,
    /// Cells per axis; `values[i * ny + j]` belongs to `x_i`, `y_j` (last axis fastest).
    pub nx: usize,
    pub ny: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub values: Vec<f64>,
    pub data: Vec<(f64, f64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Panel {
    Band(BandPanel),
    Heatmap(HeatmapPanel),
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    top: f64,
}

impl Axes {
    fn padded(lo: f64, hi: f64) -> (f64, f64) {
        let span = hi - lo;
        let pad = if span > 0.0 { 0.05 * span } else { 1.0 };
        (lo - pad, hi + pad)
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        self.top + HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn frame(&self, svg: &mut String, title: &str) {
        let (l, r) = (MARGIN, WIDTH - MARGIN);
        let (t, b) = (self.top + MARGIN, self.top + HEIGHT - MARGIN);
        let _ = writeln!(
            svg,
            r#"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            r - l,
            b - t
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            self.top + MARGIN - 12.0,
            escape(title)
        );
        for k in 0..=4 {
            let fx = self.x0 + (self.x1 - self.x0) * k as f64 / 4.0;
            let fy = self.y0 + (self.y1 - self.y0) * k as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{fx:.2}</text>"#,
                self.px(fx),
                b + 14.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{fy:.2}</text>"#,
                l - 4.0,
                self.py(fy) + 3.0
            );
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(svg: &mut String, ax: &Axes, xs: &[f64], ys: &[f64], style: &str) {
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", ax.px(x), ax.py(y)))
        .collect();
    let _ = writeln!(svg, r#"<polyline points="{}" {style}/>"#, pts.join(" "));
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn band(svg: &mut String, p: &BandPanel, top: f64) {
    let upper: Vec<f64> = p.mean.iter().zip(&p.std).map(|(m, s)| m + 2.0 * s).collect();
    let lower: Vec<f64> = p.mean.iter().zip(&p.std).map(|(m, s)| m - 2.0 * s).collect();
    let (xlo, xhi) = finite_range(p.xs.iter().copied().chain(p.data.iter().map(|d| d.0)));
    let (ylo, yhi) = finite_range(
        upper
            .iter()
            .chain(&lower)
            .copied()
            .chain(p.samples.iter().flatten().copied())
            .chain(p.data.iter().map(|d| d.1)),
    );
    let (x0, x1) = Axes::padded(xlo, xhi);
    let (y0, y1) = Axes::padded(ylo, yhi);
    let ax = Axes { x0, x1, y0, y1, top };
    ax.frame(svg, &p.title);

    let mut d = String::new();
    for (i, (&x, &y)) in p.xs.iter().zip(&upper).enumerate() {
        let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, ax.px(x), ax.py(y));
    }
    for (&x, &y) in p.xs.iter().zip(&lower).rev() {
        let _ = write!(d, "L{:.2},{:.2} ", ax.px(x), ax.py(y));
    }
    let _ = writeln!(svg, r##"<path d="{}Z" fill="#7fbf7f" fill-opacity="0.4" stroke="none"/>"##, d);
    for s in &p.samples {
        polyline(svg, &ax, &p.xs, s, r##"fill="none" stroke="#2e8b57" stroke-width="0.8" stroke-opacity="0.7""##);
    }
    polyline(svg, &ax, &p.xs, &p.mean, r##"fill="none" stroke="#c0392b" stroke-width="2""##);
    for &(x, y) in &p.data {
        let _ = writeln!(
            svg,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#888888"/>"##,
            ax.px(x),
            ax.py(y)
        );
    }
}

fn heat_colour(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    format!("#{r:02x}{:02x}{b:02x}", 64)
}

fn heatmap(svg: &mut String, p: &HeatmapPanel, top: f64) {
    let (x0, x1) = Axes::padded(p.lo[0], p.hi[0]);
    let (y0, y1) = Axes::padded(p.lo[1], p.hi[1]);
    let ax = Axes { x0, x1, y0, y1, top };
    let (vlo, vhi) = finite_range(p.values.iter().copied());
    let scale = if vhi > vlo { vhi - vlo } else { 1.0 };
    let dx = (p.hi[0] - p.lo[0]) / (p.nx.max(2) - 1) as f64;
    let dy = (p.hi[1] - p.lo[1]) / (p.ny.max(2) - 1) as f64;
    for i in 0..p.nx {
        for j in 0..p.ny {
            let cx = p.lo[0] + dx * i as f64;
            let cy = p.lo[1] + dy * j as f64;
            let (l, r) = (ax.px(cx - dx / 2.0), ax.px(cx + dx / 2.0));
            let (t, b) = (ax.py(cy + dy / 2.0), ax.py(cy - dy / 2.0));
            let _ = writeln!(
                svg,
                r#"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                r - l,
                b - t,
                heat_colour((p.values[i * p.ny + j] - vlo) / scale)
            );
        }
    }
    ax.frame(svg, &format!("{} [{vlo:.3}, {vhi:.3}]", p.title));
    for &(x, y, c) in &p.data {
        let fill = if c == 0 { "#ff4040" } else { "#4040ff" };
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{fill}" stroke="white" stroke-width="0.5"/>"#,
            ax.px(x),
            ax.py(y)
        );
    }
}

/// Stacks the panels vertically into one SVG document.
pub fn render(panels: &[Panel]) -> String {
    let mut svg = String::new();
    let total = HEIGHT * panels.len().max(1) as f64;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{total}" viewBox="0 0 {WIDTH} {total}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, panel) in panels.iter().enumerate() {
        let top = HEIGHT * k as f64;
        match panel {
            Panel::Band(p) => band(&mut svg, p, top),
            Panel::Heatmap(p) => heatmap(&mut svg, p, top),
        }
    }
    svg.push_str("</svg>\n");
    svg
}
