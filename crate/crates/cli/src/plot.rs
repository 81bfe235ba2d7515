//! Minimal deterministic SVG line charts.

use crate::error::{CliError, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" { "0".into() } else { s.into() }
    }
}

/// Evenly spaced ticks on a rounded step covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo > 1e-12 * hi.abs().max(1.0) {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        let pad = 0.5 * lo.abs().max(1.0);
        (lo - pad, hi + pad)
    }
}

impl Chart {
    /// Renders the chart. Fails when there is nothing to draw or a value is
    /// not finite.
    pub fn to_svg(&self) -> Result<String> {
        if self.series.is_empty() || self.series.iter().all(|s| s.points.is_empty()) {
            return Err(CliError::data(format!("plot {:?} has no data", self.title)));
        }
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        if let Some(p) = all().find(|(x, y)| !(x.is_finite() && y.is_finite())) {
            return Err(CliError::data(format!("plot {:?} has a non-finite point {p:?}", self.title)));
        }
        let (x0, x1) = range(all().map(|p| p.0));
        let (y0, y1) = range(all().map(|p| p.1));
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        line(format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
            w = WIDTH,
            h = HEIGHT
        ));
        line(format!(r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#));
        line(format!(
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            num(LEFT + pw / 2.0),
            escape(&self.title)
        ));
        for t in ticks(x0, x1) {
            let x = num(sx(t));
            line(format!(r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#e0e0e0"/>"##, num(TOP), num(TOP + ph)));
            line(format!(
                r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
                num(TOP + ph + 16.0),
                tick_label(t)
            ));
        }
        for t in ticks(y0, y1) {
            let y = num(sy(t));
            line(format!(r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#e0e0e0"/>"##, num(LEFT), num(LEFT + pw)));
            line(format!(
                r#"<text x="{}" y="{y}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
                num(LEFT - 6.0),
                tick_label(t)
            ));
        }
        line(format!(
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            num(LEFT),
            num(TOP),
            num(pw),
            num(ph)
        ));
        line(format!(
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(LEFT + pw / 2.0),
            num(HEIGHT - 14.0),
            escape(&self.x_label)
        ));
        line(format!(
            r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
            escape(&self.y_label),
            y = num(TOP + ph / 2.0)
        ));
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{},{}", num(sx(x)), num(sy(y)))).collect();
            line(format!(
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
                pts.join(" ")
            ));
            if s.points.len() <= 64 {
                for &(x, y) in &s.points {
                    line(format!(r#"<circle cx="{}" cy="{}" r="2.5" fill="{color}"/>"#, num(sx(x)), num(sy(y))));
                }
            }
            let ly = TOP + 8.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 14.0;
            line(format!(
                r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#,
                num(lx),
                num(lx + 20.0),
                y = num(ly)
            ));
            line(format!(
                r#"<text x="{}" y="{}" dominant-baseline="middle">{}</text>"#,
                num(lx + 26.0),
                num(ly),
                escape(&s.label)
            ));
        }
        line("</svg>".into());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_the_range() {
        assert_eq!(ticks(0.0, 1.0), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(ticks(1.0, 16.0), vec![5.0, 10.0, 15.0]);
    }

    #[test]
    fn empty_chart_is_an_error() {
        let c = Chart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                label: "a".into(),
                points: vec![],
            }],
        };
        assert!(c.to_svg().is_err());
    }

    #[test]
    fn one_polyline_per_series() {
        let c = Chart {
            title: "a & b".into(),
            x_label: "k".into(),
            y_label: "mae".into(),
            series: (0..3)
                .map(|i| Series {
                    label: format!("run{i}"),
                    points: vec![(1.0, 1.0 + i as f64), (2.0, 0.5)],
                })
                .collect(),
        };
        let svg = c.to_svg().unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("a &amp; b"));
        assert_eq!(svg, c.to_svg().unwrap());
    }
}
