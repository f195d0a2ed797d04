//! Minimal self-contained SVG charts: lines, scatter points and bars on
//! linear axes.

use std::fmt::Write;

pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mark {
    /// Polyline with a marker on every point.
    Line,
    /// Unconnected points.
    Points,
    /// Bars of the given data width, anchored at y = 0 and starting at x.
    Bars(f64),
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub color: String,
    pub mark: Mark,
    pub points: Vec<(f64, f64)>,
    pub radius: f64,
}

impl Series {
    pub fn new(name: impl Into<String>, color: impl Into<String>, mark: Mark, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            color: color.into(),
            mark,
            points,
            radius: 3.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed axis ranges; derived from the data when unset.
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

impl Chart {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Self::default()
        }
    }

    pub fn render(&self) -> String {
        let bar_extent = |s: &Series, p: &(f64, f64)| match s.mark {
            Mark::Bars(w) => p.0 + w,
            _ => p.0,
        };
        let (x0, x1) = self.x_range.unwrap_or_else(|| {
            span(self.series.iter().flat_map(|s| s.points.iter().flat_map(move |p| [p.0, bar_extent(s, p)])))
        });
        let (y0, y1) = self.y_range.unwrap_or_else(|| {
            let has_bars = self.series.iter().any(|s| matches!(s.mark, Mark::Bars(_)));
            let ys = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
            if has_bars {
                span(ys.chain(std::iter::once(0.0)))
            } else {
                span(ys)
            }
        });
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let _ = writeln!(
                out,
                r##"<line x1="{x:.2}" y1="{b:.2}" x2="{x:.2}" y2="{b2:.2}" stroke="#444"/><text x="{x:.2}" y="{t:.2}" text-anchor="middle">{}</text>"##,
                tick_label(xv),
                x = sx(xv),
                b = TOP + ph,
                b2 = TOP + ph + 5.0,
                t = TOP + ph + 18.0
            );
            let _ = writeln!(
                out,
                r##"<line x1="{l:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#444"/><text x="{t:.2}" y="{ty:.2}" text-anchor="end">{}</text>"##,
                tick_label(yv),
                l = LEFT - 5.0,
                y = sy(yv),
                t = LEFT - 8.0,
                ty = sy(yv) + 4.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
            escape(&self.y_label),
            y = TOP + ph / 2.0
        );

        for s in &self.series {
            let color = escape(&s.color);
            match s.mark {
                Mark::Bars(w) => {
                    for &(x, y) in &s.points {
                        let (top, bottom) = (sy(y.max(0.0)), sy(y.min(0.0)));
                        let _ = writeln!(
                            out,
                            r#"<rect class="bar" x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.8"/>"#,
                            sx(x),
                            (sx(x + w) - sx(x)).max(0.5),
                            bottom - top
                        );
                    }
                }
                Mark::Line | Mark::Points => {
                    if s.mark == Mark::Line && s.points.len() > 1 {
                        let path: Vec<String> =
                            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                        let _ = writeln!(
                            out,
                            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                            path.join(" ")
                        );
                    }
                    for &(x, y) in &s.points {
                        let _ = writeln!(
                            out,
                            r#"<circle class="pt" cx="{:.2}" cy="{:.2}" r="{}" fill="{color}"/>"#,
                            sx(x),
                            sy(y),
                            s.radius
                        );
                    }
                }
            }
        }

        for (i, s) in self.series.iter().filter(|s| !s.name.is_empty()).enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = WIDTH - RIGHT + 12.0;
            let _ = writeln!(
                out,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                y - 9.0,
                escape(&s.color),
                x + 15.0,
                y,
                escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_chart_is_well_formed() {
        let mut c = Chart::new("one <point>", "ε", "acc");
        c.series.push(Series::new("ce & co", PALETTE[0], Mark::Line, vec![(0.1, 0.5)]));
        let svg = c.render();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert_eq!(svg.matches("class=\"pt\"").count(), 1);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn bars_and_empty_series_render() {
        let mut c = Chart::new("h", "x", "y");
        c.series.push(Series::new("", "#000", Mark::Bars(0.5), vec![(0.0, 3.0), (0.5, 0.0)]));
        c.series.push(Series::new("none", "#111", Mark::Points, vec![]));
        let svg = c.render();
        roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(svg.matches("class=\"bar\"").count(), 2);
    }
}
