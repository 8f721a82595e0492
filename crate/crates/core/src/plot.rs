//! Small self-contained SVG charts.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error("{0}: x and y lengths differ")]
    Length(String),
    #[error("non-finite coordinate in {0}")]
    NonFinite(String),
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone)]
enum Layer {
    Line {
        label: String,
        xs: Vec<f64>,
        ys: Vec<f64>,
        color: String,
        dashed: bool,
    },
    Band {
        label: String,
        xs: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        color: String,
        opacity: f64,
    },
    Bars {
        label: String,
        edges: Vec<f64>,
        heights: Vec<f64>,
        color: String,
    },
    Points {
        label: String,
        xs: Vec<f64>,
        ys: Vec<f64>,
        color: String,
    },
}

/// A single x–y chart built from layers.
#[derive(Debug, Clone)]
pub struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    width: f64,
    height: f64,
    layers: Vec<Layer>,
}

const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".into()
        } else {
            s.to_string()
        }
    }
}

fn check(label: &str, a: &[f64], b: &[f64]) -> Result<(), PlotError> {
    if a.len() != b.len() {
        return Err(PlotError::Length(label.to_string()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(PlotError::NonFinite(label.to_string()));
    }
    Ok(())
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Chart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            width: 800.0,
            height: 480.0,
            layers: Vec::new(),
        }
    }

    fn next_color(&self) -> String {
        PALETTE[self.layers.len() % PALETTE.len()].to_string()
    }

    pub fn line(mut self, label: &str, xs: &[f64], ys: &[f64]) -> Result<Self, PlotError> {
        check(label, xs, ys)?;
        let color = self.next_color();
        self.layers.push(Layer::Line {
            label: label.into(),
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            color,
            dashed: false,
        });
        Ok(self)
    }

    pub fn dashed_line(mut self, label: &str, xs: &[f64], ys: &[f64]) -> Result<Self, PlotError> {
        check(label, xs, ys)?;
        let color = self.next_color();
        self.layers.push(Layer::Line {
            label: label.into(),
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            color,
            dashed: true,
        });
        Ok(self)
    }

    pub fn band(
        mut self,
        label: &str,
        xs: &[f64],
        lower: &[f64],
        upper: &[f64],
        opacity: f64,
    ) -> Result<Self, PlotError> {
        check(label, xs, lower)?;
        check(label, xs, upper)?;
        let color = self.next_color();
        self.layers.push(Layer::Band {
            label: label.into(),
            xs: xs.to_vec(),
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            color,
            opacity,
        });
        Ok(self)
    }

    /// Histogram bars; `edges` has one more entry than `heights`.
    pub fn bars(mut self, label: &str, edges: &[f64], heights: &[f64]) -> Result<Self, PlotError> {
        if edges.len() != heights.len() + 1 {
            return Err(PlotError::Length(label.to_string()));
        }
        check(label, &edges[1..], heights)?;
        let color = self.next_color();
        self.layers.push(Layer::Bars {
            label: label.into(),
            edges: edges.to_vec(),
            heights: heights.to_vec(),
            color,
        });
        Ok(self)
    }

    pub fn points(mut self, label: &str, xs: &[f64], ys: &[f64]) -> Result<Self, PlotError> {
        check(label, xs, ys)?;
        let color = self.next_color();
        self.layers.push(Layer::Points {
            label: label.into(),
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            color,
        });
        Ok(self)
    }

    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Line { xs: x, ys: y, .. } | Layer::Points { xs: x, ys: y, .. } => {
                    xs.extend(x);
                    ys.extend(y);
                }
                Layer::Band {
                    xs: x, lower, upper, ..
                } => {
                    xs.extend(x);
                    ys.extend(lower);
                    ys.extend(upper);
                }
                Layer::Bars { edges, heights, .. } => {
                    xs.extend(edges);
                    ys.extend(heights);
                    ys.push(0.0);
                }
            }
        }
        if xs.is_empty() || ys.is_empty() {
            return None;
        }
        let span = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                let pad = 0.03 * (hi - lo);
                (lo - pad, hi + pad)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (x0, x1) = span(&xs);
        let (y0, y1) = span(&ys);
        Some((x0, x1, y0, y1))
    }

    pub fn render(&self) -> Result<String, PlotError> {
        let (x0, x1, y0, y1) = self.bounds().ok_or(PlotError::Empty)?;
        let pw = self.width - MARGIN_L - MARGIN_R;
        let ph = self.height - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + (y1 - y) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
            w = self.width,
            h = self.height
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            num(MARGIN_L + pw / 2.0),
            escape(&self.title)
        );

        let _ = writeln!(s, r##"<g class="axis" stroke="#333" fill="none">"##);
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}"/>"#,
            num(MARGIN_L),
            num(MARGIN_T),
            num(pw),
            num(ph)
        );
        for i in 0..=5 {
            let fx = x0 + (x1 - x0) * i as f64 / 5.0;
            let fy = y0 + (y1 - y0) * i as f64 / 5.0;
            let (px, py) = (sx(fx), sy(fy));
            let bottom = MARGIN_T + ph;
            let _ = writeln!(
                s,
                r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}"/>"#,
                num(px),
                num(bottom),
                num(bottom + 5.0)
            );
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" text-anchor="middle" fill="#333" stroke="none">{}</text>"##,
                num(px),
                num(bottom + 18.0),
                tick_label(fx)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}"/>"#,
                num(MARGIN_L - 5.0),
                num(py),
                num(MARGIN_L)
            );
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" text-anchor="end" fill="#333" stroke="none">{}</text>"##,
                num(MARGIN_L - 8.0),
                num(py + 4.0),
                tick_label(fy)
            );
        }
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="middle" fill="#333" stroke="none">{}</text>"##,
            num(MARGIN_L + pw / 2.0),
            num(self.height - 10.0),
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r##"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle" fill="#333" stroke="none">{}</text>"##,
            num(MARGIN_T + ph / 2.0),
            escape(&self.y_label)
        );
        let _ = writeln!(s, "</g>");

        for layer in &self.layers {
            match layer {
                Layer::Band {
                    xs,
                    lower,
                    upper,
                    color,
                    opacity,
                    ..
                } => {
                    let mut pts: Vec<String> = xs
                        .iter()
                        .zip(upper)
                        .map(|(&x, &y)| format!("{},{}", num(sx(x)), num(sy(y))))
                        .collect();
                    pts.extend(
                        xs.iter()
                            .zip(lower)
                            .rev()
                            .map(|(&x, &y)| format!("{},{}", num(sx(x)), num(sy(y)))),
                    );
                    let _ = writeln!(
                        s,
                        r#"<polygon class="band" points="{}" fill="{}" fill-opacity="{}" stroke="none"/>"#,
                        pts.join(" "),
                        color,
                        opacity
                    );
                }
                Layer::Bars {
                    edges, heights, color, ..
                } => {
                    let _ = writeln!(
                        s,
                        r#"<g class="bars" fill="{color}" fill-opacity="0.45" stroke="{color}">"#
                    );
                    for (i, &h) in heights.iter().enumerate() {
                        let (a, b) = (sx(edges[i]), sx(edges[i + 1]));
                        let (top, base) = (sy(h), sy(0.0));
                        let _ = writeln!(
                            s,
                            r#"<rect x="{}" y="{}" width="{}" height="{}"/>"#,
                            num(a),
                            num(top.min(base)),
                            num((b - a).max(0.0)),
                            num((base - top).abs())
                        );
                    }
                    let _ = writeln!(s, "</g>");
                }
                Layer::Line {
                    xs, ys, color, dashed, ..
                } => {
                    let pts: Vec<String> = xs
                        .iter()
                        .zip(ys)
                        .map(|(&x, &y)| format!("{},{}", num(sx(x)), num(sy(y))))
                        .collect();
                    let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{}/>"#,
                        pts.join(" "),
                        color,
                        dash
                    );
                }
                Layer::Points { xs, ys, color, .. } => {
                    let _ = writeln!(
                        s,
                        r#"<g class="points" fill="{color}" fill-opacity="0.6" stroke="none">"#
                    );
                    for (&x, &y) in xs.iter().zip(ys) {
                        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="2.5"/>"#, num(sx(x)), num(sy(y)));
                    }
                    let _ = writeln!(s, "</g>");
                }
            }
        }

        let _ = writeln!(s, r#"<g class="legend">"#);
        for (i, layer) in self.layers.iter().enumerate() {
            let (label, color) = match layer {
                Layer::Line { label, color, .. }
                | Layer::Band { label, color, .. }
                | Layer::Bars { label, color, .. }
                | Layer::Points { label, color, .. } => (label, color),
            };
            let y = MARGIN_T + 12.0 + 18.0 * i as f64;
            let x = self.width - MARGIN_R + 12.0;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="12" height="12" fill="{}"/>"#,
                num(x),
                num(y - 10.0),
                color
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">{}</text>"#,
                num(x + 18.0),
                num(y),
                escape(label)
            );
        }
        let _ = writeln!(s, "</g>");
        s.push_str("</svg>\n");
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_chart_is_an_error() {
        assert_eq!(Chart::new("t", "x", "y").render(), Err(PlotError::Empty));
    }

    #[test]
    fn two_lines_and_axis() {
        let xs = [0.0, 1.0, 2.0];
        let svg = Chart::new("θ", "t", "σ")
            .line("true", &xs, &[1.0, 2.0, 3.0])
            .unwrap()
            .dashed_line("fitted", &xs, &[1.1, 1.9, 3.2])
            .unwrap()
            .render()
            .unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r#"<g class="axis""#).count(), 1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn bands_bars_points() {
        let xs = [0.0, 1.0];
        let svg = Chart::new("a & b", "x", "y")
            .band("95%", &xs, &[0.0, 0.1], &[1.0, 1.1], 0.2)
            .unwrap()
            .bars("h", &[0.0, 0.5, 1.0], &[3.0, 1.0])
            .unwrap()
            .points("qq", &xs, &xs)
            .unwrap()
            .render()
            .unwrap();
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a &amp; b"));
    }

    #[test]
    fn invalid_layers() {
        assert!(Chart::new("", "", "").line("l", &[0.0], &[]).is_err());
        assert!(Chart::new("", "", "").line("l", &[0.0], &[f64::NAN]).is_err());
        assert!(Chart::new("", "", "").bars("b", &[0.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tick_labels() {
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(1.5), "1.5");
        assert_eq!(tick_label(2.0), "2");
        assert_eq!(tick_label(1e-5), "1.00e-5");
    }
}
