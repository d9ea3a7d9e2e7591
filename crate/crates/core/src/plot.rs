//! Minimal SVG line plots. Every plot is written together with a CSV holding
//! exactly the plotted numbers and a gnuplot-readable `.dat` file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Draw markers only.
    pub scatter: bool,
}

impl Series {
    pub fn line(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { name: name.into(), points, scatter: false }
    }

    pub fn scatter(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { name: name.into(), points, scatter: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 55.0); // left, right, top, bottom
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

impl Plot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            log_y: false,
            series: Vec::new(),
        }
    }

    pub fn log_log(mut self) -> Self {
        self.log_x = true;
        self.log_y = true;
        self
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    fn drawable(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.series.iter().enumerate().flat_map(move |(i, s)| {
            s.points
                .iter()
                .filter(move |(x, y)| {
                    x.is_finite() && y.is_finite() && (!self.log_x || *x > 0.0) && (!self.log_y || *y > 0.0)
                })
                .map(move |&(x, y)| (i, x, y))
        })
    }

    pub fn to_svg(&self) -> Result<String> {
        let tx = |v: f64| if self.log_x { v.log10() } else { v };
        let ty = |v: f64| if self.log_y { v.log10() } else { v };
        let pts: Vec<(usize, f64, f64)> = self.drawable().map(|(i, x, y)| (i, tx(x), ty(y))).collect();
        if pts.is_empty() {
            return Err(Error::Invalid(format!("plot {:?} has nothing to draw", self.title)));
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(_, x, y) in &pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let pad = |a: f64, b: f64| if b > a { (b - a) * 0.05 } else { 0.5 };
        let (px, py) = (pad(x0, x1), pad(y0, y1));
        let (x0, x1, y0, y1) = (x0 - px, x1 + px, y0 - py, y1 + py);
        let (ml, mr, mt, mb) = MARGIN;
        let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
        let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| mt + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            ml + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            mt + ph / 2.0,
            mt + ph / 2.0,
            escape(&self.y_label)
        );
        for (v, label) in ticks(x0, x1, self.log_x) {
            let x = sx(v);
            let _ = writeln!(svg, r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/>"#, mt + ph, mt + ph + 5.0);
            let _ = writeln!(svg, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{label}</text>"#, mt + ph + 18.0);
        }
        for (v, label) in ticks(y0, y1, self.log_y) {
            let y = sy(v);
            let _ = writeln!(svg, r#"<line x1="{}" y1="{y:.1}" x2="{ml}" y2="{y:.1}" stroke="black"/>"#, ml - 5.0);
            let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{label}</text>"#, ml - 8.0, y + 4.0);
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mine: Vec<(f64, f64)> = pts.iter().filter(|p| p.0 == i).map(|p| (sx(p.1), sy(p.2))).collect();
            if mine.is_empty() {
                continue;
            }
            if s.scatter {
                for (x, y) in &mine {
                    let _ = writeln!(svg, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
                }
            } else {
                let path: Vec<String> = mine.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    path.join(" ")
                );
            }
            let ly = mt + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{ly}">{}</text>"#,
                ml + pw - 150.0,
                ly - 9.0,
                ml + pw - 135.0,
                escape(&s.name)
            );
        }
        svg.push_str("</svg>\n");
        Ok(svg)
    }

    /// `series,x,y` rows in series order.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["series", "x", "y"])?;
        for s in &self.series {
            for (x, y) in &s.points {
                w.write_record([s.name.clone(), format!("{x:e}"), format!("{y:e}")])?;
            }
        }
        w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
    }

    /// One gnuplot data block per series, separated by two blank lines.
    pub fn to_dat(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.series.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            let _ = writeln!(out, "# {}", s.name);
            for (x, y) in &s.points {
                let _ = writeln!(out, "{x:e} {y:e}");
            }
        }
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64, log: bool) -> Vec<(f64, String)> {
    if log {
        let (a, b) = (lo.ceil() as i32, hi.floor() as i32);
        if b >= a {
            return (a..=b).map(|e| (e as f64, format!("1e{e}"))).collect();
        }
    }
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut out = Vec::new();
    let mut v = (lo / step).ceil() * step;
    while v <= hi + 1e-12 * span.abs() {
        let value = if log { 10f64.powf(v) } else { v };
        out.push((v, format!("{}", (value * 1e6).round() / 1e6)));
        v += step;
    }
    out
}

/// Writes `<stem>.svg`, `<stem>.csv` and `<stem>.dat` into `dir`.
pub fn write_plot(dir: &Path, stem: &str, plot: &Plot) -> Result<()> {
    let svg = plot.to_svg()?;
    fs::write(dir.join(format!("{stem}.csv")), plot.to_csv()?)?;
    fs::write(dir.join(format!("{stem}.dat")), plot.to_dat())?;
    fs::write(dir.join(format!("{stem}.svg")), svg)?;
    Ok(())
}
