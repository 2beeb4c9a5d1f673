//! Deterministic SVG line and scatter charts rendered straight from CSV.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf",
];

/// Color for a model tag: `full` and `k1..k9` have fixed slots, any other
/// label falls back to its position among the chart's groups.
pub fn color_for(tag: &str, fallback: usize) -> &'static str {
    if tag == "full" {
        return "#000000";
    }
    let digits = tag.strip_prefix('k').unwrap_or(tag);
    match digits.parse::<usize>() {
        Ok(k) if (1..=PALETTE.len()).contains(&k) => PALETTE[k - 1],
        _ => PALETTE[fallback % PALETTE.len()],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChartKind {
    /// One polyline per group, points sorted by x.
    Lines,
    /// Markers plus a polyline per group in row order.
    ScatterPath,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChartSpec {
    pub title: String,
    pub x: String,
    pub y: String,
    pub group: String,
    pub x_label: String,
    pub y_label: String,
    pub kind: ChartKind,
    pub log_x: bool,
    pub log_y: bool,
    /// Keep only rows whose value in this numeric column equals its maximum.
    pub last_only: Option<String>,
}

impl ChartSpec {
    pub fn lines(title: &str, x: &str, y: &str, group: &str) -> Self {
        ChartSpec {
            title: title.into(),
            x: x.into(),
            y: y.into(),
            group: group.into(),
            x_label: x.into(),
            y_label: y.into(),
            kind: ChartKind::Lines,
            log_x: false,
            log_y: false,
            last_only: None,
        }
    }
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn parse_cell(col: &str, v: &str, line: usize) -> Result<Option<f64>> {
    if v.is_empty() {
        return Ok(None);
    }
    v.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Chart(format!("row {line}: column {col:?} is not numeric: {v:?}")))
}

/// Renders `spec` from CSV text. Non-numeric x values are treated as
/// categories in first-appearance order.
pub fn render_chart(csv_text: &str, spec: &ChartSpec) -> Result<String> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(csv_text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Chart(e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Chart(format!("CSV has no column {name:?} (columns: {:?})", headers.iter().collect::<Vec<_>>())))
    };
    let (xi, yi, gi) = (col(&spec.x)?, col(&spec.y)?, col(&spec.group)?);
    let li = spec.last_only.as_deref().map(col).transpose()?;
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Chart(e.to_string()))?;
        rows.push((rec[xi].to_string(), rec[yi].to_string(), rec[gi].to_string(), li.map(|i| rec[i].to_string()), n + 2));
    }
    if let Some(i) = li {
        let name = &headers[i];
        let mut best = f64::NEG_INFINITY;
        for r in &rows {
            if let Some(v) = parse_cell(name, r.3.as_deref().unwrap_or(""), r.4)? {
                best = best.max(v);
            }
        }
        rows.retain(|r| r.3.as_deref().and_then(|v| v.parse::<f64>().ok()) == Some(best));
    }
    let categorical = rows.iter().any(|r| !r.0.is_empty() && r.0.parse::<f64>().is_err());
    let mut categories: Vec<String> = Vec::new();
    let mut series: Vec<Series> = Vec::new();
    for (x, y, g, _, line) in rows {
        let xv = if categorical {
            let idx = categories.iter().position(|c| *c == x).unwrap_or_else(|| {
                categories.push(x.clone());
                categories.len() - 1
            });
            Some(idx as f64)
        } else {
            parse_cell(&spec.x, &x, line)?
        };
        let yv = parse_cell(&spec.y, &y, line)?;
        let (Some(xv), Some(yv)) = (xv, yv) else { continue };
        if (spec.log_x && xv <= 0.0) || (spec.log_y && yv <= 0.0) || !xv.is_finite() || !yv.is_finite() {
            continue;
        }
        match series.iter_mut().find(|s| s.name == g) {
            Some(s) => s.points.push((xv, yv)),
            None => series.push(Series { name: g, points: vec![(xv, yv)] }),
        }
    }
    if spec.kind == ChartKind::Lines {
        for s in &mut series {
            s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
    }
    Ok(draw(spec, &series, &categories))
}

pub fn emit_chart(csv_path: &Path, spec: &ChartSpec, svg_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let svg = render_chart(&text, spec)?;
    std::fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if lo.abs() > 1e-12 { lo.abs() * 0.05 } else { 0.5 };
            lo -= pad;
            hi += pad;
        } else if !log {
            let pad = (hi - lo) * 0.04;
            lo -= pad;
            hi += pad;
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil();
        }
        Axis { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    /// Tick positions in data units with their labels.
    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let step = ((self.hi - self.lo) / 6.0).ceil().max(1.0);
            let mut out = Vec::new();
            let mut e = self.lo;
            while e <= self.hi + 1e-9 {
                out.push((10f64.powf(e), format!("1e{}", e as i64)));
                e += step;
            }
            return out;
        }
        let raw = (self.hi - self.lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| *s >= raw)
            .unwrap_or(10.0 * mag);
        let decimals = (-step.log10().floor()).max(0.0) as usize;
        let mut out = Vec::new();
        let mut t = (self.lo / step).ceil() * step;
        while t <= self.hi + step * 1e-9 {
            let label = format!("{:.*}", decimals, if t.abs() < step * 1e-9 { 0.0 } else { t });
            out.push((t, label));
            t += step;
        }
        out
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn draw(spec: &ChartSpec, series: &[Series], categories: &[String]) -> String {
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let xs = Axis::new(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), spec.log_x);
    let ys = Axis::new(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), spec.log_y);
    let px = |v: f64| LEFT + xs.frac(v) * pw;
    let py = |v: f64| TOP + (1.0 - ys.frac(v)) * ph;

    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
    );
    let _ = writeln!(o, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        o,
        r#"<text x="{:.1}" y="30" font-size="18" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        esc(&spec.title)
    );
    let _ = writeln!(
        o,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );

    let x_ticks: Vec<(f64, String)> = if categories.is_empty() {
        xs.ticks()
    } else {
        categories.iter().enumerate().map(|(i, c)| (i as f64, c.clone())).collect()
    };
    for (v, label) in x_ticks {
        let x = px(v);
        if !(LEFT - 0.5..=LEFT + pw + 0.5).contains(&x) {
            continue;
        }
        let _ = writeln!(
            o,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 20.0,
            esc(&label)
        );
    }
    for (v, label) in ys.ticks() {
        let y = py(v);
        if !(TOP - 0.5..=TOP + ph + 0.5).contains(&y) {
            continue;
        }
        let _ = writeln!(
            o,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{}</text>"##,
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0,
            esc(&label)
        );
    }
    let _ = writeln!(
        o,
        r#"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 20.0,
        esc(&spec.x_label)
    );
    let _ = writeln!(
        o,
        r#"<text x="20" y="{:.1}" font-size="14" text-anchor="middle" transform="rotate(-90 20 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(&spec.y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = color_for(&s.name, i);
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        if pts.len() > 1 {
            let _ = writeln!(
                o,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        if spec.kind == ChartKind::ScatterPath || pts.len() == 1 {
            for &(x, y) in &s.points {
                let _ = writeln!(o, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
            }
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            o,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="3"/><text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            esc(&s.name)
        );
    }
    o.push_str("</svg>\n");
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "step,model_tag,cos_param,cos_func\n0,k1,,\n10,k1,0.5,0.9\n0,k2,,\n10,k2,0.6,0.95\n20,k1,0.4,0.8\n";

    #[test]
    fn lines_per_group() {
        let svg = render_chart(CSV, &ChartSpec::lines("cos", "step", "cos_func", "model_tag")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches(r#"<circle"#).count(), 1);
        assert!(svg.contains(r#"width="800""#));
        assert_eq!(svg, render_chart(CSV, &ChartSpec::lines("cos", "step", "cos_func", "model_tag")).unwrap());
    }

    #[test]
    fn schema_mismatch() {
        let err = render_chart(CSV, &ChartSpec::lines("x", "step", "nope", "model_tag")).unwrap_err();
        assert!(matches!(err, Error::Chart(_)));
        let bad = "step,model_tag,cos_func\n1,k1,abc\n";
        assert!(render_chart(bad, &ChartSpec::lines("x", "step", "cos_func", "model_tag")).is_err());
    }

    #[test]
    fn palette_is_keyed_by_tag() {
        assert_eq!(color_for("k2", 7), PALETTE[1]);
        assert_eq!(color_for("2", 0), PALETTE[1]);
        assert_eq!(color_for("full", 3), "#000000");
        assert_eq!(color_for("other", 3), PALETTE[3]);
    }

    #[test]
    fn categorical_x_and_last_only() {
        let csv = "step,model_tag,layer_name,distance\n0,full,layer1,0\n5,full,layer1,1\n5,full,layer2,2\n";
        let mut spec = ChartSpec::lines("m", "layer_name", "distance", "model_tag");
        spec.last_only = Some("step".into());
        let svg = render_chart(csv, &spec).unwrap();
        assert!(svg.contains(">layer2<"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
