//! Metrics CSV and SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use super::EvalError;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub frames: u64,
    pub wall_seconds: f64,
    pub td_loss: f64,
    pub disc_loss: f64,
    pub mean_reward: f64,
    pub achievement_overall: f64,
    pub achievement_dims: Vec<f64>,
}

pub fn metrics_header(dims: usize) -> String {
    let mut h = String::from("frames,wall_seconds,td_loss,disc_loss,mean_reward,achievement_overall");
    for d in 0..dims {
        let _ = write!(h, ",achievement_dim_{d}");
    }
    h
}

impl MetricsRow {
    /// One CSV line; floats use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.frames, self.wall_seconds, self.td_loss, self.disc_loss, self.mean_reward, self.achievement_overall
        );
        for v in &self.achievement_dims {
            let _ = write!(s, ",{v}");
        }
        s
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow]) -> Result<String, EvalError> {
    let first = rows.first().ok_or(EvalError::EmptyReport)?;
    let mut out = metrics_header(first.achievement_dims.len());
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, EvalError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(EvalError::Metrics("empty file".into()))?;
    let cols = header.split(',').count();
    if cols < 6 || header != metrics_header(cols - 6) {
        return Err(EvalError::Metrics(format!("unexpected header `{header}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            let err = |what: &str| EvalError::Metrics(format!("row {}: {what}", i + 1));
            if fields.len() != cols {
                return Err(err("wrong field count"));
            }
            let f = |j: usize| fields[j].parse::<f64>().map_err(|_| err(fields[j]));
            Ok(MetricsRow {
                frames: fields[0].parse().map_err(|_| err(fields[0]))?,
                wall_seconds: f(1)?,
                td_loss: f(2)?,
                disc_loss: f(3)?,
                mean_reward: f(4)?,
                achievement_overall: f(5)?,
                achievement_dims: (6..cols).map(f).collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overall achievement against frames, one polyline per named series.
pub fn learning_curve_svg(series: &[(String, Vec<MetricsRow>)]) -> Result<String, EvalError> {
    if series.iter().all(|(_, rows)| rows.is_empty()) {
        return Err(EvalError::EmptyReport);
    }
    let max_frames = series
        .iter()
        .flat_map(|(_, r)| r.iter().map(|m| m.frames))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let x = |f: u64| MARGIN + pw * f as f64 / max_frames;
    let y = |v: f64| MARGIN + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{b}\" stroke=\"black\"/>",
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{tick}</text>",
            MARGIN - 6.0,
            y(tick) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">frames (max {})</text>",
        WIDTH / 2.0,
        HEIGHT - 15.0,
        max_frames
    );
    let _ = writeln!(
        s,
        "<text x=\"15\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">goals achieved</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (i, (name, rows)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.frames), y(r.achievement_overall)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            WIDTH - MARGIN + 4.0 - 120.0,
            MARGIN + 16.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn shade(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let c = |lo: f64, hi: f64| (lo + (hi - lo) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(247.0, 8.0), c(251.0, 48.0), c(255.0, 107.0))
}

/// One row per controllable dimension plus the conjunction, one cell per
/// evaluation point, shaded by achieved fraction.
pub fn heat_strip_svg(rows: &[MetricsRow]) -> Result<String, EvalError> {
    let first = rows.first().ok_or(EvalError::EmptyReport)?;
    let dims = first.achievement_dims.len();
    let (cell_w, cell_h, label_w) = (24.0, 24.0, 90.0);
    let w = label_w + cell_w * rows.len() as f64 + 10.0;
    let h = cell_h * (dims + 1) as f64 + 30.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let labels: Vec<String> = (0..dims)
        .map(|d| format!("dim {d}"))
        .chain(std::iter::once("all".to_string()))
        .collect();
    for (ri, label) in labels.iter().enumerate() {
        let yy = 10.0 + cell_h * ri as f64;
        let _ = writeln!(
            s,
            "<text x=\"4\" y=\"{}\" font-size=\"12\">{label}</text>",
            yy + cell_h * 0.65
        );
        for (ci, r) in rows.iter().enumerate() {
            let v = if ri < dims {
                r.achievement_dims.get(ri).copied().unwrap_or(0.0)
            } else {
                r.achievement_overall
            };
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{yy}\" width=\"{cell_w}\" height=\"{cell_h}\" fill=\"{}\"><title>{} frames: {v}</title></rect>",
                label_w + cell_w * ci as f64,
                shade(v),
                r.frames
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `metrics.csv`, `curve.svg` and `heat.svg` into `dir`.
pub fn emit_report(name: &str, rows: &[MetricsRow], dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), write_metrics_csv(rows)?)?;
    std::fs::write(
        dir.join("curve.svg"),
        learning_curve_svg(&[(name.to_string(), rows.to_vec())])?,
    )?;
    std::fs::write(dir.join("heat.svg"), heat_strip_svg(rows)?)?;
    Ok(())
}
