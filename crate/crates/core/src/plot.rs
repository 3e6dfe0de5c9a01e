//! Static SVG plots: reward/loss curves and phase portraits.
//!
//! The output is plain standalone SVG text with axes, tick labels, and a
//! small palette — enough to render training histories and trajectory
//! bundles without pulling in a plotting stack. Writers are deterministic:
//! the same data produces the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: &str, points: Vec<(f64, f64)>) -> Series {
        Series {
            label: label.to_string(),
            points,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlotConfig {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: u32,
    pub height: u32,
}

impl PlotConfig {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> PlotConfig {
        PlotConfig {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            width: 640,
            height: 480,
        }
    }
}

const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 18.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Axis range padded away from degenerate width.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Round tick positions covering [lo, hi]: a step of 1, 2, or 5 times a
/// power of ten, chosen so 4-8 ticks land in range.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    } * mag;
    let first = (lo / step).ceil() * step;
    let mut out = Vec::new();
    let mut t = first;
    while t <= hi + 1e-9 * span {
        // Snap values like 0.30000000000000004 back to the grid.
        let snapped = (t / step).round() * step;
        out.push(if snapped == 0.0 { 0.0 } else { snapped });
        t += step;
    }
    out
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.1e}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let px = MARGIN_LEFT
            + (x - self.x_lo) / (self.x_hi - self.x_lo)
                * (self.width - MARGIN_LEFT - MARGIN_RIGHT);
        let py = self.height
            - MARGIN_BOTTOM
            - (y - self.y_lo) / (self.y_hi - self.y_lo)
                * (self.height - MARGIN_TOP - MARGIN_BOTTOM);
        (px, py)
    }
}

fn data_frame(config: &PlotConfig, series: &[Series]) -> Result<Frame> {
    let mut pts = series.iter().flat_map(|s| s.points.iter());
    let first = *pts.next().ok_or_else(|| {
        Error::Invalid("a plot needs at least one data point".into())
    })?;
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (first.0, first.0, first.1, first.1);
    for &(x, y) in series.iter().flat_map(|s| s.points.iter()) {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::Invalid("plot data contains non-finite values".into()));
        }
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let (x_lo, x_hi) = padded(x_lo, x_hi);
    let (y_lo, y_hi) = padded(y_lo, y_hi);
    Ok(Frame {
        x_lo,
        x_hi,
        y_lo,
        y_hi,
        width: config.width as f64,
        height: config.height as f64,
    })
}

fn render(config: &PlotConfig, series: &[Series], markers: bool, legend: bool) -> Result<String> {
    let frame = data_frame(config, series)?;
    let (w, h) = (frame.width, frame.height);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        w / 2.0,
        xml_escape(&config.title)
    );

    // Gridlines and tick labels.
    let (plot_left, plot_right) = (MARGIN_LEFT, w - MARGIN_RIGHT);
    let (plot_top, plot_bottom) = (MARGIN_TOP, h - MARGIN_BOTTOM);
    for t in ticks(frame.x_lo, frame.x_hi) {
        let (px, _) = frame.map((t, frame.y_lo));
        let _ = writeln!(
            svg,
            "<line x1=\"{px:.1}\" y1=\"{plot_top:.1}\" x2=\"{px:.1}\" y2=\"{plot_bottom:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            plot_bottom + 16.0,
            tick_label(t)
        );
    }
    for t in ticks(frame.y_lo, frame.y_hi) {
        let (_, py) = frame.map((frame.x_lo, t));
        let _ = writeln!(
            svg,
            "<line x1=\"{plot_left:.1}\" y1=\"{py:.1}\" x2=\"{plot_right:.1}\" y2=\"{py:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{}</text>",
            plot_left - 6.0,
            py + 4.0,
            tick_label(t)
        );
    }
    // Axes frame.
    let _ = writeln!(
        svg,
        "<rect x=\"{plot_left:.1}\" y=\"{plot_top:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>",
        plot_right - plot_left,
        plot_bottom - plot_top
    );
    // Axis labels.
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        (plot_left + plot_right) / 2.0,
        h - 10.0,
        xml_escape(&config.x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" \
         transform=\"rotate(-90 14 {:.1})\">{}</text>",
        (plot_top + plot_bottom) / 2.0,
        (plot_top + plot_bottom) / 2.0,
        xml_escape(&config.y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: String = s
            .points
            .iter()
            .map(|&p| {
                let (px, py) = frame.map(p);
                format!("{px:.2},{py:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            svg,
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
        );
        if markers {
            if let Some(&start) = s.points.first() {
                let (px, py) = frame.map(start);
                let _ = writeln!(
                    svg,
                    "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2.5\" fill=\"{color}\"/>"
                );
            }
        }
    }

    if legend {
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let y = plot_top + 14.0 + 16.0 * i as f64;
            let x = plot_left + 10.0;
            let _ = writeln!(
                svg,
                "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
                 stroke=\"{color}\" stroke-width=\"2\"/>",
                x + 18.0
            );
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>",
                x + 24.0,
                y + 4.0,
                xml_escape(&s.label)
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Render labeled series as a line chart with a legend.
pub fn line_plot(config: &PlotConfig, series: &[Series]) -> Result<String> {
    render(config, series, false, series.len() > 1)
}

/// Render (x1, x2) trajectories as a phase portrait; each trajectory gets
/// a dot at its initial state.
pub fn phase_portrait(config: &PlotConfig, trajectories: &[Vec<(f64, f64)>]) -> Result<String> {
    let series: Vec<Series> = trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| Series::new(&format!("trajectory {i}"), t.clone()))
        .collect();
    render(config, &series, true, false)
}

pub fn save_line_plot(path: &Path, config: &PlotConfig, series: &[Series]) -> Result<()> {
    fs::write(path, line_plot(config, series)?)?;
    Ok(())
}

pub fn save_phase_portrait(
    path: &Path,
    config: &PlotConfig,
    trajectories: &[Vec<(f64, f64)>],
) -> Result<()> {
    fs::write(path, phase_portrait(config, trajectories)?)?;
    Ok(())
}
