//! Table, JSON and SVG writers shared by every analysis.

use std::path::Path;

use plotters::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{LinearFit, Tensor};

/// A CSV table of already-formatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest round-trip representation, so CSV output is bit-reproducible.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.headers.len() {
            return Err(Error::Shape(format!("row of {} cells for {} columns", row.len(), self.headers.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Blue for negative, white at zero, red for positive.
fn diverging(v: f64, limit: f64) -> RGBColor {
    let t = if limit > 0.0 { (v / limit).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())) as u8;
    if t >= 0.0 {
        RGBColor(255, fade(t), fade(t))
    } else {
        RGBColor(fade(t), fade(t), 255)
    }
}

fn draw_heatmap<DB: DrawingBackend>(area: &DrawingArea<DB, plotters::coord::Shift>, title: &str, m: &Tensor) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let (rows, cols) = (m.rows(), m.cols());
    let limit = m.max_abs();
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 16))
        .margin(8)
        .x_label_area_size(24)
        .y_label_area_size(28)
        .build_cartesian_2d(0..cols as i32, 0..rows as i32)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(cols.min(10))
        .y_labels(rows.min(10))
        .y_label_formatter(&|y| format!("{}", rows as i32 - 1 - y))
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series((0..rows).flat_map(|i| {
            (0..cols).map(move |j| {
                let y = (rows - 1 - i) as i32;
                Rectangle::new([(j as i32, y), (j as i32 + 1, y + 1)], diverging(m.get(i, j), limit).filled())
            })
        }))
        .map_err(plot_err)?;
    Ok(())
}

/// One heatmap per panel, laid out on a grid; row 0 is drawn at the top.
pub fn heatmap_grid(path: &Path, title: &str, panels: &[(String, Tensor)]) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let cols = (panels.len() as f64).sqrt().ceil() as usize;
    let rows = panels.len().div_ceil(cols);
    let root = SVGBackend::new(path, (320 * cols as u32, 300 * rows as u32 + 30)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let root = root.titled(title, ("sans-serif", 20)).map_err(plot_err)?;
    for (area, (name, m)) in root.split_evenly((rows, cols)).iter().zip(panels) {
        draw_heatmap(area, name, m)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

pub fn heatmap(path: &Path, title: &str, m: &Tensor) -> Result<()> {
    let root = SVGBackend::new(path, (520, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    draw_heatmap(&root, title, m)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Scatter of `points` with the fitted line; at most `MAX_SCATTER` points are drawn.
pub fn scatter_fit(path: &Path, title: &str, points: &[(f64, f64)], fit: &LinearFit) -> Result<()> {
    const MAX_SCATTER: usize = 4000;
    let stride = points.len().div_ceil(MAX_SCATTER).max(1);
    let shown: Vec<(f64, f64)> = points.iter().step_by(stride).copied().collect();
    let (x0, x1) = range_of(shown.iter().map(|p| p.0));
    let (y0, y1) = range_of(shown.iter().map(|p| p.1));
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let caption = format!("{title} (slope {:.3}, R² {:.3})", fit.slope, fit.r2);
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("x_d").y_desc("(x·OV)_d").draw().map_err(plot_err)?;
    chart
        .draw_series(shown.iter().map(|&(x, y)| Circle::new((x, y), 2, BLUE.mix(0.4).filled())))
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            [x0, x1].map(|x| (x, fit.slope * x + fit.intercept)),
            RED.stroke_width(2),
        ))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

pub fn bar_chart(path: &Path, title: &str, labels: &[String], values: &[f64]) -> Result<()> {
    let (y0, y1) = range_of(values.iter().copied().chain([0.0]));
    let root = SVGBackend::new(path, (80 + 36 * labels.len().max(4) as u32, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0..labels.len() as i32, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(labels.len())
        .x_label_formatter(&|i| labels.get(*i as usize).cloned().unwrap_or_default())
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(values.iter().enumerate().map(|(i, &v)| {
            let color = if v >= 0.0 { RED.mix(0.7) } else { BLUE.mix(0.7) };
            Rectangle::new([(i as i32, 0.0), (i as i32 + 1, v)], color.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(23, 190, 207),
];

/// Several named series sharing one x axis.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    x: &[f64],
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    let (x0, x1) = range_of(x.iter().copied());
    let (y0, y1) = range_of(series.iter().flat_map(|(_, ys)| ys.iter().copied()).filter(|v| v.is_finite()));
    let root = SVGBackend::new(path, (720, 460)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(plot_err)?;
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(
                x.iter().copied().zip(ys.iter().copied()).filter(|(_, y)| y.is_finite()),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
