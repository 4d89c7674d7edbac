//! SVG line plots of a forget-fraction sweep: one panel for forget accuracy,
//! one for retain accuracy, one series per method.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::SweepResult;
use crate::losses::Method;

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Corrupt(format!("plot rendering failed: {e}"))
}

fn render_panel(
    result: &SweepResult,
    path: &Path,
    y_label: &str,
    value: impl Fn(&crate::eval::SweepRow) -> Option<f64>,
) -> Result<()> {
    let mut methods: Vec<Method> = Vec::new();
    for r in &result.rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let x_max = result
        .forget_fractions
        .iter()
        .fold(0.0f64, |m, &f| m.max(f * 100.0))
        .max(1.0);

    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .caption(format!("{y_label} vs forget class percentage"), ("sans-serif", 18))
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..x_max, 0f64..1.0f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .disable_y_mesh()
        .x_desc("forget classes (%)")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, method) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<(f64, f64)> = result
            .rows
            .iter()
            .filter(|r| r.method == *method)
            .filter_map(|r| value(r).map(|v| (r.fraction * 100.0, v)))
            .collect();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(method.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
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

/// Writes `forget_acc.svg` and `retain_acc.svg` into `out_dir`.
pub fn render_sweep_plots(result: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let forget = out_dir.join("forget_acc.svg");
    let retain = out_dir.join("retain_acc.svg");
    render_panel(result, &forget, "forget accuracy", |r| r.forget_acc)?;
    render_panel(result, &retain, "retain accuracy", |r| Some(r.retain_acc))?;
    Ok(vec![forget, retain])
}
