//! SVG side artifacts for evaluation reports. Numbers in the JSON reports
//! are authoritative; these are for people.

use std::path::Path;

use plotters::prelude::*;

use crate::metrics::LinearFit;

pub type PlotResult = Result<(), Box<dyn std::error::Error>>;

/// Predicted-vs-reference scatter with the least-squares line.
pub fn scatter_with_fit(
    path: &Path,
    predicted: &[f64],
    reference: &[f64],
    fit: Option<&LinearFit>,
) -> PlotResult {
    let root = SVGBackend::new(path, (640, 560)).into_drawing_area();
    root.fill(&WHITE)?;
    let caption = match fit {
        Some(f) => format!("R² = {:.3}", f.r2),
        None => "no fit".to_string(),
    };
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(40)
        .build_cartesian_2d(0.5f64..10.5, 0.5f64..10.5)?;
    chart
        .configure_mesh()
        .x_desc("predicted")
        .y_desc("reference")
        .draw()?;
    chart.draw_series(
        predicted
            .iter()
            .zip(reference)
            .map(|(&p, &r)| Circle::new((p, r), 3, BLUE.mix(0.5).filled())),
    )?;
    if let Some(f) = fit {
        chart.draw_series(LineSeries::new(
            [1.0, 10.0].map(|x| (x, f.slope * x + f.intercept)),
            RED.stroke_width(2),
        ))?;
    }
    root.present()?;
    Ok(())
}

/// Overlaid score histograms (bins of 0.5) for the Good and Poor classes.
pub fn class_histograms(path: &Path, good: &[f64], poor: &[f64]) -> PlotResult {
    let bins = 19;
    let count = |v: &[f64]| {
        let mut c = vec![0usize; bins];
        for &s in v {
            let i = (((s.clamp(1.0, 10.0) - 1.0) / 0.5).floor() as usize).min(bins - 1);
            c[i] += 1;
        }
        c
    };
    let (g, p) = (count(good), count(poor));
    let top = g.iter().chain(&p).copied().max().unwrap_or(1).max(1);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(40)
        .build_cartesian_2d(1.0f64..10.5, 0usize..top + 1)?;
    chart
        .configure_mesh()
        .x_desc("score")
        .y_desc("count")
        .draw()?;
    for (counts, color, label) in [(&g, GREEN, "good"), (&p, RED, "poor")] {
        chart
            .draw_series(counts.iter().enumerate().map(|(i, &c)| {
                let x0 = 1.0 + i as f64 * 0.5;
                Rectangle::new([(x0, 0), (x0 + 0.5, c)], color.mix(0.4).filled())
            }))?
            .label(label)
            .legend(move |(x, y)| {
                Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.mix(0.4).filled())
            });
    }
    chart.configure_series_labels().border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}
