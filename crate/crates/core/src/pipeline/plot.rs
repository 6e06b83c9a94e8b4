//! PNG figures. The bitmap backend is built without a font engine, so the
//! figures carry no text: panels and series colours are fixed and listed in
//! the function docs.

use std::path::Path;

use plotters::prelude::*;

use super::train::read_metrics;
use super::{EvalReport, PipelineError};

fn perr(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Plot(e.to_string())
}

const SERIES: [RGBColor; 5] = [BLACK, RED, BLUE, GREEN, MAGENTA];

/// Loss curves from a metrics log, as log10 values against iteration.
///
/// Top panel: photometric loss (black) and batch total (red). Bottom panel:
/// divergence (red), momentum (blue), ortho (green) and trans (magenta) on
/// query iterations.
pub fn plot_metrics(metrics: &Path, out: &Path) -> Result<usize, PipelineError> {
    let recs = read_metrics(metrics)?;
    if recs.is_empty() {
        return Err(PipelineError::Plot(format!(
            "{} has no records",
            metrics.display()
        )));
    }
    let log = |v: f64| v.max(1e-12).log10();
    let top: Vec<Vec<(f64, f64)>> = vec![
        recs.iter()
            .map(|r| (r.iteration as f64, log(r.photometric)))
            .collect(),
        recs.iter()
            .map(|r| (r.iteration as f64, log(r.total)))
            .collect(),
    ];
    let pick = |f: fn(&super::MetricsRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        recs.iter()
            .filter_map(|r| f(r).map(|v| (r.iteration as f64, log(v))))
            .collect()
    };
    let bottom = vec![
        Vec::new(),
        pick(|r| r.divergence),
        pick(|r| r.momentum),
        pick(|r| r.ortho),
        pick(|r| r.trans),
    ];

    let (w, h) = (900, 700);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(perr)?;
        let panels = root.split_evenly((2, 1));
        draw_lines(&panels[0], &top)?;
        draw_lines(&panels[1], &bottom)?;
        root.present().map_err(perr)?;
    }
    save_rgb(buf, w, h, out)?;
    Ok(recs.len())
}

fn draw_lines(
    area: &DrawingArea<BitMapBackend<'_>, plotters::coord::Shift>,
    series: &[Vec<(f64, f64)>],
) -> Result<(), PipelineError> {
    let pts = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Ok(());
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let mut chart = ChartBuilder::on(area)
        .margin(20)
        .build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 - pad)..(y1 + pad))
        .map_err(perr)?;
    chart
        .configure_mesh()
        .x_labels(0)
        .y_labels(0)
        .draw()
        .map_err(perr)?;
    for (s, color) in series.iter().zip(SERIES) {
        if !s.is_empty() {
            chart
                .draw_series(LineSeries::new(s.iter().copied(), color))
                .map_err(perr)?;
        }
    }
    Ok(())
}

/// Grouped bars: one group per report, PSNR (left panel, black) and SSIM
/// (right panel, blue); reports are drawn in the given order.
pub fn plot_eval(reports: &[EvalReport], out: &Path) -> Result<(), PipelineError> {
    if reports.is_empty() {
        return Err(PipelineError::Plot("no reports".into()));
    }
    let (w, h) = (900, 400);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(perr)?;
        let panels = root.split_evenly((1, 2));
        let psnr: Vec<f64> = reports.iter().map(|r| r.mean_psnr).collect();
        let ssim: Vec<f64> = reports.iter().map(|r| r.mean_ssim).collect();
        for (area, (values, color, top)) in
            panels.iter().zip([(psnr, BLACK, 40.0), (ssim, BLUE, 1.0)])
        {
            let n = values.len() as f64;
            let top = values.iter().copied().fold(top, f64::max);
            let mut chart = ChartBuilder::on(area)
                .margin(20)
                .build_cartesian_2d(0.0..n, 0.0..top)
                .map_err(perr)?;
            chart
                .configure_mesh()
                .x_labels(0)
                .y_labels(0)
                .draw()
                .map_err(perr)?;
            chart
                .draw_series(values.iter().enumerate().map(|(i, &v)| {
                    Rectangle::new(
                        [(i as f64 + 0.15, 0.0), (i as f64 + 0.85, v)],
                        color.filled(),
                    )
                }))
                .map_err(perr)?;
        }
        root.present().map_err(perr)?;
    }
    save_rgb(buf, w, h, out)
}

fn save_rgb(buf: Vec<u8>, w: u32, h: u32, out: &Path) -> Result<(), PipelineError> {
    let img = image::RgbImage::from_raw(w, h, buf).ok_or_else(|| perr("buffer size"))?;
    img.save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| super::io_err(out, e))
}
