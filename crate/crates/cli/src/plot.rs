//! SVG charts from metrics logs and ablation tables.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use ccnet::eval::AblationTable;
use ccnet::train::LogRecord;
use plotters::prelude::*;

const SIZE: (u32, u32) = (800, 500);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(records)
}

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    Some((lo - pad, hi + pad))
}

type Series = (String, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let (x0, x1) = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0))).unwrap_or((0.0, 1.0));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1))).unwrap_or((0.0, 1.0));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Mean of consecutive windows of `window` points.
fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    points
        .chunks(window.max(1))
        .map(|c| {
            let n = c.len() as f64;
            (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect()
}

/// `loss.svg` (windowed mean of the total loss) and `psnr.svg` (batch PSNR,
/// plus training-set PSNR where evaluated) for every named log.
pub fn training_curves(logs: &[(String, Vec<LogRecord>)], out: &Path, window: usize) -> Result<Vec<PathBuf>> {
    let loss: Vec<Series> = logs
        .iter()
        .map(|(name, log)| {
            let points: Vec<_> = log.iter().map(|r| (r.iteration as f64, r.total)).collect();
            (name.clone(), smooth(&points, window))
        })
        .collect();
    let mut psnr: Vec<Series> = Vec::new();
    for (name, log) in logs {
        let batch: Vec<_> = log.iter().map(|r| (r.iteration as f64, r.psnr)).collect();
        psnr.push((format!("{name} batch"), smooth(&batch, window)));
        let eval: Vec<_> = log
            .iter()
            .filter_map(|r| r.eval_psnr.map(|p| (r.iteration as f64, p)))
            .collect();
        if !eval.is_empty() {
            psnr.push((format!("{name} train set"), eval));
        }
    }
    let loss_path = out.join("loss.svg");
    let psnr_path = out.join("psnr.svg");
    line_chart(&loss_path, "Training loss", "L_s + 0.1 L_f (windowed mean)", &loss)?;
    line_chart(&psnr_path, "Training PSNR", "PSNR (dB)", &psnr)?;
    Ok(vec![loss_path, psnr_path])
}

fn scatter(path: &Path, title: &str, x_label: &str, points: &[(String, f64, f64)]) -> Result<()> {
    let (x0, x1) = bounds(points.iter().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let (y0, y1) = bounds(points.iter().map(|p| p.2)).unwrap_or((0.0, 1.0));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("PSNR (dB)")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(points.iter().enumerate().map(|(i, (name, x, y))| {
            let color = PALETTE[i % PALETTE.len()];
            EmptyElement::at((*x, *y))
                + Circle::new((0, 0), 6, color.filled())
                + Text::new(name.clone(), (8, -14), ("sans-serif", 14))
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// `params_vs_psnr.svg` and `macs_vs_psnr.svg` from an ablation table.
pub fn ablation_charts(table: &AblationTable, out: &Path) -> Result<Vec<PathBuf>> {
    let params: Vec<_> = table
        .rows
        .iter()
        .map(|r| (r.name.clone(), r.params as f64 / 1e3, r.psnr))
        .collect();
    let macs: Vec<_> = table
        .rows
        .iter()
        .map(|r| (r.name.clone(), r.macs as f64 / 1e6, r.psnr))
        .collect();
    let params_path = out.join("params_vs_psnr.svg");
    let macs_path = out.join("macs_vs_psnr.svg");
    scatter(&params_path, "Parameters vs PSNR", "parameters (K)", &params)?;
    scatter(&macs_path, "MACs vs PSNR", "MACs per patch (M)", &macs)?;
    Ok(vec![params_path, macs_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_average_points() {
        let pts = [(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)];
        assert_eq!(smooth(&pts, 2), vec![(0.5, 2.0), (2.0, 5.0)]);
    }

    #[test]
    fn bounds_skip_non_finite_values() {
        let (lo, hi) = bounds([1.0, f64::INFINITY, 3.0].into_iter()).unwrap();
        assert!(lo < 1.0 && hi > 3.0 && hi.is_finite());
        assert!(bounds(std::iter::empty()).is_none());
    }
}
