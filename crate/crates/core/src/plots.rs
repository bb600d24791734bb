//! Static SVG charts for reports.

use std::path::Path;

use plotters::prelude::*;

use crate::dataprep::write_atomic;
use crate::error::{Error, Result};

const SIZE: (u32, u32) = (720, 480);
const PALETTE: [RGBColor; 6] = [
    RGBColor(200, 40, 40),
    RGBColor(40, 80, 200),
    RGBColor(30, 150, 70),
    RGBColor(220, 140, 20),
    RGBColor(130, 60, 170),
    RGBColor(90, 90, 90),
];

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Validation(format!("plot: {e:?}"))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Writes `svg` to `path`, tagging it with the run's config hash.
pub fn save_svg(path: &Path, svg: &str, config_hash: Option<&str>) -> Result<()> {
    let body = match config_hash {
        Some(h) => match svg.find("?>") {
            Some(i) => format!("{}\n<!-- config_hash: {h} -->{}", &svg[..i + 2], &svg[i + 2..]),
            None => format!("<!-- config_hash: {h} -->\n{svg}"),
        },
        None => svg.to_string(),
    };
    write_atomic(path, body.as_bytes())
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Multi-series line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let xs = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let ys = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(plot_err)?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(s.name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Scatter of observed against target with the identity line, one colour
/// per group.
pub fn scatter_identity(title: &str, x_label: &str, y_label: &str, groups: &[Series]) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let r = bounds(groups.iter().flat_map(|s| s.points.iter().flat_map(|p| [p.0, p.1])));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(r.0..r.1, r.0..r.1)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(plot_err)?;
        chart.draw_series(LineSeries::new([(r.0, r.0), (r.1, r.1)], BLACK.mix(0.5))).map_err(plot_err)?;
        for (i, s) in groups.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?
                .label(s.name)
                .legend(move |(x, y)| Circle::new((x + 8, y), 3, color.filled()));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Overlaid frequency polygons of several samples on shared bins.
pub fn histogram_overlay(title: &str, x_label: &str, samples: &[(&str, &[f64])], bins: usize) -> Result<String> {
    let (lo, hi) = bounds(samples.iter().flat_map(|s| s.1.iter().copied()));
    let width = (hi - lo) / bins as f64;
    let series: Vec<Series> = samples
        .iter()
        .map(|(name, v)| {
            let mut counts = vec![0usize; bins];
            for &x in v.iter().filter(|x| x.is_finite()) {
                counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
            let n = v.len().max(1) as f64;
            Series {
                name,
                points: counts.iter().enumerate().map(|(i, &c)| (lo + width * (i as f64 + 0.5), c as f64 / n)).collect(),
            }
        })
        .collect();
    line_chart(title, x_label, "fraction", &series)
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(&str, Vec<f64>)]) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let top = series.iter().flat_map(|s| s.1.iter().copied()).filter(|v| v.is_finite()).fold(0.0, f64::max);
        let top = if top > 0.0 { top * 1.1 } else { 1.0 };
        let n = categories.len() as f64;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(0.0..n, 0.0..top)
            .map_err(plot_err)?;
        let cats = categories.to_vec();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(categories.len() * 2 + 1)
            .x_label_formatter(&move |x| {
                let i = x.floor() as usize;
                if (x - i as f64 - 0.5).abs() < 0.01 && i < cats.len() {
                    cats[i].clone()
                } else {
                    String::new()
                }
            })
            .y_desc(y_label)
            .draw()
            .map_err(plot_err)?;
        let k = series.len() as f64;
        for (j, (name, vals)) in series.iter().enumerate() {
            let color = PALETTE[j % PALETTE.len()];
            chart
                .draw_series(vals.iter().enumerate().map(|(i, &v)| {
                    let x0 = i as f64 + 0.1 + 0.8 * j as f64 / k;
                    Rectangle::new([(x0, 0.0), (x0 + 0.8 / k, v)], color.filled())
                }))
                .map_err(plot_err)?
                .label(*name)
                .legend(move |(x, y)| Rectangle::new([(x, y - 4), (x + 10, y + 4)], color.filled()));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_render() {
        let s = [Series { name: "a", points: vec![(0.0, 1.0), (1.0, 2.0)] }];
        let svg = line_chart("t", "x", "y", &s).unwrap();
        assert!(svg.contains("<svg"));
        assert!(scatter_identity("t", "x", "y", &s).unwrap().contains("<circle"));
        assert!(histogram_overlay("h", "x", &[("a", &[0.1, 0.2, 0.2]), ("b", &[0.3])], 5).unwrap().contains("<svg"));
        assert!(bar_chart("b", "E", &["d0".into(), "d1".into()], &[("real", vec![1.0, 2.0]), ("gen", vec![0.5, 0.1])])
            .unwrap()
            .contains("<rect"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.svg");
        save_svg(&p, &svg, Some("abc")).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("config_hash: abc"));
    }
}
