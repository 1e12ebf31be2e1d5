//! SVG line plots of tab-separated tables.

use std::path::Path;

use anyhow::{bail, Context};
use plotters::prelude::*;

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

/// First column is x; every further column is one series. Non-numeric
/// cells (e.g. "undefined") are skipped.
fn parse_table(text: &str) -> anyhow::Result<(String, Vec<Series>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().context("empty table")?.split('\t').collect();
    if header.len() < 2 {
        bail!("table needs at least two columns");
    }
    let mut series: Vec<Series> = header[1..]
        .iter()
        .map(|h| Series {
            name: h.to_string(),
            points: Vec::new(),
        })
        .collect();
    for line in lines {
        let cells: Vec<&str> = line.split('\t').collect();
        let Ok(x) = cells[0].parse::<f64>() else { continue };
        for (s, cell) in series.iter_mut().zip(&cells[1..]) {
            if let Ok(y) = cell.parse::<f64>() {
                s.points.push((x, y));
            }
        }
    }
    Ok((header[0].to_string(), series))
}

pub fn plot_table(text: &str, out: &Path, title: &str) -> anyhow::Result<()> {
    let (x_label, series) = parse_table(text)?;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        bail!("no numeric data to plot");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.1).max(1e-3);

    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
    chart.configure_mesh().x_desc(x_label).draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

pub fn plot_table_file(table: &Path, out: &Path, title: &str) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(table).with_context(|| format!("reading {}", table.display()))?;
    plot_table(&text, out, title)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_skips_undefined() {
        let (x, series) = parse_table("k\tutt\tsys\n50\t0.5\tundefined\n100\t0.6\t0.7\n").unwrap();
        assert_eq!(x, "k");
        assert_eq!(series[0].points, vec![(50.0, 0.5), (100.0, 0.6)]);
        assert_eq!(series[1].points, vec![(100.0, 0.7)]);
    }

    #[test]
    fn writes_svg() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("p.svg");
        plot_table("layer\ta\tb\n1\t0.2\t0.4\n2\t0.3\t0.1\n", &out, "t").unwrap();
        assert!(std::fs::read_to_string(&out).unwrap().contains("<svg"));
    }
}
