//! SVG and PNG figures from the CSVs of a run directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

const FONT_PATHS: [&str; 2] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

pub type Series = Vec<(String, Vec<(f64, f64)>)>;

fn ensure_font() -> Result<()> {
    static FONT: OnceLock<bool> = OnceLock::new();
    let ok = *FONT.get_or_init(|| {
        for p in FONT_PATHS {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    });
    if ok {
        Ok(())
    } else {
        Err(anyhow!("no usable font found"))
    }
}

fn draw<DB: DrawingBackend>(root: DrawingArea<DB, plotters::coord::Shift>, title: &str, x_label: &str, y_label: &str, series: &Series) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        return Err(anyhow!("nothing to plot"));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    root.fill(&WHITE).map_err(|e| anyhow!("{e:?}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| anyhow!("{e:?}"))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| anyhow!("{e:?}"))?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| anyhow!("{e:?}"))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        if pts.len() < 50 {
            chart
                .draw_series(pts.iter().map(|p| Circle::new(*p, 3, color.filled())))
                .map_err(|e| anyhow!("{e:?}"))?;
        }
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| anyhow!("{e:?}"))?;
    }
    root.present().map_err(|e| anyhow!("{e:?}"))?;
    Ok(())
}

/// Writes `<stem>.svg` and `<stem>.png`.
pub fn line_plot(stem: &Path, title: &str, x_label: &str, y_label: &str, series: &Series) -> Result<()> {
    ensure_font()?;
    let svg = stem.with_extension("svg");
    draw(SVGBackend::new(&svg, (800, 500)).into_drawing_area(), title, x_label, y_label, series)?;
    let png = stem.with_extension("png");
    draw(BitMapBackend::new(&png, (800, 500)).into_drawing_area(), title, x_label, y_label, series)?;
    Ok(())
}

type Table = Vec<BTreeMap<String, String>>;

fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok(rows)
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row.get(key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

/// Groups rows by `by`, keeping rows that pass `keep`.
fn grouped(rows: &Table, by: &str, x: &str, y: &str, keep: impl Fn(&BTreeMap<String, String>) -> bool) -> Series {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| keep(r)) {
        let key = r.get(by).cloned().unwrap_or_default();
        groups.entry(key).or_default().push((num(r, x), num(r, y)));
    }
    groups
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, v)
        })
        .collect()
}

fn plot_one(dir: &Path, csv_name: &str, f: impl FnOnce(&Table) -> Result<()>) {
    let path = dir.join(csv_name);
    if !path.exists() {
        return;
    }
    if let Err(e) = read_table(&path).and_then(|t| f(&t)) {
        log::warn!("plot for {csv_name} skipped: {e}");
    }
}

/// Renders every figure whose source CSV exists. Failures are logged, not raised.
pub fn plot_run(dir: &Path) {
    plot_one(dir, "teacher_loss.csv", |t| {
        let s = vec![("loss".to_string(), t.iter().map(|r| (num(r, "step"), num(r, "loss"))).collect())];
        line_plot(&dir.join("teacher_loss"), "Teacher denoising loss", "step", "loss", &s)
    });
    plot_one(dir, "distill_log.csv", |t| {
        let s = vec![("loss".to_string(), t.iter().map(|r| (num(r, "step"), num(r, "loss"))).collect())];
        line_plot(&dir.join("distill_loss"), "Alignment loss", "step", "loss", &s)
    });
    plot_one(dir, "pck_sweep.csv", |t| {
        let s = grouped(t, "mode", "t", "pck_img", |_| true);
        line_plot(&dir.join("pck_sweep"), "PCK@img over timesteps", "t", "PCK_img", &s)
    });
    for task in ["depth", "seg", "knn"] {
        let name = format!("probe_{task}_sweep.csv");
        plot_one(dir, &name, |t| {
            let first_map = t.first().and_then(|r| r.get("feature_map").cloned()).unwrap_or_default();
            let metric = t.first().and_then(|r| r.get("metric_name").cloned()).unwrap_or_default();
            let s = grouped(t, "source", "t", "metric_value", |r| r.get("feature_map") == Some(&first_map));
            line_plot(
                &dir.join(format!("probe_{task}_sweep")),
                &format!("{task} probe, feature map {first_map}"),
                "t",
                &metric,
                &s,
            )
        });
    }
    plot_one(dir, "variance.csv", |t| {
        let s = vec![
            ("noise".to_string(), t.iter().map(|r| (num(r, "t"), num(r, "fraction_noise"))).collect()),
            (
                "unexplained".to_string(),
                t.iter().map(|r| (num(r, "t"), num(r, "fraction_unexplained"))).collect(),
            ),
        ];
        line_plot(&dir.join("variance"), "Explained feature variance", "t", "fraction", &s)
    });
}
