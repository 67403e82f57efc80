//! Tables and figures from evaluation records.
//!
//! Tables put one row per `(γ, SNR_sr)` and one column per scheme
//! (`DF(lambda=…)`, `PF`, …), the layout of the λ study. Figures plot PSNR
//! and SSIM against γ with one curve per scheme and S–R SNR.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::EvalRecord;
use crate::serde_db::format_db;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    fn value(self, r: &EvalRecord) -> f64 {
        match self {
            Metric::Psnr => r.psnr_db,
            Metric::Ssim => r.ssim,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        }
    }

    fn axis(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR (dB)",
            Metric::Ssim => "SSIM",
        }
    }

    fn format(self, v: f64) -> String {
        match self {
            Metric::Psnr => format!("{v:.3}"),
            Metric::Ssim => format!("{v:.4}"),
        }
    }
}

/// Total order on f64 keys that are never NaN in valid records.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Columns ordered by protocol, then λ.
fn column_key(r: &EvalRecord) -> (u8, Key, String) {
    let rank = match r.protocol.as_str() {
        "df" => 0,
        "pf" => 1,
        "af" => 2,
        "noncoop" => 3,
        _ => 4,
    };
    (rank, Key(r.lambda.unwrap_or(f64::NEG_INFINITY)), r.label())
}

/// Delimited table of `metric`; repeated cells keep the last record.
pub fn table(records: &[EvalRecord], metric: Metric) -> String {
    let columns: BTreeSet<(u8, Key, String)> = records.iter().map(column_key).collect();
    let mut rows: BTreeMap<(Key, Key), BTreeMap<String, f64>> = BTreeMap::new();
    for r in records {
        rows.entry((Key(r.gamma_db), Key(r.snr_sr_db)))
            .or_default()
            .insert(r.label(), metric.value(r));
    }
    let mut out = String::from("gamma_db,snr_sr_db");
    for (_, _, label) in &columns {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for ((gamma, sr), cells) in &rows {
        write!(out, "{},{}", format_db(gamma.0), format_db(sr.0)).expect("write to string");
        for (_, _, label) in &columns {
            out.push(',');
            if let Some(v) = cells.get(label) {
                out.push_str(&metric.format(*v));
            }
        }
        out.push('\n');
    }
    out
}

type Series = BTreeMap<(String, Key), Vec<(f64, f64)>>;

fn series(records: &[EvalRecord], metric: Metric) -> Series {
    let mut s: Series = BTreeMap::new();
    for r in records {
        let name = format!("{} SNR_sr={} dB", r.label(), format_db(r.snr_sr_db));
        s.entry((name, Key(r.snr_sr_db)))
            .or_default()
            .push((r.gamma_db, metric.value(r)));
    }
    for points in s.values_mut() {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    s
}

fn padded(lo: f64, hi: f64, fallback: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, fallback);
    }
    let pad = ((hi - lo) * 0.05).max(fallback * 0.05);
    (lo - pad, hi + pad)
}

/// Renders `metric` against γ as an SVG document.
pub fn figure_svg(records: &[EvalRecord], metric: Metric) -> Result<String> {
    let data = series(records, metric);
    let xs = data.values().flatten().map(|p| p.0);
    let ys = data.values().flatten().map(|p| p.1);
    let (x0, x1) = padded(xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max), 8.0);
    let (y0, y1) = padded(ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max), 1.0);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 480)).into_drawing_area();
        let plot_err = |e: &dyn std::fmt::Display| Error::config("plot", e.to_string());
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .x_desc("gamma (dB)")
            .y_desc(metric.axis())
            .draw()
            .map_err(|e| plot_err(&e))?;
        for (i, ((name, _), points)) in data.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| plot_err(&e))?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart
                .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| plot_err(&e))?;
        }
        if !data.is_empty() {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| plot_err(&e))?;
        }
        root.present().map_err(|e| plot_err(&e))?;
    }
    Ok(svg)
}

/// Writes `{psnr,ssim}_table.csv` and `{psnr,ssim}_vs_gamma.svg` into `dir`.
pub fn emit(records: &[EvalRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for metric in [Metric::Psnr, Metric::Ssim] {
        let csv = dir.join(format!("{}_table.csv", metric.name()));
        std::fs::write(&csv, table(records, metric))?;
        let svg = dir.join(format!("{}_vs_gamma.svg", metric.name()));
        std::fs::write(&svg, figure_svg(records, metric)?)?;
        written.extend([csv, svg]);
    }
    Ok(written)
}
