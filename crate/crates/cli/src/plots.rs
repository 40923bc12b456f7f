//! Deterministic SVG rendering from run artifacts. No plotting dependency:
//! the files are assembled from rects and polylines with fixed-precision
//! coordinates, so re-rendering the same CSV is byte-identical.

use std::path::{Path, PathBuf};

use crate::formats::write_atomic;
use crate::runner::{AlphaHistRow, TraceRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_L: f64 = 50.0;
const MARGIN_R: f64 = 14.0;
const MARGIN_T: f64 = 26.0;
const MARGIN_B: f64 = 40.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.2}\" y=\"16\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axis_label_x(text: &str) -> String {
    format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"middle\">{text}</text>\n",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        HEIGHT - 8.0
    )
}

fn axis_label_y(text: &str) -> String {
    let x = 14.0;
    let y = MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0;
    format!(
        "<text x=\"{x:.2}\" y=\"{y:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"middle\" transform=\"rotate(-90 {x:.2} {y:.2})\">{text}</text>\n"
    )
}

/// Heatmap of the alpha_vv distribution against training epoch for one
/// layer: x = traced epoch, y = histogram bin, shade = node count.
pub fn render_alpha_heatmap(rows: &[AlphaHistRow], layer: usize, total_nodes: usize) -> String {
    let mut epochs: Vec<usize> = rows
        .iter()
        .filter(|r| r.layer == layer)
        .map(|r| r.epoch)
        .collect();
    epochs.sort_unstable();
    epochs.dedup();
    let bins: Vec<(f64, f64)> = {
        let mut b: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.layer == layer)
            .map(|r| (r.bin_lo, r.bin_hi))
            .collect();
        b.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite bins"));
        b.dedup_by(|a, b| a.0 == b.0);
        b
    };
    let mut svg = svg_open(&format!("alpha_vv distribution, layer {layer}"));
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let cell_w = plot_w / epochs.len().max(1) as f64;
    let cell_h = plot_h / bins.len().max(1) as f64;
    for (xi, &epoch) in epochs.iter().enumerate() {
        for (yi, &(lo, hi)) in bins.iter().enumerate() {
            let count = rows
                .iter()
                .find(|r| r.layer == layer && r.epoch == epoch && r.bin_lo == lo)
                .map(|r| r.count)
                .unwrap_or(0);
            let frac = if total_nodes == 0 {
                0.0
            } else {
                count as f64 / total_nodes as f64
            };
            // White through dark blue.
            let level = (255.0 * (1.0 - frac)).round() as u8;
            let x = MARGIN_L + xi as f64 * cell_w;
            // bin_lo = 0 at the bottom.
            let y = MARGIN_T + plot_h - (yi + 1) as f64 * cell_h;
            svg.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                 fill=\"rgb({level},{level},255)\"><title>epoch {epoch} bin [{lo:.2},{hi:.2}) \
                 count {count}</title></rect>\n",
                cell_w, cell_h
            ));
        }
    }
    // Tick labels: first and last epoch, bin extremes.
    if let (Some(first), Some(last)) = (epochs.first(), epochs.last()) {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{first}</text>\n",
            MARGIN_L,
            HEIGHT - MARGIN_B + 14.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">{last}</text>\n",
            WIDTH - MARGIN_R,
            HEIGHT - MARGIN_B + 14.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">0</text>\n",
        MARGIN_L - 14.0,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">1</text>\n",
        MARGIN_L - 14.0,
        MARGIN_T + 10.0
    ));
    svg.push_str(&axis_label_x("epoch"));
    svg.push_str(&axis_label_y("alpha_vv"));
    svg.push_str("</svg>\n");
    svg
}

/// (name, color, points) of one chart line.
type Series<'a> = (&'a str, &'a str, Vec<(f64, f64)>);

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        coords.join(" ")
    )
}

fn line_chart(
    title: &str,
    series: &[Series<'_>],
    y_lo: f64,
    y_hi: f64,
    y_label: &str,
) -> String {
    let mut svg = svg_open(title);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_max = series
        .iter()
        .flat_map(|(_, _, pts)| pts.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let scale = |(x, y): (f64, f64)| {
        let sx = MARGIN_L + plot_w * x / x_max;
        let sy = MARGIN_T + plot_h * (1.0 - (y - y_lo) / (y_hi - y_lo));
        (sx, sy)
    };
    svg.push_str(&format!(
        "<rect x=\"{MARGIN_L:.2}\" y=\"{MARGIN_T:.2}\" width=\"{plot_w:.2}\" \
         height=\"{plot_h:.2}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n"
    ));
    for (i, (name, color, pts)) in series.iter().enumerate() {
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&p| scale(p)).collect();
        svg.push_str(&polyline(&scaled, color));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" \
             fill=\"{color}\">{name}</text>\n",
            MARGIN_L + 6.0,
            MARGIN_T + 14.0 + 12.0 * i as f64
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{:.2}</text>\n",
        MARGIN_L - 40.0,
        HEIGHT - MARGIN_B,
        y_lo
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{:.2}</text>\n",
        MARGIN_L - 40.0,
        MARGIN_T + 10.0,
        y_hi
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" \
         text-anchor=\"end\">{x_max:.0}</text>\n",
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B + 14.0
    ));
    svg.push_str(&axis_label_x("epoch"));
    svg.push_str(&axis_label_y(y_label));
    svg.push_str("</svg>\n");
    svg
}

pub fn render_accuracy_chart(trace: &[TraceRow]) -> String {
    let pick = |f: fn(&TraceRow) -> f64| -> Vec<(f64, f64)> {
        trace.iter().map(|r| (r.epoch as f64, f(r))).collect()
    };
    line_chart(
        "accuracy",
        &[
            ("train", "#1f77b4", pick(|r| r.train_acc)),
            ("val", "#ff7f0e", pick(|r| r.val_acc)),
            ("test", "#2ca02c", pick(|r| r.test_acc)),
        ],
        0.0,
        1.0,
        "accuracy",
    )
}

pub fn render_loss_chart(trace: &[TraceRow]) -> String {
    // Log10 scale: training losses here span many decades.
    let pts: Vec<(f64, f64)> = trace
        .iter()
        .map(|r| (r.epoch as f64, r.loss.max(1e-16).log10()))
        .collect();
    let y_lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (y_lo, y_hi) = if y_lo < y_hi {
        (y_lo.floor(), y_hi.ceil())
    } else {
        (y_lo - 1.0, y_hi + 1.0)
    };
    line_chart(
        "training loss (log10)",
        &[("loss", "#d62728", pts)],
        y_lo,
        y_hi,
        "log10 loss",
    )
}

/// Render every plot for a run directory from its trace artifacts.
/// Missing inputs are skipped with a warning; returns the files written.
pub fn render_run_dir(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut written = Vec::new();
    let hist_path = dir.join("alpha_hist.csv");
    if hist_path.exists() {
        let rows = crate::runner::read_alpha_hist(&hist_path)?;
        if rows.is_empty() {
            eprintln!("warning: {} has no histogram rows; skipping", hist_path.display());
        } else {
            let total: usize = {
                let first = &rows[0];
                rows.iter()
                    .filter(|r| r.epoch == first.epoch && r.layer == first.layer)
                    .map(|r| r.count)
                    .sum()
            };
            let mut layers: Vec<usize> = rows.iter().map(|r| r.layer).collect();
            layers.sort_unstable();
            layers.dedup();
            for layer in layers {
                let svg = render_alpha_heatmap(&rows, layer, total);
                let path = dir.join(format!("alpha_l{layer}.svg"));
                write_atomic(&path, &svg)?;
                written.push(path);
            }
        }
    } else {
        eprintln!(
            "warning: {} missing; skipping alpha heatmaps",
            hist_path.display()
        );
    }

    let trace_path = dir.join("trace.jsonl");
    if trace_path.exists() {
        let trace = crate::runner::read_trace(&trace_path)?;
        if trace.is_empty() {
            eprintln!("warning: {} is empty; skipping curves", trace_path.display());
        } else {
            let acc_path = dir.join("accuracy.svg");
            write_atomic(&acc_path, &render_accuracy_chart(&trace))?;
            written.push(acc_path);
            let loss_path = dir.join("loss.svg");
            write_atomic(&loss_path, &render_loss_chart(&trace))?;
            written.push(loss_path);
        }
    } else {
        eprintln!("warning: {} missing; skipping curves", trace_path.display());
    }
    Ok(written)
}
