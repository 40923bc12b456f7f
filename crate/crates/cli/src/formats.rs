//! On-disk formats: edge lists, dataset exports, CSV traces, and JSONL.
//!
//! Every artifact is written atomically (temp file + rename) so an
//! interrupted sweep never leaves truncated files. Floats are written with
//! Rust's shortest-roundtrip formatting, which parses back bit-exactly and
//! keeps re-runs byte-identical.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use gatlab_core::graph::Graph;
use gatlab_core::synth::Dataset;
use gatlab_core::tensor::Tensor;

pub type IoResult<T> = Result<T, String>;

fn io_err<E: std::fmt::Display>(path: &Path, e: E) -> String {
    format!("{}: {e}", path.display())
}

/// Write `content` to `path` atomically via a sibling temp file.
pub fn write_atomic(path: &Path, content: &str) -> IoResult<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".into())
    ));
    {
        let file = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut writer = BufWriter::new(file);
        writer
            .write_all(content.as_bytes())
            .map_err(|e| io_err(&tmp, e))?;
        writer.flush().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Edge-list text format: header `nodes <n>`, then one `u v` pair per line
/// (0-indexed, undirected, each edge once); self-loops written explicitly.
pub fn write_edge_list(path: &Path, g: &Graph) -> IoResult<()> {
    let mut out = String::new();
    out.push_str(&format!("nodes {}\n", g.num_nodes()));
    for (u, v) in g.undirected_edges() {
        out.push_str(&format!("{u} {v}\n"));
    }
    for (v, _) in g.self_loop_edges() {
        out.push_str(&format!("{v} {v}\n"));
    }
    write_atomic(path, &out)
}

pub fn read_edge_list(path: &Path) -> IoResult<Graph> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| io_err(path, e))?;
                let trimmed = line.trim();
                if !trimmed.is_empty() && !trimmed.starts_with('#') {
                    break trimmed.to_string();
                }
            }
            None => return Err(io_err(path, "empty edge-list file")),
        }
    };
    let n: usize = header
        .strip_prefix("nodes ")
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| io_err(path, format!("bad header line {header:?}; expected \"nodes <n>\"")))?;
    let mut edges = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let parse = |tok: Option<&str>| -> IoResult<usize> {
            tok.and_then(|t| t.parse().ok())
                .ok_or_else(|| io_err(path, format!("line {}: bad edge {trimmed:?}", lineno + 1)))
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(io_err(
                path,
                format!("line {}: expected two node ids", lineno + 1),
            ));
        }
        edges.push((u, v));
    }
    Graph::from_edges(n, &edges).map_err(|e| io_err(path, e))
}

/// Labels file: one integer label per line, node order.
pub fn read_labels(path: &Path, n: usize, classes: usize) -> IoResult<Vec<usize>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut labels = Vec::with_capacity(n);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let label: usize = trimmed
            .parse()
            .map_err(|_| io_err(path, format!("line {}: bad label {trimmed:?}", lineno + 1)))?;
        if label >= classes {
            return Err(io_err(
                path,
                format!("line {}: label {label} exceeds {classes} classes", lineno + 1),
            ));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(io_err(
            path,
            format!("expected {n} labels, found {}", labels.len()),
        ));
    }
    Ok(labels)
}

fn tensor_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|x| format!("{x}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Dataset serialization: edge list + features CSV (full f64 precision) +
/// labels CSV + masks CSV + provenance JSON, all under `dir`.
pub fn export_dataset(dir: &Path, ds: &Dataset) -> IoResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_edge_list(&dir.join("graph.edges"), &ds.graph)?;
    write_atomic(&dir.join("features.csv"), &tensor_csv(&ds.features))?;
    let labels: String = ds.labels.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(&dir.join("labels.csv"), &labels)?;
    let masks: String = (0..ds.graph.num_nodes())
        .map(|v| {
            let split = if ds.train_mask[v] {
                "train"
            } else if ds.val_mask[v] {
                "val"
            } else {
                "test"
            };
            format!("{split}\n")
        })
        .collect();
    write_atomic(&dir.join("masks.csv"), &masks)?;
    let provenance = serde_json::to_string_pretty(&ds.provenance)
        .map_err(|e| format!("provenance json: {e}"))?;
    write_atomic(&dir.join("provenance.json"), &provenance)
}

/// Incrementally built CSV document with a fixed header.
pub struct CsvDoc {
    buf: String,
}

impl CsvDoc {
    pub fn new(header: &str) -> Self {
        let mut buf = String::new();
        buf.push_str(header);
        buf.push('\n');
        Self { buf }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x}")
    }
}
