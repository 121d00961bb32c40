//! Text file formats: recording tables, model and forest documents, TOML
//! configuration with default provenance, reports and manifests.
//!
//! Floating point values are written with 17 significant digits, which
//! round-trips every finite `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::{ForestConfig, ForestModel, Node, RegressionForest, Tree};
use crate::eval::{CrossValReport, FrameError, Method};
use crate::features::Normalizer;
use crate::geometry::{ColonFrame, Direction3, Point3, RigidTransform, ScopeFrame};
use crate::model::{LayerParams, OutputScaling, SenArchitecture, SenModel, TrainConfig, TrainingMeta};
use crate::neural::Tensor;
use crate::recording::{FramePair, InsertionRecording};
use crate::registration::IcpConfig;
use crate::simulator::{default_phantom, SimConfig};

pub const MODEL_MAGIC: &str = "sen-model";
pub const FOREST_MAGIC: &str = "sen-forest";
pub const TRANSFORM_MAGIC: &str = "sen-transform";
pub const MANIFEST_MAGIC: &str = "sen-manifest";
pub const REPORT_MAGIC: &str = "sen-report";
pub const FORMAT_VERSION: u32 = 1;

/// Direction norm tolerance when reading recordings.
pub const DIRECTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("header: {0}")]
    Header(String),
    #[error("row {row}: expected {expected} columns, found {found}")]
    ColumnCount { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {column}: cannot parse {text:?} as a number")]
    Number { row: usize, column: String, text: String },
    #[error("row {row}: frame_index {found}, expected {expected}")]
    FrameIndex { row: usize, expected: usize, found: String },
    #[error("row {row}, column {column}: direction norm {norm} is not 1 within {DIRECTION_TOLERANCE}")]
    Direction { row: usize, column: String, norm: f64 },
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("unsupported format: expected {expected:?}, found {found:?}")]
    Version { expected: String, found: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("tensor {tensor}: {message}")]
    Shape { tensor: String, message: String },
    #[error("config syntax: {0}")]
    ConfigSyntax(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("config section [{section}]: {message}")]
    ConfigType { section: String, message: String },
    #[error("config constraint violated in [{section}]: {message}")]
    Constraint { section: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn read_text(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------- recordings

pub fn recording_header(sensors: usize, markers: usize) -> Vec<String> {
    let mut cols = vec!["frame_index".to_string()];
    for prefix in ["sp", "sd"] {
        for i in 0..sensors {
            for a in ["x", "y", "z"] {
                cols.push(format!("{prefix}{i}_{a}"));
            }
        }
    }
    cols.extend(marker_columns(markers));
    cols
}

fn marker_columns(markers: usize) -> Vec<String> {
    (0..markers).flat_map(|i| ["x", "y", "z"].map(|a| format!("cm{i}_{a}"))).collect()
}

pub fn format_recording(rec: &InsertionRecording) -> String {
    let mut out = recording_header(rec.sensor_count(), rec.marker_count()).join(",");
    out.push('\n');
    for pair in &rec.frames {
        out.push_str(&pair.scope.frame_index.to_string());
        let values = pair
            .scope
            .points()
            .iter()
            .flat_map(|p| p.to_array())
            .chain(pair.scope.directions().iter().flat_map(|d| d.to_array()))
            .chain(pair.colon.markers.iter().flat_map(|p| p.to_array()));
        for v in values {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

/// Sensor and marker counts implied by a recording header.
fn parse_recording_header(line: &str) -> Result<(usize, usize), DataError> {
    let cols: Vec<&str> = line.split(',').collect();
    let sensors = cols.iter().filter(|c| c.starts_with("sp")).count() / 3;
    let markers = cols.iter().filter(|c| c.starts_with("cm")).count() / 3;
    let want = recording_header(sensors, markers);
    if sensors < 2 || markers == 0 || cols.len() != want.len() || cols.iter().zip(&want).any(|(a, b)| a != b) {
        return Err(DataError::Header(format!(
            "expected frame_index, sp*_xyz, sd*_xyz, cm*_xyz columns; found {} columns starting {:?}",
            cols.len(),
            cols.iter().take(3).collect::<Vec<_>>()
        )));
    }
    Ok((sensors, markers))
}

pub fn parse_recording(text: &str) -> Result<InsertionRecording, DataError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DataError::Header("empty file".into()))?;
    let (n, m) = parse_recording_header(header)?;
    let names = recording_header(n, m);
    let mut frames = Vec::new();
    for (k, line) in lines.enumerate() {
        let row = k + 2;
        if line.is_empty() {
            return Err(DataError::Row { row, message: "empty row".into() });
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(DataError::ColumnCount { row, expected: names.len(), found: cells.len() });
        }
        let expected = frames.len() + 1;
        if cells[0].parse::<usize>().ok() != Some(expected) {
            return Err(DataError::FrameIndex { row, expected, found: cells[0].to_string() });
        }
        let mut vals = Vec::with_capacity(cells.len() - 1);
        for (c, cell) in cells.iter().enumerate().skip(1) {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => vals.push(v),
                _ => return Err(DataError::Number { row, column: names[c].clone(), text: cell.to_string() }),
            }
        }
        let point = |i: usize| Point3::new(vals[3 * i], vals[3 * i + 1], vals[3 * i + 2]);
        let points = (0..n).map(point).collect();
        let mut dirs = Vec::with_capacity(n);
        for i in n..2 * n {
            let p = point(i);
            let d = Direction3::with_tolerance(p.x, p.y, p.z, DIRECTION_TOLERANCE)
                .map_err(|_| DataError::Direction { row, column: names[1 + 3 * i].clone(), norm: p.norm() })?;
            dirs.push(d);
        }
        let markers = (2 * n..2 * n + m).map(point).collect();
        let scope = ScopeFrame::new(points, dirs, expected).map_err(|e| DataError::Row { row, message: e.to_string() })?;
        frames.push(FramePair { scope, colon: ColonFrame::new(markers, expected) });
    }
    InsertionRecording::new(frames).map_err(|e| DataError::Row { row: 2, message: e.to_string() })
}

pub fn save_recording(rec: &InsertionRecording, path: &Path) -> Result<(), DataError> {
    write_text(path, &format_recording(rec))
}

pub fn load_recording(path: &Path) -> Result<InsertionRecording, DataError> {
    parse_recording(&read_text(path)?)
}

/// Marker-only table in the recording's `cm*` column format.
pub fn format_predictions(frames: &[ColonFrame]) -> String {
    let m = frames.first().map_or(0, |f| f.markers.len());
    let mut out = String::from("frame_index");
    for c in marker_columns(m) {
        out.push(',');
        out.push_str(&c);
    }
    out.push('\n');
    for f in frames {
        out.push_str(&f.frame_index.to_string());
        for v in f.markers.iter().flat_map(|p| p.to_array()) {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<ColonFrame>, DataError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| DataError::Header("empty file".into()))?.split(',').collect();
    let m = header.len().saturating_sub(1) / 3;
    let mut want = vec!["frame_index".to_string()];
    want.extend(marker_columns(m));
    if header.len() != want.len() || header.iter().zip(&want).any(|(a, b)| a != b) {
        return Err(DataError::Header("expected frame_index followed by cm*_xyz columns".into()));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let row = k + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != want.len() {
            return Err(DataError::ColumnCount { row, expected: want.len(), found: cells.len() });
        }
        let idx = cells[0]
            .parse::<usize>()
            .map_err(|_| DataError::FrameIndex { row, expected: 0, found: cells[0].to_string() })?;
        let mut vals = Vec::new();
        for (c, cell) in cells.iter().enumerate().skip(1) {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => vals.push(v),
                _ => return Err(DataError::Number { row, column: want[c].clone(), text: cell.to_string() }),
            }
        }
        out.push(ColonFrame::new(vals.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect(), idx));
    }
    Ok(out)
}

// ------------------------------------------------------- line-oriented docs

/// Cursor over non-empty lines of a versioned document.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate(), last: 0 }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str), DataError> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            if !l.trim().is_empty() {
                return Ok((i + 1, l));
            }
        }
        Err(DataError::Malformed { line: self.last + 1, message: "unexpected end of file".into() })
    }

    /// Next line split into the expected key and its remaining fields.
    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>), DataError> {
        let (n, l) = self.next_line()?;
        let mut parts = l.split_whitespace();
        match parts.next() {
            Some(k) if k == key => Ok((n, parts.collect())),
            other => Err(DataError::Malformed { line: n, message: format!("expected {key:?}, found {:?}", other.unwrap_or("")) }),
        }
    }

    fn one<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, DataError> {
        let (n, f) = self.keyed(key)?;
        match f.as_slice() {
            [v] => parse_at(n, v),
            _ => Err(DataError::Malformed { line: n, message: format!("{key} takes exactly one value") }),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>, DataError> {
        let (n, f) = self.keyed(key)?;
        f.iter().map(|v| parse_at(n, v)).collect()
    }

    fn finite_list(&mut self, key: &str) -> Result<Vec<f64>, DataError> {
        let (n, f) = self.keyed(key)?;
        f.iter().map(|v| parse_finite(n, v)).collect()
    }

    fn finite(&mut self, key: &str) -> Result<f64, DataError> {
        let (n, f) = self.keyed(key)?;
        match f.as_slice() {
            [v] => parse_finite(n, v),
            _ => Err(DataError::Malformed { line: n, message: format!("{key} takes exactly one value") }),
        }
    }

    fn point(&mut self, key: &str) -> Result<Point3, DataError> {
        let (n, f) = self.keyed(key)?;
        match f.as_slice() {
            [x, y, z] => Ok(Point3::new(parse_finite(n, x)?, parse_finite(n, y)?, parse_finite(n, z)?)),
            _ => Err(DataError::Malformed { line: n, message: format!("{key} takes three values") }),
        }
    }

    fn end(&mut self) -> Result<(), DataError> {
        let (n, _) = self.keyed("end")?;
        if let Ok((extra, _)) = self.next_line() {
            return Err(DataError::Malformed { line: extra, message: "content after end marker".into() });
        }
        let _ = n;
        Ok(())
    }
}

fn parse_at<T: std::str::FromStr>(line: usize, v: &str) -> Result<T, DataError> {
    v.parse().map_err(|_| DataError::Malformed { line, message: format!("cannot parse {v:?}") })
}

fn parse_finite(line: usize, v: &str) -> Result<f64, DataError> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(DataError::Malformed { line, message: format!("{v:?} is not a finite number") }),
    }
}

fn check_magic(lines: &mut Lines, magic: &str) -> Result<(), DataError> {
    let (_, l) = lines.next_line().map_err(|_| DataError::Version { expected: format!("{magic} {FORMAT_VERSION}"), found: String::new() })?;
    let want = format!("{magic} {FORMAT_VERSION}");
    if l.trim() != want {
        return Err(DataError::Version { expected: want, found: l.trim().chars().take(40).collect() });
    }
    Ok(())
}

fn push_values(out: &mut String, key: &str, values: impl IntoIterator<Item = f64>) {
    out.push_str(key);
    for v in values {
        out.push(' ');
        out.push_str(&fmt_f64(v));
    }
    out.push('\n');
}

fn push_list<T: std::fmt::Display>(out: &mut String, key: &str, values: &[T]) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

fn write_normalizer(out: &mut String, n: &Normalizer) {
    push_values(out, "normalizer.center", n.center.to_array());
    push_values(out, "normalizer.scale", [n.scale]);
    push_values(out, "normalizer.length_scale", [n.length_scale]);
}

fn read_normalizer(lines: &mut Lines) -> Result<Normalizer, DataError> {
    let center = lines.point("normalizer.center")?;
    let line = lines.last;
    let scale = lines.finite("normalizer.scale")?;
    let length_scale = lines.finite("normalizer.length_scale")?;
    Normalizer::new(center, scale, length_scale).map_err(|e| DataError::Malformed { line, message: e.to_string() })
}

// --------------------------------------------------------------------- model

pub fn format_model(model: &SenModel) -> String {
    let a = &model.architecture;
    let mut out = format!("{MODEL_MAGIC} {FORMAT_VERSION}\n");
    let _ = writeln!(out, "architecture.sensors {}", a.sensors);
    let _ = writeln!(out, "architecture.markers {}", a.markers);
    let _ = writeln!(out, "architecture.window {}", a.window);
    push_list(&mut out, "architecture.conv_channels", &a.conv_channels);
    let _ = writeln!(out, "architecture.embed_size {}", a.embed_size);
    let _ = writeln!(out, "architecture.hidden_size {}", a.hidden_size);
    push_list(&mut out, "architecture.head_sizes", &a.head_sizes);
    push_values(&mut out, "architecture.dropout", [a.dropout]);
    let _ = writeln!(out, "architecture.use_relative_features {}", a.use_relative_features);
    write_normalizer(&mut out, &model.normalizer);
    push_values(&mut out, "output.mean", model.output_scaling.mean.iter().copied());
    push_values(&mut out, "output.std", model.output_scaling.std.iter().copied());
    let _ = writeln!(out, "meta.epochs {}", model.meta.epochs);
    push_values(&mut out, "meta.final_loss", [model.meta.final_loss]);
    let _ = writeln!(out, "meta.seed {}", model.meta.seed);
    let _ = writeln!(out, "tensors {}", model.params.len());
    for (name, t) in model.params.iter() {
        out.push_str("tensor ");
        out.push_str(name);
        push_list(&mut out, "", t.shape());
        push_values(&mut out, "values", t.values().iter().copied());
    }
    out.push_str("end\n");
    out
}

/// Documents end with an `end` line; anything else was cut short.
fn check_complete(text: &str) -> Result<(), DataError> {
    let last = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).last();
    match last {
        Some((_, l)) if l.trim() == "end" => Ok(()),
        Some((i, _)) => Err(DataError::Malformed { line: i + 1, message: "truncated document: missing end marker".into() }),
        None => Err(DataError::Malformed { line: 1, message: "empty document".into() }),
    }
}

pub fn parse_model(text: &str) -> Result<SenModel, DataError> {
    check_complete(text)?;
    let mut l = Lines::new(text);
    check_magic(&mut l, MODEL_MAGIC)?;
    let architecture = SenArchitecture {
        sensors: l.one("architecture.sensors")?,
        markers: l.one("architecture.markers")?,
        window: l.one("architecture.window")?,
        conv_channels: l.list("architecture.conv_channels")?,
        embed_size: l.one("architecture.embed_size")?,
        hidden_size: l.one("architecture.hidden_size")?,
        head_sizes: l.list("architecture.head_sizes")?,
        dropout: l.finite("architecture.dropout")?,
        use_relative_features: l.one("architecture.use_relative_features")?,
    };
    let arch_line = l.last;
    architecture
        .validate()
        .map_err(|e| DataError::Malformed { line: arch_line, message: e.to_string() })?;
    let normalizer = read_normalizer(&mut l)?;
    let mean = l.finite_list("output.mean")?;
    let std = l.finite_list("output.std")?;
    let output_scaling = OutputScaling { mean, std };
    output_scaling
        .validate(architecture.output_len())
        .map_err(|e| DataError::Malformed { line: l.last, message: e.to_string() })?;
    let epochs = l.one("meta.epochs")?;
    let final_loss = l.one::<f64>("meta.final_loss")?;
    let seed = l.one("meta.seed")?;
    let specs = architecture.param_specs();
    let count: usize = l.one("tensors")?;
    if count != specs.len() {
        return Err(DataError::Shape {
            tensor: "*".into(),
            message: format!("file has {count} tensors, architecture needs {}", specs.len()),
        });
    }
    let mut named = Vec::with_capacity(count);
    for (want_name, want_shape) in &specs {
        let (n, fields) = l.keyed("tensor")?;
        let Some((&name, dims)) = fields.split_first() else {
            return Err(DataError::Malformed { line: n, message: "tensor line without a name".into() });
        };
        let shape: Vec<usize> = dims.iter().map(|d| parse_at(n, d)).collect::<Result<_, _>>()?;
        let values = l.finite_list("values")?;
        if name != want_name {
            return Err(DataError::Shape { tensor: name.into(), message: format!("expected tensor {want_name} here") });
        }
        if &shape != want_shape {
            return Err(DataError::Shape {
                tensor: name.into(),
                message: format!("shape {shape:?} does not match architecture shape {want_shape:?}"),
            });
        }
        let t = Tensor::new(shape, values).map_err(|e| DataError::Shape { tensor: name.into(), message: e.to_string() })?;
        named.push((name.to_string(), t));
    }
    l.end()?;
    Ok(SenModel {
        architecture,
        params: LayerParams::new(named),
        normalizer,
        output_scaling,
        meta: TrainingMeta { epochs, final_loss, seed },
    })
}

pub fn save_model(model: &SenModel, path: &Path) -> Result<(), DataError> {
    write_text(path, &format_model(model))
}

pub fn load_model(path: &Path) -> Result<SenModel, DataError> {
    parse_model(&read_text(path)?)
}

pub fn model_checksum(model: &SenModel) -> String {
    sha256_hex(format_model(model).as_bytes())
}

// -------------------------------------------------------------------- forest

pub fn format_forest(model: &ForestModel) -> String {
    let f = &model.forest;
    let mut out = format!("{FOREST_MAGIC} {FORMAT_VERSION}\n");
    let _ = writeln!(out, "features {}", f.n_features);
    let _ = writeln!(out, "outputs {}", f.n_outputs);
    write_normalizer(&mut out, &model.normalizer);
    let _ = writeln!(out, "trees {}", f.trees.len());
    for (t, tree) in f.trees.iter().enumerate() {
        let _ = writeln!(out, "tree {t} {}", tree.nodes.len());
        for (i, node) in tree.nodes.iter().enumerate() {
            match node {
                Node::Split { feature, threshold, left, right } => {
                    let _ = writeln!(out, "node {i} split {feature} {} {left} {right}", fmt_f64(*threshold));
                }
                Node::Leaf(v) => push_values(&mut out, &format!("node {i} leaf"), v.iter().copied()),
            }
        }
    }
    out.push_str("end\n");
    out
}

pub fn parse_forest(text: &str) -> Result<ForestModel, DataError> {
    check_complete(text)?;
    let mut l = Lines::new(text);
    check_magic(&mut l, FOREST_MAGIC)?;
    let n_features: usize = l.one("features")?;
    let n_outputs: usize = l.one("outputs")?;
    let normalizer = read_normalizer(&mut l)?;
    let count: usize = l.one("trees")?;
    let bad = |line: usize, message: String| DataError::Malformed { line, message };
    if count == 0 {
        return Err(bad(l.last, "forest has no trees".into()));
    }
    let mut trees = Vec::new();
    for t in 0..count {
        let (n, f) = l.keyed("tree")?;
        let size = match f.as_slice() {
            [id, size] if parse_at::<usize>(n, id)? == t => parse_at::<usize>(n, size)?,
            _ => return Err(bad(n, format!("expected \"tree {t} <node count>\""))),
        };
        let mut nodes = Vec::new();
        for i in 0..size {
            let (n, f) = l.keyed("node")?;
            if f.first().map(|id| parse_at::<usize>(n, id)).transpose()? != Some(i) {
                return Err(bad(n, format!("expected node {i}")));
            }
            let node = match f.get(1) {
                Some(&"split") if f.len() == 6 => Node::Split {
                    feature: parse_at(n, f[2])?,
                    threshold: parse_finite(n, f[3])?,
                    left: parse_at(n, f[4])?,
                    right: parse_at(n, f[5])?,
                },
                Some(&"leaf") => Node::Leaf(f[2..].iter().map(|v| parse_finite(n, v)).collect::<Result<_, _>>()?),
                _ => return Err(bad(n, "expected a split or leaf node".into())),
            };
            nodes.push(node);
        }
        let tree = Tree { nodes };
        tree.validate(n_features, n_outputs).map_err(|e| bad(l.last, format!("tree {t}: {e}")))?;
        trees.push(tree);
    }
    l.end()?;
    Ok(ForestModel { forest: RegressionForest { n_features, n_outputs, trees }, normalizer })
}

pub fn save_forest(model: &ForestModel, path: &Path) -> Result<(), DataError> {
    write_text(path, &format_forest(model))
}

pub fn load_forest(path: &Path) -> Result<ForestModel, DataError> {
    parse_forest(&read_text(path)?)
}

pub fn forest_checksum(model: &ForestModel) -> String {
    sha256_hex(format_forest(model).as_bytes())
}

// ------------------------------------------------------- clouds, transforms

/// `x,y,z` table of points.
pub fn format_cloud(points: &[Point3]) -> String {
    let mut out = String::from("x,y,z\n");
    for p in points {
        let [x, y, z] = p.to_array().map(fmt_f64);
        let _ = writeln!(out, "{x},{y},{z}");
    }
    out
}

pub fn parse_cloud(text: &str) -> Result<Vec<Point3>, DataError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,z") {
        return Err(DataError::Header("expected header x,y,z".into()));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let row = k + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(DataError::ColumnCount { row, expected: 3, found: cells.len() });
        }
        let mut v = [0.0; 3];
        for (c, (cell, name)) in cells.iter().zip(["x", "y", "z"]).enumerate() {
            v[c] = match cell.trim().parse::<f64>() {
                Ok(x) if x.is_finite() => x,
                _ => return Err(DataError::Number { row, column: name.into(), text: cell.to_string() }),
            };
        }
        out.push(Point3::from_array(v));
    }
    Ok(out)
}

pub fn format_transform(tf: &RigidTransform) -> String {
    let mut out = format!("{TRANSFORM_MAGIC} {FORMAT_VERSION}\n");
    let vals: Vec<String> = tf.to_row_major().iter().map(|v| fmt_f64(*v)).collect();
    out.push_str(&vals.join(" "));
    out.push('\n');
    out
}

pub fn parse_transform(text: &str) -> Result<RigidTransform, DataError> {
    let mut l = Lines::new(text);
    check_magic(&mut l, TRANSFORM_MAGIC)?;
    let (n, line) = l.next_line()?;
    let vals: Vec<f64> = line.split_whitespace().map(|v| parse_finite(n, v)).collect::<Result<_, _>>()?;
    let arr: [f64; 12] = vals
        .try_into()
        .map_err(|v: Vec<f64>| DataError::Malformed { line: n, message: format!("expected 12 numbers, found {}", v.len()) })?;
    let tf = RigidTransform::from_row_major(&arr).map_err(|e| DataError::Malformed { line: n, message: e.to_string() })?;
    if let Ok((extra, _)) = l.next_line() {
        return Err(DataError::Malformed { line: extra, message: "content after transform".into() });
    }
    Ok(tf)
}

// ------------------------------------------------------------------- reports

pub fn format_frame_errors(errors: &[FrameError]) -> String {
    let mut out = String::from("frame_index,error_mm\n");
    for e in errors {
        let _ = writeln!(out, "{},{}", e.frame_index, fmt_f64(e.distance));
    }
    out
}

pub fn format_loss_history(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, v) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, fmt_f64(*v));
    }
    out
}

pub fn format_residuals(history: &[f64]) -> String {
    let mut out = String::from("iteration,residual_rms_mm\n");
    for (i, v) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, fmt_f64(*v));
    }
    out
}

/// `fold,held_out,method,md_mm` rows, then `mean` and `pooled` rows per method.
pub fn format_fold_table(report: &CrossValReport) -> String {
    let mut out = String::from("fold,held_out,method,md_mm\n");
    for (k, fold) in report.folds.iter().enumerate() {
        for r in &fold.results {
            let _ = writeln!(out, "{},{},{},{}", k + 1, fold.held_out + 1, r.method, fmt_f64(r.md));
        }
    }
    for &m in &report.methods {
        let _ = writeln!(out, "mean,,{m},{}", fmt_f64(report.mean_md(m)));
    }
    for &m in &report.methods {
        let _ = writeln!(out, "pooled,,{m},{}", fmt_f64(report.pooled_md(m)));
    }
    out
}

// ------------------------------------------------------------------- configs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub methods: Vec<Method>,
    pub write_per_frame: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { methods: Method::ALL.to_vec(), write_per_frame: true }
    }
}

/// Every tunable of the pipeline, one TOML section each.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub simulator: SimConfig,
    pub architecture: SenArchitecture,
    pub training: TrainConfig,
    pub forest: ForestConfig,
    pub icp: IcpConfig,
    pub evaluation: EvaluationConfig,
}

/// Where a configuration value came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    /// `section.key`
    pub key: String,
    pub value: String,
    pub defaulted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: Config,
    pub provenance: Vec<Provenance>,
}

impl LoadedConfig {
    pub fn defaults(&self) -> impl Iterator<Item = &Provenance> {
        self.provenance.iter().filter(|p| p.defaulted)
    }
}

const SECTIONS: [&str; 6] = ["simulator", "architecture", "training", "forest", "icp", "evaluation"];

/// Keys that may be absent from a serialized default because they are
/// optional.
const OPTIONAL_KEYS: [(&str, &str); 3] = [
    ("simulator", "max_insertion_length"),
    ("training", "final_learning_rate"),
    ("forest", "features_per_split"),
];

fn default_table() -> toml::Table {
    toml::to_string(&Config::default())
        .expect("default config serializes")
        .parse::<toml::Table>()
        .expect("default config parses")
}

pub fn format_config(config: &Config) -> String {
    toml::to_string(config).expect("config serializes")
}

pub fn parse_config(text: &str) -> Result<LoadedConfig, DataError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| DataError::ConfigSyntax(e.to_string()))?;
    let defaults = default_table();
    let mut provenance = Vec::new();
    for (section, value) in &table {
        if !SECTIONS.contains(&section.as_str()) {
            return Err(DataError::UnknownKey(section.clone()));
        }
        let Some(inner) = value.as_table() else {
            return Err(DataError::ConfigType { section: section.clone(), message: "expected a table".into() });
        };
        let known = defaults.get(section).and_then(toml::Value::as_table);
        for key in inner.keys() {
            let is_known = known.is_some_and(|k| k.contains_key(key)) || OPTIONAL_KEYS.contains(&(section.as_str(), key.as_str()));
            if !is_known {
                return Err(DataError::UnknownKey(format!("{section}.{key}")));
            }
        }
    }
    let section = |name: &str| table.get(name).cloned().unwrap_or_else(|| toml::Value::Table(toml::Table::new()));
    fn typed<T: serde::de::DeserializeOwned>(name: &str, v: toml::Value) -> Result<T, DataError> {
        v.try_into().map_err(|e: toml::de::Error| DataError::ConfigType { section: name.into(), message: e.message().to_string() })
    }
    let config = Config {
        simulator: typed("simulator", section("simulator"))?,
        architecture: typed("architecture", section("architecture"))?,
        training: typed("training", section("training"))?,
        forest: typed("forest", section("forest"))?,
        icp: typed("icp", section("icp"))?,
        evaluation: typed("evaluation", section("evaluation"))?,
    };
    validate_config(&config)?;

    let effective = default_table_of(&config);
    for name in SECTIONS {
        let given = table.get(name).and_then(toml::Value::as_table);
        if let Some(sec) = effective.get(name).and_then(toml::Value::as_table) {
            for (key, value) in sec {
                let defaulted = !given.is_some_and(|g| g.contains_key(key));
                provenance.push(Provenance { key: format!("{name}.{key}"), value: value.to_string(), defaulted });
            }
        }
        for (sec, key) in OPTIONAL_KEYS {
            let absent_everywhere = sec == name && !effective.get(name).and_then(|s| s.as_table()).is_some_and(|s| s.contains_key(key));
            if absent_everywhere {
                provenance.push(Provenance { key: format!("{name}.{key}"), value: "(automatic)".into(), defaulted: true });
            }
        }
    }
    Ok(LoadedConfig { config, provenance })
}

fn default_table_of(config: &Config) -> toml::Table {
    format_config(config).parse().expect("serialized config parses")
}

fn validate_config(c: &Config) -> Result<(), DataError> {
    let constraint = |section: &str| {
        let section = section.to_string();
        move |e: &dyn std::fmt::Display| DataError::Constraint { section: section.clone(), message: e.to_string() }
    };
    c.simulator.validate(&default_phantom()).map_err(|e| constraint("simulator")(&e))?;
    c.architecture.validate().map_err(|e| constraint("architecture")(&e))?;
    c.training.validate().map_err(|e| constraint("training")(&e))?;
    c.forest.validate().map_err(|e| constraint("forest")(&e))?;
    c.icp.validate().map_err(|e| constraint("icp")(&e))?;
    if c.evaluation.methods.is_empty() {
        return Err(constraint("evaluation")(&"methods must not be empty"));
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, DataError> {
    parse_config(&read_text(path)?)
}

pub fn config_checksum(config: &Config) -> String {
    sha256_hex(format_config(config).as_bytes())
}

// ------------------------------------------------------------------ manifest

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config_sha256: String,
    pub master_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub fn format_manifest(m: &Manifest) -> String {
    let mut out = format!("{MANIFEST_MAGIC} {FORMAT_VERSION}\n");
    let _ = writeln!(out, "config_sha256 {}", m.config_sha256);
    let _ = writeln!(out, "master_seed {}", m.master_seed);
    let _ = writeln!(out, "recordings {}", m.entries.len());
    for e in &m.entries {
        let _ = writeln!(out, "recording {} {} {}", e.file, e.seed, e.frames);
    }
    out.push_str("end\n");
    out
}

pub fn parse_manifest(text: &str) -> Result<Manifest, DataError> {
    let mut l = Lines::new(text);
    check_magic(&mut l, MANIFEST_MAGIC)?;
    let config_sha256: String = l.one("config_sha256")?;
    let master_seed = l.one("master_seed")?;
    let count: usize = l.one("recordings")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let (n, f) = l.keyed("recording")?;
        match f.as_slice() {
            [file, seed, frames] => entries.push(ManifestEntry {
                file: file.to_string(),
                seed: parse_at(n, seed)?,
                frames: parse_at(n, frames)?,
            }),
            _ => return Err(DataError::Malformed { line: n, message: "expected file, seed and frame count".into() }),
        }
    }
    l.end()?;
    Ok(Manifest { config_sha256, master_seed, entries })
}

/// Describes a cross-validation run: the exact configuration, the epoch
/// budget relative to the full schedule, and a checksum per trained artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportManifest {
    pub config_sha256: String,
    pub master_seed: u64,
    pub recordings: usize,
    pub epochs: usize,
    pub default_epochs: usize,
    /// (fold, method, artifact checksum)
    pub artifacts: Vec<(usize, Method, String)>,
}

impl ReportManifest {
    pub fn reduced(&self) -> bool {
        self.epochs < self.default_epochs
    }
}

pub fn format_report_manifest(m: &ReportManifest) -> String {
    let mut out = format!("{REPORT_MAGIC} {FORMAT_VERSION}\n");
    let _ = writeln!(out, "config_sha256 {}", m.config_sha256);
    let _ = writeln!(out, "master_seed {}", m.master_seed);
    let _ = writeln!(out, "recordings {}", m.recordings);
    let _ = writeln!(out, "epochs {}", m.epochs);
    let _ = writeln!(out, "default_epochs {}", m.default_epochs);
    let _ = writeln!(out, "reduced_epochs {}", m.reduced());
    let _ = writeln!(out, "artifacts {}", m.artifacts.len());
    for (fold, method, sum) in &m.artifacts {
        let _ = writeln!(out, "artifact {} {method} {sum}", fold + 1);
    }
    out.push_str("end\n");
    out
}

pub fn parse_report_manifest(text: &str) -> Result<ReportManifest, DataError> {
    let mut l = Lines::new(text);
    check_magic(&mut l, REPORT_MAGIC)?;
    let config_sha256: String = l.one("config_sha256")?;
    let master_seed = l.one("master_seed")?;
    let recordings = l.one("recordings")?;
    let epochs = l.one("epochs")?;
    let default_epochs = l.one("default_epochs")?;
    let (rn, reduced) = l.keyed("reduced_epochs")?;
    if reduced.as_slice() != [if epochs < default_epochs { "true" } else { "false" }] {
        return Err(DataError::Malformed { line: rn, message: "reduced_epochs disagrees with the epoch counts".into() });
    }
    let count: usize = l.one("artifacts")?;
    let mut artifacts = Vec::new();
    for _ in 0..count {
        let (n, f) = l.keyed("artifact")?;
        match f.as_slice() {
            [fold, method, sum] => {
                let fold: usize = parse_at(n, fold)?;
                if fold == 0 {
                    return Err(DataError::Malformed { line: n, message: "folds are numbered from 1".into() });
                }
                let method = method.parse().map_err(|e: String| DataError::Malformed { line: n, message: e })?;
                artifacts.push((fold - 1, method, sum.to_string()));
            }
            _ => return Err(DataError::Malformed { line: n, message: "expected fold, method and checksum".into() }),
        }
    }
    l.end()?;
    Ok(ReportManifest { config_sha256, master_seed, recordings, epochs, default_epochs, artifacts })
}
