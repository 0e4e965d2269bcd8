//! Dataset ingestion (IDX, CSV), synthetic generation, model persistence,
//! and PGM image-grid export.
//!
//! The model file is a versioned, self-describing text format with one value
//! per token. Floats are written in their shortest round-trip decimal form,
//! so `load(save(m))` reproduces `m` bitwise and files diff cleanly.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{MfaError, Result};
use crate::model::{
    sample, MfaComponent, MfaModel, MixtureDensity, PrecisionComponent, PrecisionModel, PsiMode,
    PSI_FLOOR,
};

const MODEL_FORMAT_VERSION: u32 = 1;
const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A data matrix (one row per sample) with optional integer labels and, for
/// image sources, the original tile shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub data: DMatrix<f64>,
    pub labels: Option<Vec<i64>>,
    pub source_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    /// Keeps only the rows whose label is in `classes`. Errors if the
    /// dataset has no labels.
    pub fn filter_classes(&self, classes: &[i64]) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| MfaError::InvalidModel("dataset has no labels to filter".into()))?;
        let keep: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect();
        let d = self.d();
        let mut data = DMatrix::zeros(keep.len(), d);
        let mut new_labels = Vec::with_capacity(keep.len());
        for (dst, &src) in keep.iter().enumerate() {
            for j in 0..d {
                data[(dst, j)] = self.data[(src, j)];
            }
            new_labels.push(labels[src]);
        }
        Ok(Dataset {
            data,
            labels: Some(new_labels),
            source_shape: self.source_shape,
        })
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| MfaError::Parse {
            line: 0,
            message: "idx file truncated before header end".into(),
        })?;
    Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
}

/// Parses big-endian IDX image files (magic `0x00000803`, unsigned bytes)
/// and optionally a matching label file (magic `0x00000801`). Pixels are
/// scaled to `[0, 1]`; images are flattened row-major. Files must be
/// pre-decompressed.
pub fn load_idx<P: AsRef<Path>>(image_path: P, label_path: Option<P>) -> Result<Dataset> {
    let bytes = fs::read(image_path.as_ref())?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(MfaError::Parse {
            line: 0,
            message: format!("unexpected magic {magic:#010x} (expected {IDX_IMAGE_MAGIC:#010x})"),
        });
    }
    let count = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    let d = rows * cols;
    let expected = 16 + count * d;
    if bytes.len() != expected {
        return Err(MfaError::Parse {
            line: 0,
            message: format!(
                "idx payload is {} bytes, expected {expected} for {count} images of {rows}x{cols}",
                bytes.len()
            ),
        });
    }
    let mut data = DMatrix::zeros(count, d);
    for i in 0..count {
        for j in 0..d {
            data[(i, j)] = bytes[16 + i * d + j] as f64 / 255.0;
        }
    }

    let labels = match label_path {
        None => None,
        Some(path) => {
            let lbytes = fs::read(path.as_ref())?;
            let lmagic = read_be_u32(&lbytes, 0)?;
            if lmagic != IDX_LABEL_MAGIC {
                return Err(MfaError::Parse {
                    line: 0,
                    message: format!(
                        "unexpected label magic {lmagic:#010x} (expected {IDX_LABEL_MAGIC:#010x})"
                    ),
                });
            }
            let lcount = read_be_u32(&lbytes, 4)? as usize;
            if lbytes.len() != 8 + lcount {
                return Err(MfaError::Parse {
                    line: 0,
                    message: format!(
                        "label payload is {} bytes, expected {}",
                        lbytes.len(),
                        8 + lcount
                    ),
                });
            }
            if lcount != count {
                return Err(MfaError::Parse {
                    line: 0,
                    message: format!("{count} images but {lcount} labels"),
                });
            }
            Some(lbytes[8..].iter().map(|&b| b as i64).collect())
        }
    };

    Ok(Dataset {
        data,
        labels,
        source_shape: Some((rows, cols)),
    })
}

/// Loads a comma-separated numeric file. With `has_header`, a final column
/// named `label` is split off as integer labels. Ragged rows and non-numeric
/// cells are rejected with their line number.
pub fn load_csv<P: AsRef<Path>>(path: P, has_header: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines().enumerate();

    let mut label_col: Option<usize> = None;
    let mut width: Option<usize> = None;
    if has_header {
        let (_, header) = lines.next().ok_or(MfaError::Parse {
            line: 1,
            message: "empty file, header expected".into(),
        })?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        width = Some(names.len());
        if names.last().map(|n| n.eq_ignore_ascii_case("label")) == Some(true) {
            label_col = Some(names.len() - 1);
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if cells.len() != w => {
                return Err(MfaError::Parse {
                    line: line_no,
                    message: format!("expected {w} columns, found {}", cells.len()),
                });
            }
            Some(_) => {}
        }
        let mut row = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            if Some(c) == label_col {
                let label: i64 = cell.parse().map_err(|_| MfaError::Parse {
                    line: line_no,
                    message: format!("label cell {cell:?} is not an integer"),
                })?;
                labels.push(label);
            } else {
                let value: f64 = cell.parse().map_err(|_| MfaError::Parse {
                    line: line_no,
                    message: format!("cell {cell:?} is not numeric"),
                })?;
                row.push(value);
            }
        }
        rows.push(row);
    }

    let d = match (rows.first(), width, label_col) {
        (Some(r), _, _) => r.len(),
        (None, Some(w), Some(_)) => w - 1,
        (None, Some(w), None) => w,
        (None, None, _) => {
            return Err(MfaError::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let mut data = DMatrix::zeros(rows.len(), d);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..d {
            data[(i, j)] = row[j];
        }
    }
    Ok(Dataset {
        data,
        labels: if label_col.is_some() { Some(labels) } else { None },
        source_shape: None,
    })
}

/// Writes a dataset as CSV with header `x0,...,x{D-1}[,label]`, the inverse
/// of [`load_csv`] with a header.
pub fn write_csv<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<()> {
    let mut out = String::new();
    let d = dataset.d();
    for j in 0..d {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "x{j}");
    }
    if dataset.labels.is_some() {
        out.push_str(if d > 0 { ",label" } else { "label" });
    }
    out.push('\n');
    for i in 0..dataset.n() {
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{:?}", dataset.data[(i, j)]);
        }
        if let Some(labels) = &dataset.labels {
            if d > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", labels[i]);
        }
        out.push('\n');
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Draws a synthetic dataset from a ground-truth model; labels record the
/// generating component of each row.
pub fn synth_generate(true_model: &MfaModel, n: usize, seed: u64) -> Dataset {
    let (data, labels) = sample(true_model, n, seed);
    Dataset {
        data,
        labels: Some(labels.into_iter().map(|k| k as i64).collect()),
        source_shape: None,
    }
}

/// A persisted model in either parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Covariance(MfaModel),
    Precision(PrecisionModel),
}

impl From<MfaModel> for ModelFile {
    fn from(m: MfaModel) -> Self {
        ModelFile::Covariance(m)
    }
}

impl From<PrecisionModel> for ModelFile {
    fn from(m: PrecisionModel) -> Self {
        ModelFile::Precision(m)
    }
}

impl ModelFile {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            ModelFile::Covariance(m) => m.dims(),
            ModelFile::Precision(m) => m.dims(),
        }
    }

    /// The covariance-form view: identity for covariance models, the
    /// generative-parameter conversion for precision models.
    pub fn to_generative(&self) -> Result<MfaModel> {
        match self {
            ModelFile::Covariance(m) => Ok(m.clone()),
            ModelFile::Precision(m) => m.to_generative(),
        }
    }
}

impl MixtureDensity for ModelFile {
    fn n_components(&self) -> usize {
        match self {
            ModelFile::Covariance(m) => m.n_components(),
            ModelFile::Precision(m) => m.n_components(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            ModelFile::Covariance(m) => m.dim(),
            ModelFile::Precision(m) => m.dim(),
        }
    }

    fn component_weights(&self) -> Vec<f64> {
        match self {
            ModelFile::Covariance(m) => m.component_weights(),
            ModelFile::Precision(m) => m.component_weights(),
        }
    }

    fn log_density_matrix(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            ModelFile::Covariance(m) => m.log_density_matrix(data),
            ModelFile::Precision(m) => m.log_density_matrix(data),
        }
    }
}

fn push_vector(out: &mut String, name: &str, v: &DVector<f64>) {
    out.push_str(name);
    for x in v.iter() {
        let _ = write!(out, " {x:?}");
    }
    out.push('\n');
}

fn push_matrix_cols(out: &mut String, name: &str, m: &DMatrix<f64>) {
    for col in 0..m.ncols() {
        let _ = write!(out, "{name} {col}");
        for row in 0..m.nrows() {
            let _ = write!(out, " {:?}", m[(row, col)]);
        }
        out.push('\n');
    }
}

/// Serializes a model to the versioned text format.
pub fn save_model<P: AsRef<Path>>(model: &ModelFile, path: P) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "mfa-model {MODEL_FORMAT_VERSION}");
    match model {
        ModelFile::Covariance(m) => {
            let (k, d, mm) = m.dims();
            let _ = writeln!(out, "parameterization covariance");
            let _ = writeln!(out, "dims {k} {d} {mm}");
            let _ = writeln!(out, "psi_mode {}", m.psi_mode.as_str());
            for (c, comp) in m.components.iter().enumerate() {
                let _ = writeln!(out, "component {c}");
                let _ = writeln!(out, "weight {:?}", comp.weight);
                push_vector(&mut out, "mean", &comp.mean);
                push_vector(&mut out, "noise", &comp.noise);
                push_matrix_cols(&mut out, "loading_col", &comp.loading);
            }
        }
        ModelFile::Precision(m) => {
            let (k, d, mm) = m.dims();
            let _ = writeln!(out, "parameterization precision");
            let _ = writeln!(out, "dims {k} {d} {mm}");
            let _ = writeln!(out, "m_min {:?}", m.m_min);
            let _ = writeln!(out, "d_max {:?}", m.d_max);
            for (c, comp) in m.components.iter().enumerate() {
                let _ = writeln!(out, "component {c}");
                let _ = writeln!(out, "weight {:?}", comp.weight);
                push_vector(&mut out, "mean", &comp.mean);
                push_vector(&mut out, "sqrt_prec", &comp.sqrt_prec);
                push_matrix_cols(&mut out, "prec_loading_col", &comp.prec_loading);
            }
        }
    }
    out.push_str("end\n");
    fs::write(path.as_ref(), out)?;
    Ok(())
}

struct TokenReader<'a> {
    lines: Vec<(usize, Vec<&'a str>)>,
    cursor: usize,
}

impl<'a> TokenReader<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.split_whitespace().collect()))
            .collect();
        TokenReader { lines, cursor: 0 }
    }

    fn next_line(&mut self, expected_key: &str) -> Result<(usize, &[&'a str])> {
        let (line_no, tokens) = self.lines.get(self.cursor).ok_or_else(|| {
            MfaError::ModelFormat(format!("unexpected end of file, expected {expected_key:?}"))
        })?;
        self.cursor += 1;
        if tokens[0] != expected_key {
            return Err(MfaError::ModelFormat(format!(
                "line {line_no}: expected {expected_key:?}, found {:?}",
                tokens[0]
            )));
        }
        Ok((*line_no, &tokens[1..]))
    }
}

fn parse_floats(line_no: usize, tokens: &[&str], expected: usize) -> Result<Vec<f64>> {
    if tokens.len() != expected {
        return Err(MfaError::ModelFormat(format!(
            "line {line_no}: expected {expected} values, found {}",
            tokens.len()
        )));
    }
    tokens
        .iter()
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| {
                MfaError::ModelFormat(format!("line {line_no}: {t:?} is not a number"))
            })?;
            if !v.is_finite() {
                return Err(MfaError::ModelFormat(format!(
                    "line {line_no}: non-finite value {t:?}"
                )));
            }
            Ok(v)
        })
        .collect()
}

fn parse_matrix_cols(
    reader: &mut TokenReader,
    key: &str,
    d: usize,
    m: usize,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(d, m);
    for col in 0..m {
        let (line_no, rest) = reader.next_line(key)?;
        let declared: usize = rest
            .first()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| MfaError::ModelFormat(format!("line {line_no}: missing column index")))?;
        if declared != col {
            return Err(MfaError::ModelFormat(format!(
                "line {line_no}: column {declared}, expected {col}"
            )));
        }
        let values = parse_floats(line_no, &rest[1..], d)?;
        for row in 0..d {
            out[(row, col)] = values[row];
        }
    }
    Ok(out)
}

/// Loads a model file, validating the format version, the dimensions, the
/// weight-sum invariant, the noise floor (covariance form), and the
/// positive-definiteness of every `M_k` plus the `E <= d_max` bound
/// (precision form).
pub fn load_model<P: AsRef<Path>>(path: P) -> Result<ModelFile> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut reader = TokenReader::new(&text);

    let (line_no, rest) = reader.next_line("mfa-model")?;
    let version: u32 = rest
        .first()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| MfaError::ModelFormat(format!("line {line_no}: missing version")))?;
    if version != MODEL_FORMAT_VERSION {
        return Err(MfaError::VersionMismatch {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }

    let (line_no, rest) = reader.next_line("parameterization")?;
    let kind = *rest.first().ok_or_else(|| {
        MfaError::ModelFormat(format!("line {line_no}: missing parameterization"))
    })?;

    let (line_no, rest) = reader.next_line("dims")?;
    if rest.len() != 3 {
        return Err(MfaError::ModelFormat(format!(
            "line {line_no}: dims needs 3 integers"
        )));
    }
    let dims: Vec<usize> = rest
        .iter()
        .map(|t| {
            t.parse()
                .map_err(|_| MfaError::ModelFormat(format!("line {line_no}: bad dimension {t:?}")))
        })
        .collect::<Result<_>>()?;
    let (k, d, m) = (dims[0], dims[1], dims[2]);

    match kind {
        "covariance" => {
            let (line_no, rest) = reader.next_line("psi_mode")?;
            let mode = PsiMode::parse(rest.first().copied().ok_or_else(|| {
                MfaError::ModelFormat(format!("line {line_no}: missing psi mode"))
            })?)?;
            let mut comps = Vec::with_capacity(k);
            for c in 0..k {
                let (line_no, rest) = reader.next_line("component")?;
                let declared: Option<usize> = rest.first().and_then(|t| t.parse().ok());
                if declared != Some(c) {
                    return Err(MfaError::ModelFormat(format!(
                        "line {line_no}: component out of order"
                    )));
                }
                let (wl, wr) = reader.next_line("weight")?;
                let weight = parse_floats(wl, wr, 1)?[0];
                let (ml, mr) = reader.next_line("mean")?;
                let mean = DVector::from_vec(parse_floats(ml, mr, d)?);
                let (nl, nr) = reader.next_line("noise")?;
                let noise = DVector::from_vec(parse_floats(nl, nr, d)?);
                for (i, &p) in noise.iter().enumerate() {
                    if p < PSI_FLOOR {
                        return Err(MfaError::InvalidModel(format!(
                            "component {c} noise[{i}] = {p} below floor {PSI_FLOOR}"
                        )));
                    }
                }
                let loading = parse_matrix_cols(&mut reader, "loading_col", d, m)?;
                comps.push(MfaComponent::new(weight, mean, loading, noise)?);
            }
            reader.next_line("end")?;
            Ok(ModelFile::Covariance(MfaModel::new(comps, mode)?))
        }
        "precision" => {
            let (ll, lr) = reader.next_line("m_min")?;
            let m_min = parse_floats(ll, lr, 1)?[0];
            let (dl, dr) = reader.next_line("d_max")?;
            let d_max = parse_floats(dl, dr, 1)?[0];
            let mut comps = Vec::with_capacity(k);
            for c in 0..k {
                let (line_no, rest) = reader.next_line("component")?;
                let declared: Option<usize> = rest.first().and_then(|t| t.parse().ok());
                if declared != Some(c) {
                    return Err(MfaError::ModelFormat(format!(
                        "line {line_no}: component out of order"
                    )));
                }
                let (wl, wr) = reader.next_line("weight")?;
                let weight = parse_floats(wl, wr, 1)?[0];
                let (ml, mr) = reader.next_line("mean")?;
                let mean = DVector::from_vec(parse_floats(ml, mr, d)?);
                let (sl, sr) = reader.next_line("sqrt_prec")?;
                let sqrt_prec = DVector::from_vec(parse_floats(sl, sr, d)?);
                let loading = parse_matrix_cols(&mut reader, "prec_loading_col", d, m)?;
                let comp = PrecisionComponent::new(weight, mean, sqrt_prec, loading)?;
                for (i, e) in comp.prec_diag().iter().enumerate() {
                    if *e > d_max {
                        return Err(MfaError::InvalidModel(format!(
                            "component {c} precision diagonal [{i}] = {e} exceeds d_max {d_max}"
                        )));
                    }
                }
                // Positive-definiteness of M_k.
                crate::model::precision_loglik(&comp, &DVector::zeros(d)).map_err(|e| match e {
                    MfaError::IndefinitePrecision { eigenvalue, .. } => {
                        MfaError::InvalidModel(format!(
                            "component {c}: M_k has non-positive eigenvalue {eigenvalue}"
                        ))
                    }
                    other => other,
                })?;
                comps.push(comp);
            }
            reader.next_line("end")?;
            Ok(ModelFile::Precision(PrecisionModel::new(comps, m_min, d_max)?))
        }
        other => Err(MfaError::ModelFormat(format!(
            "unknown parameterization {other:?}"
        ))),
    }
}

/// Arranges row vectors as tiles of shape `(rows, cols)` in a near-square
/// grid and writes a binary PGM (P5, maxval 255). Values map linearly from
/// `value_range` onto 0..=255 with clipping.
pub fn write_image_grid<P: AsRef<Path>>(
    rows: &DMatrix<f64>,
    shape: (usize, usize),
    path: P,
    value_range: (f64, f64),
) -> Result<()> {
    let (tile_r, tile_c) = shape;
    let n = rows.nrows();
    if n == 0 {
        return Err(MfaError::EmptyInput("write_image_grid: no rows"));
    }
    if rows.ncols() != tile_r * tile_c {
        return Err(MfaError::DimensionMismatch {
            expected: tile_r * tile_c,
            got: rows.ncols(),
            context: "image grid tile shape",
        });
    }
    let (lo, hi) = value_range;
    if !(hi > lo) {
        return Err(MfaError::InvalidModel(format!(
            "invalid value range ({lo}, {hi})"
        )));
    }
    let grid_cols = (n as f64).sqrt().ceil() as usize;
    let grid_rows = n.div_ceil(grid_cols);
    let width = grid_cols * tile_c;
    let height = grid_rows * tile_r;

    let mut pixels = vec![0u8; width * height];
    for tile in 0..n {
        let gr = tile / grid_cols;
        let gc = tile % grid_cols;
        for r in 0..tile_r {
            for c in 0..tile_c {
                let v = rows[(tile, r * tile_c + c)];
                let scaled = ((v - lo) / (hi - lo) * 255.0).round();
                let byte = scaled.clamp(0.0, 255.0) as u8;
                pixels[(gr * tile_r + r) * width + gc * tile_c + c] = byte;
            }
        }
    }

    let mut file = fs::File::create(path.as_ref())?;
    write!(file, "P5\n{width} {height}\n255\n")?;
    file.write_all(&pixels)?;
    Ok(())
}

/// Reads one float per line, ignoring blank lines.
pub fn read_scores<P: AsRef<Path>>(path: P) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut scores = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        scores.push(t.parse().map_err(|_| MfaError::Parse {
            line: idx + 1,
            message: format!("{t:?} is not a number"),
        })?);
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::total_loglik;
    use crate::rng::CounterRng;
    use approx::assert_relative_eq;

    fn tempdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("create temp dir")
    }

    fn idx_image_fixture(dir: &Path) -> std::path::PathBuf {
        // Two 2x2 images: (0, 255, 128, 64) and (10, 20, 30, 40).
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 255, 128, 64, 10, 20, 30, 40]);
        let path = dir.join("images.idx");
        fs::write(&path, bytes).unwrap();
        path
    }

    fn idx_label_fixture(dir: &Path) -> std::path::PathBuf {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[7, 2]);
        let path = dir.join("labels.idx");
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn idx_parses_known_bytes() {
        let dir = tempdir();
        let images = idx_image_fixture(dir.path());
        let labels = idx_label_fixture(dir.path());
        let ds = load_idx(&images, Some(&labels)).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.d(), 4);
        assert_eq!(ds.source_shape, Some((2, 2)));
        assert_eq!(ds.data[(0, 0)], 0.0);
        assert_eq!(ds.data[(0, 1)], 1.0);
        assert_relative_eq!(ds.data[(0, 2)], 128.0 / 255.0);
        assert_relative_eq!(ds.data[(0, 3)], 64.0 / 255.0);
        assert_eq!(ds.labels, Some(vec![7, 2]));
        assert!(ds.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let dir = tempdir();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0802u32.to_be_bytes());
        bytes.extend_from_slice(&[0; 12]);
        let path = dir.path().join("bad.idx");
        fs::write(&path, bytes).unwrap();
        match load_idx(&path, None) {
            Err(MfaError::Parse { message, .. }) => {
                assert!(message.contains("unexpected magic"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_rejects_truncated_payload() {
        let dir = tempdir();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 255, 128]); // five bytes short
        let path = dir.path().join("short.idx");
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_idx(&path, None),
            Err(MfaError::Parse { .. })
        ));
    }

    #[test]
    fn idx_rejects_label_count_mismatch() {
        let dir = tempdir();
        let images = idx_image_fixture(dir.path());
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[7, 2, 1]);
        let lpath = dir.path().join("labels3.idx");
        fs::write(&lpath, bytes).unwrap();
        assert!(matches!(
            load_idx(&images, Some(&lpath)),
            Err(MfaError::Parse { .. })
        ));
    }

    #[test]
    fn csv_basic_matrix() {
        let dir = tempdir();
        let path = dir.path().join("plain.csv");
        fs::write(&path, "1,2\n3,4\n").unwrap();
        let ds = load_csv(&path, false).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.data[(0, 0)], 1.0);
        assert_eq!(ds.data[(1, 1)], 4.0);
        assert!(ds.labels.is_none());
    }

    #[test]
    fn csv_ragged_row_reports_line() {
        let dir = tempdir();
        let path = dir.path().join("ragged.csv");
        fs::write(&path, "1,2\n3\n").unwrap();
        match load_csv(&path, false) {
            Err(MfaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_non_numeric_cell_rejected() {
        let dir = tempdir();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "1,foo\n").unwrap();
        assert!(matches!(
            load_csv(&path, false),
            Err(MfaError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn csv_header_with_label_column() {
        let dir = tempdir();
        let path = dir.path().join("labeled.csv");
        fs::write(&path, "x0,x1,label\n0.5,1.5,3\n2.5,3.5,1\n").unwrap();
        let ds = load_csv(&path, true).unwrap();
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.labels, Some(vec![3, 1]));
        assert_eq!(ds.data[(1, 1)], 3.5);
    }

    #[test]
    fn csv_roundtrip_through_writer() {
        let dir = tempdir();
        let path = dir.path().join("rt.csv");
        let ds = Dataset {
            data: DMatrix::from_row_slice(2, 3, &[0.25, -1.5, 3.0, 0.1, 0.2, 0.3]),
            labels: Some(vec![0, 1]),
            source_shape: None,
        };
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, true).unwrap();
        assert_eq!(back.data, ds.data);
        assert_eq!(back.labels, ds.labels);
    }

    fn random_cov_model(seed: u64, k: usize, d: usize, m: usize) -> MfaModel {
        let mut rng = CounterRng::new(seed);
        let mut weights: Vec<f64> = (0..k).map(|_| 0.2 + rng.next_f64()).collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        let comps = weights
            .iter()
            .map(|&w| {
                MfaComponent::new(
                    w,
                    DVector::from_fn(d, |_, _| rng.normal()),
                    DMatrix::from_fn(d, m, |_, _| rng.normal() * 0.5),
                    DVector::from_fn(d, |_, _| 0.1 + rng.next_f64()),
                )
                .unwrap()
            })
            .collect();
        MfaModel::new(comps, PsiMode::Free).unwrap()
    }

    fn random_precision_model(seed: u64, k: usize, d: usize, m: usize) -> PrecisionModel {
        let mut rng = CounterRng::new(seed);
        let mut weights: Vec<f64> = (0..k).map(|_| 0.2 + rng.next_f64()).collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        let comps = weights
            .iter()
            .map(|&w| {
                PrecisionComponent::new(
                    w,
                    DVector::from_fn(d, |_, _| rng.normal()),
                    DVector::from_fn(d, |_, _| 0.8 + rng.next_f64()),
                    DMatrix::from_fn(d, m, |_, _| rng.normal() * 0.2),
                )
                .unwrap()
            })
            .collect();
        PrecisionModel::new(comps, 1e-4, 20.0).unwrap()
    }

    #[test]
    fn model_roundtrip_covariance_bitwise() {
        let dir = tempdir();
        let path = dir.path().join("cov.model");
        let model = random_cov_model(7, 3, 5, 2);
        save_model(&ModelFile::Covariance(model.clone()), &path).unwrap();
        match load_model(&path).unwrap() {
            ModelFile::Covariance(back) => {
                for (a, b) in model.components.iter().zip(back.components.iter()) {
                    assert_eq!(a.weight.to_bits(), b.weight.to_bits());
                    assert!(a.mean.iter().zip(b.mean.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
                    assert!(a.noise.iter().zip(b.noise.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
                    assert!(a
                        .loading
                        .iter()
                        .zip(b.loading.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits()));
                }
                assert_eq!(back.psi_mode, PsiMode::Free);
            }
            other => panic!("wrong parameterization {other:?}"),
        }
    }

    #[test]
    fn model_roundtrip_precision_preserves_loglik() {
        let dir = tempdir();
        let path = dir.path().join("prec.model");
        let model = random_precision_model(11, 2, 4, 2);
        let mut rng = CounterRng::new(12);
        let data = DMatrix::from_fn(6, 4, |_, _| rng.normal());
        let before = total_loglik(&model, &data).unwrap();
        save_model(&ModelFile::Precision(model), &path).unwrap();
        let back = load_model(&path).unwrap();
        let after = match &back {
            ModelFile::Precision(m) => total_loglik(m, &data).unwrap(),
            other => panic!("wrong parameterization {other:?}"),
        };
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn model_load_rejects_bad_weight_sum() {
        let dir = tempdir();
        let path = dir.path().join("badsum.model");
        let model = random_cov_model(13, 2, 3, 1);
        save_model(&ModelFile::Covariance(model), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // Scale one weight down so the sum becomes 0.9.
        let mut out = String::new();
        let mut fixed = false;
        for line in text.lines() {
            if !fixed && line.starts_with("weight ") {
                let w: f64 = line[7..].parse().unwrap();
                out.push_str(&format!("weight {:?}\n", w - 0.1));
                fixed = true;
            } else {
                out.push_str(line);
                out.push('\n');
            }
        }
        fs::write(&path, out).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(MfaError::InvalidModel(_))
        ));
    }

    #[test]
    fn model_load_rejects_version_mismatch() {
        let dir = tempdir();
        let path = dir.path().join("v9.model");
        fs::write(&path, "mfa-model 9\nparameterization covariance\n").unwrap();
        assert!(matches!(
            load_model(&path),
            Err(MfaError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn synth_generate_deterministic_and_labeled() {
        let model = random_cov_model(17, 2, 3, 1);
        let a = synth_generate(&model, 40, 5);
        let b = synth_generate(&model, 40, 5);
        assert_eq!(a.data, b.data);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels.as_ref().unwrap().len(), 40);
        let empty = synth_generate(&model, 0, 5);
        assert_eq!(empty.n(), 0);
    }

    #[test]
    fn image_grid_single_zero_tile() {
        let dir = tempdir();
        let path = dir.path().join("zero.pgm");
        let rows = DMatrix::zeros(1, 4);
        write_image_grid(&rows, (2, 2), &path, (0.0, 1.0)).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 0, 0, 0]);
    }

    #[test]
    fn image_grid_clips_out_of_range() {
        let dir = tempdir();
        let path = dir.path().join("clip.pgm");
        let rows = DMatrix::from_row_slice(1, 1, &[2.0]);
        write_image_grid(&rows, (1, 1), &path, (0.0, 1.0)).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(*bytes.last().unwrap(), 255);
    }

    #[test]
    fn image_grid_layout_two_by_two() {
        let dir = tempdir();
        let path = dir.path().join("grid.pgm");
        let rows = DMatrix::from_fn(4, 6, |i, _| i as f64 / 4.0);
        write_image_grid(&rows, (2, 3), &path, (0.0, 1.0)).unwrap();
        let bytes = fs::read(&path).unwrap();
        // 4 tiles of 2x3 arranged 2x2: width 6, height 4.
        assert_eq!(&bytes[..11], b"P5\n6 4\n255\n");
        assert_eq!(bytes.len(), 11 + 24);
    }

    #[test]
    fn image_grid_rejects_shape_mismatch() {
        let rows = DMatrix::zeros(1, 5);
        let dir = tempdir();
        assert!(matches!(
            write_image_grid(&rows, (2, 2), dir.path().join("x.pgm"), (0.0, 1.0)),
            Err(MfaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn scores_reader_parses_lines() {
        let dir = tempdir();
        let path = dir.path().join("scores.txt");
        fs::write(&path, "1.5\n-2.25\n\n3\n").unwrap();
        assert_eq!(read_scores(&path).unwrap(), vec![1.5, -2.25, 3.0]);
    }
}
