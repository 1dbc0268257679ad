//! File interchange: dataset CSV, shift-specification JSON, and atomic
//! writes.
//!
//! Dataset CSV carries the header `y,g,x0,...,x{d-1}` with UTF-8 and LF
//! line endings. Numbers are serialized with the shortest decimal that
//! round-trips, so write-then-read is the identity on values.

use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::weights::ShiftSpec;
use ndarray::{Array1, Array2};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Write bytes atomically: to a temp file in the destination directory,
/// then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Schema(format!("invalid output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Render a dataset as CSV (`y,g,x0..x{d-1}`).
pub fn dataset_to_csv<T: Scalar>(data: &GroupedDataset<T>) -> String {
    let d = data.dim();
    let mut out = String::from("y,g");
    for j in 0..d {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for i in 0..data.len() {
        out.push_str(&format!("{},{}", data.targets()[i], data.groups()[i]));
        for j in 0..d {
            out.push_str(&format!(",{}", data.features()[[i, j]]));
        }
        out.push('\n');
    }
    out
}

/// Write a dataset CSV atomically.
pub fn write_dataset_csv<T: Scalar>(path: &Path, data: &GroupedDataset<T>) -> Result<()> {
    atomic_write(path, dataset_to_csv(data).as_bytes())
}

fn parse_field<T: Scalar>(raw: &str, line: usize, what: &str) -> Result<T> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what} `{raw}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Value { line, message: format!("{what} `{raw}` is not finite") });
    }
    Ok(T::of(v))
}

/// Parse a dataset from CSV text. The header must be exactly
/// `y,g,x0..x{d-1}`; targets must be 0/1; group labels positive integers.
/// `expected_d` pins the feature dimension when the caller knows it.
pub fn dataset_from_csv<T: Scalar>(
    text: &str,
    expected_d: Option<usize>,
) -> Result<GroupedDataset<T>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty file".into()))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 3 || cols[0] != "y" || cols[1] != "g" {
        return Err(Error::Schema(format!(
            "header must start with `y,g,x0,...`; got `{header}`"
        )));
    }
    let d = cols.len() - 2;
    for (j, &c) in cols.iter().skip(2).enumerate() {
        if c != format!("x{j}") {
            return Err(Error::Schema(format!(
                "feature column {} must be named x{j}, got `{c}`",
                j + 2
            )));
        }
    }
    if let Some(expect) = expected_d {
        if d != expect {
            return Err(Error::Schema(format!("expected {expect} feature columns, found {d}")));
        }
    }

    let mut targets = Vec::new();
    let mut groups = Vec::new();
    let mut values: Vec<T> = Vec::new();
    for (idx, raw_line) in lines {
        let line = idx + 1; // 1-based, matching editors
        let trimmed = raw_line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", d + 2, fields.len()),
            });
        }
        let y: T = parse_field(fields[0], line, "target")?;
        if y != T::zero() && y != T::one() {
            return Err(Error::Value {
                line,
                message: format!("target must be 0 or 1, got {}", fields[0]),
            });
        }
        let g: usize = fields[1].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("group `{}` is not a positive integer", fields[1]),
        })?;
        if g == 0 {
            return Err(Error::Value { line, message: "group labels are 1-based".into() });
        }
        targets.push(y);
        groups.push(g);
        for (j, f) in fields[2..].iter().enumerate() {
            values.push(parse_field(f, line, &format!("x{j}"))?);
        }
    }
    if targets.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    let n = targets.len();
    let features = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::Schema(format!("shape: {e}")))?;
    GroupedDataset::with_inferred_groups(features, Array1::from_vec(targets), groups)
}

/// Read a dataset CSV from disk.
pub fn load_dataset_csv<T: Scalar>(
    path: &Path,
    expected_d: Option<usize>,
) -> Result<GroupedDataset<T>> {
    let text = fs::read_to_string(path)?;
    dataset_from_csv(&text, expected_d)
}

/// Write a shift specification as `{"p_train":[...],"p_test":[...]}`.
pub fn write_shift_json<T: Scalar + serde::Serialize>(
    path: &Path,
    shift: &ShiftSpec<T>,
) -> Result<()> {
    let json = serde_json::to_string_pretty(shift)
        .map_err(|e| Error::Schema(format!("serialize shift: {e}")))?;
    atomic_write(path, json.as_bytes())
}

/// Read a shift specification, re-validating its invariants.
pub fn load_shift_json<T: Scalar + serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<ShiftSpec<T>> {
    let text = fs::read_to_string(path)?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("shift json: {e}")))?;
    let p_train = read_prob_vec(&raw, "p_train")?;
    let p_test = read_prob_vec(&raw, "p_test")?;
    ShiftSpec::new(p_train, p_test)
}

fn read_prob_vec<T: Scalar>(value: &serde_json::Value, key: &str) -> Result<Vec<T>> {
    value
        .get(key)
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Schema(format!("missing array field `{key}`")))?
        .iter()
        .map(|v| {
            v.as_f64()
                .map(T::of)
                .ok_or_else(|| Error::Schema(format!("non-numeric entry in `{key}`")))
        })
        .collect()
}
