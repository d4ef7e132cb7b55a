use std::fs;
use std::path::Path;

use super::{parse_smf, Sequence};
use crate::error::{Error, Result};
use crate::role::TrackRole;

/// Column names to read from the metadata CSV. The defaults match the
/// `file,track_role` schema this crate writes; real exports with other
/// headers can be mapped here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub file: String,
    pub role: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap { file: "file".into(), role: "track_role".into() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    /// `(file name, sequence, role)` in CSV row order.
    pub examples: Vec<(String, Sequence, TrackRole)>,
    /// Files listed in the CSV that were not found.
    pub missing: Vec<String>,
}

impl LabeledSet {
    pub fn class_histogram(&self) -> [usize; 6] {
        let mut h = [0; 6];
        for (_, _, r) in &self.examples {
            h[r.index()] += 1;
        }
        h
    }
}

pub fn load_labeled_dataset(midi_dir: &Path, metadata: &Path, columns: &ColumnMap) -> Result<LabeledSet> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(metadata)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Dataset(format!("{}: missing column `{name}`", metadata.display()))
        })
    };
    let file_col = col(&columns.file)?;
    let role_col = col(&columns.role)?;

    let mut out = LabeledSet::default();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let row = row + 1;
        let file = record.get(file_col).unwrap_or_default().to_string();
        let role_str = record.get(role_col).unwrap_or_default();
        let role: TrackRole = role_str.parse().map_err(|_| {
            Error::Dataset(format!("row {row}: unknown track role `{role_str}` (file `{file}`)"))
        })?;
        let path = midi_dir.join(&file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                out.missing.push(file);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut seq = parse_smf(&bytes)
            .map_err(|e| Error::Dataset(format!("row {row}: {}: {e}", path.display())))?;
        seq.role = Some(role);
        out.examples.push((file, seq, role));
    }
    Ok(out)
}

/// Writes a `file,track_role` metadata CSV.
pub fn write_metadata_csv(path: &Path, rows: &[(String, TrackRole)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["file", "track_role"])?;
    for (file, role) in rows {
        w.write_record([file.as_str(), role.as_str()])?;
    }
    w.flush()?;
    Ok(())
}
