//! Output files, written through a temporary file and renamed into place.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use holdup_core::model::{Dataset, PredictionSet, RecordId, TaskKind, TaskSpec};

use crate::CliError;

pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| CliError::io(format!("writing {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    {
        let mut out = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut out).map_err(fail)?;
        out.flush().map_err(fail)?;
    }
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        out.write_all(b"\n")
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// One line of the predictions file.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: i64,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<usize>,
}

/// The id a record is known by outside the run: its input id when it had
/// one, its position otherwise.
fn external_id(dataset: &Dataset, id: RecordId) -> i64 {
    dataset
        .get(id)
        .and_then(|r| r.source_id)
        .unwrap_or(id as i64)
}

pub fn write_predictions(
    path: &Path,
    dataset: &Dataset,
    task: &TaskSpec,
    predictions: &PredictionSet,
) -> Result<(), CliError> {
    write_atomic(path, |out| {
        for (id, label) in predictions.iter() {
            let line = PredictionLine {
                id: external_id(dataset, id),
                label: task.labels()[label].name.clone(),
                score: (task.kind() == TaskKind::Scoring).then_some(label + 1),
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Predicted label names keyed by dataset record id.
pub fn read_predictions(path: &Path, dataset: &Dataset) -> Result<HashMap<RecordId, String>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(format!("reading {}: {e}", path.display())))?;
    let by_external: HashMap<i64, RecordId> = dataset
        .records()
        .iter()
        .map(|r| (external_id(dataset, r.id), r.id))
        .collect();
    let mut out = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(format!("reading {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line)
            .map_err(|e| CliError::io(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        let id = *by_external
            .get(&p.id)
            .ok_or_else(|| CliError::usage(format!("prediction for unknown record id {}", p.id)))?;
        if out.insert(id, p.label).is_some() {
            return Err(CliError::usage(format!("record id {} predicted twice", p.id)));
        }
    }
    Ok(out)
}
