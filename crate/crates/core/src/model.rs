//! Records, datasets, task definitions and predictions.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Dense record index within a [`Dataset`].
pub type RecordId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: RecordId,
    pub text: String,
    /// Ground truth, used for evaluation and by the simulated oracle only.
    pub truth_label: Option<String>,
    pub token_count: u64,
    /// The `id` field of the input line, when it had one.
    pub source_id: Option<i64>,
}

impl Record {
    pub fn new(id: RecordId, text: impl Into<String>, truth_label: Option<String>) -> Self {
        let text = text.into();
        let token_count = estimate_tokens(&text);
        Record {
            id,
            text,
            truth_label,
            token_count,
            source_id: None,
        }
    }
}

/// Token estimate: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    text.chars().count().div_ceil(4) as u64
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    /// Builds a dataset from texts and optional truth labels, assigning ids
    /// in order.
    pub fn from_texts<I, S>(rows: I) -> Self
    where
        I: IntoIterator<Item = (S, Option<String>)>,
        S: Into<String>,
    {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(id, (text, label))| Record::new(id, text, label))
            .collect();
        Dataset { records }
    }

    /// Fails unless ids are exactly `0..n` in order.
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.id != i {
                return Err(Error::InvalidInput(format!(
                    "record at position {i} has id {}; ids must be dense and ordered",
                    r.id
                )));
            }
        }
        Ok(Dataset { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn get(&self, id: RecordId) -> Option<&Record> {
        self.records.get(id)
    }

    pub fn has_truth(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.truth_label.is_some())
    }

    pub fn total_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.token_count).sum()
    }
}

/// Field names used when reading JSONL input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub id: String,
    pub text: String,
    pub label: String,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            id: "id".into(),
            text: "text".into(),
            label: "label".into(),
        }
    }
}

pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse_err("expected a JSON object".into()))?;
        let text = obj
            .get(&schema.text)
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(format!("missing string field `{}`", schema.text)))?;
        let source_id = match obj.get(&schema.id) {
            None | Some(Value::Null) => None,
            Some(v) => {
                let id = v
                    .as_i64()
                    .ok_or_else(|| parse_err(format!("field `{}` must be an integer", schema.id)))?;
                if !seen_ids.insert(id) {
                    return Err(Error::DuplicateId {
                        id: id as usize,
                        line: line_no,
                    });
                }
                Some(id)
            }
        };
        let truth_label = match obj.get(&schema.label) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            Some(_) => return Err(parse_err(format!("field `{}` must be a string", schema.label))),
        };
        let mut record = Record::new(records.len(), text, truth_label);
        record.source_id = source_id;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(Dataset { records })
}

/// Writes a dataset as JSONL in the default schema. `id` is emitted only for
/// records that carried one on input, so reloading reproduces the records.
pub fn write_dataset(dataset: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    for r in dataset.records() {
        let mut obj = Map::new();
        if let Some(id) = r.source_id {
            obj.insert("id".into(), Value::from(id));
        }
        obj.insert("text".into(), Value::from(r.text.clone()));
        if let Some(label) = &r.truth_label {
            obj.insert("label".into(), Value::from(label.clone()));
        }
        serde_json::to_writer(&mut *out, &Value::Object(obj))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelDef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl LabelDef {
    pub fn new(name: impl Into<String>) -> Self {
        LabelDef {
            name: name.into(),
            description: None,
        }
    }

    pub fn with_description(name: impl Into<String>, description: impl Into<String>) -> Self {
        LabelDef {
            name: name.into(),
            description: Some(description.into()),
        }
    }
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelDef>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Scoring,
    Clustering,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Scoring => "scoring",
            TaskKind::Clustering => "clustering",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    kind: TaskKind,
    instruction: String,
    labels: Vec<LabelDef>,
    k: usize,
}

impl TaskSpec {
    pub fn classification(instruction: impl Into<String>, labels: Vec<LabelDef>) -> Result<Self> {
        let k = labels.len();
        Self::new(TaskKind::Classification, instruction, labels, k)
    }

    /// Scores are `1..=k`. Without descriptions the score numbers become the
    /// label names.
    pub fn scoring(instruction: impl Into<String>, k: usize, labels: Vec<LabelDef>) -> Result<Self> {
        let labels = if labels.is_empty() {
            (1..=k).map(|s| LabelDef::new(s.to_string())).collect()
        } else {
            labels
        };
        Self::new(TaskKind::Scoring, instruction, labels, k)
    }

    pub fn clustering(instruction: impl Into<String>, k: usize) -> Result<Self> {
        Self::new(TaskKind::Clustering, instruction, Vec::new(), k)
    }

    pub fn new(
        kind: TaskKind,
        instruction: impl Into<String>,
        labels: Vec<LabelDef>,
        k: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidTask("k must be positive".into()));
        }
        match kind {
            TaskKind::Classification | TaskKind::Scoring if labels.len() != k => {
                return Err(Error::InvalidTask(format!(
                    "{kind} task needs exactly k={k} labels, got {}",
                    labels.len()
                )));
            }
            TaskKind::Clustering if !labels.is_empty() => {
                return Err(Error::InvalidTask(
                    "clustering labels are generated, not supplied".into(),
                ));
            }
            _ => {}
        }
        validate_labels(&labels)?;
        Ok(TaskSpec {
            kind,
            instruction: instruction.into(),
            labels,
            k,
        })
    }

    /// Copy of a clustering task with generated labels filled in.
    pub fn with_generated_labels(&self, labels: Vec<LabelDef>) -> Result<Self> {
        if labels.len() != self.k {
            return Err(Error::InvalidTask(format!(
                "expected {} generated labels, got {}",
                self.k,
                labels.len()
            )));
        }
        validate_labels(&labels)?;
        Ok(TaskSpec {
            labels,
            ..self.clone()
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn labels(&self) -> &[LabelDef] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn has_labels(&self) -> bool {
        self.labels.len() == self.k
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    /// Maps a truth or predicted label string to a label index. Scoring tasks
    /// also accept the score number itself.
    pub fn resolve_label(&self, value: &str) -> Option<usize> {
        self.label_index(value).or_else(|| match self.kind {
            TaskKind::Scoring => value
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|s| (1..=self.k).contains(s))
                .map(|s| s - 1),
            _ => None,
        })
    }
}

fn validate_labels(labels: &[LabelDef]) -> Result<()> {
    let mut names = HashSet::new();
    for l in labels {
        if l.name.trim().is_empty() {
            return Err(Error::InvalidTask("label names must be non-empty".into()));
        }
        if !names.insert(l.name.as_str()) {
            return Err(Error::InvalidTask(format!("duplicate label `{}`", l.name)));
        }
    }
    Ok(())
}

/// Predicted label index (0-based; score `s` is index `s - 1`) per record.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet(BTreeMap<RecordId, usize>);

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: RecordId, label: usize) -> Option<usize> {
        self.0.insert(id, label)
    }

    pub fn get(&self, id: RecordId) -> Option<usize> {
        self.0.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RecordId, usize)> + '_ {
        self.0.iter().map(|(&id, &l)| (id, l))
    }

    pub fn contains(&self, id: RecordId) -> bool {
        self.0.contains_key(&id)
    }

    /// Merges `other` in; returns the ids that were already present.
    pub fn extend_disjoint(&mut self, other: PredictionSet) -> Vec<RecordId> {
        let mut clashes = Vec::new();
        for (id, label) in other.0 {
            if self.0.insert(id, label).is_some() {
                clashes.push(id);
            }
        }
        clashes
    }

    /// Records grouped by predicted label, `k` groups.
    pub fn partition(&self, k: usize) -> Vec<Vec<RecordId>> {
        let mut groups = vec![Vec::new(); k];
        for (id, label) in self.iter() {
            groups[label].push(id);
        }
        groups
    }

    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        match self.0.iter().find(|(_, &l)| l >= task.k()) {
            Some((id, l)) => Err(Error::InvalidInput(format!(
                "record {id} predicted label index {l} outside 0..{}",
                task.k()
            ))),
            None => Ok(()),
        }
    }
}

impl FromIterator<(RecordId, usize)> for PredictionSet {
    fn from_iter<T: IntoIterator<Item = (RecordId, usize)>>(iter: T) -> Self {
        PredictionSet(iter.into_iter().collect())
    }
}

/// Truth labels of a dataset as a prediction set; records whose truth does not
/// resolve against the task labels are reported.
pub fn truth_predictions(dataset: &Dataset, task: &TaskSpec) -> Result<PredictionSet> {
    dataset
        .records()
        .iter()
        .map(|r| {
            let truth = r
                .truth_label
                .as_deref()
                .ok_or_else(|| Error::InvalidInput(format!("record {} has no truth label", r.id)))?;
            task.resolve_label(truth)
                .map(|l| (r.id, l))
                .ok_or_else(|| {
                    Error::InvalidInput(format!("record {} truth `{truth}` is not a task label", r.id))
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn token_estimates() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
        assert_eq!(estimate_tokens("a a a a a a a a"), 4);
    }

    #[test]
    fn loads_dense_ids_in_file_order() {
        let f = write_tmp(
            "{\"text\": \"alpha\", \"label\": \"x\"}\n{\"text\": \"beta\"}\n{\"text\": \"gamma\", \"label\": \"y\"}\n",
        );
        let ds = load_dataset(f.path(), &Schema::default()).unwrap();
        assert_eq!(ds.len(), 3);
        let ids: Vec<_> = ds.records().iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(ds.records()[0].truth_label.as_deref(), Some("x"));
        assert_eq!(ds.records()[1].truth_label, None);
        assert!(!ds.has_truth());
    }

    #[test]
    fn malformed_line_is_reported() {
        let f = write_tmp("{\"text\": \"ok\"}\n{\"text\": oops}\n");
        match load_dataset(f.path(), &Schema::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_duplicate_inputs_fail() {
        let f = write_tmp("\n");
        assert!(matches!(
            load_dataset(f.path(), &Schema::default()),
            Err(Error::EmptyDataset(_))
        ));
        let f = write_tmp("{\"id\": 4, \"text\": \"a\"}\n{\"id\": 4, \"text\": \"b\"}\n");
        assert!(matches!(
            load_dataset(f.path(), &Schema::default()),
            Err(Error::DuplicateId { id: 4, line: 2 })
        ));
    }

    #[test]
    fn custom_schema() {
        let f = write_tmp("{\"body\": \"hello\", \"cls\": \"a\"}\n");
        let schema = Schema {
            id: "rid".into(),
            text: "body".into(),
            label: "cls".into(),
        };
        let ds = load_dataset(f.path(), &schema).unwrap();
        assert_eq!(ds.records()[0].text, "hello");
        assert_eq!(ds.records()[0].truth_label.as_deref(), Some("a"));
    }

    #[test]
    fn task_invariants() {
        assert!(TaskSpec::classification("p", vec![LabelDef::new("a"), LabelDef::new("a")]).is_err());
        assert!(TaskSpec::classification("p", vec![]).is_err());
        assert!(TaskSpec::new(TaskKind::Clustering, "p", vec![LabelDef::new("a")], 1).is_err());
        let s = TaskSpec::scoring("p", 5, vec![]).unwrap();
        assert_eq!(s.labels()[4].name, "5");
        assert_eq!(s.resolve_label("3"), Some(2));
        assert_eq!(s.resolve_label("6"), None);
        let c = TaskSpec::clustering("p", 2).unwrap();
        assert!(!c.has_labels());
        let c = c
            .with_generated_labels(vec![LabelDef::new("x"), LabelDef::new("y")])
            .unwrap();
        assert_eq!(c.label_index("y"), Some(1));
    }

    proptest::proptest! {
        #[test]
        fn estimate_is_monotone(a in ".{0,40}", b in ".{0,40}") {
            let joined = format!("{a}{b}");
            proptest::prop_assert!(estimate_tokens(&joined) >= estimate_tokens(&a));
            if !a.is_empty() {
                proptest::prop_assert!(estimate_tokens(&a) >= 1);
            }
        }

        #[test]
        fn write_then_load_round_trips(
            rows in proptest::collection::vec(("[a-z \"\\\\]{1,20}", proptest::option::of("[a-z]{1,5}")), 1..20)
        ) {
            let ds = Dataset::from_texts(rows);
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            let f = write_tmp(std::str::from_utf8(&buf).unwrap());
            let back = load_dataset(f.path(), &Schema::default()).unwrap();
            proptest::prop_assert_eq!(back, ds);
        }
    }
}
