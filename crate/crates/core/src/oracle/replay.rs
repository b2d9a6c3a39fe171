//! Response cache keyed by request digest, plus the oracles that read from
//! and write to it.
//!
//! File format: JSONL, one `{"digest", "capability", "response", "usage"}`
//! object per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AnnotationOracle, Answer, Capability, Request, Response};
use crate::error::{Error, OracleError};
use crate::money::{SharedLedger, Usage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub capability: Capability,
    pub response: Value,
    pub usage: Usage,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayCache {
    entries: BTreeMap<String, CacheEntry>,
}

impl ReplayCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut cache = ReplayCache::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            cache.insert(entry);
        }
        Ok(cache)
    }

    /// Writes entries sorted by digest.
    pub fn write(&self, out: &mut impl Write) -> std::io::Result<()> {
        for entry in self.entries.values() {
            serde_json::to_writer(&mut *out, entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn insert(&mut self, entry: CacheEntry) -> Option<CacheEntry> {
        self.entries.insert(entry.digest.clone(), entry)
    }

    pub fn record(&mut self, request: &Request<'_>, answer: &Answer) {
        let response = serde_json::to_value(&answer.response).expect("responses serialize to JSON");
        self.insert(CacheEntry {
            digest: request.digest(),
            capability: request.capability,
            response,
            usage: answer.usage,
        });
    }

    pub fn get(&self, digest: &str) -> Option<&CacheEntry> {
        self.entries.get(digest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Answers only from a [`ReplayCache`]; a miss is an error. Charges the
/// stored usage, so a replayed run reproduces the original ledger.
pub struct ReplayOracle {
    cache: ReplayCache,
    ledger: SharedLedger,
}

impl ReplayOracle {
    pub fn new(cache: ReplayCache, ledger: SharedLedger) -> Self {
        ReplayOracle { cache, ledger }
    }

    pub fn cache(&self) -> &ReplayCache {
        &self.cache
    }
}

impl AnnotationOracle for ReplayOracle {
    fn answer(&self, request: &Request<'_>) -> Result<Answer, OracleError> {
        let digest = request.digest();
        let entry = self.cache.get(&digest).ok_or_else(|| OracleError::CacheMiss {
            capability: request.capability.to_string(),
            digest: digest.clone(),
        })?;
        if entry.capability != request.capability {
            return Err(OracleError::InvalidRequest(format!(
                "cache entry {digest} holds a {} response, request is {}",
                entry.capability, request.capability
            )));
        }
        let response: Response =
            serde_json::from_value(entry.response.clone()).map_err(|e| OracleError::Parse {
                attempts: 1,
                message: format!("cache entry {digest}: {e}"),
            })?;
        if !response.matches(request.capability) {
            return Err(OracleError::Parse {
                attempts: 1,
                message: format!("cache entry {digest} does not fit {}", request.capability),
            });
        }
        self.ledger.charge(request.model, entry.usage)?;
        Ok(Answer {
            response,
            usage: entry.usage,
        })
    }

    fn quote(&self, request: &Request<'_>) -> Usage {
        self.cache
            .get(&request.digest())
            .map(|e| e.usage)
            .unwrap_or_else(|| Usage::new(request.input_tokens(), 0))
    }

    fn ledger(&self) -> &SharedLedger {
        &self.ledger
    }
}

/// Passes calls through to `inner` and records every answer. A request that
/// is already recorded is answered from the recording without calling
/// `inner` again, though the usage is still charged.
pub struct RecordingOracle<O> {
    inner: O,
    cache: Mutex<ReplayCache>,
}

impl<O: AnnotationOracle> RecordingOracle<O> {
    pub fn new(inner: O, seed_cache: ReplayCache) -> Self {
        RecordingOracle {
            inner,
            cache: Mutex::new(seed_cache),
        }
    }

    pub fn cache(&self) -> ReplayCache {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn into_cache(self) -> ReplayCache {
        self.cache.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

impl<O: AnnotationOracle> AnnotationOracle for RecordingOracle<O> {
    fn answer(&self, request: &Request<'_>) -> Result<Answer, OracleError> {
        let digest = request.digest();
        let cached = {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            cache.get(&digest).cloned()
        };
        if let Some(entry) = cached {
            if let Ok(response) = serde_json::from_value::<Response>(entry.response) {
                if response.matches(request.capability) {
                    self.inner.ledger().charge(request.model, entry.usage)?;
                    return Ok(Answer {
                        response,
                        usage: entry.usage,
                    });
                }
            }
        }
        let answer = self.inner.answer(request)?;
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .record(request, &answer);
        Ok(answer)
    }

    fn quote(&self, request: &Request<'_>) -> Usage {
        self.inner.quote(request)
    }

    fn ledger(&self) -> &SharedLedger {
        self.inner.ledger()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LabelDef, Record, TaskSpec};
    use crate::money::{CostLedger, Money};
    use crate::oracle::{OracleExt, SimOracle, SimOracleConfig};

    fn ledger() -> SharedLedger {
        SharedLedger::new(CostLedger::with_prices([("m", Money::from_nanos(50))]))
    }

    #[test]
    fn recorded_answers_replay_identically() {
        let task = TaskSpec::classification("t", vec![LabelDef::new("A"), LabelDef::new("B")]).unwrap();
        let recs: Vec<Record> = ["A", "B", "A"]
            .iter()
            .enumerate()
            .map(|(i, l)| Record::new(i, format!("text {i}"), Some(l.to_string())))
            .collect();
        let truth = recs.iter().map(|r| (r.id, r.truth_label.clone().unwrap())).collect();
        let cfg = SimOracleConfig {
            row_error: 0.4,
            ..SimOracleConfig::noiseless(11)
        };
        let sim = SimOracle::new(cfg, truth, ledger()).unwrap();
        let recorder = RecordingOracle::new(sim, ReplayCache::new());
        let live: Vec<_> = recs
            .iter()
            .map(|r| recorder.classify_record(r, &task, "m").unwrap())
            .collect();
        let live_total = recorder.ledger().total();
        let cache = recorder.into_cache();
        assert_eq!(cache.len(), 3);

        let mut buf = Vec::new();
        cache.write(&mut buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, &buf).unwrap();
        let reloaded = ReplayCache::load(&path).unwrap();
        assert_eq!(reloaded, cache);

        let replay = ReplayOracle::new(reloaded, ledger());
        let replayed: Vec<_> = recs
            .iter()
            .map(|r| replay.classify_record(r, &task, "m").unwrap())
            .collect();
        assert_eq!(live, replayed);
        assert_eq!(replay.ledger().total(), live_total);

        // Stored payload re-serializes to the same bytes.
        let req = Request::new(Capability::RowClassification, "m", &task, vec![&recs[0]]);
        let entry = replay.cache().get(&req.digest()).unwrap();
        let answer = replay.answer(&req).unwrap();
        assert_eq!(
            serde_json::to_string(&answer.response).unwrap(),
            serde_json::to_string(&entry.response).unwrap()
        );
    }

    #[test]
    fn miss_is_an_error() {
        let task = TaskSpec::classification("t", vec![LabelDef::new("A")]).unwrap();
        let r = Record::new(0, "x", None);
        let replay = ReplayOracle::new(ReplayCache::new(), ledger());
        assert!(matches!(
            replay.classify_record(&r, &task, "m"),
            Err(OracleError::CacheMiss { .. })
        ));
        assert_eq!(replay.ledger().snapshot().calls(), 0);
    }
}
