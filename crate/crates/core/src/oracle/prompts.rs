//! Prompt rendering and reply parsing for the HTTP oracle. Template text
//! lives in `templates/` and is not part of any correctness contract.

use std::collections::BTreeSet;

use serde::Deserialize;

use super::{Capability, Order, Request};
use crate::model::{LabelDef, RecordId};

const SAME_CLASS_PAIRS: &str = include_str!("../../templates/same_class_pairs.txt");
const CLUSTER_LABEL_SCORE: &str = include_str!("../../templates/cluster_label_score.txt");
const PAIRWISE_ORDER: &str = include_str!("../../templates/pairwise_order.txt");
const ROW_CLASSIFICATION: &str = include_str!("../../templates/row_classification.txt");
const CLUSTER_SUMMARY: &str = include_str!("../../templates/cluster_summary.txt");

fn template(capability: Capability) -> &'static str {
    match capability {
        Capability::SameClassPairs => SAME_CLASS_PAIRS,
        Capability::ClusterLabelScore => CLUSTER_LABEL_SCORE,
        Capability::PairwiseOrder => PAIRWISE_ORDER,
        Capability::RowClassification => ROW_CLASSIFICATION,
        Capability::ClusterSummary => CLUSTER_SUMMARY,
    }
}

fn label_line(l: &LabelDef) -> String {
    match &l.description {
        Some(d) => format!("- {}: {}", l.name, d),
        None => format!("- {}", l.name),
    }
}

pub(crate) fn render(request: &Request<'_>) -> String {
    let records: Vec<String> = request
        .records
        .iter()
        .map(|r| format!("[{}] {}", r.id, super::normalize_ws(&r.text)))
        .collect();
    let labels: Vec<String> = request.task.labels().iter().map(label_line).collect();
    let text = |i: usize| request.records.get(i).map(|r| r.text.as_str()).unwrap_or("");
    template(request.capability)
        .replace("{instruction}", request.task.instruction().trim())
        .replace("{count}", &request.records.len().to_string())
        .replace("{records}", &records.join("\n"))
        .replace("{labels}", &labels.join("\n"))
        .replace("{label}", request.label.map_or("", |l| l.name.as_str()))
        .replace("{record}", text(0))
        .replace("{first}", text(0))
        .replace("{second}", text(1))
}

/// Cuts the first `{...}` object out of a reply that may wrap it in prose or
/// code fences.
fn json_object(reply: &str) -> Option<&str> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    (end > start).then(|| &reply[start..=end])
}

/// Parses a pair list. Entries that are not two integer ids of the shown
/// records are skipped one at a time; `None` only when no list is found.
pub(crate) fn parse_pairs(reply: &str, shown: &BTreeSet<RecordId>) -> Option<Vec<(RecordId, RecordId)>> {
    let value: serde_json::Value = serde_json::from_str(json_object(reply)?).ok()?;
    let list = value.get("pairs")?.as_array()?;
    let pairs = list
        .iter()
        .filter_map(|entry| {
            let pair = entry.as_array()?;
            if pair.len() != 2 {
                return None;
            }
            let a = usize::try_from(pair[0].as_u64()?).ok()?;
            let b = usize::try_from(pair[1].as_u64()?).ok()?;
            (a != b && shown.contains(&a) && shown.contains(&b)).then_some((a, b))
        })
        .collect();
    Some(pairs)
}

pub(crate) fn parse_order(reply: &str) -> Option<Order> {
    let word = reply.trim().trim_matches(|c: char| !c.is_ascii_alphabetic());
    match word.to_ascii_uppercase().as_str() {
        "LESS" => Some(Order::Less),
        "GREATER" => Some(Order::Greater),
        _ => None,
    }
}

pub(crate) fn parse_summary(reply: &str) -> Option<LabelDef> {
    #[derive(Deserialize)]
    struct Raw {
        name: String,
        description: Option<String>,
    }
    let raw: Raw = serde_json::from_str(json_object(reply)?).ok()?;
    let name = raw.name.trim();
    if name.is_empty() {
        return None;
    }
    Some(LabelDef {
        name: name.to_string(),
        description: raw.description.filter(|d| !d.trim().is_empty()),
    })
}

/// Strips quotes and trailing punctuation from a one-line class answer.
pub(crate) fn clean_label(reply: &str) -> String {
    let line = reply.trim().lines().next().unwrap_or("");
    line.trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '.' || c.is_whitespace())
        .to_string()
}
