//! Review queue: scored cross-session pairs with their visual evidence.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tlpim_core::checkpoint::Checkpoint;
use tlpim_core::dataset::SampleRecord;
use tlpim_core::matcher::{cross_session_pairs, decide, orient_pair, similarity, Decision};
use tlpim_core::net::Embedding;
use tlpim_core::pipeline::{prepare_records, sample_evidence};
use tlpim_core::visual::{render_layer_png, LayerFlags, LayerKind, PairEvidence, SampleEvidence};

use crate::error::{ReviewError, ReviewResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Reviewed,
}

/// One probe/reference pair awaiting examiner review.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCase {
    pub pair_id: String,
    pub probe: SampleRecord,
    pub reference: SampleRecord,
    pub similarity: f64,
    pub algorithm_decision: Decision,
}

/// Pair id built from the manifest row indices of the two samples.
pub fn pair_id(first_row: usize, second_row: usize) -> String {
    format!("pair-{first_row:04}-{second_row:04}")
}

struct Slot {
    probe: usize,
    reference: usize,
}

/// Cases in descending similarity, with per-sample evidence for layer serving.
pub struct ReviewQueue {
    cases: Vec<PairCase>,
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    evidence: Vec<SampleEvidence>,
    pub threshold: f64,
}

/// Scores all cross-session pairs. Cases are ordered by descending
/// similarity, ties by pair id.
pub fn build_cases(records: &[SampleRecord], embeddings: &[Embedding], threshold: f64) -> ReviewResult<Vec<PairCase>> {
    Ok(score_slots(records, embeddings, threshold)?
        .into_iter()
        .map(|(case, _)| case)
        .collect())
}

fn score_slots(
    records: &[SampleRecord],
    embeddings: &[Embedding],
    threshold: f64,
) -> ReviewResult<Vec<(PairCase, Slot)>> {
    if records.len() != embeddings.len() {
        return Err(ReviewError::Invalid("one embedding per record is required".into()));
    }
    let sessions: Vec<&str> = records.iter().map(|r| r.session_id.as_str()).collect();
    let mut out = Vec::new();
    for (i, j) in cross_session_pairs(&sessions) {
        let (r, p) = orient_pair(i, j, records[i].pmi_hours, records[j].pmi_hours);
        let s = similarity(&embeddings[p], &embeddings[r])?;
        let case = PairCase {
            pair_id: pair_id(i, j),
            probe: records[p].clone(),
            reference: records[r].clone(),
            similarity: s,
            algorithm_decision: decide(s, threshold),
        };
        out.push((case, Slot { probe: p, reference: r }));
    }
    out.sort_by(|a, b| b.0.similarity.total_cmp(&a.0.similarity));
    Ok(out)
}

/// Embeds every manifest sample with the checkpoint and queues all
/// cross-session pairs. `threshold` overrides the checkpoint's.
pub fn build_queue(
    records: &[SampleRecord],
    base_dir: &Path,
    checkpoint: &Checkpoint,
    threshold: Option<f64>,
) -> ReviewResult<ReviewQueue> {
    if records.is_empty() {
        return Err(ReviewError::Invalid("manifest has no samples".into()));
    }
    let threshold = threshold
        .or(checkpoint.threshold)
        .ok_or_else(|| ReviewError::Invalid("checkpoint stores no threshold; pass one explicitly".into()))?;
    let net = &checkpoint.net;
    let prepared = prepare_records(records, base_dir, net.config.input_size)?;
    let mut embeddings = Vec::with_capacity(prepared.len());
    let mut evidence = Vec::with_capacity(prepared.len());
    for p in &prepared {
        let (e, ev) = sample_evidence(net, p)?;
        embeddings.push(e);
        evidence.push(ev);
    }
    let (cases, slots): (Vec<_>, Vec<_>) = score_slots(records, &embeddings, threshold)?.into_iter().unzip();
    let index = cases.iter().enumerate().map(|(k, c)| (c.pair_id.clone(), k)).collect();
    Ok(ReviewQueue {
        cases,
        slots,
        index,
        evidence,
        threshold,
    })
}

impl ReviewQueue {
    pub fn cases(&self) -> &[PairCase] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, pair_id: &str) -> Option<&PairCase> {
        self.index.get(pair_id).map(|&k| &self.cases[k])
    }

    pub fn contains(&self, pair_id: &str) -> bool {
        self.index.contains_key(pair_id)
    }

    /// The same evidence the offline bundle export uses for this pair.
    pub fn pair_evidence(&self, pair_id: &str) -> Option<PairEvidence> {
        let k = *self.index.get(pair_id)?;
        let (case, slot) = (&self.cases[k], &self.slots[k]);
        Some(PairEvidence {
            pair_id: case.pair_id.clone(),
            probe: self.evidence[slot.probe].clone(),
            reference: self.evidence[slot.reference].clone(),
            similarity: case.similarity,
            decision: case.algorithm_decision,
        })
    }

    /// PNG of one layer; `sample` is `a` (probe) or `b` (reference).
    pub fn layer_png(&self, pair_id: &str, sample: &str, layer: &str) -> ReviewResult<Vec<u8>> {
        let k = *self
            .index
            .get(pair_id)
            .ok_or_else(|| ReviewError::NotFound(format!("pair `{pair_id}`")))?;
        let slot = &self.slots[k];
        let evidence = match sample {
            "a" => &self.evidence[slot.probe],
            "b" => &self.evidence[slot.reference],
            _ => return Err(ReviewError::NotFound(format!("sample `{sample}`"))),
        };
        let kind = LayerKind::parse(layer).ok_or_else(|| ReviewError::NotFound(format!("layer `{layer}`")))?;
        Ok(render_layer_png(evidence, kind, LayerFlags::ALL)?)
    }
}
