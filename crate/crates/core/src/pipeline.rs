//! Turning labeled timelines into model-ready examples: query token
//! windows plus retrieved history evidence from a prebuilt index.
//!
//! Retrieval always runs against the frozen retriever snapshot and cuts
//! off at the query start, so no retrieved chunk can overlap the query
//! window.

use rayon::prelude::*;
use std::collections::BTreeMap;

use crate::chunker::ChunkDescriptor;
use crate::encoder::{retriever_encode, token_inputs, TokenInput};
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::model::RetrieverSnapshot;
use crate::tasks::{label, LabelOutcome, TaskSpec};
use crate::timeline::{split_query_history, CareStage, PatientTimeline, TimeDeltaScaler};

/// One retrieved history chunk, ready for fusion. The vector is the
/// stored index embedding widened to f64; stage and visit identify the
/// chunk's first event for inspection roll-ups.
#[derive(Debug, Clone)]
pub struct ChunkEvidence {
    pub vector: Vec<f64>,
    pub descriptor: ChunkDescriptor,
    pub score: f64,
    pub visit_order: u32,
    pub care_stage: CareStage,
}

/// A labeled example: the query token window and its retrieved evidence
/// in descending similarity order.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub patient_id: String,
    pub label: u8,
    pub query: Vec<TokenInput>,
    pub chunks: Vec<ChunkEvidence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepStats {
    pub prepared: usize,
    pub excluded: usize,
}

/// Prepare every listed patient for one task. Patients whose timeline
/// cannot be labeled (missing anchor, exclusion rule) are skipped and
/// counted; a listed id with no timeline is an error.
#[allow(clippy::too_many_arguments)]
pub fn prepare_examples(
    timelines: &[PatientTimeline],
    ids: &[String],
    task: &TaskSpec,
    query_len: usize,
    scaler: &TimeDeltaScaler,
    retriever: &RetrieverSnapshot,
    index: &VectorIndex,
    m_retrieved: usize,
) -> Result<(Vec<PreparedExample>, PrepStats)> {
    let by_id: BTreeMap<&str, &PatientTimeline> = timelines
        .iter()
        .map(|t| (t.patient_id.as_str(), t))
        .collect();
    let picked: Vec<Option<PreparedExample>> = ids
        .par_iter()
        .map(|id| -> Result<Option<PreparedExample>> {
            let tl = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Config(format!("no timeline for patient {id}")))?;
            let y = match label(tl, task) {
                LabelOutcome::Included(y) => y,
                LabelOutcome::Excluded(_) => return Ok(None),
            };
            let split = split_query_history(tl, task, query_len)?;
            let query = token_inputs(&tl.events[split.query.clone()], scaler);
            let qvec = retriever_encode(&retriever.tables, &retriever.backbone, &query)?;
            let hits = index.search(id, &qvec, split.query.start, m_retrieved);
            let entries = index.entries(id);
            let mut chunks = Vec::with_capacity(hits.len());
            for h in hits {
                let entry = entries
                    .iter()
                    .find(|e| e.descriptor == *h.descriptor)
                    .expect("search hits come from this patient's entries");
                let first = &tl.events[h.descriptor.start];
                chunks.push(ChunkEvidence {
                    vector: entry.vector().iter().map(|&v| f64::from(v)).collect(),
                    descriptor: h.descriptor.clone(),
                    score: h.score,
                    visit_order: first.visit_order,
                    care_stage: first.care_stage,
                });
            }
            Ok(Some(PreparedExample {
                patient_id: id.clone(),
                label: y,
                query,
                chunks,
            }))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut excluded = 0usize;
    for opt in picked {
        match opt {
            Some(ex) => out.push(ex),
            None => excluded += 1,
        }
    }
    let stats = PrepStats {
        prepared: out.len(),
        excluded,
    };
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::{ChunkParams, ChunkStrategy};
    use crate::index::build_index;
    use crate::model::{toy_config, ModelState};
    use crate::tasks::{generate, SyntheticConfig, TaskName};

    fn small_world() -> (crate::tasks::SyntheticDataset, ModelState, VectorIndex, TimeDeltaScaler) {
        let cfg = SyntheticConfig {
            patients: 24,
            seed: 41,
            ..SyntheticConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let vocab_size = data.vocabulary.len();
        let model = ModelState::init(toy_config(8, vocab_size, 4, 6), 3).unwrap();
        let scaler = TimeDeltaScaler::new(525_600);
        let histories: Vec<(String, Vec<crate::timeline::TimelineEvent>)> = data
            .patients
            .iter()
            .map(|p| (p.timeline.patient_id.clone(), p.timeline.events.clone()))
            .collect();
        let params = ChunkParams {
            size: 16,
            overlap: 4,
            ..ChunkParams::default()
        };
        let (index, _) = build_index(
            &histories,
            ChunkStrategy::Event,
            &params,
            &model.tables,
            &model.backbone,
            &scaler,
            "test-digest",
        )
        .unwrap();
        (data, model, index, scaler)
    }

    #[test]
    fn prepared_evidence_never_reaches_the_query_window() {
        let (data, model, index, scaler) = small_world();
        let ids: Vec<String> = data
            .patients
            .iter()
            .map(|p| p.timeline.patient_id.clone())
            .collect();
        let task = TaskSpec::new(TaskName::Ihm48h);
        let retriever = model.snapshot_retriever();
        let (examples, stats) = prepare_examples(
            &data.patients.iter().map(|p| p.timeline.clone()).collect::<Vec<_>>(),
            &ids,
            &task,
            32,
            &scaler,
            &retriever,
            &index,
            4,
        )
        .unwrap();
        assert_eq!(stats.prepared + stats.excluded, ids.len());
        assert!(!examples.is_empty());
        let by_id: BTreeMap<&str, &PatientTimeline> = data
            .patients
            .iter()
            .map(|p| (p.timeline.patient_id.as_str(), &p.timeline))
            .collect();
        for ex in &examples {
            assert!(ex.chunks.len() <= 4);
            assert!(!ex.query.is_empty());
            let tl = by_id[ex.patient_id.as_str()];
            let split = split_query_history(tl, &task, 32).unwrap();
            for c in &ex.chunks {
                assert!(
                    c.descriptor.end <= split.query.start,
                    "chunk {:?} reaches into query starting at {}",
                    c.descriptor,
                    split.query.start
                );
                assert_eq!(c.vector.len(), 8);
            }
            for pair in ex.chunks.windows(2) {
                assert!(pair[0].score >= pair[1].score);
            }
        }
    }

    #[test]
    fn preparation_is_deterministic_and_order_follows_ids() {
        let (data, model, index, scaler) = small_world();
        let timelines: Vec<PatientTimeline> =
            data.patients.iter().map(|p| p.timeline.clone()).collect();
        let mut ids: Vec<String> = timelines.iter().map(|t| t.patient_id.clone()).collect();
        ids.sort();
        let task = TaskSpec::new(TaskName::Mort1y);
        let retriever = model.snapshot_retriever();
        let run = || {
            prepare_examples(&timelines, &ids, &task, 16, &scaler, &retriever, &index, 3).unwrap()
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(sa, sb);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.patient_id, y.patient_id);
            assert_eq!(x.label, y.label);
            assert_eq!(x.chunks.len(), y.chunks.len());
            for (cx, cy) in x.chunks.iter().zip(&y.chunks) {
                assert_eq!(cx.vector, cy.vector);
                assert_eq!(cx.descriptor, cy.descriptor);
            }
        }
        let order: Vec<&str> = a.iter().map(|e| e.patient_id.as_str()).collect();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(order, sorted, "examples follow the sorted id order");
    }

    #[test]
    fn unknown_patient_id_is_an_error() {
        let (data, model, index, scaler) = small_world();
        let timelines: Vec<PatientTimeline> =
            data.patients.iter().map(|p| p.timeline.clone()).collect();
        let task = TaskSpec::new(TaskName::Ihm48h);
        let retriever = model.snapshot_retriever();
        let err = prepare_examples(
            &timelines,
            &["nobody".to_string()],
            &task,
            8,
            &scaler,
            &retriever,
            &index,
            2,
        );
        assert!(err.is_err());
    }
}
