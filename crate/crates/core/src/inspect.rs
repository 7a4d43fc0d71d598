//! Structured looks inside a trained model's decisions: which prototypes
//! a query lands on, how each retrieved chunk aligns and gets weighted,
//! and where the weight mass sits across visits and care stages.
//!
//! Per-example records serialize as JSON Lines; set-level aggregates as a
//! small CSV.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::train::forward_example;
use crate::model::ModelState;
use crate::pipeline::PreparedExample;
use crate::timeline::CareStage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeHit {
    pub prototype: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkInspection {
    pub ordinal: u32,
    pub start: usize,
    pub end: usize,
    pub alpha: f64,
    pub weight: f64,
    pub visit_order: u32,
    pub care_stage: CareStage,
    /// This chunk's row of the chunk x prototype alignment matrix,
    /// truncated to the top entries.
    pub top_prototypes: Vec<PrototypeHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleInspection {
    pub patient_id: String,
    pub label: u8,
    pub probability: f64,
    pub query_top_prototypes: Vec<PrototypeHit>,
    pub chunks: Vec<ChunkInspection>,
    /// Weight mass per visit, ascending visit order.
    pub visit_weight_mass: Vec<(u32, f64)>,
    /// Weight mass per care stage, ascending stage index.
    pub stage_weight_mass: Vec<(String, f64)>,
}

impl ExampleInspection {
    /// Index (into `chunks`) of the highest-weight chunk, ties to the
    /// earliest.
    pub fn max_weight_chunk(&self) -> Option<usize> {
        self.chunks
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.weight
                    .partial_cmp(&b.weight)
                    .unwrap()
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
    }
}

fn top_k(probs: &[f64], k: usize) -> Vec<PrototypeHit> {
    let mut hits: Vec<PrototypeHit> = probs
        .iter()
        .enumerate()
        .map(|(prototype, &prob)| PrototypeHit { prototype, prob })
        .collect();
    hits.sort_by(|a, b| b.prob.partial_cmp(&a.prob).unwrap().then(a.prototype.cmp(&b.prototype)));
    hits.truncate(k);
    hits
}

/// Inspect one example with a trained model.
pub fn inspect_example(
    model: &ModelState,
    ex: &PreparedExample,
    k: usize,
) -> Result<ExampleInspection> {
    let fwd = forward_example(model, ex)?;
    let mut chunks = Vec::with_capacity(ex.chunks.len());
    let mut visit_mass: BTreeMap<u32, f64> = BTreeMap::new();
    let mut stage_mass: BTreeMap<usize, (CareStage, f64)> = BTreeMap::new();
    for (i, c) in ex.chunks.iter().enumerate() {
        let weight = fwd.weights[i];
        *visit_mass.entry(c.visit_order).or_insert(0.0) += weight;
        stage_mass
            .entry(c.care_stage.index())
            .or_insert((c.care_stage, 0.0))
            .1 += weight;
        chunks.push(ChunkInspection {
            ordinal: c.descriptor.ordinal,
            start: c.descriptor.start,
            end: c.descriptor.end,
            alpha: fwd.alphas[i],
            weight,
            visit_order: c.visit_order,
            care_stage: c.care_stage,
            top_prototypes: top_k(&fwd.history_assignments[i].probs, k),
        });
    }
    Ok(ExampleInspection {
        patient_id: ex.patient_id.clone(),
        label: ex.label,
        probability: fwd.probability(),
        query_top_prototypes: top_k(&fwd.query_assignment.probs, k),
        chunks,
        visit_weight_mass: visit_mass.into_iter().collect(),
        stage_weight_mass: stage_mass
            .into_values()
            .map(|(s, m)| (format!("{s:?}").to_uppercase(), m))
            .collect(),
    })
}

pub fn inspect_examples(
    model: &ModelState,
    examples: &[PreparedExample],
    k: usize,
) -> Result<Vec<ExampleInspection>> {
    examples
        .iter()
        .map(|ex| inspect_example(model, ex, k))
        .collect()
}

pub fn write_inspection_jsonl(
    path: &std::path::Path,
    records: &[ExampleInspection],
) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_inspection_jsonl(path: &std::path::Path) -> Result<Vec<ExampleInspection>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Set-level weight mass by visit order and care stage, one CSV with a
/// group-kind discriminator column.
pub fn write_aggregate_csv(path: &std::path::Path, records: &[ExampleInspection]) -> Result<()> {
    let mut by_visit: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut by_stage: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        for c in &r.chunks {
            let v = by_visit.entry(c.visit_order).or_insert((0.0, 0));
            v.0 += c.weight;
            v.1 += 1;
            let s = by_stage
                .entry(format!("{:?}", c.care_stage).to_uppercase())
                .or_insert((0.0, 0));
            s.0 += c.weight;
            s.1 += 1;
        }
    }
    let mut out = String::from("group_kind,group,weight_mass,n_chunks\n");
    for (visit, (mass, n)) in by_visit {
        out.push_str(&format!("VISIT,{visit},{mass},{n}\n"));
    }
    for (stage, (mass, n)) in by_stage {
        out.push_str(&format!("STAGE,{stage},{mass},{n}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
