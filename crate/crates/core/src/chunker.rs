//! History chunking: four strategies over an event slice, with recursive
//! event-based re-splitting of oversized chunks and padding on
//! materialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeline::TimelineEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChunkStrategy {
    Event,
    Time,
    Visit,
    Stage,
}

impl ChunkStrategy {
    pub const ALL: [ChunkStrategy; 4] = [
        ChunkStrategy::Event,
        ChunkStrategy::Time,
        ChunkStrategy::Visit,
        ChunkStrategy::Stage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChunkStrategy::Event => "EVENT",
            ChunkStrategy::Time => "TIME",
            ChunkStrategy::Visit => "VISIT",
            ChunkStrategy::Stage => "STAGE",
        }
    }
}

impl std::str::FromStr for ChunkStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EVENT" => Ok(ChunkStrategy::Event),
            "TIME" => Ok(ChunkStrategy::Time),
            "VISIT" => Ok(ChunkStrategy::Visit),
            "STAGE" => Ok(ChunkStrategy::Stage),
            _ => Err(Error::Config(format!("unknown chunk strategy {s:?}"))),
        }
    }
}

impl std::fmt::Display for ChunkStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Half-open index range into one patient's history slice. Descriptors are
/// what the retrieval index stores; events are re-materialized on demand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkDescriptor {
    pub patient_id: String,
    pub strategy: ChunkStrategy,
    pub start: usize,
    pub end: usize,
    pub ordinal: u32,
}

#[derive(Debug, Clone)]
pub struct Chunk {
    pub descriptor: ChunkDescriptor,
    pub events: Vec<TimelineEvent>,
    /// PAD positions to append when encoding to the context length.
    pub pad_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkParams {
    /// Context length C_h; no final descriptor spans more events.
    pub size: usize,
    /// Overlap O between consecutive event-based chunks.
    pub overlap: usize,
    /// Window length for the TIME strategy.
    pub window_minutes: i64,
}

impl Default for ChunkParams {
    fn default() -> Self {
        ChunkParams {
            size: 256,
            overlap: 32,
            window_minutes: 360,
        }
    }
}

impl ChunkParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 1 {
            return Err(Error::Config("chunk size must be >= 1".into()));
        }
        if self.overlap >= self.size {
            return Err(Error::Config(format!(
                "chunk overlap {} must be smaller than chunk size {}",
                self.overlap, self.size
            )));
        }
        if self.window_minutes < 1 {
            return Err(Error::Config("time window must be >= 1 minute".into()));
        }
        Ok(())
    }
}

/// Chunk a history slice under one strategy. TIME/VISIT/STAGE chunks longer
/// than `params.size` are recursively re-split by event-based chunking (the
/// descriptors keep the top-level strategy tag); ordinals are assigned
/// 0..n in start order afterwards.
pub fn chunk_history(
    patient_id: &str,
    history: &[TimelineEvent],
    strategy: ChunkStrategy,
    params: &ChunkParams,
) -> Result<Vec<ChunkDescriptor>> {
    params.validate()?;
    let ranges = match strategy {
        ChunkStrategy::Event => event_ranges(history.len(), params.size, params.overlap),
        ChunkStrategy::Time => resplit(
            time_ranges(history, params.window_minutes),
            params.size,
            params.overlap,
        ),
        ChunkStrategy::Visit => resplit(visit_ranges(history), params.size, params.overlap),
        ChunkStrategy::Stage => resplit(stage_ranges(history), params.size, params.overlap),
    };
    Ok(ranges
        .into_iter()
        .enumerate()
        .map(|(i, (start, end))| ChunkDescriptor {
            patient_id: patient_id.to_string(),
            strategy,
            start,
            end,
            ordinal: i as u32,
        })
        .collect())
}

pub fn chunk_by_events(
    patient_id: &str,
    history: &[TimelineEvent],
    size: usize,
    overlap: usize,
) -> Result<Vec<ChunkDescriptor>> {
    chunk_history(
        patient_id,
        history,
        ChunkStrategy::Event,
        &ChunkParams {
            size,
            overlap,
            ..ChunkParams::default()
        },
    )
}

pub fn chunk_by_time(
    patient_id: &str,
    history: &[TimelineEvent],
    window_minutes: i64,
    params: &ChunkParams,
) -> Result<Vec<ChunkDescriptor>> {
    chunk_history(
        patient_id,
        history,
        ChunkStrategy::Time,
        &ChunkParams {
            window_minutes,
            ..*params
        },
    )
}

pub fn chunk_by_visit(
    patient_id: &str,
    history: &[TimelineEvent],
    params: &ChunkParams,
) -> Result<Vec<ChunkDescriptor>> {
    chunk_history(patient_id, history, ChunkStrategy::Visit, params)
}

pub fn chunk_by_stage(
    patient_id: &str,
    history: &[TimelineEvent],
    params: &ChunkParams,
) -> Result<Vec<ChunkDescriptor>> {
    chunk_history(patient_id, history, ChunkStrategy::Stage, params)
}

/// Fetch the events behind a descriptor and compute the padding needed to
/// reach `context_len`.
pub fn materialize(
    descriptor: &ChunkDescriptor,
    history: &[TimelineEvent],
    context_len: usize,
) -> Result<Chunk> {
    if descriptor.start >= descriptor.end || descriptor.end > history.len() {
        return Err(Error::InvalidTimeline(format!(
            "descriptor out of range: [{}, {}) over {} events",
            descriptor.start,
            descriptor.end,
            history.len()
        )));
    }
    let events = history[descriptor.start..descriptor.end].to_vec();
    if events.len() > context_len {
        return Err(Error::DimensionMismatch(format!(
            "chunk of {} events exceeds context length {context_len}",
            events.len()
        )));
    }
    Ok(Chunk {
        descriptor: descriptor.clone(),
        pad_length: context_len - events.len(),
        events,
    })
}

// ---------------------------------------------------------------------------
// Range builders (index ranges relative to the history slice)

fn event_ranges(len: usize, size: usize, overlap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if len == 0 {
        return out;
    }
    let stride = size - overlap;
    let mut start = 0;
    loop {
        let end = (start + size).min(len);
        out.push((start, end));
        if end == len {
            break;
        }
        start += stride;
    }
    out
}

fn time_ranges(history: &[TimelineEvent], window_minutes: i64) -> Vec<(usize, usize)> {
    if history.is_empty() {
        return Vec::new();
    }
    let first_timed = history.iter().position(|e| e.time_minutes.is_some());
    let anchor = match first_timed {
        Some(i) => history[i].time_minutes.unwrap(),
        // No timed events at all: one chunk of everything.
        None => return vec![(0, history.len())],
    };
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < history.len() {
        match history[i].time_minutes {
            // Untimed prefix joins the first window's chunk below.
            None => i += 1,
            Some(t) => {
                let w = (t - anchor) / window_minutes;
                let window_end = anchor + (w + 1) * window_minutes;
                let start = i;
                while i < history.len()
                    && history[i].time_minutes.is_some_and(|t| t < window_end)
                {
                    i += 1;
                }
                if out.is_empty() {
                    out.push((0, i)); // statics fold into the first chunk
                } else {
                    out.push((start, i));
                }
            }
        }
    }
    out
}

fn visit_ranges(history: &[TimelineEvent]) -> Vec<(usize, usize)> {
    if history.is_empty() {
        return Vec::new();
    }
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut current: Option<(u32, usize)> = None; // (visit_order, start)
    for (i, e) in history.iter().enumerate() {
        if e.visit_order == 0 {
            // STATIC or GAP: fold into the open chunk (preceding visit), or
            // wait for the first visit when none is open yet.
            continue;
        }
        match current {
            Some((order, _)) if order == e.visit_order => {}
            Some((_, start)) => {
                // Close the previous visit just before this event; any GAP
                // run between them stays with the preceding chunk.
                out.push((start, i));
                current = Some((e.visit_order, i));
            }
            None => current = Some((e.visit_order, 0)), // statics lead the first chunk
        }
    }
    match current {
        Some((_, start)) => out.push((start, history.len())),
        // Only visit-order-0 events in the slice: one chunk of everything.
        None => out.push((0, history.len())),
    }
    out
}

fn stage_ranges(history: &[TimelineEvent]) -> Vec<(usize, usize)> {
    use crate::timeline::CareStage;
    if history.is_empty() {
        return Vec::new();
    }
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    let mut current: Option<CareStage> = None;
    for (i, e) in history.iter().enumerate() {
        match e.care_stage {
            // GAP closes the running chunk but belongs to it; STATIC only
            // leads the first chunk.
            CareStage::Gap | CareStage::Static => continue,
            stage => match current {
                None => current = Some(stage),
                Some(s) if s == stage => {}
                Some(_) => {
                    out.push((start, i));
                    start = i;
                    current = Some(stage);
                }
            },
        }
    }
    out.push((start, history.len()));
    out
}

/// Replace every range longer than `size` with event-based sub-ranges.
fn resplit(ranges: Vec<(usize, usize)>, size: usize, overlap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(ranges.len());
    for (start, end) in ranges {
        if end - start <= size {
            out.push((start, end));
        } else {
            for (s, e) in event_ranges(end - start, size, overlap) {
                out.push((start + s, start + e));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::{CareStage, EventType};

    fn ev(time: Option<i64>, stage: CareStage, visit_order: u32) -> TimelineEvent {
        TimelineEvent {
            concept_id: 100,
            numeric_value: None,
            time_minutes: time,
            care_stage: stage,
            visit_order,
            event_type: EventType::Lab,
        }
    }

    fn timed(n: usize) -> Vec<TimelineEvent> {
        (0..n)
            .map(|i| ev(Some(i as i64), CareStage::Icu, 1))
            .collect()
    }

    fn ranges(descs: &[ChunkDescriptor]) -> Vec<(usize, usize)> {
        descs.iter().map(|d| (d.start, d.end)).collect()
    }

    #[test]
    fn event_chunks_stride_three() {
        let h = timed(10);
        let d = chunk_by_events("p", &h, 4, 1).unwrap();
        assert_eq!(ranges(&d), vec![(0, 4), (3, 7), (6, 10)]);
        assert_eq!(
            d.iter().map(|c| c.ordinal).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn event_chunks_default_shape() {
        let h = timed(600);
        let d = chunk_by_events("p", &h, 256, 32).unwrap();
        assert_eq!(ranges(&d), vec![(0, 256), (224, 480), (448, 600)]);
    }

    #[test]
    fn event_chunk_short_history_single_chunk() {
        let h = timed(3);
        let d = chunk_by_events("p", &h, 4, 1).unwrap();
        assert_eq!(ranges(&d), vec![(0, 3)]);
        let c = materialize(&d[0], &h, 4).unwrap();
        assert_eq!(c.events.len(), 3);
        assert_eq!(c.pad_length, 1);
    }

    #[test]
    fn event_chunks_empty_history() {
        let d = chunk_by_events("p", &[], 4, 1).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn event_chunk_invariants_hold() {
        for (n, size, overlap) in [(100, 16, 4), (57, 8, 7), (5, 5, 0), (513, 256, 32)] {
            let h = timed(n);
            let d = chunk_by_events("p", &h, size, overlap).unwrap();
            for w in d.windows(2) {
                assert_eq!(w[0].end - w[0].start, size); // non-final full
                assert_eq!(w[0].end - w[1].start, overlap); // shared events
            }
            let last = d.last().unwrap();
            assert!(last.end - last.start <= size);
            assert_eq!(last.end, n);
            // coverage
            let mut covered = vec![false; n];
            for c in &d {
                covered[c.start..c.end].iter_mut().for_each(|x| *x = true);
            }
            assert!(covered.into_iter().all(|x| x));
        }
    }

    #[test]
    fn time_windows_skip_empty_windows() {
        let h = vec![
            ev(Some(0), CareStage::Icu, 1),
            ev(Some(100), CareStage::Icu, 1),
            ev(Some(400), CareStage::Icu, 1),
        ];
        let d = chunk_by_time("p", &h, 360, &ChunkParams::default()).unwrap();
        assert_eq!(ranges(&d), vec![(0, 2), (2, 3)]);
    }

    #[test]
    fn time_single_window() {
        let h = vec![
            ev(Some(10), CareStage::Icu, 1),
            ev(Some(20), CareStage::Icu, 1),
        ];
        let d = chunk_by_time("p", &h, 360, &ChunkParams::default()).unwrap();
        assert_eq!(ranges(&d), vec![(0, 2)]);
    }

    #[test]
    fn time_statics_join_first_chunk_and_untimed_only_is_one_chunk() {
        let h = vec![
            ev(None, CareStage::Static, 0),
            ev(None, CareStage::Static, 0),
            ev(Some(1000), CareStage::Icu, 1),
            ev(Some(1000 + 400), CareStage::Icu, 1),
        ];
        let d = chunk_by_time("p", &h, 360, &ChunkParams::default()).unwrap();
        assert_eq!(ranges(&d), vec![(0, 3), (3, 4)]);

        let statics_only = vec![ev(None, CareStage::Static, 0); 3];
        let d = chunk_by_time("p", &statics_only, 360, &ChunkParams::default()).unwrap();
        assert_eq!(ranges(&d), vec![(0, 3)]);
    }

    fn visit_history() -> Vec<TimelineEvent> {
        vec![
            ev(None, CareStage::Static, 0),
            ev(Some(0), CareStage::Outp, 1),
            ev(Some(10), CareStage::Outp, 1),
            ev(Some(20_000), CareStage::Gap, 0),
            ev(Some(20_000), CareStage::Hosp, 2),
            ev(Some(20_100), CareStage::Hosp, 2),
            ev(Some(20_200), CareStage::Icu, 3),
        ]
    }

    #[test]
    fn visit_chunks_attach_gap_to_preceding_and_statics_to_first() {
        let d = chunk_by_visit("p", &visit_history(), &ChunkParams::default()).unwrap();
        assert_eq!(ranges(&d), vec![(0, 4), (4, 6), (6, 7)]);
    }

    #[test]
    fn single_visit_single_chunk() {
        let h = timed(5);
        let d = chunk_by_visit("p", &h, &ChunkParams::default()).unwrap();
        assert_eq!(ranges(&d), vec![(0, 5)]);
    }

    #[test]
    fn oversized_visit_is_resplit_by_events() {
        let h = timed(600); // one visit
        let params = ChunkParams {
            size: 256,
            overlap: 32,
            window_minutes: 360,
        };
        let d = chunk_by_visit("p", &h, &params).unwrap();
        assert_eq!(ranges(&d), vec![(0, 256), (224, 480), (448, 600)]);
        assert!(d.iter().all(|c| c.strategy == ChunkStrategy::Visit));
        assert_eq!(
            d.iter().map(|c| c.ordinal).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn stage_chunks_split_on_transitions() {
        let h = vec![
            ev(Some(0), CareStage::Outp, 1),
            ev(Some(1), CareStage::Outp, 1),
            ev(Some(2), CareStage::Ed, 2),
            ev(Some(3), CareStage::Ed, 2),
            ev(Some(4), CareStage::Icu, 3),
        ];
        let d = chunk_by_stage("p", &h, &ChunkParams::default()).unwrap();
        assert_eq!(ranges(&d), vec![(0, 2), (2, 4), (4, 5)]);
    }

    #[test]
    fn stage_uniform_is_one_chunk_and_gap_merges_back() {
        let h = timed(4);
        let d = chunk_by_stage("p", &h, &ChunkParams::default()).unwrap();
        assert_eq!(ranges(&d), vec![(0, 4)]);

        let h = vec![
            ev(None, CareStage::Static, 0),
            ev(Some(0), CareStage::Outp, 1),
            ev(Some(15_000), CareStage::Gap, 0),
            ev(Some(15_000), CareStage::Hosp, 2),
        ];
        let d = chunk_by_stage("p", &h, &ChunkParams::default()).unwrap();
        assert_eq!(ranges(&d), vec![(0, 3), (3, 4)]);
    }

    #[test]
    fn oversized_stage_chunk_resplits_to_frozen_ranges() {
        let mut h = vec![
            ev(Some(0), CareStage::Hosp, 1),
            ev(Some(1), CareStage::Hosp, 1),
        ];
        h.extend((0..600).map(|i| ev(Some(100 + i as i64), CareStage::Icu, 2)));
        let params = ChunkParams {
            size: 256,
            overlap: 32,
            window_minutes: 360,
        };
        let d = chunk_by_stage("p", &h, &params).unwrap();
        assert_eq!(
            ranges(&d),
            vec![(0, 2), (2, 258), (226, 482), (450, 602)]
        );
    }

    #[test]
    fn materialize_full_and_stale() {
        let h = timed(10);
        let d = chunk_by_events("p", &h, 4, 1).unwrap();
        let c = materialize(&d[0], &h, 4).unwrap();
        assert_eq!(c.events.len(), 4);
        assert_eq!(c.pad_length, 0);

        let short = timed(2);
        assert!(materialize(&d[0], &short, 4).is_err());
    }

    #[test]
    fn materialize_tail_pads() {
        let h = timed(9);
        let d = chunk_by_events("p", &h, 4, 1).unwrap();
        assert_eq!(ranges(&d), vec![(0, 4), (3, 7), (6, 9)]);
        let tail = materialize(&d[2], &h, 4).unwrap();
        assert_eq!(tail.events.len(), 3);
        assert_eq!(tail.pad_length, 1);
    }

    #[test]
    fn ordinals_strictly_increase_with_start() {
        let ds = crate::tasks::generate(&crate::tasks::SyntheticConfig {
            patients: 6,
            ..Default::default()
        })
        .unwrap();
        let params = ChunkParams {
            size: 8,
            overlap: 2,
            window_minutes: 360,
        };
        for p in &ds.patients {
            for strategy in ChunkStrategy::ALL {
                let d = chunk_history("p", &p.timeline.events, strategy, &params).unwrap();
                for w in d.windows(2) {
                    assert!(w[0].start < w[1].start, "{strategy}");
                    assert_eq!(w[0].ordinal + 1, w[1].ordinal);
                }
                for c in &d {
                    assert!(c.end - c.start <= params.size, "{strategy}");
                }
            }
        }
    }

    #[test]
    fn params_validation() {
        let h = timed(4);
        assert!(chunk_by_events("p", &h, 4, 4).is_err());
        assert!(chunk_by_events("p", &h, 0, 0).is_err());
        assert!(chunk_by_time("p", &h, 0, &ChunkParams::default()).is_err());
    }
}
