//! Event/timeline data model: vocabulary, timeline construction with
//! gap/boundary/static token handling, time-delta scaling, and the
//! query/history split.

pub mod io;
pub mod vocab;

use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tasks::{ReferencePoint, TaskSpec};
pub use vocab::Vocabulary;

pub const MINUTES_PER_DAY: i64 = 1440;
/// Inter-visit gaps at or above this threshold get a gap token and split
/// care episodes.
pub const GAP_THRESHOLD_MINUTES: i64 = 7 * MINUTES_PER_DAY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CareStage {
    Outp,
    Ed,
    Hosp,
    Icu,
    Gap,
    Static,
}

impl CareStage {
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        match self {
            CareStage::Outp => 0,
            CareStage::Ed => 1,
            CareStage::Hosp => 2,
            CareStage::Icu => 3,
            CareStage::Gap => 4,
            CareStage::Static => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CareStage::Outp => "OUTP",
            CareStage::Ed => "ED",
            CareStage::Hosp => "HOSP",
            CareStage::Icu => "ICU",
            CareStage::Gap => "GAP",
            CareStage::Static => "STATIC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventType {
    Lab,
    Medication,
    Microbiology,
    Diagnosis,
    Procedure,
    Drg,
    IcuChart,
    IcuFluidOutput,
    IcuProcedure,
    IcuInfusion,
    Admin,
    StaticDemo,
    TimeGap,
    Special,
}

impl EventType {
    pub const COUNT: usize = 14;

    pub fn index(self) -> usize {
        match self {
            EventType::Lab => 0,
            EventType::Medication => 1,
            EventType::Microbiology => 2,
            EventType::Diagnosis => 3,
            EventType::Procedure => 4,
            EventType::Drg => 5,
            EventType::IcuChart => 6,
            EventType::IcuFluidOutput => 7,
            EventType::IcuProcedure => 8,
            EventType::IcuInfusion => 9,
            EventType::Admin => 10,
            EventType::StaticDemo => 11,
            EventType::TimeGap => 12,
            EventType::Special => 13,
        }
    }
}

/// One input event before vocabulary interning and timeline assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub code: String,
    pub value: Option<f64>,
    pub time: Option<i64>,
    pub stage: CareStage,
    #[serde(rename = "type")]
    pub event_type: EventType,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub concept_id: u32,
    pub numeric_value: Option<f64>,
    /// Epoch minutes; absent exactly for STATIC events.
    pub time_minutes: Option<i64>,
    pub care_stage: CareStage,
    /// 1-based care episode counter; 0 for STATIC and GAP events.
    pub visit_order: u32,
    pub event_type: EventType,
}

impl TimelineEvent {
    pub fn is_static(&self) -> bool {
        self.care_stage == CareStage::Static
    }

    pub fn is_gap(&self) -> bool {
        self.care_stage == CareStage::Gap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitSpan {
    pub visit_order: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTimeline {
    pub patient_id: String,
    pub events: Vec<TimelineEvent>,
    /// Half-open index ranges covering the non-GAP, non-STATIC events,
    /// one per visit, ascending.
    pub visit_boundaries: Vec<VisitSpan>,
}

impl PatientTimeline {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Inverse of interning: recover raw events (token strings) in timeline
    /// order. Unknown ids become the UNK token string.
    pub fn to_raw_events(&self, vocab: &Vocabulary) -> Vec<RawEvent> {
        self.events
            .iter()
            .map(|e| RawEvent {
                code: vocab.token(e.concept_id).unwrap_or("UNK").to_string(),
                value: e.numeric_value,
                time: e.time_minutes,
                stage: e.care_stage,
                event_type: e.event_type,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Time-delta scaling

/// Log-compresses inter-event gaps into [0,1].
///
/// Default form: ln(1+dt) / ln(1+dt_max). The literal flag drops the +1 in
/// the denominator (the published form), which no longer maps dt_max exactly
/// to 1 and is singular at dt_max=1.
#[derive(Debug)]
pub struct TimeDeltaScaler {
    delta_max_minutes: i64,
    literal_denominator: bool,
    clamped: AtomicU64,
}

impl TimeDeltaScaler {
    pub fn new(delta_max_minutes: i64) -> Self {
        assert!(delta_max_minutes >= 1, "delta_max_minutes must be >= 1");
        TimeDeltaScaler {
            delta_max_minutes,
            literal_denominator: false,
            clamped: AtomicU64::new(0),
        }
    }

    pub fn with_literal_denominator(mut self, literal: bool) -> Self {
        assert!(
            !literal || self.delta_max_minutes >= 2,
            "literal denominator is singular for delta_max_minutes < 2"
        );
        self.literal_denominator = literal;
        self
    }

    pub fn delta_max_minutes(&self) -> i64 {
        self.delta_max_minutes
    }

    /// Number of deltas that exceeded delta_max and were clamped.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn scale(&self, delta_minutes: i64) -> f64 {
        let delta = delta_minutes.max(0);
        let delta = if delta > self.delta_max_minutes {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            self.delta_max_minutes
        } else {
            delta
        };
        let num = (1.0 + delta as f64).ln();
        let den = if self.literal_denominator {
            (self.delta_max_minutes as f64).ln()
        } else {
            (1.0 + self.delta_max_minutes as f64).ln()
        };
        num / den
    }
}

impl Clone for TimeDeltaScaler {
    fn clone(&self) -> Self {
        TimeDeltaScaler {
            delta_max_minutes: self.delta_max_minutes,
            literal_denominator: self.literal_denominator,
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

/// Scaled delta per event, aligned to `events`. STATIC events and the first
/// timed event get 0; every later timed event gets the scaled gap to the
/// previous timed event. Works on any contiguous slice, so a chunk encodes
/// the same way regardless of what precedes it in the timeline.
pub fn compute_deltas(events: &[TimelineEvent], scaler: &TimeDeltaScaler) -> Vec<f64> {
    let mut out = Vec::with_capacity(events.len());
    let mut prev_time: Option<i64> = None;
    for e in events {
        match e.time_minutes {
            None => out.push(0.0),
            Some(t) => {
                let d = match prev_time {
                    None => 0.0,
                    Some(p) => scaler.scale(t - p),
                };
                out.push(d);
                prev_time = Some(t);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Timeline construction

/// Week/month/year gap-token id for an inter-visit gap.
///
/// days 7..=27 -> W1..W3 (floor(days/7)); 28..=364 -> M1..M12
/// (floor(days/30.44), clamped into 1..=12); >= 365 -> 1Y+.
pub fn gap_token_id(gap_minutes: i64) -> u32 {
    let days = gap_minutes / MINUTES_PER_DAY;
    debug_assert!(days >= 7);
    if days < 28 {
        vocab::GAP_WEEK_BASE + (days / 7 - 1) as u32
    } else if days < 365 {
        let months = (days * 100 / 3044).clamp(1, 12);
        vocab::GAP_MONTH_BASE + (months - 1) as u32
    } else {
        vocab::GAP_YEAR
    }
}

fn is_gap_concept(id: u32) -> bool {
    (vocab::GAP_WEEK_BASE..=vocab::GAP_YEAR).contains(&id)
}

enum Item {
    /// Maximal run of same-stage timed events with internal gaps below the
    /// threshold: one care episode.
    Run {
        stage: CareStage,
        events: Vec<TimelineEvent>,
    },
    /// A pre-existing gap token, kept in place.
    GapToken(TimelineEvent),
}

/// Assemble a patient timeline from raw events.
///
/// Events are stably sorted by time (STATIC first, a trailing death token
/// last among ties). Care episodes are detected by stage changes, gaps of
/// at least [`GAP_THRESHOLD_MINUTES`], or intervening gap tokens, and get
/// 1-based visit orders. Gap tokens are inserted between episodes that are
/// at least the threshold apart, OUTP/ED episodes are wrapped in
/// start/end boundary tokens, and both insertions are skipped when already
/// present, so rebuilding an already-built timeline is a no-op.
pub fn build_timeline(
    patient_id: &str,
    raw_events: &[RawEvent],
    vocabulary: &mut Vocabulary,
) -> Result<PatientTimeline> {
    let mut events = Vec::with_capacity(raw_events.len());
    for (i, r) in raw_events.iter().enumerate() {
        let concept_id = vocabulary.intern(&r.code);
        let is_static = r.stage == CareStage::Static;
        if !is_static && r.time.is_none() {
            return Err(Error::InvalidTimeline(format!(
                "patient {patient_id}: non-static event {i} ({}) has no timestamp",
                r.code
            )));
        }
        events.push(TimelineEvent {
            concept_id,
            numeric_value: r.value,
            // STATIC events never carry a timestamp, whatever the input says.
            time_minutes: if is_static { None } else { r.time },
            care_stage: r.stage,
            visit_order: 0,
            event_type: r.event_type,
        });
    }

    // Stable sort: statics first, then by time; a death token loses ties so
    // it stays terminal.
    events.sort_by_key(|e| {
        (
            !e.is_static(),
            e.time_minutes.unwrap_or(i64::MIN),
            e.concept_id == vocab::MEDS_DEATH,
        )
    });

    let n_static = events.iter().take_while(|e| e.is_static()).count();
    let statics: Vec<TimelineEvent> = events[..n_static]
        .iter()
        .map(|e| TimelineEvent {
            visit_order: 0,
            ..*e
        })
        .collect();

    // Group the timed tail into episodes and kept gap tokens.
    let mut items: Vec<Item> = Vec::new();
    for e in &events[n_static..] {
        let e = *e;
        if e.is_gap() || e.event_type == EventType::TimeGap || is_gap_concept(e.concept_id) {
            items.push(Item::GapToken(TimelineEvent {
                care_stage: CareStage::Gap,
                visit_order: 0,
                event_type: EventType::TimeGap,
                ..e
            }));
            continue;
        }
        let t = e.time_minutes.unwrap();
        let start_new = match items.last_mut() {
            Some(Item::Run { stage, events }) => {
                let prev_t = events.last().unwrap().time_minutes.unwrap();
                *stage != e.care_stage || t - prev_t >= GAP_THRESHOLD_MINUTES
            }
            _ => true,
        };
        if start_new {
            items.push(Item::Run {
                stage: e.care_stage,
                events: vec![e],
            });
        } else if let Some(Item::Run { events, .. }) = items.last_mut() {
            events.push(e);
        }
    }

    let mut out = statics;
    let mut visit_order: u32 = 0;
    let mut prev_run_end: Option<i64> = None;
    let mut gap_since_prev_run = false;
    for item in items {
        match item {
            Item::GapToken(e) => {
                out.push(e);
                gap_since_prev_run = true;
            }
            Item::Run { stage, events } => {
                visit_order += 1;
                let first_t = events.first().unwrap().time_minutes.unwrap();
                let last_t = events.last().unwrap().time_minutes.unwrap();
                if let Some(prev_t) = prev_run_end {
                    let gap = first_t - prev_t;
                    if gap >= GAP_THRESHOLD_MINUTES && !gap_since_prev_run {
                        out.push(TimelineEvent {
                            concept_id: gap_token_id(gap),
                            numeric_value: None,
                            time_minutes: Some(first_t),
                            care_stage: CareStage::Gap,
                            visit_order: 0,
                            event_type: EventType::TimeGap,
                        });
                    }
                }
                push_episode(&mut out, stage, events, visit_order);
                prev_run_end = Some(last_t);
                gap_since_prev_run = false;
            }
        }
    }

    let visit_boundaries = derive_visit_boundaries(&out);
    Ok(PatientTimeline {
        patient_id: patient_id.to_string(),
        events: out,
        visit_boundaries,
    })
}

/// Emit one episode, wrapping OUTP/ED in boundary tokens when the body does
/// not already carry them. A trailing death token stays last.
fn push_episode(
    out: &mut Vec<TimelineEvent>,
    stage: CareStage,
    mut events: Vec<TimelineEvent>,
    visit_order: u32,
) {
    for e in &mut events {
        e.visit_order = visit_order;
    }
    let death = match events.last() {
        Some(e) if e.concept_id == vocab::MEDS_DEATH => events.pop(),
        _ => None,
    };
    let wrap = match stage {
        CareStage::Outp => Some((vocab::OUTPATIENT_START, vocab::OUTPATIENT_END)),
        CareStage::Ed => Some((vocab::EMERGENCY_START, vocab::EMERGENCY_END)),
        _ => None,
    };
    if let Some((start_tok, end_tok)) = wrap {
        let anchor_time = |e: Option<&TimelineEvent>| {
            e.and_then(|e| e.time_minutes)
                .or_else(|| death.as_ref().and_then(|d| d.time_minutes))
        };
        if events.first().map(|e| e.concept_id) != Some(start_tok) {
            out.push(TimelineEvent {
                concept_id: start_tok,
                numeric_value: None,
                time_minutes: anchor_time(events.first()),
                care_stage: stage,
                visit_order,
                event_type: EventType::Admin,
            });
        }
        let end_marker = TimelineEvent {
            concept_id: end_tok,
            numeric_value: None,
            time_minutes: anchor_time(events.last()),
            care_stage: stage,
            visit_order,
            event_type: EventType::Admin,
        };
        out.extend(events);
        if out.last().map(|e| e.concept_id) != Some(end_tok) {
            out.push(end_marker);
        }
    } else {
        out.extend(events);
    }
    out.extend(death);
}

fn derive_visit_boundaries(events: &[TimelineEvent]) -> Vec<VisitSpan> {
    let mut spans: Vec<VisitSpan> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        if e.visit_order == 0 {
            continue;
        }
        match spans.last_mut() {
            Some(s) if s.visit_order == e.visit_order && s.end == i => s.end = i + 1,
            _ => spans.push(VisitSpan {
                visit_order: e.visit_order,
                start: i,
                end: i + 1,
            }),
        }
    }
    spans
}

// ---------------------------------------------------------------------------
// Index stay and query/history split

/// The first ICU stay on the timeline, used as the prediction anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexStay {
    pub admit_index: usize,
    pub admit_minutes: i64,
    pub discharge_index: Option<usize>,
    pub discharge_minutes: Option<i64>,
    pub visit_order: u32,
}

/// Locate the first ICU admission marker and its matching discharge (the
/// next ICU discharge marker before any further ICU admission).
pub fn find_index_stay(timeline: &PatientTimeline) -> Option<IndexStay> {
    let admit_index = timeline
        .events
        .iter()
        .position(|e| e.concept_id == vocab::ADMISSION_AT_ICU)?;
    let admit = &timeline.events[admit_index];
    let mut discharge = None;
    for (i, e) in timeline.events.iter().enumerate().skip(admit_index + 1) {
        if e.concept_id == vocab::ADMISSION_AT_ICU {
            break;
        }
        if e.concept_id == vocab::DISCHARGE_FROM_ICU {
            discharge = Some((i, e.time_minutes));
            break;
        }
    }
    Some(IndexStay {
        admit_index,
        admit_minutes: admit.time_minutes?,
        discharge_index: discharge.map(|(i, _)| i),
        discharge_minutes: discharge.and_then(|(_, t)| t),
        visit_order: admit.visit_order,
    })
}

/// Index ranges of a query/history split. `history` always starts at 0 and
/// abuts `query`; events at `query.end` and beyond fall outside the task
/// window and are unused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryHistorySplit {
    pub query: Range<usize>,
    pub history: Range<usize>,
    pub window_end_minutes: i64,
}

/// Split a timeline into the query segment (last `query_len` events at or
/// before the task's window end) and the history (everything strictly
/// before the query). STATIC events count as visible at any window end.
pub fn split_query_history(
    timeline: &PatientTimeline,
    task: &TaskSpec,
    query_len: usize,
) -> Result<QueryHistorySplit> {
    assert!(query_len > 0, "query_len must be positive");
    let stay = find_index_stay(timeline).ok_or_else(|| {
        Error::MissingReference(format!(
            "patient {}: no ICU admission marker",
            timeline.patient_id
        ))
    })?;
    let window_end = match task.reference {
        ReferencePoint::IcuAdmission => stay.admit_minutes + task.window_minutes.unwrap(),
        ReferencePoint::IcuDischarge => stay.discharge_minutes.ok_or_else(|| {
            Error::MissingReference(format!(
                "patient {}: no ICU discharge marker",
                timeline.patient_id
            ))
        })?,
    };
    let cut = timeline
        .events
        .partition_point(|e| e.is_static() || e.time_minutes.unwrap() <= window_end);
    if cut == 0 {
        return Err(Error::EmptyQuery(format!(
            "patient {}: no events at or before minute {window_end}",
            timeline.patient_id
        )));
    }
    let query_start = cut.saturating_sub(query_len);
    Ok(QueryHistorySplit {
        query: query_start..cut,
        history: 0..query_start,
        window_end_minutes: window_end,
    })
}
