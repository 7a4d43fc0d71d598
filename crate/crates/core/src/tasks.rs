//! Prediction task definitions and the synthetic dataset generator with a
//! planted long-range signal.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::timeline::vocab::{self, Vocabulary};
use crate::timeline::{
    build_timeline, find_index_stay, CareStage, EventType, PatientTimeline, RawEvent,
    MINUTES_PER_DAY,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskName {
    #[serde(rename = "IHM_48H")]
    Ihm48h,
    #[serde(rename = "LOS7_24H")]
    Los724h,
    #[serde(rename = "READMIT_30D")]
    Readmit30d,
    #[serde(rename = "MORT_1Y")]
    Mort1y,
}

impl TaskName {
    pub const ALL: [TaskName; 4] = [
        TaskName::Ihm48h,
        TaskName::Los724h,
        TaskName::Readmit30d,
        TaskName::Mort1y,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Ihm48h => "IHM_48H",
            TaskName::Los724h => "LOS7_24H",
            TaskName::Readmit30d => "READMIT_30D",
            TaskName::Mort1y => "MORT_1Y",
        }
    }
}

impl std::str::FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "IHM_48H" => Ok(TaskName::Ihm48h),
            "LOS7_24H" => Ok(TaskName::Los724h),
            "READMIT_30D" => Ok(TaskName::Readmit30d),
            "MORT_1Y" => Ok(TaskName::Mort1y),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl std::fmt::Display for TaskName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferencePoint {
    #[serde(rename = "ICU_ADMIT")]
    IcuAdmission,
    #[serde(rename = "ICU_DISCHARGE")]
    IcuDischarge,
}

/// A prediction task: its anchor point, observation window, and label rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub reference: ReferencePoint,
    /// Window length after the reference; absent means the entire stay
    /// (window ends at discharge).
    pub window_minutes: Option<i64>,
    pub label_rule: String,
    /// Count a stay of exactly 7 days as long for LOS7 (default: strictly
    /// greater than 7 days required).
    pub los7_inclusive: bool,
}

impl TaskSpec {
    pub fn new(name: TaskName) -> Self {
        let (reference, window_minutes, label_rule) = match name {
            TaskName::Ihm48h => (
                ReferencePoint::IcuAdmission,
                Some(48 * 60),
                "death token within the admission",
            ),
            TaskName::Los724h => (
                ReferencePoint::IcuAdmission,
                Some(24 * 60),
                "ICU stay longer than 7 days",
            ),
            TaskName::Readmit30d => (
                ReferencePoint::IcuDischarge,
                None,
                "next ICU admission within 30 days of discharge",
            ),
            TaskName::Mort1y => (
                ReferencePoint::IcuDischarge,
                None,
                "death token within 365 days of discharge",
            ),
        };
        TaskSpec {
            name,
            reference,
            window_minutes,
            label_rule: label_rule.to_string(),
            los7_inclusive: false,
        }
    }

    /// A windowed task with a non-default window; test plumbing.
    pub fn custom_window(name: TaskName, window_minutes: i64) -> Self {
        let mut spec = TaskSpec::new(name);
        assert!(
            spec.window_minutes.is_some(),
            "custom_window only applies to windowed tasks"
        );
        spec.window_minutes = Some(window_minutes);
        spec
    }

    pub fn with_inclusive_los7(mut self, inclusive: bool) -> Self {
        self.los7_inclusive = inclusive;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExclusionReason {
    NoIcuAdmission,
    NoIcuDischarge,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::NoIcuAdmission => "NO_ICU_ADMISSION",
            ExclusionReason::NoIcuDischarge => "NO_ICU_DISCHARGE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelOutcome {
    Included(u8),
    Excluded(ExclusionReason),
}

impl LabelOutcome {
    pub fn label(self) -> Option<u8> {
        match self {
            LabelOutcome::Included(l) => Some(l),
            LabelOutcome::Excluded(_) => None,
        }
    }
}

/// Label the timeline's index ICU stay for one task. A missing anchor
/// marker excludes the example instead of failing.
pub fn label(timeline: &PatientTimeline, task: &TaskSpec) -> LabelOutcome {
    let stay = match find_index_stay(timeline) {
        Some(s) => s,
        None => return LabelOutcome::Excluded(ExclusionReason::NoIcuAdmission),
    };
    let death_minutes = |from: i64, to: Option<i64>| -> Option<i64> {
        timeline.events.iter().find_map(|e| {
            let t = e.time_minutes?;
            (e.concept_id == vocab::MEDS_DEATH && t >= from && to.is_none_or(|hi| t <= hi))
                .then_some(t)
        })
    };
    match task.name {
        TaskName::Ihm48h => {
            let died = death_minutes(stay.admit_minutes, stay.discharge_minutes).is_some();
            LabelOutcome::Included(died as u8)
        }
        TaskName::Los724h => {
            // A stay ended by in-unit death has no discharge marker; the
            // death time bounds its length instead.
            let end = stay
                .discharge_minutes
                .or_else(|| death_minutes(stay.admit_minutes, None));
            let end = match end {
                Some(t) => t,
                None => return LabelOutcome::Excluded(ExclusionReason::NoIcuDischarge),
            };
            let long = if task.los7_inclusive {
                end - stay.admit_minutes >= 7 * MINUTES_PER_DAY
            } else {
                end - stay.admit_minutes > 7 * MINUTES_PER_DAY
            };
            LabelOutcome::Included(long as u8)
        }
        TaskName::Readmit30d => {
            let discharge = match stay.discharge_minutes {
                Some(t) => t,
                None => return LabelOutcome::Excluded(ExclusionReason::NoIcuDischarge),
            };
            let readmitted = timeline.events.iter().any(|e| {
                e.concept_id == vocab::ADMISSION_AT_ICU
                    && e.time_minutes.is_some_and(|t| {
                        t > discharge && t - discharge <= 30 * MINUTES_PER_DAY
                    })
            });
            LabelOutcome::Included(readmitted as u8)
        }
        TaskName::Mort1y => {
            let discharge = match stay.discharge_minutes {
                Some(t) => t,
                None => return LabelOutcome::Excluded(ExclusionReason::NoIcuDischarge),
            };
            let died =
                death_minutes(discharge, Some(discharge + 365 * MINUTES_PER_DAY)).is_some();
            LabelOutcome::Included(died as u8)
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Generator parameters. The label model per task: with probability
/// `signal_strength` the label equals the long-range marker bit (a marker
/// token planted at least two visits before the index stay), otherwise it
/// equals a query-local risk bit (a risk token recurring through the index
/// stay). The marker is therefore recoverable only through history, and the
/// lift from retrieval is tunable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub patients: usize,
    /// Pre-index visits per patient (inclusive range); at least 2 so the
    /// marker can sit two visits back.
    pub visits_min: usize,
    pub visits_max: usize,
    /// Events per pre-index visit (inclusive range).
    pub events_min: usize,
    pub events_max: usize,
    pub marker_code: String,
    pub query_risk_code: String,
    pub signal_strength: f64,
    /// Size of the noise-code pool (codes EV//0 .. EV//n-1, Zipf-weighted).
    pub noise_codes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            patients: 200,
            visits_min: 3,
            visits_max: 5,
            events_min: 8,
            events_max: 20,
            marker_code: "MARKER//LONGRANGE".to_string(),
            query_risk_code: "QRISK//ACUTE".to_string(),
            signal_strength: 0.9,
            noise_codes: 500,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.patients == 0 {
            return Err(Error::Config("patients must be positive".into()));
        }
        if self.visits_min < 2 || self.visits_max < self.visits_min {
            return Err(Error::Config(
                "visit range must satisfy 2 <= visits_min <= visits_max".into(),
            ));
        }
        if self.events_min == 0 || self.events_max < self.events_min {
            return Err(Error::Config("bad events-per-visit range".into()));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Config("signal_strength must be in [0,1]".into()));
        }
        if self.noise_codes == 0 {
            return Err(Error::Config("noise_codes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub patient_id: String,
    pub stay_ordinal: u32,
    pub task: TaskName,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExclusionRecord {
    pub patient_id: String,
    pub task: TaskName,
    pub reason: ExclusionReason,
}

/// Per-patient ground truth: which latent bits were drawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub patient_id: String,
    pub marker: bool,
    pub query_risk: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticPatient {
    pub timeline: PatientTimeline,
    /// The event stream as emitted, before gap insertion; this is what
    /// an event file stores, so rebuilding the timeline from it is
    /// lossless.
    pub raw_events: Vec<RawEvent>,
    pub marker: bool,
    pub query_risk: bool,
    /// Label bits as drawn, before realization; tasks whose anchor is
    /// absent from the realized timeline end up excluded at labeling.
    pub drawn: Vec<(TaskName, u8)>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub vocabulary: Vocabulary,
    pub patients: Vec<SyntheticPatient>,
}

impl SyntheticDataset {
    /// Labels and exclusions for every patient and task, recomputed from
    /// the realized timelines.
    pub fn label_records(&self) -> (Vec<LabelRecord>, Vec<ExclusionRecord>) {
        let mut labels = Vec::new();
        let mut exclusions = Vec::new();
        for p in &self.patients {
            for name in TaskName::ALL {
                let task = TaskSpec::new(name);
                match label(&p.timeline, &task) {
                    LabelOutcome::Included(l) => labels.push(LabelRecord {
                        patient_id: p.timeline.patient_id.clone(),
                        stay_ordinal: 0,
                        task: name,
                        label: l,
                    }),
                    LabelOutcome::Excluded(reason) => exclusions.push(ExclusionRecord {
                        patient_id: p.timeline.patient_id.clone(),
                        task: name,
                        reason,
                    }),
                }
            }
        }
        (labels, exclusions)
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.patients
            .iter()
            .map(|p| GroundTruth {
                patient_id: p.timeline.patient_id.clone(),
                marker: p.marker,
                query_risk: p.query_risk,
            })
            .collect()
    }
}

struct PatientDraw {
    patient_id: String,
    raw_events: Vec<RawEvent>,
    marker: bool,
    query_risk: bool,
    drawn: Vec<(TaskName, u8)>,
}

/// Generate a synthetic dataset. Deterministic: each patient draws from a
/// seed derived from (config seed, patient index), so the parallel phase is
/// schedule-independent; vocabulary interning runs serially in patient
/// order afterwards.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let draws: Vec<PatientDraw> = (0..config.patients)
        .into_par_iter()
        .map(|i| generate_patient(config, i))
        .collect();
    let mut vocabulary = Vocabulary::new();
    let mut patients = Vec::with_capacity(draws.len());
    for d in draws {
        let timeline = build_timeline(&d.patient_id, &d.raw_events, &mut vocabulary)?;
        patients.push(SyntheticPatient {
            timeline,
            raw_events: d.raw_events,
            marker: d.marker,
            query_risk: d.query_risk,
            drawn: d.drawn,
        });
    }
    vocabulary.freeze();
    Ok(SyntheticDataset {
        vocabulary,
        patients,
    })
}

fn generate_patient(config: &SyntheticConfig, index: usize) -> PatientDraw {
    let mut rng = rng_from_seed(derive_seed(config.seed, index as u64));
    let patient_id = format!("P{index:05}");
    let marker = rng.gen_bool(0.5);
    let query_risk = rng.gen_bool(0.5);
    let drawn: Vec<(TaskName, u8)> = TaskName::ALL
        .iter()
        .map(|&t| {
            let use_marker = rng.gen_bool(config.signal_strength);
            let bit = if use_marker { marker } else { query_risk };
            (t, bit as u8)
        })
        .collect();
    let bit = |task: TaskName| drawn.iter().find(|(t, _)| *t == task).unwrap().1 == 1;
    let (ihm, los7, readmit, mort) = (
        bit(TaskName::Ihm48h),
        bit(TaskName::Los724h),
        bit(TaskName::Readmit30d),
        bit(TaskName::Mort1y),
    );

    let zipf = Zipf::<f64>::new(config.noise_codes as u64, 1.07).unwrap();
    let mut events: Vec<RawEvent> = Vec::new();
    let day = MINUTES_PER_DAY;

    let gender = if rng.gen_bool(0.5) { "F" } else { "M" };
    events.push(static_event(&format!("GENDER//{gender}"), None));
    let race = ["A", "B", "C", "D"][rng.gen_range(0..4)];
    events.push(static_event(&format!("RACE//{race}"), None));
    let age: f64 = StandardNormal.sample(&mut rng);
    events.push(static_event("AGE_AT_ADMISSION", Some(age)));

    // Pre-index visits, weeks-to-months apart.
    let n_pre = rng.gen_range(config.visits_min..=config.visits_max);
    let marker_visit = marker.then(|| rng.gen_range(0..=n_pre - 2));
    let mut t = 10_000_000 + rng.gen_range(0..525_600i64);
    for v in 0..n_pre {
        let stage = match rng.gen_range(0..100) {
            0..=44 => CareStage::Outp,
            45..=69 => CareStage::Ed,
            _ => CareStage::Hosp,
        };
        let visit_start = t;
        let n_ev = rng.gen_range(config.events_min..=config.events_max);
        for _ in 0..n_ev {
            events.push(noise_event(&mut rng, &zipf, t, stage));
            t += rng.gen_range(1..=90);
        }
        if marker_visit == Some(v) {
            let mt = rng.gen_range(visit_start..=t);
            events.push(RawEvent {
                code: config.marker_code.clone(),
                value: None,
                time: Some(mt),
                stage,
                event_type: EventType::Diagnosis,
            });
        }
        t += rng.gen_range(8..=80) * day;
    }

    // Index stay: a short hospital lead-in, then the ICU stay.
    events.push(admin_event("ADMISSION-AT-HOSPITAL", t, CareStage::Hosp));
    for _ in 0..rng.gen_range(1..=3) {
        t += rng.gen_range(10..=60);
        events.push(noise_event(&mut rng, &zipf, t, CareStage::Hosp));
    }
    let admit_t = t + rng.gen_range(120..=360);
    events.push(admin_event("ADMISSION-AT-ICU", admit_t, CareStage::Icu));
    let duration = if los7 {
        rng.gen_range((75 * day / 10)..=(9 * day))
    } else {
        rng.gen_range((3 * day)..=(65 * day / 10))
    };
    let end_t = admit_t + duration;
    // Observations: dense inside the first 72h (keeps any task window well
    // populated), sparse afterwards.
    let mut obs_t = admit_t + rng.gen_range(5..=20);
    while obs_t < end_t {
        events.push(icu_event(&mut rng, &zipf, obs_t));
        obs_t += if obs_t - admit_t < 72 * 60 {
            rng.gen_range(20..=40)
        } else {
            rng.gen_range(240..=480)
        };
    }
    if query_risk {
        // Recurring risk token: present in the tail of any query window.
        let mut rt = admit_t + rng.gen_range(30..=90);
        while rt < end_t {
            events.push(RawEvent {
                code: config.query_risk_code.clone(),
                value: Some(StandardNormal.sample(&mut rng)),
                time: Some(rt),
                stage: CareStage::Icu,
                event_type: EventType::IcuChart,
            });
            rt += rng.gen_range(90..=240);
        }
    }

    if ihm {
        events.push(RawEvent {
            code: "MEDS_DEATH".to_string(),
            value: None,
            time: Some(end_t),
            stage: CareStage::Icu,
            event_type: EventType::Special,
        });
        // Death in the unit: no discharge markers, later tasks excluded.
    } else {
        events.push(admin_event("DISCHARGE-FROM-ICU", end_t, CareStage::Icu));
        let hosp_out = end_t + rng.gen_range(60..=720);
        events.push(admin_event(
            "DISCHARGE-FROM-HOSPITAL",
            hosp_out,
            CareStage::Hosp,
        ));
        let mut last_t = hosp_out;
        if readmit {
            let stub_admit = end_t + rng.gen_range(3 * day..=25 * day);
            events.push(admin_event("ADMISSION-AT-ICU", stub_admit, CareStage::Icu));
            let mut st = stub_admit;
            for _ in 0..rng.gen_range(3..=6) {
                st += rng.gen_range(60..=120);
                events.push(icu_event(&mut rng, &zipf, st));
            }
            let stub_end = stub_admit + rng.gen_range(day..=2 * day);
            events.push(admin_event("DISCHARGE-FROM-ICU", stub_end, CareStage::Icu));
            last_t = stub_end;
        } else if rng.gen_bool(0.5) {
            // A far-future outpatient follow-up, outside the readmission
            // window.
            let mut ft = end_t + rng.gen_range(35 * day..=300 * day);
            for _ in 0..rng.gen_range(2..=5) {
                events.push(noise_event(&mut rng, &zipf, ft, CareStage::Outp));
                ft += rng.gen_range(5..=60);
            }
            last_t = ft;
        }
        if mort {
            let death_t = (end_t + rng.gen_range(10 * day..=300 * day))
                .clamp(last_t + day, end_t + 364 * day);
            events.push(RawEvent {
                code: "MEDS_DEATH".to_string(),
                value: None,
                time: Some(death_t),
                stage: CareStage::Hosp,
                event_type: EventType::Special,
            });
        }
    }

    PatientDraw {
        patient_id,
        raw_events: events,
        marker,
        query_risk,
        drawn,
    }
}

fn static_event(code: &str, value: Option<f64>) -> RawEvent {
    RawEvent {
        code: code.to_string(),
        value,
        time: None,
        stage: CareStage::Static,
        event_type: EventType::StaticDemo,
    }
}

fn admin_event(code: &str, t: i64, stage: CareStage) -> RawEvent {
    RawEvent {
        code: code.to_string(),
        value: None,
        time: Some(t),
        stage,
        event_type: EventType::Admin,
    }
}

fn noise_event(
    rng: &mut impl Rng,
    zipf: &Zipf<f64>,
    t: i64,
    stage: CareStage,
) -> RawEvent {
    let k = zipf.sample(rng) as usize - 1;
    let event_type = match stage {
        CareStage::Outp => match rng.gen_range(0..4) {
            0 => EventType::Lab,
            1 => EventType::Medication,
            2 => EventType::Diagnosis,
            _ => EventType::Procedure,
        },
        CareStage::Ed => match rng.gen_range(0..3) {
            0 => EventType::Lab,
            1 => EventType::Medication,
            _ => EventType::Diagnosis,
        },
        _ => match rng.gen_range(0..5) {
            0 => EventType::Lab,
            1 => EventType::Medication,
            2 => EventType::Microbiology,
            3 => EventType::Drg,
            _ => EventType::Procedure,
        },
    };
    let value = if event_type == EventType::Lab || rng.gen_bool(0.3) {
        Some(StandardNormal.sample(rng))
    } else {
        None
    };
    RawEvent {
        code: format!("EV//{k}"),
        value,
        time: Some(t),
        stage,
        event_type,
    }
}

fn icu_event(rng: &mut impl Rng, zipf: &Zipf<f64>, t: i64) -> RawEvent {
    let k = zipf.sample(rng) as usize - 1;
    let event_type = match rng.gen_range(0..10) {
        0..=4 => EventType::IcuChart,
        5..=6 => EventType::IcuInfusion,
        7..=8 => EventType::IcuFluidOutput,
        _ => EventType::IcuProcedure,
    };
    let value = if event_type == EventType::IcuChart {
        Some(StandardNormal.sample(rng))
    } else {
        None
    };
    RawEvent {
        code: format!("EV//{k}"),
        value,
        time: Some(t),
        stage: CareStage::Icu,
        event_type,
    }
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Partition patient ids into train/val/test by shuffling with the given
/// seed. Fractions must sum to 1. Ids within each split come back sorted.
pub fn split_patients(
    ids: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::Config("split fractions must be non-negative".into()));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fe
        )));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = rng_from_seed(derive_seed(seed, 0x5711));
    sorted.shuffle(&mut rng);
    let n = sorted.len();
    let n_train = ((n as f64) * ft).round() as usize;
    let n_val = (((n as f64) * fv).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut it = sorted.into_iter();
    let mut train: Vec<String> = it.by_ref().take(n_train).collect();
    let mut val: Vec<String> = it.by_ref().take(n_val).collect();
    let mut test: Vec<String> = it.collect();
    train.sort();
    val.sort();
    test.sort();
    Ok(SplitAssignment { train, val, test })
}
