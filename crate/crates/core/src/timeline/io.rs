//! JSON Lines event file reading and writing.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use super::RawEvent;
use crate::error::{Error, Result};

/// One line of an event file. Lines need not be sorted; grouping and
/// ordering happen at timeline construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: String,
    #[serde(flatten)]
    pub event: RawEvent,
}

/// Read an event file and group events by patient, preserving each
/// patient's line order. Patients come back in id order.
pub fn read_events_grouped(path: &Path) -> Result<BTreeMap<String, Vec<RawEvent>>> {
    let f = std::fs::File::open(path)?;
    let mut grouped: BTreeMap<String, Vec<RawEvent>> = BTreeMap::new();
    for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| Error::CorruptArtifact {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        grouped.entry(rec.patient_id).or_default().push(rec.event);
    }
    Ok(grouped)
}

/// Write events as JSON Lines, one event per line, in the order given.
pub fn write_events<'a>(
    path: &Path,
    events: impl Iterator<Item = (&'a str, &'a RawEvent)>,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (patient_id, event) in events {
        let rec = EventRecord {
            patient_id: patient_id.to_string(),
            event: event.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::{CareStage, EventType};

    #[test]
    fn round_trip_preserves_order_and_nulls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let events = vec![
            (
                "p2",
                RawEvent {
                    code: "LAB//x".into(),
                    value: Some(1.25),
                    time: Some(500),
                    stage: CareStage::Icu,
                    event_type: EventType::Lab,
                },
            ),
            (
                "p1",
                RawEvent {
                    code: "GENDER//F".into(),
                    value: None,
                    time: None,
                    stage: CareStage::Static,
                    event_type: EventType::StaticDemo,
                },
            ),
            (
                "p2",
                RawEvent {
                    code: "MED//y".into(),
                    value: None,
                    time: Some(400),
                    stage: CareStage::Icu,
                    event_type: EventType::Medication,
                },
            ),
        ];
        write_events(&path, events.iter().map(|(p, e)| (*p, e))).unwrap();
        let grouped = read_events_grouped(&path).unwrap();
        assert_eq!(grouped.len(), 2);
        assert_eq!(grouped["p2"].len(), 2);
        // per-patient input order kept, not time order
        assert_eq!(grouped["p2"][0].code, "LAB//x");
        assert_eq!(grouped["p1"][0].time, None);
    }

    #[test]
    fn stage_and_type_serialize_as_upper_snake() {
        let e = RawEvent {
            code: "EV//1".into(),
            value: None,
            time: Some(1),
            stage: CareStage::Icu,
            event_type: EventType::IcuFluidOutput,
        };
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"ICU\""));
        assert!(s.contains("\"ICU_FLUID_OUTPUT\""));
        assert!(s.contains("\"type\""));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        std::fs::write(&path, "{\"patient_id\": \"p\"}\n").unwrap();
        let err = read_events_grouped(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
