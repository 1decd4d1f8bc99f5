//! Dataset file format: one JSON object per line, UTF-8, LF endings.
//!
//! `{"person_id":0,"birth_year":1980.5,"events":[[12,3.25],...],"labels":[2,9]}`
//!
//! Unknown fields are tolerated (counted in the load report) so newer
//! writers stay readable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CohortError, Event, PersonRecord};
use crate::labels::LabelVector;

#[derive(Serialize, Deserialize)]
struct PersonLine {
    person_id: u64,
    birth_year: f64,
    events: Vec<(usize, f64)>,
    labels: Vec<usize>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadReport {
    pub n_persons: usize,
    /// Unknown-field occurrences skipped for forward compatibility.
    pub unknown_fields: usize,
}

pub fn save_jsonl(dataset: &[PersonRecord], path: &Path) -> Result<(), CohortError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in dataset {
        let line = PersonLine {
            person_id: p.person_id,
            birth_year: p.birth_year,
            events: p.events.iter().map(|e| (e.code, e.age)).collect(),
            labels: p.labels.class_ids(),
            extra: serde_json::Map::new(),
        };
        serde_json::to_writer(&mut w, &line)
            .map_err(|e| CohortError::Data(format!("serialize person {}: {e}", p.person_id)))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(
    path: &Path,
    n_classes: usize,
) -> Result<(Vec<PersonRecord>, LoadReport), CohortError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PersonLine =
            serde_json::from_str(&line).map_err(|e| CohortError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        report.unknown_fields += parsed.extra.len();
        if parsed.events.is_empty() {
            return Err(CohortError::Parse {
                line: line_no,
                message: "events list is empty".into(),
            });
        }
        let events: Vec<Event> = parsed
            .events
            .iter()
            .map(|&(code, age)| Event { code, age })
            .collect();
        if events.windows(2).any(|w| w[0].age > w[1].age) {
            return Err(CohortError::Parse {
                line: line_no,
                message: "events are not time-ordered".into(),
            });
        }
        let labels =
            LabelVector::from_class_ids(&parsed.labels, n_classes).map_err(|e| {
                CohortError::Parse {
                    line: line_no,
                    message: e.to_string(),
                }
            })?;
        if labels.count_positive() == 0 {
            return Err(CohortError::Parse {
                line: line_no,
                message: "person carries no label".into(),
            });
        }
        let none = n_classes - 1;
        if labels.get(none) && labels.count_positive() > 1 {
            return Err(CohortError::Parse {
                line: line_no,
                message: "none label must exclude all others".into(),
            });
        }
        out.push(PersonRecord {
            person_id: parsed.person_id,
            birth_year: parsed.birth_year,
            events,
            labels,
        });
        report.n_persons += 1;
    }
    Ok((out, report))
}
