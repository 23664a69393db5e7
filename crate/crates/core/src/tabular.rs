//! Columnar flat-file formats.
//!
//! Every file is CSV with a schema tag on the first line
//! (`# schema: tzero.<kind>.v1`). Trajectory and observed-record sets use
//! a long layout: one `person` row per person plus one `encounter` row per
//! encounter. Readers verify the tag before parsing. Weekly dispensing
//! indicators are encoded as run-length spans `start:end:state` joined by
//! `;` (inclusive week ranges).

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::observe::{EndType, ObservedRecord};
use crate::scm::{Encounter, EncounterKind, Trajectory};

pub const TRAJECTORY_SCHEMA: &str = "tzero.trajectories.v1";
pub const OBSERVED_SCHEMA: &str = "tzero.observed.v1";
pub const COHORT_SCHEMA: &str = "tzero.cohort.v1";

fn write_schema_tag(out: &mut impl Write, tag: &str) -> Result<()> {
    writeln!(out, "# schema: {tag}")?;
    Ok(())
}

fn check_schema_tag(first_line: &str, expected: &str, path_hint: &str) -> Result<()> {
    let found = first_line
        .strip_prefix("# schema:")
        .map(str::trim)
        .unwrap_or("");
    if found == expected {
        Ok(())
    } else {
        Err(Error::schema(
            Some(format!("{path_hint}, line 1")),
            format!("expected schema tag `{expected}`, found `{first_line}`"),
        ))
    }
}

fn encode_state_spans(states: &[(i32, bool)]) -> String {
    let mut spans: Vec<(i32, i32, bool)> = Vec::new();
    for &(week, on) in states {
        match spans.last_mut() {
            Some((_, end, state)) if *state == on && *end + 1 == week => *end = week,
            _ => spans.push((week, week, on)),
        }
    }
    spans
        .iter()
        .map(|(s, e, on)| format!("{s}:{e}:{}", *on as u8))
        .collect::<Vec<_>>()
        .join(";")
}

fn decode_state_spans(text: &str) -> Result<Vec<(i32, bool)>> {
    let mut out = Vec::new();
    if text.is_empty() {
        return Ok(out);
    }
    for span in text.split(';') {
        let parts: Vec<&str> = span.split(':').collect();
        let err = || Error::schema(None, format!("bad claims span `{span}`"));
        if parts.len() != 3 {
            return Err(err());
        }
        let start: i32 = parts[0].parse().map_err(|_| err())?;
        let end: i32 = parts[1].parse().map_err(|_| err())?;
        let on = match parts[2] {
            "0" => false,
            "1" => true,
            _ => return Err(err()),
        };
        if end < start {
            return Err(err());
        }
        for w in start..=end {
            out.push((w, on));
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    record: String,
    person_id: u64,
    u: Option<f64>,
    u_proxy: Option<f64>,
    chronic: Option<bool>,
    susceptible: Option<bool>,
    prepreg_user: Option<bool>,
    ever_initiated_prepreg: Option<bool>,
    a0: Option<bool>,
    decision_week: Option<u32>,
    a1_decision: Option<bool>,
    switch_week: Option<u32>,
    late_treatment: Option<bool>,
    s_event_week: Option<u32>,
    end_week: Option<u32>,
    y: Option<bool>,
    kind: Option<String>,
    week: Option<i32>,
}

pub fn write_trajectories(out: &mut impl Write, trajectories: &[Trajectory]) -> Result<()> {
    write_schema_tag(out, TRAJECTORY_SCHEMA)?;
    let mut wtr = csv::Writer::from_writer(out);
    for t in trajectories {
        wtr.serialize(TrajectoryRow {
            record: "person".into(),
            person_id: t.person_id,
            u: Some(t.u),
            u_proxy: Some(t.u_proxy),
            chronic: Some(t.chronic),
            susceptible: Some(t.susceptible),
            prepreg_user: Some(t.prepreg_user),
            ever_initiated_prepreg: Some(t.ever_initiated_prepreg),
            a0: Some(t.a0),
            decision_week: Some(t.decision_week),
            a1_decision: t.a1_decision,
            switch_week: t.switch_week,
            late_treatment: t.late_treatment,
            s_event_week: t.s_event,
            end_week: Some(t.end_week),
            y: t.y,
            kind: None,
            week: None,
        })?;
        for e in &t.encounters {
            wtr.serialize(TrajectoryRow {
                record: "encounter".into(),
                person_id: t.person_id,
                u: None,
                u_proxy: None,
                chronic: None,
                susceptible: None,
                prepreg_user: None,
                ever_initiated_prepreg: None,
                a0: None,
                decision_week: None,
                a1_decision: None,
                switch_week: None,
                late_treatment: None,
                s_event_week: None,
                end_week: None,
                y: None,
                kind: Some(e.kind.as_str().into()),
                week: Some(e.week),
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn parse_encounter_kind(text: &str) -> Result<EncounterKind> {
    match text {
        "preconception_counseling" => Ok(EncounterKind::PreconceptionCounseling),
        "pregnancy_test" => Ok(EncounterKind::PregnancyTest),
        "prenatal_visit" => Ok(EncounterKind::PrenatalVisit),
        "delivery_or_end" => Ok(EncounterKind::DeliveryOrEnd),
        other => Err(Error::schema(None, format!("unknown encounter kind `{other}`"))),
    }
}

pub fn read_trajectories(input: &mut impl Read, path_hint: &str) -> Result<Vec<Trajectory>> {
    let mut reader = BufReader::new(input);
    let mut first_line = String::new();
    reader.read_line(&mut first_line)?;
    check_schema_tag(first_line.trim_end(), TRAJECTORY_SCHEMA, path_hint)?;

    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, row) in rdr.deserialize::<TrajectoryRow>().enumerate() {
        let row = row.map_err(|e| {
            Error::schema(Some(format!("{path_hint}, record {}", i + 1)), e.to_string())
        })?;
        let missing = |field: &str| {
            Error::schema(
                Some(format!("{path_hint}, record {}", i + 1)),
                format!("missing `{field}`"),
            )
        };
        match row.record.as_str() {
            "person" => out.push(Trajectory {
                person_id: row.person_id,
                u: row.u.ok_or_else(|| missing("u"))?,
                u_proxy: row.u_proxy.ok_or_else(|| missing("u_proxy"))?,
                chronic: row.chronic.ok_or_else(|| missing("chronic"))?,
                susceptible: row.susceptible.ok_or_else(|| missing("susceptible"))?,
                prepreg_user: row.prepreg_user.ok_or_else(|| missing("prepreg_user"))?,
                ever_initiated_prepreg: row
                    .ever_initiated_prepreg
                    .ok_or_else(|| missing("ever_initiated_prepreg"))?,
                a0: row.a0.ok_or_else(|| missing("a0"))?,
                decision_week: row.decision_week.ok_or_else(|| missing("decision_week"))?,
                a1_decision: row.a1_decision,
                switch_week: row.switch_week,
                late_treatment: row.late_treatment,
                encounters: Vec::new(),
                s_event: row.s_event_week,
                end_week: row.end_week.ok_or_else(|| missing("end_week"))?,
                y: row.y,
            }),
            "encounter" => {
                let t = out.last_mut().ok_or_else(|| {
                    Error::schema(
                        Some(format!("{path_hint}, record {}", i + 1)),
                        "encounter row before any person row",
                    )
                })?;
                if t.person_id != row.person_id {
                    return Err(Error::schema(
                        Some(format!("{path_hint}, record {}", i + 1)),
                        "encounter row does not follow its person row",
                    ));
                }
                t.encounters.push(Encounter {
                    kind: parse_encounter_kind(
                        row.kind.as_deref().ok_or_else(|| missing("kind"))?,
                    )?,
                    week: row.week.ok_or_else(|| missing("week"))?,
                });
            }
            other => {
                return Err(Error::schema(
                    Some(format!("{path_hint}, record {}", i + 1)),
                    format!("unknown record type `{other}`"),
                ))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservedRow {
    record: String,
    person_id: u64,
    first_contact_week: Option<i32>,
    end_week: Option<u32>,
    end_type: Option<String>,
    outcome: Option<bool>,
    covariates: Option<String>,
    claims: Option<String>,
    kind: Option<String>,
    week: Option<i32>,
}

fn encode_covariates(rec: &ObservedRecord) -> String {
    rec.baseline_covariates
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_observed(out: &mut impl Write, records: &[ObservedRecord]) -> Result<()> {
    write_schema_tag(out, OBSERVED_SCHEMA)?;
    let mut wtr = csv::Writer::from_writer(out);
    for r in records {
        wtr.serialize(ObservedRow {
            record: "person".into(),
            person_id: r.person_id,
            first_contact_week: Some(r.first_pregnancy_contact_week),
            end_week: r.observed_end.map(|(w, _)| w),
            end_type: r.observed_end.map(|(_, t)| {
                match t {
                    EndType::LiveBirth => "live_birth",
                    EndType::Loss => "loss",
                }
                .to_string()
            }),
            outcome: r.observed_outcome,
            covariates: Some(encode_covariates(r)),
            claims: Some(encode_state_spans(&r.treatment_claims)),
            kind: None,
            week: None,
        })?;
        for e in &r.visible_encounters {
            wtr.serialize(ObservedRow {
                record: "encounter".into(),
                person_id: r.person_id,
                first_contact_week: None,
                end_week: None,
                end_type: None,
                outcome: None,
                covariates: None,
                claims: None,
                kind: Some(e.kind.as_str().into()),
                week: Some(e.week),
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_observed(input: &mut impl Read, path_hint: &str) -> Result<Vec<ObservedRecord>> {
    let mut reader = BufReader::new(input);
    let mut first_line = String::new();
    reader.read_line(&mut first_line)?;
    check_schema_tag(first_line.trim_end(), OBSERVED_SCHEMA, path_hint)?;

    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let mut out: Vec<ObservedRecord> = Vec::new();
    for (i, row) in rdr.deserialize::<ObservedRow>().enumerate() {
        let row = row.map_err(|e| {
            Error::schema(Some(format!("{path_hint}, record {}", i + 1)), e.to_string())
        })?;
        let loc = || Some(format!("{path_hint}, record {}", i + 1));
        match row.record.as_str() {
            "person" => {
                let end = match (row.end_week, row.end_type.as_deref()) {
                    (Some(w), Some("live_birth")) => Some((w, EndType::LiveBirth)),
                    (Some(w), Some("loss")) => Some((w, EndType::Loss)),
                    (None, None) => None,
                    _ => return Err(Error::schema(loc(), "inconsistent end columns")),
                };
                let mut covariates = std::collections::BTreeMap::new();
                if let Some(text) = row.covariates.as_deref() {
                    for pair in text.split(';').filter(|s| !s.is_empty()) {
                        let (k, v) = pair.split_once('=').ok_or_else(|| {
                            Error::schema(loc(), format!("bad covariate `{pair}`"))
                        })?;
                        let v: f64 = v.parse().map_err(|_| {
                            Error::schema(loc(), format!("bad covariate value `{pair}`"))
                        })?;
                        covariates.insert(k.to_string(), v);
                    }
                }
                out.push(ObservedRecord {
                    person_id: row.person_id,
                    visible_encounters: Vec::new(),
                    first_pregnancy_contact_week: row
                        .first_contact_week
                        .ok_or_else(|| Error::schema(loc(), "missing first_contact_week"))?,
                    baseline_covariates: covariates,
                    treatment_claims: decode_state_spans(row.claims.as_deref().unwrap_or(""))?,
                    observed_end: end,
                    observed_outcome: row.outcome,
                });
            }
            "encounter" => {
                let r = out.last_mut().ok_or_else(|| {
                    Error::schema(loc(), "encounter row before any person row")
                })?;
                if r.person_id != row.person_id {
                    return Err(Error::schema(
                        loc(),
                        "encounter row does not follow its person row",
                    ));
                }
                r.visible_encounters.push(Encounter {
                    kind: parse_encounter_kind(
                        row.kind
                            .as_deref()
                            .ok_or_else(|| Error::schema(loc(), "missing kind"))?,
                    )?,
                    week: row
                        .week
                        .ok_or_else(|| Error::schema(loc(), "missing week"))?,
                });
            }
            other => {
                return Err(Error::schema(loc(), format!("unknown record type `{other}`")))
            }
        }
    }
    Ok(out)
}

pub fn write_trajectories_file(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectories(&mut file, trajectories)
}

pub fn read_trajectories_file(path: &Path) -> Result<Vec<Trajectory>> {
    let mut file = std::fs::File::open(path)?;
    read_trajectories(&mut file, &path.display().to_string())
}

pub fn write_observed_file(path: &Path, records: &[ObservedRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_observed(&mut file, records)
}

pub fn read_observed_file(path: &Path) -> Result<Vec<ObservedRecord>> {
    let mut file = std::fs::File::open(path)?;
    read_observed(&mut file, &path.display().to_string())
}
