//! Trial-design engine: protocol files, time-zero anchoring schemes, and
//! construction of analysis-ready person-week cohorts with immortal-time
//! accounting.
//!
//! Five anchoring schemes are supported. `lmp_ideal` (4a) is the
//! simulation-only benchmark that enrolls every conception at LMP from
//! ground truth. `retro_end_of_pregnancy` (4b) and
//! `prospective_first_contact` (4c) deliberately reproduce the flawed
//! designs: treatment is classified from-LMP and follow-up is counted from
//! LMP, so the stretch before the first healthcare contact is immortal.
//! `first_prenatal_visit` (4d) and `preconception_visit` (4e) align
//! eligibility, assignment, and start of follow-up at a clinical
//! encounter, which removes immortal time by construction.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::observe::{EndType, ObservedRecord};
use crate::scm::{EncounterKind, Trajectory};

// ---------------------------------------------------------------------
// Protocol specification
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyRule {
    /// Keep (or start) treatment from the anchor onward.
    Continue,
    /// Be off treatment once the grace period has elapsed.
    Discontinue,
}

impl StrategyRule {
    /// Treatment state this strategy requires after the grace period.
    pub fn target_state(self) -> bool {
        matches!(self, StrategyRule::Continue)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyDef {
    pub name: String,
    pub rule: StrategyRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EligibilitySpec {
    /// Inclusive gestational-week window the anchor must fall in.
    pub window_start_week: u32,
    pub window_end_week: u32,
    /// Require a dispensing covering the week before the anchor
    /// (decision-anchored designs only).
    pub require_current_treatment: bool,
    /// Structured-data exclusions, carried as documentation; the simulated
    /// world has no counterpart codes.
    #[serde(default)]
    pub exclusions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategiesSpec {
    pub grace_period_weeks: u32,
    pub active: StrategyDef,
    pub comparator: StrategyDef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentSpec {
    pub stratify_by_prior_use: bool,
    #[serde(default)]
    pub baseline_confounders: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowupSpec {
    pub postpartum_horizon_weeks: u32,
    pub ltfu_gap_days: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSpec {
    pub name: String,
    pub competing_event: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    IttAnalog,
    PerProtocol,
}

impl Contrast {
    pub fn as_str(self) -> &'static str {
        match self {
            Contrast::IttAnalog => "itt_analog",
            Contrast::PerProtocol => "per_protocol",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    pub contrast: Contrast,
    #[serde(default)]
    pub censor_model_covariates: Vec<String>,
    pub weight_truncation_pct: f64,
    pub bootstrap_resamples: usize,
}

/// Declarative encoding of one emulation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub name: String,
    pub eligibility: EligibilitySpec,
    pub strategies: StrategiesSpec,
    pub assignment: AssignmentSpec,
    pub followup: FollowupSpec,
    pub outcome: OutcomeSpec,
    pub analysis: AnalysisSpec,
}

/// Covariate names the engine can materialize at baseline.
pub const KNOWN_COVARIATES: &[&str] = &["prepreg_user", "u_proxy", "early_treatment"];
/// Additional terms allowed in the censoring model.
pub const KNOWN_CENSOR_TERMS: &[&str] = &["prepreg_user", "u_proxy", "early_treatment", "week"];

impl ProtocolSpec {
    pub fn grace_period_weeks(&self) -> u32 {
        self.strategies.grace_period_weeks
    }

    pub fn stratify_by_prior_use(&self) -> bool {
        self.assignment.stratify_by_prior_use
    }

    pub fn ltfu_gap_weeks(&self) -> u32 {
        self.followup.ltfu_gap_days.div_ceil(7)
    }

    pub fn window(&self) -> (u32, u32) {
        (
            self.eligibility.window_start_week,
            self.eligibility.window_end_week,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::schema(None, "protocol name must be nonempty"));
        }
        if self.eligibility.window_start_week > self.eligibility.window_end_week {
            return Err(Error::schema(
                None,
                "eligibility window start must not exceed its end",
            ));
        }
        if self.strategies.active.rule != StrategyRule::Continue
            || self.strategies.comparator.rule != StrategyRule::Discontinue
        {
            return Err(Error::schema(
                None,
                "strategies must pair one `continue` (active) with one `discontinue` (comparator)",
            ));
        }
        if self.strategies.active.name == self.strategies.comparator.name {
            return Err(Error::schema(None, "strategy names must differ"));
        }
        if self.followup.ltfu_gap_days == 0 {
            return Err(Error::schema(None, "ltfu_gap_days must be positive"));
        }
        if self.outcome.competing_event != "pregnancy_loss" {
            return Err(Error::schema(
                None,
                format!(
                    "unsupported competing event `{}` (only `pregnancy_loss`)",
                    self.outcome.competing_event
                ),
            ));
        }
        if !(50.0 < self.analysis.weight_truncation_pct
            && self.analysis.weight_truncation_pct <= 100.0)
        {
            return Err(Error::schema(
                None,
                "weight_truncation_pct must lie in (50, 100]",
            ));
        }
        for c in &self.assignment.baseline_confounders {
            if !KNOWN_COVARIATES.contains(&c.as_str()) {
                return Err(Error::schema(
                    None,
                    format!("unknown baseline confounder `{c}` (known: {KNOWN_COVARIATES:?})"),
                ));
            }
        }
        for c in &self.analysis.censor_model_covariates {
            if !KNOWN_CENSOR_TERMS.contains(&c.as_str()) {
                return Err(Error::schema(
                    None,
                    format!("unknown censoring-model term `{c}` (known: {KNOWN_CENSOR_TERMS:?})"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical serialization: fixed field order and formatting, so
    /// parse-then-serialize is byte-stable.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let quote = |v: &str| format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""));
        let list = |items: &[String]| {
            let inner = items
                .iter()
                .map(|i| quote(i))
                .collect::<Vec<_>>()
                .join(", ");
            format!("[{inner}]")
        };
        let _ = writeln!(s, "name = {}", quote(&self.name));
        let _ = writeln!(s, "\n[eligibility]");
        let _ = writeln!(s, "window_start_week = {}", self.eligibility.window_start_week);
        let _ = writeln!(s, "window_end_week = {}", self.eligibility.window_end_week);
        let _ = writeln!(
            s,
            "require_current_treatment = {}",
            self.eligibility.require_current_treatment
        );
        let _ = writeln!(s, "exclusions = {}", list(&self.eligibility.exclusions));
        let _ = writeln!(s, "\n[strategies]");
        let _ = writeln!(s, "grace_period_weeks = {}", self.strategies.grace_period_weeks);
        let strategy = |d: &StrategyDef| {
            let rule = match d.rule {
                StrategyRule::Continue => "continue",
                StrategyRule::Discontinue => "discontinue",
            };
            format!("{{ name = {}, rule = {} }}", quote(&d.name), quote(rule))
        };
        let _ = writeln!(s, "active = {}", strategy(&self.strategies.active));
        let _ = writeln!(s, "comparator = {}", strategy(&self.strategies.comparator));
        let _ = writeln!(s, "\n[assignment]");
        let _ = writeln!(
            s,
            "stratify_by_prior_use = {}",
            self.assignment.stratify_by_prior_use
        );
        let _ = writeln!(
            s,
            "baseline_confounders = {}",
            list(&self.assignment.baseline_confounders)
        );
        let _ = writeln!(s, "\n[followup]");
        let _ = writeln!(
            s,
            "postpartum_horizon_weeks = {}",
            self.followup.postpartum_horizon_weeks
        );
        let _ = writeln!(s, "ltfu_gap_days = {}", self.followup.ltfu_gap_days);
        let _ = writeln!(s, "\n[outcome]");
        let _ = writeln!(s, "name = {}", quote(&self.outcome.name));
        let _ = writeln!(s, "competing_event = {}", quote(&self.outcome.competing_event));
        let _ = writeln!(s, "\n[analysis]");
        let _ = writeln!(s, "contrast = {}", quote(self.analysis.contrast.as_str()));
        let _ = writeln!(
            s,
            "censor_model_covariates = {}",
            list(&self.analysis.censor_model_covariates)
        );
        let _ = writeln!(
            s,
            "weight_truncation_pct = {:?}",
            self.analysis.weight_truncation_pct
        );
        let _ = writeln!(
            s,
            "bootstrap_resamples = {}",
            self.analysis.bootstrap_resamples
        );
        s
    }
}

/// Parse a protocol file; diagnostics carry the TOML location.
pub fn parse_protocol(text: &str) -> Result<ProtocolSpec> {
    let spec: ProtocolSpec = toml::from_str(text).map_err(|e| {
        let location = e.span().map(|span| {
            let line = text[..span.start.min(text.len())]
                .bytes()
                .filter(|&b| b == b'\n')
                .count()
                + 1;
            format!("line {line}")
        });
        Error::Schema {
            location,
            message: e.message().to_string(),
        }
    })?;
    spec.validate()?;
    Ok(spec)
}

const STOP_OR_GO_TOML: &str = include_str!("../protocols/stop_or_go.toml");
const CHAP_TOML: &str = include_str!("../protocols/chap.toml");

/// Look up one of the shipped protocols by name.
pub fn protocol_by_name(name: &str) -> Result<ProtocolSpec> {
    match name {
        "stop_or_go" => parse_protocol(STOP_OR_GO_TOML),
        "chap" => parse_protocol(CHAP_TOML),
        other => Err(Error::config(format!(
            "unknown protocol `{other}` (shipped: stop_or_go, chap)"
        ))),
    }
}

pub fn shipped_protocol_names() -> &'static [&'static str] {
    &["stop_or_go", "chap"]
}

// ---------------------------------------------------------------------
// Design specification
// ---------------------------------------------------------------------

/// Time-zero anchoring scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    LmpIdeal,
    RetroEndOfPregnancy,
    ProspectiveFirstContact,
    FirstPrenatalVisit,
    PreconceptionVisit,
}

impl AnchorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorKind::LmpIdeal => "lmp_ideal",
            AnchorKind::RetroEndOfPregnancy => "retro_end_of_pregnancy",
            AnchorKind::ProspectiveFirstContact => "prospective_first_contact",
            AnchorKind::FirstPrenatalVisit => "first_prenatal_visit",
            AnchorKind::PreconceptionVisit => "preconception_visit",
        }
    }

    pub fn short_code(self) -> &'static str {
        match self {
            AnchorKind::LmpIdeal => "4a",
            AnchorKind::RetroEndOfPregnancy => "4b",
            AnchorKind::ProspectiveFirstContact => "4c",
            AnchorKind::FirstPrenatalVisit => "4d",
            AnchorKind::PreconceptionVisit => "4e",
        }
    }
}

/// A time-zero design: anchor scheme plus the week window the anchor must
/// fall in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub anchor: AnchorKind,
    /// Inclusive gestational-week range for the anchor.
    pub eligibility_window: (i32, i32),
    /// Outcome observation required for inclusion (the retrospective
    /// end-of-pregnancy design only).
    pub require_outcome_observed: bool,
}

impl DesignSpec {
    /// Construct a design by name (`4a`..`4e` or the long anchor names).
    /// The decision-anchored design takes its window from the protocol.
    pub fn by_name(name: &str, protocol: &ProtocolSpec) -> Result<Self> {
        let anchor = match name {
            "4a" | "lmp_ideal" => AnchorKind::LmpIdeal,
            "4b" | "retro_end_of_pregnancy" => AnchorKind::RetroEndOfPregnancy,
            "4c" | "prospective_first_contact" => AnchorKind::ProspectiveFirstContact,
            "4d" | "first_prenatal_visit" => AnchorKind::FirstPrenatalVisit,
            "4e" | "preconception_visit" => AnchorKind::PreconceptionVisit,
            other => {
                return Err(Error::config(format!(
                    "unknown design `{other}` (expected 4a, 4b, 4c, 4d, or 4e)"
                )))
            }
        };
        Ok(Self::for_anchor(anchor, protocol))
    }

    pub fn for_anchor(anchor: AnchorKind, protocol: &ProtocolSpec) -> Self {
        let (lo, hi) = protocol.window();
        let eligibility_window = match anchor {
            AnchorKind::LmpIdeal => (0, 0),
            AnchorKind::RetroEndOfPregnancy | AnchorKind::ProspectiveFirstContact => (0, 64),
            AnchorKind::FirstPrenatalVisit => (lo as i32, hi as i32),
            AnchorKind::PreconceptionVisit => (-26, -1),
        };
        DesignSpec {
            anchor,
            eligibility_window,
            require_outcome_observed: anchor == AnchorKind::RetroEndOfPregnancy,
        }
    }

    fn validate_against(&self, protocol: &ProtocolSpec) -> Result<()> {
        if self.require_outcome_observed && self.anchor != AnchorKind::RetroEndOfPregnancy {
            return Err(Error::DesignProtocolMismatch(
                "require_outcome_observed applies only to the retro end-of-pregnancy anchor"
                    .into(),
            ));
        }
        if self.anchor == AnchorKind::RetroEndOfPregnancy && !self.require_outcome_observed {
            return Err(Error::DesignProtocolMismatch(
                "the retro end-of-pregnancy anchor requires outcome observation".into(),
            ));
        }
        if self.anchor == AnchorKind::FirstPrenatalVisit {
            let (lo, hi) = protocol.window();
            if self.eligibility_window != (lo as i32, hi as i32) {
                return Err(Error::DesignProtocolMismatch(format!(
                    "design window {:?} disagrees with protocol window ({lo}, {hi})",
                    self.eligibility_window
                )));
            }
        }
        if self.eligibility_window.0 > self.eligibility_window.1 {
            return Err(Error::DesignProtocolMismatch(
                "eligibility window start exceeds its end".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Analytic cohort
// ---------------------------------------------------------------------

/// Why a person's follow-up ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    /// Outcome occurred at the terminal week.
    Event,
    /// Pregnancy loss (the competing event) occurred.
    CompetingEvent,
    /// Administrative end or loss to follow-up, no event.
    Censored,
}

/// One enrolled person, ready for estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortPerson {
    pub person_id: u64,
    /// Gestational week of time zero.
    pub t0_week: i32,
    /// 1 = active (continue/initiate) strategy state at the anchor, 0 = comparator.
    pub arm: u8,
    /// Baseline covariates measurable by t0.
    pub baseline: BTreeMap<String, f64>,
    /// Realized treatment state per week since t0 (index 0 = anchor week).
    pub weekly_treatment: Vec<bool>,
    /// Terminal week since t0.
    pub follow_weeks: u32,
    pub terminal: TerminalKind,
    pub immortal_weeks: u32,
}

/// One person-week row of the long-format cohort.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortRow {
    pub person_id: u64,
    pub week_since_t0: u32,
    pub gest_week: i32,
    pub arm: u8,
    pub on_treatment: bool,
    pub at_risk: bool,
    pub event: bool,
    pub competing_event: bool,
    pub censored: bool,
}

/// Analysis-ready cohort for one design/protocol pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticCohort {
    pub anchor: AnchorKind,
    pub strategy_names: [String; 2],
    pub grace_period_weeks: u32,
    pub persons: Vec<CohortPerson>,
    /// Count of observed records examined but not enrolled.
    pub excluded: usize,
}

impl AnalyticCohort {
    /// Materialize the person-week long format. Terminal flags appear only
    /// on each person's final row.
    pub fn rows(&self) -> Vec<CohortRow> {
        let mut rows = Vec::with_capacity(
            self.persons.iter().map(|p| p.follow_weeks as usize + 1).sum(),
        );
        for p in &self.persons {
            for w in 0..=p.follow_weeks {
                let terminal = w == p.follow_weeks;
                rows.push(CohortRow {
                    person_id: p.person_id,
                    week_since_t0: w,
                    gest_week: p.t0_week + w as i32,
                    arm: p.arm,
                    on_treatment: p.weekly_treatment[w as usize],
                    at_risk: true,
                    event: terminal && p.terminal == TerminalKind::Event,
                    competing_event: terminal && p.terminal == TerminalKind::CompetingEvent,
                    censored: terminal && p.terminal == TerminalKind::Censored,
                });
            }
        }
        rows
    }

    pub fn total_immortal_weeks(&self) -> u64 {
        self.persons.iter().map(|p| p.immortal_weeks as u64).sum()
    }

    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "# schema: {}", crate::tabular::COHORT_SCHEMA)?;
        let mut wtr = csv::Writer::from_writer(out);
        for row in self.rows() {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Per-person and total immortal person-weeks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImmortalAccounting {
    pub per_person: Vec<(u64, u32)>,
    pub total: u64,
}

pub fn immortal_time(cohort: &AnalyticCohort) -> ImmortalAccounting {
    ImmortalAccounting {
        per_person: cohort
            .persons
            .iter()
            .map(|p| (p.person_id, p.immortal_weeks))
            .collect(),
        total: cohort.total_immortal_weeks(),
    }
}

// ---------------------------------------------------------------------
// Cohort construction
// ---------------------------------------------------------------------

/// Build the analysis-ready cohort for one design under one protocol.
/// Ground-truth trajectories are required only by the `lmp_ideal` anchor.
pub fn build_cohort(
    records: &[ObservedRecord],
    design: &DesignSpec,
    protocol: &ProtocolSpec,
    truth: Option<&[Trajectory]>,
) -> Result<AnalyticCohort> {
    protocol.validate()?;
    design.validate_against(protocol)?;

    let strategy_names = [
        protocol.strategies.comparator.name.clone(),
        protocol.strategies.active.name.clone(),
    ];

    if design.anchor == AnchorKind::LmpIdeal {
        let truth = truth.ok_or_else(|| Error::MissingTruth("lmp_ideal (4a)".into()))?;
        let persons = truth.iter().map(person_from_truth).collect();
        return Ok(AnalyticCohort {
            anchor: design.anchor,
            strategy_names,
            grace_period_weeks: protocol.grace_period_weeks(),
            persons,
            excluded: 0,
        });
    }

    let mut persons = Vec::with_capacity(records.len());
    let mut excluded = 0usize;
    for rec in records {
        match enroll(rec, design, protocol)? {
            Some(p) => persons.push(p),
            None => excluded += 1,
        }
    }
    Ok(AnalyticCohort {
        anchor: design.anchor,
        strategy_names,
        grace_period_weeks: protocol.grace_period_weeks(),
        persons,
        excluded,
    })
}

/// Ideal-design person: every conception enrolled at LMP with ground-truth
/// early treatment as the assigned strategy.
fn person_from_truth(t: &Trajectory) -> CohortPerson {
    let terminal_week = t.end_week;
    let terminal = match (t.s_event, t.y) {
        (Some(_), _) => TerminalKind::CompetingEvent,
        (None, Some(true)) => TerminalKind::Event,
        _ => TerminalKind::Censored,
    };
    let mut baseline = BTreeMap::new();
    baseline.insert("prepreg_user".into(), t.prepreg_user as u8 as f64);
    baseline.insert("u_proxy".into(), t.u_proxy);
    CohortPerson {
        person_id: t.person_id,
        t0_week: 0,
        arm: t.a0 as u8,
        baseline,
        weekly_treatment: (0..=terminal_week).map(|w| t.treatment_state(w as i32)).collect(),
        follow_weeks: terminal_week,
        terminal,
        immortal_weeks: 0,
    }
}

fn enroll(
    rec: &ObservedRecord,
    design: &DesignSpec,
    protocol: &ProtocolSpec,
) -> Result<Option<CohortPerson>> {
    let (end_week, end_type) = rec
        .observed_end
        .expect("observed records carry an observed end");
    let first_related = rec.first_pregnancy_related_week();

    // Anchor and immortal accounting per design.
    let (t0, immortal_weeks): (i32, u32) = match design.anchor {
        AnchorKind::LmpIdeal => unreachable!("handled by build_cohort"),
        AnchorKind::RetroEndOfPregnancy => {
            if end_type != EndType::LiveBirth || rec.observed_outcome.is_none() {
                return Ok(None);
            }
            let gap = first_related.clamp(0, end_week as i32) as u32;
            (0, gap)
        }
        AnchorKind::ProspectiveFirstContact => {
            let gap = first_related.clamp(0, end_week as i32) as u32;
            (0, gap)
        }
        AnchorKind::FirstPrenatalVisit => {
            let first_visit = match rec.first_prenatal_visit_week() {
                Some(w) => w,
                None => return Ok(None),
            };
            let (lo, hi) = design.eligibility_window;
            if first_visit < lo || first_visit > hi {
                return Ok(None);
            }
            if protocol.eligibility.require_current_treatment
                && !rec.treatment_state(first_visit - 1)
            {
                return Ok(None);
            }
            (first_visit, 0)
        }
        AnchorKind::PreconceptionVisit => {
            let visit = rec
                .visible_encounters
                .iter()
                .find(|e| e.kind == EncounterKind::PreconceptionCounseling)
                .map(|e| e.week);
            let visit = match visit {
                Some(w) => w,
                None => return Ok(None),
            };
            let (lo, hi) = design.eligibility_window;
            if visit < lo || visit > hi {
                return Ok(None);
            }
            (visit, 0)
        }
    };

    if end_week as i32 <= t0 && design.anchor == AnchorKind::FirstPrenatalVisit {
        // Visits happen strictly before the pregnancy ends; defensive.
        return Ok(None);
    }

    // Assignment: state at/after the anchor week. For the from-LMP
    // designs this is the early-pregnancy exposure; for the prenatal
    // anchor it is the decision taken at the visit. A preconception
    // anchor precedes any pregnancy dispensing, so the decision made
    // there shows up in the claim covering gestational week 0.
    let arm = rec.treatment_state(t0.max(0)) as u8;

    // Baseline covariates measurable by t0.
    let mut baseline = BTreeMap::new();
    for (name, value) in &rec.baseline_covariates {
        baseline.insert(name.clone(), *value);
    }
    if design.anchor == AnchorKind::FirstPrenatalVisit {
        baseline.insert(
            "early_treatment".into(),
            rec.treatment_state(t0 - 1) as u8 as f64,
        );
    }

    // Terminal state before loss-to-follow-up.
    let event_week = end_week as i32;
    let (mut terminal_week, mut terminal) = match end_type {
        EndType::Loss => (event_week, TerminalKind::CompetingEvent),
        EndType::LiveBirth => match rec.observed_outcome {
            Some(true) => (event_week, TerminalKind::Event),
            _ => (event_week, TerminalKind::Censored),
        },
    };

    // Loss to follow-up: a gap between successive visible contacts longer
    // than the configured allowance censors at the end of the allowance.
    // The clock starts at the first contact at or after t0.
    if design.anchor != AnchorKind::RetroEndOfPregnancy {
        let gap = protocol.ltfu_gap_weeks() as i32;
        let mut last_contact: Option<i32> = None;
        for e in &rec.visible_encounters {
            if e.week < t0 {
                continue;
            }
            if let Some(prev) = last_contact {
                if e.week - prev > gap && prev + gap < terminal_week {
                    terminal_week = prev + gap;
                    terminal = TerminalKind::Censored;
                    break;
                }
            }
            last_contact = Some(e.week);
            if e.week >= terminal_week {
                break;
            }
        }
    }

    let follow_weeks = (terminal_week - t0).max(0) as u32;
    let weekly_treatment = (0..=follow_weeks)
        .map(|w| rec.treatment_state(t0 + w as i32))
        .collect();

    Ok(Some(CohortPerson {
        person_id: rec.person_id,
        t0_week: t0,
        arm,
        baseline,
        weekly_treatment,
        follow_weeks,
        terminal,
        immortal_weeks,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observe::observed_cohort;
    use crate::params::WorldParams;
    use crate::scm::simulate_cohort;

    #[test]
    fn shipped_protocols_match_their_tables() {
        let sog = protocol_by_name("stop_or_go").unwrap();
        assert_eq!(sog.window(), (5, 15));
        assert!(sog.eligibility.require_current_treatment);
        assert_eq!(sog.strategies.active.name, "GO");
        assert_eq!(sog.strategies.active.rule, StrategyRule::Continue);
        assert_eq!(sog.strategies.comparator.name, "STOP");
        assert_eq!(sog.strategies.comparator.rule, StrategyRule::Discontinue);
        assert_eq!(sog.grace_period_weeks(), 4);
        assert_eq!(sog.outcome.competing_event, "pregnancy_loss");
        assert_eq!(sog.followup.ltfu_gap_days, 60);
        assert!(!sog.stratify_by_prior_use());

        let chap = protocol_by_name("chap").unwrap();
        assert_eq!(chap.window(), (14, 22));
        assert!(chap.stratify_by_prior_use());
        assert!(!chap.eligibility.require_current_treatment);
        assert_eq!(chap.followup.postpartum_horizon_weeks, 6);
    }

    #[test]
    fn empty_strategies_block_is_a_parse_error() {
        let text = protocol_by_name("stop_or_go").unwrap().canonical_string();
        let gutted = text
            .lines()
            .filter(|l| !l.starts_with("active") && !l.starts_with("comparator"))
            .collect::<Vec<_>>()
            .join("\n");
        let err = parse_protocol(&gutted).unwrap_err();
        assert!(err.to_string().contains("active") || err.to_string().contains("missing"), "{err}");
    }

    #[test]
    fn protocol_canonical_form_is_a_fixed_point() {
        for name in ["stop_or_go", "chap"] {
            let p = protocol_by_name(name).unwrap();
            let canon = p.canonical_string();
            let reparsed = parse_protocol(&canon).unwrap();
            assert_eq!(p, reparsed);
            assert_eq!(canon, reparsed.canonical_string());
        }
    }

    fn fig3b_world(n: usize) -> (WorldParams, Vec<crate::scm::Trajectory>, Vec<ObservedRecord>) {
        let mut p = WorldParams::fig3b();
        p.n_persons = n;
        let cohort = simulate_cohort(&p).unwrap();
        let observed = observed_cohort(&cohort, &p.encounters);
        (p, cohort, observed)
    }

    #[test]
    fn lmp_ideal_requires_truth_and_anchors_at_zero() {
        let (_, truth, observed) = fig3b_world(2_000);
        let protocol = protocol_by_name("stop_or_go").unwrap();
        let design = DesignSpec::for_anchor(AnchorKind::LmpIdeal, &protocol);
        assert!(matches!(
            build_cohort(&observed, &design, &protocol, None),
            Err(Error::MissingTruth(_))
        ));
        let cohort = build_cohort(&observed, &design, &protocol, Some(&truth)).unwrap();
        assert_eq!(cohort.persons.len(), truth.len());
        assert!(cohort.persons.iter().all(|p| p.t0_week == 0));
        assert_eq!(cohort.total_immortal_weeks(), 0);
    }

    #[test]
    fn retro_design_includes_only_observed_live_births() {
        let (_, _, observed) = fig3b_world(4_000);
        let protocol = protocol_by_name("stop_or_go").unwrap();
        let design = DesignSpec::for_anchor(AnchorKind::RetroEndOfPregnancy, &protocol);
        let cohort = build_cohort(&observed, &design, &protocol, None).unwrap();
        assert!(!cohort.persons.is_empty());
        // Survivorship invariant: nobody in the cohort is lost, ever.
        assert!(cohort
            .persons
            .iter()
            .all(|p| p.terminal != TerminalKind::CompetingEvent));
        // Everyone included has an observed end by construction.
        assert!(cohort.persons.len() < observed.len());
    }

    #[test]
    fn first_visit_outside_window_is_excluded() {
        let (_, _, observed) = fig3b_world(4_000);
        let protocol = protocol_by_name("chap").unwrap();
        let design = DesignSpec::for_anchor(AnchorKind::FirstPrenatalVisit, &protocol);
        let cohort = build_cohort(&observed, &design, &protocol, None).unwrap();
        for p in &cohort.persons {
            assert!((14..=22).contains(&p.t0_week), "t0={}", p.t0_week);
        }
        // Window is literal: persons whose *first* visit was week 23, or
        // earlier than 14, are out.
        let ids: std::collections::BTreeSet<u64> =
            cohort.persons.iter().map(|p| p.person_id).collect();
        for rec in &observed {
            if let Some(w) = rec.first_prenatal_visit_week() {
                if !(14..=22).contains(&w) {
                    assert!(!ids.contains(&rec.person_id));
                }
            }
        }
    }

    #[test]
    fn design_protocol_window_mismatch_is_an_error() {
        let protocol = protocol_by_name("chap").unwrap();
        let mut design = DesignSpec::for_anchor(AnchorKind::FirstPrenatalVisit, &protocol);
        design.eligibility_window = (5, 15);
        let err = build_cohort(&[], &design, &protocol, None).unwrap_err();
        assert!(matches!(err, Error::DesignProtocolMismatch(_)));
    }

    #[test]
    fn decision_anchors_have_zero_immortal_time() {
        let (_, _, observed) = fig3b_world(6_000);
        let protocol = protocol_by_name("stop_or_go").unwrap();
        for anchor in [AnchorKind::FirstPrenatalVisit, AnchorKind::PreconceptionVisit] {
            let design = DesignSpec::for_anchor(anchor, &protocol);
            let cohort = build_cohort(&observed, &design, &protocol, None).unwrap();
            assert!(!cohort.persons.is_empty(), "{anchor:?} enrolled nobody");
            assert_eq!(cohort.total_immortal_weeks(), 0, "{anchor:?}");
            assert!(cohort.persons.iter().all(|p| p.follow_weeks >= 1));
        }
    }

    #[test]
    fn prospective_design_counts_lmp_to_first_contact() {
        let (_, _, observed) = fig3b_world(6_000);
        let protocol = protocol_by_name("stop_or_go").unwrap();
        let design = DesignSpec::for_anchor(AnchorKind::ProspectiveFirstContact, &protocol);
        let cohort = build_cohort(&observed, &design, &protocol, None).unwrap();
        // Independent recount straight from the raw encounter weeks.
        let by_id: BTreeMap<u64, &ObservedRecord> =
            observed.iter().map(|r| (r.person_id, r)).collect();
        let mut recount: u64 = 0;
        for p in &cohort.persons {
            let rec = by_id[&p.person_id];
            let first = rec
                .visible_encounters
                .iter()
                .filter(|e| e.kind.is_pregnancy_related())
                .map(|e| e.week)
                .min()
                .unwrap();
            assert_eq!(p.immortal_weeks as i32, first.max(0));
            recount += first.max(0) as u64;
        }
        assert_eq!(cohort.total_immortal_weeks(), recount);
        assert!(cohort.total_immortal_weeks() > 0);
    }

    #[test]
    fn preconception_anchor_requires_the_visit() {
        let (_, _, observed) = fig3b_world(6_000);
        let protocol = protocol_by_name("stop_or_go").unwrap();
        let design = DesignSpec::for_anchor(AnchorKind::PreconceptionVisit, &protocol);
        let cohort = build_cohort(&observed, &design, &protocol, None).unwrap();
        let with_visit = observed
            .iter()
            .filter(|r| {
                r.visible_encounters
                    .iter()
                    .any(|e| e.kind == EncounterKind::PreconceptionCounseling)
            })
            .count();
        assert_eq!(cohort.persons.len(), with_visit);
        assert_eq!(cohort.persons.len() + cohort.excluded, observed.len());
        assert!(cohort.persons.iter().all(|p| p.t0_week < 0));
    }

    #[test]
    fn eligibility_ignores_post_anchor_information() {
        let (_, _, observed) = fig3b_world(5_000);
        let protocol = protocol_by_name("stop_or_go").unwrap();
        let design = DesignSpec::for_anchor(AnchorKind::FirstPrenatalVisit, &protocol);
        let base = build_cohort(&observed, &design, &protocol, None).unwrap();

        // Mutate everything strictly after each person's anchor: flip all
        // later claims. Inclusion and arms must not move.
        let mut mutated = observed.clone();
        for rec in mutated.iter_mut() {
            if let Some(anchor) = rec.first_prenatal_visit_week() {
                for (w, on) in rec.treatment_claims.iter_mut() {
                    if *w > anchor {
                        *on = !*on;
                    }
                }
            }
        }
        let changed = build_cohort(&mutated, &design, &protocol, None).unwrap();
        let ids = |c: &AnalyticCohort| -> Vec<(u64, u8)> {
            c.persons.iter().map(|p| (p.person_id, p.arm)).collect()
        };
        assert_eq!(ids(&base), ids(&changed));
    }

    #[test]
    fn ltfu_gap_censors_sparse_contact() {
        // One synthetic record with a contact desert after the anchor.
        use crate::scm::Encounter;
        let rec = ObservedRecord {
            person_id: 1,
            visible_encounters: vec![
                Encounter { kind: EncounterKind::PregnancyTest, week: 5 },
                Encounter { kind: EncounterKind::PrenatalVisit, week: 6 },
                Encounter { kind: EncounterKind::DeliveryOrEnd, week: 39 },
            ],
            first_pregnancy_contact_week: 5,
            baseline_covariates: BTreeMap::new(),
            treatment_claims: (-26..=39).map(|w| (w, true)).collect(),
            observed_end: Some((39, EndType::LiveBirth)),
            observed_outcome: Some(true),
        };
        let protocol = protocol_by_name("stop_or_go").unwrap();
        let design = DesignSpec::for_anchor(AnchorKind::FirstPrenatalVisit, &protocol);
        let cohort = build_cohort(&[rec], &design, &protocol, None).unwrap();
        let p = &cohort.persons[0];
        // 60 days ~ 9 weeks: censored at week 6 + 9 = 15, i.e. 9 weeks in.
        assert_eq!(p.terminal, TerminalKind::Censored);
        assert_eq!(p.t0_week, 6);
        assert_eq!(p.follow_weeks, 9);
    }

    #[test]
    fn rows_have_exclusive_terminal_flags() {
        let (_, truth, observed) = fig3b_world(1_500);
        let protocol = protocol_by_name("stop_or_go").unwrap();
        for name in ["4a", "4b", "4c", "4d", "4e"] {
            let design = DesignSpec::by_name(name, &protocol).unwrap();
            let truth_opt =
                (design.anchor == AnchorKind::LmpIdeal).then_some(truth.as_slice());
            let cohort = build_cohort(&observed, &design, &protocol, truth_opt).unwrap();
            for row in cohort.rows() {
                let flags = row.event as u8 + row.competing_event as u8 + row.censored as u8;
                assert!(flags <= 1);
            }
            for p in &cohort.persons {
                assert_eq!(p.weekly_treatment.len() as u32, p.follow_weeks + 1);
            }
        }
    }
}
