//! World parameterization: one `WorldParams` value fully determines a
//! simulated world (structural coefficients, cohort size, seed, encounter
//! process, pre-pregnancy treatment dynamics).
//!
//! Coefficients are on the log-odds scale and attach to the arrows of the
//! data-generating graphs; `scenario` selects which arrows are allowed to
//! be nonzero. Named presets pin the defaults used throughout the test
//! suite; the full table is reproduced in the README.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Data-generating scenario selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Early treatment randomized; no early-treatment -> loss arrow.
    Fig3a,
    /// Early treatment randomized but affects pregnancy loss.
    Fig3b,
    /// Unmeasured common cause drives both treatments, loss, and outcome.
    Fig3c,
    /// Pre-pregnancy treatment dynamics with depletion of susceptibles.
    PrevalentUser,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Fig3a => "fig3a",
            Scenario::Fig3b => "fig3b",
            Scenario::Fig3c => "fig3c",
            Scenario::PrevalentUser => "prevalent_user",
        }
    }
}

/// Pre-pregnancy treatment dynamics (initiation, adverse events,
/// discontinuation) over a lookback window before LMP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrePregnancyParams {
    /// Probability of having the chronic condition that the treatment targets.
    pub p_chronic_condition: f64,
    /// Probability of being susceptible to the treatment's adverse effect.
    pub p_susceptible: f64,
    /// Per-month probability that an untreated person with the condition initiates.
    pub p_initiate_per_month: f64,
    /// Probability a susceptible initiator experiences the adverse event.
    pub p_adverse_event_on_initiation: f64,
    /// Probability an adverse event leads to discontinuation before LMP.
    pub p_discontinue_given_adverse: f64,
    /// Months simulated before LMP.
    pub months_lookback: u32,
}

impl Default for PrePregnancyParams {
    fn default() -> Self {
        PrePregnancyParams {
            p_chronic_condition: 1.0,
            p_susceptible: 0.30,
            p_initiate_per_month: 0.05,
            p_adverse_event_on_initiation: 0.60,
            p_discontinue_given_adverse: 0.80,
            months_lookback: 24,
        }
    }
}

/// Healthcare-encounter process: preconception visits, pregnancy
/// recognition, prenatal-care timing, and what the claims stream can see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncounterParams {
    /// Probability of a preconception counseling visit before LMP.
    pub p_preconception_visit: f64,
    /// Unnormalized weights for the recognition week over gestational weeks 4..=20.
    pub recognition_week_weights: Vec<f64>,
    /// Probability the first prenatal visit happens after gestational week 12.
    pub p_late_prenatal_after_week12: f64,
    /// Probability of no prenatal care at all (care invisible to the database).
    pub p_no_prenatal_care: f64,
    /// Weeks between successive prenatal visits once care starts.
    pub visit_interval_weeks: u32,
    /// Dispensing claims this many weeks before first contact remain visible.
    pub claims_lookback_weeks: u32,
    /// Correlation between the measured baseline proxy and the latent U.
    pub u_proxy_correlation: f64,
}

pub const RECOGNITION_WEEK_MIN: i32 = 4;
pub const RECOGNITION_WEEK_MAX: i32 = 20;

impl Default for EncounterParams {
    fn default() -> Self {
        EncounterParams {
            p_preconception_visit: 0.25,
            // Weeks 4..=20, peaked early with a thin late tail.
            recognition_week_weights: vec![
                10.0, 22.0, 25.0, 15.0, 10.0, 5.0, 4.0, 3.0, 2.0, 1.5, 1.0, 0.8, 0.6, 0.5, 0.4,
                0.4, 0.8,
            ],
            p_late_prenatal_after_week12: 0.15,
            p_no_prenatal_care: 0.11,
            visit_interval_weeks: 4,
            claims_lookback_weeks: 26,
            u_proxy_correlation: 0.0,
        }
    }
}

/// Full specification of a simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    pub scenario: Scenario,
    pub n_persons: usize,
    pub seed: u64,

    // Arrow strengths, log-odds scale.
    pub coef_u_on_y: f64,
    pub coef_u_on_s: f64,
    pub coef_u_on_a0: f64,
    pub coef_u_on_a1: f64,
    pub coef_a0_on_a1: f64,
    pub coef_a0_on_y: f64,
    pub coef_a1_on_y: f64,
    pub coef_a0_on_s: f64,
    /// Prior-use main effect on early treatment (prevalent-user scenario).
    pub coef_prepreg_on_a0: f64,
    /// Extra outcome log-odds for susceptible persons on late treatment.
    pub coef_susceptible_treated_on_y: f64,

    /// Weekly loss probability at the logistic intercept.
    pub baseline_loss_hazard: f64,
    /// End-of-pregnancy outcome probability at the logistic intercept.
    pub baseline_outcome_risk: f64,
    /// P(early treatment) at the intercept.
    pub baseline_a0_prob: f64,
    /// P(late treatment chosen at the decision point) at the intercept.
    pub baseline_a1_prob: f64,

    /// Last gestational week (inclusive) at which a loss can occur.
    pub loss_window_end_week: u32,
    /// Decision week for persons with no prenatal care.
    pub default_decision_week: u32,
    /// Gestational week whose realized treatment state enters the outcome model.
    pub late_effect_week: u32,
    /// Term delivery drawn uniformly from this inclusive week range.
    pub term_week_min: u32,
    pub term_week_max: u32,

    /// Weekly probability that the realized post-decision state flips once.
    pub treatment_switch_hazard: f64,
    /// Early-treatment log-odds shift on the switch hazard.
    pub coef_a0_on_switch: f64,

    pub prepreg: PrePregnancyParams,
    pub encounters: EncounterParams,
}

impl WorldParams {
    /// Null world: every arrow zero, no losses. Useful as a bias baseline.
    pub fn null_world() -> Self {
        WorldParams {
            scenario: Scenario::Fig3a,
            n_persons: 10_000,
            seed: 42,
            coef_u_on_y: 0.0,
            coef_u_on_s: 0.0,
            coef_u_on_a0: 0.0,
            coef_u_on_a1: 0.0,
            coef_a0_on_a1: 0.0,
            coef_a0_on_y: 0.0,
            coef_a1_on_y: 0.0,
            coef_a0_on_s: 0.0,
            coef_prepreg_on_a0: 0.0,
            coef_susceptible_treated_on_y: 0.0,
            baseline_loss_hazard: 0.0,
            baseline_outcome_risk: 0.10,
            baseline_a0_prob: 0.40,
            baseline_a1_prob: 0.30,
            loss_window_end_week: 24,
            default_decision_week: 12,
            late_effect_week: 28,
            term_week_min: 37,
            term_week_max: 41,
            treatment_switch_hazard: 0.0,
            coef_a0_on_switch: 0.0,
            prepreg: PrePregnancyParams {
                p_susceptible: 0.0,
                ..PrePregnancyParams::default()
            },
            encounters: EncounterParams::default(),
        }
    }

    /// Early treatment randomized, loss independent of treatment.
    pub fn fig3a() -> Self {
        WorldParams {
            scenario: Scenario::Fig3a,
            n_persons: 20_000,
            coef_u_on_y: 1.1,
            coef_u_on_s: 0.9,
            coef_a0_on_a1: 2.0,
            coef_a0_on_y: 0.15,
            coef_a1_on_y: 0.8,
            baseline_loss_hazard: 0.012,
            baseline_a0_prob: 0.40,
            baseline_a1_prob: 0.25,
            treatment_switch_hazard: 0.015,
            coef_a0_on_switch: 0.7,
            ..WorldParams::null_world()
        }
    }

    /// As `fig3a` plus an early-treatment effect on pregnancy loss.
    pub fn fig3b() -> Self {
        WorldParams {
            scenario: Scenario::Fig3b,
            coef_a0_on_s: 1.0,
            coef_u_on_s: 1.1,
            baseline_loss_hazard: 0.015,
            ..WorldParams::fig3a()
        }
    }

    /// As `fig3b` plus unmeasured confounding of both treatments.
    pub fn fig3c() -> Self {
        WorldParams {
            scenario: Scenario::Fig3c,
            coef_u_on_a0: 0.8,
            coef_u_on_a1: 0.5,
            ..WorldParams::fig3b()
        }
    }

    /// Pre-pregnancy prevalent-user dynamics with depletion of susceptibles.
    pub fn prevalent_user() -> Self {
        WorldParams {
            scenario: Scenario::PrevalentUser,
            n_persons: 50_000,
            coef_u_on_y: 0.8,
            coef_u_on_s: 0.5,
            coef_u_on_a0: 0.0,
            coef_u_on_a1: 0.0,
            coef_a0_on_a1: 2.2,
            coef_a0_on_y: 0.2,
            coef_a1_on_y: 0.6,
            coef_a0_on_s: 0.0,
            coef_prepreg_on_a0: 3.727,
            coef_susceptible_treated_on_y: 2.0,
            baseline_loss_hazard: 0.008,
            baseline_outcome_risk: 0.08,
            baseline_a0_prob: 0.12,
            baseline_a1_prob: 0.20,
            prepreg: PrePregnancyParams::default(),
            ..WorldParams::null_world()
        }
    }

    /// Look up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "null" => Ok(Self::null_world()),
            "fig3a" => Ok(Self::fig3a()),
            "fig3b" => Ok(Self::fig3b()),
            "fig3c" => Ok(Self::fig3c()),
            "prevalent_user" => Ok(Self::prevalent_user()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected null, fig3a, fig3b, fig3c, prevalent_user)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs: [(&str, f64); 11] = [
            ("baseline_loss_hazard", self.baseline_loss_hazard),
            ("baseline_outcome_risk", self.baseline_outcome_risk),
            ("baseline_a0_prob", self.baseline_a0_prob),
            ("baseline_a1_prob", self.baseline_a1_prob),
            ("treatment_switch_hazard", self.treatment_switch_hazard),
            ("prepreg.p_chronic_condition", self.prepreg.p_chronic_condition),
            ("prepreg.p_susceptible", self.prepreg.p_susceptible),
            ("prepreg.p_initiate_per_month", self.prepreg.p_initiate_per_month),
            (
                "prepreg.p_adverse_event_on_initiation",
                self.prepreg.p_adverse_event_on_initiation,
            ),
            (
                "prepreg.p_discontinue_given_adverse",
                self.prepreg.p_discontinue_given_adverse,
            ),
            ("encounters.p_preconception_visit", self.encounters.p_preconception_visit),
        ];
        for (field, p) in probs {
            check_probability(field, p)?;
        }
        check_probability(
            "encounters.p_late_prenatal_after_week12",
            self.encounters.p_late_prenatal_after_week12,
        )?;
        check_probability("encounters.p_no_prenatal_care", self.encounters.p_no_prenatal_care)?;
        if self.encounters.p_late_prenatal_after_week12 + self.encounters.p_no_prenatal_care > 1.0
        {
            return Err(Error::invalid_parameter(
                "encounters",
                "p_late_prenatal_after_week12 + p_no_prenatal_care must be <= 1",
            ));
        }
        let expected =
            (RECOGNITION_WEEK_MAX - RECOGNITION_WEEK_MIN + 1) as usize;
        if self.encounters.recognition_week_weights.len() != expected {
            return Err(Error::invalid_parameter(
                "encounters.recognition_week_weights",
                format!("must have {expected} entries (weeks 4..=20)"),
            ));
        }
        let wsum: f64 = self.encounters.recognition_week_weights.iter().sum();
        if !(wsum > 0.0) || self.encounters.recognition_week_weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid_parameter(
                "encounters.recognition_week_weights",
                "weights must be nonnegative with positive sum",
            ));
        }
        if self.encounters.visit_interval_weeks == 0 {
            return Err(Error::invalid_parameter(
                "encounters.visit_interval_weeks",
                "must be >= 1",
            ));
        }
        if !(-1.0..=1.0).contains(&self.encounters.u_proxy_correlation) {
            return Err(Error::invalid_parameter(
                "encounters.u_proxy_correlation",
                "must lie in [-1, 1]",
            ));
        }
        if self.prepreg.months_lookback < 1 {
            return Err(Error::invalid_parameter("prepreg.months_lookback", "must be >= 1"));
        }
        if self.term_week_min > self.term_week_max {
            return Err(Error::invalid_parameter(
                "term_week_min",
                "must be <= term_week_max",
            ));
        }
        if self.loss_window_end_week >= self.term_week_min {
            return Err(Error::invalid_parameter(
                "loss_window_end_week",
                "must end before the term window starts",
            ));
        }
        if self.late_effect_week >= self.term_week_min
            || self.late_effect_week <= self.loss_window_end_week
        {
            return Err(Error::invalid_parameter(
                "late_effect_week",
                "must fall after the loss window and before the term window",
            ));
        }
        if self.default_decision_week < RECOGNITION_WEEK_MIN as u32 {
            return Err(Error::invalid_parameter(
                "default_decision_week",
                "must be at or after the earliest recognition week",
            ));
        }
        // Scenario constraints: which arrows may be nonzero.
        match self.scenario {
            Scenario::Fig3a => {
                for (field, v) in [
                    ("coef_u_on_a0", self.coef_u_on_a0),
                    ("coef_u_on_a1", self.coef_u_on_a1),
                    ("coef_a0_on_s", self.coef_a0_on_s),
                ] {
                    if v != 0.0 {
                        return Err(Error::invalid_parameter(
                            field,
                            "must be 0 in scenario fig3a (early treatment randomized, no A0->S arrow)",
                        ));
                    }
                }
            }
            Scenario::Fig3b => {
                for (field, v) in [
                    ("coef_u_on_a0", self.coef_u_on_a0),
                    ("coef_u_on_a1", self.coef_u_on_a1),
                ] {
                    if v != 0.0 {
                        return Err(Error::invalid_parameter(
                            field,
                            "must be 0 in scenario fig3b (early treatment randomized)",
                        ));
                    }
                }
            }
            Scenario::Fig3c | Scenario::PrevalentUser => {}
        }
        Ok(())
    }

    /// Canonical TOML rendering; basis for the params digest.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("WorldParams always serializes")
    }

    /// Parse a world configuration file: either a full parameter set or a
    /// `preset = "name"` line plus overrides, which are deep-merged onto
    /// the preset.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text)
            .map_err(|e| Error::config(format!("invalid TOML: {e}")))?;
        let table = match value {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config("top level must be a table")),
        };
        let params = if let Some(preset_name) = table.get("preset") {
            let name = preset_name
                .as_str()
                .ok_or_else(|| Error::config("`preset` must be a string"))?;
            let base = Self::preset(name)?;
            let mut base_value: toml::Value =
                toml::Value::try_from(&base).expect("preset serializes");
            let mut overrides = table;
            overrides.remove("preset");
            merge_toml(&mut base_value, toml::Value::Table(overrides));
            base_value
                .try_into()
                .map_err(|e| Error::config(format!("invalid override: {e}")))?
        } else {
            toml::Value::Table(table)
                .try_into()
                .map_err(|e| Error::config(format!("invalid world config: {e}")))?
        };
        let params: WorldParams = params;
        params.validate()?;
        Ok(params)
    }

    pub fn from_config_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text).map_err(|e| match e {
            Error::Config { location: None, message } => Error::Config {
                location: Some(path.display().to_string()),
                message,
            },
            other => other,
        })
    }
}

fn check_probability(field: &str, p: f64) -> Result<()> {
    if p.is_finite() && (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid_parameter(field, format!("{p} is not a probability in [0,1]")))
    }
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Numerically safe logistic helpers shared by the structural equations.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logistic response at `logit(baseline) + shift`, preserving the exact
/// endpoints: a baseline of 0 or 1 is absorbing no matter the shift.
pub fn shifted_probability(baseline: f64, shift: f64) -> f64 {
    if baseline <= 0.0 {
        0.0
    } else if baseline >= 1.0 {
        1.0
    } else {
        expit(logit(baseline) + shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["null", "fig3a", "fig3b", "fig3c", "prevalent_user"] {
            WorldParams::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn scenario_constraints_enforced() {
        let mut p = WorldParams::fig3a();
        p.coef_a0_on_s = 0.5;
        assert!(matches!(p.validate(), Err(Error::InvalidParameter { .. })));
        let mut p = WorldParams::fig3b();
        p.coef_u_on_a0 = 0.2;
        assert!(p.validate().is_err());
    }

    #[test]
    fn config_preset_with_overrides() {
        let text = "preset = \"fig3b\"\nn_persons = 123\nseed = 9\n[encounters]\np_no_prenatal_care = 0.2\n";
        let p = WorldParams::from_config_str(text).unwrap();
        assert_eq!(p.n_persons, 123);
        assert_eq!(p.seed, 9);
        assert_eq!(p.encounters.p_no_prenatal_care, 0.2);
        // untouched preset values survive the merge
        assert_eq!(p.coef_a0_on_s, WorldParams::fig3b().coef_a0_on_s);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let err = WorldParams::from_config_str("preset = \"null\"\nnot_a_field = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn config_rejects_bad_probability() {
        let text = "preset = \"null\"\nbaseline_outcome_risk = 1.5\n";
        assert!(WorldParams::from_config_str(text).is_err());
    }

    #[test]
    fn canonical_toml_round_trips() {
        let p = WorldParams::fig3c();
        let q = WorldParams::from_config_str(&p.canonical_toml()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn expit_logit_inverse() {
        for p in [1e-9, 0.1, 0.5, 0.9, 1.0 - 1e-9] {
            assert!((expit(logit(p)) - p).abs() < 1e-12);
        }
        assert_eq!(shifted_probability(0.0, 5.0), 0.0);
        assert_eq!(shifted_probability(1.0, -5.0), 1.0);
        assert!((shifted_probability(0.5, 0.0) - 0.5).abs() < 1e-15);
    }
}
