//! Monte Carlo ground truth: counterfactual contrasts computed by forcing
//! treatment nodes in the structural model, and the bias table that runs
//! the full simulate -> observe -> design -> estimate pipeline against
//! those truths.
//!
//! The reported functional is the end-of-pregnancy outcome risk with loss
//! as a competing event: `E[1{no loss} * Y]` over the target population,
//! matching the cumulative-incidence contrast the estimators report.

use serde::Serialize;

use crate::design::{build_cohort, DesignSpec, ProtocolSpec};
use crate::error::{Error, Result};
use crate::estimate::{estimate_effect, EffectMethod, EstimateOptions};
use crate::observe::observed_cohort;
use crate::params::WorldParams;
use crate::rng::repeat_seed;
use crate::scm::{simulate_cohort_with, Trajectory, TreatmentOverride};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Early,
    Late,
    Joint,
    DecisionAtAnchor,
}

impl OracleKind {
    pub fn label(self) -> &'static str {
        match self {
            OracleKind::Early => "EARLY",
            OracleKind::Late => "LATE",
            OracleKind::Joint => "JOINT",
            OracleKind::DecisionAtAnchor => "DECISION_AT_ANCHOR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPopulation {
    AllConceptions,
    SurvivorsToAnchor,
    ObservedAtAnchor,
}

/// A fully specified oracle query.
#[derive(Debug, Clone)]
pub struct OracleEstimand {
    pub kind: OracleKind,
    pub target_population: TargetPopulation,
    /// Interventions defining the contrast (treated arm, comparator arm).
    pub arms: (TreatmentOverride, TreatmentOverride),
    pub mc_draws: usize,
    /// Week defining survivor populations (defaults to the world's
    /// no-care decision week when absent).
    pub anchor_week: Option<u32>,
    /// First-prenatal-visit window defining the observed-at-anchor
    /// population.
    pub window: Option<(i32, i32)>,
    pub require_treatment_at_anchor: bool,
    /// Restrict the population by pre-pregnancy treatment use.
    pub stratum_prior_use: Option<bool>,
    /// Refuse to answer if the projected standard error exceeds this.
    pub target_se: Option<f64>,
}

impl OracleEstimand {
    pub fn early(target_population: TargetPopulation, mc_draws: usize) -> Self {
        OracleEstimand {
            kind: OracleKind::Early,
            target_population,
            arms: (
                TreatmentOverride::forcing_a0(true),
                TreatmentOverride::forcing_a0(false),
            ),
            mc_draws,
            anchor_week: None,
            window: None,
            require_treatment_at_anchor: false,
            stratum_prior_use: None,
            target_se: None,
        }
    }

    pub fn late(target_population: TargetPopulation, mc_draws: usize) -> Self {
        OracleEstimand {
            kind: OracleKind::Late,
            arms: (
                TreatmentOverride::forcing_late_sustained(true),
                TreatmentOverride::forcing_late_sustained(false),
            ),
            ..Self::early(target_population, mc_draws)
        }
    }

    pub fn joint(target_population: TargetPopulation, mc_draws: usize) -> Self {
        let treated = TreatmentOverride {
            a0: Some(true),
            late_sustained: Some(true),
            ..TreatmentOverride::NONE
        };
        let comparator = TreatmentOverride {
            a0: Some(false),
            late_sustained: Some(false),
            ..TreatmentOverride::NONE
        };
        OracleEstimand {
            kind: OracleKind::Joint,
            arms: (treated, comparator),
            ..Self::early(target_population, mc_draws)
        }
    }

    /// The treatment-decision estimand: population fixed by natural
    /// pre-anchor history (observed at a qualifying first prenatal visit),
    /// intervention on the decision made there. `sustained = false` keeps
    /// the natural post-decision switch process running (matching an
    /// intention-to-treat analysis); `sustained = true` forces the state
    /// through follow-up (matching per-protocol adherence).
    pub fn decision_at_anchor(
        protocol: &ProtocolSpec,
        mc_draws: usize,
        sustained: bool,
    ) -> Self {
        let (lo, hi) = protocol.window();
        let arms = if sustained {
            (
                TreatmentOverride::forcing_late_sustained(true),
                TreatmentOverride::forcing_late_sustained(false),
            )
        } else {
            (
                TreatmentOverride::forcing_decision(true),
                TreatmentOverride::forcing_decision(false),
            )
        };
        OracleEstimand {
            kind: OracleKind::DecisionAtAnchor,
            target_population: TargetPopulation::ObservedAtAnchor,
            arms,
            mc_draws,
            anchor_week: None,
            window: Some((lo as i32, hi as i32)),
            require_treatment_at_anchor: protocol.eligibility.require_current_treatment,
            stratum_prior_use: None,
            target_se: None,
        }
    }

    pub fn with_stratum(mut self, prior_use: bool) -> Self {
        self.stratum_prior_use = Some(prior_use);
        self
    }

    pub fn label(&self) -> String {
        let pop = match self.target_population {
            TargetPopulation::AllConceptions => "all_conceptions",
            TargetPopulation::SurvivorsToAnchor => "survivors_to_anchor",
            TargetPopulation::ObservedAtAnchor => "observed_at_anchor",
        };
        match self.stratum_prior_use {
            Some(true) => format!("{}/{pop}/prior_users", self.kind.label()),
            Some(false) => format!("{}/{pop}/non_users", self.kind.label()),
            None => format!("{}/{pop}", self.kind.label()),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kind == OracleKind::DecisionAtAnchor
            && self.target_population == TargetPopulation::AllConceptions
        {
            return Err(Error::config(
                "the decision-at-anchor estimand is undefined over all conceptions; \
                 population membership must precede the intervention",
            ));
        }
        if self.mc_draws == 0 {
            return Err(Error::config("mc_draws must be positive"));
        }
        Ok(())
    }
}

/// Ground-truth contrast with its Monte Carlo uncertainty.
#[derive(Debug, Clone, Serialize)]
pub struct OracleTruth {
    pub truth: f64,
    pub mc_se: f64,
    pub risk_treated: f64,
    pub risk_comparator: f64,
    /// Population size behind each arm mean.
    pub n_treated: usize,
    pub n_comparator: usize,
    pub mc_draws: usize,
}

/// Compensated (Kahan) accumulator so aggregation order cannot move means.
#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    carry: f64,
    n: usize,
}

impl Kahan {
    fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let mut acc = Kahan::default();
    for v in values.clone() {
        acc.add(v);
    }
    let mean = acc.mean();
    let mut sq = Kahan::default();
    for v in values {
        sq.add((v - mean) * (v - mean));
    }
    let n = sq.n;
    let sd = if n > 1 { (sq.sum / (n as f64 - 1.0)).sqrt() } else { 0.0 };
    (mean, sd, n)
}

/// Outcome functional: the outcome occurred and no loss truncated it.
fn outcome_value(t: &Trajectory) -> f64 {
    (t.s_event.is_none() && t.y == Some(true)) as u8 as f64
}

fn in_population(
    t: &Trajectory,
    estimand: &OracleEstimand,
    default_anchor: u32,
) -> bool {
    if let Some(prior) = estimand.stratum_prior_use {
        if t.prepreg_user != prior {
            return false;
        }
    }
    match estimand.target_population {
        TargetPopulation::AllConceptions => true,
        TargetPopulation::SurvivorsToAnchor => {
            let anchor = estimand.anchor_week.unwrap_or(default_anchor);
            t.s_event.map_or(true, |s| s > anchor)
        }
        TargetPopulation::ObservedAtAnchor => {
            let visit = match t.first_prenatal_visit_week() {
                Some(w) => w,
                None => return false,
            };
            if let Some((lo, hi)) = estimand.window {
                if visit < lo || visit > hi {
                    return false;
                }
            }
            if estimand.require_treatment_at_anchor && !t.treatment_state(visit - 1) {
                return false;
            }
            true
        }
    }
}

fn oracle_run(params: &WorldParams, estimand: &OracleEstimand, draws: usize) -> Result<OracleTruth> {
    let mut world = params.clone();
    world.n_persons = draws;
    // Decoupled from the analysis seed so oracle draws are not the same
    // pseudo-data the estimators see.
    world.seed = params.seed ^ 0xA11C_E0DE;

    let natural = simulate_cohort_with(&world, TreatmentOverride::NONE)?;
    let treated = simulate_cohort_with(&world, estimand.arms.0)?;
    let comparator = simulate_cohort_with(&world, estimand.arms.1)?;
    let default_anchor = world.default_decision_week;

    // The decision estimand fixes membership before the intervention;
    // pre-anchor history is shared, so pairing is exact.
    let paired_membership = estimand.kind == OracleKind::DecisionAtAnchor
        || estimand.target_population == TargetPopulation::AllConceptions;

    if paired_membership {
        let member_source: &[Trajectory] =
            if estimand.kind == OracleKind::DecisionAtAnchor {
                &natural
            } else {
                &treated // AllConceptions: everyone; source irrelevant
            };
        let diffs = member_source
            .iter()
            .enumerate()
            .filter(|(_, t)| in_population(t, estimand, default_anchor))
            .map(|(i, _)| outcome_value(&treated[i]) - outcome_value(&comparator[i]));
        let (truth, sd, n) = mean_sd(diffs);
        if n == 0 {
            return Err(Error::Numerical(
                "oracle population is empty under the requested filters".into(),
            ));
        }
        let mut treated_mean = Kahan::default();
        let mut comparator_mean = Kahan::default();
        for (i, t) in member_source.iter().enumerate() {
            if in_population(t, estimand, default_anchor) {
                treated_mean.add(outcome_value(&treated[i]));
                comparator_mean.add(outcome_value(&comparator[i]));
            }
        }
        Ok(OracleTruth {
            truth,
            mc_se: sd / (n as f64).sqrt(),
            risk_treated: treated_mean.mean(),
            risk_comparator: comparator_mean.mean(),
            n_treated: n,
            n_comparator: n,
            mc_draws: draws,
        })
    } else {
        // Population membership is arm-specific (interventions can change
        // who survives or is observed to the anchor).
        let arm_stats = |sim: &[Trajectory]| {
            let values = sim
                .iter()
                .filter(|t| in_population(t, estimand, default_anchor))
                .map(outcome_value);
            mean_sd(values)
        };
        let (risk_treated, sd_a, n_a) = arm_stats(&treated);
        let (risk_comparator, sd_b, n_b) = arm_stats(&comparator);
        if n_a == 0 || n_b == 0 {
            return Err(Error::Numerical(
                "oracle population is empty under the requested filters".into(),
            ));
        }
        let mc_se = (sd_a * sd_a / n_a as f64 + sd_b * sd_b / n_b as f64).sqrt();
        Ok(OracleTruth {
            truth: risk_treated - risk_comparator,
            mc_se,
            risk_treated,
            risk_comparator,
            n_treated: n_a,
            n_comparator: n_b,
            mc_draws: draws,
        })
    }
}

/// Compute the ground-truth contrast. When a target precision is set, a
/// pilot run projects the full-run standard error first and refuses with
/// the required draw count if the budget cannot reach it.
pub fn oracle_effect(params: &WorldParams, estimand: &OracleEstimand) -> Result<OracleTruth> {
    params.validate()?;
    estimand.validate()?;
    if let Some(target) = estimand.target_se {
        let pilot_draws = estimand.mc_draws.min(20_000);
        let pilot = oracle_run(params, estimand, pilot_draws)?;
        let projected =
            pilot.mc_se * (pilot_draws as f64 / estimand.mc_draws as f64).sqrt();
        if projected > target {
            let required =
                (pilot_draws as f64 * (pilot.mc_se / target).powi(2)).ceil() as usize;
            return Err(Error::InsufficientDraws {
                requested: estimand.mc_draws,
                required,
                projected_se: projected,
                target_se: target,
            });
        }
    }
    oracle_run(params, estimand, estimand.mc_draws)
}

// ---------------------------------------------------------------------
// Bias table: full-pipeline comparison of designs against the oracle
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BiasRow {
    pub design: String,
    pub mean_estimate: f64,
    /// Standard deviation of the estimate across repeats.
    pub empirical_sd: f64,
    /// Standard error of the mean estimate.
    pub se_mean: f64,
    pub bias: f64,
    pub mean_enrolled: f64,
    pub mean_immortal_weeks: f64,
    /// Raw per-repeat estimates, for downstream plotting.
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasTable {
    pub estimand: String,
    pub truth: f64,
    pub oracle_mc_se: f64,
    pub n_repeats: usize,
    pub rows: Vec<BiasRow>,
}

/// Run the simulate -> observe -> build -> estimate pipeline `n_repeats`
/// times per design and score each design's mean estimate against the
/// oracle truth. Deterministic given the master seed in `params`.
pub fn bias_table(
    params: &WorldParams,
    design_names: &[String],
    protocol: &ProtocolSpec,
    estimand: &OracleEstimand,
    n_repeats: usize,
    method: EffectMethod,
) -> Result<BiasTable> {
    if n_repeats == 0 {
        return Err(Error::config("n_repeats must be positive"));
    }
    if protocol.stratify_by_prior_use() {
        return Err(Error::config(
            "bias_table compares whole-cohort estimates; use an unstratified protocol",
        ));
    }
    let truth = oracle_effect(params, estimand)?;

    let mut estimates: Vec<Vec<f64>> = vec![Vec::with_capacity(n_repeats); design_names.len()];
    let mut enrolled: Vec<Vec<f64>> = vec![Vec::with_capacity(n_repeats); design_names.len()];
    let mut immortal: Vec<Vec<f64>> = vec![Vec::with_capacity(n_repeats); design_names.len()];

    for rep in 0..n_repeats {
        let mut world = params.clone();
        world.seed = repeat_seed(params.seed, rep as u64);
        let truth_cohort = simulate_cohort_with(&world, TreatmentOverride::NONE)?;
        let observed = observed_cohort(&truth_cohort, &world.encounters);
        for (di, name) in design_names.iter().enumerate() {
            let design = DesignSpec::by_name(name, protocol)?;
            let needs_truth = design.anchor == crate::design::AnchorKind::LmpIdeal;
            let cohort = build_cohort(
                &observed,
                &design,
                protocol,
                needs_truth.then_some(truth_cohort.as_slice()),
            )?;
            let opts = EstimateOptions {
                bootstrap_resamples: 0,
                seed: world.seed,
            };
            let records = estimate_effect(&cohort, protocol, method, &opts)?;
            estimates[di].push(records[0].point);
            enrolled[di].push(cohort.persons.len() as f64);
            immortal[di].push(cohort.total_immortal_weeks() as f64);
        }
    }

    let rows = design_names
        .iter()
        .enumerate()
        .map(|(di, name)| {
            let (mean, sd, n) = mean_sd(estimates[di].iter().copied());
            let (mean_enrolled, _, _) = mean_sd(enrolled[di].iter().copied());
            let (mean_immortal, _, _) = mean_sd(immortal[di].iter().copied());
            BiasRow {
                design: name.clone(),
                mean_estimate: mean,
                empirical_sd: sd,
                se_mean: sd / (n as f64).sqrt(),
                bias: mean - truth.truth,
                mean_enrolled,
                mean_immortal_weeks: mean_immortal,
                estimates: estimates[di].clone(),
            }
        })
        .collect();

    Ok(BiasTable {
        estimand: estimand.label(),
        truth: truth.truth,
        oracle_mc_se: truth.mc_se,
        n_repeats,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::protocol_by_name;
    use crate::params::{expit, logit};

    #[test]
    fn null_world_truths_are_zero() {
        let mut p = WorldParams::null_world();
        p.n_persons = 1000;
        for estimand in [
            OracleEstimand::early(TargetPopulation::AllConceptions, 50_000),
            OracleEstimand::late(TargetPopulation::AllConceptions, 50_000),
            OracleEstimand::joint(TargetPopulation::AllConceptions, 50_000),
        ] {
            let truth = oracle_effect(&p, &estimand).unwrap();
            assert!(
                truth.truth.abs() < 3.0 * truth.mc_se + 1e-9,
                "{:?}: {} +/- {}",
                estimand.kind,
                truth.truth,
                truth.mc_se
            );
        }
    }

    #[test]
    fn late_truth_matches_closed_form_logistic_difference() {
        let mut p = WorldParams::null_world();
        p.coef_a1_on_y = (2.0f64).ln();
        p.baseline_outcome_risk = 0.10;
        let estimand = OracleEstimand::late(TargetPopulation::AllConceptions, 400_000);
        let truth = oracle_effect(&p, &estimand).unwrap();
        let expected = expit(logit(0.10) + (2.0f64).ln()) - 0.10;
        assert!(
            (truth.truth - expected).abs() < 3.0 * truth.mc_se,
            "{} vs {} (se {})",
            truth.truth,
            expected,
            truth.mc_se
        );
    }

    #[test]
    fn early_truth_differs_between_populations_under_selection() {
        let p = WorldParams::fig3b();
        let all = oracle_effect(
            &p,
            &OracleEstimand::early(TargetPopulation::AllConceptions, 300_000),
        )
        .unwrap();
        let survivors = oracle_effect(
            &p,
            &OracleEstimand::early(TargetPopulation::SurvivorsToAnchor, 300_000),
        )
        .unwrap();
        let gap = (all.truth - survivors.truth).abs();
        assert!(
            gap > 2.0 * (all.mc_se + survivors.mc_se),
            "selection did not move the truth: {} vs {}",
            all.truth,
            survivors.truth
        );
        // Population nesting: survivors are a subset of conceptions.
        assert!(survivors.n_treated <= all.n_treated);
    }

    #[test]
    fn mc_se_scales_with_draw_count() {
        let p = WorldParams::fig3a();
        let small = oracle_effect(
            &p,
            &OracleEstimand::early(TargetPopulation::AllConceptions, 40_000),
        )
        .unwrap();
        let large = oracle_effect(
            &p,
            &OracleEstimand::early(TargetPopulation::AllConceptions, 160_000),
        )
        .unwrap();
        let ratio = small.mc_se / large.mc_se;
        assert!(
            (ratio - 2.0).abs() < 0.3,
            "se ratio {ratio} deviates from sqrt scaling"
        );
    }

    #[test]
    fn insufficient_draws_are_refused_with_required_count() {
        let p = WorldParams::fig3b();
        let mut estimand = OracleEstimand::early(TargetPopulation::AllConceptions, 5_000);
        estimand.target_se = Some(1e-5);
        match oracle_effect(&p, &estimand) {
            Err(Error::InsufficientDraws { required, .. }) => {
                assert!(required > 5_000);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn decision_estimand_requires_a_pre_intervention_population() {
        let protocol = protocol_by_name("stop_or_go").unwrap();
        let mut estimand = OracleEstimand::decision_at_anchor(&protocol, 10_000, false);
        estimand.target_population = TargetPopulation::AllConceptions;
        assert!(oracle_effect(&WorldParams::fig3b(), &estimand).is_err());
    }

    #[test]
    fn bias_table_rejects_zero_repeats() {
        let protocol = protocol_by_name("stop_or_go").unwrap();
        let estimand = OracleEstimand::decision_at_anchor(&protocol, 10_000, false);
        let err = bias_table(
            &WorldParams::fig3b(),
            &["4d".to_string()],
            &protocol,
            &estimand,
            0,
            EffectMethod::IttAnalog,
        );
        assert!(err.is_err());
    }

    #[test]
    fn null_world_bias_is_zero_for_every_design() {
        let mut p = WorldParams::null_world();
        p.n_persons = 8_000;
        let protocol = protocol_by_name("stop_or_go").unwrap();
        let estimand = OracleEstimand::decision_at_anchor(&protocol, 100_000, false);
        let table = bias_table(
            &p,
            &["4b".into(), "4c".into(), "4d".into(), "4e".into()],
            &protocol,
            &estimand,
            8,
            EffectMethod::IttAnalog,
        )
        .unwrap();
        assert!(table.truth.abs() < 3.0 * table.oracle_mc_se + 1e-9);
        for row in &table.rows {
            assert!(
                row.bias.abs() < 3.0 * (row.se_mean + table.oracle_mc_se) + 1e-9,
                "{}: bias {} se {}",
                row.design,
                row.bias,
                row.se_mean
            );
        }
    }
}
