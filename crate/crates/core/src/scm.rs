//! Ground-truth pregnancy trajectory generator.
//!
//! Discrete weekly time, LMP = week 0. Each person is simulated from
//! per-node random substreams (see [`crate::rng`]), so an intervention that
//! forces a treatment node leaves every other draw untouched. The weekly
//! pieces:
//!
//! * pre-pregnancy chain: initiation, adverse events, discontinuation
//!   (the depletion-of-susceptibles mechanism behind prevalent-user bias);
//! * early treatment `A0` in effect from week 0 until the decision week;
//! * weekly pregnancy-loss hazard through the loss window, a function of
//!   the latent `U` and of `A0`;
//! * a treatment decision at the first prenatal visit (or a default week
//!   for the uncared-for), setting the later treatment state `A1`, with a
//!   weekly chance of one post-decision switch thereafter;
//! * an end-of-pregnancy binary outcome among survivors, a function of
//!   `U`, `A0`, and the realized late treatment state.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{
    shifted_probability, Scenario, WorldParams, RECOGNITION_WEEK_MAX, RECOGNITION_WEEK_MIN,
};
use crate::rng::{substream, Node};

/// Healthcare encounter kinds visible on a timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncounterKind {
    PreconceptionCounseling,
    PregnancyTest,
    PrenatalVisit,
    DeliveryOrEnd,
}

impl EncounterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncounterKind::PreconceptionCounseling => "preconception_counseling",
            EncounterKind::PregnancyTest => "pregnancy_test",
            EncounterKind::PrenatalVisit => "prenatal_visit",
            EncounterKind::DeliveryOrEnd => "delivery_or_end",
        }
    }

    /// Encounters that register a pregnancy in the healthcare system.
    /// Preconception counseling is visible history but registers nothing:
    /// no pregnancy exists yet.
    pub fn is_pregnancy_related(self) -> bool {
        matches!(
            self,
            EncounterKind::PregnancyTest
                | EncounterKind::PrenatalVisit
                | EncounterKind::DeliveryOrEnd
        )
    }
}

/// One healthcare encounter. Weeks are gestational; negative = before LMP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encounter {
    pub kind: EncounterKind,
    pub week: i32,
}

/// Complete ground-truth history of one pregnancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub person_id: u64,
    /// Latent common cause, standard normal.
    pub u: f64,
    /// Measured noisy proxy of `u` (correlation set by `EncounterParams`).
    pub u_proxy: f64,
    /// Has the chronic condition the treatment targets.
    pub chronic: bool,
    /// Would suffer the adverse event if treated.
    pub susceptible: bool,
    /// On treatment at LMP.
    pub prepreg_user: bool,
    /// Ever initiated treatment during the pre-pregnancy lookback.
    pub ever_initiated_prepreg: bool,
    /// Early-pregnancy treatment state (weeks 0 .. decision_week-1).
    pub a0: bool,
    /// Week of the treatment decision: first prenatal visit, or the
    /// configured default for persons with no prenatal care.
    pub decision_week: u32,
    /// Later-treatment state chosen at the decision; `None` when the
    /// pregnancy ended before the decision week.
    pub a1_decision: Option<bool>,
    /// First week (if any) the realized post-decision state flipped.
    pub switch_week: Option<u32>,
    /// Realized treatment state at the late etiologic week; enters the
    /// outcome model. `None` when no decision was reached.
    pub late_treatment: Option<bool>,
    pub encounters: Vec<Encounter>,
    /// Gestational week of pregnancy loss, if any.
    pub s_event: Option<u32>,
    /// Week the pregnancy ended (loss week, or term delivery week).
    pub end_week: u32,
    /// End-of-pregnancy outcome; defined only when no loss occurred.
    pub y: Option<bool>,
}

impl Trajectory {
    /// Dispensing-visible treatment state during `week`.
    pub fn treatment_state(&self, week: i32) -> bool {
        if week < 0 {
            return self.prepreg_user;
        }
        match self.a1_decision {
            Some(decision) if week >= self.decision_week as i32 => match self.switch_week {
                Some(sw) if week >= sw as i32 => !decision,
                _ => decision,
            },
            _ => self.a0,
        }
    }

    pub fn lost(&self) -> bool {
        self.s_event.is_some()
    }

    /// First prenatal visit, if care was ever received.
    pub fn first_prenatal_visit_week(&self) -> Option<i32> {
        self.encounters
            .iter()
            .find(|e| e.kind == EncounterKind::PrenatalVisit)
            .map(|e| e.week)
    }
}

/// Result of the pre-pregnancy treatment chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrePregnancyOutcome {
    pub u: f64,
    pub chronic: bool,
    pub susceptible: bool,
    pub ever_initiated: bool,
    pub prepreg_user: bool,
}

/// Forced treatment values for interventional simulation.
///
/// `a1_decision` forces the choice made at the decision point but leaves
/// the natural post-decision switch process running (the
/// intention-to-treat flavor of a later-treatment intervention).
/// `late_sustained` forces the post-decision state outright: decision and
/// switching are both overridden, so the realized late state is exactly
/// the forced value (the per-protocol flavor).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TreatmentOverride {
    pub a0: Option<bool>,
    pub a1_decision: Option<bool>,
    pub late_sustained: Option<bool>,
}

impl TreatmentOverride {
    pub const NONE: TreatmentOverride = TreatmentOverride {
        a0: None,
        a1_decision: None,
        late_sustained: None,
    };

    pub fn forcing_a0(value: bool) -> Self {
        TreatmentOverride { a0: Some(value), ..Self::NONE }
    }

    pub fn forcing_decision(value: bool) -> Self {
        TreatmentOverride { a1_decision: Some(value), ..Self::NONE }
    }

    pub fn forcing_late_sustained(value: bool) -> Self {
        TreatmentOverride { late_sustained: Some(value), ..Self::NONE }
    }
}

/// Weekly loss probability given the latent cause and early treatment.
/// Monotone in each coefficient through the logistic link; a baseline of
/// exactly 0 (or 1) is preserved regardless of shifts.
pub fn structural_hazard(params: &WorldParams, u: f64, a0: bool, week: u32) -> f64 {
    debug_assert!(
        (1..=params.loss_window_end_week).contains(&week),
        "loss hazard queried outside the loss window"
    );
    let shift = params.coef_u_on_s * u + params.coef_a0_on_s * indicator(a0);
    shifted_probability(params.baseline_loss_hazard, shift)
}

/// End-of-pregnancy outcome probability among survivors.
pub fn outcome_probability(
    params: &WorldParams,
    u: f64,
    a0: bool,
    late_treatment: bool,
    susceptible: bool,
) -> f64 {
    let shift = params.coef_a0_on_y * indicator(a0)
        + params.coef_a1_on_y * indicator(late_treatment)
        + params.coef_u_on_y * u
        + params.coef_susceptible_treated_on_y * indicator(susceptible && late_treatment);
    shifted_probability(params.baseline_outcome_risk, shift)
}

/// Probability early treatment is on, given latent cause and prior use.
pub fn early_treatment_probability(params: &WorldParams, u: f64, prepreg_user: bool) -> f64 {
    let shift = params.coef_u_on_a0 * u + params.coef_prepreg_on_a0 * indicator(prepreg_user);
    shifted_probability(params.baseline_a0_prob, shift)
}

/// Probability the decision at the anchor keeps/starts treatment.
pub fn late_treatment_probability(params: &WorldParams, u: f64, a0: bool) -> f64 {
    let shift = params.coef_a0_on_a1 * indicator(a0) + params.coef_u_on_a1 * u;
    shifted_probability(params.baseline_a1_prob, shift)
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Pre-pregnancy chain for one person. Draws the latent `U` and the
/// chronic/susceptible flags from the person's exogenous stream, then runs
/// the monthly initiation chain. Outside the prevalent-user scenario the
/// chain is skipped and `prepreg_user` is deterministically false.
pub fn simulate_prepregnancy(params: &WorldParams, person_id: u64) -> PrePregnancyOutcome {
    let mut exo = substream(params.seed, person_id, Node::Exogenous);
    let u: f64 = exo.sample(StandardNormal);
    let chronic = exo.gen_bool(params.prepreg.p_chronic_condition);
    let susceptible = exo.gen_bool(params.prepreg.p_susceptible);

    if params.scenario != Scenario::PrevalentUser || !chronic {
        return PrePregnancyOutcome {
            u,
            chronic,
            susceptible,
            ever_initiated: false,
            prepreg_user: false,
        };
    }

    let mut rng = substream(params.seed, person_id, Node::PrePregnancy);
    let mut ever_initiated = false;
    let mut on_treatment = false;
    for _month in 0..params.prepreg.months_lookback {
        if !ever_initiated && rng.gen_bool(params.prepreg.p_initiate_per_month) {
            ever_initiated = true;
            on_treatment = true;
            if susceptible && rng.gen_bool(params.prepreg.p_adverse_event_on_initiation) {
                if rng.gen_bool(params.prepreg.p_discontinue_given_adverse) {
                    on_treatment = false;
                }
            }
        }
    }
    PrePregnancyOutcome {
        u,
        chronic,
        susceptible,
        ever_initiated,
        prepreg_user: on_treatment,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CareCategory {
    NoPrenatalCare,
    LateEntry,
    Timely,
}

/// Planned (pre-loss) encounter schedule; realized encounters are this plan
/// truncated at the pregnancy's end.
struct EncounterPlan {
    preconception_week: Option<i32>,
    recognition_week: Option<i32>,
    first_visit_week: Option<i32>,
    category: CareCategory,
}

const PRECONCEPTION_WEEK_MIN: i32 = -26;
const MAX_PLANNED_WEEK: i32 = 44;

fn plan_encounters(params: &WorldParams, person_id: u64) -> EncounterPlan {
    let enc = &params.encounters;
    let mut rng = substream(params.seed, person_id, Node::Encounters);

    let preconception_week = if rng.gen_bool(enc.p_preconception_visit) {
        Some(rng.gen_range(PRECONCEPTION_WEEK_MIN..=-1))
    } else {
        None
    };

    let cat_draw: f64 = rng.gen();
    let category = if cat_draw < enc.p_no_prenatal_care {
        CareCategory::NoPrenatalCare
    } else if cat_draw < enc.p_no_prenatal_care + enc.p_late_prenatal_after_week12 {
        CareCategory::LateEntry
    } else {
        CareCategory::Timely
    };

    match category {
        CareCategory::NoPrenatalCare => EncounterPlan {
            preconception_week,
            recognition_week: None,
            first_visit_week: None,
            category,
        },
        CareCategory::Timely => {
            // Recognition truncated to weeks 4..=11 so the first visit can
            // land at or before week 12 and strictly after recognition.
            let recognition = sample_recognition_week(&mut rng, enc, 11);
            let delay = rng.gen_range(1..=3);
            let first_visit = (recognition + delay).min(12);
            EncounterPlan {
                preconception_week,
                recognition_week: Some(recognition),
                first_visit_week: Some(first_visit),
                category,
            }
        }
        CareCategory::LateEntry => {
            let recognition = sample_recognition_week(&mut rng, enc, RECOGNITION_WEEK_MAX);
            let extra = rng.gen_range(0..=3);
            let first_visit = (13 + extra).max(recognition + 1);
            EncounterPlan {
                preconception_week,
                recognition_week: Some(recognition),
                first_visit_week: Some(first_visit),
                category,
            }
        }
    }
}

fn sample_recognition_week(
    rng: &mut impl Rng,
    enc: &crate::params::EncounterParams,
    max_week: i32,
) -> i32 {
    let hi = (max_week - RECOGNITION_WEEK_MIN) as usize;
    let weights = &enc.recognition_week_weights[..=hi];
    let total: f64 = weights.iter().sum();
    let mut draw: f64 = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        draw -= w;
        if draw < 0.0 {
            return RECOGNITION_WEEK_MIN + i as i32;
        }
    }
    max_week
}

/// Simulate one person under optional treatment forcing.
pub fn simulate_person_with(
    params: &WorldParams,
    person_id: u64,
    forced: TreatmentOverride,
) -> Trajectory {
    let pre = simulate_prepregnancy(params, person_id);
    let plan = plan_encounters(params, person_id);

    let u_proxy = {
        let mut rng = substream(params.seed, person_id, Node::Proxy);
        let noise: f64 = rng.sample(StandardNormal);
        let rho = params.encounters.u_proxy_correlation;
        rho * pre.u + (1.0 - rho * rho).max(0.0).sqrt() * noise
    };

    let a0 = match forced.a0 {
        Some(v) => v,
        None => {
            let p = if pre.chronic {
                early_treatment_probability(params, pre.u, pre.prepreg_user)
            } else {
                0.0
            };
            let mut rng = substream(params.seed, person_id, Node::EarlyTreatment);
            rng.gen_bool(p)
        }
    };

    // Weekly loss process through the loss window.
    let s_event = {
        let mut rng = substream(params.seed, person_id, Node::Loss);
        let mut hit = None;
        for week in 1..=params.loss_window_end_week {
            let h = structural_hazard(params, pre.u, a0, week);
            let draw: f64 = rng.gen();
            if draw < h {
                hit = Some(week);
                break;
            }
        }
        hit
    };

    let decision_week = plan
        .first_visit_week
        .map(|w| w as u32)
        .unwrap_or(params.default_decision_week);

    let end_week = match s_event {
        Some(w) => w,
        None => {
            let mut rng = substream(params.seed, person_id, Node::TermWeek);
            rng.gen_range(params.term_week_min..=params.term_week_max)
        }
    };

    let decision_reached = decision_week < end_week;
    let (a1_decision, switch_week, late_treatment) = if !decision_reached {
        (None, None, None)
    } else if let Some(v) = forced.late_sustained {
        (Some(v), None, Some(v))
    } else {
        let decision = match forced.a1_decision {
            Some(v) => v,
            None => {
                let p = if pre.chronic {
                    late_treatment_probability(params, pre.u, a0)
                } else {
                    0.0
                };
                let mut rng = substream(params.seed, person_id, Node::LateTreatment);
                rng.gen_bool(p)
            }
        };
        let switch_week = {
            let g = shifted_probability(
                params.treatment_switch_hazard,
                params.coef_a0_on_switch * indicator(a0),
            );
            let mut rng = substream(params.seed, person_id, Node::Adherence);
            let mut hit = None;
            for week in decision_week + 1..=MAX_PLANNED_WEEK as u32 {
                let draw: f64 = rng.gen();
                if draw < g {
                    hit = Some(week);
                    break;
                }
            }
            hit
        };
        let late_state_at = |week: u32| match switch_week {
            Some(sw) if week >= sw => !decision,
            _ => decision,
        };
        (
            Some(decision),
            switch_week,
            Some(late_state_at(params.late_effect_week)),
        )
    };

    let y = if s_event.is_some() {
        None
    } else {
        let late = late_treatment.unwrap_or(a0);
        let p = outcome_probability(params, pre.u, a0, late, pre.susceptible);
        let mut rng = substream(params.seed, person_id, Node::Outcome);
        Some(rng.gen_bool(p))
    };

    // Realized encounters: the plan truncated at the pregnancy's end.
    let mut encounters = Vec::with_capacity(8);
    if let Some(w) = plan.preconception_week {
        encounters.push(Encounter {
            kind: EncounterKind::PreconceptionCounseling,
            week: w,
        });
    }
    if plan.category != CareCategory::NoPrenatalCare {
        if let Some(rec) = plan.recognition_week {
            if rec < end_week as i32 {
                encounters.push(Encounter {
                    kind: EncounterKind::PregnancyTest,
                    week: rec,
                });
            }
        }
        if let Some(first) = plan.first_visit_week {
            let mut w = first;
            while w < end_week as i32 && w <= MAX_PLANNED_WEEK {
                encounters.push(Encounter {
                    kind: EncounterKind::PrenatalVisit,
                    week: w,
                });
                w += params.encounters.visit_interval_weeks as i32;
            }
        }
    }
    encounters.push(Encounter {
        kind: EncounterKind::DeliveryOrEnd,
        week: end_week as i32,
    });
    debug_assert!(encounters.windows(2).all(|p| p[0].week < p[1].week));

    Trajectory {
        person_id,
        u: pre.u,
        u_proxy,
        chronic: pre.chronic,
        susceptible: pre.susceptible,
        prepreg_user: pre.prepreg_user,
        ever_initiated_prepreg: pre.ever_initiated,
        a0,
        decision_week,
        a1_decision,
        switch_week,
        late_treatment,
        encounters,
        s_event,
        end_week,
        y,
    }
}

pub fn simulate_person(params: &WorldParams, person_id: u64) -> Trajectory {
    simulate_person_with(params, person_id, TreatmentOverride::NONE)
}

/// Simulate the whole cohort under optional forcing. Parallel over
/// persons; output is ordered by person id and identical to a serial run.
pub fn simulate_cohort_with(
    params: &WorldParams,
    forced: TreatmentOverride,
) -> Result<Vec<Trajectory>> {
    params.validate()?;
    Ok((0..params.n_persons as u64)
        .into_par_iter()
        .map(|pid| simulate_person_with(params, pid, forced))
        .collect())
}

pub fn simulate_cohort(params: &WorldParams) -> Result<Vec<Trajectory>> {
    simulate_cohort_with(params, TreatmentOverride::NONE)
}

/// Closed-form survival through the loss window for a fixed `u` and `a0`:
/// the product of weekly complements. Spot-check companion to the
/// simulated loss process.
pub fn survival_through_loss_window(params: &WorldParams, u: f64, a0: bool) -> f64 {
    (1..=params.loss_window_end_week)
        .map(|w| 1.0 - structural_hazard(params, u, a0, w))
        .product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{expit, logit};

    #[test]
    fn hazard_is_intercept_when_coefs_zero() {
        let mut p = WorldParams::null_world();
        p.baseline_loss_hazard = 0.02;
        assert_eq!(structural_hazard(&p, 1.3, true, 5), 0.02);
    }

    #[test]
    fn hazard_odds_double_with_log2_coefficient() {
        let mut p = WorldParams::null_world();
        p.scenario = Scenario::Fig3b;
        p.baseline_loss_hazard = 0.01;
        p.coef_a0_on_s = (2.0f64).ln();
        let h0 = structural_hazard(&p, 0.0, false, 3);
        let h1 = structural_hazard(&p, 0.0, true, 3);
        let odds = |h: f64| h / (1.0 - h);
        assert!((odds(h1) / odds(h0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hazard_matches_independent_linear_predictor() {
        // Golden values recomputed straight from the linear predictor,
        // without going through shifted_probability.
        let p = WorldParams::fig3b();
        for (u, a0) in [(0.0, false), (1.0, false), (-0.5, true), (2.0, true)] {
            let lp = logit(p.baseline_loss_hazard)
                + p.coef_u_on_s * u
                + p.coef_a0_on_s * if a0 { 1.0 } else { 0.0 };
            let expected = expit(lp);
            assert!((structural_hazard(&p, u, a0, 2) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn null_world_everyone_survives_at_baseline_risk() {
        let mut p = WorldParams::null_world();
        p.n_persons = 40_000;
        let cohort = simulate_cohort(&p).unwrap();
        assert!(cohort.iter().all(|t| t.s_event.is_none()));
        let rate = cohort.iter().filter(|t| t.y == Some(true)).count() as f64
            / cohort.len() as f64;
        // binomial mc tolerance: se ~ sqrt(.1*.9/4e4) ~ 0.0015
        assert!((rate - p.baseline_outcome_risk).abs() < 0.006, "rate={rate}");
    }

    #[test]
    fn fig3a_loss_uncorrelated_with_treatment() {
        let mut p = WorldParams::fig3a();
        p.n_persons = 40_000;
        let cohort = simulate_cohort(&p).unwrap();
        let loss_rate = |sel: &dyn Fn(&&Trajectory) -> bool| {
            let group: Vec<_> = cohort.iter().filter(sel).collect();
            group.iter().filter(|t| t.lost()).count() as f64 / group.len() as f64
        };
        let treated = loss_rate(&|t| t.a0);
        let untreated = loss_rate(&|t| !t.a0);
        assert!((treated - untreated).abs() < 0.015, "{treated} vs {untreated}");
    }

    #[test]
    fn fig3b_loss_rate_matches_weekly_hazard_product() {
        // With the U->S arrow silenced, the analytic survival product is
        // exact for each arm.
        let mut p = WorldParams::fig3b();
        p.coef_u_on_s = 0.0;
        p.n_persons = 60_000;
        let cohort = simulate_cohort(&p).unwrap();
        for a0 in [false, true] {
            let group: Vec<_> = cohort.iter().filter(|t| t.a0 == a0).collect();
            let observed = group.iter().filter(|t| t.lost()).count() as f64 / group.len() as f64;
            let expected = 1.0 - survival_through_loss_window(&p, 0.0, a0);
            assert!(
                (observed - expected).abs() < 0.01,
                "a0={a0}: observed {observed} vs analytic {expected}"
            );
        }
        let treated = cohort.iter().filter(|t| t.a0 && t.lost()).count() as f64
            / cohort.iter().filter(|t| t.a0).count() as f64;
        let untreated = cohort.iter().filter(|t| !t.a0 && t.lost()).count() as f64
            / cohort.iter().filter(|t| !t.a0).count() as f64;
        assert!(treated > untreated);
    }

    #[test]
    fn simulation_is_bitwise_reproducible() {
        let p = WorldParams::fig3c();
        let mut p = p;
        p.n_persons = 2_000;
        let a = simulate_cohort(&p).unwrap();
        let b = simulate_cohort(&p).unwrap();
        assert_eq!(a, b);
        let serial: Vec<_> = (0..p.n_persons as u64)
            .map(|pid| simulate_person(&p, pid))
            .collect();
        assert_eq!(a, serial);
    }

    #[test]
    fn loss_and_outcome_are_mutually_exclusive() {
        let mut p = WorldParams::fig3b();
        p.n_persons = 5_000;
        for t in simulate_cohort(&p).unwrap() {
            assert!(!(t.s_event.is_some() && t.y.is_some()), "S and Y both set");
            if let Some(s) = t.s_event {
                assert_eq!(t.end_week, s);
            } else {
                assert!((p.term_week_min..=p.term_week_max).contains(&t.end_week));
            }
            assert!(t.encounters.windows(2).all(|w| w[0].week < w[1].week));
            assert!(t.encounters.iter().all(|e| e.week <= t.end_week as i32));
            let ends = t
                .encounters
                .iter()
                .filter(|e| e.kind == EncounterKind::DeliveryOrEnd)
                .count();
            assert_eq!(ends, 1);
        }
    }

    #[test]
    fn prepregnancy_no_adverse_events_means_no_depletion() {
        let mut p = WorldParams::prevalent_user();
        p.prepreg.p_adverse_event_on_initiation = 0.0;
        let mut susc_prev = (0u64, 0u64);
        let mut susc_other = (0u64, 0u64);
        for pid in 0..60_000 {
            let out = simulate_prepregnancy(&p, pid);
            if out.prepreg_user {
                susc_prev.0 += out.susceptible as u64;
                susc_prev.1 += 1;
            } else {
                susc_other.0 += out.susceptible as u64;
                susc_other.1 += 1;
            }
        }
        let a = susc_prev.0 as f64 / susc_prev.1 as f64;
        let b = susc_other.0 as f64 / susc_other.1 as f64;
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }

    #[test]
    fn prepregnancy_forced_depletion_is_exact() {
        let mut p = WorldParams::prevalent_user();
        p.prepreg.p_adverse_event_on_initiation = 1.0;
        p.prepreg.p_discontinue_given_adverse = 1.0;
        for pid in 0..20_000 {
            let out = simulate_prepregnancy(&p, pid);
            if out.prepreg_user {
                assert!(!out.susceptible, "susceptible prevalent user survived forced depletion");
            }
        }
    }

    #[test]
    fn prevalent_users_are_depleted_of_susceptibles() {
        let mut p = WorldParams::prevalent_user();
        p.n_persons = 100_000;
        let cohort = simulate_cohort(&p).unwrap();
        let prevalent: Vec<_> = cohort.iter().filter(|t| t.prepreg_user).collect();
        let new_users: Vec<_> = cohort
            .iter()
            .filter(|t| !t.prepreg_user && t.a0)
            .collect();
        let frac = |g: &[&Trajectory]| {
            g.iter().filter(|t| t.susceptible).count() as f64 / g.len() as f64
        };
        assert!(
            frac(&prevalent) < frac(&new_users),
            "depletion direction violated: {} vs {}",
            frac(&prevalent),
            frac(&new_users)
        );
    }

    #[test]
    fn treatment_state_follows_decision_and_switch() {
        let mut p = WorldParams::fig3b();
        p.n_persons = 3_000;
        let cohort = simulate_cohort(&p).unwrap();
        for t in &cohort {
            assert_eq!(t.treatment_state(-3), t.prepreg_user);
            assert_eq!(t.treatment_state(0), t.a0);
            if let Some(decision) = t.a1_decision {
                assert_eq!(t.treatment_state(t.decision_week as i32), decision);
                if let Some(sw) = t.switch_week {
                    assert_eq!(t.treatment_state(sw as i32), !decision);
                    assert_eq!(t.treatment_state(sw as i32 - 1), decision);
                }
            }
        }
    }

    #[test]
    fn forcing_natural_values_reproduces_the_trajectory() {
        let mut p = WorldParams::fig3b();
        p.n_persons = 500;
        for t in simulate_cohort(&p).unwrap() {
            let forced =
                simulate_person_with(&p, t.person_id, TreatmentOverride::forcing_a0(t.a0));
            assert_eq!(t, forced);
            if let Some(decision) = t.a1_decision {
                let forced_decision = simulate_person_with(
                    &p,
                    t.person_id,
                    TreatmentOverride::forcing_decision(decision),
                );
                assert_eq!(t, forced_decision);
            }
        }
    }
}
