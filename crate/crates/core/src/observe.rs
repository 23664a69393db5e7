//! Claims-visible projection of ground-truth trajectories.
//!
//! A pregnancy enters the database at its first pregnancy-registering
//! encounter (pregnancy test or prenatal visit), not at LMP. Pregnancies
//! with no such encounter — the no-prenatal-care mass and losses before
//! recognition — produce no record at all. Nothing derived from the
//! latent `U` or the susceptibility flag crosses this boundary; the only
//! sanctioned channel is the configured noisy proxy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::params::EncounterParams;
use crate::scm::{Encounter, EncounterKind, Trajectory};

/// How an observed pregnancy ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndType {
    LiveBirth,
    Loss,
}

/// One pregnancy as a healthcare database sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedRecord {
    pub person_id: u64,
    /// Every encounter the database captured, in week order. Includes
    /// preconception counseling as visible history.
    pub visible_encounters: Vec<Encounter>,
    /// Week of the earliest visible encounter (may be negative when a
    /// preconception visit exists).
    pub first_pregnancy_contact_week: i32,
    /// Measured baseline covariates only; never the latent cause itself.
    pub baseline_covariates: BTreeMap<String, f64>,
    /// Weekly dispensing indicators from the claims lookback through the
    /// observed end.
    pub treatment_claims: Vec<(i32, bool)>,
    pub observed_end: Option<(u32, EndType)>,
    pub observed_outcome: Option<bool>,
}

impl ObservedRecord {
    /// Week of the first pregnancy-registering encounter (test, prenatal
    /// visit, or recorded end). This is the prospective-identification
    /// anchor; preconception history does not count.
    pub fn first_pregnancy_related_week(&self) -> i32 {
        self.visible_encounters
            .iter()
            .filter(|e| e.kind.is_pregnancy_related())
            .map(|e| e.week)
            .min()
            .expect("observed records always contain a pregnancy-related encounter")
    }

    /// First prenatal visit in the record, if any.
    pub fn first_prenatal_visit_week(&self) -> Option<i32> {
        self.visible_encounters
            .iter()
            .find(|e| e.kind == EncounterKind::PrenatalVisit)
            .map(|e| e.week)
    }

    /// Dispensing-visible treatment state during `week`; false outside the
    /// captured claims span.
    pub fn treatment_state(&self, week: i32) -> bool {
        match self
            .treatment_claims
            .binary_search_by_key(&week, |(w, _)| *w)
        {
            Ok(i) => self.treatment_claims[i].1,
            Err(_) => false,
        }
    }

    /// Any dispensing in the pre-LMP lookback.
    pub fn prior_use(&self) -> bool {
        self.treatment_claims.iter().any(|(w, on)| *w < 0 && *on)
    }
}

pub const COVARIATE_PREPREG_USER: &str = "prepreg_user";
pub const COVARIATE_U_PROXY: &str = "u_proxy";

/// Project one trajectory into the database's view. Returns `None` when
/// the pregnancy never registers: no pregnancy test or prenatal visit ever
/// reaches the claims stream (out-of-system care, or loss before
/// recognition).
pub fn observe(trajectory: &Trajectory, params: &EncounterParams) -> Option<ObservedRecord> {
    let registered = trajectory.encounters.iter().any(|e| {
        matches!(
            e.kind,
            EncounterKind::PregnancyTest | EncounterKind::PrenatalVisit
        )
    });
    if !registered {
        return None;
    }

    let visible_encounters: Vec<Encounter> = trajectory.encounters.clone();
    let first_contact = visible_encounters
        .iter()
        .map(|e| e.week)
        .min()
        .expect("registered trajectory has encounters");

    let end_week = trajectory.end_week;
    let end_type = if trajectory.s_event.is_some() {
        EndType::Loss
    } else {
        EndType::LiveBirth
    };

    let claims_start = first_contact - params.claims_lookback_weeks as i32;
    let treatment_claims: Vec<(i32, bool)> = (claims_start..=end_week as i32)
        .map(|w| (w, trajectory.treatment_state(w)))
        .collect();

    let mut baseline_covariates = BTreeMap::new();
    let prior_use = treatment_claims.iter().any(|(w, on)| *w < 0 && *on);
    baseline_covariates.insert(COVARIATE_PREPREG_USER.to_string(), prior_use as u8 as f64);
    baseline_covariates.insert(COVARIATE_U_PROXY.to_string(), trajectory.u_proxy);

    Some(ObservedRecord {
        person_id: trajectory.person_id,
        visible_encounters,
        first_pregnancy_contact_week: first_contact,
        baseline_covariates,
        treatment_claims,
        observed_end: Some((end_week, end_type)),
        observed_outcome: trajectory.y,
    })
}

/// Project a whole cohort, preserving person order.
pub fn observed_cohort(
    trajectories: &[Trajectory],
    params: &EncounterParams,
) -> Vec<ObservedRecord> {
    trajectories
        .par_iter()
        .filter_map(|t| observe(t, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::WorldParams;
    use crate::scm::simulate_cohort;

    fn base_trajectory() -> Trajectory {
        Trajectory {
            person_id: 7,
            u: 0.3,
            u_proxy: -0.1,
            chronic: true,
            susceptible: false,
            prepreg_user: false,
            ever_initiated_prepreg: false,
            a0: true,
            decision_week: 9,
            a1_decision: Some(true),
            switch_week: None,
            late_treatment: Some(true),
            encounters: vec![],
            s_event: None,
            end_week: 39,
            y: Some(false),
        }
    }

    #[test]
    fn loss_before_any_contact_is_absent() {
        let mut t = base_trajectory();
        t.s_event = Some(6);
        t.end_week = 6;
        t.y = None;
        t.a1_decision = None;
        t.late_treatment = None;
        t.encounters = vec![Encounter {
            kind: EncounterKind::DeliveryOrEnd,
            week: 6,
        }];
        assert!(observe(&t, &EncounterParams::default()).is_none());
    }

    #[test]
    fn preconception_visit_sets_negative_first_contact() {
        let mut t = base_trajectory();
        t.encounters = vec![
            Encounter {
                kind: EncounterKind::PreconceptionCounseling,
                week: -8,
            },
            Encounter {
                kind: EncounterKind::PregnancyTest,
                week: 6,
            },
            Encounter {
                kind: EncounterKind::PrenatalVisit,
                week: 9,
            },
            Encounter {
                kind: EncounterKind::DeliveryOrEnd,
                week: 39,
            },
        ];
        let rec = observe(&t, &EncounterParams::default()).unwrap();
        assert!(rec.first_pregnancy_contact_week <= 0);
        assert_eq!(rec.first_pregnancy_contact_week, -8);
        assert_eq!(rec.first_pregnancy_related_week(), 6);
        assert_eq!(rec.observed_end, Some((39, EndType::LiveBirth)));
    }

    #[test]
    fn no_care_and_unregistered_trajectories_are_absent() {
        // Only a preconception visit plus the physical end: no pregnancy
        // was ever registered, so nothing reaches the database.
        let mut t = base_trajectory();
        t.encounters = vec![
            Encounter {
                kind: EncounterKind::PreconceptionCounseling,
                week: -4,
            },
            Encounter {
                kind: EncounterKind::DeliveryOrEnd,
                week: 39,
            },
        ];
        assert!(observe(&t, &EncounterParams::default()).is_none());
    }

    #[test]
    fn observed_cohort_preserves_order_and_shrinks() {
        let mut p = WorldParams::fig3b();
        p.n_persons = 20_000;
        let cohort = simulate_cohort(&p).unwrap();
        let observed = observed_cohort(&cohort, &p.encounters);
        assert!(observed.len() < cohort.len());
        assert!(observed.windows(2).all(|w| w[0].person_id < w[1].person_id));
    }

    #[test]
    fn empty_input_gives_empty_output() {
        assert!(observed_cohort(&[], &EncounterParams::default()).is_empty());
    }

    #[test]
    fn all_care_suppressed_gives_empty_output() {
        let mut p = WorldParams::fig3a();
        p.n_persons = 2_000;
        p.encounters.p_no_prenatal_care = 1.0;
        p.encounters.p_late_prenatal_after_week12 = 0.0;
        p.encounters.p_preconception_visit = 0.0;
        let cohort = simulate_cohort(&p).unwrap();
        assert!(observed_cohort(&cohort, &p.encounters).is_empty());
    }

    #[test]
    fn no_leakage_from_latent_cause() {
        // Permuting U across persons (holding every measured field fixed)
        // must leave the observed projection unchanged.
        let mut p = WorldParams::fig3c();
        p.n_persons = 3_000;
        let cohort = simulate_cohort(&p).unwrap();
        let before = observed_cohort(&cohort, &p.encounters);
        let mut permuted = cohort.clone();
        let n = permuted.len();
        for i in 0..n {
            let j = (i * 7919 + 13) % n;
            let tmp = permuted[i].u;
            permuted[i].u = permuted[j].u;
            permuted[j].u = tmp;
        }
        for t in permuted.iter_mut() {
            t.susceptible = !t.susceptible;
        }
        let after = observed_cohort(&permuted, &p.encounters);
        assert_eq!(before, after);
    }

    #[test]
    fn truncation_end_never_precedes_first_contact() {
        let mut p = WorldParams::fig3b();
        p.n_persons = 10_000;
        let cohort = simulate_cohort(&p).unwrap();
        for rec in observed_cohort(&cohort, &p.encounters) {
            let (end, _) = rec.observed_end.unwrap();
            assert!(end as i32 >= rec.first_pregnancy_contact_week);
            assert!(end as i32 >= rec.first_pregnancy_related_week());
        }
    }

    #[test]
    fn earlier_recognition_never_hides_records() {
        // Shift every recognition/test and prenatal visit two weeks
        // earlier (clamped to week 4) while holding the trajectory set
        // fixed; the observed count must not decrease.
        let mut p = WorldParams::fig3b();
        p.n_persons = 20_000;
        let cohort = simulate_cohort(&p).unwrap();
        let baseline = observed_cohort(&cohort, &p.encounters).len();
        let mut earlier = cohort.clone();
        for t in earlier.iter_mut() {
            let end = t.end_week as i32;
            let mut moved: Vec<Encounter> = Vec::new();
            for e in &t.encounters {
                let mut e = *e;
                if matches!(
                    e.kind,
                    EncounterKind::PregnancyTest | EncounterKind::PrenatalVisit
                ) {
                    e.week = (e.week - 2).max(4);
                }
                if e.week <= end {
                    moved.push(e);
                }
            }
            moved.sort_by_key(|e| (e.week, e.kind));
            moved.dedup_by_key(|e| e.week);
            t.encounters = moved;
        }
        let shifted = observed_cohort(&earlier, &p.encounters).len();
        assert!(
            shifted >= baseline,
            "earlier recognition lost records: {shifted} < {baseline}"
        );
    }

    #[test]
    fn prenatal_timing_calibration_smoke() {
        // Small-n version of the calibration check (the acceptance suite
        // runs it at full size).
        let mut p = WorldParams::fig3a();
        p.n_persons = 30_000;
        let cohort = simulate_cohort(&p).unwrap();
        let survivors: Vec<_> = cohort.iter().filter(|t| !t.lost()).collect();
        let no_care = survivors
            .iter()
            .filter(|t| t.first_prenatal_visit_week().is_none())
            .count() as f64
            / survivors.len() as f64;
        let late = survivors
            .iter()
            .filter(|t| t.first_prenatal_visit_week().map_or(false, |w| w > 12))
            .count() as f64
            / survivors.len() as f64;
        assert!((no_care - 0.11).abs() < 0.015, "no_care={no_care}");
        assert!((late - 0.15).abs() < 0.015, "late={late}");
    }
}
