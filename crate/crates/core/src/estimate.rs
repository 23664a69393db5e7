//! Analysis plans: IRLS-fitted logistic models, stabilized inverse
//! probability weights, clone-censor-weight per-protocol estimation, and
//! discrete-time competing-risk cumulative incidence, with person-level
//! percentile-bootstrap intervals.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::design::{AnalyticCohort, CohortPerson, ProtocolSpec, TerminalKind};
use crate::error::{Error, Result};
use crate::params::expit;
use crate::rng::task_stream;

// ---------------------------------------------------------------------
// Weighted logistic regression (IRLS / Newton)
// ---------------------------------------------------------------------

pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 50;
/// Coefficient magnitude beyond which we call the fit separated.
const SEPARATION_BOUND: f64 = 30.0;
const POSITIVITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl LogisticFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let eta: f64 = row
            .iter()
            .zip(&self.coefficients)
            .map(|(x, b)| x * b)
            .sum();
        expit(eta)
    }
}

/// Maximum-likelihood weighted logistic regression by Newton scoring.
/// Responses must be 0/1; weights nonnegative. Rank-deficient designs are
/// a structural error; separation is flagged as non-convergence, never
/// returned silently as a converged fit.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
) -> Result<LogisticFit> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(Error::Numerical(format!(
            "response length {} does not match {} design rows",
            y.len(),
            n
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Numerical("weight length mismatch".into()));
        }
        if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Numerical("weights must be finite and nonnegative".into()));
        }
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Numerical("responses must be binary".into()));
    }
    let w_of = |i: usize| weights.map_or(1.0, |w| w[i]);

    let mut beta = DVector::<f64>::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=IRLS_MAX_ITER {
        iterations = iter;
        let eta = x * &beta;
        let mut score = DVector::<f64>::zeros(p);
        let mut info = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let w = w_of(i);
            if w == 0.0 {
                continue;
            }
            let mu = expit(eta[i]);
            let resid = w * (y[i] - mu);
            let fisher = w * mu * (1.0 - mu);
            for a in 0..p {
                score[a] += x[(i, a)] * resid;
                for b in a..p {
                    info[(a, b)] += fisher * x[(i, a)] * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        if score.amax() < IRLS_TOLERANCE {
            converged = true;
            break;
        }
        let chol = match Cholesky::new(info) {
            Some(c) => c,
            None if iter == 1 => {
                return Err(Error::RankDeficient(diagnose_rank(x)));
            }
            None => {
                // Information matrix collapsed mid-path: fitted
                // probabilities pinned at 0/1, i.e. separation.
                converged = false;
                break;
            }
        };
        beta += chol.solve(&score);
        if beta.amax() > SEPARATION_BOUND {
            converged = false;
            break;
        }
    }

    let eta = x * &beta;
    let mut log_likelihood = 0.0;
    for i in 0..n {
        let mu = expit(eta[i]).clamp(1e-12, 1.0 - 1e-12);
        log_likelihood += w_of(i) * (y[i] * mu.ln() + (1.0 - y[i]) * (1.0 - mu).ln());
    }
    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        converged,
        iterations,
        log_likelihood,
    })
}

fn diagnose_rank(x: &DMatrix<f64>) -> String {
    for c in 0..x.ncols() {
        let col = x.column(c);
        let first = col[0];
        if col.iter().all(|&v| (v - first).abs() < 1e-12) && c > 0 {
            return format!("column {c}");
        }
    }
    "design matrix".into()
}

// ---------------------------------------------------------------------
// Baseline inverse-probability-of-treatment weights
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize)]
pub struct WeightDiagnostics {
    pub mean_stabilized: Option<f64>,
    pub positivity_violations: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct IpwResult {
    pub weights: Vec<f64>,
    pub propensity: Vec<f64>,
    pub diagnostics: WeightDiagnostics,
}

fn covariate_value(person: &CohortPerson, name: &str) -> f64 {
    person.baseline.get(name).copied().unwrap_or(0.0)
}

/// Columns with any variation among `names`, preserving order. Constant
/// columns carry no information and would only break the design rank.
fn informative_covariates<'a>(
    persons: &[&CohortPerson],
    names: &'a [String],
    notes: &mut Vec<String>,
) -> Vec<&'a str> {
    let mut kept = Vec::new();
    for name in names {
        let first = covariate_value(persons[0], name);
        if persons
            .iter()
            .any(|p| (covariate_value(p, name) - first).abs() > 1e-12)
        {
            kept.push(name.as_str());
        } else {
            notes.push(format!("dropped constant covariate `{name}`"));
        }
    }
    kept
}

/// Stabilized (or raw) inverse-probability-of-treatment weights from a
/// logistic propensity model on baseline covariates.
pub fn ipw_weights(
    persons: &[&CohortPerson],
    confounders: &[String],
    stabilized: bool,
) -> Result<IpwResult> {
    let n = persons.len();
    if n == 0 {
        return Ok(IpwResult {
            weights: Vec::new(),
            propensity: Vec::new(),
            diagnostics: WeightDiagnostics::default(),
        });
    }
    let mut notes = Vec::new();
    let marginal = persons.iter().filter(|p| p.arm == 1).count() as f64 / n as f64;
    let kept = informative_covariates(persons, confounders, &mut notes);

    let propensity: Vec<f64> = if kept.is_empty() {
        vec![marginal; n]
    } else {
        let mut x = DMatrix::<f64>::zeros(n, kept.len() + 1);
        let mut y = Vec::with_capacity(n);
        for (i, p) in persons.iter().enumerate() {
            x[(i, 0)] = 1.0;
            for (j, name) in kept.iter().enumerate() {
                x[(i, j + 1)] = covariate_value(p, name);
            }
            y.push(p.arm as f64);
        }
        let fit = fit_logistic(&x, &y, None)?;
        if !fit.converged {
            notes.push("propensity model did not converge (possible separation)".into());
        }
        (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..x.ncols()).map(|j| x[(i, j)]).collect();
                fit.predict(&row)
            })
            .collect()
    };

    let mut positivity_violations = Vec::new();
    let mut weights = Vec::with_capacity(n);
    for (p, &ps) in persons.iter().zip(&propensity) {
        let p_assigned = if p.arm == 1 { ps } else { 1.0 - ps };
        if !(POSITIVITY_EPS..=1.0 - POSITIVITY_EPS).contains(&p_assigned) {
            let pattern: Vec<String> = kept
                .iter()
                .map(|name| format!("{name}={}", covariate_value(p, name)))
                .collect();
            positivity_violations.push(format!(
                "person {}: P(arm={}|{}) = {:.3e}",
                p.person_id,
                p.arm,
                pattern.join(","),
                p_assigned
            ));
        }
        let numerator = if stabilized {
            if p.arm == 1 {
                marginal
            } else {
                1.0 - marginal
            }
        } else {
            1.0
        };
        weights.push(numerator / p_assigned.clamp(POSITIVITY_EPS, 1.0 - POSITIVITY_EPS));
    }

    let mean_stabilized = stabilized.then(|| weights.iter().sum::<f64>() / n as f64);
    if let Some(m) = mean_stabilized {
        if (m - 1.0).abs() > 0.05 {
            notes.push(format!("mean stabilized weight {m:.4} is outside 1 +/- 0.05"));
        }
    }

    Ok(IpwResult {
        weights,
        propensity,
        diagnostics: WeightDiagnostics {
            mean_stabilized,
            positivity_violations,
            notes,
        },
    })
}

// ---------------------------------------------------------------------
// Clone-censor-weight expansion
// ---------------------------------------------------------------------

/// One replicate of one person under one strategy.
#[derive(Debug, Clone)]
pub struct ClonePerson {
    pub person_id: u64,
    /// 1 = active (continue) strategy, 0 = comparator (discontinue).
    pub strategy: u8,
    pub baseline: BTreeMap<String, f64>,
    /// Natural follow-up of the source person.
    pub natural_follow_weeks: u32,
    pub natural_terminal: TerminalKind,
    /// First week (since t0) the person's observed treatment deviates from
    /// this strategy, after the grace period. Deviation is assessed
    /// strictly before the natural terminal week.
    pub artificial_censor_week: Option<u32>,
    /// Follow-up after artificial censoring is applied.
    pub follow_weeks: u32,
    pub terminal: TerminalKind,
    /// Inverse-probability-of-censoring weight per week since t0.
    pub ipc_weight: Vec<f64>,
}

/// Person-week long format for export and inspection.
#[derive(Debug, Clone, Serialize)]
pub struct CloneRow {
    pub person_id: u64,
    pub replicate_strategy: u8,
    pub week_since_t0: u32,
    pub deviated: bool,
    pub artificial_censor_week: Option<u32>,
    pub ipc_weight: f64,
}

#[derive(Debug, Clone)]
pub struct CloneSet {
    pub clones: Vec<ClonePerson>,
    pub grace_period_weeks: u32,
}

impl CloneSet {
    pub fn rows(&self) -> Vec<CloneRow> {
        let mut rows = Vec::new();
        for c in &self.clones {
            for w in 0..=c.follow_weeks {
                rows.push(CloneRow {
                    person_id: c.person_id,
                    replicate_strategy: c.strategy,
                    week_since_t0: w,
                    deviated: c.artificial_censor_week.is_some(),
                    artificial_censor_week: c.artificial_censor_week,
                    ipc_weight: c.ipc_weight[w as usize],
                });
            }
        }
        rows
    }

    pub fn person_weeks(&self) -> u64 {
        self.clones.iter().map(|c| c.follow_weeks as u64 + 1).sum()
    }
}

fn expand_person(person: &CohortPerson, grace: u32) -> [ClonePerson; 2] {
    [0u8, 1u8].map(|strategy| {
        let target = strategy == 1;
        let mut censor = None;
        // Deviation opportunities start after the grace period and end
        // before the terminal week.
        let mut w = grace + 1;
        while w < person.follow_weeks {
            if person.weekly_treatment[w as usize] != target {
                censor = Some(w);
                break;
            }
            w += 1;
        }
        let (follow_weeks, terminal) = match censor {
            Some(cw) => (cw, TerminalKind::Censored),
            None => (person.follow_weeks, person.terminal),
        };
        ClonePerson {
            person_id: person.person_id,
            strategy,
            baseline: person.baseline.clone(),
            natural_follow_weeks: person.follow_weeks,
            natural_terminal: person.terminal,
            artificial_censor_week: censor,
            follow_weeks,
            terminal,
            ipc_weight: vec![1.0; follow_weeks as usize + 1],
        }
    })
}

/// Duplicate every person under both strategies, censoring each replicate
/// at its first post-grace deviation.
pub fn clone_expand(cohort: &AnalyticCohort, protocol: &ProtocolSpec) -> CloneSet {
    let grace = protocol.grace_period_weeks();
    let mut clones = Vec::with_capacity(cohort.persons.len() * 2);
    for person in &cohort.persons {
        clones.extend(expand_person(person, grace));
    }
    CloneSet {
        clones,
        grace_period_weeks: grace,
    }
}

fn clone_expand_slice(persons: &[&CohortPerson], grace: u32) -> Vec<ClonePerson> {
    let mut clones = Vec::with_capacity(persons.len() * 2);
    for person in persons {
        clones.extend(expand_person(person, grace));
    }
    clones
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CensorDiagnostics {
    pub truncated_weights: usize,
    pub truncation_threshold: Option<f64>,
    pub notes: Vec<String>,
}

/// Fit pooled-over-weeks censoring models (one per strategy) and populate
/// cumulative inverse-probability-of-remaining-uncensored weights.
pub fn censor_weights(
    clones: &mut Vec<ClonePerson>,
    grace: u32,
    covariates: &[String],
    truncation_pct: f64,
) -> Result<CensorDiagnostics> {
    let mut diag = CensorDiagnostics::default();

    for strategy in [0u8, 1u8] {
        // Risk rows: clone-weeks where artificial censoring could strike.
        let mut rows: Vec<(usize, u32, f64)> = Vec::new(); // (clone idx, week, censored)
        for (ci, c) in clones.iter().enumerate() {
            if c.strategy != strategy {
                continue;
            }
            let last_at_risk = match c.artificial_censor_week {
                Some(cw) => cw,
                None => c.natural_follow_weeks.saturating_sub(1),
            };
            let mut w = grace + 1;
            while w <= last_at_risk && w < c.natural_follow_weeks {
                let censored_here = c.artificial_censor_week == Some(w);
                rows.push((ci, w, censored_here as u8 as f64));
                w += 1;
            }
        }
        let n_censored = rows.iter().filter(|(_, _, c)| *c == 1.0).count();
        if rows.is_empty() || n_censored == 0 || n_censored == rows.len() {
            diag.notes.push(format!(
                "strategy {strategy}: degenerate censoring ({} risk rows, {} censored); weights left at 1",
                rows.len(),
                n_censored
            ));
            continue;
        }

        // Design: intercept + configured covariates ("week" is the
        // within-follow-up week index; other names resolve at baseline).
        let clone_refs: Vec<&ClonePerson> = rows.iter().map(|(ci, _, _)| &clones[*ci]).collect();
        let mut named: Vec<&str> = Vec::new();
        for name in covariates {
            if name == "week" {
                named.push("week");
                continue;
            }
            let first = clone_refs[0].baseline.get(name).copied().unwrap_or(0.0);
            let varies = clone_refs
                .iter()
                .any(|c| (c.baseline.get(name).copied().unwrap_or(0.0) - first).abs() > 1e-12);
            if varies {
                named.push(name.as_str());
            } else {
                diag.notes
                    .push(format!("strategy {strategy}: dropped constant censor term `{name}`"));
            }
        }
        let p = named.len() + 1;
        let mut x = DMatrix::<f64>::zeros(rows.len(), p);
        let mut y = Vec::with_capacity(rows.len());
        for (ri, (ci, w, censored)) in rows.iter().enumerate() {
            x[(ri, 0)] = 1.0;
            for (j, name) in named.iter().enumerate() {
                x[(ri, j + 1)] = if *name == "week" {
                    *w as f64
                } else {
                    clones[*ci].baseline.get(*name).copied().unwrap_or(0.0)
                };
            }
            y.push(*censored);
        }
        let fit = fit_logistic(&x, &y, None)?;
        if !fit.converged {
            diag.notes.push(format!(
                "strategy {strategy}: censoring model flagged non-convergence; weights truncated"
            ));
        }

        // Cumulative product of inverse remaining-uncensored probabilities.
        let hazards: Vec<f64> = (0..rows.len())
            .map(|ri| {
                let row: Vec<f64> = (0..p).map(|j| x[(ri, j)]).collect();
                fit.predict(&row)
            })
            .collect();
        let mut hazard_by_clone: BTreeMap<usize, Vec<(u32, f64)>> = BTreeMap::new();
        for (ri, (ci, w, _)) in rows.iter().enumerate() {
            hazard_by_clone.entry(*ci).or_default().push((*w, hazards[ri]));
        }
        for (ci, weeks) in hazard_by_clone {
            let c = &mut clones[ci];
            let mut cumulative = 1.0;
            let mut by_week: BTreeMap<u32, f64> = BTreeMap::new();
            for (w, h) in weeks {
                cumulative /= (1.0 - h).max(POSITIVITY_EPS);
                by_week.insert(w, cumulative);
            }
            let mut current = 1.0;
            for w in 0..=c.follow_weeks {
                if let Some(&cw) = by_week.get(&w) {
                    current = cw;
                }
                c.ipc_weight[w as usize] = current;
            }
        }
    }

    // Truncation at the configured percentile of all populated weights.
    let mut all: Vec<f64> = clones
        .iter()
        .flat_map(|c| c.ipc_weight.iter().copied())
        .collect();
    if !all.is_empty() {
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((truncation_pct / 100.0) * (all.len() as f64 - 1.0)).round() as usize;
        let threshold = all[idx.min(all.len() - 1)];
        let mut truncated = 0usize;
        for c in clones.iter_mut() {
            for w in c.ipc_weight.iter_mut() {
                if *w > threshold {
                    *w = threshold;
                    truncated += 1;
                }
            }
        }
        diag.truncation_threshold = Some(threshold);
        diag.truncated_weights = truncated;
        if truncated > 0 {
            diag.notes.push(format!(
                "truncated {truncated} clone-week weights at the {truncation_pct} percentile ({threshold:.4})"
            ));
        }
    }
    Ok(diag)
}

// ---------------------------------------------------------------------
// Discrete-time competing-risk cumulative incidence (Aalen-Johansen)
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WeeklyCounts {
    pub at_risk: f64,
    pub events: f64,
    pub competing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumIncCurve {
    pub cif_event: Vec<f64>,
    pub cif_competing: Vec<f64>,
    pub survival: Vec<f64>,
}

impl CumIncCurve {
    pub fn final_event_risk(&self) -> f64 {
        self.cif_event.last().copied().unwrap_or(0.0)
    }

    pub fn final_competing_risk(&self) -> f64 {
        self.cif_competing.last().copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.cif_event.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cif_event.is_empty()
    }
}

/// Weekly cause-specific hazards folded into cumulative incidence:
/// `CIF_event(t) = sum_{k<=t} h_event(k) * S(k-1)`, with
/// `CIF_event + CIF_competing + S = 1` identically.
pub fn aalen_johansen(counts: &[WeeklyCounts]) -> CumIncCurve {
    let mut survival = 1.0;
    let mut cif_event = 0.0;
    let mut cif_competing = 0.0;
    let mut curve = CumIncCurve {
        cif_event: Vec::with_capacity(counts.len()),
        cif_competing: Vec::with_capacity(counts.len()),
        survival: Vec::with_capacity(counts.len()),
    };
    for c in counts {
        let (h_event, h_competing) = if c.at_risk > 0.0 {
            (c.events / c.at_risk, c.competing / c.at_risk)
        } else {
            (0.0, 0.0)
        };
        cif_event += survival * h_event;
        cif_competing += survival * h_competing;
        survival *= 1.0 - h_event - h_competing;
        curve.cif_event.push(cif_event);
        curve.cif_competing.push(cif_competing);
        curve.survival.push(survival);
    }
    curve
}

/// Person-level weekly counts with one constant weight per person.
fn person_counts(
    persons: &[&CohortPerson],
    weights: &[f64],
    horizon: u32,
) -> Vec<WeeklyCounts> {
    let mut counts = vec![WeeklyCounts::default(); horizon as usize + 1];
    for (p, &w) in persons.iter().zip(weights) {
        for week in 0..=p.follow_weeks.min(horizon) {
            counts[week as usize].at_risk += w;
        }
        if p.follow_weeks <= horizon {
            match p.terminal {
                TerminalKind::Event => counts[p.follow_weeks as usize].events += w,
                TerminalKind::CompetingEvent => {
                    counts[p.follow_weeks as usize].competing += w
                }
                TerminalKind::Censored => {}
            }
        }
    }
    counts
}

/// Clone-level weekly counts with time-varying censoring weights.
fn clone_counts(clones: &[&ClonePerson], horizon: u32) -> Vec<WeeklyCounts> {
    let mut counts = vec![WeeklyCounts::default(); horizon as usize + 1];
    for c in clones {
        for week in 0..=c.follow_weeks.min(horizon) {
            counts[week as usize].at_risk += c.ipc_weight[week as usize];
        }
        if c.follow_weeks <= horizon {
            let w = c.ipc_weight[c.follow_weeks as usize];
            match c.terminal {
                TerminalKind::Event => counts[c.follow_weeks as usize].events += w,
                TerminalKind::CompetingEvent => counts[c.follow_weeks as usize].competing += w,
                TerminalKind::Censored => {}
            }
        }
    }
    counts
}

/// Weekly cumulative incidence of the outcome and of the competing loss
/// for one cohort arm, unweighted.
pub fn cuminc_competing(persons: &[&CohortPerson]) -> CumIncCurve {
    let horizon = persons.iter().map(|p| p.follow_weeks).max().unwrap_or(0);
    let weights = vec![1.0; persons.len()];
    aalen_johansen(&person_counts(persons, &weights, horizon))
}

// ---------------------------------------------------------------------
// Effect estimation
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMethod {
    IttAnalog,
    PerProtocol,
}

impl EffectMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EffectMethod::IttAnalog => "itt_analog",
            EffectMethod::PerProtocol => "per_protocol",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectScale {
    RiskDifference,
    RiskRatio,
}

impl EffectScale {
    pub fn as_str(self) -> &'static str {
        match self {
            EffectScale::RiskDifference => "risk_difference",
            EffectScale::RiskRatio => "risk_ratio",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectEstimate {
    pub estimand: EffectMethod,
    pub scale: EffectScale,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_persons: usize,
    pub n_events: usize,
    pub risk_active: f64,
    pub risk_comparator: f64,
    pub method_tag: String,
    pub stratum: Option<String>,
    pub oracle_truth: Option<f64>,
    pub bias: Option<f64>,
    pub ratio_undefined: bool,
    pub notes: Vec<String>,
}

impl EffectEstimate {
    pub fn with_truth(mut self, truth: f64) -> Self {
        self.oracle_truth = Some(truth);
        self.bias = Some(self.point - truth);
        self
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    /// Person-level percentile bootstrap resamples; 0 disables intervals.
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            bootstrap_resamples: 500,
            seed: 0,
        }
    }
}

struct ArmRisks {
    active: f64,
    comparator: f64,
    notes: Vec<String>,
}

fn itt_risks(persons: &[&CohortPerson], confounders: &[String]) -> Result<ArmRisks> {
    let ipw = ipw_weights(persons, confounders, true)?;
    let horizon = persons.iter().map(|p| p.follow_weeks).max().unwrap_or(0);
    let mut risks = [0.0f64; 2];
    for arm in [0usize, 1usize] {
        let sel: Vec<&CohortPerson> = persons
            .iter()
            .zip(&ipw.weights)
            .filter(|(p, _)| p.arm as usize == arm)
            .map(|(p, _)| *p)
            .collect();
        let w: Vec<f64> = persons
            .iter()
            .zip(&ipw.weights)
            .filter(|(p, _)| p.arm as usize == arm)
            .map(|(_, w)| *w)
            .collect();
        risks[arm] = aalen_johansen(&person_counts(&sel, &w, horizon)).final_event_risk();
    }
    let mut notes = ipw.diagnostics.notes;
    if !ipw.diagnostics.positivity_violations.is_empty() {
        notes.push(format!(
            "{} positivity violations",
            ipw.diagnostics.positivity_violations.len()
        ));
    }
    Ok(ArmRisks {
        active: risks[1],
        comparator: risks[0],
        notes,
    })
}

fn pp_risks(
    persons: &[&CohortPerson],
    grace: u32,
    censor_covariates: &[String],
    truncation_pct: f64,
) -> Result<ArmRisks> {
    let mut clones = clone_expand_slice(persons, grace);
    let diag = censor_weights(&mut clones, grace, censor_covariates, truncation_pct)?;
    let horizon = clones.iter().map(|c| c.follow_weeks).max().unwrap_or(0);
    let active: Vec<&ClonePerson> = clones.iter().filter(|c| c.strategy == 1).collect();
    let comparator: Vec<&ClonePerson> = clones.iter().filter(|c| c.strategy == 0).collect();
    Ok(ArmRisks {
        active: aalen_johansen(&clone_counts(&active, horizon)).final_event_risk(),
        comparator: aalen_johansen(&clone_counts(&comparator, horizon)).final_event_risk(),
        notes: diag.notes,
    })
}

fn risks_for(
    persons: &[&CohortPerson],
    protocol: &ProtocolSpec,
    method: EffectMethod,
) -> Result<ArmRisks> {
    match method {
        EffectMethod::IttAnalog => {
            itt_risks(persons, &protocol.assignment.baseline_confounders)
        }
        EffectMethod::PerProtocol => pp_risks(
            persons,
            protocol.grace_period_weeks(),
            &protocol.analysis.censor_model_covariates,
            protocol.analysis.weight_truncation_pct,
        ),
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = (q * (sorted.len() as f64 - 1.0)).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Estimate the protocol's effect on the given cohort. Returns risk
/// difference and risk ratio records, one pair per stratum when the
/// protocol stratifies by prior use. The bootstrap resamples persons (both
/// clones of a person travel together by construction).
pub fn estimate_effect(
    cohort: &AnalyticCohort,
    protocol: &ProtocolSpec,
    method: EffectMethod,
    opts: &EstimateOptions,
) -> Result<Vec<EffectEstimate>> {
    let strata: Vec<(Option<String>, Vec<&CohortPerson>)> = if protocol.stratify_by_prior_use() {
        let (users, nonusers): (Vec<&CohortPerson>, Vec<&CohortPerson>) = cohort
            .persons
            .iter()
            .partition(|p| covariate_value(p, "prepreg_user") > 0.5);
        vec![
            (Some("prior_users".to_string()), users),
            (Some("non_users".to_string()), nonusers),
        ]
    } else {
        vec![(None, cohort.persons.iter().collect())]
    };

    let mut out = Vec::new();
    for (stratum, persons) in strata {
        if persons.is_empty() {
            continue;
        }
        if persons.iter().all(|p| p.arm == 1) || persons.iter().all(|p| p.arm == 0) {
            return Err(Error::Numerical(format!(
                "stratum {stratum:?} has a single treatment arm; contrast undefined"
            )));
        }
        let point = risks_for(&persons, protocol, method)?;
        let n_events = persons
            .iter()
            .filter(|p| p.terminal == TerminalKind::Event)
            .count();

        // Percentile bootstrap over persons.
        let b = opts.bootstrap_resamples;
        let (rd_ci, rr_ci, rr_undefined_boots) = if b == 0 {
            let rd = point.active - point.comparator;
            let rr = point.active / point.comparator;
            ((rd, rd), (rr, rr), 0)
        } else {
            let n = persons.len();
            let draws: Vec<(f64, Option<f64>)> = (0..b)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = task_stream(opts.seed, 0xB007, rep as u64);
                    let sample: Vec<&CohortPerson> =
                        (0..n).map(|_| persons[rng.gen_range(0..n)]).collect();
                    match risks_for(&sample, protocol, method) {
                        Ok(r) => {
                            let rd = r.active - r.comparator;
                            let rr = (r.comparator > 0.0).then(|| r.active / r.comparator);
                            (rd, rr)
                        }
                        Err(_) => (f64::NAN, None),
                    }
                })
                .collect();
            let mut rds: Vec<f64> =
                draws.iter().map(|(rd, _)| *rd).filter(|v| v.is_finite()).collect();
            rds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut rrs: Vec<f64> = draws
                .iter()
                .filter_map(|(_, rr)| *rr)
                .filter(|v| v.is_finite())
                .collect();
            rrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let undefined = b - rrs.len();
            (
                (percentile(&rds, 0.025), percentile(&rds, 0.975)),
                (percentile(&rrs, 0.025), percentile(&rrs, 0.975)),
                undefined,
            )
        };

        let method_tag = format!(
            "{}/{}/{}",
            cohort.anchor.as_str(),
            protocol.name,
            method.as_str()
        );
        let rd_point = point.active - point.comparator;
        let mut notes = point.notes.clone();
        if b > 0 {
            notes.push(format!("{b} bootstrap resamples"));
        } else {
            notes.push("bootstrap disabled".into());
        }
        out.push(EffectEstimate {
            estimand: method,
            scale: EffectScale::RiskDifference,
            point: rd_point,
            ci_low: rd_ci.0.min(rd_point),
            ci_high: rd_ci.1.max(rd_point),
            n_persons: persons.len(),
            n_events,
            risk_active: point.active,
            risk_comparator: point.comparator,
            method_tag: method_tag.clone(),
            stratum: stratum.clone(),
            oracle_truth: None,
            bias: None,
            ratio_undefined: false,
            notes: notes.clone(),
        });

        let ratio_undefined = point.comparator <= 0.0;
        let rr_point = if ratio_undefined {
            f64::NAN
        } else {
            point.active / point.comparator
        };
        if rr_undefined_boots > 0 {
            notes.push(format!(
                "{rr_undefined_boots} bootstrap resamples had an empty comparator risk"
            ));
        }
        out.push(EffectEstimate {
            estimand: method,
            scale: EffectScale::RiskRatio,
            point: rr_point,
            ci_low: if ratio_undefined { f64::NAN } else { rr_ci.0.min(rr_point) },
            ci_high: if ratio_undefined { f64::NAN } else { rr_ci.1.max(rr_point) },
            n_persons: persons.len(),
            n_events,
            risk_active: point.active,
            risk_comparator: point.comparator,
            method_tag,
            stratum,
            oracle_truth: None,
            bias: None,
            ratio_undefined,
            notes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::AnchorKind;

    fn design_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            rows.len(),
            rows[0].len(),
            &rows.iter().flatten().copied().collect::<Vec<f64>>(),
        )
    }

    #[test]
    fn intercept_only_half_events_gives_zero() {
        let x = design_matrix(&vec![vec![1.0]; 10]);
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let fit = fit_logistic(&x, &y, None).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-10);
    }

    #[test]
    fn two_by_two_matches_closed_form_log_odds_ratio() {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (x1, events, total) in [(1.0, 40, 100), (0.0, 20, 100)] {
            for i in 0..total {
                rows.push(vec![1.0, x1]);
                y.push((i < events) as u8 as f64);
            }
        }
        let fit = fit_logistic(&design_matrix(&rows), &y, None).unwrap();
        let expected = ((40.0 * 80.0) / (60.0 * 20.0) as f64).ln();
        assert!(fit.converged);
        assert!(
            (fit.coefficients[1] - expected).abs() < 1e-6,
            "slope {} vs {}",
            fit.coefficients[1],
            expected
        );
        let intercept_expected = (20.0f64 / 80.0).ln();
        assert!((fit.coefficients[0] - intercept_expected).abs() < 1e-6);
    }

    #[test]
    fn doubling_weights_leaves_coefficients_unchanged() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![1.0, (i as f64 / 10.0).sin(), (i % 5) as f64])
            .collect();
        let y: Vec<f64> = (0..40).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let w1 = vec![1.0; 40];
        let w2 = vec![2.0; 40];
        let x = design_matrix(&rows);
        let a = fit_logistic(&x, &y, Some(&w1)).unwrap();
        let b = fit_logistic(&x, &y, Some(&w2)).unwrap();
        for (ca, cb) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((ca - cb).abs() < 1e-9);
        }
    }

    #[test]
    fn separation_is_flagged_not_silent() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, i as f64 - 9.5]).collect();
        let y: Vec<f64> = (0..20).map(|i| (i >= 10) as u8 as f64).collect();
        let fit = fit_logistic(&design_matrix(&rows), &y, None).unwrap();
        assert!(!fit.converged, "perfectly separated fit reported converged");
    }

    #[test]
    fn rank_deficiency_is_a_structural_error() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![1.0, i as f64, i as f64])
            .collect();
        let y: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        assert!(matches!(
            fit_logistic(&design_matrix(&rows), &y, None),
            Err(Error::RankDeficient(_))
        ));
    }

    fn synth_person(
        id: u64,
        arm: u8,
        follow: u32,
        terminal: TerminalKind,
        stratum: f64,
        adherent: bool,
    ) -> CohortPerson {
        let mut baseline = BTreeMap::new();
        baseline.insert("prepreg_user".into(), 0.0);
        baseline.insert("stratum".into(), stratum);
        let state = if adherent { arm == 1 } else { arm != 1 };
        CohortPerson {
            person_id: id,
            t0_week: 8,
            arm,
            baseline,
            weekly_treatment: vec![state; follow as usize + 1],
            follow_weeks: follow,
            terminal,
            immortal_weeks: 0,
        }
    }

    #[test]
    fn single_stratum_stabilized_weights_are_one() {
        let persons: Vec<CohortPerson> = (0..100)
            .map(|i| {
                synth_person(
                    i,
                    (i % 2) as u8,
                    10,
                    TerminalKind::Censored,
                    0.0,
                    true,
                )
            })
            .collect();
        let refs: Vec<&CohortPerson> = persons.iter().collect();
        let ipw = ipw_weights(&refs, &[], true).unwrap();
        assert!(ipw.weights.iter().all(|w| (w - 1.0).abs() < 1e-12));
        assert!((ipw.diagnostics.mean_stabilized.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_strata_weights_are_reciprocal_propensities() {
        // Stratum A: P(arm=1) = 0.8; stratum B: 0.2. Saturated model
        // recovers these exactly, so unstabilized weights are their
        // reciprocals.
        let mut persons = Vec::new();
        let mut id = 0;
        for (stratum, p_treat) in [(0.0, 0.8), (1.0, 0.2)] {
            for i in 0..100 {
                let arm = (i as f64) < p_treat * 100.0;
                persons.push(synth_person(
                    id,
                    arm as u8,
                    10,
                    TerminalKind::Censored,
                    stratum,
                    true,
                ));
                id += 1;
            }
        }
        let refs: Vec<&CohortPerson> = persons.iter().collect();
        let ipw = ipw_weights(&refs, &["stratum".to_string()], false).unwrap();
        for (p, w) in refs.iter().zip(&ipw.weights) {
            let stratum = p.baseline["stratum"];
            let propensity = if stratum == 0.0 { 0.8 } else { 0.2 };
            let expected = if p.arm == 1 {
                1.0 / propensity
            } else {
                1.0 / (1.0 - propensity)
            };
            assert!((w - expected).abs() < 1e-6, "{w} vs {expected}");
        }
    }

    #[test]
    fn clone_expansion_doubles_eligible_persons() {
        let persons: Vec<CohortPerson> = (0..50)
            .map(|i| synth_person(i, (i % 2) as u8, 12, TerminalKind::Censored, 0.0, true))
            .collect();
        let cohort = AnalyticCohort {
            anchor: AnchorKind::FirstPrenatalVisit,
            strategy_names: ["STOP".into(), "GO".into()],
            grace_period_weeks: 4,
            persons,
            excluded: 0,
        };
        let protocol = crate::design::protocol_by_name("stop_or_go").unwrap();
        let clones = clone_expand(&cohort, &protocol);
        assert_eq!(clones.clones.len(), 100);
        assert!(clones.person_weeks() <= 2 * 50 * 13);
    }

    #[test]
    fn always_treated_person_censors_the_discontinue_replicate() {
        let person = synth_person(1, 1, 20, TerminalKind::Censored, 0.0, true);
        let [stop, go] = expand_person(&person, 4);
        assert_eq!(go.strategy, 1);
        assert!(go.artificial_censor_week.is_none());
        assert_eq!(stop.strategy, 0);
        assert_eq!(stop.artificial_censor_week, Some(5)); // grace + 1
        assert_eq!(stop.follow_weeks, 5);
        assert_eq!(stop.terminal, TerminalKind::Censored);
    }

    #[test]
    fn clone_bookkeeping_bounds_person_weeks() {
        let mut persons = Vec::new();
        for i in 0..40 {
            // Half adhere to their arm, half deviate.
            persons.push(synth_person(
                i,
                (i % 2) as u8,
                15,
                TerminalKind::Censored,
                0.0,
                i % 4 < 2,
            ));
        }
        let source_weeks: u64 = persons.iter().map(|p| p.follow_weeks as u64 + 1).sum();
        let cohort = AnalyticCohort {
            anchor: AnchorKind::FirstPrenatalVisit,
            strategy_names: ["STOP".into(), "GO".into()],
            grace_period_weeks: 4,
            persons,
            excluded: 0,
        };
        let protocol = crate::design::protocol_by_name("stop_or_go").unwrap();
        let clones = clone_expand(&cohort, &protocol);
        assert!(clones.person_weeks() < 2 * source_weeks);
    }

    #[test]
    fn no_artificial_censoring_leaves_unit_weights() {
        // Everyone adheres to both... impossible; instead: no deviation
        // window (events during grace) so no clone is ever censored.
        let persons: Vec<CohortPerson> = (0..30)
            .map(|i| synth_person(i, (i % 2) as u8, 3, TerminalKind::Event, 0.0, true))
            .collect();
        let refs: Vec<&CohortPerson> = persons.iter().collect();
        let mut clones = clone_expand_slice(&refs, 4);
        let diag = censor_weights(&mut clones, 4, &["week".to_string()], 99.0).unwrap();
        assert!(clones
            .iter()
            .all(|c| c.ipc_weight.iter().all(|w| (w - 1.0).abs() < 1e-12)));
        assert!(!diag.notes.is_empty());
    }

    #[test]
    fn deterministic_stratum_censoring_engages_truncation() {
        let mut persons = Vec::new();
        for i in 0..200 {
            let stratum = (i % 2) as f64;
            // Stratum 1 persons always deviate from the continue strategy.
            let adherent = stratum == 0.0;
            persons.push(synth_person(i, 1, 20, TerminalKind::Censored, stratum, adherent));
            persons.push(synth_person(
                i + 1000,
                0,
                20,
                TerminalKind::Censored,
                stratum,
                stratum == 1.0,
            ));
        }
        let refs: Vec<&CohortPerson> = persons.iter().collect();
        let mut clones = clone_expand_slice(&refs, 2);
        let diag =
            censor_weights(&mut clones, 2, &["stratum".to_string()], 90.0).unwrap();
        assert!(diag.truncated_weights > 0, "{diag:?}");
        assert!(diag.truncation_threshold.unwrap() >= 1.0);
    }

    #[test]
    fn one_week_hazards_compose_exactly() {
        let counts = [WeeklyCounts { at_risk: 10.0, events: 1.0, competing: 2.0 }];
        let curve = aalen_johansen(&counts);
        assert!((curve.cif_event[0] - 0.1).abs() < 1e-15);
        assert!((curve.cif_competing[0] - 0.2).abs() < 1e-15);
        assert!((curve.survival[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn no_competing_events_reduces_to_one_minus_km() {
        let persons: Vec<CohortPerson> = (0..60)
            .map(|i| {
                let terminal = if i % 3 == 0 {
                    TerminalKind::Event
                } else {
                    TerminalKind::Censored
                };
                synth_person(i, (i % 2) as u8, 4 + (i % 7) as u32, terminal, 0.0, true)
            })
            .collect();
        let refs: Vec<&CohortPerson> = persons.iter().collect();
        let curve = cuminc_competing(&refs);
        // Independent Kaplan-Meier on the same weekly grid.
        let horizon = refs.iter().map(|p| p.follow_weeks).max().unwrap();
        let mut km = 1.0;
        for w in 0..=horizon {
            let at_risk = refs.iter().filter(|p| p.follow_weeks >= w).count() as f64;
            let events = refs
                .iter()
                .filter(|p| p.follow_weeks == w && p.terminal == TerminalKind::Event)
                .count() as f64;
            if at_risk > 0.0 {
                km *= 1.0 - events / at_risk;
            }
            let expected = 1.0 - km;
            assert!((curve.cif_event[w as usize] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn cif_closure_holds_to_1e12() {
        let counts: Vec<WeeklyCounts> = (0..40)
            .map(|w| WeeklyCounts {
                at_risk: 500.0 - w as f64 * 7.3,
                events: 3.0 + (w % 5) as f64,
                competing: 2.0 + (w % 3) as f64,
            })
            .collect();
        let curve = aalen_johansen(&counts);
        for i in 0..curve.len() {
            let total = curve.cif_event[i] + curve.cif_competing[i] + curve.survival[i];
            assert!((total - 1.0).abs() < 1e-12, "week {i}: {total}");
        }
    }

    #[test]
    fn per_protocol_equals_crude_without_deviation() {
        // Uniform follow-up (no mid-stream censoring), unit weights, all
        // events after the grace window, and full adherence: the reduction
        // to the crude contrast must be exact.
        let mut persons = Vec::new();
        for i in 0..80 {
            let arm = (i % 2) as u8;
            let terminal = if i % 5 == 0 {
                TerminalKind::Event
            } else {
                TerminalKind::Censored
            };
            persons.push(synth_person(i, arm, 12, terminal, 0.0, true));
        }
        let cohort = AnalyticCohort {
            anchor: AnchorKind::FirstPrenatalVisit,
            strategy_names: ["STOP".into(), "GO".into()],
            grace_period_weeks: 4,
            persons,
            excluded: 0,
        };
        let protocol = crate::design::protocol_by_name("stop_or_go").unwrap();
        let opts = EstimateOptions { bootstrap_resamples: 0, seed: 1 };
        let itt = estimate_effect(&cohort, &protocol, EffectMethod::IttAnalog, &opts).unwrap();
        let pp = estimate_effect(&cohort, &protocol, EffectMethod::PerProtocol, &opts).unwrap();
        // Crude contrast computed directly.
        let risk = |arm: u8| {
            let members: Vec<&CohortPerson> = cohort.persons.iter().filter(|p| p.arm == arm).collect();
            let events = members
                .iter()
                .filter(|p| p.terminal == TerminalKind::Event)
                .count() as f64;
            events / members.len() as f64
        };
        let crude = risk(1) - risk(0);
        assert!((itt[0].point - crude).abs() < 1e-12, "itt {} vs {}", itt[0].point, crude);
        assert!((pp[0].point - crude).abs() < 1e-12, "pp {} vs {}", pp[0].point, crude);
    }

    #[test]
    fn zero_events_in_comparator_flags_ratio() {
        let mut persons = Vec::new();
        for i in 0..40 {
            let arm = (i % 2) as u8;
            let terminal = if arm == 1 && i % 4 == 1 {
                TerminalKind::Event
            } else {
                TerminalKind::Censored
            };
            persons.push(synth_person(i, arm, 10, terminal, 0.0, true));
        }
        let cohort = AnalyticCohort {
            anchor: AnchorKind::FirstPrenatalVisit,
            strategy_names: ["STOP".into(), "GO".into()],
            grace_period_weeks: 4,
            persons,
            excluded: 0,
        };
        let protocol = crate::design::protocol_by_name("stop_or_go").unwrap();
        let opts = EstimateOptions { bootstrap_resamples: 0, seed: 1 };
        let est = estimate_effect(&cohort, &protocol, EffectMethod::IttAnalog, &opts).unwrap();
        let rd = &est[0];
        let rr = &est[1];
        assert!(rd.point.is_finite());
        assert!(rr.ratio_undefined);
        assert!(rr.point.is_nan());
    }
}
