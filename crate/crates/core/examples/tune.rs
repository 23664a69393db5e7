//! Scratch harness for checking preset margins against the oracle.

use tzero_core::estimate::{EffectMethod, EstimateOptions};
use tzero_core::oracle::{bias_table, oracle_effect, OracleEstimand, TargetPopulation};
use tzero_core::*;

fn main() {
    fig3b_margins();
    prevalent_margins();
    fig3a_recovery();
}

fn fig3b_margins() {
    let mut p = WorldParams::fig3b();
    p.n_persons = 20_000;
    let protocol = protocol_by_name("stop_or_go").unwrap();
    let estimand = OracleEstimand::decision_at_anchor(&protocol, 600_000, false);
    let truth = oracle_effect(&p, &estimand).unwrap();
    println!(
        "fig3b decision truth = {:.4} (se {:.4}), pop {}/{}",
        truth.truth, truth.mc_se, truth.n_treated, truth.mc_draws
    );
    let table = bias_table(
        &p,
        &["4a".into(), "4b".into(), "4c".into(), "4d".into(), "4e".into()],
        &protocol,
        &estimand,
        20,
        EffectMethod::IttAnalog,
    )
    .unwrap();
    for row in &table.rows {
        println!(
            "  {}: mean {:+.4} bias {:+.4} sd {:.4} se_mean {:.4} enrolled {:.0} immortal {:.0}",
            row.design,
            row.mean_estimate,
            row.bias,
            row.empirical_sd,
            row.se_mean,
            row.mean_enrolled,
            row.mean_immortal_weeks
        );
    }
    // Early estimand for 4a
    let early = OracleEstimand::early(TargetPopulation::AllConceptions, 600_000);
    let tr = oracle_effect(&p, &early).unwrap();
    println!("fig3b EARLY all-conceptions truth = {:.4} (se {:.4})", tr.truth, tr.mc_se);
}

fn prevalent_margins() {
    let mut p = WorldParams::prevalent_user();
    p.n_persons = 60_000;
    let chap = protocol_by_name("chap").unwrap();

    let truth_prev = oracle_effect(
        &p,
        &OracleEstimand::decision_at_anchor(&chap, 800_000, false).with_stratum(true),
    )
    .unwrap();
    let truth_new = oracle_effect(
        &p,
        &OracleEstimand::decision_at_anchor(&chap, 800_000, false).with_stratum(false),
    )
    .unwrap();
    println!(
        "prevalent truths: prior_users {:+.4} (se {:.4}, n {}) vs non_users {:+.4} (se {:.4}, n {})",
        truth_prev.truth,
        truth_prev.mc_se,
        truth_prev.n_treated,
        truth_new.truth,
        truth_new.mc_se,
        truth_new.n_treated
    );

    // Combined vs stratified across repeats.
    let mut combined = chap.clone();
    combined.assignment.stratify_by_prior_use = false;
    let mut sums = (vec![], vec![], vec![]);
    for rep in 0..12u64 {
        let mut world = p.clone();
        world.seed = tzero_core::rng::repeat_seed(p.seed, rep);
        let truth_cohort = scm::simulate_cohort(&world).unwrap();
        let observed = observe::observed_cohort(&truth_cohort, &world.encounters);
        let design = DesignSpec::by_name("4d", &chap).unwrap();
        let cohort = build_cohort(&observed, &design, &chap, None).unwrap();
        let opts = EstimateOptions { bootstrap_resamples: 0, seed: world.seed };
        let strat = estimate_effect(&cohort, &chap, EffectMethod::IttAnalog, &opts).unwrap();
        let comb = estimate_effect(&cohort, &combined, EffectMethod::IttAnalog, &opts).unwrap();
        let prev = strat.iter().find(|e| e.stratum.as_deref() == Some("prior_users")).unwrap();
        let new = strat.iter().find(|e| e.stratum.as_deref() == Some("non_users")).unwrap();
        sums.0.push(comb[0].point);
        sums.1.push(prev.point);
        sums.2.push(new.point);
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt();
        (m, sd / (v.len() as f64).sqrt())
    };
    let (mc, sec) = stats(&sums.0);
    let (mp, sep) = stats(&sums.1);
    let (mn, sen) = stats(&sums.2);
    println!("combined  {mc:+.4} (se {sec:.4})");
    println!("prior     {mp:+.4} (se {sep:.4})  vs truth {:+.4}", truth_prev.truth);
    println!("non_users {mn:+.4} (se {sen:.4})  vs truth {:+.4}", truth_new.truth);
    println!(
        "gap combined-vs-new = {:+.4}, needs > 2*se ~ {:.4}",
        mn - mc,
        2.0 * (sec * sec + sen * sen).sqrt()
    );
}

fn fig3a_recovery() {
    let mut p = WorldParams::fig3a();
    p.n_persons = 100_000;
    let protocol = protocol_by_name("stop_or_go").unwrap();
    let estimand = OracleEstimand::early(TargetPopulation::AllConceptions, 600_000);
    let table = bias_table(
        &p,
        &["4a".into()],
        &protocol,
        &estimand,
        10,
        EffectMethod::IttAnalog,
    )
    .unwrap();
    println!(
        "fig3a 4a: truth {:+.4} mean {:+.4} bias {:+.4} se_mean {:.5}",
        table.truth, table.rows[0].mean_estimate, table.rows[0].bias, table.rows[0].se_mean
    );
}
