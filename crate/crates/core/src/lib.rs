//! Core engine: structural pregnancy-cohort simulation, observational
//! projection, graph identifiability checks, trial-design construction,
//! and effect estimation, plus the Monte Carlo oracle that benchmarks
//! every design against ground truth.

pub mod dag;
pub mod design;
pub mod error;
pub mod estimate;
pub mod observe;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod scm;
pub mod tabular;

pub use dag::{catalog_graph, check_identifiable, d_separated, figure3_catalog, Dag, GraphEstimand, IdentifiabilityVerdict};
pub use design::{build_cohort, immortal_time, parse_protocol, protocol_by_name, AnalyticCohort, AnchorKind, CohortPerson, Contrast, DesignSpec, ProtocolSpec, StrategyRule, TerminalKind};
pub use error::{Error, Result};
pub use estimate::{aalen_johansen, censor_weights, clone_expand, cuminc_competing, estimate_effect, fit_logistic, ipw_weights, CumIncCurve, EffectEstimate, EffectMethod, EffectScale, EstimateOptions, LogisticFit};
pub use observe::{EndType, ObservedRecord};
pub use oracle::{bias_table, oracle_effect, BiasTable, OracleEstimand, OracleKind, OracleTruth, TargetPopulation};
pub use params::{EncounterParams, PrePregnancyParams, Scenario, WorldParams};
pub use scm::{Encounter, EncounterKind, Trajectory, TreatmentOverride};
