//! EHR data model, bit-exact file formats, the synthetic-cohort
//! generator with planted causal and DDI structure, the fallback
//! conditional-contrast effect estimator, and deterministic splitting.

mod effects;
mod io;
mod split;
mod synth;
mod types;

pub use effects::{estimate_effects, estimate_med_effects};
pub use io::{load_dataset, load_rules, save_dataset, save_rules};
pub use split::{bootstrap_samples, split_dataset};
pub use synth::{generate_synthetic, SyntheticData};
pub use types::{
    CausalEffectMatrix, DdiMatrix, PatientRecord, Rule, RuleTable, SyntheticSpec, Visit,
    Vocabularies,
};
