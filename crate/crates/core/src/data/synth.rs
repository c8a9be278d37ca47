//! Planted-structure synthetic cohort generator.
//!
//! Latent conditions map deterministically to disjoint diagnosis and
//! procedure code blocks; a ground-truth rule table (including synergy
//! rules that require a diagnosis AND a procedure to co-occur) maps each
//! visit's codes to the indicated medication set; label noise flips
//! individual medications. The returned effect matrix and DDI matrix are
//! implied by the same rule table.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{CafeError, Result};
use crate::numerics::rng;

use super::types::{
    CausalEffectMatrix, DdiMatrix, PatientRecord, Rule, RuleTable, SyntheticSpec, Visit,
    Vocabularies,
};

/// Full generator output, including the oracle-only rule table.
pub struct SyntheticData {
    pub vocab: Vocabularies,
    pub records: Vec<PatientRecord>,
    pub tau_true: CausalEffectMatrix,
    pub ddi: DdiMatrix,
    pub rules: RuleTable,
}

struct Condition {
    diag: Vec<usize>,
    proc_: Vec<usize>,
}

/// Number of diagnosis×procedure synergy rules for a given condition count
/// (at least 2, one per adjacent condition pair otherwise). Scaling with the
/// cohort's condition count keeps the cross-modal signal present at every
/// generator scale instead of washing out in large rule tables.
fn n_synergy(n_cond: usize) -> usize {
    (n_cond - 1).max(2)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n_cond = spec.n_latent_conditions;
    if spec.n_diag < 2 * n_cond || spec.n_proc < n_cond {
        return Err(CafeError::config(format!(
            "synthetic spec: need n_diag >= {} and n_proc >= {} for {} latent conditions",
            2 * n_cond,
            n_cond,
            n_cond
        )));
    }
    if n_cond < 2 {
        return Err(CafeError::config(
            "synthetic spec: need >= 2 latent conditions for synergy rules",
        ));
    }

    let mut srng = rng::stream(spec.seed, "structure");

    // Disjoint code blocks make condition activity identifiable from codes.
    let diag_block = spec.n_diag / n_cond;
    let proc_block = spec.n_proc / n_cond;
    let mut conditions = Vec::with_capacity(n_cond);
    let mut rules = Vec::new();
    for c in 0..n_cond {
        let d0 = c * diag_block;
        let p0 = c * proc_block;
        let n_d = if diag_block >= 2 {
            srng.random_range(2..=diag_block.min(4))
        } else {
            1
        };
        let n_p = if proc_block >= 2 {
            srng.random_range(1..=proc_block.min(3))
        } else {
            1
        };
        let diag: Vec<usize> = (d0..d0 + n_d).collect();
        let proc_: Vec<usize> = (p0..p0 + n_p).collect();

        let n_m = if c == 0 {
            // at least one rule emits >= 2 meds so a DDI pair can be planted on it
            srng.random_range(2..=3)
        } else {
            srng.random_range(1..=3)
        };
        let mut meds = Vec::new();
        while meds.len() < n_m {
            let m = srng.random_range(0..spec.n_med);
            if !meds.contains(&m) {
                meds.push(m);
            }
        }
        meds.sort_unstable();
        rules.push(Rule {
            diag: diag.clone(),
            proc_: vec![],
            meds,
        });
        conditions.push(Condition { diag, proc_ });
    }

    // Synergy rules: one diagnosis from condition a AND one procedure from
    // condition b, firing only on their co-occurrence. Adjacent condition
    // pairs line up with the comorbidity bias in patient sampling below, so
    // these rules fire regularly.
    for s in 0..n_synergy(n_cond) {
        let a = s % n_cond;
        let b = (s + 1) % n_cond;
        let mut meds = Vec::new();
        let n_m = srng.random_range(2..=3);
        while meds.len() < n_m {
            let m = srng.random_range(0..spec.n_med);
            if !meds.contains(&m) {
                meds.push(m);
            }
        }
        meds.sort_unstable();
        rules.push(Rule {
            diag: vec![conditions[a].diag[0]],
            proc_: vec![conditions[b].proc_[0]],
            meds,
        });
    }
    let rules = RuleTable { rules };

    // True effect matrix implied by the rule table: antecedent code -> med.
    let vocab = spec.vocab();
    let mut tau_true = CausalEffectMatrix::zeros(vocab.n_entities(), spec.n_med);
    for rule in &rules.rules {
        for &m in &rule.meds {
            for &d in &rule.diag {
                if tau_true.get(d, m) < spec.effect_strength {
                    tau_true.set(d, m, spec.effect_strength);
                }
            }
            for &p in &rule.proc_ {
                let row = vocab.n_diag + p;
                if tau_true.get(row, m) < spec.effect_strength {
                    tau_true.set(row, m, spec.effect_strength);
                }
            }
        }
    }

    // DDI pairs: plant the first on a rule that emits >= 2 meds, then fill
    // with random distinct off-diagonal pairs.
    let mut drng = rng::stream(spec.seed, "ddi");
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let seeded = rules
        .rules
        .iter()
        .find(|r| r.meds.len() >= 2)
        .map(|r| (r.meds[0], r.meds[1]))
        .expect("condition 0 rule emits >= 2 meds");
    pairs.push((seeded.0.min(seeded.1), seeded.0.max(seeded.1)));
    while pairs.len() < spec.n_ddi_pairs {
        let a = drng.random_range(0..spec.n_med);
        let b = drng.random_range(0..spec.n_med);
        if a == b {
            continue;
        }
        let p = (a.min(b), a.max(b));
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    let ddi = DdiMatrix::new(spec.n_med, pairs)?;

    // Codes outside every condition block are incidental: they appear in
    // visits as distractors but are antecedents of no rule, so the planted
    // effect matrix is zero on them. Without distractors every observed code
    // would be causal and the causal weighting would have nothing to separate.
    let used_diag: Vec<bool> = {
        let mut v = vec![false; spec.n_diag];
        for c in &conditions {
            for &d in &c.diag {
                v[d] = true;
            }
        }
        v
    };
    let used_proc: Vec<bool> = {
        let mut v = vec![false; spec.n_proc];
        for c in &conditions {
            for &p in &c.proc_ {
                v[p] = true;
            }
        }
        v
    };
    let pool_diag: Vec<usize> = (0..spec.n_diag).filter(|&d| !used_diag[d]).collect();
    let pool_proc: Vec<usize> = (0..spec.n_proc).filter(|&p| !used_proc[p]).collect();

    // Patients: per-patient RNG substream keeps generation order-free.
    let mut records = Vec::with_capacity(spec.n_patients);
    for pid in 0..spec.n_patients {
        let mut prng = rng::substream(spec.seed, "patient", pid as u64);

        // Chronic conditions persist across every visit of this patient.
        // Comorbidity bias: a second chronic condition is usually the next
        // condition index, which co-activates the adjacent-pair synergy
        // rules planted above.
        let n_chronic = prng.random_range(1..=2.min(n_cond));
        let mut chronic: Vec<usize> = vec![prng.random_range(0..n_cond)];
        if n_chronic == 2 {
            let second = if prng.random::<f64>() < 0.5 {
                (chronic[0] + 1) % n_cond
            } else {
                prng.random_range(0..n_cond)
            };
            if second != chronic[0] {
                chronic.push(second);
            }
        }

        // shifted-geometric visit count, mean avg_visits, min 1
        let p_stop = 1.0 / spec.avg_visits;
        let mut n_visits = 1usize;
        while prng.random::<f64>() > p_stop && n_visits < 12 {
            n_visits += 1;
        }

        let mut visits = Vec::with_capacity(n_visits);
        for _ in 0..n_visits {
            let mut active = chronic.clone();
            let n_acute = prng.random_range(0..=2);
            for _ in 0..n_acute {
                let c = prng.random_range(0..n_cond);
                if !active.contains(&c) {
                    active.push(c);
                }
            }

            let mut diag = Vec::new();
            let mut proc_ = Vec::new();
            for &c in &active {
                diag.extend_from_slice(&conditions[c].diag);
                proc_.extend_from_slice(&conditions[c].proc_);
            }
            diag.sort_unstable();
            proc_.sort_unstable();
            // Rules fire on the condition-driven codes only; distractors are
            // appended afterwards so they never influence the medication set.
            let clean = rules.fire(&diag, &proc_);
            if !pool_diag.is_empty() {
                let n = prng.random_range(2..=5.min(pool_diag.len()));
                diag.extend(pool_diag.choose_multiple(&mut prng, n));
            }
            if !pool_proc.is_empty() {
                let n = prng.random_range(1..=3.min(pool_proc.len()));
                proc_.extend(pool_proc.choose_multiple(&mut prng, n));
            }
            diag.sort_unstable();
            proc_.sort_unstable();
            debug_assert!(!clean.is_empty());
            let mut med = Vec::new();
            if spec.noise_rate == 0.0 {
                med = clean.clone();
            } else {
                // Prevalence-preserving label noise: present meds drop with
                // probability noise_rate; absent meds appear with a rate scaled
                // by the set's prevalence so expected additions match expected
                // deletions. A flat per-bit flip rate over the whole vocabulary
                // would swamp small med sets with spurious labels and cap the
                // achievable Jaccard far below the planted-rule signal.
                let k = clean.len() as f64;
                let absent = (spec.n_med - clean.len()).max(1) as f64;
                let p_add = (spec.noise_rate * k / absent).min(0.5);
                for m in 0..spec.n_med {
                    let present = clean.binary_search(&m).is_ok();
                    let p_flip = if present { spec.noise_rate } else { p_add };
                    let flip = prng.random::<f64>() < p_flip;
                    if present != flip {
                        med.push(m);
                    }
                }
                if med.is_empty() {
                    med.push(*clean.choose(&mut prng).expect("clean set non-empty"));
                }
            }
            visits.push(Visit::new(diag, proc_, med));
        }
        records.push(PatientRecord {
            patient_id: format!("p{pid:05}"),
            visits,
        });
    }

    Ok(SyntheticData {
        vocab,
        records,
        tau_true,
        ddi,
        rules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::effects::estimate_effects;
    use crate::data::io::save_dataset;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_patients: 80,
            n_diag: 40,
            n_proc: 20,
            n_med: 30,
            avg_visits: 2.4,
            n_latent_conditions: 8,
            effect_strength: 0.8,
            noise_rate: 0.1,
            n_ddi_pairs: 10,
            seed: 3,
        }
    }

    #[test]
    fn same_seed_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        let pa = dir.path().join("a.jsonl");
        let pb = dir.path().join("b.jsonl");
        save_dataset(&pa, &a.vocab, &a.records).unwrap();
        save_dataset(&pb, &b.vocab, &b.records).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(a.tau_true, b.tau_true);
        assert_eq!(a.ddi, b.ddi);
        assert_eq!(a.rules, b.rules);
    }

    #[test]
    fn noise_free_meds_replay_rules_exactly() {
        let mut spec = small_spec();
        spec.noise_rate = 0.0;
        let d = generate_synthetic(&spec).unwrap();
        for rec in &d.records {
            for v in &rec.visits {
                assert_eq!(v.med, d.rules.fire(&v.diag, &v.proc_));
            }
        }
    }

    #[test]
    fn all_ids_in_bounds_and_sets_nonempty() {
        let d = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(d.records.len(), 80);
        for rec in &d.records {
            assert!(!rec.visits.is_empty());
            for v in &rec.visits {
                v.check_bounds(&d.vocab).unwrap();
                assert!(!v.diag.is_empty() && !v.proc_.is_empty() && !v.med.is_empty());
            }
        }
        assert_eq!(d.ddi.n_pairs(), 10);
    }

    #[test]
    fn has_synergy_rules_and_seeded_ddi_pair() {
        let d = generate_synthetic(&small_spec()).unwrap();
        let synergy = d.rules.rules.iter().filter(|r| r.is_synergy()).count();
        assert!(synergy >= 2);
        // at least one DDI pair co-occurs in some rule's med set
        let planted = d.ddi.pairs().any(|(a, b)| {
            d.rules
                .rules
                .iter()
                .any(|r| r.meds.contains(&a) && r.meds.contains(&b))
        });
        assert!(planted);
    }

    #[test]
    fn estimator_sign_agrees_with_ground_truth() {
        let mut spec = small_spec();
        spec.noise_rate = 0.0;
        spec.n_patients = 200;
        let d = generate_synthetic(&spec).unwrap();
        let tau_hat = estimate_effects(&d.records, &d.vocab).unwrap();
        let mut total = 0usize;
        let mut agree = 0usize;
        for e in 0..d.vocab.n_entities() {
            for m in 0..d.vocab.n_med {
                let t = d.tau_true.get(e, m);
                if t.abs() > 0.2 {
                    total += 1;
                    if (tau_hat.get(e, m) > 0.0) == (t > 0.0) {
                        agree += 1;
                    }
                }
            }
        }
        assert!(total > 0);
        let frac = agree as f64 / total as f64;
        assert!(frac >= 0.9, "sign agreement {frac} below 0.9");
    }

    #[test]
    fn default_spec_scale() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.n_patients, 600);
        assert_eq!(spec.n_med, 131);
        assert!((spec.avg_visits - 2.4).abs() < 1e-12);
        let d = generate_synthetic(&spec).unwrap();
        assert_eq!(d.records.len(), 600);
        let total_visits: usize = d.records.iter().map(|r| r.visits.len()).sum();
        let avg = total_visits as f64 / d.records.len() as f64;
        assert!((1.8..=3.0).contains(&avg), "avg visits {avg}");
    }
}
