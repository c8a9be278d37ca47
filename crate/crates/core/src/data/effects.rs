//! Conditional-contrast causal effect estimation: a naive stand-in for a
//! full causal-discovery pipeline, producing the same matrix shape.

use crate::error::{CafeError, Result};

use super::types::{CausalEffectMatrix, PatientRecord, Vocabularies};

/// tau[i][j] = P(med j | entity i present) - P(med j | entity i absent)
/// over all visits, entities indexed diagnoses then procedures.
/// Entities present in zero visits or in all visits get a zero row.
pub fn estimate_effects(
    records: &[PatientRecord],
    vocab: &Vocabularies,
) -> Result<CausalEffectMatrix> {
    if records.is_empty() {
        return Err(CafeError::data("estimate_effects: no records"));
    }
    let n_ent = vocab.n_entities();
    let n_med = vocab.n_med;

    let mut n_visits = 0usize;
    // per-entity: visit count with entity present, med co-counts
    let mut ent_count = vec![0usize; n_ent];
    let mut co_count = vec![0usize; n_ent * n_med];
    let mut med_count = vec![0usize; n_med];

    for rec in records {
        for visit in &rec.visits {
            n_visits += 1;
            let mut ents: Vec<usize> = visit.diag.clone();
            ents.extend(visit.proc_.iter().map(|&p| vocab.n_diag + p));
            for &e in &ents {
                ent_count[e] += 1;
                for &m in &visit.med {
                    co_count[e * n_med + m] += 1;
                }
            }
            for &m in &visit.med {
                med_count[m] += 1;
            }
        }
    }

    let mut tau = CausalEffectMatrix::zeros(n_ent, n_med);
    for e in 0..n_ent {
        let with = ent_count[e];
        let without = n_visits - with;
        if with == 0 || without == 0 {
            continue; // undefined contrast: leave row zero
        }
        for m in 0..n_med {
            let co = co_count[e * n_med + m];
            let p_with = co as f64 / with as f64;
            let p_without = (med_count[m] - co) as f64 / without as f64;
            tau.set(e, m, (p_with - p_without).clamp(-1.0, 1.0));
        }
    }
    Ok(tau)
}

/// Lagged med-to-med contrast over consecutive visit pairs:
/// tau[i][j] = P(med j at t | med i at t-1) - P(med j at t | not med i at t-1).
/// Patients with a single visit contribute no pairs; zero rows where the
/// contrast is undefined.
pub fn estimate_med_effects(
    records: &[PatientRecord],
    vocab: &Vocabularies,
) -> Result<CausalEffectMatrix> {
    if records.is_empty() {
        return Err(CafeError::data("estimate_med_effects: no records"));
    }
    let n_med = vocab.n_med;
    let mut n_pairs = 0usize;
    let mut prev_count = vec![0usize; n_med];
    let mut co_count = vec![0usize; n_med * n_med];
    let mut next_count = vec![0usize; n_med];

    for rec in records {
        for w in rec.visits.windows(2) {
            n_pairs += 1;
            for &i in &w[0].med {
                prev_count[i] += 1;
                for &j in &w[1].med {
                    co_count[i * n_med + j] += 1;
                }
            }
            for &j in &w[1].med {
                next_count[j] += 1;
            }
        }
    }

    let mut tau = CausalEffectMatrix::zeros(n_med, n_med);
    if n_pairs == 0 {
        return Ok(tau);
    }
    for i in 0..n_med {
        let with = prev_count[i];
        let without = n_pairs - with;
        if with == 0 || without == 0 {
            continue;
        }
        for j in 0..n_med {
            let co = co_count[i * n_med + j];
            let p_with = co as f64 / with as f64;
            let p_without = (next_count[j] - co) as f64 / without as f64;
            tau.set(i, j, (p_with - p_without).clamp(-1.0, 1.0));
        }
    }
    Ok(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::Visit;

    fn record(visits: Vec<Visit>) -> PatientRecord {
        PatientRecord {
            patient_id: "p".to_string(),
            visits,
        }
    }

    const VOCAB: Vocabularies = Vocabularies {
        n_diag: 2,
        n_proc: 2,
        n_med: 6,
    };

    #[test]
    fn entity_in_every_visit_gets_zero_row() {
        let recs = vec![record(vec![
            Visit::new(vec![0], vec![0], vec![1]),
            Visit::new(vec![0], vec![1], vec![2]),
        ])];
        let tau = estimate_effects(&recs, &VOCAB).unwrap();
        assert!(tau.row(0).iter().all(|&v| v == 0.0)); // diag 0 in both visits
        assert!(tau.row(2).iter().any(|&v| v != 0.0)); // proc 0 in one visit
    }

    #[test]
    fn perfect_association_gives_one() {
        // entity 0 in visit A only, med 5 in visit A only
        let recs = vec![record(vec![
            Visit::new(vec![0], vec![], vec![5]),
            Visit::new(vec![1], vec![], vec![2]),
        ])];
        let tau = estimate_effects(&recs, &VOCAB).unwrap();
        assert_eq!(tau.get(0, 5), 1.0);
        assert_eq!(tau.get(0, 2), -1.0);
    }

    #[test]
    fn values_bounded_and_empty_errors() {
        assert!(estimate_effects(&[], &VOCAB).is_err());
        let recs = vec![
            record(vec![Visit::new(vec![0, 1], vec![0], vec![0, 3])]),
            record(vec![Visit::new(vec![1], vec![1], vec![3, 5])]),
        ];
        let tau = estimate_effects(&recs, &VOCAB).unwrap();
        for e in 0..VOCAB.n_entities() {
            for &v in tau.row(e) {
                assert!(v.is_finite() && (-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn med_effects_use_lagged_pairs() {
        // med 0 at t-1 always followed by med 4; without med 0, no med 4.
        let recs = vec![
            record(vec![
                Visit::new(vec![0], vec![], vec![0]),
                Visit::new(vec![0], vec![], vec![4]),
            ]),
            record(vec![
                Visit::new(vec![0], vec![], vec![1]),
                Visit::new(vec![0], vec![], vec![2]),
            ]),
        ];
        let tau = estimate_med_effects(&recs, &VOCAB).unwrap();
        assert_eq!(tau.get(0, 4), 1.0);
        assert_eq!(tau.n_rows(), VOCAB.n_med);
        // single-visit patients contribute nothing
        let lone = vec![record(vec![Visit::new(vec![0], vec![], vec![0])])];
        let tau0 = estimate_med_effects(&lone, &VOCAB).unwrap();
        for i in 0..VOCAB.n_med {
            assert!(tau0.row(i).iter().all(|&v| v == 0.0));
        }
    }
}
