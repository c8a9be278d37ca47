//! Deterministic patient-level 4:1:1 splitting and bootstrap resampling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CafeError, Result};
use crate::numerics::rng;

use super::types::PatientRecord;

/// Shuffle patients with a seeded stream, then cut contiguously.
/// Val and test each get floor(n/6); train gets the remainder.
pub fn split_dataset(
    records: &[PatientRecord],
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>, Vec<PatientRecord>)> {
    let n = records.len();
    if n < 6 {
        return Err(CafeError::data(format!(
            "need at least 6 patients to split 4:1:1, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, "split");
    order.shuffle(&mut rng);

    let n_val = n / 6;
    let n_test = n / 6;
    let n_train = n - n_val - n_test;

    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let train = pick(&order[..n_train]);
    let val = pick(&order[n_train..n_train + n_val]);
    let test = pick(&order[n_train + n_val..]);
    Ok((train, val, test))
}

/// `rounds` resamples of the test set, each |test| patients drawn with
/// replacement; round r uses RNG substream (seed, "bootstrap", r).
pub fn bootstrap_samples(
    test: &[PatientRecord],
    rounds: usize,
    seed: u64,
) -> Result<Vec<Vec<PatientRecord>>> {
    if test.is_empty() {
        return Err(CafeError::data("bootstrap: empty test set"));
    }
    if rounds == 0 {
        return Err(CafeError::data("bootstrap: rounds must be >= 1"));
    }
    let n = test.len();
    let mut out = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let mut rng = rng::substream(seed, "bootstrap", r as u64);
        let sample: Vec<PatientRecord> = (0..n)
            .map(|_| test[rng.random_range(0..n)].clone())
            .collect();
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::Visit;
    use std::collections::BTreeSet;

    fn patients(n: usize) -> Vec<PatientRecord> {
        (0..n)
            .map(|i| PatientRecord {
                patient_id: format!("p{i}"),
                visits: vec![Visit::new(vec![0], vec![0], vec![0])],
            })
            .collect()
    }

    #[test]
    fn split_600_gives_400_100_100() {
        let (train, val, test) = split_dataset(&patients(600), 1).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (400, 100, 100));
    }

    #[test]
    fn split_7_gives_5_1_1() {
        let (train, val, test) = split_dataset(&patients(7), 1).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (5, 1, 1));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let recs = patients(60);
        let (t1, v1, s1) = split_dataset(&recs, 42).unwrap();
        let (t2, v2, s2) = split_dataset(&recs, 42).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(s1, s2);
        let ids = |xs: &[PatientRecord]| {
            xs.iter().map(|r| r.patient_id.clone()).collect::<BTreeSet<_>>()
        };
        let all: BTreeSet<String> = ids(&t1).union(&ids(&v1)).cloned().collect();
        let all: BTreeSet<String> = all.union(&ids(&s1)).cloned().collect();
        assert_eq!(all.len(), 60);
        assert_eq!(t1.len() + v1.len() + s1.len(), 60);
    }

    #[test]
    fn split_too_few_errors() {
        assert!(split_dataset(&patients(5), 1).is_err());
    }

    #[test]
    fn bootstrap_shapes_and_determinism() {
        let test = patients(100);
        let rounds = bootstrap_samples(&test, 10, 7).unwrap();
        assert_eq!(rounds.len(), 10);
        for round in &rounds {
            assert_eq!(round.len(), 100);
        }
        let again = bootstrap_samples(&test, 10, 7).unwrap();
        assert_eq!(rounds, again);

        let test_ids: BTreeSet<&str> =
            test.iter().map(|r| r.patient_id.as_str()).collect();
        for round in &rounds {
            for rec in round {
                assert!(test_ids.contains(rec.patient_id.as_str()));
            }
        }
    }

    #[test]
    fn bootstrap_empty_errors() {
        assert!(bootstrap_samples(&[], 10, 7).is_err());
    }
}
