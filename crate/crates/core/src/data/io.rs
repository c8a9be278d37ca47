//! JSON Lines dataset files and the rules.json ground-truth sidecar.
//!
//! Dataset format: line 1 is the header
//! `{"format":"cafemed-ehr-v1","n_diag":int,"n_proc":int,"n_med":int}`,
//! each following line is one patient record.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CafeError, Result};

use super::types::{PatientRecord, RuleTable, Vocabularies};

const FORMAT: &str = "cafemed-ehr-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    n_diag: usize,
    n_proc: usize,
    n_med: usize,
}

pub fn save_dataset(path: &Path, vocab: &Vocabularies, records: &[PatientRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        format: FORMAT.to_string(),
        n_diag: vocab.n_diag,
        n_proc: vocab.n_proc,
        n_med: vocab.n_med,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).map_err(|e| CafeError::data(e.to_string()))?
    )?;
    for rec in records {
        writeln!(
            out,
            "{}",
            serde_json::to_string(rec).map_err(|e| CafeError::data(e.to_string()))?
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Vocabularies, Vec<PatientRecord>)> {
    let raw = fs::read_to_string(path)?;
    let mut lines = raw.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| CafeError::data("empty dataset file"))?;
    let header: Header = serde_json::from_str(first).map_err(|e| CafeError::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT {
        return Err(CafeError::Parse {
            line: 1,
            msg: format!("unknown format {:?}, expected {FORMAT:?}", header.format),
        });
    }
    let vocab = Vocabularies {
        n_diag: header.n_diag,
        n_proc: header.n_proc,
        n_med: header.n_med,
    };
    if vocab.n_diag == 0 || vocab.n_proc == 0 || vocab.n_med == 0 {
        return Err(CafeError::data("vocabulary sizes must be > 0"));
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut rec: PatientRecord = serde_json::from_str(line).map_err(|e| CafeError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.visits.is_empty() {
            return Err(CafeError::data(format!(
                "line {lineno}: patient {} has no visits",
                rec.patient_id
            )));
        }
        for visit in &mut rec.visits {
            visit.normalize();
            visit
                .check_bounds(&vocab)
                .map_err(|e| CafeError::data(format!("line {lineno}: {e}")))?;
        }
        records.push(rec);
    }
    Ok((vocab, records))
}

pub fn save_rules(path: &Path, rules: &RuleTable) -> Result<()> {
    let json =
        serde_json::to_string_pretty(rules).map_err(|e| CafeError::data(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_rules(path: &Path) -> Result<RuleTable> {
    let raw = fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| CafeError::data(format!("rules parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::Visit;

    fn one_patient() -> (Vocabularies, Vec<PatientRecord>) {
        let vocab = Vocabularies {
            n_diag: 2,
            n_proc: 2,
            n_med: 3,
        };
        let records = vec![PatientRecord {
            patient_id: "p0".to_string(),
            visits: vec![Visit::new(vec![0], vec![0], vec![0, 1])],
        }];
        (vocab, records)
    }

    #[test]
    fn round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let (vocab, records) = one_patient();
        save_dataset(&path, &vocab, &records).unwrap();
        let (v2, r2) = load_dataset(&path).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(r2, records);
        // save -> load -> save is byte-identical
        let bytes1 = fs::read(&path).unwrap();
        let path2 = dir.path().join("data2.jsonl");
        save_dataset(&path2, &v2, &r2).unwrap();
        assert_eq!(bytes1, fs::read(&path2).unwrap());
    }

    #[test]
    fn out_of_range_med_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"format\":\"cafemed-ehr-v1\",\"n_diag\":2,\"n_proc\":2,\"n_med\":3}\n",
                "{\"patient_id\":\"p0\",\"visits\":[{\"diag\":[0],\"proc\":[0],\"med\":[0]}]}\n",
                "{\"patient_id\":\"p1\",\"visits\":[{\"diag\":[0],\"proc\":[0],\"med\":[7]}]}\n",
            ),
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "error should name line 3: {err}");
        assert!(err.contains('7'), "error should name the bad ID: {err}");
    }

    #[test]
    fn malformed_line_is_parse_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"format\":\"cafemed-ehr-v1\",\"n_diag\":2,\"n_proc\":2,\"n_med\":3}\n",
                "not json\n",
            ),
        )
        .unwrap();
        match load_dataset(&path).unwrap_err() {
            CafeError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn rules_round_trip() {
        use crate::data::types::Rule;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.json");
        let table = RuleTable {
            rules: vec![Rule {
                diag: vec![1],
                proc_: vec![2],
                meds: vec![3, 4],
            }],
        };
        save_rules(&path, &table).unwrap();
        assert_eq!(load_rules(&path).unwrap(), table);
    }
}
