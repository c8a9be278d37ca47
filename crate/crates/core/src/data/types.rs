use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CafeError, Result};

/// One hospital encounter: diagnosis, procedure, and medication ID sets.
/// Sets are kept sorted and deduplicated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub diag: Vec<usize>,
    #[serde(rename = "proc")]
    pub proc_: Vec<usize>,
    pub med: Vec<usize>,
}

impl Visit {
    pub fn new(diag: Vec<usize>, proc_: Vec<usize>, med: Vec<usize>) -> Self {
        let mut v = Visit { diag, proc_, med };
        v.normalize();
        v
    }

    pub fn normalize(&mut self) {
        for set in [&mut self.diag, &mut self.proc_, &mut self.med] {
            set.sort_unstable();
            set.dedup();
        }
    }

    pub fn check_bounds(&self, vocab: &Vocabularies) -> Result<()> {
        let check = |ids: &[usize], bound: usize, what: &str| -> Result<()> {
            if let Some(&bad) = ids.iter().find(|&&i| i >= bound) {
                return Err(CafeError::data(format!(
                    "{what} ID {bad} out of range (vocab size {bound})"
                )));
            }
            Ok(())
        };
        check(&self.diag, vocab.n_diag, "diagnosis")?;
        check(&self.proc_, vocab.n_proc, "procedure")?;
        check(&self.med, vocab.n_med, "medication")
    }
}

/// Ordered longitudinal visit sequence for one patient.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

/// Vocabulary sizes shared by dataset, effect matrix, and DDI matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub n_diag: usize,
    pub n_proc: usize,
    pub n_med: usize,
}

impl Vocabularies {
    pub fn n_entities(&self) -> usize {
        self.n_diag + self.n_proc
    }
}

/// Entity-by-medication causal effect values. Row blocks are ordered
/// diagnoses then procedures; a med-by-med variant reuses the same type
/// with `n_rows == n_med`.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalEffectMatrix {
    n_rows: usize,
    n_med: usize,
    values: Vec<f64>,
}

impl CausalEffectMatrix {
    pub fn zeros(n_rows: usize, n_med: usize) -> Self {
        CausalEffectMatrix {
            n_rows,
            n_med,
            values: vec![0.0; n_rows * n_med],
        }
    }

    pub fn new(n_rows: usize, n_med: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_rows * n_med {
            return Err(CafeError::shape(format!(
                "effect matrix: {n_rows}x{n_med} needs {} values, got {}",
                n_rows * n_med,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CafeError::data("effect matrix contains non-finite values"));
        }
        Ok(CausalEffectMatrix {
            n_rows,
            n_med,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_med(&self) -> usize {
        self.n_med
    }

    pub fn get(&self, row: usize, med: usize) -> f64 {
        self.values[row * self.n_med + med]
    }

    pub fn set(&mut self, row: usize, med: usize, v: f64) {
        self.values[row * self.n_med + med] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.n_med..(row + 1) * self.n_med]
    }

    /// Mean effect per row: tau_bar_i = (1/|M|) sum_j tau_ij.
    pub fn row_means(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| self.row(i).iter().sum::<f64>() / self.n_med as f64)
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for i in 0..self.n_rows {
            let line = self
                .row(i)
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn load_csv(path: &Path, n_rows: usize, n_med: usize) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let mut values = Vec::with_capacity(n_rows * n_med);
        let mut rows = 0usize;
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            rows += 1;
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|e| CafeError::Parse {
                    line: lineno + 1,
                    msg: format!("bad float {field:?}: {e}"),
                })?;
                values.push(v);
            }
        }
        if rows != n_rows {
            return Err(CafeError::data(format!(
                "effect CSV has {rows} rows, expected {n_rows}"
            )));
        }
        CausalEffectMatrix::new(n_rows, n_med, values)
    }
}

/// Symmetric boolean medication-pair adjacency with zero diagonal,
/// stored as the upper-triangle pair set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DdiMatrix {
    n_med: usize,
    pairs: BTreeSet<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct DdiFile {
    n_med: usize,
    pairs: Vec<[usize; 2]>,
}

impl DdiMatrix {
    pub fn new(n_med: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in pairs {
            if a == b {
                return Err(CafeError::data(format!("DDI pair ({a},{a}) is diagonal")));
            }
            if a >= n_med || b >= n_med {
                return Err(CafeError::data(format!(
                    "DDI pair ({a},{b}) out of range for {n_med} medications"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(DdiMatrix { n_med, pairs: set })
    }

    pub fn n_med(&self) -> usize {
        self.n_med
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn interacts(&self, a: usize, b: usize) -> bool {
        a != b && self.pairs.contains(&(a.min(b), a.max(b)))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = DdiFile {
            n_med: self.n_med,
            pairs: self.pairs.iter().map(|&(a, b)| [a, b]).collect(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| CafeError::data(format!("ddi serialization: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let file: DdiFile =
            serde_json::from_str(&raw).map_err(|e| CafeError::data(format!("ddi parse: {e}")))?;
        DdiMatrix::new(file.n_med, file.pairs.into_iter().map(|[a, b]| (a, b)))
    }
}

/// Knobs of the planted-structure synthetic cohort generator.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub n_diag: usize,
    pub n_proc: usize,
    pub n_med: usize,
    pub avg_visits: f64,
    pub n_latent_conditions: usize,
    pub effect_strength: f64,
    pub noise_rate: f64,
    pub n_ddi_pairs: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Scale targets sized at roughly a tenth of the MIMIC-III statistics.
    fn default() -> Self {
        SyntheticSpec {
            n_patients: 600,
            n_diag: 196,
            n_proc: 143,
            n_med: 131,
            avg_visits: 2.4,
            n_latent_conditions: 15,
            effect_strength: 0.8,
            noise_rate: 0.1,
            n_ddi_pairs: 40,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_patients", self.n_patients),
            ("n_diag", self.n_diag),
            ("n_proc", self.n_proc),
            ("n_med", self.n_med),
            ("n_latent_conditions", self.n_latent_conditions),
            ("n_ddi_pairs", self.n_ddi_pairs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CafeError::config(format!("synthetic spec: {name} must be > 0")));
            }
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(CafeError::config(format!(
                "synthetic spec: noise_rate {} outside [0, 0.5)",
                self.noise_rate
            )));
        }
        if self.avg_visits < 1.0 {
            return Err(CafeError::config("synthetic spec: avg_visits must be >= 1"));
        }
        let max_pairs = self.n_med * (self.n_med - 1) / 2;
        if self.n_ddi_pairs > max_pairs {
            return Err(CafeError::config(format!(
                "synthetic spec: n_ddi_pairs {} exceeds {} possible pairs",
                self.n_ddi_pairs, max_pairs
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabularies {
        Vocabularies {
            n_diag: self.n_diag,
            n_proc: self.n_proc,
            n_med: self.n_med,
        }
    }
}

/// One planted ground-truth rule: if every antecedent diagnosis and
/// procedure is present in a visit, the consequent medications are
/// indicated. Synergy rules have both a diagnosis and a procedure
/// antecedent and fire only on their co-occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub diag: Vec<usize>,
    #[serde(rename = "proc")]
    pub proc_: Vec<usize>,
    pub meds: Vec<usize>,
}

impl Rule {
    pub fn fires(&self, diag: &[usize], proc_: &[usize]) -> bool {
        self.diag.iter().all(|d| diag.contains(d)) && self.proc_.iter().all(|p| proc_.contains(p))
    }

    pub fn is_synergy(&self) -> bool {
        !self.diag.is_empty() && !self.proc_.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTable {
    pub rules: Vec<Rule>,
}

impl RuleTable {
    /// Medications indicated for a visit's diagnosis and procedure sets.
    pub fn fire(&self, diag: &[usize], proc_: &[usize]) -> Vec<usize> {
        let mut meds: Vec<usize> = self
            .rules
            .iter()
            .filter(|r| r.fires(diag, proc_))
            .flat_map(|r| r.meds.iter().copied())
            .collect();
        meds.sort_unstable();
        meds.dedup();
        meds
    }
}
