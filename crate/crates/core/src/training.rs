//! Combined BCE + DDI objective and the epoch loop with validation-based
//! model selection.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DdiMatrix, PatientRecord, Visit, Vocabularies};
use crate::error::{CafeError, Result};
use crate::eval::evaluate_split;
use crate::model::{build_homo_graphs, HomoGraphs, Model, ModelConfig, TauBars};
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::params::ParamVars;
use crate::numerics::precision::{set_precision, Precision};
use crate::numerics::{rng, Tape, Var};

fn default_lr() -> f64 {
    5e-4
}
fn default_beta_ddi() -> f64 {
    0.0005
}
fn default_weight_decay() -> f64 {
    0.005
}
fn default_max_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    10
}
fn default_ddi_target() -> f64 {
    0.06
}
fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta_ddi: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ddi_target: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            beta_ddi: default_beta_ddi(),
            weight_decay: default_weight_decay(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
            ddi_target: default_ddi_target(),
            precision: default_precision(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(CafeError::config("lr must be positive"));
        }
        if !(self.beta_ddi >= 0.0) {
            return Err(CafeError::config("beta_ddi must be non-negative"));
        }
        if self.patience > self.max_epochs {
            return Err(CafeError::config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.max_epochs == 0 {
            return Err(CafeError::config("max_epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_jaccard: f64,
    pub val_ddi: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// How many times the DDI penalty term was evaluated; stays 0 when
    /// beta_ddi = 0, which proves the objective never touched the DDI
    /// matrix.
    pub ddi_loss_evals: u64,
}

impl TrainLog {
    /// Copy with wall times zeroed: the deterministic content of the log,
    /// for run-to-run comparisons.
    pub fn canonical(&self) -> TrainLog {
        let mut c = self.clone();
        for e in &mut c.epochs {
            e.wall_time_s = 0.0;
        }
        c
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| CafeError::data(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| CafeError::data(format!("train log parse: {e}")))
    }
}

/// 0/1 target vector for one visit's medication set.
pub fn targets_vec(meds: &[usize], n_med: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_med];
    for &m in meds {
        t[m] = 1.0;
    }
    t
}

/// Mean binary cross-entropy over the |M| labels (stable form).
pub fn bce_loss(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    tape.bce_with_logits(logits, targets)
}

/// (1/|M|^2) sum_{i<j in pairs} 2 sigma(s_i) sigma(s_j): expected pairwise
/// co-prescription mass over interacting pairs.
pub fn ddi_loss(tape: &mut Tape, logits: Var, pairs: Rc<Vec<(usize, usize)>>) -> Result<Var> {
    tape.ddi_penalty(logits, pairs)
}

/// bce + beta * ddi for one visit. The DDI term is only built (and
/// `ddi_evals` only incremented) when beta > 0.
pub fn visit_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[f64],
    pairs: Option<&Rc<Vec<(usize, usize)>>>,
    beta: f64,
    ddi_evals: &mut u64,
) -> Result<Var> {
    let bce = bce_loss(tape, logits, targets)?;
    if beta == 0.0 {
        return Ok(bce);
    }
    let pairs = pairs
        .ok_or_else(|| CafeError::config("visit_loss: beta > 0 but no DDI pairs supplied"))?;
    *ddi_evals += 1;
    let ddi = ddi_loss(tape, logits, Rc::clone(pairs))?;
    let scaled = tape.scalar_mul(ddi, beta);
    tape.add(bce, scaled)
}

pub struct TrainInputs<'a> {
    pub train: &'a [PatientRecord],
    pub val: &'a [PatientRecord],
    pub vocab: &'a Vocabularies,
    pub taus: &'a TauBars,
    pub ddi: &'a DdiMatrix,
}

pub struct TrainOutcome {
    /// Model with the best-validation-Jaccard parameters restored.
    pub model: Model,
    pub graphs: HomoGraphs,
    pub log: TrainLog,
}

fn patient_loss(
    model: &Model,
    tape: &mut Tape,
    pv: &ParamVars,
    graphs: &HomoGraphs,
    taus: &TauBars,
    visits: &[Visit],
    pairs: Option<&Rc<Vec<(usize, usize)>>>,
    cfg: &TrainConfig,
    ddi_evals: &mut u64,
    rng: &mut impl rand::Rng,
) -> Result<Var> {
    let outs = model.forward_seq(tape, pv, graphs, taus, visits, true, rng)?;
    let mut total: Option<Var> = None;
    for (t, out) in outs.iter().enumerate() {
        let targets = targets_vec(&visits[t].med, model.vocab.n_med);
        let l = visit_loss(tape, out.logits, &targets, pairs, cfg.beta_ddi, ddi_evals)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(total.expect("non-empty visit history"))
}

/// Full training loop: per epoch, a seeded patient shuffle and one Adam
/// step per patient (loss summed over that patient's visits), validation
/// after every epoch, best epoch by val Jaccard, early stop once
/// `patience` epochs pass without improvement.
pub fn train(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    inputs: &TrainInputs,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if inputs.train.is_empty() || inputs.val.is_empty() {
        return Err(CafeError::data("train: empty train or val split"));
    }
    set_precision(train_cfg.precision);

    let mut model = Model::init(model_cfg, *inputs.vocab, train_cfg.seed)?;
    let graphs = build_homo_graphs(inputs.train, inputs.vocab)?;
    let decay: Vec<bool> = model
        .params
        .kinds()
        .iter()
        .map(|k| *k == crate::numerics::params::ParamKind::Weight)
        .collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: train_cfg.lr,
            weight_decay: train_cfg.weight_decay,
            ..AdamConfig::default()
        },
        &model.params.shapes(),
    );
    let pairs: Option<Rc<Vec<(usize, usize)>>> = if train_cfg.beta_ddi > 0.0 {
        if inputs.ddi.n_med() != inputs.vocab.n_med {
            return Err(CafeError::config(format!(
                "train: DDI matrix over {} meds, vocab over {}",
                inputs.ddi.n_med(),
                inputs.vocab.n_med
            )));
        }
        Some(Rc::new(inputs.ddi.pairs().collect()))
    } else {
        None
    };

    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        ddi_loss_evals: 0,
    };
    let mut best_jaccard = f64::NEG_INFINITY;
    let mut best_params: Vec<crate::numerics::tensor::Tensor> = model.params.tensors().to_vec();

    let mut order: Vec<usize> = (0..inputs.train.len()).collect();
    for epoch in 0..train_cfg.max_epochs {
        let start = Instant::now();
        let mut shuffle_rng = rng::substream(train_cfg.seed, "epoch-order", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = rng::substream(train_cfg.seed, "dropout", epoch as u64);

        let mut loss_sum = 0.0;
        for &pi in &order {
            let rec = &inputs.train[pi];
            let mut tape = Tape::new();
            let pv = ParamVars::insert(&mut tape, &model.params, true);
            let loss = patient_loss(
                &model,
                &mut tape,
                &pv,
                &graphs,
                inputs.taus,
                &rec.visits,
                pairs.as_ref(),
                train_cfg,
                &mut log.ddi_loss_evals,
                &mut dropout_rng,
            )?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(CafeError::numeric(format!(
                    "non-finite loss {loss_val} at epoch {epoch}, patient {}",
                    rec.patient_id
                )));
            }
            loss_sum += loss_val;
            tape.backward(loss)?;
            let grads = pv.grads(&tape);
            let mut refs: Vec<&mut crate::numerics::tensor::Tensor> =
                model.params.tensors_mut().iter_mut().collect();
            adam.step(&mut refs, &grads, &decay)?;
        }
        let train_loss = loss_sum / inputs.train.len() as f64;

        let val = evaluate_split(&model, &graphs, inputs.taus, inputs.val, inputs.ddi)?;
        if val.jaccard > best_jaccard {
            best_jaccard = val.jaccard;
            log.best_epoch = epoch;
            best_params = model.params.tensors().to_vec();
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_jaccard: val.jaccard,
            val_ddi: val.ddi,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if epoch - log.best_epoch >= train_cfg.patience {
            break;
        }
    }

    for (slot, best) in model.params.tensors_mut().iter_mut().zip(best_params) {
        *slot = best;
    }
    Ok(TrainOutcome {
        model,
        graphs,
        log,
    })
}
