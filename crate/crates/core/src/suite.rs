//! Scoped 64-bit gradient-verification suite: reverse-mode gradients vs
//! central finite differences for CWG, CHARM, the full model path, and
//! the combined loss. Shared by the CLI `gradcheck` command and the
//! acceptance tests.

use std::rc::Rc;

use crate::charm::{charm_forward, CharmInput, CharmVars};
use crate::cwg::{cwg_forward, modulate, CwgVars};
use crate::data::{PatientRecord, Visit, Vocabularies};
use crate::error::{CafeError, Result};
use crate::model::{build_homo_graphs, Model, ModelConfig, NamedVars, TauBars};
use crate::numerics::params::ParamSet;
use crate::numerics::tensor::Tensor;
use crate::numerics::{grad_check, rng, Var};
use crate::training::visit_loss;

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    Cwg,
    Charm,
    Model,
    Loss,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "cwg" => Ok(Scope::Cwg),
            "charm" => Ok(Scope::Charm),
            "model" => Ok(Scope::Model),
            "loss" => Ok(Scope::Loss),
            other => Err(CafeError::config(format!(
                "unknown gradcheck scope '{other}' (expected all|cwg|charm|model|loss)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScopeResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn check_cwg() -> Result<ScopeResult> {
    let d = 8;
    let mut r = rng::stream(101, "suite-cwg");
    let inputs = vec![
        Tensor::uniform_init(&[1, 2], 1, &mut r),
        Tensor::uniform_init(&[2], 1, &mut r),
        Tensor::uniform_init(&[2, d], 2, &mut r),
        Tensor::uniform_init(&[d], 2, &mut r),
        Tensor::new(vec![3, 1], vec![0.4, -0.3, 0.7]).unwrap(),
        Tensor::uniform_init(&[3, d], 1, &mut r),
    ];
    let report = grad_check(
        |tape, vars| {
            let p = CwgVars {
                w1: vars[0],
                b1: vars[1],
                w2: vars[2],
                b2: vars[3],
            };
            let w = cwg_forward(tape, vars[4], &p)?;
            let h = modulate(tape, vars[5], w, 0.5)?;
            Ok(tape.sum(h))
        },
        &inputs,
        GRAD_TOL,
    )?;
    Ok(ScopeResult {
        name: "cwg.forward+modulate".to_string(),
        max_rel_err: report.max_rel_err,
        passed: report.passed(),
    })
}

fn check_charm() -> Result<ScopeResult> {
    let (c, l) = (8, 3); // shuffle groups active: 8 % 4 == 0
    let cr = crate::charm::channel_hidden(c);
    let mut r = rng::stream(102, "suite-charm");
    let mask = vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let mut inputs = vec![
        Tensor::uniform_init(&[c, cr], c, &mut r),      // ca_w1
        Tensor::uniform_init(&[cr], c, &mut r),         // ca_b1
        Tensor::uniform_init(&[cr, c], cr, &mut r),     // ca_w2
        Tensor::uniform_init(&[c], cr, &mut r),         // ca_b2
        Tensor::uniform_init(&[c, c, 7, 7], c * 49, &mut r), // conv1_k
        Tensor::uniform_init(&[c], c * 49, &mut r),     // conv1_b
        Tensor::full(&[c], 1.0),                        // in1_gamma
        Tensor::zeros(&[c]),                            // in1_beta
        Tensor::uniform_init(&[c, c, 7, 7], c * 49, &mut r), // conv2_k
        Tensor::uniform_init(&[c], c * 49, &mut r),     // conv2_b
        Tensor::full(&[c], 1.0),                        // in2_gamma
        Tensor::zeros(&[c]),                            // in2_beta
        Tensor::scalar(0.9),                            // gate_a
        Tensor::scalar(0.1),                            // gate_b
    ];
    inputs.push(Tensor::uniform_init(&[1, c, 3, l], 1, &mut r)); // x
    let tau: Vec<f64> = (0..3 * l).map(|i| 0.15 * i as f64 - 0.6).collect();
    inputs.push(Tensor::new(vec![1, 1, 3, l], tau).unwrap()); // tau_grid
    let report = grad_check(
        |tape, vars| {
            let p = CharmVars {
                ca_w1: vars[0],
                ca_b1: vars[1],
                ca_w2: vars[2],
                ca_b2: vars[3],
                conv1_k: vars[4],
                conv1_b: vars[5],
                in1_gamma: vars[6],
                in1_beta: vars[7],
                conv2_k: vars[8],
                conv2_b: vars[9],
                in2_gamma: vars[10],
                in2_beta: vars[11],
                gate_a: vars[12],
                gate_b: vars[13],
            };
            let input = CharmInput {
                x: vars[14],
                mask: mask.clone(),
                tau_grid: vars[15],
            };
            let (fused, pooled) = charm_forward(tape, &input, &p)?;
            let s0 = tape.sum(fused);
            let s1 = tape.sum(pooled[0]);
            let s2 = tape.sum(pooled[1]);
            let s3 = tape.sum(pooled[2]);
            let a = tape.add(s0, s1)?;
            let b = tape.add(s2, s3)?;
            tape.add(a, b)
        },
        &inputs,
        GRAD_TOL,
    )?;
    Ok(ScopeResult {
        name: "charm.gate+attention+shuffle+pool".to_string(),
        max_rel_err: report.max_rel_err,
        passed: report.passed(),
    })
}

fn check_model() -> Result<ScopeResult> {
    let vocab = Vocabularies {
        n_diag: 6,
        n_proc: 5,
        n_med: 6,
    };
    let cfg = ModelConfig {
        d: 8,
        l_slots: 4,
        dropout_p: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, vocab, 103)?;
    let records = vec![
        PatientRecord {
            patient_id: "a".to_string(),
            visits: vec![
                Visit::new(vec![0, 1], vec![0], vec![0, 2]),
                Visit::new(vec![1, 3], vec![1, 2], vec![1]),
            ],
        },
        PatientRecord {
            patient_id: "b".to_string(),
            visits: vec![Visit::new(vec![2], vec![0, 3], vec![3, 4])],
        },
    ];
    let graphs = build_homo_graphs(&records, &vocab)?;
    let mut taus = TauBars::zeros(&vocab);
    for (i, v) in taus.diag.iter_mut().enumerate() {
        *v = 0.1 * i as f64 - 0.2;
    }
    for (i, v) in taus.proc_.iter_mut().enumerate() {
        *v = 0.25 - 0.1 * i as f64;
    }
    taus.med[1] = 0.4;

    let names: Vec<String> = model.params.names().map(String::from).collect();
    let inputs: Vec<Tensor> = model.params.tensors().to_vec();
    let report = grad_check(
        |tape, vars| {
            let nv = NamedVars::new(names.iter().cloned(), vars);
            let m = Model {
                cfg,
                vocab,
                params: ParamSet::new(),
            };
            let mut total: Option<Var> = None;
            let mut drop_rng = rng::stream(0, "dropout");
            for rec in &records {
                let outs =
                    m.forward_seq(tape, &nv, &graphs, &taus, &rec.visits, false, &mut drop_rng)?;
                for (t, out) in outs.iter().enumerate() {
                    let mut targets = vec![0.0; vocab.n_med];
                    for &j in &rec.visits[t].med {
                        targets[j] = 1.0;
                    }
                    let l = tape.bce_with_logits(out.logits, &targets)?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, l)?,
                        None => l,
                    });
                }
            }
            Ok(total.expect("non-empty records"))
        },
        &inputs,
        GRAD_TOL,
    )?;
    Ok(ScopeResult {
        name: "model.forward_seq+bce".to_string(),
        max_rel_err: report.max_rel_err,
        passed: report.passed(),
    })
}

fn check_loss() -> Result<ScopeResult> {
    let logits = Tensor::new(vec![1, 6], vec![0.8, -1.1, 0.3, 2.0, -0.4, 0.0]).unwrap();
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let pairs = Rc::new(vec![(0usize, 3usize), (1, 4), (2, 5)]);
    let report = grad_check(
        |tape, vars| {
            let mut evals = 0u64;
            visit_loss(tape, vars[0], &targets, Some(&pairs), 0.05, &mut evals)
        },
        &[logits],
        GRAD_TOL,
    )?;
    Ok(ScopeResult {
        name: "loss.bce+ddi".to_string(),
        max_rel_err: report.max_rel_err,
        passed: report.passed(),
    })
}

/// Run all checks in the scope; results in a fixed order.
pub fn run_gradcheck(scope: Scope) -> Result<Vec<ScopeResult>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::All | Scope::Cwg) {
        out.push(check_cwg()?);
    }
    if matches!(scope, Scope::All | Scope::Charm) {
        out.push(check_charm()?);
    }
    if matches!(scope, Scope::All | Scope::Model) {
        out.push(check_model()?);
    }
    if matches!(scope, Scope::All | Scope::Loss) {
        out.push(check_loss()?);
    }
    Ok(out)
}
