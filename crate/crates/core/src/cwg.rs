//! Causal Weight Generator: collapse each entity's per-medication causal
//! effects to a scalar, expand it through a 1 -> d/4 -> d bottleneck, and
//! gate the entity embedding with 1 + alpha * sigmoid(w).

use crate::data::{CausalEffectMatrix, Vocabularies};
use crate::error::{CafeError, Result};
use crate::numerics::{Tape, Var};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Diag,
    Proc,
    Med,
}

impl Modality {
    pub fn label(&self) -> &'static str {
        match self {
            Modality::Diag => "diag",
            Modality::Proc => "proc",
            Modality::Med => "med",
        }
    }
}

/// Tape handles for one modality's CWG bottleneck.
pub struct CwgVars {
    pub w1: Var, // [1, d/4]
    pub b1: Var, // [d/4]
    pub w2: Var, // [d/4, d]
    pub b2: Var, // [d]
}

/// Per-entity mean effect over medications: tau_bar_i = (1/|M|) sum_j tau_ij.
///
/// Diag and Proc slice their row block out of the (|D|+|P|) x |M| matrix;
/// Med expects a |M| x |M| matrix in the lagged med-history convention.
pub fn aggregate_effects(
    tau: &CausalEffectMatrix,
    vocab: &Vocabularies,
    modality: Modality,
) -> Result<Vec<f64>> {
    if tau.n_med() != vocab.n_med {
        return Err(CafeError::shape(format!(
            "effect matrix has {} med columns, vocab says {}",
            tau.n_med(),
            vocab.n_med
        )));
    }
    let (start, len, expect_rows) = match modality {
        Modality::Diag => (0, vocab.n_diag, vocab.n_entities()),
        Modality::Proc => (vocab.n_diag, vocab.n_proc, vocab.n_entities()),
        Modality::Med => (0, vocab.n_med, vocab.n_med),
    };
    if tau.n_rows() != expect_rows {
        return Err(CafeError::shape(format!(
            "effect matrix has {} rows, expected {} for modality {}",
            tau.n_rows(),
            expect_rows,
            modality.label()
        )));
    }
    let out: Vec<f64> = (start..start + len)
        .map(|i| tau.row(i).iter().sum::<f64>() / vocab.n_med as f64)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(CafeError::numeric("aggregated effects contain non-finite values"));
    }
    Ok(out)
}

/// Eq. 2: w = Linear_{d/4 -> d}(ReLU(Linear_{1 -> d/4}(tau_bar))).
/// `tau_bar` is a [N, 1] column of per-entity aggregates; output [N, d].
pub fn cwg_forward(tape: &mut Tape, tau_bar: Var, p: &CwgVars) -> Result<Var> {
    let hidden = tape.linear(tau_bar, p.w1, p.b1)?;
    let hidden = tape.relu(hidden);
    tape.linear(hidden, p.w2, p.b2)
}

/// Eq. 3: h' = h * (1 + alpha * sigmoid(w)), elementwise on [N, d].
pub fn modulate(tape: &mut Tape, h: Var, w: Var, alpha: f64) -> Result<Var> {
    let gate = tape.sigmoid(w);
    let gate = tape.scalar_mul(gate, alpha);
    let gate = tape.add_scalar(gate, 1.0);
    tape.mul(h, gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use crate::numerics::{grad_check, rng};
    use rand::Rng;

    fn vars(tape: &mut Tape, d: usize, rng: &mut impl Rng) -> CwgVars {
        let h = d / 4;
        CwgVars {
            w1: tape.leaf(Tensor::uniform_init(&[1, h], 1, rng), true),
            b1: tape.leaf(Tensor::uniform_init(&[h], 1, rng), true),
            w2: tape.leaf(Tensor::uniform_init(&[h, d], h, rng), true),
            b2: tape.leaf(Tensor::uniform_init(&[d], h, rng), true),
        }
    }

    #[test]
    fn aggregate_is_row_mean() {
        let vocab = Vocabularies {
            n_diag: 1,
            n_proc: 1,
            n_med: 3,
        };
        let tau =
            CausalEffectMatrix::new(2, 3, vec![0.2, 0.4, 0.6, 0.0, 0.0, 0.0]).unwrap();
        let diag = aggregate_effects(&tau, &vocab, Modality::Diag).unwrap();
        assert!((diag[0] - 0.4).abs() < 1e-12);
        let proc_ = aggregate_effects(&tau, &vocab, Modality::Proc).unwrap();
        assert_eq!(proc_[0], 0.0);
    }

    #[test]
    fn aggregate_matches_loop_oracle_on_random_block() {
        let vocab = Vocabularies {
            n_diag: 5,
            n_proc: 2,
            n_med: 131,
        };
        let mut r = rng::stream(11, "agg-test");
        let vals: Vec<f64> = (0..7 * 131).map(|_| r.random_range(-1.0..1.0)).collect();
        let tau = CausalEffectMatrix::new(7, 131, vals.clone()).unwrap();
        let got = aggregate_effects(&tau, &vocab, Modality::Diag).unwrap();
        for i in 0..5 {
            let mut s = 0.0;
            for j in 0..131 {
                s += vals[i * 131 + j];
            }
            assert!((got[i] - s / 131.0).abs() < 1e-12);
        }
        // med modality demands the med-by-med shape
        assert!(aggregate_effects(&tau, &vocab, Modality::Med).is_err());
    }

    #[test]
    fn forward_zero_params_and_zero_tau() {
        let d = 8;
        let mut tape = Tape::new();
        let zeros = CwgVars {
            w1: tape.leaf(Tensor::zeros(&[1, 2]), true),
            b1: tape.leaf(Tensor::zeros(&[2]), true),
            w2: tape.leaf(Tensor::zeros(&[2, d]), true),
            b2: tape.leaf(Tensor::zeros(&[d]), true),
        };
        let tb = tape.leaf(Tensor::new(vec![3, 1], vec![0.3, -0.2, 0.9]).unwrap(), false);
        let w = cwg_forward(&mut tape, tb, &zeros).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 0.0));

        // tau_bar = 0 with zero biases gives 0 regardless of weights
        let mut tape = Tape::new();
        let mut r = rng::stream(1, "cwg-zt");
        let mut p = vars(&mut tape, d, &mut r);
        p.b1 = tape.leaf(Tensor::zeros(&[2]), true);
        p.b2 = tape.leaf(Tensor::zeros(&[d]), true);
        let tb = tape.leaf(Tensor::zeros(&[2, 1]), false);
        let w = cwg_forward(&mut tape, tb, &p).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_loop_oracle() {
        let d = 8;
        let mut tape = Tape::new();
        let mut r = rng::stream(5, "cwg-loop");
        let p = vars(&mut tape, d, &mut r);
        let tb_val = 0.4;
        let tb = tape.leaf(Tensor::new(vec![1, 1], vec![tb_val]).unwrap(), false);
        let out = cwg_forward(&mut tape, tb, &p).unwrap();

        let w1 = tape.value(p.w1).data().to_vec();
        let b1 = tape.value(p.b1).data().to_vec();
        let w2 = tape.value(p.w2).data().to_vec();
        let b2 = tape.value(p.b2).data().to_vec();
        let hidden: Vec<f64> = (0..d / 4)
            .map(|k| (tb_val as f32 as f64 * w1[k] + b1[k]).max(0.0))
            .collect();
        for j in 0..d {
            let mut v = b2[j];
            for k in 0..d / 4 {
                v += hidden[k] as f32 as f64 * w2[k * d + j];
            }
            let got = tape.value(out).data()[j];
            assert!((got - v).abs() < 1e-5, "elem {j}: {got} vs {v}");
        }
    }

    #[test]
    fn modulate_neutral_and_ablation_paths() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap(), true);
        let w = tape.leaf(Tensor::zeros(&[1, 4]), true);
        let out = modulate(&mut tape, h, w, 0.5).unwrap();
        for (o, i) in tape.value(out).data().iter().zip([1.0, -2.0, 0.5, 3.0]) {
            assert!((o - 1.25 * i).abs() < 1e-6);
        }
        let out0 = modulate(&mut tape, h, w, 0.0).unwrap();
        assert_eq!(tape.value(out0).data(), tape.value(h).data());
    }

    #[test]
    fn gain_bounded_and_sign_preserving() {
        let mut tape = Tape::new();
        let mut r = rng::stream(9, "cwg-bound");
        let n = 64;
        let hv: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let wv: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let h = tape.leaf(Tensor::new(vec![1, n], hv.clone()).unwrap(), false);
        let w = tape.leaf(Tensor::new(vec![1, n], wv).unwrap(), false);
        let out = modulate(&mut tape, h, w, 0.5).unwrap();
        for (o, i) in tape.value(out).data().iter().zip(&hv) {
            if *i != 0.0 {
                let ratio = o / i;
                assert!(ratio > 1.0 && ratio < 1.5, "gain {ratio} outside (1, 1.5)");
                assert_eq!(o.signum(), i.signum());
            }
        }
    }

    #[test]
    fn forward_and_modulate_pass_grad_check() {
        let d = 8;
        let mut r = rng::stream(17, "cwg-gc");
        let inputs = vec![
            Tensor::uniform_init(&[1, 2], 1, &mut r),  // w1
            Tensor::uniform_init(&[2], 1, &mut r),     // b1
            Tensor::uniform_init(&[2, d], 2, &mut r),  // w2
            Tensor::uniform_init(&[d], 2, &mut r),     // b2
            Tensor::new(vec![2, 1], vec![0.4, -0.3]).unwrap(), // tau_bar
            Tensor::uniform_init(&[2, d], 1, &mut r),  // h
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
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
