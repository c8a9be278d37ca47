// temporary debug probe: locate worst grad-check element in the end-to-end loss
use cafemed_core::data::{PatientRecord, Visit};
use cafemed_core::data::Vocabularies;
use cafemed_core::model::{build_homo_graphs, Model, ModelConfig, NamedVars, TauBars};
use cafemed_core::numerics::{grad_check, rng, Tensor};

fn main() {
    let vocab = Vocabularies { n_diag: 6, n_proc: 5, n_med: 6 };
    let cfg = ModelConfig { d: 8, l_slots: 4, dropout_p: 0.0, ..ModelConfig::default() };
    let records = vec![
        PatientRecord { patient_id: "a".into(), visits: vec![
            Visit::new(vec![0, 1], vec![0], vec![0, 2]),
            Visit::new(vec![1, 3], vec![1, 2], vec![1]),
        ]},
        PatientRecord { patient_id: "b".into(), visits: vec![Visit::new(vec![2], vec![0, 3], vec![3, 4])] },
    ];
    let model = Model::init(cfg, vocab, std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(19)).unwrap();
    let graphs = build_homo_graphs(&records, &vocab).unwrap();
    let mut taus = TauBars::zeros(&vocab);
    for (i, v) in taus.diag.iter_mut().enumerate() { *v = 0.1 * i as f64 - 0.2; }
    taus.med[1] = 0.4;

    let names: Vec<String> = model.params.names().map(String::from).collect();
    let inputs: Vec<Tensor> = model.params.tensors().to_vec();
    let cfg = model.cfg;
    let report = grad_check(
        |tape, vars| {
            let nv = NamedVars::new(names.iter().cloned(), vars);
            let m = Model { cfg, vocab, params: cafemed_core::numerics::ParamSet::new() };
            let mut total: Option<cafemed_core::numerics::Var> = None;
            let mut drop_rng = rng::stream(0, "dropout");
            for rec in &records {
                let outs = m.forward_seq(tape, &nv, &graphs, &taus, &rec.visits, false, &mut drop_rng)?;
                for (t, out) in outs.iter().enumerate() {
                    let mut targets = vec![0.0; vocab.n_med];
                    for &j in &rec.visits[t].med { targets[j] = 1.0; }
                    let l = tape.bce_with_logits(out.logits, &targets)?;
                    total = Some(match total { Some(acc) => tape.add(acc, l)?, None => l });
                }
            }
            Ok(total.unwrap())
        },
        &inputs, 1e-4,
    ).unwrap();
    println!("max rel err {} worst input {} ({}) elem {}", report.max_rel_err,
        report.worst.0, names[report.worst.0], report.worst.1);
}
