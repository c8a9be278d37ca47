//! `cafemed` — config-driven experiment entry points: synthetic data
//! generation, effect estimation, training (with ablation variants),
//! bootstrap evaluation, gradient verification, and the full ablation
//! sweep.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cafemed_core::data::{
    estimate_effects, estimate_med_effects, generate_synthetic, load_dataset, save_dataset,
    save_rules, split_dataset, CausalEffectMatrix, DdiMatrix, PatientRecord, SyntheticSpec,
    Vocabularies,
};
use cafemed_core::eval::{evaluate, evaluate_split, MetricsReport};
use cafemed_core::model::{
    load_model_config, save_model_config, HomoGraphs, Model, ModelConfig, TauBars, Variant,
};
use cafemed_core::numerics::checkpoint::{load_checkpoint, save_checkpoint};
use cafemed_core::suite::{run_gradcheck, Scope};
use cafemed_core::training::{train, TrainConfig, TrainInputs};
use cafemed_core::CafeError;

/// Strict three-section experiment config; every field optional with the
/// paper-default fallback.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentConfig {
    data: SyntheticSpec,
    model: ModelConfig,
    train: TrainConfig,
}

impl ExperimentConfig {
    fn load(path: Option<&Path>) -> Result<Self, CafeError> {
        match path {
            None => Ok(ExperimentConfig::default()),
            Some(p) => {
                let raw = std::fs::read_to_string(p)?;
                serde_json::from_str(&raw)
                    .map_err(|e| CafeError::config(format!("config parse: {e}")))
            }
        }
    }

    /// Content hash of the fully-resolved config (defaults filled in).
    fn digest(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-run provenance written next to every artifact set.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    config_digest: String,
    seed: u64,
    variant: String,
}

#[derive(Parser)]
#[command(name = "cafemed", version, about = "Causal-effect-gated medication recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted causal structure and
    /// write pre-split dataset files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate per-entity causal effects from a dataset file.
    EstimateEffects {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant and write checkpoint + logs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.jsonl / val.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Causal-effect CSV ((|D|+|P|) x |M|); required for variants
        /// that use CWG.
        #[arg(long)]
        tau: Option<PathBuf>,
        #[arg(long)]
        ddi: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Bootstrap-evaluate a trained run on a dataset file.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ddi: PathBuf,
        #[arg(long, default_value_t = 10)]
        bootstrap: usize,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Train and evaluate all four variants over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit 0
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                CafeError::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CafeError> {
    match cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(config.as_deref(), &out, seed),
        Command::EstimateEffects { data, out } => cmd_estimate_effects(&data, &out),
        Command::Train {
            config,
            data,
            tau,
            ddi,
            variant,
            out,
            seed,
        } => cmd_train(config.as_deref(), &data, tau.as_deref(), &ddi, &variant, &out, seed),
        Command::Eval {
            checkpoint,
            data,
            ddi,
            bootstrap,
            report,
            seed,
        } => cmd_eval(&checkpoint, &data, &ddi, bootstrap, report.as_deref(), seed),
        Command::Gradcheck { scope } => cmd_gradcheck(&scope),
        Command::Ablate {
            config,
            data,
            seeds,
            out,
            seed,
        } => cmd_ablate(config.as_deref(), &data, seeds, &out, seed),
    }
}

fn cmd_gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<ExitCode, CafeError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let data = generate_synthetic(&cfg.data)?;
    let (train, val, test) = split_dataset(&data.records, cfg.data.seed)?;
    std::fs::create_dir_all(out)?;
    save_dataset(&out.join("train.jsonl"), &data.vocab, &train)?;
    save_dataset(&out.join("val.jsonl"), &data.vocab, &val)?;
    save_dataset(&out.join("test.jsonl"), &data.vocab, &test)?;
    data.ddi.save_json(&out.join("ddi.json"))?;
    data.tau_true.save_csv(&out.join("tau_true.csv"))?;
    save_rules(&out.join("rules.json"), &data.rules)?;
    write_run_info(out, &cfg, cfg.data.seed, "-")?;
    println!(
        "wrote {} patients ({} train / {} val / {} test), |D|={} |P|={} |M|={} to {}",
        data.records.len(),
        train.len(),
        val.len(),
        test.len(),
        data.vocab.n_diag,
        data.vocab.n_proc,
        data.vocab.n_med,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_estimate_effects(data: &Path, out: &Path) -> Result<ExitCode, CafeError> {
    let (vocab, records) = load_dataset(data)?;
    let tau = estimate_effects(&records, &vocab)?;
    tau.save_csv(out)?;
    println!(
        "estimated {} x {} effect matrix from {} patients -> {}",
        vocab.n_entities(),
        vocab.n_med,
        records.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_split_pair(dir: &Path) -> Result<(Vocabularies, Vec<PatientRecord>, Vec<PatientRecord>), CafeError> {
    let (vocab_t, train) = load_dataset(&dir.join("train.jsonl"))?;
    let (vocab_v, val) = load_dataset(&dir.join("val.jsonl"))?;
    if vocab_t != vocab_v {
        return Err(CafeError::config(format!(
            "train/val vocabulary mismatch: {vocab_t:?} vs {vocab_v:?}"
        )));
    }
    Ok((vocab_t, train, val))
}

fn build_taus(
    model_cfg: &ModelConfig,
    vocab: &Vocabularies,
    tau_path: Option<&Path>,
    train_records: &[PatientRecord],
) -> Result<TauBars, CafeError> {
    if !model_cfg.variant.uses_cwg() {
        return Ok(TauBars::zeros(vocab));
    }
    let tau_path = tau_path.expect("checked by caller");
    let tau = CausalEffectMatrix::load_csv(tau_path, vocab.n_entities(), vocab.n_med)?;
    let tau_med = if model_cfg.use_med_history_cwg {
        Some(estimate_med_effects(train_records, vocab)?)
    } else {
        None
    };
    TauBars::from_matrices(&tau, tau_med.as_ref(), vocab, model_cfg.use_med_history_cwg)
}

fn run_training(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    tau_path: Option<&Path>,
    ddi: &DdiMatrix,
    out: &Path,
) -> Result<MetricsReportSeed, CafeError> {
    let (vocab, train_recs, val_recs) = load_split_pair(data_dir)?;
    if ddi.n_med() != vocab.n_med {
        return Err(CafeError::config(format!(
            "DDI matrix covers {} medications, dataset has {}",
            ddi.n_med(),
            vocab.n_med
        )));
    }
    let taus = build_taus(&cfg.model, &vocab, tau_path, &train_recs)?;
    let inputs = TrainInputs {
        train: &train_recs,
        val: &val_recs,
        vocab: &vocab,
        taus: &taus,
        ddi,
    };
    let outcome = train(cfg.model, &cfg.train, &inputs)?;

    std::fs::create_dir_all(out)?;
    save_checkpoint(
        &out.join("checkpoint"),
        outcome
            .model
            .params
            .entries()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect::<Vec<_>>()
            .into_iter(),
        cfg.train.precision,
    )?;
    save_model_config(out, &cfg.model, &vocab)?;
    outcome.log.save_json(&out.join("train_log.json"))?;
    outcome.graphs.save_json(&out.join("homo_graphs.json"))?;
    taus.save_json(&out.join("effects.json"))?;
    write_run_info(out, cfg, cfg.train.seed, cfg.model.variant.label())?;
    Ok(MetricsReportSeed {
        model: outcome.model,
        graphs: outcome.graphs,
        taus,
        best_epoch: outcome.log.best_epoch,
        epochs: outcome.log.epochs.len(),
    })
}

/// Trained state handed from `run_training` to in-process evaluation.
struct MetricsReportSeed {
    model: Model,
    graphs: HomoGraphs,
    taus: TauBars,
    best_epoch: usize,
    epochs: usize,
}

fn cmd_train(
    config: Option<&Path>,
    data_dir: &Path,
    tau: Option<&Path>,
    ddi_path: &Path,
    variant: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<ExitCode, CafeError> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.model.variant = Variant::parse(variant)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if cfg.model.variant.uses_cwg() && tau.is_none() {
        eprintln!(
            "usage error: --tau is required for variant '{}' (CWG needs causal effects)",
            cfg.model.variant.label()
        );
        return Ok(ExitCode::from(1));
    }
    let ddi = DdiMatrix::load_json(ddi_path)?;
    let trained = run_training(&cfg, data_dir, tau, &ddi, out)?;
    println!(
        "trained variant {} for {} epochs (best epoch {}) -> {}",
        cfg.model.variant.label(),
        trained.epochs,
        trained.best_epoch,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    run_dir: &Path,
    data: &Path,
    ddi_path: &Path,
    bootstrap: usize,
    report: Option<&Path>,
    seed: u64,
) -> Result<ExitCode, CafeError> {
    let (model_cfg, vocab) = load_model_config(run_dir)?;
    let (data_vocab, records) = load_dataset(data)?;
    if data_vocab != vocab {
        return Err(CafeError::config(format!(
            "vocabulary mismatch: checkpoint {vocab:?} vs dataset {data_vocab:?}"
        )));
    }
    let ddi = DdiMatrix::load_json(ddi_path)?;
    let mut model = Model::init(model_cfg, vocab, 0)?;
    model.params.load_values(load_checkpoint(&run_dir.join("checkpoint"))?)?;
    let graphs = HomoGraphs::load_json(&run_dir.join("homo_graphs.json"))?;
    let taus = TauBars::load_json(&run_dir.join("effects.json"))?;
    let digest = read_run_info(run_dir)?.config_digest;

    let rep = evaluate(&model, &graphs, &taus, &records, &ddi, bootstrap, seed, digest)?;
    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("report.json"));
    rep.save_json(&report_path)?;
    println!(
        "jaccard {:.4}±{:.4}  ddi {:.4}±{:.4}  f1 {:.4}±{:.4}  prauc {:.4}±{:.4}  avg_med {:.2}±{:.2}  ({} rounds) -> {}",
        rep.mean.jaccard,
        rep.std.jaccard,
        rep.mean.ddi,
        rep.std.ddi,
        rep.mean.f1,
        rep.std.f1,
        rep.mean.prauc,
        rep.std.prauc,
        rep.mean.avg_med,
        rep.std.avg_med,
        rep.rounds.len(),
        report_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(scope: &str) -> Result<ExitCode, CafeError> {
    let scope = Scope::parse(scope)?;
    let results = run_gradcheck(scope)?;
    let mut worst: Option<&cafemed_core::suite::ScopeResult> = None;
    for r in &results {
        println!(
            "{:<40} max rel err {:.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed && worst.map_or(true, |w| r.max_rel_err > w.max_rel_err) {
            worst = Some(r);
        }
    }
    if let Some(w) = worst {
        eprintln!(
            "gradient check failed: {} at max rel err {:.3e}",
            w.name, w.max_rel_err
        );
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct VariantBlock {
    rounds: Vec<cafemed_core::eval::MetricValues>,
    mean: cafemed_core::eval::MetricValues,
    std: cafemed_core::eval::MetricValues,
}

#[derive(Serialize)]
struct AblationReport {
    config_digest: String,
    seeds: u64,
    variants: std::collections::BTreeMap<String, VariantBlock>,
    /// Per-seed Jaccard comparisons, e.g. "full>=no-cwg" -> wins out of K.
    ordering: std::collections::BTreeMap<String, u64>,
}

fn cmd_ablate(
    config: Option<&Path>,
    data_dir: &Path,
    seeds: u64,
    out: &Path,
    seed: Option<u64>,
) -> Result<ExitCode, CafeError> {
    let base_cfg = ExperimentConfig::load(config)?;
    let base_seed = seed.unwrap_or(base_cfg.train.seed);
    let ddi = DdiMatrix::load_json(&data_dir.join("ddi.json"))?;
    let (test_vocab, test_recs) = load_dataset(&data_dir.join("test.jsonl"))?;
    let tau_path = data_dir.join("tau_true.csv");

    std::fs::create_dir_all(out)?;
    let mut variants = std::collections::BTreeMap::new();
    let mut per_seed: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for variant in Variant::ALL {
        let mut rounds = Vec::new();
        for s in 0..seeds {
            let mut cfg = base_cfg;
            cfg.model.variant = variant;
            cfg.train.seed = base_seed + s;
            let run_dir = out.join(format!("{}-seed{}", variant.label(), cfg.train.seed));
            let trained = run_training(&cfg, data_dir, Some(&tau_path), &ddi, &run_dir)?;
            if trained.model.vocab != test_vocab {
                return Err(CafeError::config("test split vocabulary mismatch"));
            }
            let m = evaluate_split(&trained.model, &trained.graphs, &trained.taus, &test_recs, &ddi)?;
            println!(
                "{} seed {}: test jaccard {:.4}, ddi {:.4}",
                variant.label(),
                cfg.train.seed,
                m.jaccard,
                m.ddi
            );
            per_seed.entry(variant.label()).or_default().push(m.jaccard);
            rounds.push(m);
        }
        let rep = MetricsReport::from_rounds(rounds.clone(), base_cfg.digest());
        variants.insert(
            variant.label().to_string(),
            VariantBlock {
                rounds,
                mean: rep.mean,
                std: rep.std,
            },
        );
    }

    let mut ordering = std::collections::BTreeMap::new();
    for (hi, lo) in [
        ("full", "no-cwg"),
        ("full", "no-charm"),
        ("no-cwg", "none"),
        ("no-charm", "none"),
        ("full", "none"),
    ] {
        let wins = per_seed[hi]
            .iter()
            .zip(&per_seed[lo])
            .filter(|(a, b)| a >= b)
            .count() as u64;
        ordering.insert(format!("{hi}>={lo}"), wins);
    }

    let report = AblationReport {
        config_digest: base_cfg.digest(),
        seeds,
        variants,
        ordering,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CafeError::data(e.to_string()))?;
    std::fs::write(out.join("ablation.json"), json)?;
    println!("wrote {}", out.join("ablation.json").display());
    Ok(ExitCode::SUCCESS)
}

fn write_run_info(dir: &Path, cfg: &ExperimentConfig, seed: u64, variant: &str) -> Result<(), CafeError> {
    let info = RunInfo {
        config_digest: cfg.digest(),
        seed,
        variant: variant.to_string(),
    };
    let json = serde_json::to_string_pretty(&info).map_err(|e| CafeError::data(e.to_string()))?;
    std::fs::write(dir.join("run.json"), json)?;
    Ok(())
}

fn read_run_info(dir: &Path) -> Result<RunInfo, CafeError> {
    let raw = std::fs::read_to_string(dir.join("run.json"))?;
    serde_json::from_str(&raw).map_err(|e| CafeError::data(format!("run.json parse: {e}")))
}
