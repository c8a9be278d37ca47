//! End-to-end CafeMed network: embedding tables, homogeneous
//! within-modality graph encoding, per-visit CWG+CHARM fusion, three GRU
//! sequence encoders, learnable fusion weights, and medication scoring.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::charm::{self, CharmInput, CharmVars};
use crate::cwg::{self, CwgVars, Modality};
use crate::data::{CausalEffectMatrix, PatientRecord, Visit, Vocabularies};
use crate::error::{CafeError, Result};
use crate::numerics::gru::{gru_cell, GruVars};
use crate::numerics::params::ParamVars;
use crate::numerics::tensor::Tensor;
use crate::numerics::{rng, ParamKind, ParamSet, SparseMatrix, Tape, Var};

/// The four ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-cwg")]
    NoCwg,
    #[serde(rename = "no-charm")]
    NoCharm,
    #[serde(rename = "none")]
    None,
}

impl Variant {
    pub fn uses_cwg(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCharm)
    }

    pub fn uses_charm(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCwg)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCwg => "no-cwg",
            Variant::NoCharm => "no-charm",
            Variant::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-cwg" => Ok(Variant::NoCwg),
            "no-charm" => Ok(Variant::NoCharm),
            "none" => Ok(Variant::None),
            other => Err(CafeError::config(format!(
                "unknown variant {other:?} (expected full, no-cwg, no-charm, none)"
            ))),
        }
    }

    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoCwg, Variant::NoCharm, Variant::None];
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub l_slots: usize,
    pub dropout_p: f64,
    pub alpha: f64,
    pub variant: Variant,
    pub use_med_history_cwg: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            l_slots: 16,
            dropout_p: 0.7,
            alpha: cwg::DEFAULT_ALPHA,
            variant: Variant::Full,
            use_med_history_cwg: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(CafeError::config(format!(
                "model config: d = {} must be a positive multiple of 4",
                self.d
            )));
        }
        if self.l_slots == 0 {
            return Err(CafeError::config("model config: l_slots must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CafeError::config(format!(
                "model config: dropout_p = {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(CafeError::config("model config: alpha must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-modality aggregated causal effects tau_bar, indexed by entity ID.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauBars {
    pub diag: Vec<f64>,
    #[serde(rename = "proc")]
    pub proc_: Vec<f64>,
    pub med: Vec<f64>,
}

impl TauBars {
    pub fn zeros(vocab: &Vocabularies) -> Self {
        TauBars {
            diag: vec![0.0; vocab.n_diag],
            proc_: vec![0.0; vocab.n_proc],
            med: vec![0.0; vocab.n_med],
        }
    }

    /// Aggregate the entity matrix (and optionally a med-by-med matrix)
    /// into per-entity scalars. Without a med matrix, or with the
    /// med-history path disabled, the med vector is zero (neutral gate).
    pub fn from_matrices(
        tau_entity: &CausalEffectMatrix,
        tau_med: Option<&CausalEffectMatrix>,
        vocab: &Vocabularies,
        use_med_history_cwg: bool,
    ) -> Result<Self> {
        let diag = cwg::aggregate_effects(tau_entity, vocab, Modality::Diag)?;
        let proc_ = cwg::aggregate_effects(tau_entity, vocab, Modality::Proc)?;
        let med = match (use_med_history_cwg, tau_med) {
            (true, Some(m)) => cwg::aggregate_effects(m, vocab, Modality::Med)?,
            _ => vec![0.0; vocab.n_med],
        };
        Ok(TauBars { diag, proc_, med })
    }

    pub fn validate(&self, vocab: &Vocabularies) -> Result<()> {
        if self.diag.len() != vocab.n_diag
            || self.proc_.len() != vocab.n_proc
            || self.med.len() != vocab.n_med
        {
            return Err(CafeError::shape(format!(
                "effects: lengths ({}, {}, {}) vs vocab ({}, {}, {})",
                self.diag.len(),
                self.proc_.len(),
                self.med.len(),
                vocab.n_diag,
                vocab.n_proc,
                vocab.n_med
            )));
        }
        for v in self.diag.iter().chain(&self.proc_).chain(&self.med) {
            if !v.is_finite() {
                return Err(CafeError::numeric("effects: non-finite tau_bar"));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| CafeError::data(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| CafeError::data(format!("effects parse: {e}")))
    }

    fn for_modality(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Diag => &self.diag,
            Modality::Proc => &self.proc_,
            Modality::Med => &self.med,
        }
    }
}

/// Symmetric-normalized co-occurrence adjacency per modality:
/// A_hat = D^{-1/2} (A + I) D^{-1/2}, built from the training split only.
pub struct HomoGraphs {
    pub diag: Rc<SparseMatrix>,
    pub proc_: Rc<SparseMatrix>,
    pub med: Rc<SparseMatrix>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    n: usize,
    edges: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct GraphsFile {
    diag: GraphFile,
    #[serde(rename = "proc")]
    proc_: GraphFile,
    med: GraphFile,
}

fn normalize_edges(n: usize, edges: &BTreeSet<(usize, usize)>) -> Result<SparseMatrix> {
    // degree counts the self-loop plus distinct neighbors
    let mut deg = vec![1.0f64; n];
    for &(i, j) in edges {
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    let mut triplets = Vec::with_capacity(n + 2 * edges.len());
    for i in 0..n {
        triplets.push((i, i, 1.0 / deg[i]));
    }
    for &(i, j) in edges {
        let v = 1.0 / (deg[i] * deg[j]).sqrt();
        triplets.push((i, j, v));
        triplets.push((j, i, v));
    }
    SparseMatrix::from_triplets(n, triplets)
}

fn cooccurrence_edges<'a>(
    sets: impl Iterator<Item = &'a [usize]>,
) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for ids in sets {
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                edges.insert((ids[a].min(ids[b]), ids[a].max(ids[b])));
            }
        }
    }
    edges
}

pub fn build_homo_graphs(train: &[PatientRecord], vocab: &Vocabularies) -> Result<HomoGraphs> {
    if train.is_empty() {
        return Err(CafeError::data("build_homo_graphs: empty training split"));
    }
    let visits: Vec<&Visit> = train.iter().flat_map(|r| r.visits.iter()).collect();
    let diag = cooccurrence_edges(visits.iter().map(|v| v.diag.as_slice()));
    let proc_ = cooccurrence_edges(visits.iter().map(|v| v.proc_.as_slice()));
    let med = cooccurrence_edges(visits.iter().map(|v| v.med.as_slice()));
    Ok(HomoGraphs {
        diag: Rc::new(normalize_edges(vocab.n_diag, &diag)?),
        proc_: Rc::new(normalize_edges(vocab.n_proc, &proc_)?),
        med: Rc::new(normalize_edges(vocab.n_med, &med)?),
    })
}

impl HomoGraphs {
    fn graph(&self, m: Modality) -> Rc<SparseMatrix> {
        match m {
            Modality::Diag => Rc::clone(&self.diag),
            Modality::Proc => Rc::clone(&self.proc_),
            Modality::Med => Rc::clone(&self.med),
        }
    }

    fn to_edges(matrix: &SparseMatrix) -> GraphFile {
        let edges = matrix
            .triplets()
            .into_iter()
            .filter(|&(i, j, _)| i < j)
            .map(|(i, j, _)| [i, j])
            .collect();
        GraphFile {
            n: matrix.n(),
            edges,
        }
    }

    fn from_edges(file: &GraphFile) -> Result<Rc<SparseMatrix>> {
        let mut edges = BTreeSet::new();
        for &[i, j] in &file.edges {
            if i >= j || j >= file.n {
                return Err(CafeError::data(format!(
                    "graph file: bad edge [{i}, {j}] for n = {}",
                    file.n
                )));
            }
            edges.insert((i, j));
        }
        Ok(Rc::new(normalize_edges(file.n, &edges)?))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = GraphsFile {
            diag: Self::to_edges(&self.diag),
            proc_: Self::to_edges(&self.proc_),
            med: Self::to_edges(&self.med),
        };
        let json =
            serde_json::to_string(&file).map_err(|e| CafeError::data(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let file: GraphsFile =
            serde_json::from_str(&raw).map_err(|e| CafeError::data(format!("graphs parse: {e}")))?;
        Ok(HomoGraphs {
            diag: Self::from_edges(&file.diag)?,
            proc_: Self::from_edges(&file.proc_)?,
            med: Self::from_edges(&file.med)?,
        })
    }
}

/// One GCN-style propagation step: E_homo = ReLU(A_hat . E . W).
pub fn homo_encode(tape: &mut Tape, graph: Rc<SparseMatrix>, e: Var, w: Var) -> Result<Var> {
    let all: Vec<usize> = (0..graph.n()).collect();
    let agg = tape.spmm_rows(graph, &all, e)?;
    let proj = tape.matmul(agg, w)?;
    Ok(tape.relu(proj))
}

/// Anything that can resolve parameter names to tape handles: the real
/// [`ParamVars`] registry, or an ad-hoc map in gradient-check harnesses.
pub trait VarSource {
    fn var(&self, name: &str) -> Var;
}

impl VarSource for ParamVars {
    fn var(&self, name: &str) -> Var {
        ParamVars::var(self, name)
    }
}

pub struct NamedVars {
    map: HashMap<String, Var>,
}

impl NamedVars {
    pub fn new(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        let map = names.into_iter().zip(vars.iter().copied()).collect();
        NamedVars { map }
    }
}

impl VarSource for NamedVars {
    fn var(&self, name: &str) -> Var {
        self.map[name]
    }
}

fn cwg_vars(v: &impl VarSource, m: Modality) -> CwgVars {
    let l = m.label();
    CwgVars {
        w1: v.var(&format!("cwg.{l}.w1")),
        b1: v.var(&format!("cwg.{l}.b1")),
        w2: v.var(&format!("cwg.{l}.w2")),
        b2: v.var(&format!("cwg.{l}.b2")),
    }
}

fn charm_vars(v: &impl VarSource) -> CharmVars {
    CharmVars {
        ca_w1: v.var("charm.ca_w1"),
        ca_b1: v.var("charm.ca_b1"),
        ca_w2: v.var("charm.ca_w2"),
        ca_b2: v.var("charm.ca_b2"),
        conv1_k: v.var("charm.conv1_k"),
        conv1_b: v.var("charm.conv1_b"),
        in1_gamma: v.var("charm.in1_gamma"),
        in1_beta: v.var("charm.in1_beta"),
        conv2_k: v.var("charm.conv2_k"),
        conv2_b: v.var("charm.conv2_b"),
        in2_gamma: v.var("charm.in2_gamma"),
        in2_beta: v.var("charm.in2_beta"),
        gate_a: v.var("charm.gate_a"),
        gate_b: v.var("charm.gate_b"),
    }
}

fn gru_vars(v: &impl VarSource, m: Modality) -> GruVars {
    let l = m.label();
    GruVars {
        w_z: v.var(&format!("gru.{l}.w_z")),
        u_z: v.var(&format!("gru.{l}.u_z")),
        b_iz: v.var(&format!("gru.{l}.b_iz")),
        b_hz: v.var(&format!("gru.{l}.b_hz")),
        w_r: v.var(&format!("gru.{l}.w_r")),
        u_r: v.var(&format!("gru.{l}.u_r")),
        b_ir: v.var(&format!("gru.{l}.b_ir")),
        b_hr: v.var(&format!("gru.{l}.b_hr")),
        w_n: v.var(&format!("gru.{l}.w_n")),
        u_n: v.var(&format!("gru.{l}.u_n")),
        b_in: v.var(&format!("gru.{l}.b_in")),
        b_hn: v.var(&format!("gru.{l}.b_hn")),
    }
}

const MODALITIES: [Modality; 3] = [Modality::Diag, Modality::Proc, Modality::Med];

/// The model: configuration, vocabulary, and the parameter registry.
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabularies,
    pub params: ParamSet,
}

impl Model {
    pub fn init(cfg: ModelConfig, vocab: Vocabularies, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let cr = charm::channel_hidden(d);
        let ch = d / 4; // CWG bottleneck width
        let mut r = rng::stream(seed, "init");
        let mut set = ParamSet::new();
        let w = |set: &mut ParamSet, name: &str, shape: &[usize], fan_in: usize, r: &mut rand_chacha::ChaCha8Rng| {
            set.add(name, Tensor::uniform_init(shape, fan_in, r), ParamKind::Weight);
        };
        let b = |set: &mut ParamSet, name: &str, shape: &[usize], fan_in: usize, r: &mut rand_chacha::ChaCha8Rng| {
            set.add(name, Tensor::uniform_init(shape, fan_in, r), ParamKind::Bias);
        };

        let sizes = [vocab.n_diag, vocab.n_proc, vocab.n_med];
        for (m, n) in MODALITIES.iter().zip(sizes) {
            // Embedding rows use unit-scale init (fan_in 1), not the linear-layer
            // 1/sqrt(d) rule: downstream pooling and gated attention attenuate the
            // visit encoding heavily, and a 1/sqrt(d) scale leaves it far below
            // the bias scale of the recurrent layers, stalling optimization in a
            // constant-predictor basin.
            w(&mut set, &format!("embed.{}", m.label()), &[n, d], 1, &mut r);
        }
        for m in MODALITIES {
            w(&mut set, &format!("homo.{}.w", m.label()), &[d, d], d, &mut r);
        }
        // The aggregated effect input divides by the med-vocabulary size, so a
        // causal entity's tau-bar is on the order of 1/|M|. The first gate
        // layer is init-scaled by |M|/4 to give the gate usable dynamic range
        // from the start; unit-scale weights would leave the gate numerically
        // blind to its input next to the bias terms.
        let tau_scale = vocab.n_med as f64 / 4.0;
        for m in MODALITIES {
            let l = m.label();
            let mut w1 = Tensor::uniform_init(&[1, ch], 1, &mut r);
            for v in w1.data_mut() {
                *v *= tau_scale;
            }
            set.add(&format!("cwg.{l}.w1"), w1, ParamKind::Weight);
            b(&mut set, &format!("cwg.{l}.b1"), &[ch], 1, &mut r);
            w(&mut set, &format!("cwg.{l}.w2"), &[ch, d], ch, &mut r);
            b(&mut set, &format!("cwg.{l}.b2"), &[d], ch, &mut r);
        }
        // Open-gate initialization: every sigmoid gate in the attention stack
        // starts near 1 (bias 2 → σ ≈ 0.88) so the block begins close to a
        // pass-through of its input and attention is learned as a refinement.
        // Starting the gates at σ ≈ 0.5 compounds to an ~8x attenuation of the
        // feature path, which stalls the early epochs badly.
        w(&mut set, "charm.ca_w1", &[d, cr], d, &mut r);
        b(&mut set, "charm.ca_b1", &[cr], d, &mut r);
        w(&mut set, "charm.ca_w2", &[cr, d], cr, &mut r);
        set.add("charm.ca_b2", Tensor::full(&[d], 2.0), ParamKind::Bias);
        w(&mut set, "charm.conv1_k", &[d, d, 7, 7], d * 49, &mut r);
        b(&mut set, "charm.conv1_b", &[d], d * 49, &mut r);
        set.add("charm.in1_gamma", Tensor::full(&[d], 1.0), ParamKind::Bias);
        set.add("charm.in1_beta", Tensor::zeros(&[d]), ParamKind::Bias);
        w(&mut set, "charm.conv2_k", &[d, d, 7, 7], d * 49, &mut r);
        b(&mut set, "charm.conv2_b", &[d], d * 49, &mut r);
        set.add("charm.in2_gamma", Tensor::full(&[d], 1.0), ParamKind::Bias);
        set.add("charm.in2_beta", Tensor::full(&[d], 2.0), ParamKind::Bias);
        // Same scale-matching for the causal gate slope (input is a per-slot
        // tau-bar of order 1/|M|): slope |M|/2 puts slots with causal mass
        // near σ(Σ_j τ_ij / 2) ≈ 0.9 while zero-effect slots sit at σ(0) =
        // 0.5, so the planted effects act as a genuine relevance prior from
        // the first step. The open-gate bias is deliberately NOT applied
        // here — it would flatten exactly the discrimination this gate is
        // meant to provide.
        set.add("charm.gate_a", Tensor::scalar(vocab.n_med as f64 / 2.0), ParamKind::Bias);
        set.add("charm.gate_b", Tensor::scalar(0.0), ParamKind::Bias);
        for m in MODALITIES {
            let l = m.label();
            set.add(&format!("fusion.{l}.rho0"), Tensor::scalar(1.0), ParamKind::Bias);
            set.add(&format!("fusion.{l}.rho1"), Tensor::scalar(1.0), ParamKind::Bias);
        }
        for m in MODALITIES {
            let l = m.label();
            for gate in ["z", "r", "n"] {
                w(&mut set, &format!("gru.{l}.w_{gate}"), &[d, d], d, &mut r);
                w(&mut set, &format!("gru.{l}.u_{gate}"), &[d, d], d, &mut r);
                b(&mut set, &format!("gru.{l}.b_i{gate}"), &[d], d, &mut r);
                b(&mut set, &format!("gru.{l}.b_h{gate}"), &[d], d, &mut r);
            }
        }
        w(&mut set, "query.w1", &[6 * d, 2 * d], 6 * d, &mut r);
        b(&mut set, "query.b1", &[2 * d], 6 * d, &mut r);
        w(&mut set, "query.w2", &[2 * d, vocab.n_med], 2 * d, &mut r);
        b(&mut set, "query.b2", &[vocab.n_med], 2 * d, &mut r);

        Ok(Model { cfg, vocab, params: set })
    }

    /// Logits for every prefix of the visit sequence: output t scores the
    /// medications of visit t given visits 1..=t (med history lags by one).
    pub fn forward_seq(
        &self,
        tape: &mut Tape,
        vars: &impl VarSource,
        graphs: &HomoGraphs,
        taus: &TauBars,
        visits: &[Visit],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<VisitOutput>> {
        if visits.is_empty() {
            return Err(CafeError::data("forward: empty visit history"));
        }
        taus.validate(&self.vocab)?;

        // one homogeneous propagation per tape, shared by all visits
        let mut homo_tables = Vec::with_capacity(3);
        for m in MODALITIES {
            let e = vars.var(&format!("embed.{}", m.label()));
            let w = vars.var(&format!("homo.{}.w", m.label()));
            homo_tables.push(homo_encode(tape, graphs.graph(m), e, w)?);
        }
        let homo_tables = [homo_tables[0], homo_tables[1], homo_tables[2]];

        let d = self.cfg.d;
        let zero_h = tape.constant(Tensor::zeros(&[1, d]));
        let mut hidden = [zero_h; 3];
        let grus: Vec<GruVars> = MODALITIES.iter().map(|&m| gru_vars(vars, m)).collect();
        let qw1 = vars.var("query.w1");
        let qb1 = vars.var("query.b1");
        let qw2 = vars.var("query.w2");
        let qb2 = vars.var("query.b2");

        let mut outputs = Vec::with_capacity(visits.len());
        for (t, visit) in visits.iter().enumerate() {
            let prev_meds: &[usize] = if t == 0 { &[] } else { &visits[t - 1].med };
            let xs = encode_visit(
                tape,
                vars,
                &self.cfg,
                &homo_tables,
                &visit.diag,
                &visit.proc_,
                prev_meds,
                taus,
                train,
                rng,
            )?;
            for m in 0..3 {
                hidden[m] = gru_cell(tape, xs[m], hidden[m], &grus[m])?;
            }
            // single-layer GRU: the final output o_T equals h_T, so Eq. 16's
            // six-way concatenation reuses the same nodes
            let z = tape.concat(
                &[hidden[0], hidden[1], hidden[2], hidden[0], hidden[1], hidden[2]],
                1,
            )?;
            let q = tape.linear(z, qw1, qb1)?;
            let q = tape.relu(q);
            let logits = tape.linear(q, qw2, qb2)?;
            outputs.push(VisitOutput { logits, z });
        }
        Ok(outputs)
    }

    /// Logits for the final visit of the history.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &impl VarSource,
        graphs: &HomoGraphs,
        taus: &TauBars,
        visits: &[Visit],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let outputs = self.forward_seq(tape, vars, graphs, taus, visits, train, rng)?;
        Ok(outputs.last().expect("non-empty history").logits)
    }
}

pub struct VisitOutput {
    pub logits: Var,
    pub z: Var,
}

/// Eq. 15 for one visit: modulated embeddings fused per modality from the
/// homogeneous-graph path and the CHARM (or plain pooling) path.
#[allow(clippy::too_many_arguments)]
pub fn encode_visit(
    tape: &mut Tape,
    vars: &impl VarSource,
    cfg: &ModelConfig,
    homo_tables: &[Var; 3],
    diag: &[usize],
    proc_: &[usize],
    prev_meds: &[usize],
    taus: &TauBars,
    train: bool,
    rng: &mut impl Rng,
) -> Result<[Var; 3]> {
    if diag.is_empty() && proc_.is_empty() {
        return Err(CafeError::data(
            "encode_visit: diagnosis and procedure sets are both empty",
        ));
    }
    let d = cfg.d;
    let l = cfg.l_slots;
    let id_sets: [&[usize]; 3] = [diag, proc_, prev_meds];

    // keep the L most recent entities per modality for the slot grid
    let slot_ids: Vec<&[usize]> = id_sets
        .iter()
        .map(|ids| &ids[ids.len().saturating_sub(l)..])
        .collect();

    // modulated slot embeddings, one [k, d] block per modality
    let mut blocks: Vec<Option<Var>> = Vec::with_capacity(3);
    for (mi, m) in MODALITIES.iter().enumerate() {
        let ids = slot_ids[mi];
        if ids.is_empty() {
            blocks.push(None);
            continue;
        }
        let table = vars.var(&format!("embed.{}", m.label()));
        let mut h = tape.gather_rows(table, ids)?;
        let apply_cwg = cfg.variant.uses_cwg()
            && (*m != Modality::Med || cfg.use_med_history_cwg);
        if apply_cwg {
            let tb: Vec<f64> = ids.iter().map(|&i| taus.for_modality(*m)[i]).collect();
            let tb = tape.constant(Tensor::new(vec![ids.len(), 1], tb)?);
            let p = cwg_vars(vars, *m);
            let w = cwg::cwg_forward(tape, tb, &p)?;
            h = cwg::modulate(tape, h, w, cfg.alpha)?;
        }
        blocks.push(Some(h));
    }

    // CHARM path (or masked-mean fallback)
    let pooled: [Var; 3] = if cfg.variant.uses_charm() {
        let mut rows = Vec::with_capacity(3);
        let mut mask = Vec::with_capacity(3 * l);
        let mut tau_grid = Vec::with_capacity(3 * l);
        for (mi, m) in MODALITIES.iter().enumerate() {
            let ids = slot_ids[mi];
            let row = match blocks[mi] {
                Some(h) => tape.pad_rows(h, l)?,
                None => tape.constant(Tensor::zeros(&[l, d])),
            };
            rows.push(row);
            for s in 0..l {
                let valid = s < ids.len();
                mask.push(if valid { 1.0 } else { 0.0 });
                tau_grid.push(if valid { taus.for_modality(*m)[ids[s]] } else { 0.0 });
            }
        }
        let grid = tape.concat(&rows, 0)?; // [3L, d]
        let grid = tape.reshape(grid, &[1, 3, l, d])?;
        let grid = tape.permute(grid, &[0, 3, 1, 2])?; // [1, d, 3, L]
        let tau_grid = tape.constant(Tensor::new(vec![1, 1, 3, l], tau_grid)?);
        let input = CharmInput {
            x: grid,
            mask,
            tau_grid,
        };
        let p = charm_vars(vars);
        let (_, pooled) = charm::charm_forward(tape, &input, &p)?;
        pooled
    } else {
        let mut pooled = Vec::with_capacity(3);
        for block in blocks.iter() {
            let v = match block {
                Some(h) => {
                    let mean = tape.mean_rows(*h)?;
                    tape.reshape(mean, &[1, d])?
                }
                None => tape.constant(Tensor::zeros(&[1, d])),
            };
            pooled.push(v);
        }
        [pooled[0], pooled[1], pooled[2]]
    };

    // homogeneous-path visit vector: masked mean over all visit entities
    let mut out = Vec::with_capacity(3);
    for (mi, m) in MODALITIES.iter().enumerate() {
        let ids = id_sets[mi];
        let e_homo = if ids.is_empty() {
            tape.constant(Tensor::zeros(&[1, d]))
        } else {
            let rows = tape.gather_rows(homo_tables[mi], ids)?;
            let mean = tape.mean_rows(rows)?;
            tape.reshape(mean, &[1, d])?
        };
        let rho0 = vars.var(&format!("fusion.{}.rho0", m.label()));
        let rho1 = vars.var(&format!("fusion.{}.rho1", m.label()));
        let a = tape.mul_scalar_var(e_homo, rho0)?;
        let b = tape.mul_scalar_var(pooled[mi], rho1)?;
        let e = tape.add(a, b)?;
        let e = tape.dropout(e, cfg.dropout_p, train, rng)?;
        out.push(e);
    }
    Ok([out[0], out[1], out[2]])
}

/// Medications whose sigmoid score clears the threshold (inclusive).
pub fn predict(scores: &[f64], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| crate::numerics::tape::sigmoid(s) >= threshold)
        .map(|(j, _)| j)
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ModelConfigFile {
    config: ModelConfig,
    vocab: Vocabularies,
}

pub fn save_model_config(dir: &Path, cfg: &ModelConfig, vocab: &Vocabularies) -> Result<()> {
    let file = ModelConfigFile {
        config: *cfg,
        vocab: *vocab,
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| CafeError::data(e.to_string()))?;
    fs::write(dir.join("model_config.json"), json)?;
    Ok(())
}

pub fn load_model_config(dir: &Path) -> Result<(ModelConfig, Vocabularies)> {
    let raw = fs::read_to_string(dir.join("model_config.json"))?;
    let file: ModelConfigFile = serde_json::from_str(&raw)
        .map_err(|e| CafeError::config(format!("model config parse: {e}")))?;
    file.config.validate()?;
    Ok((file.config, file.vocab))
}
