//! Training loop, evaluation, and run-directory artifacts.
//!
//! A run directory receives `config.toml` (snapshot), `metrics.jsonl`
//! (append-only step/epoch lines), `report.json` (final metrics) and
//! `checkpoint.ckpt` (best-validation parameters). Metric files contain no
//! timestamps, so identical config + seed reproduces them byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, OptimizerKind, TrainConfig};
use crate::data::{
    default_ontology, generate_cohort, load_cohort_jsonl, make_batches, preprocess, Batch,
    DataError, PatientRecord,
};
use crate::metrics::TopKAccumulator;
use crate::model::{batch_patient_inputs, forward_patient, Model, PatientInputs};
use crate::nn::Fwd;
use crate::objectives::{contrastive_total, hierarchical_loss, multilabel_ce, total_loss};
use crate::ontology::{Ontology, OntologyError};
use crate::params::{CheckpointError, ParamSet};
use crate::tensor::{Tape, TensorError};

/// The ks every report carries.
pub const REPORT_KS: [usize; 4] = [5, 10, 20, 30];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged: non-finite loss at step {step} (epoch {epoch})")]
    Diverged { step: usize, epoch: usize },
}

// ── Optimizers ──────────────────────────────────────────────────────────

struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, set: &ParamSet) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: set.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
                v: set.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            }),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    fn apply(&mut self, set: &mut ParamSet, grads: &[&[f64]]) {
        match self {
            Optimizer::Adam(state) => {
                state.step += 1;
                let b1t = 1.0 - state.beta1.powi(state.step as i32);
                let b2t = 1.0 - state.beta2.powi(state.step as i32);
                for (idx, grad) in grads.iter().enumerate() {
                    let m = &mut state.m[idx];
                    let v = &mut state.v[idx];
                    let data = set.by_index_mut(idx).data_mut();
                    for (((mj, vj), dj), &g) in
                        m.iter_mut().zip(v.iter_mut()).zip(data.iter_mut()).zip(grad.iter())
                    {
                        *mj = state.beta1 * *mj + (1.0 - state.beta1) * g;
                        *vj = state.beta2 * *vj + (1.0 - state.beta2) * g * g;
                        *dj -= state.lr * (*mj / b1t) / ((*vj / b2t).sqrt() + state.eps);
                    }
                }
            }
            Optimizer::Sgd { lr } => {
                for (idx, grad) in grads.iter().enumerate() {
                    let data = set.by_index_mut(idx).data_mut();
                    for (dj, &g) in data.iter_mut().zip(grad.iter()) {
                        *dj -= *lr * g;
                    }
                }
            }
        }
    }
}

// ── Reports and metric lines ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_acc30: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(k, accuracy)` pairs for k in 5/10/20/30 on the test split.
    pub acc_at: Vec<(usize, f64)>,
    pub loss_curve: Vec<EpochStats>,
    pub config_hash: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub evaluated_visits: usize,
}

impl EvalReport {
    pub fn acc_at(&self, k: usize) -> f64 {
        self.acc_at
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, v)| *v)
            .unwrap_or(0.0)
    }
}

#[derive(Serialize)]
struct StepLine<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    step: usize,
    l_ce: f64,
    l_bi_con: f64,
    l_hrchy: f64,
    l_total: f64,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    epoch: usize,
    train_loss: f64,
    valid_acc30: f64,
}

struct MetricsWriter {
    out: Option<BufWriter<File>>,
}

impl MetricsWriter {
    fn new(run_dir: Option<&Path>) -> Result<Self, TrainError> {
        let out = match run_dir {
            Some(dir) => Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?)),
            None => None,
        };
        Ok(MetricsWriter { out })
    }

    fn line<S: Serialize>(&mut self, value: &S) -> Result<(), TrainError> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, value).expect("metric lines serialize");
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        if let Some(w) = &mut self.out {
            w.flush()?;
        }
        Ok(())
    }
}

// ── Data assembly ───────────────────────────────────────────────────────

/// Ontology + preprocessed splits, resolved from a config.
pub struct Prepared {
    pub ontology: Ontology,
    pub train: Vec<PatientRecord>,
    pub valid: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

pub fn prepare_data(cfg: &TrainConfig) -> Result<Prepared, TrainError> {
    let ontology = match &cfg.data.ontology_path {
        Some(p) => Ontology::parse_file(p)?,
        None => default_ontology(),
    };
    let raw = match &cfg.data.cohort_path {
        Some(p) => load_cohort_jsonl(p)?,
        None => generate_cohort(cfg.data.data_seed, cfg.data.patients, &ontology, &cfg.data.gen)?,
    };
    let cleaned = preprocess(raw, cfg.data.gen.max_visits, cfg.data.gen.note_cap);
    for r in &cleaned {
        for v in &r.visits {
            if let Some(&bad) = v.note.iter().find(|t| **t >= cfg.data.gen.vocab) {
                return Err(DataError::Config(format!(
                    "patient {}: note token {bad} exceeds vocab {}",
                    r.patient_id, cfg.data.gen.vocab
                ))
                .into());
            }
        }
    }
    let (train, valid, test) = crate::data::split(&cleaned, cfg.data.ratios, cfg.data.split_seed)?;
    Ok(Prepared { ontology, train, valid, test })
}

fn dense_leaf_targets(ont: &Ontology, sets: &[Vec<usize>]) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(sets.len() * ont.leaves());
    for set in sets {
        out.extend(ont.leaf_label_vector(set)?.as_f64());
    }
    Ok(out)
}

fn dense_parent_targets(ont: &Ontology, sets: &[Vec<usize>]) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(sets.len() * ont.parents());
    for set in sets {
        out.extend(ont.ancestor_label_vector(set)?.as_f64());
    }
    Ok(out)
}

struct StepLosses {
    ce: f64,
    bi_con: f64,
    hrchy: f64,
    total: f64,
}

/// Builds the batch graph and runs backward; gradients stay on the returned
/// tape (read them through `bound_ids`).
fn train_step(
    model: &Model,
    params: &ParamSet,
    batch: &Batch,
    ont: &Ontology,
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(Tape, Vec<crate::tensor::TensorId>, StepLosses), TrainError> {
    let step_start = std::time::Instant::now();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params);
    let min_note = model.cfg.max_filter();
    // loss-term ablation switches zero their weights outright
    let mut lambda = cfg.loss.clone();
    if cfg.ablation.no_contrastive {
        lambda.lambda_bi_con = 0.0;
    }
    if cfg.ablation.no_hierarchy {
        lambda.lambda_hrchy = 0.0;
    }

    let mut ce_terms = Vec::new();
    let mut hr_terms = Vec::new();
    let mut pooled: [Vec<crate::tensor::TensorId>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    for p in 0..batch.patients() {
        let inputs = batch_patient_inputs(batch, p, min_note);
        if inputs.codes.is_empty() {
            continue;
        }
        let t = inputs.codes.len();
        let mut fwd = Fwd {
            tape: &mut tape,
            train: true,
            dropout_rate: model.cfg.dropout,
            rng: dropout_rng,
        };
        let out = forward_patient(&mut fwd, model, &bound, &inputs, &cfg.ablation)?;

        let target_sets = &batch.target_codes[p][..t];
        let leaf_targets = dense_leaf_targets(ont, target_sets)?;
        let mask = vec![true; t];
        ce_terms.push(multilabel_ce(&mut tape, out.probs, &leaf_targets, &mask)?);

        if lambda.lambda_hrchy > 0.0 {
            let parent_targets = dense_parent_targets(ont, target_sets)?;
            hr_terms.push(hierarchical_loss(&mut tape, &out.parent_probs, &parent_targets, &mask)?);
        }
        for (m, id) in out.pooled.into_iter().enumerate() {
            pooled[m].push(id);
        }
    }

    let mean_of = |tape: &mut Tape, terms: &[crate::tensor::TensorId]| -> Result<crate::tensor::TensorId, TrainError> {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = tape.add(acc, *t)?;
        }
        Ok(tape.scale(acc, 1.0 / terms.len() as f64))
    };

    let ce = mean_of(&mut tape, &ce_terms)?;
    let mut parts = vec![(ce, lambda.lambda_ce)];

    let mut bi_con = None;
    if lambda.lambda_bi_con > 0.0 {
        let code = tape.concat(&pooled[0], 0)?;
        let demo = tape.concat(&pooled[1], 0)?;
        let note = tape.concat(&pooled[2], 0)?;
        let l = contrastive_total(&mut tape, code, demo, note, lambda.tau, lambda.alpha_con)?;
        bi_con = Some(l);
        parts.push((l, lambda.lambda_bi_con));
    }
    let mut hrchy = None;
    if lambda.lambda_hrchy > 0.0 {
        let l = mean_of(&mut tape, &hr_terms)?;
        hrchy = Some(l);
        parts.push((l, lambda.lambda_hrchy));
    }

    let fwd_done = std::time::Instant::now();
    let total = total_loss(&mut tape, &parts)?;
    let losses = StepLosses {
        ce: tape.scalar_value(ce),
        bi_con: bi_con.map_or(0.0, |id| tape.scalar_value(id)),
        hrchy: hrchy.map_or(0.0, |id| tape.scalar_value(id)),
        total: tape.scalar_value(total),
    };
    if !losses.total.is_finite() {
        return Err(TrainError::Diverged { step: 0, epoch: 0 }); // filled by caller
    }
    tape.backward(total)?;
    if std::env::var("EHRFUSE_PHASE_TIMING").is_ok() {
        eprintln!(
            "phase fwd={:.1}ms bwd={:.1}ms nodes={}",
            fwd_done.duration_since(step_start).as_secs_f64() * 1e3,
            fwd_done.elapsed().as_secs_f64() * 1e3,
            tape.len(),
        );
    }
    let ids = bound.ids.clone();
    Ok((tape, ids, losses))
}

/// Deterministic evaluation: dropout off, no parameter mutation, record
/// order preserved.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    records: &[PatientRecord],
    batch_size: usize,
    ablation: &crate::config::AblationSwitches,
) -> Result<TopKAccumulator, TrainError> {
    let mut acc = TopKAccumulator::new(&REPORT_KS);
    let min_note = model.cfg.max_filter();
    for batch in make_batches(records, batch_size, None) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, params);
        for p in 0..batch.patients() {
            let inputs = batch_patient_inputs(&batch, p, min_note);
            if inputs.codes.is_empty() {
                continue;
            }
            let t = inputs.codes.len();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut fwd = Fwd { tape: &mut tape, train: false, dropout_rate: 0.0, rng: &mut rng };
            let out = forward_patient(&mut fwd, model, &bound, &inputs, ablation)?;
            let probs = tape.value(out.probs);
            let leaves = model.leaves;
            for v in 0..t {
                acc.add_visit(&probs[v * leaves..(v + 1) * leaves], &batch.target_codes[p][v]);
            }
        }
    }
    Ok(acc)
}

/// Scores a single patient history with a trained model; returns the
/// per-visit probability rows.
pub fn score_patient(
    model: &Model,
    params: &ParamSet,
    inputs: &PatientInputs,
    ablation: &crate::config::AblationSwitches,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut fwd = Fwd { tape: &mut tape, train: false, dropout_rate: 0.0, rng: &mut rng };
    let out = forward_patient(&mut fwd, model, &bound, inputs, ablation)?;
    let probs = tape.value(out.probs);
    let leaves = model.leaves;
    Ok((0..inputs.codes.len())
        .map(|v| probs[v * leaves..(v + 1) * leaves].to_vec())
        .collect())
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamSet,
    pub report: EvalReport,
    pub ontology: Ontology,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 27)
}

/// Trains per the config. Adam with a constant learning rate by default,
/// early stopping on validation accuracy@30 with the configured patience,
/// best-validation parameters retained and written to the run directory.
pub fn train(cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    }
    let data = prepare_data(cfg)?;
    let model = Model::new(
        cfg.model.clone(),
        data.ontology.leaves(),
        data.ontology.parents(),
        cfg.data.gen.vocab,
    );
    let mut params = model.init_params(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, &params);
    let mut metrics = MetricsWriter::new(run_dir)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD20));

    let mut best_params = params.clone();
    let mut best_acc30 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut curve = Vec::new();
    let mut step_counter = 0usize;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let batches = make_batches(&data.train, cfg.batch_size, Some(mix_seed(cfg.seed, epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut steps_in_epoch = 0usize;
        for batch in &batches {
            step_counter += 1;
            let (tape, ids, losses) = train_step(&model, &params, batch, &data.ontology, cfg, &mut dropout_rng)
                .map_err(|e| match e {
                    TrainError::Diverged { .. } => TrainError::Diverged { step: step_counter, epoch },
                    other => other,
                })?;
            let grads: Vec<&[f64]> = ids.iter().map(|id| tape.grad(*id)).collect();
            optimizer.apply(&mut params, &grads);
            drop(tape);
            epoch_loss += losses.total;
            steps_in_epoch += 1;
            metrics.line(&StepLine {
                kind: "step",
                step: step_counter,
                l_ce: losses.ce,
                l_bi_con: losses.bi_con,
                l_hrchy: losses.hrchy,
                l_total: losses.total,
            })?;
        }
        let train_loss = epoch_loss / steps_in_epoch.max(1) as f64;

        let valid_acc = evaluate(&model, &params, &data.valid, cfg.batch_size, &cfg.ablation)?;
        let acc30 = valid_acc.mean_at(30);
        curve.push(EpochStats { epoch, train_loss, valid_acc30: acc30 });
        metrics.line(&EpochLine { kind: "epoch", epoch, train_loss, valid_acc30: acc30 })?;
        log::info!("epoch {epoch}: train loss {train_loss:.4}, valid acc@30 {acc30:.4}");

        if acc30 > best_acc30 {
            best_acc30 = acc30;
            best_epoch = epoch;
            best_params = params.clone();
        } else if epoch - best_epoch >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    let test_acc = evaluate(&model, &best_params, &data.test, cfg.batch_size, &cfg.ablation)?;
    let report = EvalReport {
        acc_at: test_acc.means(),
        loss_curve: curve,
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        epochs_run,
        best_epoch,
        stopped_early,
        evaluated_visits: test_acc.visits(),
    };

    if let Some(dir) = run_dir {
        best_params.save(&dir.join("checkpoint.ckpt"))?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(dir.join("report.json"), json)?;
        metrics.flush()?;
    }

    Ok(TrainOutcome { model, params: best_params, report, ontology: data.ontology })
}

/// Loads a checkpoint and validates it against the model layout implied by
/// the config, listing offending parameters on mismatch.
pub fn load_checkpoint(cfg: &TrainConfig, path: &Path) -> Result<(Model, ParamSet, Ontology), TrainError> {
    let ontology = match &cfg.data.ontology_path {
        Some(p) => Ontology::parse_file(p)?,
        None => default_ontology(),
    };
    let model = Model::new(cfg.model.clone(), ontology.leaves(), ontology.parents(), cfg.data.gen.vocab);
    let params = ParamSet::load(path)?;
    params.validate_layout(&model.expected_layout())?;
    Ok((model, params, ontology))
}

/// Writes a report as pretty JSON.
pub fn write_report(report: &EvalReport, path: &PathBuf) -> Result<(), TrainError> {
    std::fs::write(path, serde_json::to_string_pretty(report).expect("report serializes"))?;
    Ok(())
}
