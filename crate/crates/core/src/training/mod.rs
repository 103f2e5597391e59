//! Teacher training and student distillation.
//!
//! Each step computes per-sequence gradients (in parallel when enabled),
//! sums them in batch order and divides by the batch size, so a batch loss is
//! the mean over sequences of each sequence's token-mean loss.

mod loss;
mod optim;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::Partition;
use crate::corpus::TokenSeq;
use crate::model::{forward, LanguageModel, ModelConfig, ModelError};
use crate::numeric::{NumericError, Tape, Tensor, Var};
use crate::par::{self, Exec};

pub use loss::{ce_loss, distill_loss, distill_loss_on_tape, kl_div, LossError, LossParts, TeacherRows};
pub use optim::Optimizer;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),
    #[error("data_selection = nonvulnerable requires a partition")]
    MissingPartition,
    #[error("partition does not cover training sequence {0}")]
    PartitionMismatch(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 3e-4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSelection {
    Full,
    Nonvulnerable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub data_selection: DataSelection,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            data_selection: DataSelection::Full,
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over sequences of the full objective.
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    /// Token-weighted perplexity of the training passes in this epoch.
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub training_ids: Vec<String>,
    pub epochs: Vec<EpochStats>,
    /// Source ids of every batch in step order.
    pub batches: Vec<Vec<String>>,
    pub wall_clock_secs: f64,
}

pub struct Trained {
    pub model: LanguageModel,
    pub log: TrainLog,
}

type Objective<'a> = dyn Fn(&mut Tape<f32>, &[Var], &TokenSeq) -> Result<(Var, LossParts), ModelError> + Sync + 'a;

/// Trains a fresh model on `seqs` with cross-entropy only.
pub fn train_teacher(
    seqs: &[TokenSeq],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(TrainError::EmptyTrainingSet("no member sequences".into()));
    }
    let config = model_config.clone();
    let objective = move |tape: &mut Tape<f32>, vars: &[Var], seq: &TokenSeq| {
        let out = forward(tape, &config, vars, &seq.tokens, 0)?;
        Ok(distill_loss_on_tape(tape, out.log_probs, &out.targets, None, 0.0)?)
    };
    let model = LanguageModel::new(model_config.clone())?;
    let selected: Vec<&TokenSeq> = seqs.iter().collect();
    fit(model, &selected, cfg, &objective, exec)
}

/// The subset of `members` a distillation run trains on.
pub fn select_training_set<'a>(
    members: &'a [TokenSeq],
    selection: DataSelection,
    partition: Option<&Partition>,
) -> Result<Vec<&'a TokenSeq>, TrainError> {
    let selected: Vec<&TokenSeq> = match selection {
        DataSelection::Full => members.iter().collect(),
        DataSelection::Nonvulnerable => {
            let p = partition.ok_or(TrainError::MissingPartition)?;
            let nv: BTreeSet<&str> = p.nonvulnerable_ids.iter().map(String::as_str).collect();
            let v: BTreeSet<&str> = p.vulnerable_ids.iter().map(String::as_str).collect();
            if let Some(s) = members
                .iter()
                .find(|s| !nv.contains(s.source_id.as_str()) && !v.contains(s.source_id.as_str()))
            {
                return Err(TrainError::PartitionMismatch(s.source_id.clone()));
            }
            members.iter().filter(|s| nv.contains(s.source_id.as_str())).collect()
        }
    };
    if selected.is_empty() {
        return Err(TrainError::EmptyTrainingSet(format!("{selection:?} selection is empty")));
    }
    Ok(selected)
}

/// Trains a fresh student on `CE + lambda * KL(teacher || student)`.
/// Teacher rows are recomputed per sequence from the frozen teacher.
pub fn distill_student(
    teacher: &LanguageModel,
    student_config: &ModelConfig,
    cfg: &DistillConfig,
    partition: Option<&Partition>,
    members: &[TokenSeq],
    exec: Exec,
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if teacher.config().vocab_size != student_config.vocab_size {
        return Err(TrainError::InvalidConfig(format!(
            "teacher vocabulary {} differs from student vocabulary {}",
            teacher.config().vocab_size,
            student_config.vocab_size
        )));
    }
    let selected = select_training_set(members, cfg.data_selection, partition)?;
    let config = student_config.clone();
    let lambda = cfg.lambda;
    let objective = move |tape: &mut Tape<f32>, vars: &[Var], seq: &TokenSeq| {
        let out = forward(tape, &config, vars, &seq.tokens, 0)?;
        if lambda == 0.0 {
            return Ok(distill_loss_on_tape(tape, out.log_probs, &out.targets, None, 0.0)?);
        }
        let t = teacher.forward_logprobs(&seq.tokens, 0)?;
        let rows = TeacherRows::from_logprobs(&t.rows, t.vocab)?;
        Ok(distill_loss_on_tape(tape, out.log_probs, &out.targets, Some(&rows), lambda)?)
    };
    let model = LanguageModel::new(student_config.clone())?;
    fit(model, &selected, &cfg.train, &objective, exec)
}

struct SeqResult {
    grads: Vec<Tensor<f32>>,
    parts: LossParts,
}

fn seq_gradient(model: &LanguageModel, seq: &TokenSeq, objective: &Objective<'_>) -> Result<SeqResult, ModelError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let (loss, parts) = objective(&mut tape, &vars, seq)?;
    let mut g = tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.take_or_zeros(v, p.shape()))
        .collect();
    Ok(SeqResult { grads, parts })
}

fn fit(
    mut model: LanguageModel,
    data: &[&TokenSeq],
    cfg: &TrainConfig,
    objective: &Objective<'_>,
    exec: Exec,
) -> Result<Trained, TrainError> {
    let started = Instant::now();
    let mut optimizer = Optimizer::new(cfg, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut batches = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        let (mut nll_tokens, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenSeq> = chunk.iter().map(|&i| data[i]).collect();
            let diverged = |detail: String| TrainError::Divergence { epoch, step, detail };
            let results = par::try_map(exec, &batch, |seq| seq_gradient(&model, seq, objective)).map_err(|e| match e {
                ModelError::Numeric(NumericError::NonFinite { op }) => diverged(format!("non-finite value in {op}")),
                other => TrainError::Model(other),
            })?;

            let mut sum: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for r in &results {
                let loss = r.parts.total();
                if !loss.is_finite() {
                    return Err(diverged(format!("non-finite loss {loss}")));
                }
                loss_sum += loss;
                ce_sum += r.parts.ce;
                kl_sum += r.parts.kl;
                nll_tokens += r.parts.ce * r.parts.positions as f64;
                tokens += r.parts.positions;
                for (acc, g) in sum.iter_mut().zip(&r.grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
            let inv = 1.0 / results.len() as f32;
            for g in &mut sum {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            optimizer.step(model.params_mut(), &mut sum);
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(diverged("non-finite parameter after update".into()));
            }
            batches.push(batch.iter().map(|s| s.source_id.clone()).collect());
            step += 1;
        }
        let n = data.len() as f64;
        epochs.push(EpochStats {
            epoch,
            loss: loss_sum / n,
            ce: ce_sum / n,
            kl: kl_sum / n,
            perplexity: (nll_tokens / tokens as f64).exp(),
        });
    }

    Ok(Trained {
        model,
        log: TrainLog {
            training_ids: data.iter().map(|s| s.source_id.clone()).collect(),
            epochs,
            batches,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// JSON record written next to every trained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub role: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    pub seed: u64,
    pub training_ids: Vec<String>,
    pub epochs: Vec<EpochStats>,
    pub wall_clock_secs: f64,
    pub checkpoint: String,
    pub batches: Vec<Vec<String>>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))
    }
}
