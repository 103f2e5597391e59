//! Experiment orchestration: one function per stage, each reading and writing
//! a run directory, plus the end-to-end runner and the bottleneck ablation.

mod config;
mod evaluate;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{alignment_diagnostics, partition_members, AlignmentReport, AnalysisError, Partition};
use crate::attacks::{
    write_score_table, AttackError, CalibratedAttack, Method, ScoreRow, TunedHyperparams,
};
use crate::corpus::{
    generate_corpus, load_corpus, make_manifest_with_holdout, tokenize, Corpus, CorpusError, CorpusManifest,
    Membership, TokenSeq,
};
use crate::model::{load_checkpoint, param_count, save_checkpoint, LanguageModel, ModelError};
use crate::par::Exec;
use crate::training::{distill_student, train_teacher, RunManifest, TrainError, Trained};

pub use config::{derive_seed, sha256_hex, AttackSettings, ExperimentConfig, Variant};
pub use evaluate::{evaluate_model, AttackResult, CvRecord, EvalSet, ExampleStats, ModelMetrics};
pub use report::{
    build_report, write_report, AttackSummary, Check, ModelSummary, PerplexityRow, Reduction, Report,
    StudentComparison, Summary,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing {what} at {path}; run `{stage}` first")]
    MissingArtifact {
        what: &'static str,
        path: String,
        stage: &'static str,
    },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {path}: {message}")]
    Malformed { path: String, message: String },
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn in_stage(self, stage: &str) -> Self {
        PipelineError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Bad input or configuration, as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            PipelineError::Config(_) | PipelineError::MissingArtifact { .. } => true,
            PipelineError::Stage { source, .. } => source.is_validation(),
            PipelineError::Corpus(e) => !matches!(e, CorpusError::Io { .. }),
            PipelineError::Model(e) => matches!(e, ModelError::InvalidConfig(_)),
            PipelineError::Train(e) => matches!(
                e,
                TrainError::InvalidConfig(_) | TrainError::MissingPartition | TrainError::PartitionMismatch(_)
            ),
            PipelineError::Attack(e) => matches!(
                e,
                AttackError::UnknownMethod(_)
                    | AttackError::InvalidConfig(_)
                    | AttackError::PrefixPoolTooSmall { .. }
                    | AttackError::TokenizerMismatch { .. }
            ),
            _ => false,
        }
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.model_dir(name).join("model.ckpt")
    }

    pub fn run_manifest(&self, name: &str) -> PathBuf {
        self.model_dir(name).join("run.json")
    }

    pub fn attack_dir(&self, name: &str) -> PathBuf {
        self.root.join("attacks").join(name)
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.attack_dir(name).join("metrics.json")
    }

    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }

    pub fn alignment_dir(&self) -> PathBuf {
        self.root.join("alignment")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

pub const TEACHER: &str = "teacher";
pub const REFERENCE: &str = "reference";

fn mkdir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|e| PipelineError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write(path, &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn require(path: PathBuf, what: &'static str, stage: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact {
            what,
            path: path.display().to_string(),
            stage,
        })
    }
}

/// Tokenized corpus split according to the manifest.
pub struct Dataset {
    pub corpus: Corpus,
    pub manifest: CorpusManifest,
    /// Members in manifest order.
    pub members: Vec<TokenSeq>,
    /// Evaluation non-members in manifest order.
    pub nonmembers: Vec<TokenSeq>,
    pub prefix_pool: Vec<TokenSeq>,
    pub reference_pool: Vec<TokenSeq>,
}

impl Dataset {
    pub fn new(corpus: Corpus, manifest: CorpusManifest, max_len: usize) -> Result<Self, PipelineError> {
        let tok = |ids: &[String]| -> Result<Vec<TokenSeq>, PipelineError> {
            ids.iter()
                .map(|id| Ok(tokenize(corpus.require(id)?, max_len)?))
                .collect()
        };
        let members = tok(&manifest.member_ids)?;
        let nonmembers = tok(&manifest.nonmember_ids)?;
        let prefix_pool = tok(&manifest.prefix_pool_ids)?;
        let reference_pool = tok(&manifest.reference_pool_ids)?;
        for s in &members {
            if corpus.require(&s.source_id)?.membership != Membership::Member {
                return Err(PipelineError::Config(format!("{} is listed as a member", s.source_id)));
            }
        }
        Ok(Self {
            corpus,
            manifest,
            members,
            nonmembers,
            prefix_pool,
            reference_pool,
        })
    }

    pub fn load(layout: &Layout, cfg: &ExperimentConfig) -> Result<Self, PipelineError> {
        let corpus = load_corpus(&require(layout.corpus(), "corpus", "prepare-data")?)?;
        let manifest = CorpusManifest::load(&require(layout.manifest(), "manifest", "prepare-data")?)?;
        Self::new(corpus, manifest, token_limit(cfg))
    }

    /// Members then evaluation non-members, each sorted by id.
    pub fn eval_set(&self) -> EvalSet<'_> {
        let mut members: Vec<&TokenSeq> = self.members.iter().collect();
        let mut nonmembers: Vec<&TokenSeq> = self.nonmembers.iter().collect();
        members.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        nonmembers.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        let labels = std::iter::repeat_n(true, members.len())
            .chain(std::iter::repeat_n(false, nonmembers.len()))
            .collect();
        let seqs: Vec<&TokenSeq> = members.into_iter().chain(nonmembers).collect();
        let texts = seqs
            .iter()
            .map(|s| self.corpus.get(&s.source_id).expect("tokenized from corpus").text.as_str())
            .collect();
        EvalSet { seqs, texts, labels }
    }
}

/// Documents are cut so that a ReCaLL prefix always has some room.
pub fn token_limit(cfg: &ExperimentConfig) -> usize {
    let m = cfg.model.max_seq;
    if cfg.uses(Method::Recall) {
        m - (m / 8).max(1)
    } else {
        m
    }
}

fn student_name(v: Variant) -> String {
    format!("student-{v}")
}

/// Name under which a model's checkpoint and attack results are stored.
pub fn model_name(target: &str) -> Result<String, PipelineError> {
    if target == TEACHER {
        return Ok(TEACHER.into());
    }
    let v: Variant = target.strip_prefix("student-").unwrap_or(target).parse()?;
    Ok(student_name(v))
}

/// Writes the corpus (generated when the config names none), its manifest
/// and the effective config.
pub fn stage_prepare(cfg: &ExperimentConfig, layout: &Layout) -> Result<Dataset, PipelineError> {
    cfg.validate()?;
    mkdir(layout.root())?;
    write(&layout.config(), &cfg.to_json())?;
    let corpus = match &cfg.corpus {
        Some(path) => load_corpus(path)?,
        None => {
            let mut synth = cfg.synth.clone();
            synth.seed = derive_seed(cfg.seed, "corpus");
            generate_corpus(&synth)?
        }
    };
    let manifest = make_manifest_with_holdout(&corpus, derive_seed(cfg.seed, "manifest"), cfg.holdout)?;
    corpus.save(&layout.corpus())?;
    manifest.save(&layout.manifest())?;
    Dataset::new(corpus, manifest, token_limit(cfg))
}

fn save_trained(
    layout: &Layout,
    name: &str,
    trained: &Trained,
    role: &str,
    variant: Option<Variant>,
    train: &crate::training::TrainConfig,
    distill: Option<&crate::training::DistillConfig>,
) -> Result<(), PipelineError> {
    mkdir(&layout.model_dir(name))?;
    let ckpt = layout.checkpoint(name);
    save_checkpoint(&trained.model, &ckpt)?;
    RunManifest {
        role: role.into(),
        variant: variant.map(|v| v.name().to_string()),
        model: trained.model.config().clone(),
        train: train.clone(),
        distill: distill.cloned(),
        seed: train.seed,
        training_ids: trained.log.training_ids.clone(),
        epochs: trained.log.epochs.clone(),
        wall_clock_secs: trained.log.wall_clock_secs,
        checkpoint: "model.ckpt".into(),
        batches: trained.log.batches.clone(),
    }
    .save(&layout.run_manifest(name))?;
    Ok(())
}

pub fn stage_teacher(cfg: &ExperimentConfig, layout: &Layout, exec: Exec) -> Result<LanguageModel, PipelineError> {
    cfg.validate()?;
    let data = Dataset::load(layout, cfg)?;
    let mut model = cfg.model.clone();
    model.seed = derive_seed(cfg.seed, "teacher/init");
    let mut train = cfg.teacher.clone();
    train.seed = derive_seed(cfg.seed, "teacher/train");
    let trained = train_teacher(&data.members, &model, &train, exec)?;
    save_trained(layout, TEACHER, &trained, TEACHER, None, &train, None)?;
    Ok(trained.model)
}

/// Trains the ref attack's reference model on the held-out reference pool.
pub fn stage_reference(cfg: &ExperimentConfig, layout: &Layout, exec: Exec) -> Result<Option<LanguageModel>, PipelineError> {
    cfg.validate()?;
    let data = Dataset::load(layout, cfg)?;
    if data.reference_pool.is_empty() {
        return Ok(None);
    }
    let mut model = cfg.model.clone();
    model.seed = derive_seed(cfg.seed, "reference/init");
    let mut train = cfg.reference.clone().unwrap_or_else(|| cfg.teacher.clone());
    train.seed = derive_seed(cfg.seed, "reference/train");
    let trained = train_teacher(&data.reference_pool, &model, &train, exec)?;
    save_trained(layout, REFERENCE, &trained, REFERENCE, None, &train, None)?;
    Ok(Some(trained.model))
}

fn load_model(layout: &Layout, name: &str, stage: &'static str) -> Result<LanguageModel, PipelineError> {
    Ok(load_checkpoint(&require(layout.checkpoint(name), "checkpoint", stage)?)?)
}

/// Attacks one trained model (`teacher` or a variant name) and writes score
/// tables, calibration records and `metrics.json`.
pub fn stage_attack(cfg: &ExperimentConfig, layout: &Layout, target: &str, exec: Exec) -> Result<ModelMetrics, PipelineError> {
    cfg.validate()?;
    let name = model_name(target)?;
    let stage = if name == TEACHER { "train-teacher" } else { "distill" };
    let model = load_model(layout, &name, stage)?;
    let reference = if cfg.uses(Method::Ref) {
        Some(load_model(layout, REFERENCE, "train-teacher")?)
    } else {
        None
    };
    let data = Dataset::load(layout, cfg)?;
    attack_and_write(cfg, layout, &name, &model, reference.as_ref(), &data, exec)
}

fn attack_and_write(
    cfg: &ExperimentConfig,
    layout: &Layout,
    name: &str,
    model: &LanguageModel,
    reference: Option<&LanguageModel>,
    data: &Dataset,
    exec: Exec,
) -> Result<ModelMetrics, PipelineError> {
    let set = data.eval_set();
    let metrics = evaluate_model(
        name,
        model,
        reference,
        &set,
        &data.prefix_pool,
        &cfg.attacks,
        derive_seed(cfg.seed, "cv"),
        exec,
    )?;
    let dir = layout.attack_dir(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    }
    mkdir(&dir)?;
    let mut table = String::from("method,hyperparams,tau,orientation,accuracy,tpr,tnr\n");
    for a in &metrics.attacks {
        let c = &a.calibration;
        let rows: Vec<ScoreRow> = metrics
            .examples
            .iter()
            .zip(&a.raw)
            .map(|(e, &raw)| ScoreRow {
                example_id: e.id.clone(),
                method: c.method,
                raw,
                orientation: c.orientation,
                label: if e.member { Membership::Member } else { Membership::Nonmember },
            })
            .collect();
        write_score_table(&dir.join(format!("{}_scores.csv", c.method.name())), &rows)?;
        write(&dir.join(format!("{}_calibration.json", c.method.name())), &c.to_json())?;
        table.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            c.method.name(),
            hyper_tag(c),
            c.tau,
            c.orientation.name(),
            c.accuracy,
            c.tpr,
            c.tnr
        ));
    }
    write(&dir.join("metrics.csv"), &table)?;
    write_json(&layout.metrics(name), &metrics)?;
    if let Some(t) = tuned_hyperparams(&metrics) {
        write(&dir.join("hyperparams.txt"), &(t.row() + "\n"))?;
        write_json(&dir.join("hyperparams.json"), &t)?;
    }
    Ok(metrics)
}

fn hyper_tag(c: &crate::attacks::CalibrationRecord) -> String {
    match (c.hyperparams.k, c.hyperparams.prefix_docs) {
        (Some(k), _) => format!("k={k:.2}"),
        (_, Some(p)) => format!("prefix_docs={p}"),
        _ => String::new(),
    }
}

/// The tuning-table row, when all three tuned attacks were run with CV.
pub fn tuned_hyperparams(m: &ModelMetrics) -> Option<TunedHyperparams> {
    let get = |method| m.attack(method).filter(|a| a.cv.is_some()).map(|a| &a.calibration.hyperparams);
    Some(TunedHyperparams {
        model: m.model.clone(),
        mink_k: get(Method::Mink)?.k?,
        minkpp_k: get(Method::Minkpp)?.k?,
        recall_prefix: get(Method::Recall)?.prefix_docs?,
    })
}

/// Splits members into vulnerable / non-vulnerable with the teacher's
/// calibrated partition attack and writes the alignment diagnostics.
pub fn stage_partition(
    cfg: &ExperimentConfig,
    layout: &Layout,
    exec: Exec,
) -> Result<(Partition, AlignmentReport), PipelineError> {
    cfg.validate()?;
    let metrics: ModelMetrics = read_json(&require(layout.metrics(TEACHER), "teacher metrics", "attack --model teacher")?)?;
    let result = metrics.attack(cfg.partition_method).ok_or_else(|| {
        PipelineError::Config(format!(
            "teacher metrics lack the partition attack {}",
            cfg.partition_method
        ))
    })?;
    let c = &result.calibration;
    let attack = CalibratedAttack {
        config: crate::attacks::AttackConfig {
            method: c.method,
            k: c.hyperparams.k,
            prefix_docs: c.hyperparams.prefix_docs,
            ref_model: (c.method == Method::Ref).then(|| REFERENCE.to_string()),
        },
        tau: c.tau,
        orientation: c.orientation,
        calibration_note: c.note.clone(),
    };
    let scores: BTreeMap<String, f64> = metrics
        .examples
        .iter()
        .zip(&result.raw)
        .filter(|(e, _)| e.member)
        .map(|(e, &r)| (e.id.clone(), r))
        .collect();
    let data = Dataset::load(layout, cfg)?;
    let partition = partition_members(&attack, &data.manifest.member_ids, &scores)?;
    partition.save(&layout.partition())?;

    let teacher = load_model(layout, TEACHER, "train-teacher")?;
    let alignment = alignment_diagnostics(&teacher, &data.members, &partition, cfg.kl_convention, exec)?;
    let dir = layout.alignment_dir();
    write_json(&dir.join("alignment.json"), &alignment)?;
    for stratum in [crate::analysis::Stratum::Vulnerable, crate::analysis::Stratum::Nonvulnerable] {
        let mut csv = String::from("gt_prob,kl_to_gt\n");
        for s in alignment.sequences.iter().filter(|s| s.stratum == stratum) {
            csv.push_str(&format!("{:.9},{:.9}\n", s.gt_prob, s.kl_to_gt));
        }
        let file = match stratum {
            crate::analysis::Stratum::Vulnerable => "vulnerable.csv",
            crate::analysis::Stratum::Nonvulnerable => "nonvulnerable.csv",
        };
        write(&dir.join(file), &csv)?;
    }
    Ok((partition, alignment))
}

/// Distills one student variant from the saved teacher.
pub fn stage_distill(cfg: &ExperimentConfig, layout: &Layout, variant: Variant, exec: Exec) -> Result<LanguageModel, PipelineError> {
    cfg.validate()?;
    let name = student_name(variant);
    let student = cfg.student_config(variant, derive_seed(cfg.seed, &format!("{name}/init")))?;
    train_student(cfg, layout, &name, variant, student, exec)
}

fn train_student(
    cfg: &ExperimentConfig,
    layout: &Layout,
    name: &str,
    variant: Variant,
    student: crate::model::ModelConfig,
    exec: Exec,
) -> Result<LanguageModel, PipelineError> {
    let partition = match variant.data_selection() {
        crate::training::DataSelection::Nonvulnerable => {
            Some(Partition::load(&require(layout.partition(), "partition", "partition")?)?)
        }
        crate::training::DataSelection::Full => None,
    };
    let teacher = load_model(layout, TEACHER, "train-teacher")?;
    let data = Dataset::load(layout, cfg)?;
    let mut distill = cfg.distill.clone();
    distill.data_selection = variant.data_selection();
    distill.train.seed = derive_seed(cfg.seed, &format!("{name}/train"));
    let trained = distill_student(&teacher, &student, &distill, partition.as_ref(), &data.members, exec)?;
    save_trained(layout, name, &trained, "student", Some(variant), &distill.train, Some(&distill))?;
    Ok(trained.model)
}

/// Every seed a run derives from its master seed.
pub fn derived_seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    let mut labels: Vec<String> = ["corpus", "manifest", "teacher/init", "teacher/train", "reference/init", "reference/train", "cv"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for v in &cfg.variants {
        let n = student_name(*v);
        labels.push(format!("{n}/init"));
        labels.push(format!("{n}/train"));
    }
    labels.into_iter().map(|l| (l.clone(), derive_seed(cfg.seed, &l))).collect()
}

fn staged<T>(stage: &str, r: Result<T, PipelineError>) -> Result<T, PipelineError> {
    r.map_err(|e| e.in_stage(stage))
}

/// Reads every attack result in the run directory and writes the report.
pub fn stage_report(layout: &Layout) -> Result<Report, PipelineError> {
    let report = build_report(layout)?;
    write_report(layout, &report)?;
    Ok(report)
}

/// prepare, teacher and reference model, teacher attacks, partition, every
/// student variant with its attacks, report and `summary.json`.
pub fn run_all(cfg: &ExperimentConfig, layout: &Layout, exec: Exec) -> Result<Summary, PipelineError> {
    staged("validate", cfg.validate())?;
    staged("prepare-data", stage_prepare(cfg, layout))?;
    staged("train-teacher", stage_teacher(cfg, layout, exec))?;
    if cfg.uses(Method::Ref) {
        staged("train-teacher", stage_reference(cfg, layout, exec))?;
    }
    staged("attack", stage_attack(cfg, layout, TEACHER, exec))?;
    staged("partition", stage_partition(cfg, layout, exec))?;
    for &v in &cfg.variants {
        staged("distill", stage_distill(cfg, layout, v, exec))?;
        staged("attack", stage_attack(cfg, layout, v.name(), exec))?;
    }
    let report = staged("report", stage_report(layout))?;
    let summary = staged("report", Summary::new(cfg, layout, report))?;
    staged("report", write_json(&layout.summary(), &summary))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub bottleneck: usize,
    pub param_count: usize,
    /// `B < H * I / (H + I)`: the bottleneck has fewer weights than the
    /// plain up-projection.
    pub saves_parameters: bool,
    pub mean_tpr: f64,
    pub mean_accuracy: f64,
    pub member_perplexity: f64,
}

/// Full-data students with every bottleneck width in the sweep, against the
/// run's teacher. Runs the earlier stages first when they are missing.
pub fn run_ablation(cfg: &ExperimentConfig, layout: &Layout, exec: Exec) -> Result<Vec<AblationRow>, PipelineError> {
    staged("validate", cfg.validate())?;
    let reuse = layout.checkpoint(TEACHER).exists()
        && fs::read_to_string(layout.config()).ok().as_deref() == Some(cfg.to_json().as_str());
    if !reuse {
        staged("prepare-data", stage_prepare(cfg, layout))?;
        staged("train-teacher", stage_teacher(cfg, layout, exec))?;
        if cfg.uses(Method::Ref) {
            staged("train-teacher", stage_reference(cfg, layout, exec))?;
        }
    }
    let reference = if cfg.uses(Method::Ref) {
        Some(load_model(layout, REFERENCE, "train-teacher")?)
    } else {
        None
    };
    let data = Dataset::load(layout, cfg)?;
    let (h, i) = (cfg.model.hidden as f64, cfg.model.intermediate as f64);
    let mut rows = Vec::new();
    for b in cfg.ablation_dims() {
        let name = format!("bottleneck-{b}");
        let mut student = cfg.student_config(Variant::None, derive_seed(cfg.seed, &format!("{name}/init")))?;
        student.bottleneck = Some(b);
        student.validate()?;
        let count = param_count(&student);
        let model = staged("distill", train_student(cfg, layout, &name, Variant::None, student, exec))?;
        let m = staged("attack", attack_and_write(cfg, layout, &name, &model, reference.as_ref(), &data, exec))?;
        let n = m.attacks.len() as f64;
        rows.push(AblationRow {
            bottleneck: b,
            param_count: count,
            saves_parameters: (b as f64) < h * i / (h + i),
            mean_tpr: m.attacks.iter().map(|a| a.calibration.tpr).sum::<f64>() / n,
            mean_accuracy: m.attacks.iter().map(|a| a.calibration.accuracy).sum::<f64>() / n,
            member_perplexity: m.perplexity(|e| e.member).unwrap_or(f64::NAN),
        });
    }
    let dir = layout.ablation_dir();
    let mut csv = String::from("bottleneck,param_count,saves_parameters,mean_tpr,mean_accuracy,member_perplexity\n");
    let mut md = String::from(
        "| B | parameters | fewer than plain | mean member TPR | mean accuracy | member perplexity |\n|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.bottleneck, r.param_count, r.saves_parameters, r.mean_tpr, r.mean_accuracy, r.member_perplexity
        ));
        md.push_str(&format!(
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} |\n",
            r.bottleneck,
            r.param_count,
            if r.saves_parameters { "yes" } else { "no" },
            r.mean_tpr,
            r.mean_accuracy,
            r.member_perplexity
        ));
    }
    write(&dir.join("ablation.csv"), &csv)?;
    write(&dir.join("ablation.md"), &md)?;
    write_json(&dir.join("ablation.json"), &rows)?;
    Ok(rows)
}
