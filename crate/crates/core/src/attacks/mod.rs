//! Membership-inference scores, threshold calibration and hyperparameter
//! tuning.
//!
//! Raw-score helpers (`*_raw`) work on per-token log-probabilities so one
//! forward pass can feed several attacks; the `score_*` functions wrap them
//! around a model call.

mod calibrate;
pub(crate) mod records;

use std::fmt;
use std::io::Write as _;
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::model::{LanguageModel, LogProbs, ModelError};
use crate::numeric::Scalar;

pub use calibrate::{
    calibrate_threshold, cv_tune, mia_metrics, stratified_folds, CalibratedAttack, CvOutcome, MiaMetrics,
};
pub use records::{read_score_table, write_score_table, CalibrationRecord, Hyperparams, ScoreRow, TunedHyperparams};

/// Below this, a Min-K%++ position's spread is treated as zero.
pub const MINKPP_SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("unknown attack method {0:?}")]
    UnknownMethod(String),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("empty document text")]
    EmptyText,
    #[error("no scored tokens")]
    NoTokens,
    #[error("prefix does not fit: sequence of {seq_len} tokens leaves no room under max_seq {max_seq}")]
    PrefixDoesNotFit { seq_len: usize, max_seq: usize },
    #[error("prefix pool has {available} documents, {requested} requested")]
    PrefixPoolTooSmall { requested: usize, available: usize },
    #[error("unconditional log-likelihood is zero")]
    ZeroLikelihood,
    #[error("tokenizer mismatch: vocabulary {target} vs reference {reference}")]
    TokenizerMismatch { target: usize, reference: usize },
    #[error("calibration needs both classes (members {members}, non-members {nonmembers})")]
    SingleClass { members: usize, nonmembers: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite raw score {0}")]
    NonFinite(f64),
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("fold {fold} lacks a class: {detail}")]
    DegenerateFold { fold: usize, detail: String },
    #[error("score table: {0}")]
    Table(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Recall,
    Loss,
    Zlib,
    Mink,
    Minkpp,
    Ref,
}

impl Method {
    /// Table column order.
    pub const ALL: [Method; 6] = [
        Method::Recall,
        Method::Loss,
        Method::Zlib,
        Method::Mink,
        Method::Minkpp,
        Method::Ref,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Recall => "recall",
            Method::Loss => "loss",
            Method::Zlib => "zlib",
            Method::Mink => "mink",
            Method::Minkpp => "minkpp",
            Method::Ref => "ref",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Recall => "ReCaLL",
            Method::Loss => "Loss",
            Method::Zlib => "Zlib",
            Method::Mink => "Min-K%",
            Method::Minkpp => "Min-K%++",
            Method::Ref => "Ref",
        }
    }

    pub fn canonical_orientation(self) -> Orientation {
        Orientation::HigherIsMember
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| AttackError::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsMember,
    LowerIsMember,
}

impl Orientation {
    pub fn name(self) -> &'static str {
        match self {
            Orientation::HigherIsMember => "higher_is_member",
            Orientation::LowerIsMember => "lower_is_member",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Orientation::HigherIsMember => Orientation::LowerIsMember,
            Orientation::LowerIsMember => Orientation::HigherIsMember,
        }
    }

    /// Membership decision for `raw` at threshold `tau`.
    pub fn decide(self, raw: f64, tau: f64) -> bool {
        match self {
            Orientation::HigherIsMember => raw > tau,
            Orientation::LowerIsMember => raw < tau,
        }
    }
}

impl FromStr for Orientation {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "higher_is_member" => Ok(Orientation::HigherIsMember),
            "lower_is_member" => Ok(Orientation::LowerIsMember),
            other => Err(AttackError::Table(format!("unknown orientation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_docs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_model: Option<String>,
}

impl AttackConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            k: None,
            prefix_docs: None,
            ref_model: None,
        }
    }

    pub fn with_k(method: Method, k: f64) -> Self {
        Self {
            k: Some(k),
            ..Self::new(method)
        }
    }

    pub fn recall(prefix_docs: usize) -> Self {
        Self {
            prefix_docs: Some(prefix_docs),
            ..Self::new(Method::Recall)
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        match self.method {
            Method::Mink | Method::Minkpp => match self.k {
                Some(k) if k > 0.0 && k <= 1.0 => Ok(()),
                Some(k) => bad(format!("k must lie in (0, 1], got {k}")),
                None => bad(format!("{} requires k", self.method)),
            },
            Method::Recall => match self.prefix_docs {
                Some(0) => bad("prefix_docs must be >= 1".into()),
                Some(_) => Ok(()),
                None => bad("recall requires prefix_docs".into()),
            },
            Method::Ref if self.ref_model.is_none() => bad("ref requires ref_model".into()),
            _ => Ok(()),
        }
    }

    /// Short hyperparameter tag for file names and tables.
    pub fn hyper_tag(&self) -> String {
        match self.method {
            Method::Mink | Method::Minkpp => format!("k={:.2}", self.k.unwrap_or(f64::NAN)),
            Method::Recall => format!("prefix_docs={}", self.prefix_docs.unwrap_or(0)),
            _ => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub example_id: String,
    pub method: Method,
    pub raw: f64,
    pub orientation: Orientation,
}

fn check_lps(lps: &[f64]) -> Result<(), AttackError> {
    if lps.is_empty() {
        Err(AttackError::NoTokens)
    } else {
        Ok(())
    }
}

fn finite(raw: f64) -> Result<f64, AttackError> {
    if raw.is_finite() {
        Ok(raw)
    } else {
        Err(AttackError::NonFinite(raw))
    }
}

/// Mean token log-probability.
pub fn loss_raw(lps: &[f64]) -> Result<f64, AttackError> {
    check_lps(lps)?;
    finite(lps.iter().sum::<f64>() / lps.len() as f64)
}

/// Byte length of `text` as a zlib stream at maximum compression.
pub fn zlib_len(text: &str) -> Result<usize, AttackError> {
    if text.is_empty() {
        return Err(AttackError::EmptyText);
    }
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::best());
    enc.write_all(text.as_bytes()).expect("in-memory write");
    Ok(enc.finish().expect("in-memory write").len())
}

/// `-(total NLL) / zlib_len(text)`.
pub fn zlib_raw(lps: &[f64], text: &str) -> Result<f64, AttackError> {
    check_lps(lps)?;
    let c = zlib_len(text)?;
    finite(lps.iter().sum::<f64>() / c as f64)
}

/// Size of the Min-K% set for `t` scored tokens.
pub fn mink_count(k: f64, t: usize) -> usize {
    ((k * t as f64).ceil() as usize).clamp(1, t.max(1))
}

fn mean_of_lowest(values: &[f64], k: f64) -> Result<f64, AttackError> {
    check_lps(values)?;
    if !(k > 0.0 && k <= 1.0) {
        return Err(AttackError::InvalidConfig(format!("k must lie in (0, 1], got {k}")));
    }
    let n = mink_count(k, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut keep = vec![false; values.len()];
    order[..n].iter().for_each(|&i| keep[i] = true);
    // summed in position order, so k = 1 reproduces the plain mean bit for bit
    let sum: f64 = values.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| v).sum();
    finite(sum / n as f64)
}

/// Mean of the `max(1, ceil(k*T))` smallest token log-probabilities.
pub fn mink_raw(lps: &[f64], k: f64) -> Result<f64, AttackError> {
    mean_of_lowest(lps, k)
}

/// Normalized Min-K%++ statistic for one position, or `None` when the row's
/// spread is below [`MINKPP_SIGMA_FLOOR`].
pub fn minkpp_position(logprob_row: &[f64], token: usize) -> Option<f64> {
    let live = || logprob_row.iter().map(|&lp| (lp.exp(), lp)).filter(|&(p, _)| p > 0.0);
    let mu: f64 = live().map(|(p, lp)| p * lp).sum();
    // centered second moment: exact zero spread stays (near) zero
    let var: f64 = live().map(|(p, lp)| p * (lp - mu) * (lp - mu)).sum();
    let sigma = var.sqrt();
    if sigma < MINKPP_SIGMA_FLOOR {
        None
    } else {
        Some((logprob_row[token] - mu) / sigma)
    }
}

/// Per-position Min-K%++ statistics (degenerate positions contribute 0) and
/// the number of degenerate positions.
pub fn minkpp_positions(lp: &LogProbs) -> (Vec<f64>, usize) {
    let mut degenerate = 0;
    let s = (0..lp.len())
        .map(|i| {
            minkpp_position(lp.row(i), lp.target_tokens[i]).unwrap_or_else(|| {
                degenerate += 1;
                0.0
            })
        })
        .collect();
    (s, degenerate)
}

/// Mean of the `max(1, ceil(k*T))` lowest normalized statistics.
pub fn minkpp_raw(stats: &[f64], k: f64) -> Result<f64, AttackError> {
    mean_of_lowest(stats, k)
}

/// `LL_cond / LL`.
pub fn recall_raw(ll: f64, ll_cond: f64) -> Result<f64, AttackError> {
    if ll == 0.0 {
        return Err(AttackError::ZeroLikelihood);
    }
    finite(ll_cond / ll)
}

pub fn ref_raw(target_mean_lp: f64, reference_mean_lp: f64) -> Result<f64, AttackError> {
    finite(target_mean_lp - reference_mean_lp)
}

fn score(seq: &TokenSeq, method: Method, raw: f64) -> AttackScore {
    AttackScore {
        example_id: seq.source_id.clone(),
        method,
        raw,
        orientation: method.canonical_orientation(),
    }
}

pub fn score_loss<T: Scalar>(model: &LanguageModel<T>, seq: &TokenSeq) -> Result<AttackScore, AttackError> {
    let lp = model.forward_logprobs(&seq.tokens, 0)?;
    Ok(score(seq, Method::Loss, loss_raw(&lp.targets)?))
}

pub fn score_zlib<T: Scalar>(model: &LanguageModel<T>, seq: &TokenSeq, raw_text: &str) -> Result<AttackScore, AttackError> {
    if raw_text.is_empty() {
        return Err(AttackError::EmptyText);
    }
    let lp = model.forward_logprobs(&seq.tokens, 0)?;
    Ok(score(seq, Method::Zlib, zlib_raw(&lp.targets, raw_text)?))
}

pub fn score_mink<T: Scalar>(model: &LanguageModel<T>, seq: &TokenSeq, k: f64) -> Result<AttackScore, AttackError> {
    let lp = model.forward_logprobs(&seq.tokens, 0)?;
    Ok(score(seq, Method::Mink, mink_raw(&lp.targets, k)?))
}

pub fn score_minkpp<T: Scalar>(model: &LanguageModel<T>, seq: &TokenSeq, k: f64) -> Result<AttackScore, AttackError> {
    let lp = model.forward_logprobs(&seq.tokens, 0)?;
    let (stats, _) = minkpp_positions(&lp);
    Ok(score(seq, Method::Minkpp, minkpp_raw(&stats, k)?))
}

/// Concatenates the first `docs` pool sequences into a ReCaLL prefix.
pub fn build_prefix(pool: &[TokenSeq], docs: usize) -> Result<Vec<usize>, AttackError> {
    if docs == 0 {
        return Err(AttackError::InvalidConfig("prefix_docs must be >= 1".into()));
    }
    if docs > pool.len() {
        return Err(AttackError::PrefixPoolTooSmall {
            requested: docs,
            available: pool.len(),
        });
    }
    Ok(pool[..docs].iter().flat_map(|s| s.tokens.iter().copied()).collect())
}

/// Mean log-probability of `seq`'s scored tokens with `prefix` in front.
/// The prefix keeps its last tokens when it must be truncated to fit
/// `max_seq`; scored positions are exactly those of the unconditioned pass.
pub fn conditional_mean_lp<T: Scalar>(model: &LanguageModel<T>, seq: &TokenSeq, prefix: &[usize]) -> Result<f64, AttackError> {
    let max_seq = model.config().max_seq;
    let room = max_seq.saturating_sub(seq.len());
    if room == 0 || prefix.is_empty() {
        return Err(AttackError::PrefixDoesNotFit {
            seq_len: seq.len(),
            max_seq,
        });
    }
    let kept = &prefix[prefix.len().saturating_sub(room)..];
    let mut tokens = Vec::with_capacity(kept.len() + seq.len());
    tokens.extend_from_slice(kept);
    tokens.extend_from_slice(&seq.tokens);
    let lp = model.forward_logprobs(&tokens, kept.len() + 1)?;
    loss_raw(&lp.targets)
}

pub fn score_recall<T: Scalar>(model: &LanguageModel<T>, seq: &TokenSeq, prefix: &[usize]) -> Result<AttackScore, AttackError> {
    let ll = loss_raw(&model.forward_logprobs(&seq.tokens, 0)?.targets)?;
    let ll_cond = conditional_mean_lp(model, seq, prefix)?;
    Ok(score(seq, Method::Recall, recall_raw(ll, ll_cond)?))
}

pub fn score_ref<T: Scalar>(model: &LanguageModel<T>, ref_model: &LanguageModel<T>, seq: &TokenSeq) -> Result<AttackScore, AttackError> {
    let (target, reference) = (model.config().vocab_size, ref_model.config().vocab_size);
    if target != reference {
        return Err(AttackError::TokenizerMismatch { target, reference });
    }
    let a = loss_raw(&model.forward_logprobs(&seq.tokens, 0)?.targets)?;
    let b = loss_raw(&ref_model.forward_logprobs(&seq.tokens, 0)?.targets)?;
    Ok(score(seq, Method::Ref, ref_raw(a, b)?))
}

/// Everything the single-pass attacks need from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evidence {
    pub target_lps: Vec<f64>,
    pub minkpp_stats: Vec<f64>,
    pub degenerate_positions: usize,
}

impl Evidence {
    pub fn collect<T: Scalar>(model: &LanguageModel<T>, seq: &TokenSeq) -> Result<Self, AttackError> {
        let lp = model.forward_logprobs(&seq.tokens, 0)?;
        let (minkpp_stats, degenerate_positions) = minkpp_positions(&lp);
        Ok(Self {
            target_lps: lp.targets,
            minkpp_stats,
            degenerate_positions,
        })
    }

    pub fn mean_lp(&self) -> Result<f64, AttackError> {
        loss_raw(&self.target_lps)
    }
}
