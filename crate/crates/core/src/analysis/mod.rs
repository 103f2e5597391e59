//! Vulnerability partitions, teacher alignment, perplexity and the summary
//! statistics used in reports.

pub mod published;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::CalibratedAttack;
use crate::corpus::TokenSeq;
use crate::model::{LanguageModel, LogProbs, ModelError};
use crate::par::{self, Exec};

pub use stats::{
    binomial_pmf, compare_pair, relative_reduction, sign_test, PairComparison, SignTestResult, Winner,
};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Invalid(String),
    #[error("no score for member {0}")]
    MissingScore(String),
    #[error("empty sequence set")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {path}: {message}")]
    Malformed { path: String, message: String },
}

/// Members split by whether the calibrated attack flags them against the
/// teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub attack: CalibratedAttack,
    pub vulnerable_ids: Vec<String>,
    pub nonvulnerable_ids: Vec<String>,
}

impl Partition {
    pub fn stratum_of(&self, id: &str) -> Option<Stratum> {
        if self.vulnerable_ids.iter().any(|v| v == id) {
            Some(Stratum::Vulnerable)
        } else if self.nonvulnerable_ids.iter().any(|v| v == id) {
            Some(Stratum::Nonvulnerable)
        } else {
            None
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), AnalysisError> {
        let text = serde_json::to_string_pretty(self).expect("partition serializes") + "\n";
        std::fs::write(path, text).map_err(|source| AnalysisError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let text = std::fs::read_to_string(path).map_err(|source| AnalysisError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| AnalysisError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Splits `member_ids` by the attack's decision on each member's raw score.
pub fn partition_members(
    attack: &CalibratedAttack,
    member_ids: &[String],
    scores: &BTreeMap<String, f64>,
) -> Result<Partition, AnalysisError> {
    let mut vulnerable_ids = Vec::new();
    let mut nonvulnerable_ids = Vec::new();
    let mut seen = BTreeSet::new();
    for id in member_ids {
        if !seen.insert(id.as_str()) {
            return Err(AnalysisError::Invalid(format!("duplicate member id {id}")));
        }
        let raw = *scores.get(id).ok_or_else(|| AnalysisError::MissingScore(id.clone()))?;
        if attack.decide(raw) {
            vulnerable_ids.push(id.clone());
        } else {
            nonvulnerable_ids.push(id.clone());
        }
    }
    Ok(Partition {
        attack: attack.clone(),
        vulnerable_ids,
        nonvulnerable_ids,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Vulnerable,
    Nonvulnerable,
}

/// How the per-position divergence to the ground truth is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlConvention {
    /// `KL(one-hot(y) || p) = -ln p(y)`.
    #[default]
    OneHot,
    /// `-ln p(y) - H(p)`: cross-entropy to the label minus the teacher's own
    /// entropy.
    EntropyAdjusted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub stratum: Stratum,
    pub sequences: usize,
    pub mean_gt_prob: f64,
    pub mean_kl_to_gt: f64,
}

/// Per-sequence alignment values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceAlignment {
    pub id: String,
    pub stratum: Stratum,
    pub gt_prob: f64,
    pub kl_to_gt: f64,
}

/// Per-position ground-truth probability and divergence for one sequence.
pub fn position_alignment(lp: &LogProbs, convention: KlConvention) -> Vec<(f64, f64)> {
    (0..lp.len())
        .map(|i| {
            let lpy = lp.targets[i];
            let kl = match convention {
                KlConvention::OneHot => -lpy,
                KlConvention::EntropyAdjusted => {
                    let entropy: f64 = lp
                        .row(i)
                        .iter()
                        .map(|&l| if l.exp() > 0.0 { -l.exp() * l } else { 0.0 })
                        .sum();
                    -lpy - entropy
                }
            };
            (lpy.exp(), kl)
        })
        .collect()
}

/// Mean over positions of (ground-truth probability, divergence).
pub fn sequence_alignment(lp: &LogProbs, convention: KlConvention) -> (f64, f64) {
    let per = position_alignment(lp, convention);
    let n = per.len() as f64;
    let (p, k) = per.iter().fold((0.0, 0.0), |acc, &(p, k)| (acc.0 + p, acc.1 + k));
    (p / n, k / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Strata in order; an empty stratum is absent.
    pub strata: Vec<AlignmentStats>,
    pub sequences: Vec<SequenceAlignment>,
}

impl AlignmentReport {
    pub fn get(&self, stratum: Stratum) -> Option<&AlignmentStats> {
        self.strata.iter().find(|s| s.stratum == stratum)
    }
}

/// Teacher alignment with the ground truth, stratified by the partition.
pub fn alignment_diagnostics(
    teacher: &LanguageModel,
    members: &[TokenSeq],
    partition: &Partition,
    convention: KlConvention,
    exec: Exec,
) -> Result<AlignmentReport, AnalysisError> {
    let strata: Vec<Stratum> = members
        .iter()
        .map(|s| {
            partition
                .stratum_of(&s.source_id)
                .ok_or_else(|| AnalysisError::Invalid(format!("{} is not in the partition", s.source_id)))
        })
        .collect::<Result<_, _>>()?;
    let values = par::try_map(exec, members, |s| {
        teacher
            .forward_logprobs(&s.tokens, 0)
            .map(|lp| sequence_alignment(&lp, convention))
    })?;
    let sequences: Vec<SequenceAlignment> = members
        .iter()
        .zip(&strata)
        .zip(&values)
        .map(|((s, &stratum), &(gt_prob, kl_to_gt))| SequenceAlignment {
            id: s.source_id.clone(),
            stratum,
            gt_prob,
            kl_to_gt,
        })
        .collect();
    let mut out = Vec::new();
    for stratum in [Stratum::Vulnerable, Stratum::Nonvulnerable] {
        let rows: Vec<&SequenceAlignment> = sequences.iter().filter(|s| s.stratum == stratum).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        out.push(AlignmentStats {
            stratum,
            sequences: rows.len(),
            mean_gt_prob: rows.iter().map(|r| r.gt_prob).sum::<f64>() / n,
            mean_kl_to_gt: rows.iter().map(|r| r.kl_to_gt).sum::<f64>() / n,
        });
    }
    Ok(AlignmentReport { strata: out, sequences })
}

/// `exp` of the token-weighted mean NLL over per-sequence log-probabilities.
pub fn perplexity_from_logprobs(per_sequence: &[Vec<f64>]) -> Result<f64, AnalysisError> {
    let tokens: usize = per_sequence.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Err(AnalysisError::EmptySet);
    }
    let nll: f64 = per_sequence.iter().flatten().map(|lp| -lp).sum();
    Ok((nll / tokens as f64).exp())
}

pub fn perplexity(model: &LanguageModel, seqs: &[TokenSeq], exec: Exec) -> Result<f64, AnalysisError> {
    if seqs.is_empty() {
        return Err(AnalysisError::EmptySet);
    }
    let per = par::try_map(exec, seqs, |s| model.forward_logprobs(&s.tokens, 0).map(|lp| lp.targets))?;
    perplexity_from_logprobs(&per)
}
