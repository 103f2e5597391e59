//! Scores every evaluation example under every attack for one target model,
//! tuning hyperparameters by cross-validation when asked.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::AttackSettings;
use super::PipelineError;
use crate::attacks::{
    build_prefix, calibrate_threshold, conditional_mean_lp, cv_tune, loss_raw, mink_raw, minkpp_raw, recall_raw,
    ref_raw, zlib_raw, AttackConfig, AttackError, CalibrationRecord, Evidence, Method,
};
use crate::corpus::TokenSeq;
use crate::model::LanguageModel;
use crate::par::{self, Exec};

/// One scored example: label plus what perplexity needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleStats {
    pub id: String,
    pub member: bool,
    pub tokens: usize,
    pub total_logprob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub grid: Vec<f64>,
    pub mean_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub calibration: CalibrationRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvRecord>,
    /// Raw scores aligned with [`ModelMetrics::examples`].
    pub raw: Vec<f64>,
    #[serde(default)]
    pub degenerate_positions: usize,
}

impl AttackResult {
    pub fn decisions(&self) -> Vec<bool> {
        let c = &self.calibration;
        self.raw.iter().map(|&r| c.orientation.decide(r, c.tau)).collect()
    }
}

/// Everything the attack stage learns about one target model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub examples: Vec<ExampleStats>,
    pub attacks: Vec<AttackResult>,
}

impl ModelMetrics {
    pub fn attack(&self, m: Method) -> Option<&AttackResult> {
        self.attacks.iter().find(|a| a.calibration.method == m)
    }

    /// Fraction of the selected examples the attack classifies correctly.
    pub fn subset_accuracy(&self, m: Method, keep: impl Fn(&ExampleStats) -> bool) -> Option<f64> {
        let a = self.attack(m)?;
        let d = a.decisions();
        let (mut hit, mut n) = (0usize, 0usize);
        for (e, &dec) in self.examples.iter().zip(&d) {
            if keep(e) {
                n += 1;
                if dec == e.member {
                    hit += 1;
                }
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    }

    pub fn perplexity(&self, keep: impl Fn(&ExampleStats) -> bool) -> Option<f64> {
        let (nll, tokens) = self
            .examples
            .iter()
            .filter(|e| keep(e))
            .fold((0.0, 0usize), |(s, t), e| (s - e.total_logprob, t + e.tokens));
        (tokens > 0).then(|| (nll / tokens as f64).exp())
    }
}

/// Examples scored by the attack stage, members first, each group sorted by
/// id.
pub struct EvalSet<'a> {
    pub seqs: Vec<&'a TokenSeq>,
    pub texts: Vec<&'a str>,
    pub labels: Vec<bool>,
}

struct ScoreCache<'a> {
    model: &'a LanguageModel,
    set: &'a EvalSet<'a>,
    evidence: Vec<Evidence>,
    reference_means: Option<Vec<f64>>,
    prefix_pool: &'a [TokenSeq],
    conditional: BTreeMap<usize, Vec<f64>>,
    exec: Exec,
}

impl ScoreCache<'_> {
    fn conditional(&mut self, docs: usize) -> Result<&[f64], AttackError> {
        if !self.conditional.contains_key(&docs) {
            let prefix = build_prefix(self.prefix_pool, docs)?;
            let v = par::try_map(self.exec, &self.set.seqs, |s| conditional_mean_lp(self.model, s, &prefix))?;
            self.conditional.insert(docs, v);
        }
        Ok(&self.conditional[&docs])
    }

    fn raw(&mut self, cfg: &AttackConfig) -> Result<Vec<f64>, AttackError> {
        let ev = &self.evidence;
        match cfg.method {
            Method::Loss => ev.iter().map(Evidence::mean_lp).collect(),
            Method::Zlib => ev
                .iter()
                .zip(&self.set.texts)
                .map(|(e, t)| zlib_raw(&e.target_lps, t))
                .collect(),
            Method::Mink => ev.iter().map(|e| mink_raw(&e.target_lps, cfg.k.unwrap_or(0.2))).collect(),
            Method::Minkpp => ev
                .iter()
                .map(|e| minkpp_raw(&e.minkpp_stats, cfg.k.unwrap_or(0.2)))
                .collect(),
            Method::Recall => {
                let ll: Vec<f64> = ev.iter().map(Evidence::mean_lp).collect::<Result<_, _>>()?;
                let cond = self.conditional(cfg.prefix_docs.unwrap_or(1))?;
                ll.iter().zip(cond).map(|(&l, &c)| recall_raw(l, c)).collect()
            }
            Method::Ref => {
                let refs = self
                    .reference_means
                    .as_ref()
                    .ok_or_else(|| AttackError::InvalidConfig("ref attack without a reference model".into()))?;
                ev.iter().zip(refs).map(|(e, &r)| ref_raw(e.mean_lp()?, r)).collect()
            }
        }
    }
}

fn mean_lps(model: &LanguageModel, seqs: &[&TokenSeq], exec: Exec) -> Result<Vec<f64>, AttackError> {
    par::try_map(exec, seqs, |s| loss_raw(&model.forward_logprobs(&s.tokens, 0)?.targets))
}

/// Runs, tunes and calibrates every configured attack against `model`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    name: &str,
    model: &LanguageModel,
    reference: Option<&LanguageModel>,
    set: &EvalSet<'_>,
    prefix_pool: &[TokenSeq],
    settings: &AttackSettings,
    cv_seed: u64,
    exec: Exec,
) -> Result<ModelMetrics, PipelineError> {
    let evidence = par::try_map(exec, &set.seqs, |s| Evidence::collect(model, s))?;
    let reference_means = match reference {
        Some(r) if settings.methods.contains(&Method::Ref) => {
            if r.config().vocab_size != model.config().vocab_size {
                return Err(AttackError::TokenizerMismatch {
                    target: model.config().vocab_size,
                    reference: r.config().vocab_size,
                }
                .into());
            }
            Some(mean_lps(r, &set.seqs, exec)?)
        }
        _ => None,
    };
    let examples = set
        .seqs
        .iter()
        .zip(&set.labels)
        .zip(&evidence)
        .map(|((s, &member), e)| ExampleStats {
            id: s.source_id.clone(),
            member,
            tokens: e.target_lps.len(),
            total_logprob: e.target_lps.iter().sum(),
        })
        .collect();
    let degenerate: usize = evidence.iter().map(|e| e.degenerate_positions).sum();
    let mut cache = ScoreCache {
        model,
        set,
        evidence,
        reference_means,
        prefix_pool,
        conditional: BTreeMap::new(),
        exec,
    };

    let mut attacks = Vec::with_capacity(settings.methods.len());
    for &method in &settings.methods {
        let canonical = method.canonical_orientation();
        let (config, cv) = match method {
            Method::Mink | Method::Minkpp if settings.tune => {
                let out = cv_tune(&settings.k_grid, &set.labels, settings.folds, cv_seed, canonical, |&k| {
                    cache.raw(&AttackConfig::with_k(method, k))
                })?;
                (
                    AttackConfig::with_k(method, out.best),
                    Some(CvRecord {
                        grid: settings.k_grid.clone(),
                        mean_accuracy: out.mean_accuracy,
                    }),
                )
            }
            Method::Mink | Method::Minkpp => (AttackConfig::with_k(method, settings.k), None),
            Method::Recall if settings.tune => {
                let out = cv_tune(&settings.prefix_grid, &set.labels, settings.folds, cv_seed, canonical, |&p| {
                    cache.raw(&AttackConfig::recall(p))
                })?;
                (
                    AttackConfig::recall(out.best),
                    Some(CvRecord {
                        grid: settings.prefix_grid.iter().map(|&p| p as f64).collect(),
                        mean_accuracy: out.mean_accuracy,
                    }),
                )
            }
            Method::Recall => (AttackConfig::recall(settings.prefix_docs), None),
            Method::Ref => {
                let mut c = AttackConfig::new(Method::Ref);
                c.ref_model = Some("reference".into());
                (c, None)
            }
            Method::Loss | Method::Zlib => (AttackConfig::new(method), None),
        };
        config.validate()?;
        let raw = cache.raw(&config)?;
        let (calibrated, metrics) = calibrate_threshold(config, &raw, &set.labels)?;
        attacks.push(AttackResult {
            calibration: CalibrationRecord::new(&calibrated, &metrics),
            cv,
            raw,
            degenerate_positions: if method == Method::Minkpp { degenerate } else { 0 },
        });
    }
    Ok(ModelMetrics {
        model: name.to_string(),
        examples,
        attacks,
    })
}
