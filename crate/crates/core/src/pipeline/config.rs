use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::analysis::KlConvention;
use crate::attacks::Method;
use crate::corpus::{Holdout, SynthConfig};
use crate::model::{ModelConfig, NormKind};
use crate::training::{DataSelection, DistillConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    None,
    Nonvulnerable,
    Bottleneck,
    Nonorm,
    All,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::None,
        Variant::Nonvulnerable,
        Variant::Bottleneck,
        Variant::Nonorm,
        Variant::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Nonvulnerable => "nonvulnerable",
            Variant::Bottleneck => "bottleneck",
            Variant::Nonorm => "nonorm",
            Variant::All => "all",
        }
    }

    pub fn uses_bottleneck(self) -> bool {
        matches!(self, Variant::Bottleneck | Variant::All)
    }

    pub fn uses_nonorm(self) -> bool {
        matches!(self, Variant::Nonorm | Variant::All)
    }

    pub fn data_selection(self) -> DataSelection {
        if self == Variant::Nonvulnerable {
            DataSelection::Nonvulnerable
        } else {
            DataSelection::Full
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSettings {
    pub methods: Vec<Method>,
    /// Cross-validate k and prefix_docs before calibrating.
    pub tune: bool,
    pub folds: usize,
    pub k_grid: Vec<f64>,
    pub prefix_grid: Vec<usize>,
    /// Used when `tune` is off.
    pub k: f64,
    pub prefix_docs: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            tune: true,
            folds: 5,
            k_grid: (1..=20).map(|i| i as f64 / 20.0).collect(),
            prefix_grid: (1..=12).collect(),
            k: 0.2,
            prefix_docs: 1,
        }
    }
}

/// One JSON document describing a full experiment. Every field but
/// `variants` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// JSONL corpus; a synthetic corpus is generated when absent.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default = "default_holdout")]
    pub holdout: Holdout,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_train")]
    pub teacher: TrainConfig,
    /// Training of the reference model; defaults to the teacher's settings.
    #[serde(default)]
    pub reference: Option<TrainConfig>,
    #[serde(default = "default_distill")]
    pub distill: DistillConfig,
    pub variants: Vec<Variant>,
    /// Bottleneck width for the bottleneck variants; defaults to H/2.
    #[serde(default)]
    pub bottleneck_dim: Option<usize>,
    #[serde(default)]
    pub attacks: AttackSettings,
    /// Attack whose teacher-side calibration defines the vulnerable set.
    #[serde(default = "default_partition_method")]
    pub partition_method: Method,
    #[serde(default)]
    pub kl_convention: KlConvention,
    /// Bottleneck widths for the ablation; defaults to the published sweep
    /// rescaled to the hidden size.
    #[serde(default)]
    pub ablation_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_holdout() -> Holdout {
    Holdout {
        prefix_pool: 12,
        reference_pool: 16,
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 8e-4,
        ..TrainConfig::default()
    }
}

fn default_train() -> TrainConfig {
    desk_train()
}

fn default_distill() -> DistillConfig {
    DistillConfig {
        train: desk_train(),
        ..DistillConfig::default()
    }
}

fn default_partition_method() -> Method {
    Method::Loss
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            synth: SynthConfig {
                nonmembers: 96,
                ..SynthConfig::default()
            },
            holdout: default_holdout(),
            model: ModelConfig::default(),
            teacher: default_train(),
            reference: None,
            distill: default_distill(),
            variants: Variant::ALL.to_vec(),
            bottleneck_dim: None,
            attacks: AttackSettings::default(),
            partition_method: default_partition_method(),
            kl_convention: KlConvention::OneHot,
            ablation_dims: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.variants.is_empty() {
            return bad("variant list is empty".into());
        }
        if let Some(path) = &self.corpus {
            if !path.exists() {
                return bad(format!("corpus {} does not exist", path.display()));
            }
        }
        self.model.validate()?;
        self.teacher.validate()?;
        if let Some(r) = &self.reference {
            r.validate()?;
        }
        self.distill.validate()?;
        self.student_config(Variant::All, 0)?.validate()?;
        let a = &self.attacks;
        if a.methods.is_empty() {
            return bad("no attack methods".into());
        }
        if a.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", a.folds));
        }
        if a.k_grid.is_empty() || a.k_grid.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return bad("k grid must be non-empty with values in (0, 1]".into());
        }
        if a.prefix_grid.is_empty() || a.prefix_grid.contains(&0) {
            return bad("prefix grid must be non-empty with values >= 1".into());
        }
        if !(a.k > 0.0 && a.k <= 1.0) || a.prefix_docs == 0 {
            return bad("default k must lie in (0, 1] and prefix_docs be >= 1".into());
        }
        let max_prefix = a.prefix_grid.iter().copied().max().unwrap_or(0).max(a.prefix_docs);
        if self.uses(Method::Recall) && self.holdout.prefix_pool < max_prefix {
            return bad(format!(
                "prefix pool of {} documents cannot serve prefix_docs up to {max_prefix}",
                self.holdout.prefix_pool
            ));
        }
        if self.uses(Method::Ref) && self.holdout.reference_pool == 0 {
            return bad("the ref attack needs a non-empty reference pool".into());
        }
        Ok(())
    }

    pub fn uses(&self, m: Method) -> bool {
        self.attacks.methods.contains(&m)
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck_dim.unwrap_or(self.model.hidden / 2).max(1)
    }

    pub fn student_config(&self, variant: Variant, seed: u64) -> Result<ModelConfig, PipelineError> {
        let mut c = self.model.clone();
        c.seed = seed;
        if variant.uses_bottleneck() {
            c.bottleneck = Some(self.bottleneck());
        }
        if variant.uses_nonorm() {
            c.norm = NormKind::NoNorm;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn ablation_dims(&self) -> Vec<usize> {
        self.ablation_dims
            .clone()
            .unwrap_or_else(|| crate::analysis::published::rescaled_ablation_dims(self.model.hidden))
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seed for one stage of a run, derived from the master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_variant_list_is_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>("{\"seed\": 3}");
        assert!(err.is_err());
        let cfg: ExperimentConfig = serde_json::from_str("{\"variants\": []}").unwrap();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.bottleneck(), 32);
    }

    #[test]
    fn variants_map_to_architecture() {
        let cfg = ExperimentConfig::default();
        let all = cfg.student_config(Variant::All, 1).unwrap();
        assert_eq!(all.bottleneck, Some(32));
        assert_eq!(all.norm, NormKind::NoNorm);
        let none = cfg.student_config(Variant::Nonvulnerable, 1).unwrap();
        assert_eq!(none.bottleneck, None);
        assert_eq!(Variant::Nonvulnerable.data_selection(), DataSelection::Nonvulnerable);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn seeds_depend_on_label_and_master() {
        assert_eq!(derive_seed(1, "teacher"), derive_seed(1, "teacher"));
        assert_ne!(derive_seed(1, "teacher"), derive_seed(2, "teacher"));
        assert_ne!(derive_seed(1, "teacher"), derive_seed(1, "reference"));
    }
}
