//! Decoder-only causal transformer over bytes.
//!
//! Two architecture switches matter for membership leakage: an optional
//! low-rank bottleneck in the feed-forward up-projection (`H -> B -> I`
//! instead of `H -> I`) and `NoNorm`, which swaps every layer-norm site for a
//! per-channel affine map `gamma * h + beta`.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numeric::{NumericError, Scalar, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_VERSION};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("no target positions: sequence length {len}, prefix length {prefix_len}")]
    EmptyTargets { len: usize, prefix_len: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint does not match config: {0}")]
    ShapeMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    NoNorm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    #[serde(default)]
    pub bottleneck: Option<usize>,
    pub norm: NormKind,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::corpus::VOCAB_SIZE,
            hidden: 64,
            layers: 2,
            heads: 2,
            intermediate: 256,
            bottleneck: None,
            norm: NormKind::LayerNorm,
            max_seq: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.hidden == 0 || self.intermediate == 0 || self.heads == 0 {
            return bad("vocab_size, hidden, intermediate and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if let Some(b) = self.bottleneck {
            if b == 0 || b > self.intermediate {
                return bad(format!("bottleneck {b} must lie in 1..={}", self.intermediate));
            }
        }
        if self.max_seq < 2 {
            return bad(format!("max_seq {} must be at least 2", self.max_seq));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Weight count of the feed-forward up-path: `H*I`, or `H*B + B*I` with a bottleneck.
pub fn ffn_up_weights(config: &ModelConfig) -> usize {
    let (h, i) = (config.hidden, config.intermediate);
    match config.bottleneck {
        None => h * i,
        Some(b) => h * b + b * i,
    }
}

/// Closed-form number of trainable scalars.
pub fn param_count(config: &ModelConfig) -> usize {
    let (v, h, i, s) = (config.vocab_size, config.hidden, config.intermediate, config.max_seq);
    let attention = 4 * (h * h + h);
    let norms = 2 * (2 * h);
    let ffn = ffn_up_weights(config) + i + i * h + h;
    v * h + s * h + config.layers * (attention + norms + ffn) + 2 * h + h * v + v
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let (v, h, i) = (config.vocab_size, config.hidden, config.intermediate);
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
    push("tok_emb".into(), vec![v, h], Init::Normal);
    push("pos_emb".into(), vec![config.max_seq, h], Init::Normal);
    for l in 0..config.layers {
        let p = format!("layers.{l}");
        push(format!("{p}.norm1.gamma"), vec![h], Init::Ones);
        push(format!("{p}.norm1.beta"), vec![h], Init::Zeros);
        for w in ["q", "k", "v", "o"] {
            push(format!("{p}.attn.w{w}"), vec![h, h], Init::Normal);
            push(format!("{p}.attn.b{w}"), vec![h], Init::Zeros);
        }
        push(format!("{p}.norm2.gamma"), vec![h], Init::Ones);
        push(format!("{p}.norm2.beta"), vec![h], Init::Zeros);
        match config.bottleneck {
            None => push(format!("{p}.ffn.w_up"), vec![h, i], Init::Normal),
            Some(b) => {
                push(format!("{p}.ffn.w_bottleneck"), vec![h, b], Init::Normal);
                push(format!("{p}.ffn.w_up"), vec![b, i], Init::Normal);
            }
        }
        push(format!("{p}.ffn.b_up"), vec![i], Init::Zeros);
        push(format!("{p}.ffn.w_down"), vec![i, h], Init::Normal);
        push(format!("{p}.ffn.b_down"), vec![h], Init::Zeros);
    }
    push("norm_f.gamma".into(), vec![h], Init::Ones);
    push("norm_f.beta".into(), vec![h], Init::Zeros);
    push("head.w".into(), vec![h, v], Init::Normal);
    push("head.b".into(), vec![v], Init::Zeros);
    specs
}

/// Parameter names and shapes implied by a config, in storage order.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    param_specs(config).into_iter().map(|s| (s.name, s.shape)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<T = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl LanguageModel<f32> {
    /// Fresh model initialized from `config.seed`: weights ~ N(0, 0.02²),
    /// biases and `beta` zero, `gamma` one.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let (names, params) = param_specs(&config)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng) as f32).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                (s.name, Tensor::new(s.shape, data).expect("spec shape"))
            })
            .unzip();
        Ok(Self { config, names, params })
    }
}

impl<T: Scalar> LanguageModel<T> {
    /// Assembles a model from named tensors, checking them against the config layout.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != named.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "config implies {} tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LanguageModel<U> {
        LanguageModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Next-token log-probabilities for every scored position
    /// `t >= max(1, prefix_len)`; earlier tokens act as context only.
    pub fn forward_logprobs(&self, tokens: &[usize], prefix_len: usize) -> Result<LogProbs, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = forward(&mut tape, &self.config, &vars, tokens, prefix_len)?;
        let rows = tape.value(out.log_probs);
        let vocab = self.config.vocab_size;
        let targets = out
            .targets
            .iter()
            .enumerate()
            .map(|(i, &tok)| rows.data()[i * vocab + tok].f64())
            .collect();
        Ok(LogProbs {
            start: out.start,
            vocab,
            rows: rows.to_f64_vec(),
            targets,
            target_tokens: out.targets,
        })
    }
}

/// Output of [`LanguageModel::forward_logprobs`].
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbs {
    /// Position of the first scored token.
    pub start: usize,
    pub vocab: usize,
    /// Row-major `[n, vocab]` log-distributions, one per scored position.
    pub rows: Vec<f64>,
    /// Log-probability of each realized token.
    pub targets: Vec<f64>,
    pub target_tokens: Vec<usize>,
}

impl LogProbs {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// Tape handles produced by [`forward`].
pub struct ForwardOutput {
    /// `[n, V]` log-softmax rows for the scored positions.
    pub log_probs: Var,
    pub targets: Vec<usize>,
    pub start: usize,
}

/// Layer-norm or NoNorm at one normalization site.
pub fn norm_apply<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    gamma: Var,
    beta: Var,
    kind: NormKind,
) -> Result<Var, NumericError> {
    let width = *tape.shape(h).last().unwrap_or(&0);
    if tape.shape(gamma) != [width] || tape.shape(beta) != [width] {
        return Err(NumericError::Shape {
            op: "norm_apply",
            detail: format!(
                "h width {width}, gamma {:?}, beta {:?}",
                tape.shape(gamma),
                tape.shape(beta)
            ),
        });
    }
    let x = match kind {
        NormKind::LayerNorm => tape.normalize_rows(h, LAYER_NORM_EPS)?,
        NormKind::NoNorm => h,
    };
    let scaled = tape.mul_row(x, gamma)?;
    tape.add_row(scaled, beta)
}

/// Feed-forward weights of one block. `bottleneck` is the `H x B` projection.
pub struct FfnParams {
    pub bottleneck: Option<Var>,
    pub w_up: Var,
    pub b_up: Var,
    pub w_down: Var,
    pub b_down: Var,
}

/// `H -> I -> H` (or `H -> B -> I -> H`) with GELU after the `I` projection only.
pub fn ffn_apply<T: Scalar>(tape: &mut Tape<T>, h: Var, p: &FfnParams, config: &ModelConfig) -> Result<Var, ModelError> {
    if let Some(b) = config.bottleneck {
        if b > config.intermediate {
            return Err(ModelError::InvalidConfig(format!(
                "bottleneck {b} exceeds intermediate {}",
                config.intermediate
            )));
        }
    }
    let projected = match p.bottleneck {
        Some(wb) => tape.matmul(h, wb)?,
        None => h,
    };
    let up = tape.matmul(projected, p.w_up)?;
    let up = tape.add_row(up, p.b_up)?;
    let act = tape.gelu(up)?;
    let down = tape.matmul(act, p.w_down)?;
    Ok(tape.add_row(down, p.b_down)?)
}

fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t > k / t).collect()
}

/// Builds the forward graph for `tokens` from parameter handles in
/// [`param_layout`] order.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    vars: &[Var],
    tokens: &[usize],
    prefix_len: usize,
) -> Result<ForwardOutput, ModelError> {
    let len = tokens.len();
    if len > config.max_seq {
        return Err(ModelError::SequenceTooLong {
            len,
            max: config.max_seq,
        });
    }
    let start = prefix_len.max(1);
    if start >= len {
        return Err(ModelError::EmptyTargets { len, prefix_len });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: bad,
            vocab: config.vocab_size,
        });
    }

    let mut it = vars.iter().copied();
    let mut next = || it.next().ok_or_else(|| ModelError::InvalidConfig("too few parameters bound".into()));

    let tok_emb = next()?;
    let pos_emb = next()?;
    let te = tape.take_rows(tok_emb, tokens)?;
    let positions: Vec<usize> = (0..len).collect();
    let pe = tape.take_rows(pos_emb, &positions)?;
    let mut x = tape.add(te, pe)?;

    let mask = causal_mask(len);
    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    for _ in 0..config.layers {
        let (g1, b1) = (next()?, next()?);
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (next()?, next()?, next()?, next()?, next()?, next()?, next()?, next()?);
        let (g2, b2) = (next()?, next()?);
        let bottleneck = if config.bottleneck.is_some() { Some(next()?) } else { None };
        let ffn = FfnParams {
            bottleneck,
            w_up: next()?,
            b_up: next()?,
            w_down: next()?,
            b_down: next()?,
        };

        let h = norm_apply(tape, x, g1, b1, config.norm)?;
        let q = tape.matmul(h, wq)?;
        let q = tape.add_row(q, bq)?;
        let k = tape.matmul(h, wk)?;
        let k = tape.add_row(k, bk)?;
        let v = tape.matmul(h, wv)?;
        let v = tape.add_row(v, bv)?;
        let mut heads = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let qh = tape.slice_cols(q, hd * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, hd * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, hd * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.mask_fill(scores, &mask, MASKED_SCORE)?;
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = tape.matmul(merged, wo)?;
        let o = tape.add_row(o, bo)?;
        x = tape.add(x, o)?;

        let h2 = norm_apply(tape, x, g2, b2, config.norm)?;
        let f = ffn_apply(tape, h2, &ffn, config)?;
        x = tape.add(x, f)?;
    }

    let (gf, bf) = (next()?, next()?);
    let (head_w, head_b) = (next()?, next()?);
    let rows = tape.slice_rows(x, start - 1, len - start)?;
    let rows = norm_apply(tape, rows, gf, bf, config.norm)?;
    let logits = tape.matmul(rows, head_w)?;
    let logits = tape.add_row(logits, head_b)?;
    let log_probs = tape.log_softmax(logits, 1)?;
    Ok(ForwardOutput {
        log_probs,
        targets: tokens[start..].to_vec(),
        start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(bottleneck: Option<usize>, norm: NormKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            hidden: 8,
            layers: 2,
            heads: 2,
            intermediate: 12,
            bottleneck,
            norm,
            max_seq: 10,
            seed: 5,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny(None, NormKind::LayerNorm);
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(tiny(Some(13), NormKind::LayerNorm).validate().is_err());
        assert!(tiny(Some(0), NormKind::LayerNorm).validate().is_err());
        let mut c = tiny(None, NormKind::LayerNorm);
        c.max_seq = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zeroed_head_gives_uniform_rows() {
        let mut m = LanguageModel::new(tiny(None, NormKind::LayerNorm)).unwrap();
        m.param_mut("head.w").unwrap().data_mut().fill(0.0);
        let out = m.forward_logprobs(&[1, 2, 3, 4], 0).unwrap();
        let expected = -(16f64).ln();
        assert!(out.rows.iter().all(|&v| (v - expected).abs() < 1e-6));
        assert!(out.targets.iter().all(|&v| (v - expected).abs() < 1e-6));
    }

    #[test]
    fn scored_position_counts() {
        let m = LanguageModel::new(tiny(None, NormKind::NoNorm)).unwrap();
        assert_eq!(m.forward_logprobs(&[1, 2], 0).unwrap().len(), 1);
        let out = m.forward_logprobs(&[1, 2, 3, 4, 5], 4).unwrap();
        assert_eq!((out.len(), out.start), (1, 4));
        assert!(matches!(
            m.forward_logprobs(&[1, 2, 3], 3),
            Err(ModelError::EmptyTargets { .. })
        ));
        assert!(matches!(
            m.forward_logprobs(&[1; 11], 0),
            Err(ModelError::SequenceTooLong { len: 11, max: 10 })
        ));
        assert!(matches!(
            m.forward_logprobs(&[1, 16], 0),
            Err(ModelError::TokenOutOfRange { token: 16, .. })
        ));
    }

    #[test]
    fn prefix_context_changes_conditioning_only_after_it() {
        let m = LanguageModel::new(tiny(Some(4), NormKind::LayerNorm)).unwrap();
        let full = m.forward_logprobs(&[3, 1, 4, 1, 5, 9], 0).unwrap();
        let tail = m.forward_logprobs(&[3, 1, 4, 1, 5, 9], 3).unwrap();
        assert_eq!(tail.targets, full.targets[2..].to_vec());
    }

    #[test]
    fn ffn_up_weight_examples() {
        let mut c = ModelConfig {
            hidden: 64,
            intermediate: 256,
            ..ModelConfig::default()
        };
        assert_eq!(ffn_up_weights(&c), 64 * 256);
        c.bottleneck = Some(16);
        assert_eq!(ffn_up_weights(&c), 5120);
        c.bottleneck = Some(256);
        assert!(ffn_up_weights(&c) >= 64 * 256);

        let mut big = ModelConfig {
            hidden: 768,
            intermediate: 3072,
            ..ModelConfig::default()
        };
        assert_eq!(ffn_up_weights(&big), 2_359_296);
        big.bottleneck = Some(384);
        assert_eq!(ffn_up_weights(&big), 1_474_560);
    }

    #[test]
    fn nonorm_and_layernorm_have_equal_counts() {
        let a = LanguageModel::new(tiny(None, NormKind::LayerNorm)).unwrap();
        let b = LanguageModel::new(tiny(None, NormKind::NoNorm)).unwrap();
        assert_eq!(a.trainable_scalars(), b.trainable_scalars());
        assert_eq!(a.trainable_scalars(), param_count(a.config()));
    }

    #[test]
    fn ffn_rejects_oversized_bottleneck() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::zeros(&[2, 8]));
        let p = FfnParams {
            bottleneck: None,
            w_up: tape.constant(Tensor::zeros(&[8, 12])),
            b_up: tape.constant(Tensor::zeros(&[12])),
            w_down: tape.constant(Tensor::zeros(&[12, 8])),
            b_down: tape.constant(Tensor::zeros(&[8])),
        };
        let mut c = tiny(None, NormKind::LayerNorm);
        c.bottleneck = Some(20);
        assert!(matches!(ffn_apply(&mut tape, h, &p, &c), Err(ModelError::InvalidConfig(_))));
    }
}
