//! Self-contained synthetic corpus generator.
//!
//! Members and non-members are drawn from one shared distribution, so a model
//! can only tell them apart by what it memorized. Three document styles
//! exist: free prose over a seeded pseudo-word lexicon (memorizable),
//! templated sentences with a handful of slot fillers (low entropy, learnable
//! from any sample of the style) and uniformly random letter strings (hard to
//! memorize, so they stay low-likelihood even when trained on).

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Document, Membership};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub members: usize,
    pub nonmembers: usize,
    pub seed: u64,
    pub lexicon_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Share of member documents written in the templated style.
    pub templated_member_fraction: f64,
    /// Share of non-member documents written in the templated style.
    pub templated_nonmember_fraction: f64,
    /// Share of member documents that are random letter strings.
    pub noise_member_fraction: f64,
    /// Share of non-member documents that are random letter strings.
    pub noise_nonmember_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            members: 64,
            nonmembers: 64,
            seed: 0,
            lexicon_size: 400,
            min_words: 9,
            max_words: 14,
            templated_member_fraction: 0.2,
            templated_nonmember_fraction: 0.2,
            noise_member_fraction: 0.1,
            noise_nonmember_fraction: 0.1,
        }
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "ch", "st", "tr", "pl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ea"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "m", "x"];

const TEMPLATES: &[&str] = &[
    "the {a} keeps the {b} near the {c}.",
    "a {a} and a {b} walk to the {c}.",
    "every {a} needs one {b} and the {c}.",
    "the {c} was quiet when the {a} found a {b}.",
];
const SLOT_A: &[&str] = &["farmer", "sailor", "doctor", "painter", "miner"];
const SLOT_B: &[&str] = &["lamp", "rope", "coat", "map", "bell"];
const SLOT_C: &[&str] = &["river", "market", "harbor", "garden", "bridge"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    w
}

fn lexicon(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let w = pseudo_word(rng);
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Zipf-like rank sampling: rank r has weight 1 / (r + 2).
fn zipf_index(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let u = rng.random::<f64>() * cumulative[cumulative.len() - 1];
    cumulative.partition_point(|&c| c < u).min(cumulative.len() - 1)
}

fn prose(rng: &mut ChaCha8Rng, words: &[String], cumulative: &[f64], cfg: &SynthConfig) -> String {
    let n = rng.random_range(cfg.min_words..=cfg.max_words.max(cfg.min_words));
    let body: Vec<&str> = (0..n).map(|_| words[zipf_index(rng, cumulative)].as_str()).collect();
    format!("{}.", body.join(" "))
}

fn templated(rng: &mut ChaCha8Rng) -> String {
    let sentences = 2;
    let mut parts = Vec::with_capacity(sentences);
    for _ in 0..sentences {
        let t = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        parts.push(
            t.replace("{a}", SLOT_A[rng.random_range(0..SLOT_A.len())])
                .replace("{b}", SLOT_B[rng.random_range(0..SLOT_B.len())])
                .replace("{c}", SLOT_C[rng.random_range(0..SLOT_C.len())]),
        );
    }
    parts.join(" ")
}

fn noise(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> String {
    let words = rng.random_range(cfg.min_words..=cfg.max_words.max(cfg.min_words));
    let body: Vec<String> = (0..words)
        .map(|_| {
            let len = rng.random_range(3..=7);
            (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect()
        })
        .collect();
    format!("{}.", body.join(" "))
}

/// Generates a corpus with `members` + `nonmembers` distinct documents.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words = lexicon(&mut rng, cfg.lexicon_size.max(1));
    let cumulative: Vec<f64> = (0..words.len())
        .scan(0.0, |acc, r| {
            *acc += 1.0 / (r as f64 + 2.0);
            Some(*acc)
        })
        .collect();

    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(cfg.members + cfg.nonmembers);
    let share = |count: usize, f: f64| (count as f64 * f.clamp(0.0, 1.0)).round() as usize;
    for (membership, count, templated_share, noise_share, prefix) in [
        (
            Membership::Member,
            cfg.members,
            cfg.templated_member_fraction,
            cfg.noise_member_fraction,
            "m",
        ),
        (
            Membership::Nonmember,
            cfg.nonmembers,
            cfg.templated_nonmember_fraction,
            cfg.noise_nonmember_fraction,
            "n",
        ),
    ] {
        let n_templated = share(count, templated_share);
        let n_noise = share(count, noise_share).min(count - n_templated.min(count));
        for i in 0..count {
            let text = loop {
                let t = if i < n_templated {
                    templated(&mut rng)
                } else if i < n_templated + n_noise {
                    noise(&mut rng, cfg)
                } else {
                    prose(&mut rng, &words, &cumulative, cfg)
                };
                if seen.insert(t.clone()) {
                    break t;
                }
            };
            docs.push(Document {
                id: format!("{prefix}{i:04}"),
                text,
                membership,
            });
        }
    }
    Corpus::from_documents(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_valid() {
        let cfg = SynthConfig {
            members: 20,
            nonmembers: 30,
            seed: 3,
            ..SynthConfig::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.split(Membership::Member).count(), 20);
        assert_eq!(a.split(Membership::Nonmember).count(), 30);
        assert!(a.documents().iter().all(|d| d.text.is_ascii() && d.text.len() >= 2));
    }

    #[test]
    fn different_seeds_give_different_text() {
        let a = generate_corpus(&SynthConfig { seed: 1, ..SynthConfig::default() }).unwrap();
        let b = generate_corpus(&SynthConfig { seed: 2, ..SynthConfig::default() }).unwrap();
        assert_ne!(a.to_jsonl(), b.to_jsonl());
    }
}
