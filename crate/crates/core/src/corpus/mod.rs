//! Member / non-member text corpora: JSON-lines ingestion, validation,
//! byte-level tokenization and seeded manifests.

mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use synth::{generate_corpus, SynthConfig};

/// Byte-level vocabulary size.
pub const VOCAB_SIZE: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("document {id:?} has empty text")]
    EmptyText { id: String },
    #[error("text of member {member_id:?} also appears as non-member {nonmember_id:?}")]
    CrossSplitDuplicate { member_id: String, nonmember_id: String },
    #[error("document {id:?} tokenizes to {len} tokens; at least 2 are required")]
    TooShort { id: String, len: usize },
    #[error("max_len must be at least 2, got {0}")]
    InvalidMaxLen(usize),
    #[error("corpus has no {0} documents")]
    EmptySplit(Membership),
    #[error("holdout of {requested} non-members leaves no evaluation non-members (have {available})")]
    HoldoutTooLarge { requested: usize, available: usize },
    #[error("unknown document id {0:?}")]
    UnknownId(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Member,
    Nonmember,
}

impl std::fmt::Display for Membership {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Membership::Member => "member",
            Membership::Nonmember => "nonmember",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub membership: Membership,
}

/// On-disk record: `{"id": ..., "text": ..., "split": "member" | "nonmember"}`.
#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    split: Membership,
}

/// A validated collection of documents. Ids are unique, texts non-empty and no
/// text occurs in both splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if index.insert(d.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    id: d.id.clone(),
                    line: i + 1,
                });
            }
            if d.text.trim().is_empty() {
                return Err(CorpusError::EmptyText { id: d.id.clone() });
            }
        }
        let mut member_texts: HashMap<&str, &str> = HashMap::new();
        for d in docs.iter().filter(|d| d.membership == Membership::Member) {
            member_texts.entry(d.text.as_str()).or_insert(d.id.as_str());
        }
        for d in docs.iter().filter(|d| d.membership == Membership::Nonmember) {
            if let Some(member_id) = member_texts.get(d.text.as_str()) {
                return Err(CorpusError::CrossSplitDuplicate {
                    member_id: member_id.to_string(),
                    nonmember_id: d.id.clone(),
                });
            }
        }
        Ok(Self { docs, index })
    }

    pub fn parse_jsonl(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut docs = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            if seen.insert(rec.id.clone(), line_no).is_some() {
                return Err(CorpusError::DuplicateId { id: rec.id, line: line_no });
            }
            docs.push(Document {
                id: rec.id,
                text: rec.text,
                membership: rec.split,
            });
        }
        Self::from_documents(docs)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.docs {
            let rec = Record {
                id: d.id.clone(),
                text: d.text.clone(),
                split: d.membership,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.index.get(id).map(|&i| &self.docs[i])
    }

    pub fn require(&self, id: &str) -> Result<&Document, CorpusError> {
        self.get(id).ok_or_else(|| CorpusError::UnknownId(id.to_string()))
    }

    pub fn split(&self, membership: Membership) -> impl Iterator<Item = &Document> {
        self.docs.iter().filter(move |d| d.membership == membership)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Corpus::parse_jsonl(BufReader::new(f))
}

/// Tokenized view of a document: its UTF-8 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<usize>,
    pub source_id: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize(doc: &Document, max_len: usize) -> Result<TokenSeq, CorpusError> {
    if max_len < 2 {
        return Err(CorpusError::InvalidMaxLen(max_len));
    }
    let tokens: Vec<usize> = doc.text.bytes().take(max_len).map(usize::from).collect();
    if tokens.len() < 2 {
        return Err(CorpusError::TooShort {
            id: doc.id.clone(),
            len: tokens.len(),
        });
    }
    Ok(TokenSeq {
        tokens,
        source_id: doc.id.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tokenizer {
    ByteLevel,
}

/// Non-member documents reserved for attack machinery and never scored:
/// the ReCaLL prefix pool and the reference model's training data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Holdout {
    pub prefix_pool: usize,
    pub reference_pool: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub member_ids: Vec<String>,
    pub nonmember_ids: Vec<String>,
    pub seed: u64,
    pub tokenizer: Tokenizer,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prefix_pool_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference_pool_ids: Vec<String>,
}

impl CorpusManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

pub fn make_manifest(corpus: &Corpus, seed: u64) -> Result<CorpusManifest, CorpusError> {
    make_manifest_with_holdout(corpus, seed, Holdout::default())
}

/// Seeded manifest. Holdout pools are carved from the non-members by a
/// seed-independent content hash of the id, so the evaluation sets depend
/// only on the corpus; the seed only permutes their order.
pub fn make_manifest_with_holdout(corpus: &Corpus, seed: u64, holdout: Holdout) -> Result<CorpusManifest, CorpusError> {
    let mut members: Vec<String> = corpus.split(Membership::Member).map(|d| d.id.clone()).collect();
    let mut nonmembers: Vec<String> = corpus.split(Membership::Nonmember).map(|d| d.id.clone()).collect();
    if members.is_empty() {
        return Err(CorpusError::EmptySplit(Membership::Member));
    }
    if nonmembers.is_empty() {
        return Err(CorpusError::EmptySplit(Membership::Nonmember));
    }
    let reserved = holdout.prefix_pool + holdout.reference_pool;
    if reserved >= nonmembers.len() {
        return Err(CorpusError::HoldoutTooLarge {
            requested: reserved,
            available: nonmembers.len(),
        });
    }

    let keyed: BTreeMap<String, String> = nonmembers
        .drain(..)
        .map(|id| (hex::encode(Sha256::digest(id.as_bytes())), id))
        .collect();
    let mut ordered = keyed.into_values();
    let prefix_pool_ids: Vec<String> = ordered.by_ref().take(holdout.prefix_pool).collect();
    let mut reference_pool_ids: Vec<String> = ordered.by_ref().take(holdout.reference_pool).collect();
    nonmembers = ordered.collect();

    members.sort();
    nonmembers.sort();
    reference_pool_ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    members.shuffle(&mut rng);
    nonmembers.shuffle(&mut rng);

    Ok(CorpusManifest {
        member_ids: members,
        nonmember_ids: nonmembers,
        seed,
        tokenizer: Tokenizer::ByteLevel,
        prefix_pool_ids,
        reference_pool_ids,
    })
}
