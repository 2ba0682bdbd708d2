//! Fixed word-phrase vectors for the concept vocabulary.
//!
//! A phrase vector is the mean of its tokens' word vectors, read from a
//! GloVe-style text file (`token f_1 ... f_d` per line). The source
//! `random:<seed>` yields deterministic unit-norm vectors instead, for runs
//! without a word-vector file.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::ConceptVocabulary;

/// Directory searched for word-vector files given by relative path.
pub const CACHE_ENV: &str = "COHERENT_CONCEPTS_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPhraseEmbedding {
    /// k x d, one row per concept phrase.
    pub vectors: Array2<f32>,
}

impl ConceptPhraseEmbedding {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

pub fn tokenize(phrase: &str) -> Vec<String> {
    phrase
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn resolve(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    if p.exists() || p.is_absolute() {
        return p;
    }
    match std::env::var_os(CACHE_ENV) {
        Some(dir) => {
            let cached = Path::new(&dir).join(&p);
            if cached.exists() {
                cached
            } else {
                p
            }
        }
        None => p,
    }
}

/// `source` is either a word-vector file path or `random:<seed>`;
/// `random_dim` sets the width of random vectors.
pub fn load_phrase_embeddings(source: &str, vocab: &ConceptVocabulary, random_dim: usize) -> Result<ConceptPhraseEmbedding> {
    if let Some(seed) = source.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Config(format!("bad random phrase seed in {source:?}")))?;
        return Ok(random_embeddings(seed, vocab, random_dim));
    }
    let path = resolve(source);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    read_word_vectors(BufReader::new(file), vocab)
}

fn random_embeddings(seed: u64, vocab: &ConceptVocabulary, dim: usize) -> ConceptPhraseEmbedding {
    let mut vectors = Array2::zeros((vocab.len(), dim));
    for (k, phrase) in vocab.phrases().iter().enumerate() {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(phrase.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut row: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v /= norm);
        vectors.row_mut(k).assign(&ndarray::Array1::from(row));
    }
    ConceptPhraseEmbedding { vectors }
}

pub fn read_word_vectors<R: BufRead>(reader: R, vocab: &ConceptVocabulary) -> Result<ConceptPhraseEmbedding> {
    let phrase_tokens: Vec<Vec<String>> = vocab.phrases().iter().map(|p| tokenize(p)).collect();
    let wanted: HashSet<&str> = phrase_tokens.iter().flatten().map(String::as_str).collect();
    let mut found: HashMap<String, Vec<f32>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line has a token");
        let values = fields
            .map(|f| {
                f.parse::<f32>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad number {f:?}"),
                })
            })
            .collect::<Result<Vec<f32>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("token {token:?} has no vector"),
            });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {d} components, found {}", values.len()),
                })
            }
            _ => {}
        }
        let token = token.to_lowercase();
        if wanted.contains(token.as_str()) {
            found.entry(token).or_insert(values);
        }
    }
    let dim = dim.ok_or_else(|| Error::Parse {
        line: 0,
        msg: "word-vector file is empty".into(),
    })?;
    let mut vectors = Array2::zeros((vocab.len(), dim));
    for (k, tokens) in phrase_tokens.iter().enumerate() {
        let hits: Vec<&Vec<f32>> = tokens.iter().filter_map(|t| found.get(t)).collect();
        if hits.is_empty() {
            return Err(Error::Vocabulary(format!(
                "no token of phrase {:?} found in word vectors",
                vocab.phrases()[k]
            )));
        }
        let mut row = vectors.row_mut(k);
        for v in &hits {
            for (r, x) in row.iter_mut().zip(v.iter()) {
                *r += x / hits.len() as f32;
            }
        }
    }
    Ok(ConceptPhraseEmbedding { vectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(phrases: &[&str]) -> ConceptVocabulary {
        ConceptVocabulary::new(
            (0..phrases.len()).map(|i| format!("c{i}")).collect(),
            phrases.iter().map(|p| p.to_string()).collect(),
        )
        .unwrap()
    }

    const FILE: &str = "streaks 1 2 3\nregular 0 4 -2\nblue 1 1 1\n";

    #[test]
    fn single_token_phrase_is_that_vector() {
        let e = read_word_vectors(FILE.as_bytes(), &vocab(&["Blue"])).unwrap();
        assert_eq!(e.vectors.row(0).to_vec(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn two_token_phrase_is_mean() {
        let e = read_word_vectors(FILE.as_bytes(), &vocab(&["regular streaks"])).unwrap();
        assert_eq!(e.vectors.row(0).to_vec(), vec![0.5, 3.0, 0.5]);
    }

    #[test]
    fn missing_tokens_contribute_nothing() {
        let e = read_word_vectors(FILE.as_bytes(), &vocab(&["irregular streaks"])).unwrap();
        assert_eq!(e.vectors.row(0).to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn all_miss_phrase_is_vocabulary_error() {
        let err = read_word_vectors(FILE.as_bytes(), &vocab(&["regression structures"])).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(_)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "a 1 2\nb 1 x\n";
        match read_word_vectors(text.as_bytes(), &vocab(&["a"])) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match read_word_vectors("a 1 2\nb 1\n".as_bytes(), &vocab(&["a"])) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn random_source_is_deterministic_unit_norm() {
        let v = ConceptVocabulary::default();
        let a = load_phrase_embeddings("random:42", &v, 200).unwrap();
        let b = load_phrase_embeddings("random:42", &v, 200).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vectors.dim(), (8, 200));
        for row in a.vectors.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-5);
        }
        assert_ne!(a, load_phrase_embeddings("random:43", &v, 200).unwrap());
    }
}
