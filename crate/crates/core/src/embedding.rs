//! Frozen word-vector tables and keyed vector stores.
//!
//! Word files are whitespace-separated text (`token f1 ... fdim`, one per
//! line). Sentence vectors and precomputed image features share a JSON Lines
//! format: `{"id": "...", "vec": [...]}`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{TokenSequence, UNK};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: HashMap<String, usize>,
    tokens: Vec<String>,
    matrix: Tensor,
    unk_index: usize,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` rows, appending a zero `<unk>`
    /// row when none is given.
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = rows
            .first()
            .map(|(_, v)| v.len())
            .ok_or(Error::EmptyInput("embedding table"))?;
        if dim == 0 {
            return Err(Error::Format("embedding dimension must be positive".into()));
        }
        let mut vocab = HashMap::with_capacity(rows.len() + 1);
        let mut tokens = Vec::with_capacity(rows.len() + 1);
        let mut data = Vec::with_capacity((rows.len() + 1) * dim);
        for (token, vec) in rows {
            if vec.len() != dim {
                return Err(Error::shape("embedding row", &[dim], &[vec.len()]));
            }
            if vocab.insert(token.clone(), tokens.len()).is_some() {
                return Err(Error::Format(format!("duplicate embedding token {token:?}")));
            }
            tokens.push(token);
            data.extend(vec);
        }
        if !vocab.contains_key(UNK) {
            vocab.insert(UNK.to_string(), tokens.len());
            tokens.push(UNK.to_string());
            data.extend(std::iter::repeat(0.0).take(dim));
        }
        let unk_index = vocab[UNK];
        let matrix = Tensor::matrix(tokens.len(), dim, data)?;
        Ok(EmbeddingTable {
            dim,
            vocab,
            tokens,
            matrix,
            unk_index,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let mut rows = Vec::new();
        let mut dim = None;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.clone(),
                line: idx + 1,
                msg,
            };
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-blank line has a field").to_string();
            let vec = fields
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(format!("bad float {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let expected = *dim.get_or_insert(vec.len());
            if vec.is_empty() || vec.len() != expected {
                return Err(parse_err(format!(
                    "expected {expected} values for {token:?}, found {}",
                    vec.len()
                )));
            }
            rows.push((token, vec));
        }
        if rows.is_empty() {
            return Err(Error::Format(format!("{origin}: no embedding rows")));
        }
        EmbeddingTable::from_rows(rows)
    }

    /// Loads and checks the vector width against `expected_dim`.
    pub fn load_with_dim(path: &Path, expected_dim: usize) -> Result<Self> {
        let table = EmbeddingTable::load(path)?;
        if table.dim != expected_dim {
            return Err(Error::Format(format!(
                "{}: embedding dim {} but {expected_dim} expected",
                path.display(),
                table.dim
            )));
        }
        Ok(table)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (i, token) in self.tokens.iter().enumerate() {
            write!(w, "{token}")?;
            for v in self.matrix.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_index(&self) -> usize {
        self.unk_index
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.vocab.get(token).copied().unwrap_or(self.unk_index)
    }

    pub fn vector(&self, token: &str) -> &[f64] {
        self.matrix.row(self.index_of(token))
    }

    /// One row per token; out-of-vocabulary tokens read the `<unk>` row.
    pub fn lookup(&self, seq: &TokenSequence) -> Result<Tensor> {
        self.lookup_tokens(seq.tokens())
    }

    pub fn lookup_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("embedding lookup"));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for tok in tokens {
            data.extend_from_slice(self.vector(tok.as_ref()));
        }
        Tensor::matrix(tokens.len(), self.dim, data)
    }
}

#[derive(Serialize, Deserialize)]
struct VectorLine {
    id: String,
    vec: Vec<f64>,
}

/// Id-keyed vectors of one shared width: sentence embeddings or precomputed
/// image features.
#[derive(Clone, Debug, Default)]
pub struct VectorStore {
    dim: usize,
    vectors: HashMap<String, Tensor>,
}

pub type SentenceVectorStore = VectorStore;

impl VectorStore {
    pub fn new() -> Self {
        VectorStore::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, vec: Vec<f64>) -> Result<()> {
        let id = id.into();
        if self.vectors.is_empty() {
            self.dim = vec.len();
        } else if vec.len() != self.dim {
            return Err(Error::shape("vector store insert", &[self.dim], &[vec.len()]));
        }
        if self.vectors.contains_key(&id) {
            return Err(Error::Format(format!("duplicate vector id {id:?}")));
        }
        self.vectors.insert(id, Tensor::vector(vec));
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let mut store = VectorStore::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.clone(),
                line: idx + 1,
                msg,
            };
            let rec: VectorLine =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            store
                .insert(rec.id, rec.vec)
                .map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut ids: Vec<&String> = self.vectors.keys().collect();
        ids.sort();
        for id in ids {
            let line = VectorLine {
                id: id.clone(),
                vec: self.vectors[id].data().to_vec(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.vectors
            .get(id)
            .ok_or_else(|| Error::MissingId(id.to_string()))
    }
}

/// The stored vector for `id`, unchanged.
pub fn sentence_vector<'a>(store: &'a SentenceVectorStore, id: &str) -> Result<&'a Tensor> {
    store.get(id)
}
