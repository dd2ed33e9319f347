use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved token id for rows added by [`pad_align`].
pub const PAD_TOKEN: &str = "<pad>";
/// Start-of-text token the hashed tokenizer prepends to every prompt.
pub const START_TOKEN: &str = "<sot>";

/// A `tokens x dims` prompt embedding matrix with its token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    tokens: Vec<String>,
    matrix: Array2<f64>,
}

impl PromptEmbedding {
    pub fn new(tokens: Vec<String>, matrix: Array2<f64>) -> Result<Self> {
        let (n, d) = matrix.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!("embedding must be non-empty, got {n}x{d}")));
        }
        if tokens.len() != n {
            return Err(Error::InvalidArgument(format!("{} token ids for {n} rows", tokens.len())));
        }
        if tokens.iter().any(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::InvalidArgument("token ids must be non-empty and whitespace-free".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt embedding"));
        }
        Ok(Self { tokens, matrix })
    }

    pub(crate) fn from_parts_unchecked(tokens: Vec<String>, matrix: Array2<f64>) -> Self {
        debug_assert_eq!(tokens.len(), matrix.nrows());
        Self { tokens, matrix }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.matrix.ncols()
    }

    /// Mean over token rows.
    pub fn pooled(&self) -> Array1<f64> {
        self.matrix.mean_axis(Axis(0)).expect("non-empty embedding")
    }

    /// First `n` rows; inverse of padding.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!("cannot truncate {} rows to {n}", self.len())));
        }
        Ok(Self {
            tokens: self.tokens[..n].to_vec(),
            matrix: self.matrix.slice(s![..n, ..]).to_owned(),
        })
    }

    /// Serializes to the text format read by [`load_embeddings`].
    pub fn to_text(&self) -> String {
        let mut out = format!("tokens={} dims={}\n", self.len(), self.dims());
        for (token, row) in self.tokens.iter().zip(self.matrix.rows()) {
            out.push_str(token);
            for v in row {
                // Debug formatting is the shortest string that parses back exactly.
                write!(out, " {v:?}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(origin, "missing header"))?;
        let (n, d) = parse_header(header).ok_or_else(|| {
            Error::parse(origin, format!("malformed header `{header}`, expected `tokens=<n> dims=<d>`"))
        })?;
        let mut tokens = Vec::with_capacity(n);
        let mut matrix = Array2::zeros((n, d));
        for i in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(origin, format!("expected {n} rows, found {i}")))?;
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-empty line");
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::parse(origin, format!("row {}: `{f}`: {e}", i + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != d {
                return Err(Error::parse(
                    origin,
                    format!("row {} has {} values, expected {d}", i + 1, values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(origin, format!("row {} has non-finite entries", i + 1)));
            }
            tokens.push(token.to_string());
            matrix.row_mut(i).assign(&Array1::from(values));
        }
        if lines.next().is_some() {
            return Err(Error::parse(origin, format!("more than {n} rows")));
        }
        Self::new(tokens, matrix)
    }
}

fn parse_header(header: &str) -> Option<(usize, usize)> {
    let mut parts = header.split_whitespace();
    let n = parts.next()?.strip_prefix("tokens=")?.parse().ok()?;
    let d = parts.next()?.strip_prefix("dims=")?.parse().ok()?;
    if parts.next().is_some() || n == 0 || d == 0 {
        return None;
    }
    Some((n, d))
}

/// Reads an embedding file: a `tokens=<n> dims=<d>` header followed by `n`
/// lines of `<token-id> <d floats>`, whitespace separated.
pub fn load_embeddings(path: &Path) -> Result<PromptEmbedding> {
    let text = fs::read_to_string(path)?;
    PromptEmbedding::from_text(&text, &path.display().to_string())
}

/// Deterministic stand-in for a text encoder: each word maps to a Gaussian
/// vector seeded by a SHA-256 of `(seed, word)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedTokenizer {
    pub dims: usize,
    pub seed: u64,
}

impl HashedTokenizer {
    pub fn new(dims: usize, seed: u64) -> Self {
        Self { dims, seed }
    }

    pub fn tokenize(text: &str) -> Vec<String> {
        std::iter::once(START_TOKEN.to_string())
            .chain(
                text.split_whitespace()
                    .map(|w| {
                        w.chars()
                            .filter(|c| c.is_alphanumeric() || *c == '-' || *c == '\'')
                            .flat_map(char::to_lowercase)
                            .collect::<String>()
                    })
                    .filter(|w| !w.is_empty()),
            )
            .collect()
    }

    pub fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        Array1::from_shape_fn(self.dims, |_| StandardNormal.sample(&mut rng))
    }

    pub fn encode(&self, text: &str) -> Result<PromptEmbedding> {
        if self.dims == 0 {
            return Err(Error::InvalidArgument("tokenizer dims must be positive".into()));
        }
        let tokens = Self::tokenize(text);
        let mut matrix = Array2::zeros((tokens.len(), self.dims));
        for (i, tok) in tokens.iter().enumerate() {
            matrix.row_mut(i).assign(&self.token_vector(tok));
        }
        PromptEmbedding::new(tokens, matrix)
    }
}

/// Right-pads the shorter embedding with zero rows tagged [`PAD_TOKEN`].
pub fn pad_align(a: &PromptEmbedding, b: &PromptEmbedding) -> Result<(PromptEmbedding, PromptEmbedding)> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.dims()],
            found: vec![b.dims()],
        });
    }
    let n = a.len().max(b.len());
    Ok((pad_to(a, n), pad_to(b, n)))
}

fn pad_to(e: &PromptEmbedding, n: usize) -> PromptEmbedding {
    if e.len() == n {
        return e.clone();
    }
    let mut matrix = Array2::zeros((n, e.dims()));
    matrix.slice_mut(s![..e.len(), ..]).assign(&e.matrix);
    let mut tokens = e.tokens.clone();
    tokens.resize(n, PAD_TOKEN.to_string());
    PromptEmbedding::from_parts_unchecked(tokens, matrix)
}
