//! Text encoding: a frozen base embedder and trainable projection heads.
//!
//! The base embedder maps a token to seeded character-3-gram feature hashes
//! (so related surface forms get correlated vectors) and mean-pools tokens;
//! it never trains. A `ProjectionHead` is a two-layer MLP on top whose
//! output is L2-normalized into the shared question/triplet space.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::knowledge::{KnowledgeGraph, SurfaceTriplet};
use crate::numerics::{l2_norm, l2_normalize, Gradients, Matrix};
use crate::text;

pub use crate::text::tokenize;

/// Frozen base embedder. Identical text always maps to identical vectors.
#[derive(Debug, Clone)]
pub struct BaseEmbedder {
    dim: usize,
    seed: u64,
    table: Option<HashMap<String, Vec<f64>>>,
}

impl BaseEmbedder {
    /// Hashed mode: vectors depend only on (text, dim, seed).
    pub fn hashed(dim: usize, seed: u64) -> Self {
        BaseEmbedder {
            dim,
            seed,
            table: None,
        }
    }

    /// File mode: token vectors from a text file with header
    /// `<vocab_size> <dim>` then `token v1 ... vD` per line. Unknown tokens
    /// back off to the hashed vector.
    pub fn from_file(path: &Path, seed: u64) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        let (vocab, dim): (usize, usize) = match (parts.next(), parts.next()) {
            (Some(v), Some(d)) => (
                v.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: "bad vocab size".into(),
                })?,
                d.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: "bad dim".into(),
                })?,
            ),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: "expected `<vocab_size> <dim>` header".into(),
                })
            }
        };
        let mut table = HashMap::with_capacity(vocab);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let token = it.next().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 2,
                msg: "missing token".into(),
            })?;
            let vec: Vec<f64> = it
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 2,
                    msg: e.to_string(),
                })?;
            if vec.len() != dim {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 2,
                    msg: format!("expected {dim} values, got {}", vec.len()),
                });
            }
            table.insert(token.to_string(), vec);
        }
        Ok(BaseEmbedder {
            dim,
            seed,
            table: Some(table),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean of per-token vectors; the empty token list maps to the zero
    /// vector.
    pub fn embed(&self, text_input: &str) -> Vec<f64> {
        let tokens = text::tokenize(text_input);
        let mut acc = vec![0.0; self.dim];
        if tokens.is_empty() {
            return acc;
        }
        for tok in &tokens {
            let v = self.token_vector(tok);
            for (a, b) in acc.iter_mut().zip(&v) {
                *a += b;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        acc
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if let Some(table) = &self.table {
            if let Some(v) = table.get(token) {
                return v.clone();
            }
        }
        self.hashed_token_vector(token)
    }

    /// Character 3-grams of `^token$` hashed into `dim` buckets with +-1
    /// signs, L2-normalized.
    fn hashed_token_vector(&self, token: &str) -> Vec<f64> {
        let wrapped: Vec<char> = std::iter::once('^')
            .chain(token.chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut v = vec![0.0; self.dim];
        let push = |gram: &[char], v: &mut Vec<f64>| {
            let s: String = gram.iter().collect();
            let h = fnv1a64(s.as_bytes(), self.seed);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        };
        if wrapped.len() < 3 {
            push(&wrapped, &mut v);
        } else {
            for gram in wrapped.windows(3) {
                push(gram, &mut v);
            }
        }
        l2_normalize(&mut v);
        v
    }
}

/// Two-layer projection head: `normalize(W2 * relu(W1 * x + b1) + b2)`.
///
/// Weights are stored out-by-in; biases are column vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Cached intermediates from one head forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
    pub output: Vec<f64>,
}

impl ProjectionHead {
    pub fn random(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        let xavier = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(rng.gen_range(-a..a));
            }
            Matrix::new(rows, cols, data).expect("finite init")
        };
        ProjectionHead {
            w1: xavier(hidden_dim, input_dim, rng),
            b1: Matrix::zeros(hidden_dim, 1),
            w2: xavier(output_dim, hidden_dim, rng),
            b2: Matrix::zeros(output_dim, 1),
        }
    }

    /// Square identity head; useful as a do-nothing baseline in tests.
    pub fn identity(dim: usize) -> Self {
        ProjectionHead {
            w1: Matrix::identity(dim),
            b1: Matrix::zeros(dim, 1),
            w2: Matrix::identity(dim),
            b2: Matrix::zeros(dim, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Forward pass with trace. A zero pre-normalization output is returned
    /// as the zero vector (degenerate, never normalized).
    pub fn forward(&self, x: &[f64]) -> Result<HeadTrace> {
        let mut hidden_pre = self.w1.matvec(x)?;
        for (h, b) in hidden_pre.iter_mut().zip(self.b1.data()) {
            *h += b;
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|h| h.max(0.0)).collect();
        let mut out_pre = self.w2.matvec(&hidden)?;
        for (o, b) in out_pre.iter_mut().zip(self.b2.data()) {
            *o += b;
        }
        let norm = l2_norm(&out_pre);
        let output = if norm > 0.0 {
            out_pre.iter().map(|o| o / norm).collect()
        } else {
            out_pre
        };
        Ok(HeadTrace {
            input: x.to_vec(),
            hidden_pre,
            hidden,
            norm,
            output,
        })
    }

    /// Backpropagate `grad_output` (gradient w.r.t. the normalized output)
    /// into parameter gradients, accumulated into `grads` (order: w1, b1,
    /// w2, b2 starting at `block_offset`).
    pub fn backward(
        &self,
        trace: &HeadTrace,
        grad_output: &[f64],
        grads: &mut Gradients,
        block_offset: usize,
    ) -> Result<()> {
        // through normalization: g_y = (g - y_hat (y_hat . g)) / |y|
        let g_y: Vec<f64> = if trace.norm > 0.0 {
            let proj = crate::numerics::dot(&trace.output, grad_output);
            trace
                .output
                .iter()
                .zip(grad_output)
                .map(|(y, g)| (g - y * proj) / trace.norm)
                .collect()
        } else {
            grad_output.to_vec()
        };
        grads.blocks[block_offset + 2].add_outer(&g_y, &trace.hidden, 1.0);
        for (b, g) in grads.blocks[block_offset + 3].data_mut().iter_mut().zip(&g_y) {
            *b += g;
        }
        let g_hidden = self.w2.matvec_transposed(&g_y)?;
        let g_hidden_pre: Vec<f64> = g_hidden
            .iter()
            .zip(&trace.hidden_pre)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        grads.blocks[block_offset].add_outer(&g_hidden_pre, &trace.input, 1.0);
        for (b, g) in grads.blocks[block_offset + 1]
            .data_mut()
            .iter_mut()
            .zip(&g_hidden_pre)
        {
            *b += g;
        }
        Ok(())
    }

    /// Parameter blocks in canonical order (w1, b1, w2, b2).
    pub fn params(&self) -> Vec<Matrix> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    pub fn set_params(&mut self, blocks: &[Matrix]) -> Result<()> {
        if blocks.len() != 4 {
            return Err(Error::dimension("4 blocks", format!("{}", blocks.len())));
        }
        self.w1 = blocks[0].clone();
        self.b1 = blocks[1].clone();
        self.w2 = blocks[2].clone();
        self.b2 = blocks[3].clone();
        Ok(())
    }
}

/// A base embedder paired with an optional projection head. `Base` is the
/// untrained baseline (L2-normalized base vectors); `Projected` is the
/// trained path.
pub enum TextEncoder<'a> {
    Base(&'a BaseEmbedder),
    Projected(&'a BaseEmbedder, &'a ProjectionHead),
}

impl TextEncoder<'_> {
    pub fn dim(&self) -> usize {
        match self {
            TextEncoder::Base(e) => e.dim(),
            TextEncoder::Projected(_, h) => h.output_dim(),
        }
    }

    pub fn encode(&self, text_input: &str) -> Result<Vec<f64>> {
        match self {
            TextEncoder::Base(e) => {
                let mut v = e.embed(text_input);
                l2_normalize(&mut v);
                Ok(v)
            }
            TextEncoder::Projected(e, h) => encode(text_input, e, h),
        }
    }
}

/// Project and L2-normalize a base embedding; gradient flows only through
/// the head.
pub fn encode(text_input: &str, embedder: &BaseEmbedder, head: &ProjectionHead) -> Result<Vec<f64>> {
    Ok(head.forward(&embedder.embed(text_input))?.output)
}

/// Encode a triplet by verbalizing it first.
pub fn encode_triplet(
    graph: &KnowledgeGraph,
    triplet_id: usize,
    embedder: &BaseEmbedder,
    head: &ProjectionHead,
) -> Result<Vec<f64>> {
    encode(&graph.verbalize(triplet_id)?, embedder, head)
}

pub fn encode_surface_triplet(
    t: &SurfaceTriplet,
    embedder: &BaseEmbedder,
    head: &ProjectionHead,
) -> Result<Vec<f64>> {
    encode(&t.verbalize(), embedder, head)
}

const CHECKPOINT_VERSION: u32 = 1;

/// On-disk form of a trained retriever: both towers plus shape metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadCheckpoint {
    pub format_version: u32,
    pub base_dim: usize,
    pub base_seed: u64,
    pub question_head: ProjectionHead,
    pub triplet_head: ProjectionHead,
    pub source: String,
}

impl HeadCheckpoint {
    pub fn new(
        base_dim: usize,
        base_seed: u64,
        question_head: ProjectionHead,
        triplet_head: ProjectionHead,
        source: &str,
    ) -> Self {
        HeadCheckpoint {
            format_version: CHECKPOINT_VERSION,
            base_dim,
            base_seed,
            question_head,
            triplet_head,
            source: source.to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let ckpt: HeadCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {} (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}
