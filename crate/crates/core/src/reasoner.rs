//! Multi-hop cross-attention reasoner.
//!
//! The query starts as the question embedding and is replaced at every
//! layer by the sum of one attention pass over the retrieved KB facts and
//! one over the scene-graph facts. The two final branch outputs are
//! concatenated, passed through a relu integration layer, and classified
//! over the answer vocabulary.
//!
//! When both knowledge sources are disabled (the no-knowledge baseline),
//! the integration layer instead consumes the question embedding
//! concatenated with the caption embedding.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnswerVocab, QARecord};
use crate::encoder::{BaseEmbedder, ProjectionHead, TextEncoder};
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeGraph, Scene, Source};
use crate::numerics::{adamw_step, dot, softmax, AdamState, Gradients, Matrix};
use crate::retriever::{kb_candidate_pool, RetrievalIndex};

/// Where a source's fact set comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceMode {
    Retrieved,
    GroundTruth,
    None,
}

impl SourceMode {
    pub fn label(&self) -> &'static str {
        match self {
            SourceMode::Retrieved => "ret",
            SourceMode::GroundTruth => "gt",
            SourceMode::None => "none",
        }
    }
}

/// Per-source input modes; `(None, None)` selects the question+caption
/// passthrough baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputModes {
    pub kb: SourceMode,
    pub sg: SourceMode,
}

impl InputModes {
    pub fn label(&self) -> String {
        match (self.kb, self.sg) {
            (SourceMode::None, SourceMode::None) => "none".into(),
            (kb, SourceMode::None) => format!("kb_{}", kb.label()),
            (SourceMode::None, sg) => format!("sg_{}", sg.label()),
            (kb, sg) => format!("kb_{}+sg_{}", kb.label(), sg.label()),
        }
    }
}

/// One record's embedded inputs.
#[derive(Debug, Clone)]
pub struct ReasonerInput {
    pub question: Vec<f64>,
    pub caption: Vec<f64>,
    pub kb_set: Vec<Vec<f64>>,
    pub sg_set: Vec<Vec<f64>>,
    /// both sources disabled: integration consumes question++caption
    pub passthrough: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttentionBlock {
    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (2 * dim) as f64).sqrt();
        let mk = |rng: &mut ChaCha8Rng| {
            let mut data = Vec::with_capacity(dim * dim);
            for _ in 0..dim * dim {
                data.push(rng.gen_range(-a..a));
            }
            Matrix::new(dim, dim, data).expect("finite init")
        };
        AttentionBlock {
            wq: mk(rng),
            wk: mk(rng),
            wv: mk(rng),
        }
    }

    #[cfg(test)]
    fn identity(dim: usize) -> Self {
        AttentionBlock {
            wq: Matrix::identity(dim),
            wk: Matrix::identity(dim),
            wv: Matrix::identity(dim),
        }
    }
}

/// All trainable blocks of the reasoner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerParams {
    pub dim: usize,
    pub layers: usize,
    pub residual: bool,
    pub kb_attn: Vec<AttentionBlock>,
    pub sg_attn: Vec<AttentionBlock>,
    pub w_int: Matrix,
    pub b_int: Matrix,
    pub w_cls: Matrix,
    pub b_cls: Matrix,
}

impl ReasonerParams {
    pub fn random(
        dim: usize,
        layers: usize,
        vocab_size: usize,
        residual: bool,
        seed: u64,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Contract("reasoner needs at least one layer".into()));
        }
        if vocab_size == 0 {
            return Err(Error::Contract(
                "classifier needs a non-empty answer vocab".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_int = (6.0 / (3 * dim) as f64).sqrt();
        let a_cls = (6.0 / (dim + vocab_size) as f64).sqrt();
        let mk = |rows: usize, cols: usize, a: f64, rng: &mut ChaCha8Rng| {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(rng.gen_range(-a..a));
            }
            Matrix::new(rows, cols, data).expect("finite init")
        };
        Ok(ReasonerParams {
            dim,
            layers,
            residual,
            kb_attn: (0..layers)
                .map(|_| AttentionBlock::random(dim, &mut rng))
                .collect(),
            sg_attn: (0..layers)
                .map(|_| AttentionBlock::random(dim, &mut rng))
                .collect(),
            w_int: mk(dim, 2 * dim, a_int, &mut rng),
            b_int: Matrix::zeros(dim, 1),
            w_cls: mk(vocab_size, dim, a_cls, &mut rng),
            b_cls: Matrix::zeros(vocab_size, 1),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.w_cls.rows()
    }

    /// Canonical block order: per layer kb(wq,wk,wv) then sg(wq,wk,wv),
    /// then w_int, b_int, w_cls, b_cls.
    pub fn flatten(&self) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(6 * self.layers + 4);
        for l in 0..self.layers {
            for b in [&self.kb_attn[l], &self.sg_attn[l]] {
                out.push(b.wq.clone());
                out.push(b.wk.clone());
                out.push(b.wv.clone());
            }
        }
        out.push(self.w_int.clone());
        out.push(self.b_int.clone());
        out.push(self.w_cls.clone());
        out.push(self.b_cls.clone());
        out
    }

    pub fn unflatten(&mut self, blocks: &[Matrix]) -> Result<()> {
        let expect = 6 * self.layers + 4;
        if blocks.len() != expect {
            return Err(Error::dimension(
                format!("{expect} blocks"),
                format!("{}", blocks.len()),
            ));
        }
        let mut it = blocks.iter().cloned();
        for l in 0..self.layers {
            for side in 0..2 {
                let block = AttentionBlock {
                    wq: it.next().unwrap(),
                    wk: it.next().unwrap(),
                    wv: it.next().unwrap(),
                };
                if side == 0 {
                    self.kb_attn[l] = block;
                } else {
                    self.sg_attn[l] = block;
                }
            }
        }
        self.w_int = it.next().unwrap();
        self.b_int = it.next().unwrap();
        self.w_cls = it.next().unwrap();
        self.b_cls = it.next().unwrap();
        Ok(())
    }

    fn attn_block_offset(layer: usize, source: Source) -> usize {
        6 * layer
            + match source {
                Source::Kb => 0,
                Source::Sg => 3,
            }
    }
}

/// Scaled dot-product attention over a fact set; the empty set yields the
/// zero vector.
pub fn attention(query: &[f64], set: &[Vec<f64>], block: &AttentionBlock) -> Result<Vec<f64>> {
    Ok(attention_forward(query, set, block)?.output)
}

#[derive(Debug, Clone)]
struct AttnTrace {
    query_in: Vec<f64>,
    /// Wq * query
    projected_query: Vec<f64>,
    weights: Vec<f64>,
    /// attention-weighted sum of the raw set vectors
    weighted_set: Vec<f64>,
    output: Vec<f64>,
}

/// Single-query attention factorizes: scores are `(Wk^T Wq q) . t_i` and
/// the output is `Wv (sum_i w_i t_i)`, so per-element key/value projections
/// never materialize.
fn attention_forward(query: &[f64], set: &[Vec<f64>], block: &AttentionBlock) -> Result<AttnTrace> {
    let dim = block.wq.rows();
    if set.is_empty() {
        return Ok(AttnTrace {
            query_in: query.to_vec(),
            projected_query: vec![0.0; dim],
            weights: Vec::new(),
            weighted_set: vec![0.0; dim],
            output: vec![0.0; dim],
        });
    }
    let projected_query = block.wq.matvec(query)?;
    let score_probe = block.wk.matvec_transposed(&projected_query)?;
    let scale = 1.0 / (dim as f64).sqrt();
    let scores: Vec<f64> = set.iter().map(|t| dot(&score_probe, t) * scale).collect();
    let weights = softmax(&scores)?;
    let mut weighted_set = vec![0.0; dim];
    for (w, t) in weights.iter().zip(set) {
        for (o, x) in weighted_set.iter_mut().zip(t) {
            *o += w * x;
        }
    }
    let output = block.wv.matvec(&weighted_set)?;
    Ok(AttnTrace {
        query_in: query.to_vec(),
        projected_query,
        weights,
        weighted_set,
        output,
    })
}

/// Returns the gradient w.r.t. the input query; accumulates wq/wk/wv
/// gradients into `grads` at `offset`.
fn attention_backward(
    block: &AttentionBlock,
    trace: &AttnTrace,
    set: &[Vec<f64>],
    grad_out: &[f64],
    grads: &mut Gradients,
    offset: usize,
) -> Result<Vec<f64>> {
    let dim = block.wq.rows();
    if set.is_empty() {
        return Ok(vec![0.0; dim]);
    }
    let scale = 1.0 / (dim as f64).sqrt();
    // values: out = Wv * weighted_set
    grads.blocks[offset + 2].add_outer(grad_out, &trace.weighted_set, 1.0);
    let grad_weighted = block.wv.matvec_transposed(grad_out)?;
    let grad_weights: Vec<f64> = set.iter().map(|t| dot(&grad_weighted, t)).collect();
    // softmax
    let mix: f64 = trace
        .weights
        .iter()
        .zip(&grad_weights)
        .map(|(w, g)| w * g)
        .sum();
    // keys: s_i = scale * (Wk^T a) . t_i, so dWk = a (x) (scale * sum g_s t)
    let mut grad_probe = vec![0.0; dim];
    for ((w, g), t) in trace.weights.iter().zip(&grad_weights).zip(set) {
        let gs = w * (g - mix) * scale;
        if gs != 0.0 {
            for (o, x) in grad_probe.iter_mut().zip(t) {
                *o += gs * x;
            }
        }
    }
    grads.blocks[offset + 1].add_outer(&trace.projected_query, &grad_probe, 1.0);
    let grad_pq = block.wk.matvec(&grad_probe)?;
    grads.blocks[offset].add_outer(&grad_pq, &trace.query_in, 1.0);
    block.wq.matvec_transposed(&grad_pq)
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    queries: Vec<Vec<f64>>,
    kb_layers: Vec<AttnTrace>,
    sg_layers: Vec<AttnTrace>,
    concat: Vec<f64>,
    integ_pre: Vec<f64>,
    integ: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// Intermediate queries (query_0 .. query_L).
    pub fn queries(&self) -> &[Vec<f64>] {
        &self.queries
    }
}

/// Full forward pass producing class logits.
pub fn reasoner_forward(input: &ReasonerInput, params: &ReasonerParams) -> Result<ForwardTrace> {
    let dim = params.dim;
    if input.question.len() != dim {
        return Err(Error::dimension(
            format!("question embedding of dim {dim}"),
            format!("{}", input.question.len()),
        ));
    }
    let (queries, kb_layers, sg_layers, concat) = if input.passthrough {
        if input.caption.len() != dim {
            return Err(Error::dimension(
                format!("caption embedding of dim {dim}"),
                format!("{}", input.caption.len()),
            ));
        }
        let mut concat = input.question.clone();
        concat.extend_from_slice(&input.caption);
        (
            vec![input.question.clone()],
            Vec::new(),
            Vec::new(),
            concat,
        )
    } else {
        let mut queries = vec![input.question.clone()];
        let mut kb_layers = Vec::with_capacity(params.layers);
        let mut sg_layers = Vec::with_capacity(params.layers);
        for l in 0..params.layers {
            let q = queries[l].clone();
            let kb_trace = attention_forward(&q, &input.kb_set, &params.kb_attn[l])?;
            let sg_trace = attention_forward(&q, &input.sg_set, &params.sg_attn[l])?;
            let mut next: Vec<f64> = kb_trace
                .output
                .iter()
                .zip(&sg_trace.output)
                .map(|(a, b)| a + b)
                .collect();
            if params.residual {
                for (n, prev) in next.iter_mut().zip(&q) {
                    *n += prev;
                }
            }
            queries.push(next);
            kb_layers.push(kb_trace);
            sg_layers.push(sg_trace);
        }
        let mut concat = kb_layers[params.layers - 1].output.clone();
        concat.extend_from_slice(&sg_layers[params.layers - 1].output);
        (queries, kb_layers, sg_layers, concat)
    };

    let mut integ_pre = params.w_int.matvec(&concat)?;
    for (x, b) in integ_pre.iter_mut().zip(params.b_int.data()) {
        *x += b;
    }
    let integ: Vec<f64> = integ_pre.iter().map(|x| x.max(0.0)).collect();
    let mut logits = params.w_cls.matvec(&integ)?;
    for (x, b) in logits.iter_mut().zip(params.b_cls.data()) {
        *x += b;
    }
    Ok(ForwardTrace {
        queries,
        kb_layers,
        sg_layers,
        concat,
        integ_pre,
        integ,
        logits,
    })
}

/// Cross-entropy of the gold class under the logits (log-sum-exp form).
pub fn cross_entropy(logits: &[f64], gold: usize) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::Contract(format!(
            "gold class {gold} outside {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[gold])
}

/// Backward pass for one record; `scale` multiplies the loss gradient
/// (1/batch for batch means). Accumulates into `grads`.
fn reasoner_backward(
    input: &ReasonerInput,
    params: &ReasonerParams,
    trace: &ForwardTrace,
    gold: usize,
    scale: f64,
    grads: &mut Gradients,
) -> Result<()> {
    let dim = params.dim;
    let n_attn_blocks = 6 * params.layers;
    // d loss / d logits = softmax - onehot
    let probs = softmax(&trace.logits)?;
    let mut grad_logits = probs;
    grad_logits[gold] -= 1.0;
    for g in &mut grad_logits {
        *g *= scale;
    }
    grads.blocks[n_attn_blocks + 2].add_outer(&grad_logits, &trace.integ, 1.0);
    for (b, g) in grads.blocks[n_attn_blocks + 3]
        .data_mut()
        .iter_mut()
        .zip(&grad_logits)
    {
        *b += g;
    }
    let grad_integ = params.w_cls.matvec_transposed(&grad_logits)?;
    let grad_integ_pre: Vec<f64> = grad_integ
        .iter()
        .zip(&trace.integ_pre)
        .map(|(g, pre)| if *pre > 0.0 { *g } else { 0.0 })
        .collect();
    grads.blocks[n_attn_blocks].add_outer(&grad_integ_pre, &trace.concat, 1.0);
    for (b, g) in grads.blocks[n_attn_blocks + 1]
        .data_mut()
        .iter_mut()
        .zip(&grad_integ_pre)
    {
        *b += g;
    }
    if input.passthrough {
        return Ok(());
    }
    let grad_concat = params.w_int.matvec_transposed(&grad_integ_pre)?;
    let mut grad_query = vec![0.0; dim]; // d loss / d query_l, starts at l = L (unused)
    for l in (0..params.layers).rev() {
        let mut grad_kb_out = grad_query.clone();
        let mut grad_sg_out = grad_query.clone();
        if l == params.layers - 1 {
            for (g, c) in grad_kb_out.iter_mut().zip(&grad_concat[..dim]) {
                *g += c;
            }
            for (g, c) in grad_sg_out.iter_mut().zip(&grad_concat[dim..]) {
                *g += c;
            }
        }
        let g_q_kb = attention_backward(
            &params.kb_attn[l],
            &trace.kb_layers[l],
            &input.kb_set,
            &grad_kb_out,
            grads,
            ReasonerParams::attn_block_offset(l, Source::Kb),
        )?;
        let g_q_sg = attention_backward(
            &params.sg_attn[l],
            &trace.sg_layers[l],
            &input.sg_set,
            &grad_sg_out,
            grads,
            ReasonerParams::attn_block_offset(l, Source::Sg),
        )?;
        let residual_carry = if params.residual {
            grad_query.clone()
        } else {
            vec![0.0; dim]
        };
        grad_query = g_q_kb
            .iter()
            .zip(&g_q_sg)
            .zip(&residual_carry)
            .map(|((a, b), r)| a + b + r)
            .collect();
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ReasonerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub layers: usize,
    pub residual: bool,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub early_stop_tol: f64,
}

impl Default for ReasonerTrainConfig {
    fn default() -> Self {
        ReasonerTrainConfig {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            layers: 4,
            residual: false,
            seed: 42,
            early_stop_patience: 0,
            early_stop_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedReasoner {
    pub params: ReasonerParams,
    pub loss_curve: Vec<f64>,
    /// records dropped because their gold answer is outside the vocab
    pub skipped_records: usize,
}

/// Train on prebuilt inputs. `golds[i]` is the class index of record i's
/// answer, or None when the answer is outside the vocabulary (skipped).
pub fn train_reasoner(
    inputs: &[ReasonerInput],
    golds: &[Option<usize>],
    vocab_size: usize,
    cfg: &ReasonerTrainConfig,
) -> Result<TrainedReasoner> {
    if inputs.len() != golds.len() {
        return Err(Error::Alignment(format!(
            "{} inputs vs {} gold labels",
            inputs.len(),
            golds.len()
        )));
    }
    let dim = inputs
        .first()
        .map(|i| i.question.len())
        .ok_or(Error::EmptyInput("no training inputs"))?;
    let mut params = ReasonerParams::random(dim, cfg.layers, vocab_size, cfg.residual, cfg.seed)?;
    let usable: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .zip(golds)
        .filter_map(|((i, _), g)| g.map(|g| (i, g)))
        .collect();
    let skipped_records = inputs.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Contract(
            "every gold answer is outside the vocab".into(),
        ));
    }

    let mut blocks = params.flatten();
    let mut state = AdamState::new(&blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&blocks);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &oi in batch {
                let (ri, gold) = usable[oi];
                let trace = reasoner_forward(&inputs[ri], &params)?;
                batch_loss += cross_entropy(&trace.logits, gold)? * scale;
                reasoner_backward(&inputs[ri], &params, &trace, gold, scale, &mut grads)?;
            }
            adamw_step(
                &mut blocks,
                &grads,
                &mut state,
                cfg.learning_rate,
                cfg.weight_decay,
            )?;
            params.unflatten(&blocks)?;
            epoch_loss += batch_loss * batch.len() as f64;
        }
        let mean = epoch_loss / usable.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!(
                "reasoner loss diverged at epoch {epoch}"
            )));
        }
        loss_curve.push(mean);
        if mean < best - cfg.early_stop_tol * best.abs().max(1e-12) {
            best = mean;
            best_epoch = epoch;
        }
        if cfg.early_stop_patience > 0 && epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }

    Ok(TrainedReasoner {
        params,
        loss_curve,
        skipped_records,
    })
}

/// Argmax prediction mapped through the vocabulary; ties resolve to the
/// lowest class index.
pub fn predict(
    input: &ReasonerInput,
    params: &ReasonerParams,
    vocab: &AnswerVocab,
) -> Result<String> {
    let trace = reasoner_forward(input, params)?;
    let mut best = 0usize;
    for (i, v) in trace.logits.iter().enumerate() {
        if *v > trace.logits[best] {
            best = i;
        }
    }
    vocab
        .answer(best)
        .map(str::to_string)
        .ok_or_else(|| Error::Lookup(format!("class {best} outside vocab")))
}

// ---------------------------------------------------------------------------
// input construction
// ---------------------------------------------------------------------------

/// Selects the knowledge a record receives under fixed modes: ground-truth
/// reasons, top-k retrieval through the trained towers, or nothing. Shared
/// by the reasoner input builder and the prompt pipeline so both branches
/// inject identical facts.
pub struct KnowledgeSelector<'a> {
    embedder: &'a BaseEmbedder,
    kb_towers: Option<(&'a ProjectionHead, &'a ProjectionHead)>,
    sg_towers: Option<(&'a ProjectionHead, &'a ProjectionHead)>,
    kb: &'a KnowledgeGraph,
    scenes: HashMap<&'a str, &'a Scene>,
    modes: InputModes,
    top_k: usize,
    pool_hops: usize,
    kb_index: Option<RetrievalIndex>,
}

impl<'a> KnowledgeSelector<'a> {
    /// `kb_towers` / `sg_towers` are (question head, triplet head) pairs of
    /// the trained retrievers; a pair is required only when its source mode
    /// is `Retrieved` (or `GroundTruth` for building reasoner inputs, which
    /// embed the facts with the triplet tower).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        embedder: &'a BaseEmbedder,
        kb_towers: Option<(&'a ProjectionHead, &'a ProjectionHead)>,
        sg_towers: Option<(&'a ProjectionHead, &'a ProjectionHead)>,
        kb: &'a KnowledgeGraph,
        scenes: &'a [Scene],
        modes: InputModes,
        top_k: usize,
        pool_hops: usize,
    ) -> Result<Self> {
        if modes.kb == SourceMode::Retrieved && kb_towers.is_none() {
            return Err(Error::Contract(
                "kb retrieval mode needs the KB retriever towers".into(),
            ));
        }
        if modes.sg == SourceMode::Retrieved && sg_towers.is_none() {
            return Err(Error::Contract(
                "sg retrieval mode needs the SG retriever towers".into(),
            ));
        }
        let kb_index = if modes.kb == SourceMode::Retrieved {
            let (_, th) = kb_towers.expect("checked above");
            Some(RetrievalIndex::build(
                kb,
                None,
                &TextEncoder::Projected(embedder, th),
            )?)
        } else {
            None
        };
        Ok(KnowledgeSelector {
            embedder,
            kb_towers,
            sg_towers,
            kb,
            scenes: scenes.iter().map(|s| (s.image_id.as_str(), s)).collect(),
            modes,
            top_k,
            pool_hops,
            kb_index,
        })
    }

    pub fn modes(&self) -> InputModes {
        self.modes
    }

    /// The verbalized facts injected for a record, per source.
    pub fn knowledge_texts(&self, record: &QARecord) -> Result<(Vec<String>, Vec<String>)> {
        let kb = match self.modes.kb {
            SourceMode::None => Vec::new(),
            SourceMode::GroundTruth => record.reason_kb.iter().map(|t| t.verbalize()).collect(),
            SourceMode::Retrieved => {
                let ids = self.retrieved_kb_ids(record)?;
                ids.iter()
                    .map(|&id| self.kb.verbalize(id))
                    .collect::<Result<_>>()?
            }
        };
        let sg = match self.modes.sg {
            SourceMode::None => Vec::new(),
            SourceMode::GroundTruth => record.reason_sg.iter().map(|t| t.verbalize()).collect(),
            SourceMode::Retrieved => {
                let scene = self.scene_for(record)?;
                let ids = self.retrieved_sg_ids(record, scene)?;
                ids.iter()
                    .map(|&id| scene.graph.verbalize(id))
                    .collect::<Result<_>>()?
            }
        };
        Ok((kb, sg))
    }

    fn scene_for(&self, record: &QARecord) -> Result<&'a Scene> {
        self.scenes
            .get(record.image_id.as_str())
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no scene graph for image {}", record.image_id)))
    }

    fn retrieved_kb_ids(&self, record: &QARecord) -> Result<Vec<usize>> {
        let (qh, _) = self.kb_towers.expect("mode checked");
        let scene = self.scene_for(record)?;
        let pool = kb_candidate_pool(record, scene, self.kb, self.pool_hops)?;
        let query = TextEncoder::Projected(self.embedder, qh).encode(&record.question)?;
        let index = self.kb_index.as_ref().expect("built for ret mode");
        Ok(index
            .retrieve_filtered(&query, self.top_k, Some(&pool))?
            .ids())
    }

    fn retrieved_sg_ids(&self, record: &QARecord, scene: &Scene) -> Result<Vec<usize>> {
        let (qh, th) = self.sg_towers.expect("mode checked");
        let index = RetrievalIndex::build(
            &scene.graph,
            None,
            &TextEncoder::Projected(self.embedder, th),
        )?;
        let query = TextEncoder::Projected(self.embedder, qh).encode(&record.question)?;
        Ok(index.retrieve(&query, self.top_k)?.ids())
    }
}

/// Builds `ReasonerInput`s for records under fixed modes.
///
/// Fact selection goes through the retrieval towers (the selector), but
/// the vectors handed to the reasoner are frozen hashed base features at
/// the reasoner's own dimension: the towers are trained to rank, which
/// discards answer-bearing detail the classifier still needs.
pub struct InputBuilder<'a> {
    selector: KnowledgeSelector<'a>,
    value_embedder: BaseEmbedder,
}

impl<'a> InputBuilder<'a> {
    /// `dim` is the reasoner dimension (the value embedder's width);
    /// `value_seed` pins its hashing so encodings stay stable per run.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        embedder: &'a BaseEmbedder,
        dim: usize,
        value_seed: u64,
        kb_towers: Option<(&'a ProjectionHead, &'a ProjectionHead)>,
        sg_towers: Option<(&'a ProjectionHead, &'a ProjectionHead)>,
        kb: &'a KnowledgeGraph,
        scenes: &'a [Scene],
        modes: InputModes,
        top_k: usize,
        pool_hops: usize,
    ) -> Result<Self> {
        if modes.kb == SourceMode::Retrieved && kb_towers.is_none() {
            return Err(Error::Contract(
                "kb retrieval mode needs the KB retriever towers".into(),
            ));
        }
        if modes.sg == SourceMode::Retrieved && sg_towers.is_none() {
            return Err(Error::Contract(
                "sg retrieval mode needs the SG retriever towers".into(),
            ));
        }
        Ok(InputBuilder {
            selector: KnowledgeSelector::new(
                embedder, kb_towers, sg_towers, kb, scenes, modes, top_k, pool_hops,
            )?,
            value_embedder: BaseEmbedder::hashed(dim, value_seed),
        })
    }

    pub fn modes(&self) -> InputModes {
        self.selector.modes
    }

    fn embed_value(&self, text: &str) -> Result<Vec<f64>> {
        TextEncoder::Base(&self.value_embedder).encode(text)
    }

    pub fn build(&self, record: &QARecord) -> Result<ReasonerInput> {
        let sel = &self.selector;
        let question = self.embed_value(&record.question)?;
        let caption = self.embed_value(&record.caption)?;
        let passthrough = sel.modes.kb == SourceMode::None && sel.modes.sg == SourceMode::None;

        let (kb_texts, sg_texts) = sel.knowledge_texts(record)?;
        let kb_set = kb_texts
            .iter()
            .map(|t| self.embed_value(t))
            .collect::<Result<_>>()?;
        let sg_set = sg_texts
            .iter()
            .map(|t| self.embed_value(t))
            .collect::<Result<_>>()?;

        Ok(ReasonerInput {
            question,
            caption,
            kb_set,
            sg_set,
            passthrough,
        })
    }
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReasonerCheckpoint {
    pub format_version: u32,
    pub vocab_fingerprint: u64,
    pub modes: InputModes,
    pub params: ReasonerParams,
}

impl ReasonerCheckpoint {
    pub fn new(params: ReasonerParams, vocab_fingerprint: u64, modes: InputModes) -> Self {
        ReasonerCheckpoint {
            format_version: CHECKPOINT_VERSION,
            vocab_fingerprint,
            modes,
            params,
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

    /// Load and verify the vocabulary fingerprint.
    pub fn load(path: &Path, expected_vocab: &AnswerVocab) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let ckpt: ReasonerCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported reasoner checkpoint version {}",
                ckpt.format_version
            )));
        }
        if ckpt.vocab_fingerprint != expected_vocab.fingerprint() {
            return Err(Error::Config(
                "reasoner checkpoint was trained against a different answer vocabulary".into(),
            ));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn toy_input(dim: usize, kb_n: usize, sg_n: usize, rng: &mut ChaCha8Rng) -> ReasonerInput {
        ReasonerInput {
            question: rand_vec(dim, rng),
            caption: rand_vec(dim, rng),
            kb_set: (0..kb_n).map(|_| rand_vec(dim, rng)).collect(),
            sg_set: (0..sg_n).map(|_| rand_vec(dim, rng)).collect(),
            passthrough: false,
        }
    }

    #[test]
    fn attention_identical_vectors_collapse_to_projected_value() {
        let block = AttentionBlock::random(4, &mut ChaCha8Rng::seed_from_u64(0));
        let v = vec![0.3, -0.7, 0.1, 0.9];
        let set = vec![v.clone(), v.clone(), v.clone()];
        let q = vec![1.0, 0.0, -1.0, 0.5];
        let out = attention(&q, &set, &block).unwrap();
        let expect = block.wv.matvec(&v).unwrap();
        for (o, e) in out.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_empty_set_is_zero() {
        let block = AttentionBlock::random(4, &mut ChaCha8Rng::seed_from_u64(0));
        let out = attention(&[1.0, 2.0, 3.0, 4.0], &[], &block).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn attention_hand_computed_identity_instance() {
        // D = 2, identity projections, q = [1, 0], set = {[1,0], [0,1]}
        // scores = [1/sqrt(2), 0]; weights = softmax(scores)
        let block = AttentionBlock::identity(2);
        let out = attention(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], &block).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        let w1 = 1.0 / (s.exp() + 1.0);
        assert!((out[0] - w0).abs() < 1e-12, "{out:?}");
        assert!((out[1] - w1).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn forward_empty_sets_give_constant_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ReasonerParams::random(6, 3, 5, false, 9).unwrap();
        let input = ReasonerInput {
            kb_set: vec![],
            sg_set: vec![],
            passthrough: false,
            ..toy_input(6, 0, 0, &mut rng)
        };
        let trace = reasoner_forward(&input, &params).unwrap();
        for q in &trace.queries()[1..] {
            assert!(q.iter().all(|v| *v == 0.0), "queries past 0 must be zero");
        }
        // logits equal classifier(integration(0))
        let zero = vec![0.0; 12];
        let mut integ_pre = params.w_int.matvec(&zero).unwrap();
        for (x, b) in integ_pre.iter_mut().zip(params.b_int.data()) {
            *x += b;
        }
        let integ: Vec<f64> = integ_pre.iter().map(|x| x.max(0.0)).collect();
        let mut logits = params.w_cls.matvec(&integ).unwrap();
        for (x, b) in logits.iter_mut().zip(params.b_cls.data()) {
            *x += b;
        }
        assert_eq!(trace.logits, logits);
        // and a different question yields the same logits
        let input2 = ReasonerInput {
            question: rand_vec(6, &mut rng),
            ..input.clone()
        };
        let trace2 = reasoner_forward(&input2, &params).unwrap();
        assert_eq!(trace.logits, trace2.logits);
    }

    #[test]
    fn forward_set_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ReasonerParams::random(8, 2, 7, false, 3).unwrap();
        let input = toy_input(8, 5, 4, &mut rng);
        let base = reasoner_forward(&input, &params).unwrap().logits;
        for _ in 0..20 {
            let mut shuffled = input.clone();
            shuffled.kb_set.shuffle(&mut rng);
            shuffled.sg_set.shuffle(&mut rng);
            let logits = reasoner_forward(&shuffled, &params).unwrap().logits;
            for (a, b) in base.iter().zip(&logits) {
                assert!((a - b).abs() < 1e-9, "permutation changed logits");
            }
        }
    }

    #[test]
    fn forward_one_layer_identity_hand_check() {
        // L = 1, singleton sets, identity projections: branch outputs are
        // exactly the set vectors, so logits = cls(relu(W_int [kb, sg] + b))
        let dim = 3;
        let mut params = ReasonerParams::random(dim, 1, 4, false, 5).unwrap();
        params.kb_attn[0] = AttentionBlock::identity(dim);
        params.sg_attn[0] = AttentionBlock::identity(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = toy_input(dim, 1, 1, &mut rng);
        let trace = reasoner_forward(&input, &params).unwrap();
        let mut concat = input.kb_set[0].clone();
        concat.extend_from_slice(&input.sg_set[0]);
        let mut integ_pre = params.w_int.matvec(&concat).unwrap();
        for (x, b) in integ_pre.iter_mut().zip(params.b_int.data()) {
            *x += b;
        }
        let integ: Vec<f64> = integ_pre.iter().map(|x| x.max(0.0)).collect();
        let mut expect = params.w_cls.matvec(&integ).unwrap();
        for (x, b) in expect.iter_mut().zip(params.b_cls.data()) {
            *x += b;
        }
        for (a, b) in trace.logits.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_backward_passes_grad_check() {
        use crate::numerics::grad_check;
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let params = ReasonerParams::random(5, 2, 4, false, seed).unwrap();
            let inputs = vec![toy_input(5, 2, 2, &mut rng), toy_input(5, 1, 3, &mut rng)];
            let golds = [1usize, 3usize];
            let blocks = params.flatten();
            let mut grads = Gradients::zeros_like(&blocks);
            for (input, gold) in inputs.iter().zip(golds) {
                let trace = reasoner_forward(input, &params).unwrap();
                reasoner_backward(input, &params, &trace, gold, 0.5, &mut grads).unwrap();
            }
            let inputs2 = inputs.clone();
            let params_proto = params.clone();
            let rel = grad_check(
                move |p| {
                    let mut pp = params_proto.clone();
                    pp.unflatten(p)?;
                    let mut total = 0.0;
                    for (input, gold) in inputs2.iter().zip(golds) {
                        let trace = reasoner_forward(input, &pp)?;
                        total += cross_entropy(&trace.logits, gold)? * 0.5;
                    }
                    Ok(total)
                },
                &blocks,
                &grads,
                1e-5,
            )
            .unwrap();
            assert!(rel < 1e-4, "seed {seed}: rel err {rel}");
        }
    }

    #[test]
    fn residual_backward_passes_grad_check() {
        use crate::numerics::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let params = ReasonerParams::random(4, 3, 3, true, 8).unwrap();
        let input = toy_input(4, 2, 2, &mut rng);
        let blocks = params.flatten();
        let mut grads = Gradients::zeros_like(&blocks);
        let trace = reasoner_forward(&input, &params).unwrap();
        reasoner_backward(&input, &params, &trace, 2, 1.0, &mut grads).unwrap();
        let params_proto = params.clone();
        let input2 = input.clone();
        let rel = grad_check(
            move |p| {
                let mut pp = params_proto.clone();
                pp.unflatten(p)?;
                let trace = reasoner_forward(&input2, &pp)?;
                cross_entropy(&trace.logits, 2)
            },
            &blocks,
            &grads,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn passthrough_backward_passes_grad_check() {
        use crate::numerics::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = ReasonerParams::random(4, 2, 3, false, 1).unwrap();
        let mut input = toy_input(4, 0, 0, &mut rng);
        input.passthrough = true;
        let blocks = params.flatten();
        let mut grads = Gradients::zeros_like(&blocks);
        let trace = reasoner_forward(&input, &params).unwrap();
        reasoner_backward(&input, &params, &trace, 0, 1.0, &mut grads).unwrap();
        let params_proto = params.clone();
        let input2 = input.clone();
        let rel = grad_check(
            move |p| {
                let mut pp = params_proto.clone();
                pp.unflatten(p)?;
                let trace = reasoner_forward(&input2, &pp)?;
                cross_entropy(&trace.logits, 0)
            },
            &blocks,
            &grads,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn every_block_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let params = ReasonerParams::random(6, 4, 5, false, 2).unwrap();
        let blocks = params.flatten();
        let mut grads = Gradients::zeros_like(&blocks);
        for _ in 0..4 {
            let input = toy_input(6, 3, 3, &mut rng);
            let trace = reasoner_forward(&input, &params).unwrap();
            reasoner_backward(&input, &params, &trace, 1, 0.25, &mut grads).unwrap();
        }
        for (i, norm) in grads.block_norms().iter().enumerate() {
            assert!(*norm > 0.0, "parameter block {i} received no gradient");
        }
    }

    #[test]
    fn training_zero_epochs_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs: Vec<ReasonerInput> = (0..4).map(|_| toy_input(4, 1, 1, &mut rng)).collect();
        let golds = vec![Some(0), Some(1), Some(2), Some(0)];
        let cfg = ReasonerTrainConfig {
            epochs: 0,
            layers: 2,
            seed: 3,
            ..Default::default()
        };
        let trained = train_reasoner(&inputs, &golds, 3, &cfg).unwrap();
        assert!(trained.loss_curve.is_empty());
        let fresh = ReasonerParams::random(4, 2, 3, false, 3).unwrap();
        assert_eq!(trained.params, fresh);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        // learnable toy task: answer class indicated by the sg singleton
        let centers: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(6, &mut rng)).collect();
        let mut inputs = Vec::new();
        let mut golds = Vec::new();
        for i in 0..30 {
            let class = i % 3;
            let mut v = centers[class].clone();
            for x in &mut v {
                *x += rng.gen_range(-0.05..0.05);
            }
            inputs.push(ReasonerInput {
                question: rand_vec(6, &mut rng),
                caption: vec![0.0; 6],
                kb_set: vec![],
                sg_set: vec![v],
                passthrough: false,
            });
            golds.push(Some(class));
        }
        let cfg = ReasonerTrainConfig {
            epochs: 60,
            batch_size: 10,
            learning_rate: 5e-3,
            weight_decay: 0.0,
            layers: 2,
            residual: false,
            seed: 7,
            early_stop_patience: 0,
            early_stop_tol: 0.0,
        };
        let a = train_reasoner(&inputs, &golds, 3, &cfg).unwrap();
        let b = train_reasoner(&inputs, &golds, 3, &cfg).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert!(a.loss_curve.last().unwrap() < a.loss_curve.first().unwrap());
    }

    #[test]
    fn out_of_vocab_records_are_skipped_with_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<ReasonerInput> = (0..4).map(|_| toy_input(4, 1, 1, &mut rng)).collect();
        let golds = vec![Some(0), None, Some(1), None];
        let cfg = ReasonerTrainConfig {
            epochs: 1,
            layers: 1,
            ..Default::default()
        };
        let trained = train_reasoner(&inputs, &golds, 2, &cfg).unwrap();
        assert_eq!(trained.skipped_records, 2);
    }

    #[test]
    fn predict_argmax_and_tie_rule() {
        let vocab = AnswerVocab::from_answers(["alpha".into(), "beta".into(), "gamma".into()]);
        let mut params = ReasonerParams::random(2, 1, 3, false, 0).unwrap();
        // zero the classifier so all logits tie, then bump class 1
        params.w_cls = Matrix::zeros(3, 2);
        params.b_cls = Matrix::zeros(3, 1);
        let input = ReasonerInput {
            question: vec![1.0, 0.0],
            caption: vec![0.0, 0.0],
            kb_set: vec![vec![1.0, 1.0]],
            sg_set: vec![],
            passthrough: false,
        };
        assert_eq!(predict(&input, &params, &vocab).unwrap(), "alpha");
        params.b_cls = Matrix::new(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(predict(&input, &params, &vocab).unwrap(), "beta");
    }

    #[test]
    fn checkpoint_round_trip_and_vocab_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reasoner.json");
        let vocab = AnswerVocab::from_answers(["x".into(), "y".into()]);
        let params = ReasonerParams::random(4, 2, 2, false, 6).unwrap();
        let modes = InputModes {
            kb: SourceMode::GroundTruth,
            sg: SourceMode::GroundTruth,
        };
        ReasonerCheckpoint::new(params.clone(), vocab.fingerprint(), modes)
            .save(&path)
            .unwrap();
        let loaded = ReasonerCheckpoint::load(&path, &vocab).unwrap();
        assert_eq!(loaded.params, params);
        let other_vocab = AnswerVocab::from_answers(["x".into(), "z".into()]);
        assert!(ReasonerCheckpoint::load(&path, &other_vocab).is_err());
    }

    #[test]
    fn modes_labels() {
        use SourceMode::*;
        let label = |kb, sg| InputModes { kb, sg }.label();
        assert_eq!(label(None, None), "none");
        assert_eq!(label(Retrieved, None), "kb_ret");
        assert_eq!(label(None, Retrieved), "sg_ret");
        assert_eq!(label(Retrieved, Retrieved), "kb_ret+sg_ret");
        assert_eq!(label(GroundTruth, None), "kb_gt");
        assert_eq!(label(None, GroundTruth), "sg_gt");
        assert_eq!(label(GroundTruth, GroundTruth), "kb_gt+sg_gt");
    }
}
