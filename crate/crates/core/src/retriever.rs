//! Supervised triplet retrieval: contrastive training with in-batch
//! negatives and exhaustive cosine top-k serving.
//!
//! Each retriever owns two projection heads, one for questions and one for
//! verbalized triplets, sharing the output space. For a training batch,
//! a question's positives are its ground-truth reason triplets and its
//! negatives are the other questions' positives in the same batch.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::QARecord;
use crate::encoder::{BaseEmbedder, ProjectionHead, TextEncoder};
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeGraph, Scene, Source};
use crate::numerics::{adamw_step, cosine_similarity, dot, AdamState, Gradients, Matrix};

/// Sum over (positive, negative) pairs of `cos(q, t-) - cos(q, t+)`,
/// i.e. the negative-cosine distance gap.
pub fn contrastive_loss(
    question: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Contract("contrastive loss needs at least one positive".into()));
    }
    if negatives.is_empty() {
        return Err(Error::Contract("contrastive loss needs at least one negative".into()));
    }
    let mut pos_sum = 0.0;
    for p in positives {
        pos_sum += cosine_similarity(question, p)?;
    }
    let mut neg_sum = 0.0;
    for n in negatives {
        neg_sum += cosine_similarity(question, n)?;
    }
    Ok(positives.len() as f64 * neg_sum - negatives.len() as f64 * pos_sum)
}

#[derive(Debug, Clone)]
pub struct RetrieverConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    /// Stop when the best epoch loss has not improved by `early_stop_tol`
    /// (relative) for this many epochs; 0 disables early stopping.
    pub early_stop_patience: usize,
    pub early_stop_tol: f64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            hidden_dim: 256,
            output_dim: 128,
            seed: 42,
            early_stop_patience: 0,
            early_stop_tol: 1e-3,
        }
    }
}

/// A trained retriever: both towers plus the training curve.
#[derive(Debug, Clone)]
pub struct TrainedRetriever {
    pub source: Source,
    pub question_head: ProjectionHead,
    pub triplet_head: ProjectionHead,
    pub loss_curve: Vec<f64>,
    pub skipped_batches: usize,
}

/// Train both towers on the records' ground-truth reasons for `source`.
/// Every record must carry at least one reason triplet for the source.
pub fn train_retriever(
    records: &[QARecord],
    source: Source,
    embedder: &BaseEmbedder,
    cfg: &RetrieverConfig,
) -> Result<TrainedRetriever> {
    for r in records {
        if r.reasons(source).is_empty() {
            return Err(Error::Contract(format!(
                "record {} has no ground-truth triplet for source {source}",
                r.id
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut question_head =
        ProjectionHead::random(embedder.dim(), cfg.hidden_dim, cfg.output_dim, &mut rng);
    let mut triplet_head =
        ProjectionHead::random(embedder.dim(), cfg.hidden_dim, cfg.output_dim, &mut rng);

    // base embeddings are frozen; cache them per unique text
    let mut base_cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut base_of = |text: &str, cache: &mut HashMap<String, Vec<f64>>| -> Vec<f64> {
        if let Some(v) = cache.get(text) {
            return v.clone();
        }
        let v = embedder.embed(text);
        cache.insert(text.to_string(), v.clone());
        v
    };

    // per-record positive verbalizations
    let positives: Vec<Vec<String>> = records
        .iter()
        .map(|r| r.reasons(source).iter().map(|t| t.verbalize()).collect())
        .collect();

    let mut params: Vec<Matrix> = question_head.params();
    params.extend(triplet_head.params());
    let mut state = AdamState::new(&params);

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut skipped_batches = 0usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut best = f64::INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                skipped_batches += 1;
                continue;
            }
            let (loss, grads) = batch_step(
                batch,
                records,
                &positives,
                &question_head,
                &triplet_head,
                &mut base_of,
                &mut base_cache,
            )?;
            adamw_step(
                &mut params,
                &grads,
                &mut state,
                cfg.learning_rate,
                cfg.weight_decay,
            )?;
            question_head.set_params(&params[..4])?;
            triplet_head.set_params(&params[4..])?;
            epoch_loss += loss * batch.len() as f64;
            epoch_n += batch.len();
        }
        let mean = if epoch_n > 0 {
            epoch_loss / epoch_n as f64
        } else {
            0.0
        };
        if !mean.is_finite() {
            return Err(Error::Numerical(format!(
                "retriever loss diverged at epoch {epoch}"
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

    Ok(TrainedRetriever {
        source,
        question_head,
        triplet_head,
        loss_curve,
        skipped_batches,
    })
}

/// One batch: forward all unique texts, apply the pair-sum gradient, return
/// (mean loss over questions, parameter gradients).
#[allow(clippy::too_many_arguments)]
fn batch_step(
    batch: &[usize],
    records: &[QARecord],
    positives: &[Vec<String>],
    question_head: &ProjectionHead,
    triplet_head: &ProjectionHead,
    base_of: &mut impl FnMut(&str, &mut HashMap<String, Vec<f64>>) -> Vec<f64>,
    base_cache: &mut HashMap<String, Vec<f64>>,
) -> Result<(f64, Gradients)> {
    // unique triplet texts in first-appearance order
    let mut text_ids: HashMap<&str, usize> = HashMap::new();
    let mut texts: Vec<&str> = Vec::new();
    for &ri in batch {
        for t in &positives[ri] {
            text_ids.entry(t.as_str()).or_insert_with(|| {
                texts.push(t.as_str());
                texts.len() - 1
            });
        }
    }
    let pos_sets: Vec<BTreeSet<usize>> = batch
        .iter()
        .map(|&ri| positives[ri].iter().map(|t| text_ids[t.as_str()]).collect())
        .collect();
    let all_ids: BTreeSet<usize> = (0..texts.len()).collect();

    let q_traces: Vec<_> = batch
        .iter()
        .map(|&ri| {
            let base = base_of(&records[ri].question, base_cache);
            question_head.forward(&base)
        })
        .collect::<Result<_>>()?;
    let t_traces: Vec<_> = texts
        .iter()
        .map(|t| {
            let base = base_of(t, base_cache);
            triplet_head.forward(&base)
        })
        .collect::<Result<_>>()?;

    let inv_b = 1.0 / batch.len() as f64;
    let dim = question_head.output_dim();
    let mut loss = 0.0;
    let mut q_params = question_head.params();
    q_params.extend(triplet_head.params());
    let mut grads = Gradients::zeros_like(&q_params);
    let mut t_grads: Vec<Vec<f64>> = vec![vec![0.0; dim]; texts.len()];

    for (bi, pos) in pos_sets.iter().enumerate() {
        let negs: Vec<usize> = all_ids.difference(pos).copied().collect();
        if negs.is_empty() {
            continue;
        }
        let q = &q_traces[bi].output;
        let (np, nn) = (pos.len() as f64, negs.len() as f64);
        let mut q_grad = vec![0.0; dim];
        for &p in pos {
            let t = &t_traces[p].output;
            loss -= nn * dot(q, t) * inv_b;
            for (g, tv) in q_grad.iter_mut().zip(t) {
                *g -= nn * tv;
            }
            for (g, qv) in t_grads[p].iter_mut().zip(q) {
                *g -= nn * qv * inv_b;
            }
        }
        for &n in &negs {
            let t = &t_traces[n].output;
            loss += np * dot(q, t) * inv_b;
            for (g, tv) in q_grad.iter_mut().zip(t) {
                *g += np * tv;
            }
            for (g, qv) in t_grads[n].iter_mut().zip(q) {
                *g += np * qv * inv_b;
            }
        }
        for g in &mut q_grad {
            *g *= inv_b;
        }
        question_head.backward(&q_traces[bi], &q_grad, &mut grads, 0)?;
    }
    for (ti, g) in t_grads.iter().enumerate() {
        triplet_head.backward(&t_traces[ti], g, &mut grads, 4)?;
    }
    Ok((loss, grads))
}

/// Precomputed candidate embeddings for one source. Row `i` embeds
/// candidate `triplet_ids[i]` under the head the index was built with;
/// rebuild after the head changes.
pub struct RetrievalIndex {
    pub source: Source,
    pub triplet_ids: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Ranked retrieval hits: scores non-increasing, ties broken by ascending
/// triplet id, length min(k, N).
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub hits: Vec<(usize, f64)>,
    pub k: usize,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<usize> {
        self.hits.iter().map(|(id, _)| *id).collect()
    }
}

impl RetrievalIndex {
    /// Embed every triplet of the graph (or `ids` when given).
    pub fn build(
        graph: &KnowledgeGraph,
        ids: Option<&[usize]>,
        encoder: &TextEncoder,
    ) -> Result<Self> {
        let triplet_ids: Vec<usize> = match ids {
            Some(ids) => ids.to_vec(),
            None => (0..graph.len()).collect(),
        };
        let embeddings = triplet_ids
            .iter()
            .map(|&id| encoder.encode(&graph.verbalize(id)?))
            .collect::<Result<_>>()?;
        Ok(RetrievalIndex {
            source: graph.source(),
            triplet_ids,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.triplet_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplet_ids.is_empty()
    }

    /// Rank all candidates by cosine similarity to the query embedding.
    pub fn retrieve(&self, query: &[f64], k: usize) -> Result<RetrievalResult> {
        self.retrieve_filtered(query, k, None)
    }

    /// Rank only candidates whose triplet id is in `allowed` (all when None).
    pub fn retrieve_filtered(
        &self,
        query: &[f64],
        k: usize,
        allowed: Option<&BTreeSet<usize>>,
    ) -> Result<RetrievalResult> {
        if self.is_empty() {
            return Err(Error::Contract("retrieval over an empty index".into()));
        }
        if k == 0 {
            return Err(Error::Contract("retrieval needs k >= 1".into()));
        }
        let mut scored: Vec<(usize, f64)> = Vec::new();
        for (row, &tid) in self.embeddings.iter().zip(&self.triplet_ids) {
            if let Some(allowed) = allowed {
                if !allowed.contains(&tid) {
                    continue;
                }
            }
            // quantize at 1e-12 so ranking is stable against ULP noise
            // (candidate rescaling must not reorder ties)
            let score = (safe_cosine(query, row) * 1e12).round() / 1e12;
            scored.push((tid, score));
        }
        scored.sort_unstable_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        scored.truncate(k);
        Ok(RetrievalResult { hits: scored, k })
    }
}

/// Cosine that treats a zero-norm side as similarity 0 (degenerate
/// embeddings rank last among non-negative scores).
fn safe_cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_similarity(a, b).unwrap_or(0.0)
}

/// Query a question against an index.
pub fn retrieve_topk(
    question: &str,
    index: &RetrievalIndex,
    encoder: &TextEncoder,
    k: usize,
) -> Result<RetrievalResult> {
    index.retrieve(&encoder.encode(question)?, k)
}

/// The KB candidate pool for one record: the 2-hop (configurable) subgraph
/// around entities matched from the question keywords and the image tags
/// (scene entity names). Falls back to the whole KB when nothing matches.
pub fn kb_candidate_pool(
    record: &QARecord,
    scene: &Scene,
    kb: &KnowledgeGraph,
    hops: usize,
) -> Result<BTreeSet<usize>> {
    let mut seeds = kb.match_keywords(&record.question);
    for (_, surface) in scene.graph.table().entities() {
        if let Some(id) = kb.table().entity_id(surface) {
            seeds.insert(id);
        }
    }
    if seeds.is_empty() {
        return Ok((0..kb.len()).collect());
    }
    let pool = kb.extract_subgraph(&seeds, hops)?;
    if pool.is_empty() {
        return Ok((0..kb.len()).collect());
    }
    Ok(pool)
}

/// Per-record ranked retrieval against its candidate pool, for metrics.
#[derive(Debug, Clone)]
pub struct RankedRecord {
    pub record_id: String,
    /// ground-truth triplet ids resolved in the source graph; None when a
    /// reason is absent from the graph (can never be hit)
    pub gt_ids: Vec<Option<usize>>,
    /// top max_k candidate ids in rank order
    pub ranking: Vec<usize>,
}

impl RankedRecord {
    pub fn any_hit(&self, k: usize) -> bool {
        let top = &self.ranking[..k.min(self.ranking.len())];
        self.gt_ids
            .iter()
            .any(|gt| gt.map(|id| top.contains(&id)).unwrap_or(false))
    }

    pub fn all_hit(&self, k: usize) -> bool {
        let top = &self.ranking[..k.min(self.ranking.len())];
        !self.gt_ids.is_empty()
            && self
                .gt_ids
                .iter()
                .all(|gt| gt.map(|id| top.contains(&id)).unwrap_or(false))
    }
}

/// One metrics row: `source,k,any_hit,all_hit,n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub source: Source,
    pub k: usize,
    pub any_hit: f64,
    pub all_hit: f64,
    pub n: usize,
}

/// Rank each record's candidate pool with the question encoder. For the KB
/// source the pool is the keyword-seeded subgraph; for SG it is the image's
/// scene graph. Records without ground truth for the source are skipped.
pub fn rank_records(
    records: &[QARecord],
    scenes: &[Scene],
    kb: &KnowledgeGraph,
    source: Source,
    question_encoder: &TextEncoder,
    triplet_encoder: &TextEncoder,
    pool_hops: usize,
    max_k: usize,
) -> Result<Vec<RankedRecord>> {
    let scene_of: HashMap<&str, &Scene> =
        scenes.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let kb_index = match source {
        Source::Kb => Some(RetrievalIndex::build(kb, None, triplet_encoder)?),
        Source::Sg => None,
    };
    let mut out = Vec::new();
    for record in records {
        if record.reasons(source).is_empty() {
            continue;
        }
        let scene = scene_of.get(record.image_id.as_str()).ok_or_else(|| {
            Error::Lookup(format!("no scene graph for image {}", record.image_id))
        })?;
        let query = question_encoder.encode(&record.question)?;
        let (ranking, gt_ids) = match source {
            Source::Kb => {
                let pool = kb_candidate_pool(record, scene, kb, pool_hops)?;
                let index = kb_index.as_ref().expect("built above");
                let result = index.retrieve_filtered(&query, max_k, Some(&pool))?;
                let gt = record
                    .reasons(source)
                    .iter()
                    .map(|t| kb.find_triplet(t))
                    .collect();
                (result.ids(), gt)
            }
            Source::Sg => {
                let index = RetrievalIndex::build(&scene.graph, None, triplet_encoder)?;
                let result = index.retrieve(&query, max_k)?;
                let gt = record
                    .reasons(source)
                    .iter()
                    .map(|t| scene.graph.find_triplet(t))
                    .collect();
                (result.ids(), gt)
            }
        };
        out.push(RankedRecord {
            record_id: record.id.clone(),
            gt_ids,
            ranking,
        });
    }
    Ok(out)
}

/// Aggregate any-hit@k / all-hit@k over ranked records.
pub fn metrics_from_rankings(
    rankings: &[RankedRecord],
    source: Source,
    ks: &[usize],
) -> Vec<MetricsRow> {
    ks.iter()
        .map(|&k| {
            let n = rankings.len();
            let (mut any, mut all) = (0usize, 0usize);
            for r in rankings {
                if r.any_hit(k) {
                    any += 1;
                }
                if r.all_hit(k) {
                    all += 1;
                }
            }
            MetricsRow {
                source,
                k,
                any_hit: if n > 0 { any as f64 / n as f64 } else { 0.0 },
                all_hit: if n > 0 { all as f64 / n as f64 } else { 0.0 },
                n,
            }
        })
        .collect()
}

/// Render metrics rows as the CSV surface `source,k,any_hit,all_hit,n`.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("source,k,any_hit,all_hit,n\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.source, r.k, r.any_hit, r.all_hit, r.n
        ));
    }
    out
}
