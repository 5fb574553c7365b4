//! End-to-end orchestration shared by the command-line interface and the
//! integration tests: data generation, retriever/reasoner training with
//! checkpointing, evaluation, ablation, and prompt rendering.

use std::collections::HashMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::dataset::{
    build_answer_vocab, generate_questions, generate_world, load_qa_jsonl, save_qa_jsonl,
    split_dataset, AnswerVocab, QARecord,
};
use crate::encoder::{BaseEmbedder, HeadCheckpoint, TextEncoder};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_configs, emit_table, grid_table, run_ablation, score, AblationGrid, EvalReport,
    Prediction, ReportFormat, RunMeta,
};
use crate::knowledge::{load_scene_graphs, save_scene_graphs, KnowledgeGraph, Scene, Source};
use crate::llm::{
    llm_complete, mock_llm, parse_answer, render_prompt, select_shots, LlmEndpoint, MockAnswerKey,
    Shot, Transcript,
};
use crate::reasoner::{
    predict, train_reasoner, InputBuilder, InputModes, KnowledgeSelector, ReasonerCheckpoint,
    ReasonerTrainConfig, SourceMode, TrainedReasoner,
};
use crate::retriever::{
    metrics_from_rankings, metrics_to_csv, rank_records, train_retriever, MetricsRow, RankedRecord,
    RetrieverConfig, TrainedRetriever,
};

/// Which model family answers the questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Reasoner,
    LlmMock,
    LlmLive,
}

impl Branch {
    pub fn label(&self) -> &'static str {
        match self {
            Branch::Reasoner => "reasoner",
            Branch::LlmMock => "llm-mock",
            Branch::LlmLive => "llm-live",
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reasoner" => Ok(Branch::Reasoner),
            "llm-mock" => Ok(Branch::LlmMock),
            "llm-live" => Ok(Branch::LlmLive),
            other => Err(Error::Config(format!(
                "unknown branch {other:?} (expected reasoner, llm-mock, or llm-live)"
            ))),
        }
    }
}

/// The frozen base embedder for a run.
pub fn embedder_for(cfg: &RunConfig) -> BaseEmbedder {
    BaseEmbedder::hashed(cfg.encoder.base_dim, cfg.seed)
}

/// Everything loaded from a generated data directory.
pub struct DataBundle {
    pub kb: KnowledgeGraph,
    pub scenes: Vec<Scene>,
    pub train: Vec<QARecord>,
    pub val: Vec<QARecord>,
    pub test: Vec<QARecord>,
    pub vocab: AnswerVocab,
}

impl DataBundle {
    pub fn all_records(&self) -> impl Iterator<Item = &QARecord> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn find_record(&self, id: &str) -> Option<&QARecord> {
        self.all_records().find(|r| r.id == id)
    }
}

/// Generate the world and questions, split them, and write the data tree.
/// Returns the data directory.
pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let records = generate_questions(
        &world,
        cfg.dataset.questions_per_image,
        &cfg.dataset.qtype_mix,
        cfg.world.seed.wrapping_add(1),
    )?;
    let (train, val, test) = split_dataset(
        &records,
        cfg.dataset.split_ratios,
        cfg.world.seed.wrapping_add(2),
    )?;
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir)?;
    world.kb.save_triplets(&dir.join("kb.jsonl"))?;
    save_scene_graphs(&world.scenes, &dir.join("scenes.jsonl"))?;
    save_qa_jsonl(&train, &dir.join("qa_train.jsonl"))?;
    save_qa_jsonl(&val, &dir.join("qa_val.jsonl"))?;
    save_qa_jsonl(&test, &dir.join("qa_test.jsonl"))?;
    let meta = serde_json::json!({
        "world_hash": cfg.world_hash(),
        "kb_triplets": world.kb.len(),
        "images": world.scenes.len(),
        "records": {"train": train.len(), "val": val.len(), "test": test.len()},
    });
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(dir)
}

/// Load a generated data tree and build the answer vocabulary.
pub fn load_data(cfg: &RunConfig) -> Result<DataBundle> {
    let dir = cfg.data_dir();
    let kb = KnowledgeGraph::load_triplets(&dir.join("kb.jsonl"), Source::Kb)?;
    let scenes = load_scene_graphs(&dir.join("scenes.jsonl"))?;
    let train = load_qa_jsonl(&dir.join("qa_train.jsonl"))?;
    let val = load_qa_jsonl(&dir.join("qa_val.jsonl"))?;
    let test = load_qa_jsonl(&dir.join("qa_test.jsonl"))?;
    let vocab = build_answer_vocab(&train)?;
    Ok(DataBundle {
        kb,
        scenes,
        train,
        val,
        test,
        vocab,
    })
}

fn retriever_config(cfg: &RunConfig) -> RetrieverConfig {
    RetrieverConfig {
        epochs: cfg.retriever.epochs,
        batch_size: cfg.retriever.batch_size,
        learning_rate: cfg.retriever.learning_rate,
        weight_decay: cfg.retriever.weight_decay,
        hidden_dim: cfg.encoder.hidden_dim,
        output_dim: cfg.encoder.output_dim,
        seed: cfg.seed,
        early_stop_patience: cfg.retriever.early_stop_patience,
        early_stop_tol: cfg.retriever.early_stop_tol,
    }
}

fn write_curve(curve: &[f64], path: &PathBuf) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss}\n"));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Train one retriever on the training split (records that carry ground
/// truth for the source), checkpoint it, and write its loss curve.
pub fn train_retriever_cmd(cfg: &RunConfig, source: Source) -> Result<(PathBuf, TrainedRetriever)> {
    let data = load_data(cfg)?;
    let embedder = embedder_for(cfg);
    let records: Vec<QARecord> = data
        .train
        .iter()
        .filter(|r| !r.reasons(source).is_empty())
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(Error::Contract(format!(
            "no training record carries ground truth for source {source}"
        )));
    }
    let trained = train_retriever(&records, source, &embedder, &retriever_config(cfg))?;
    let path = cfg.retriever_checkpoint(&source.to_string());
    HeadCheckpoint::new(
        cfg.encoder.base_dim,
        cfg.seed,
        trained.question_head.clone(),
        trained.triplet_head.clone(),
        &source.to_string(),
    )
    .save(&path)?;
    write_curve(
        &trained.loss_curve,
        &cfg.report_dir().join(format!("curve_retriever_{source}.csv")),
    )?;
    Ok((path, trained))
}

pub fn load_retriever(cfg: &RunConfig, source: Source) -> Result<HeadCheckpoint> {
    HeadCheckpoint::load(&cfg.retriever_checkpoint(&source.to_string()))
}

/// Retrieval quality of the trained towers and of the untrained base
/// baseline, over the test split.
pub struct RetrieverEval {
    pub trained: Vec<MetricsRow>,
    pub baseline: Vec<MetricsRow>,
    pub trained_rankings: Vec<RankedRecord>,
    pub baseline_rankings: Vec<RankedRecord>,
}

pub fn eval_retriever_cmd(cfg: &RunConfig, source: Source, ks: &[usize]) -> Result<RetrieverEval> {
    let data = load_data(cfg)?;
    let embedder = embedder_for(cfg);
    let ckpt = load_retriever(cfg, source)?;
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let records: Vec<QARecord> = data.test.to_vec();

    let trained_rankings = rank_records(
        &records,
        &data.scenes,
        &data.kb,
        source,
        &TextEncoder::Projected(&embedder, &ckpt.question_head),
        &TextEncoder::Projected(&embedder, &ckpt.triplet_head),
        cfg.retriever.pool_hops,
        max_k,
    )?;
    let baseline_rankings = rank_records(
        &records,
        &data.scenes,
        &data.kb,
        source,
        &TextEncoder::Base(&embedder),
        &TextEncoder::Base(&embedder),
        cfg.retriever.pool_hops,
        max_k,
    )?;
    let trained = metrics_from_rankings(&trained_rankings, source, ks);
    let baseline = metrics_from_rankings(&baseline_rankings, source, ks);

    let dir = cfg.report_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join(format!("retrieval_{source}.csv")),
        metrics_to_csv(&trained),
    )?;
    std::fs::write(
        dir.join(format!("retrieval_{source}_baseline.csv")),
        metrics_to_csv(&baseline),
    )?;
    Ok(RetrieverEval {
        trained,
        baseline,
        trained_rankings,
        baseline_rankings,
    })
}

fn reasoner_train_config(cfg: &RunConfig) -> ReasonerTrainConfig {
    ReasonerTrainConfig {
        epochs: cfg.reasoner.epochs,
        batch_size: cfg.reasoner.batch_size,
        learning_rate: cfg.reasoner.learning_rate,
        weight_decay: cfg.reasoner.weight_decay,
        layers: cfg.reasoner.layers,
        residual: cfg.reasoner.residual,
        seed: cfg.seed,
        early_stop_patience: cfg.reasoner.early_stop_patience,
        early_stop_tol: cfg.reasoner.early_stop_tol,
    }
}

/// Retrieval towers load on demand: a source's towers are needed only when
/// its facts come from retrieval.
struct Towers {
    sg: Option<HeadCheckpoint>,
    kb: Option<HeadCheckpoint>,
}

fn load_towers(cfg: &RunConfig, modes: &InputModes) -> Result<Towers> {
    let sg = if modes.sg == SourceMode::Retrieved {
        Some(load_retriever(cfg, Source::Sg)?)
    } else {
        None
    };
    let kb = if modes.kb == SourceMode::Retrieved {
        Some(load_retriever(cfg, Source::Kb)?)
    } else {
        None
    };
    Ok(Towers { sg, kb })
}

fn builder_for<'a>(
    cfg: &RunConfig,
    embedder: &'a BaseEmbedder,
    towers: &'a Towers,
    data: &'a DataBundle,
    modes: InputModes,
) -> Result<InputBuilder<'a>> {
    InputBuilder::new(
        embedder,
        cfg.encoder.output_dim,
        cfg.seed,
        towers
            .kb
            .as_ref()
            .map(|c| (&c.question_head, &c.triplet_head)),
        towers
            .sg
            .as_ref()
            .map(|c| (&c.question_head, &c.triplet_head)),
        &data.kb,
        &data.scenes,
        modes,
        cfg.reasoner.top_k,
        cfg.retriever.pool_hops,
    )
}

/// Train the reasoner under the given modes, checkpoint it, and write its
/// loss curve.
pub fn train_reasoner_cmd(
    cfg: &RunConfig,
    modes: InputModes,
) -> Result<(PathBuf, TrainedReasoner)> {
    let data = load_data(cfg)?;
    let embedder = embedder_for(cfg);
    let towers = load_towers(cfg, &modes)?;
    let builder = builder_for(cfg, &embedder, &towers, &data, modes)?;
    let inputs: Vec<_> = data
        .train
        .iter()
        .map(|r| builder.build(r))
        .collect::<Result<_>>()?;
    let golds: Vec<Option<usize>> = data
        .train
        .iter()
        .map(|r| data.vocab.index_of(&r.answer))
        .collect();
    let trained = train_reasoner(&inputs, &golds, data.vocab.len(), &reasoner_train_config(cfg))?;
    let label = modes.label();
    let path = cfg.reasoner_checkpoint(&label);
    ReasonerCheckpoint::new(trained.params.clone(), data.vocab.fingerprint(), modes).save(&path)?;
    write_curve(
        &trained.loss_curve,
        &cfg.report_dir().join(format!("curve_reasoner_{label}.csv")),
    )?;
    Ok((path, trained))
}

fn reasoner_predictions(
    cfg: &RunConfig,
    data: &DataBundle,
    embedder: &BaseEmbedder,
    modes: InputModes,
    records: &[QARecord],
) -> Result<Vec<Prediction>> {
    let towers = load_towers(cfg, &modes)?;
    let ckpt = ReasonerCheckpoint::load(&cfg.reasoner_checkpoint(&modes.label()), &data.vocab)?;
    let builder = builder_for(cfg, embedder, &towers, data, modes)?;
    records
        .iter()
        .map(|r| {
            let input = builder.build(r)?;
            Ok(Prediction {
                id: r.id.clone(),
                answer: predict(&input, &ckpt.params, &data.vocab)?,
            })
        })
        .collect()
}

/// Assemble the few-shot prompt for one record under the given modes.
fn prompt_for_record(
    record: &QARecord,
    data: &DataBundle,
    embedder: &BaseEmbedder,
    selector: &KnowledgeSelector,
    n_shots: usize,
    knowledge_cache: &mut HashMap<String, Vec<String>>,
) -> Result<String> {
    let mut knowledge_of = |r: &QARecord| -> Result<Vec<String>> {
        if let Some(k) = knowledge_cache.get(&r.id) {
            return Ok(k.clone());
        }
        let (kb, sg) = selector.knowledge_texts(r)?;
        let mut all = kb;
        all.extend(sg);
        knowledge_cache.insert(r.id.clone(), all.clone());
        Ok(all)
    };
    let shot_ids = select_shots(record, &data.train, embedder, n_shots)?;
    let shots: Vec<Shot> = shot_ids
        .iter()
        .map(|&i| {
            let r = &data.train[i];
            Ok(Shot {
                caption: r.caption.clone(),
                knowledge: knowledge_of(r)?,
                question: r.question.clone(),
                answer: r.answer.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let test_knowledge = knowledge_of(record)?;
    Ok(render_prompt(&shots, &record.caption, &test_knowledge, &record.question).rendered)
}

fn llm_selector<'a>(
    cfg: &RunConfig,
    embedder: &'a BaseEmbedder,
    towers: &'a Option<(Option<HeadCheckpoint>, Option<HeadCheckpoint>)>,
    data: &'a DataBundle,
    modes: InputModes,
) -> Result<KnowledgeSelector<'a>> {
    let (kb, sg) = match towers {
        Some((kb, sg)) => (kb.as_ref(), sg.as_ref()),
        None => (None, None),
    };
    KnowledgeSelector::new(
        embedder,
        kb.map(|c| (&c.question_head, &c.triplet_head)),
        sg.map(|c| (&c.question_head, &c.triplet_head)),
        &data.kb,
        &data.scenes,
        modes,
        cfg.reasoner.top_k,
        cfg.retriever.pool_hops,
    )
}

fn llm_predictions(
    cfg: &RunConfig,
    data: &DataBundle,
    embedder: &BaseEmbedder,
    modes: InputModes,
    records: &[QARecord],
    live: Option<(&LlmEndpoint, Option<&Transcript>)>,
) -> Result<Vec<Prediction>> {
    let kb_ckpt = if modes.kb == SourceMode::Retrieved {
        Some(load_retriever(cfg, Source::Kb)?)
    } else {
        None
    };
    let sg_ckpt = if modes.sg == SourceMode::Retrieved {
        Some(load_retriever(cfg, Source::Sg)?)
    } else {
        None
    };
    let towers = Some((kb_ckpt, sg_ckpt));
    let selector = llm_selector(cfg, embedder, &towers, data, modes)?;
    let mut cache = HashMap::new();
    records
        .iter()
        .map(|record| {
            let prompt = prompt_for_record(
                record,
                data,
                embedder,
                &selector,
                cfg.llm.n_shots,
                &mut cache,
            )?;
            let completion = match live {
                Some((endpoint, transcript)) => llm_complete(&prompt, endpoint, transcript)?,
                None => mock_llm(&prompt, &MockAnswerKey::for_record(record))?,
            };
            Ok(Prediction {
                id: record.id.clone(),
                answer: parse_answer(&completion),
            })
        })
        .collect()
}

fn predictions_for(
    cfg: &RunConfig,
    data: &DataBundle,
    embedder: &BaseEmbedder,
    branch: Branch,
    modes: InputModes,
    records: &[QARecord],
) -> Result<Vec<Prediction>> {
    match branch {
        Branch::Reasoner => reasoner_predictions(cfg, data, embedder, modes, records),
        Branch::LlmMock => llm_predictions(cfg, data, embedder, modes, records, None),
        Branch::LlmLive => {
            let endpoint = cfg.llm.endpoint();
            let transcript = if cfg.llm.transcript {
                Some(Transcript::new(cfg.report_dir().join("llm_transcript.jsonl")))
            } else {
                None
            };
            llm_predictions(
                cfg,
                data,
                embedder,
                modes,
                records,
                Some((&endpoint, transcript.as_ref())),
            )
        }
    }
}

/// Evaluate one branch/mode pair on the test split and write its report.
pub fn eval_cmd(cfg: &RunConfig, branch: Branch, modes: InputModes) -> Result<EvalReport> {
    let data = load_data(cfg)?;
    let embedder = embedder_for(cfg);
    let predictions = predictions_for(cfg, &data, &embedder, branch, modes, &data.test)?;
    let report = score(
        &predictions,
        &data.test,
        RunMeta {
            branch: branch.label().into(),
            modes: modes.label(),
            seed: cfg.seed,
            config_hash: cfg.world_hash(),
        },
    )?;
    crate::eval::emit_report(
        &report,
        &cfg.report_dir(),
        &format!("eval_{}_{}", branch.label(), modes.label()),
    )?;
    Ok(report)
}

/// Evaluate all seven configurations on the test split. Configurations
/// whose artifacts are missing are skipped and marked absent. With
/// `train_missing`, reasoner-branch configurations train on demand.
pub fn ablate_cmd(cfg: &RunConfig, branch: Branch, train_missing: bool) -> Result<AblationGrid> {
    let data = load_data(cfg)?;
    let embedder = embedder_for(cfg);
    if train_missing && branch == Branch::Reasoner {
        for (label, modes) in ablation_configs() {
            if !cfg.reasoner_checkpoint(label).exists() {
                train_reasoner_cmd(cfg, modes)?;
            }
        }
    }
    let grid = run_ablation(&data.test, branch.label(), |modes| {
        match predictions_for(cfg, &data, &embedder, branch, *modes, &data.test) {
            Ok(p) => Ok(Some(p)),
            Err(Error::MissingArtifact(_)) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    let dir = cfg.report_dir();
    emit_table(
        &grid_table(&grid, ReportFormat::Csv),
        &dir.join(format!("ablation_{}.csv", branch.label())),
    )?;
    emit_table(
        &grid_table(&grid, ReportFormat::Markdown),
        &dir.join(format!("ablation_{}.md", branch.label())),
    )?;
    for row in &grid.rows {
        if let Some(report) = &row.report {
            crate::eval::emit_report(
                report,
                &dir,
                &format!("ablation_{}_{}", branch.label(), row.config),
            )?;
        }
    }
    Ok(grid)
}

/// Render the prompt for one record id (searched across all splits).
pub fn prompt_cmd(cfg: &RunConfig, record_id: &str, modes: InputModes) -> Result<String> {
    let data = load_data(cfg)?;
    let embedder = embedder_for(cfg);
    let record = data
        .find_record(record_id)
        .ok_or_else(|| Error::Lookup(format!("no record with id {record_id}")))?
        .clone();
    let kb_ckpt = if modes.kb == SourceMode::Retrieved {
        Some(load_retriever(cfg, Source::Kb)?)
    } else {
        None
    };
    let sg_ckpt = if modes.sg == SourceMode::Retrieved {
        Some(load_retriever(cfg, Source::Sg)?)
    } else {
        None
    };
    let towers = Some((kb_ckpt, sg_ckpt));
    let selector = llm_selector(cfg, &embedder, &towers, &data, modes)?;
    let mut cache = HashMap::new();
    prompt_for_record(
        &record,
        &data,
        &embedder,
        &selector,
        cfg.llm.n_shots,
        &mut cache,
    )
}
