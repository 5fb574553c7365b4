//! Few-shot prompt pipeline: shot selection by embedding similarity,
//! byte-exact prompt rendering with a knowledge section, a completion-API
//! client, a deterministic mock model, and answer parsing.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::QARecord;
use crate::encoder::BaseEmbedder;
use crate::error::{Error, Result};
use crate::numerics::cosine_similarity;

pub const PROMPT_HEADER: &str =
    "Please answer the question according to the context and knowledge.";

/// One in-context example.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub caption: String,
    pub knowledge: Vec<String>,
    pub question: String,
    pub answer: String,
}

/// A rendered few-shot prompt.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub shots: Vec<Shot>,
    pub test_caption: String,
    pub test_knowledge: Vec<String>,
    pub test_question: String,
    pub rendered: String,
}

fn knowledge_line(knowledge: &[String]) -> String {
    if knowledge.is_empty() {
        "Knowledge: none".to_string()
    } else {
        format!("Knowledge: {}", knowledge.join("; "))
    }
}

/// Render the prompt byte-exactly:
///
/// ```text
/// <header>\n\n
/// per shot: Knowledge: ...\nContext: ...\nQuestion: ...\nAnswer: ...\n\n
/// test:     Knowledge: ...\nContext: ...\nQuestion: ...\nAnswer:
/// ```
pub fn render_prompt(
    shots: &[Shot],
    test_caption: &str,
    test_knowledge: &[String],
    test_question: &str,
) -> Prompt {
    let mut out = String::new();
    out.push_str(PROMPT_HEADER);
    out.push_str("\n\n");
    for shot in shots {
        out.push_str(&knowledge_line(&shot.knowledge));
        out.push('\n');
        out.push_str(&format!("Context: {}\n", shot.caption));
        out.push_str(&format!("Question: {}\n", shot.question));
        out.push_str(&format!("Answer: {}\n\n", shot.answer));
    }
    out.push_str(&knowledge_line(test_knowledge));
    out.push('\n');
    out.push_str(&format!("Context: {test_caption}\n"));
    out.push_str(&format!("Question: {test_question}\n"));
    out.push_str("Answer:");
    Prompt {
        shots: shots.to_vec(),
        test_caption: test_caption.to_string(),
        test_knowledge: test_knowledge.to_vec(),
        test_question: test_question.to_string(),
        rendered: out,
    }
}

/// Rank training records by cosine similarity between base embeddings of
/// `question + " " + caption` and return the indices of the top n, ordered
/// least-similar first (the most similar shot sits nearest the test block).
/// Ties break toward the lexically smaller record id.
pub fn select_shots(
    record: &QARecord,
    train: &[QARecord],
    embedder: &BaseEmbedder,
    n: usize,
) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::EmptyInput("shot selection needs training records"));
    }
    if n == 0 {
        return Err(Error::Contract("shot count must be at least 1".into()));
    }
    let query = embedder.embed(&format!("{} {}", record.question, record.caption));
    let mut scored: Vec<(usize, f64)> = train
        .iter()
        .enumerate()
        .map(|(i, cand)| {
            let v = embedder.embed(&format!("{} {}", cand.question, cand.caption));
            let score = cosine_similarity(&query, &v).unwrap_or(0.0);
            (i, (score * 1e12).round() / 1e12)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| train[a.0].id.cmp(&train[b.0].id))
    });
    scored.truncate(n.min(train.len()));
    scored.reverse(); // least similar first, most similar last
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Completion endpoint parameters. The auth token is read from the named
/// environment variable at call time; evaluation runs keep temperature 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmEndpoint {
    pub base_url: String,
    pub model: String,
    pub auth_env: String,
    pub timeout_secs: u64,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: String,
}

impl Default for LlmEndpoint {
    fn default() -> Self {
        LlmEndpoint {
            base_url: "http://127.0.0.1:8080/v1/completions".into(),
            model: "gpt-3.5-turbo-instruct".into(),
            auth_env: "KGQA_LLM_API_KEY".into(),
            timeout_secs: 30,
            max_tokens: 10,
            temperature: 0.0,
            stop: "\n\n".into(),
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a str,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

/// Optional JSONL transcript of requests and responses.
pub struct Transcript {
    path: PathBuf,
}

impl Transcript {
    pub fn new(path: PathBuf) -> Self {
        Transcript { path }
    }

    fn log(&self, entry: &serde_json::Value) -> Result<()> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        serde_json::to_writer(&mut file, entry)?;
        file.write_all(b"\n")?;
        Ok(())
    }
}

/// POST the prompt to the completion endpoint and return the first
/// completion text. Retries transport errors and non-2xx responses with
/// exponential backoff, three attempts total. Fails fast (before any
/// network traffic) when the auth variable is missing.
pub fn llm_complete(
    prompt: &str,
    endpoint: &LlmEndpoint,
    transcript: Option<&Transcript>,
) -> Result<String> {
    let token = std::env::var(&endpoint.auth_env).map_err(|_| {
        Error::Credential(format!(
            "auth environment variable {} is not set",
            endpoint.auth_env
        ))
    })?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(endpoint.timeout_secs))
        .build()
        .map_err(|e| Error::Transport(e.to_string()))?;
    let request = CompletionRequest {
        model: &endpoint.model,
        prompt,
        max_tokens: endpoint.max_tokens,
        temperature: endpoint.temperature,
        stop: &endpoint.stop,
    };
    if let Some(t) = transcript {
        t.log(&serde_json::json!({
            "direction": "request",
            "url": endpoint.base_url,
            "model": endpoint.model,
            "prompt": prompt,
        }))?;
    }

    let mut last_err: Option<Error> = None;
    for attempt in 0..3u32 {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(100 * (1 << attempt)));
        }
        let sent = client
            .post(&endpoint.base_url)
            .bearer_auth(&token)
            .json(&request)
            .send();
        match sent {
            Err(e) => {
                last_err = Some(Error::Transport(e.to_string()));
            }
            Ok(response) => {
                let status = response.status();
                let body = response
                    .text()
                    .map_err(|e| Error::Transport(e.to_string()))?;
                if status == reqwest::StatusCode::UNAUTHORIZED
                    || status == reqwest::StatusCode::FORBIDDEN
                {
                    return Err(Error::Credential(format!(
                        "endpoint rejected credentials (status {status})"
                    )));
                }
                if !status.is_success() {
                    last_err = Some(Error::Api {
                        status: status.as_u16(),
                        body: body.clone(),
                    });
                    continue;
                }
                let parsed: CompletionResponse = serde_json::from_str(&body)?;
                let text = parsed
                    .choices
                    .first()
                    .map(|c| c.text.clone())
                    .ok_or_else(|| Error::Api {
                        status: status.as_u16(),
                        body: "completion response had no choices".into(),
                    })?;
                if let Some(t) = transcript {
                    t.log(&serde_json::json!({
                        "direction": "response",
                        "status": status.as_u16(),
                        "text": text,
                    }))?;
                }
                return Ok(text);
            }
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Transport("request never attempted".into())))
}

/// Answer key handed to the mock model out-of-band, so a prompt-rendering
/// regression cannot silently pass.
#[derive(Debug, Clone)]
pub struct MockAnswerKey {
    pub gold_answer: String,
    pub gt_verbalizations: Vec<String>,
}

impl MockAnswerKey {
    pub fn for_record(record: &QARecord) -> Self {
        MockAnswerKey {
            gold_answer: record.answer.clone(),
            gt_verbalizations: record.all_reasons().map(|t| t.verbalize()).collect(),
        }
    }
}

/// Deterministic mock model: answers the gold answer if and only if every
/// ground-truth reason verbalization appears verbatim in the test block's
/// knowledge section; otherwise answers "unknown".
pub fn mock_llm(prompt: &str, key: &MockAnswerKey) -> Result<String> {
    let test_block = prompt
        .rsplit("\n\n")
        .next()
        .ok_or_else(|| Error::MockProtocol("prompt has no test block".into()))?;
    let mut lines = test_block.lines();
    let knowledge = lines
        .next()
        .filter(|l| l.starts_with("Knowledge: "))
        .ok_or_else(|| Error::MockProtocol("test block is missing its knowledge line".into()))?;
    let context_ok = lines.next().map(|l| l.starts_with("Context: ")).unwrap_or(false);
    let question_ok = lines.next().map(|l| l.starts_with("Question: ")).unwrap_or(false);
    let answer_ok = lines.next().map(|l| l == "Answer:").unwrap_or(false);
    if !(context_ok && question_ok && answer_ok) {
        return Err(Error::MockProtocol(
            "test block does not follow the Knowledge/Context/Question/Answer grammar".into(),
        ));
    }
    let body = &knowledge["Knowledge: ".len()..];
    let items: Vec<&str> = if body == "none" {
        Vec::new()
    } else {
        body.split("; ").collect()
    };
    let covered = key
        .gt_verbalizations
        .iter()
        .all(|gt| items.contains(&gt.as_str()));
    Ok(if covered {
        key.gold_answer.clone()
    } else {
        "unknown".to_string()
    })
}

/// First line, trimmed of whitespace and terminal punctuation, lowercased.
pub fn parse_answer(completion: &str) -> String {
    let first = completion.lines().next().unwrap_or("");
    first
        .trim()
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim()
        .to_lowercase()
}
