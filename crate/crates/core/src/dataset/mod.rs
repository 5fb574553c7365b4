//! QA records, question templates, dataset splits, answer vocabulary, and
//! JSONL persistence. World/question generation lives in [`generator`].

pub mod generator;

pub use generator::{generate_questions, generate_world, World, WorldSpec};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::knowledge::SurfaceTriplet;

/// One question-answer record with its supporting reasons split into the
/// scene-graph part and the external-KB part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub image_id: String,
    pub question: String,
    pub answer: String,
    pub qtype: u8,
    pub hops: u8,
    pub kb_related: bool,
    pub caption: String,
    #[serde(with = "triplet_array")]
    pub reason_sg: Vec<SurfaceTriplet>,
    #[serde(with = "triplet_array")]
    pub reason_kb: Vec<SurfaceTriplet>,
}

/// Serialize reason triplets as `[head, relation, tail]` arrays.
mod triplet_array {
    use super::SurfaceTriplet;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[SurfaceTriplet], s: S) -> Result<S::Ok, S::Error> {
        let arr: Vec<[&str; 3]> = v
            .iter()
            .map(|t| [t.head.as_str(), t.relation.as_str(), t.tail.as_str()])
            .collect();
        arr.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<SurfaceTriplet>, D::Error> {
        let arr: Vec<[String; 3]> = Vec::deserialize(d)?;
        Ok(arr
            .into_iter()
            .map(|[h, r, t]| SurfaceTriplet::new(&h, &r, &t))
            .collect())
    }
}

impl QARecord {
    /// GT reason triplets for one retrieval source.
    pub fn reasons(&self, source: crate::knowledge::Source) -> &[SurfaceTriplet] {
        match source {
            crate::knowledge::Source::Kb => &self.reason_kb,
            crate::knowledge::Source::Sg => &self.reason_sg,
        }
    }

    /// All GT reason triplets (scene-graph part first).
    pub fn all_reasons(&self) -> impl Iterator<Item = &SurfaceTriplet> {
        self.reason_sg.iter().chain(self.reason_kb.iter())
    }
}

pub fn hops_for_qtype(qtype: u8) -> u8 {
    if qtype <= 2 {
        1
    } else {
        2
    }
}

/// Render a question template over a reason chain. One-hop templates take a
/// single triplet, two-hop templates a chain `(A,R1,B),(B,R2,C)`. Returns
/// `(question, answer)`.
pub fn render_template(qtype: u8, chain: &[SurfaceTriplet]) -> Result<(String, String)> {
    let expect = hops_for_qtype(qtype) as usize;
    if chain.len() != expect {
        return Err(Error::Contract(format!(
            "template {qtype} needs {expect} reason triplet(s), got {}",
            chain.len()
        )));
    }
    Ok(match qtype {
        0 => {
            let t = &chain[0];
            (
                format!("What is the relation of {} and {}?", t.head, t.tail),
                t.relation.clone(),
            )
        }
        1 => {
            let t = &chain[0];
            (format!("What is {} {}?", t.head, t.relation), t.tail.clone())
        }
        2 => {
            let t = &chain[0];
            (format!("What {} {}?", t.relation, t.tail), t.head.clone())
        }
        3 => {
            let (a, b) = (&chain[0], &chain[1]);
            (
                format!(
                    "What is the relation of the object that {} {} and {}?",
                    a.head, a.relation, b.tail
                ),
                b.relation.clone(),
            )
        }
        4 => {
            let (a, b) = (&chain[0], &chain[1]);
            (
                format!(
                    "What is the relation of {} and the object that {} {}?",
                    a.head, b.relation, b.tail
                ),
                a.relation.clone(),
            )
        }
        5 => {
            let (a, b) = (&chain[0], &chain[1]);
            (
                format!("What {} {} {}?", a.head, a.relation, b.relation),
                b.tail.clone(),
            )
        }
        6 => {
            let (a, b) = (&chain[0], &chain[1]);
            (
                format!("What {} {} {}?", a.relation, b.relation, b.tail),
                a.head.clone(),
            )
        }
        other => return Err(Error::Contract(format!("unknown question type {other}"))),
    })
}

/// Recover the reason chain in order. For two-hop records the order is
/// resolved by the bridge entity (first.tail == second.head) plus agreement
/// with the rendered template.
pub fn resolve_chain(record: &QARecord) -> Result<Vec<SurfaceTriplet>> {
    let all: Vec<SurfaceTriplet> = record.all_reasons().cloned().collect();
    match hops_for_qtype(record.qtype) {
        1 => {
            if all.len() == 1 {
                Ok(all)
            } else {
                Err(Error::Validation {
                    id: record.id.clone(),
                    msg: format!("one-hop record must carry 1 reason, has {}", all.len()),
                })
            }
        }
        _ => {
            if all.len() != 2 {
                return Err(Error::Validation {
                    id: record.id.clone(),
                    msg: format!("two-hop record must carry 2 reasons, has {}", all.len()),
                });
            }
            let orders = [
                vec![all[0].clone(), all[1].clone()],
                vec![all[1].clone(), all[0].clone()],
            ];
            for chain in orders {
                if chain[0].tail != chain[1].head {
                    continue;
                }
                if let Ok((q, a)) = render_template(record.qtype, &chain) {
                    if q == record.question && a == record.answer {
                        return Ok(chain);
                    }
                }
            }
            Err(Error::Validation {
                id: record.id.clone(),
                msg: "reason triplets do not form a chain matching the question".into(),
            })
        }
    }
}

/// Check every structural invariant of a record.
pub fn validate_record(record: &QARecord) -> Result<()> {
    let fail = |msg: String| Error::Validation {
        id: record.id.clone(),
        msg,
    };
    if record.qtype > 6 {
        return Err(fail(format!("qtype {} out of range 0..6", record.qtype)));
    }
    let hops = hops_for_qtype(record.qtype);
    if record.hops != hops {
        return Err(fail(format!(
            "qtype {} implies hops {hops}, record says {}",
            record.qtype, record.hops
        )));
    }
    let n_reasons = record.reason_sg.len() + record.reason_kb.len();
    if n_reasons != hops as usize {
        return Err(fail(format!(
            "expected {hops} reason triplet(s), found {n_reasons}"
        )));
    }
    if record.kb_related != !record.reason_kb.is_empty() {
        return Err(fail("kb_related flag must mirror a non-empty reason_kb".into()));
    }
    let chain = resolve_chain(record)?;
    let (question, answer) = render_template(record.qtype, &chain)?;
    if question != record.question {
        return Err(fail(format!(
            "question does not match its template: {:?} vs {:?}",
            record.question, question
        )));
    }
    if answer != record.answer {
        return Err(fail(format!(
            "answer does not match its template slot: {:?} vs {:?}",
            record.answer, answer
        )));
    }
    Ok(())
}

/// Ordered answer-string to class-index mapping built from training answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerVocab {
    answers: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn from_answers(answers: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = answers.into_iter().collect();
        let answers: Vec<String> = set.into_iter().collect();
        let index = answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        AnswerVocab { answers, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, class: usize) -> Option<&str> {
        self.answers.get(class).map(String::as_str)
    }

    /// Stable fingerprint used to guard reasoner checkpoints against a
    /// mismatched vocabulary.
    pub fn fingerprint(&self) -> u64 {
        let joined = self.answers.join("\u{1f}");
        fnv1a64(joined.as_bytes(), 0)
    }
}

/// Sorted-unique answers of the training records, indexed from 0.
pub fn build_answer_vocab(train: &[QARecord]) -> Result<AnswerVocab> {
    if train.is_empty() {
        return Err(Error::EmptyInput("cannot build answer vocab from no records"));
    }
    Ok(AnswerVocab::from_answers(
        train.iter().map(|r| r.answer.clone()),
    ))
}

/// Partition records by image id into train/val/test. No image spans
/// splits; deterministic given the seed.
pub fn split_dataset(
    records: &[QARecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<QARecord>, Vec<QARecord>, Vec<QARecord>)> {
    if ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config("split ratios must be nonnegative".into()));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {total}")));
    }
    let mut images: Vec<&str> = Vec::new();
    let mut seen = BTreeSet::new();
    for r in records {
        if seen.insert(r.image_id.as_str()) {
            images.push(&r.image_id);
        }
    }
    let n_splits = ratios.iter().filter(|r| **r > 0.0).count();
    if images.len() < n_splits {
        return Err(Error::Config(format!(
            "{} image(s) cannot fill {n_splits} non-empty splits",
            images.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images.shuffle(&mut rng);
    let n = images.len() as f64;
    let cut1 = (n * ratios[0]).round() as usize;
    let cut2 = ((n * (ratios[0] + ratios[1])).round() as usize).clamp(cut1, images.len());
    let mut assignment: BTreeMap<&str, u8> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        let split = if i < cut1 {
            0
        } else if i < cut2 {
            1
        } else {
            2
        };
        assignment.insert(img, split);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for r in records {
        match assignment[r.image_id.as_str()] {
            0 => train.push(r.clone()),
            1 => val.push(r.clone()),
            _ => test.push(r.clone()),
        }
    }
    Ok((train, val, test))
}

/// Write records as JSONL, one record per line, fields in declaration order.
pub fn save_qa_jsonl(records: &[QARecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Load and validate records from JSONL.
pub fn load_qa_jsonl(path: &Path) -> Result<Vec<QARecord>> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QARecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        validate_record(&record)?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact(h: &str, r: &str, t: &str) -> SurfaceTriplet {
        SurfaceTriplet::new(h, r, t)
    }

    fn one_hop_record(qtype: u8) -> QARecord {
        let reason = fact("cat", "on", "mat");
        let (question, answer) = render_template(qtype, std::slice::from_ref(&reason)).unwrap();
        QARecord {
            id: format!("q{qtype}"),
            image_id: "img0".into(),
            question,
            answer,
            qtype,
            hops: 1,
            kb_related: false,
            caption: "cat on mat".into(),
            reason_sg: vec![reason],
            reason_kb: vec![],
        }
    }

    #[test]
    fn template_type1_example() {
        let (q, a) = render_template(1, &[fact("cat", "on", "mat")]).unwrap();
        assert_eq!(q, "What is cat on?");
        assert_eq!(a, "mat");
    }

    #[test]
    fn template_type0_example() {
        let (q, a) = render_template(0, &[fact("cat", "on", "mat")]).unwrap();
        assert_eq!(q, "What is the relation of cat and mat?");
        assert_eq!(a, "on");
    }

    #[test]
    fn template_type5_chain_example() {
        let chain = [fact("cat", "on", "mat"), fact("mat", "madeof", "straw")];
        let (q, a) = render_template(5, &chain).unwrap();
        assert_eq!(q, "What cat on madeof?");
        assert_eq!(a, "straw");
    }

    #[test]
    fn template_all_types_distinct() {
        let chain1 = [fact("a", "r", "b")];
        let chain2 = [fact("a", "r1", "b"), fact("b", "r2", "c")];
        let mut seen = BTreeSet::new();
        for qt in 0..=2u8 {
            let (q, _) = render_template(qt, &chain1).unwrap();
            assert!(seen.insert(q));
        }
        for qt in 3..=6u8 {
            let (q, _) = render_template(qt, &chain2).unwrap();
            assert!(seen.insert(q));
        }
    }

    #[test]
    fn validate_accepts_well_formed() {
        for qt in 0..=2 {
            validate_record(&one_hop_record(qt)).unwrap();
        }
    }

    #[test]
    fn validate_rejects_wrong_reason_count() {
        let mut r = one_hop_record(1);
        r.qtype = 3;
        r.hops = 2;
        let err = validate_record(&r).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn validate_rejects_kb_flag_mismatch() {
        let mut r = one_hop_record(1);
        r.kb_related = true;
        assert!(validate_record(&r).is_err());
    }

    #[test]
    fn resolve_chain_orders_mixed_reasons() {
        let sg = fact("cat", "on", "mat");
        let kb = fact("mat", "madeof", "straw");
        let (question, answer) = render_template(5, &[sg.clone(), kb.clone()]).unwrap();
        let record = QARecord {
            id: "q0".into(),
            image_id: "img0".into(),
            question,
            answer,
            qtype: 5,
            hops: 2,
            kb_related: true,
            caption: String::new(),
            reason_sg: vec![sg.clone()],
            reason_kb: vec![kb.clone()],
        };
        validate_record(&record).unwrap();
        assert_eq!(resolve_chain(&record).unwrap(), vec![sg, kb]);
    }

    #[test]
    fn vocab_dedups_and_sorts() {
        let mut records = vec![one_hop_record(1), one_hop_record(0), one_hop_record(1)];
        records[0].answer = "mat".into();
        let vocab = build_answer_vocab(&records).unwrap();
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.answer(0), Some("mat"));
        assert_eq!(vocab.answer(1), Some("on"));
        assert_eq!(vocab.index_of("on"), Some(1));
        assert_eq!(vocab.index_of("straw"), None);
    }

    #[test]
    fn vocab_single_record() {
        let vocab = build_answer_vocab(&[one_hop_record(1)]).unwrap();
        assert_eq!(vocab.len(), 1);
    }

    #[test]
    fn split_by_image_examples() {
        let mut records = Vec::new();
        for img in 0..10 {
            for k in 0..3 {
                let mut r = one_hop_record(1);
                r.id = format!("q{img}_{k}");
                r.image_id = format!("img{img}");
                records.push(r);
            }
        }
        let (train, val, test) = split_dataset(&records, [0.6, 0.2, 0.2], 42).unwrap();
        let images = |rs: &[QARecord]| -> BTreeSet<String> {
            rs.iter().map(|r| r.image_id.clone()).collect()
        };
        assert_eq!(images(&train).len(), 6);
        assert_eq!(images(&val).len(), 2);
        assert_eq!(images(&test).len(), 2);
        // partition property: no record id in two splits
        let mut ids = BTreeSet::new();
        for r in train.iter().chain(&val).chain(&test) {
            assert!(ids.insert(r.id.clone()));
        }
        assert_eq!(ids.len(), records.len());
        // no image spans splits
        assert!(images(&train).is_disjoint(&images(&val)));
        assert!(images(&train).is_disjoint(&images(&test)));
        assert!(images(&val).is_disjoint(&images(&test)));
    }

    #[test]
    fn split_degenerate_all_train() {
        let records = vec![one_hop_record(1)];
        let (train, val, test) = split_dataset(&records, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(train.len(), 1);
        assert!(val.is_empty() && test.is_empty());
    }

    #[test]
    fn split_too_few_images_errors() {
        let records = vec![one_hop_record(1)];
        assert!(split_dataset(&records, [0.6, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let records = vec![one_hop_record(0), one_hop_record(2)];
        save_qa_jsonl(&records, &path).unwrap();
        let loaded = load_qa_jsonl(&path).unwrap();
        assert_eq!(loaded, records);
        // reason triplets are arrays on disk
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.contains("[[\"cat\",\"on\",\"mat\"]]"), "{raw}");
    }

    #[test]
    fn jsonl_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_qa_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn jsonl_rejects_invariant_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let mut bad = one_hop_record(1);
        bad.qtype = 3; // qtype 3 with a single reason triplet
        bad.hops = 2;
        save_qa_jsonl(&[bad], &path).unwrap();
        let err = load_qa_jsonl(&path).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }
}
