//! Triplet knowledge store: symbol interning, adjacency, keyword matching,
//! k-hop subgraph extraction, and verbalization.
//!
//! One `KnowledgeGraph` holds either the external KB or a single image's
//! scene graph; both are immutable after load.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    Kb,
    Sg,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Kb => write!(f, "kb"),
            Source::Sg => write!(f, "sg"),
        }
    }
}

/// Bijective interner for entity and relation surface forms. Surfaces are
/// normalized (lowercase, trimmed, underscores as spaces) before interning.
#[derive(Debug, Clone, Default)]
pub struct SymbolTable {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relation_ids: HashMap<String, RelationId>,
}

impl SymbolTable {
    pub fn intern_entity(&mut self, surface: &str) -> EntityId {
        let norm = text::normalize_surface(surface);
        if let Some(&id) = self.entity_ids.get(&norm) {
            return id;
        }
        let id = EntityId(self.entities.len() as u32);
        self.entity_ids.insert(norm.clone(), id);
        self.entities.push(norm);
        id
    }

    pub fn intern_relation(&mut self, surface: &str) -> RelationId {
        let norm = text::normalize_surface(surface);
        if let Some(&id) = self.relation_ids.get(&norm) {
            return id;
        }
        let id = RelationId(self.relations.len() as u32);
        self.relation_ids.insert(norm.clone(), id);
        self.relations.push(norm);
        id
    }

    pub fn entity_id(&self, surface: &str) -> Option<EntityId> {
        self.entity_ids.get(&text::normalize_surface(surface)).copied()
    }

    pub fn relation_id(&self, surface: &str) -> Option<RelationId> {
        self.relation_ids
            .get(&text::normalize_surface(surface))
            .copied()
    }

    pub fn entity(&self, id: EntityId) -> Result<&str> {
        self.entities
            .get(id.0 as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Lookup(format!("unknown entity id {}", id.0)))
    }

    pub fn relation(&self, id: RelationId) -> Result<&str> {
        self.relations
            .get(id.0 as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Lookup(format!("unknown relation id {}", id.0)))
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> impl Iterator<Item = (EntityId, &str)> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, s)| (EntityId(i as u32), s.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub source: Source,
}

/// A triplet as surface strings, the form used in QA records and files.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SurfaceTriplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl SurfaceTriplet {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        SurfaceTriplet {
            head: text::normalize_surface(head),
            relation: text::normalize_surface(relation),
            tail: text::normalize_surface(tail),
        }
    }

    /// "<head> <relation> <tail>" with single spaces.
    pub fn verbalize(&self) -> String {
        format!("{} {} {}", self.head, self.relation, self.tail)
    }
}

/// Immutable triplet graph with adjacency and a token-level keyword index.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    source: Source,
    table: SymbolTable,
    triplets: Vec<Triplet>,
    adjacency: Vec<Vec<usize>>,
    keyword_index: HashMap<String, BTreeSet<EntityId>>,
    triplet_ids: HashMap<(EntityId, RelationId, EntityId), usize>,
    duplicates_dropped: usize,
}

impl KnowledgeGraph {
    pub fn new(source: Source) -> Self {
        KnowledgeGraph {
            source,
            table: SymbolTable::default(),
            triplets: Vec::new(),
            adjacency: Vec::new(),
            keyword_index: HashMap::new(),
            triplet_ids: HashMap::new(),
            duplicates_dropped: 0,
        }
    }

    pub fn from_surface_triplets<'a>(
        source: Source,
        triplets: impl IntoIterator<Item = &'a SurfaceTriplet>,
    ) -> Self {
        let mut g = KnowledgeGraph::new(source);
        for t in triplets {
            g.insert(&t.head, &t.relation, &t.tail);
        }
        g
    }

    /// Insert one triplet; duplicates are dropped and counted. Returns the
    /// triplet id when inserted.
    pub fn insert(&mut self, head: &str, relation: &str, tail: &str) -> Option<usize> {
        let h = self.table.intern_entity(head);
        let r = self.table.intern_relation(relation);
        let t = self.table.intern_entity(tail);
        if self.triplet_ids.contains_key(&(h, r, t)) {
            self.duplicates_dropped += 1;
            return None;
        }
        let id = self.triplets.len();
        self.triplets.push(Triplet {
            head: h,
            relation: r,
            tail: t,
            source: self.source,
        });
        self.triplet_ids.insert((h, r, t), id);
        let max = h.0.max(t.0) as usize;
        if self.adjacency.len() <= max {
            self.adjacency.resize(max + 1, Vec::new());
        }
        self.adjacency[h.0 as usize].push(id);
        if t != h {
            self.adjacency[t.0 as usize].push(id);
        }
        for endpoint in [h, t] {
            let surface = self.table.entity(endpoint).expect("just interned");
            for tok in text::tokenize(surface) {
                if !text::is_stop_word(&tok) {
                    self.keyword_index.entry(tok).or_default().insert(endpoint);
                }
            }
        }
        Some(id)
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn table(&self) -> &SymbolTable {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn triplet(&self, id: usize) -> Result<&Triplet> {
        self.triplets
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("unknown triplet id {id}")))
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    /// Incident triplet ids for an entity.
    pub fn incident(&self, e: EntityId) -> &[usize] {
        self.adjacency
            .get(e.0 as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn find_triplet(&self, t: &SurfaceTriplet) -> Option<usize> {
        let h = self.table.entity_id(&t.head)?;
        let r = self.table.relation_id(&t.relation)?;
        let tl = self.table.entity_id(&t.tail)?;
        self.triplet_ids.get(&(h, r, tl)).copied()
    }

    pub fn surface(&self, id: usize) -> Result<SurfaceTriplet> {
        let t = self.triplet(id)?;
        Ok(SurfaceTriplet {
            head: self.table.entity(t.head)?.to_string(),
            relation: self.table.relation(t.relation)?.to_string(),
            tail: self.table.entity(t.tail)?.to_string(),
        })
    }

    /// "<head> <relation> <tail>"; underscores were already normalized to
    /// spaces at intern time.
    pub fn verbalize(&self, id: usize) -> Result<String> {
        Ok(self.surface(id)?.verbalize())
    }

    /// Entities whose normalized tokens intersect the text's non-stop-word
    /// tokens.
    pub fn match_keywords(&self, text_input: &str) -> BTreeSet<EntityId> {
        let mut out = BTreeSet::new();
        for tok in text::tokenize(text_input) {
            if text::is_stop_word(&tok) {
                continue;
            }
            if let Some(ids) = self.keyword_index.get(&tok) {
                out.extend(ids.iter().copied());
            }
        }
        out
    }

    /// All triplets reachable within `hops` edge traversals from any seed.
    /// Traversal is undirected; hops = 0 yields the empty set.
    pub fn extract_subgraph(&self, seeds: &BTreeSet<EntityId>, hops: usize) -> Result<BTreeSet<usize>> {
        for s in seeds {
            if s.0 as usize >= self.table.entity_count() {
                return Err(Error::Lookup(format!("unknown seed entity id {}", s.0)));
            }
        }
        let mut result = BTreeSet::new();
        if hops == 0 || seeds.is_empty() {
            return Ok(result);
        }
        let mut visited: BTreeSet<EntityId> = seeds.clone();
        let mut frontier: Vec<EntityId> = seeds.iter().copied().collect();
        for _ in 0..hops {
            let mut next = Vec::new();
            for &node in &frontier {
                for &tid in self.incident(node) {
                    result.insert(tid);
                    let t = &self.triplets[tid];
                    for other in [t.head, t.tail] {
                        if visited.insert(other) {
                            next.push(other);
                        }
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok(result)
    }

    /// Load a triplet JSONL file (`{"head": ..., "relation": ..., "tail": ...}`
    /// per line). Input order becomes triplet-id order; duplicates are
    /// dropped with a count.
    pub fn load_triplets(path: &Path, source: Source) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let reader = BufReader::new(file);
        let mut graph = KnowledgeGraph::new(source);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TripletLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            graph.insert(&rec.head, &rec.relation, &rec.tail);
        }
        Ok(graph)
    }

    pub fn save_triplets(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for id in 0..self.len() {
            let s = self.surface(id)?;
            serde_json::to_writer(&mut out, &TripletLine {
                head: s.head,
                relation: s.relation,
                tail: s.tail,
            })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TripletLine {
    head: String,
    relation: String,
    tail: String,
}

/// One image's scene graph.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image_id: String,
    pub graph: KnowledgeGraph,
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    image_id: String,
    triplets: Vec<[String; 3]>,
}

/// Load per-image scene graphs from JSONL
/// (`{"image_id": ..., "triplets": [[h, r, t], ...]}` per line).
pub fn load_scene_graphs(path: &Path) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let reader = BufReader::new(file);
    let mut scenes = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let mut graph = KnowledgeGraph::new(Source::Sg);
        for [h, r, t] in &rec.triplets {
            graph.insert(h, r, t);
        }
        scenes.push(Scene {
            image_id: rec.image_id,
            graph,
        });
    }
    Ok(scenes)
}

pub fn save_scene_graphs(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for scene in scenes {
        let triplets: Vec<[String; 3]> = (0..scene.graph.len())
            .map(|id| {
                let s = scene.graph.surface(id).expect("own ids");
                [s.head, s.relation, s.tail]
            })
            .collect();
        serde_json::to_writer(&mut out, &SceneLine {
            image_id: scene.image_id.clone(),
            triplets,
        })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_graph() -> KnowledgeGraph {
        // a -r1-> b -r2-> c
        let mut g = KnowledgeGraph::new(Source::Kb);
        g.insert("a", "r1", "b");
        g.insert("b", "r2", "c");
        g
    }

    #[test]
    fn insert_preserves_order_and_counts() {
        let mut g = KnowledgeGraph::new(Source::Kb);
        assert_eq!(g.insert("cat", "on", "mat"), Some(0));
        assert_eq!(g.insert("mat", "made_of", "straw"), Some(1));
        assert_eq!(g.insert("cat", "likes", "milk"), Some(2));
        assert_eq!(g.len(), 3);
        assert_eq!(g.duplicates_dropped(), 0);
        assert_eq!(g.insert("cat", "on", "mat"), None);
        assert_eq!(g.len(), 3);
        assert_eq!(g.duplicates_dropped(), 1);
    }

    #[test]
    fn verbalize_examples() {
        let mut g = KnowledgeGraph::new(Source::Sg);
        let id = g.insert("cat", "on", "mat").unwrap();
        assert_eq!(g.verbalize(id).unwrap(), "cat on mat");
        let id2 = g.insert("fire_truck", "has_color", "red").unwrap();
        assert_eq!(g.verbalize(id2).unwrap(), "fire truck has color red");
    }

    #[test]
    fn verbalize_distinct_on_single_token_vocab() {
        let mut g = KnowledgeGraph::new(Source::Kb);
        g.insert("a", "r", "b");
        g.insert("a", "r", "c");
        g.insert("b", "r", "a");
        let mut seen = BTreeSet::new();
        for id in 0..g.len() {
            assert!(seen.insert(g.verbalize(id).unwrap()));
        }
    }

    #[test]
    fn keyword_matching() {
        let mut g = KnowledgeGraph::new(Source::Kb);
        g.insert("cat", "on", "mat");
        let cat = g.table().entity_id("cat").unwrap();
        let hits = g.match_keywords("What is the cat on?");
        assert!(hits.contains(&cat));
        assert!(g.match_keywords("xyzzy?").is_empty());
    }

    #[test]
    fn keyword_matching_multiword_entities() {
        let mut g = KnowledgeGraph::new(Source::Kb);
        g.insert("fire truck", "is_a", "truck");
        let ft = g.table().entity_id("fire truck").unwrap();
        let tr = g.table().entity_id("truck").unwrap();
        let hits = g.match_keywords("red fire truck");
        assert!(hits.contains(&ft), "token overlap must match multiword entities");
        assert!(hits.contains(&tr));
    }

    #[test]
    fn subgraph_chain_two_hops() {
        let g = chain_graph();
        let a = g.table().entity_id("a").unwrap();
        let seeds = BTreeSet::from([a]);
        assert_eq!(g.extract_subgraph(&seeds, 0).unwrap().len(), 0);
        assert_eq!(g.extract_subgraph(&seeds, 1).unwrap(), BTreeSet::from([0]));
        assert_eq!(
            g.extract_subgraph(&seeds, 2).unwrap(),
            BTreeSet::from([0, 1])
        );
    }

    #[test]
    fn subgraph_empty_seeds() {
        let g = chain_graph();
        assert!(g.extract_subgraph(&BTreeSet::new(), 3).unwrap().is_empty());
    }

    #[test]
    fn subgraph_star_one_hop() {
        let mut g = KnowledgeGraph::new(Source::Kb);
        for i in 0..5 {
            g.insert("x", &format!("r{i}"), &format!("s{i}"));
        }
        let x = g.table().entity_id("x").unwrap();
        let got = g.extract_subgraph(&BTreeSet::from([x]), 1).unwrap();
        assert_eq!(got, (0..5).collect());
    }

    #[test]
    fn subgraph_unknown_seed_errors() {
        let g = chain_graph();
        let res = g.extract_subgraph(&BTreeSet::from([EntityId(99)]), 1);
        assert!(res.is_err());
    }

    #[test]
    fn load_save_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"head\":\"cat\",\"relation\":\"on\",\"tail\":\"mat\"}\n",
                "{\"head\":\"mat\",\"relation\":\"made_of\",\"tail\":\"straw\"}\n",
                "{\"head\":\"cat\",\"relation\":\"on\",\"tail\":\"mat\"}\n",
                "{\"head\":\"dog\",\"relation\":\"near\",\"tail\":\"cat\"}\n",
            ),
        )
        .unwrap();
        let g = KnowledgeGraph::load_triplets(&path, Source::Kb).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.duplicates_dropped(), 1);

        let out = dir.path().join("out.jsonl");
        g.save_triplets(&out).unwrap();
        let g2 = KnowledgeGraph::load_triplets(&out, Source::Kb).unwrap();
        assert_eq!(g2.len(), 3);
        for id in 0..g.len() {
            assert_eq!(g.surface(id).unwrap(), g2.surface(id).unwrap());
        }
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let g = KnowledgeGraph::load_triplets(&path, Source::Kb).unwrap();
        assert!(g.is_empty());
        assert!(g.match_keywords("anything").is_empty());
    }

    #[test]
    fn load_malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"head\":\"a\",\"relation\":\"r\",\"tail\":\"b\"}\nnot json\n",
        )
        .unwrap();
        match KnowledgeGraph::load_triplets(&path, Source::Kb) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    // Independent BFS oracle: distance labeling over nodes, then a triplet is
    // within h hops iff one endpoint is at distance <= h - 1.
    fn bfs_oracle(g: &KnowledgeGraph, seeds: &BTreeSet<EntityId>, hops: usize) -> BTreeSet<usize> {
        use std::collections::VecDeque;
        if hops == 0 {
            return BTreeSet::new();
        }
        let mut dist: HashMap<EntityId, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        for &s in seeds {
            dist.insert(s, 0);
            queue.push_back(s);
        }
        while let Some(node) = queue.pop_front() {
            let d = dist[&node];
            for &tid in g.incident(node) {
                let t = g.triplet(tid).unwrap();
                for other in [t.head, t.tail] {
                    if !dist.contains_key(&other) {
                        dist.insert(other, d + 1);
                        queue.push_back(other);
                    }
                }
            }
        }
        let mut out = BTreeSet::new();
        for (tid, t) in g.triplets().iter().enumerate() {
            let dh = dist.get(&t.head).copied();
            let dt = dist.get(&t.tail).copied();
            let reach = [dh, dt].into_iter().flatten().min();
            if let Some(d) = reach {
                if d + 1 <= hops {
                    out.insert(tid);
                }
            }
        }
        out
    }

    #[test]
    fn subgraph_matches_bfs_oracle_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..100 {
            let n_nodes = rng.gen_range(2..=50);
            let n_edges = rng.gen_range(1..=150);
            let mut g = KnowledgeGraph::new(Source::Kb);
            for _ in 0..n_edges {
                let h = rng.gen_range(0..n_nodes);
                let t = rng.gen_range(0..n_nodes);
                let r = rng.gen_range(0..8);
                g.insert(&format!("n{h}"), &format!("r{r}"), &format!("n{t}"));
            }
            let max_id = g.table().entity_count() as u32;
            let seed = EntityId(rng.gen_range(0..max_id));
            let seeds = BTreeSet::from([seed]);
            for hops in 0..=3 {
                let fast = g.extract_subgraph(&seeds, hops).unwrap();
                let slow = bfs_oracle(&g, &seeds, hops);
                assert_eq!(fast, slow, "hops={hops}");
            }
        }
    }

    #[test]
    fn subgraph_monotone_in_hops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let mut g = KnowledgeGraph::new(Source::Kb);
            for _ in 0..60 {
                let h = rng.gen_range(0..20);
                let t = rng.gen_range(0..20);
                g.insert(&format!("n{h}"), "r", &format!("n{t}"));
            }
            let seed = EntityId(rng.gen_range(0..g.table().entity_count() as u32));
            let seeds = BTreeSet::from([seed]);
            let mut prev = BTreeSet::new();
            for hops in 0..=4 {
                let cur = g.extract_subgraph(&seeds, hops).unwrap();
                assert!(prev.is_subset(&cur), "result must be monotone in hops");
                prev = cur;
            }
        }
    }

    #[test]
    fn loading_same_file_twice_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        std::fs::write(
            &path,
            "{\"head\":\"a\",\"relation\":\"r\",\"tail\":\"b\"}\n{\"head\":\"b\",\"relation\":\"s\",\"tail\":\"c\"}\n",
        )
        .unwrap();
        let g1 = KnowledgeGraph::load_triplets(&path, Source::Kb).unwrap();
        let g2 = KnowledgeGraph::load_triplets(&path, Source::Kb).unwrap();
        assert_eq!(g1.len(), g2.len());
        for id in 0..g1.len() {
            assert_eq!(g1.surface(id).unwrap(), g2.surface(id).unwrap());
            assert_eq!(g1.verbalize(id).unwrap(), g2.verbalize(id).unwrap());
        }
    }
}
