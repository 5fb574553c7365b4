//! Synthetic world and question generation.
//!
//! A world is an external KB plus per-image scene graphs over pronounceable
//! two-syllable names. The structure is deliberate:
//!
//! - entity names carry class morphology: *bridge* entities (final syllable
//!   mo/ne/ri) are the KB-connected subjects every KB reason passes
//!   through, *dead-end* entities (final syllable fa/ke/lu) only terminate
//!   chains, and everything else is unmarked;
//! - scene facts come from a global pool of out-fan families (one head and
//!   relation, one chain-capable tail plus dead-end tails) and
//!   continuation-hub families (one relation and tail, one chain-capable
//!   head plus dead-end heads), and a scene pulls whole families;
//! - KB relations concentrate on hub tails, and every bridge heads a few
//!   KB facts under distinct relations.
//!
//! Every two-hop reason starts at a fan fact whose siblings tie with it on
//! the tokens the question exposes, so a frozen-embedding baseline must
//! guess among them, while the class morphology (dead-end penalty on the
//! scene side, bridge preference on the KB side) gives a trained retriever
//! a low-rank signal that resolves the tie.
//!
//! Questions instantiate the seven templates from the enumerated set of
//! unambiguous candidates per scene (a candidate whose slots admit more
//! than one answer over the scene-plus-KB scope is never emitted), and
//! two-hop KB questions always chain scene fact first, KB fact second.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{hops_for_qtype, render_template, QARecord};
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeGraph, Scene, Source, SurfaceTriplet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_images: usize,
    pub sg_entities_per_image: usize,
    pub sg_triplets_per_image: usize,
    pub kb_entities: usize,
    pub kb_relations: usize,
    pub kb_triplets: usize,
    pub kb_question_fraction: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 42,
            n_images: 340,
            sg_entities_per_image: 11,
            sg_triplets_per_image: 12,
            kb_entities: 320,
            kb_relations: 24,
            kb_triplets: 3200,
            kb_question_fraction: 0.7,
        }
    }
}

impl WorldSpec {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("n_images", self.n_images),
            ("sg_entities_per_image", self.sg_entities_per_image),
            ("sg_triplets_per_image", self.sg_triplets_per_image),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Generation(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.kb_question_fraction) {
            return Err(Error::Generation(
                "kb_question_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.kb_question_fraction > 0.0 {
            if self.kb_triplets == 0 {
                return Err(Error::Generation(
                    "kb_question_fraction > 0 requires kb_triplets > 0".into(),
                ));
            }
            if self.kb_entities < 2 || self.kb_relations == 0 {
                return Err(Error::Generation(
                    "KB questions need at least 2 entities and 1 relation".into(),
                ));
            }
        }
        if self.kb_triplets > 0 {
            let pairs = self
                .kb_entities
                .saturating_mul(self.kb_entities.saturating_sub(1));
            if self.kb_triplets > pairs.saturating_mul(self.kb_relations) {
                return Err(Error::Generation(format!(
                    "{} KB triplets cannot be distinct over {} entities and {} relations",
                    self.kb_triplets, self.kb_entities, self.kb_relations
                )));
            }
        }
        if self.sg_triplets_per_image < 2 || self.sg_entities_per_image < 3 {
            return Err(Error::Generation(
                "scenes need at least 2 triplets over 3 entities to host two-hop chains".into(),
            ));
        }
        Ok(())
    }
}

/// A generated world: the KB, one scene graph per image, and one caption
/// per image (aligned with `scenes`).
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub kb: KnowledgeGraph,
    pub scenes: Vec<Scene>,
    pub captions: Vec<String>,
}

impl World {
    pub fn scene_for(&self, image_id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.image_id == image_id)
    }
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Final syllables marking KB-connected bridge entities.
const BRIDGE_FINALS: [&str; 3] = ["mo", "ne", "ri"];
/// Final syllables marking chain-terminating entities.
const DEADEND_FINALS: [&str; 3] = ["fa", "ke", "lu"];

fn is_reserved_final(syllable: &str) -> bool {
    BRIDGE_FINALS.contains(&syllable) || DEADEND_FINALS.contains(&syllable)
}

/// Whether a generated name belongs to the bridge class.
pub fn is_bridge_name(name: &str) -> bool {
    BRIDGE_FINALS.iter().any(|s| name.ends_with(s))
}

/// Whether a generated name belongs to the dead-end class.
pub fn is_dead_end_name(name: &str) -> bool {
    DEADEND_FINALS.iter().any(|s| name.ends_with(s))
}

/// Distinct pronounceable two-syllable names with class-reserved finals.
struct NameGen {
    used: HashSet<String>,
}

impl NameGen {
    fn new() -> Self {
        NameGen {
            used: HashSet::new(),
        }
    }

    fn syllable(rng: &mut ChaCha8Rng) -> String {
        format!(
            "{}{}",
            ONSETS[rng.gen_range(0..ONSETS.len())],
            VOWELS[rng.gen_range(0..VOWELS.len())]
        )
    }

    fn fresh_with(&mut self, rng: &mut ChaCha8Rng, finals: Option<&[&str]>) -> Result<String> {
        for _ in 0..10_000 {
            let first = Self::syllable(rng);
            let last = match finals {
                Some(set) => set[rng.gen_range(0..set.len())].to_string(),
                None => {
                    let s = Self::syllable(rng);
                    if is_reserved_final(&s) {
                        continue;
                    }
                    s
                }
            };
            let name = format!("{first}{last}");
            if self.used.insert(name.clone()) {
                return Ok(name);
            }
        }
        Err(Error::Generation(
            "name space exhausted; shrink the world spec".into(),
        ))
    }

    fn generic(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
        (0..n).map(|_| self.fresh_with(rng, None)).collect()
    }

    fn bridges(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
        (0..n)
            .map(|_| self.fresh_with(rng, Some(&BRIDGE_FINALS)))
            .collect()
    }

    fn dead_ends(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
        (0..n)
            .map(|_| self.fresh_with(rng, Some(&DEADEND_FINALS)))
            .collect()
    }
}

struct ScenePool {
    facts: Vec<SurfaceTriplet>,
    families: Vec<Vec<usize>>,
    families_by_entity: BTreeMap<String, Vec<usize>>,
    /// family index of the out-fan rooted at each scene subject
    fans_by_root: BTreeMap<String, usize>,
    /// fan families whose chain tail is a bridge
    bridge_fans: Vec<usize>,
    /// fan families whose chain tail is another scene subject
    chain_fans: Vec<usize>,
    /// family index of the continuation hub headed by each scene subject
    hubs_by_head: BTreeMap<String, usize>,
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut names = NameGen::new();

    // --- external KB ---
    let desired_shared = (spec.kb_entities / 5).clamp(1, 80);
    let shared_count = if spec.kb_triplets == 0 {
        0
    } else {
        desired_shared
            .min(spec.kb_triplets / 4)
            .max(1)
            .min(spec.kb_entities.saturating_sub(1))
    };
    let bridges: Vec<String> = names.bridges(shared_count, &mut rng)?;
    let kb_generic: Vec<String> = names.generic(spec.kb_entities - shared_count, &mut rng)?;
    let kb_relations = names.generic(spec.kb_relations, &mut rng)?;

    let mut kb_facts: Vec<SurfaceTriplet> = Vec::with_capacity(spec.kb_triplets);
    let mut kb_seen: HashSet<(String, String, String)> = HashSet::new();

    if spec.kb_triplets > 0 {
        // hub tails per relation: several facts share a (relation, tail) pair
        let hub_count = (spec.kb_entities / 30)
            .clamp(3, 12)
            .min(kb_generic.len().max(1));
        let mut hubs: Vec<Vec<&String>> = Vec::new();
        for _ in 0..spec.kb_relations {
            let mut tails = Vec::new();
            for _ in 0..hub_count {
                tails.push(&kb_generic[rng.gen_range(0..kb_generic.len())]);
            }
            hubs.push(tails);
        }

        let push_fact =
            |h: &str, r: &str, t: &str, facts: &mut Vec<SurfaceTriplet>, seen: &mut HashSet<_>| {
                if h == t {
                    return false;
                }
                let key = (h.to_string(), r.to_string(), t.to_string());
                if seen.insert(key) {
                    facts.push(SurfaceTriplet::new(h, r, t));
                    true
                } else {
                    false
                }
            };

        // every bridge heads a few facts under distinct relations, so scene
        // chains into the KB always have somewhere to go; one of them gets a
        // reserved (relation, tail) pair so head-seeking questions about the
        // bridge stay answerable
        let mut reserved_pairs: HashSet<(String, String)> = HashSet::new();
        for s in &bridges {
            let mut rels: Vec<usize> = (0..spec.kb_relations).collect();
            rels.shuffle(&mut rng);
            let mut added = 0;
            for &ri in rels.iter() {
                if added >= 4 || kb_facts.len() >= spec.kb_triplets {
                    break;
                }
                if added == 0 {
                    // private tail: no other fact may reuse this pair
                    let mut placed = false;
                    for _ in 0..40 {
                        let tail = &kb_generic[rng.gen_range(0..kb_generic.len())];
                        let pair = (kb_relations[ri].clone(), tail.clone());
                        if reserved_pairs.contains(&pair) {
                            continue;
                        }
                        if push_fact(s, &kb_relations[ri], tail, &mut kb_facts, &mut kb_seen) {
                            reserved_pairs.insert(pair);
                            placed = true;
                            break;
                        }
                    }
                    if placed {
                        added += 1;
                    }
                    continue;
                }
                let tail = hubs[ri][rng.gen_range(0..hubs[ri].len())];
                if push_fact(s, &kb_relations[ri], tail, &mut kb_facts, &mut kb_seen) {
                    added += 1;
                }
            }
        }

        // fill with generic-headed facts, biased toward hub tails; the
        // bridge suffix stays the mark of chain-relevant KB facts
        let mut attempts = 0usize;
        let max_attempts = 200 * spec.kb_triplets + 10_000;
        while kb_facts.len() < spec.kb_triplets {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Generation(format!(
                    "could not place {} distinct KB triplets (got {})",
                    spec.kb_triplets,
                    kb_facts.len()
                )));
            }
            let ri = rng.gen_range(0..spec.kb_relations);
            let head = &kb_generic[rng.gen_range(0..kb_generic.len())];
            let tail = if rng.gen_bool(0.7) {
                hubs[ri][rng.gen_range(0..hubs[ri].len())]
            } else {
                &kb_generic[rng.gen_range(0..kb_generic.len())]
            };
            if reserved_pairs.contains(&(kb_relations[ri].clone(), tail.clone())) {
                continue;
            }
            push_fact(head, &kb_relations[ri], tail, &mut kb_facts, &mut kb_seen);
        }
        // triplet ids must not encode generation structure (ties break by
        // ascending id, so ordered insertion would leak the answer)
        kb_facts.shuffle(&mut rng);
    }
    let kb = KnowledgeGraph::from_surface_triplets(Source::Kb, kb_facts.iter());

    let kb_heads: BTreeSet<&str> = kb_facts.iter().map(|f| f.head.as_str()).collect();
    let bridges: Vec<String> = bridges
        .into_iter()
        .filter(|s| kb_heads.contains(s.as_str()))
        .collect();
    if spec.kb_question_fraction > 0.0 && bridges.is_empty() {
        return Err(Error::Generation(
            "no KB entity is usable as a scene bridge".into(),
        ));
    }

    // --- global scene-fact pool ---
    let pool = build_scene_pool(spec, &bridges, &mut names, &mut rng)?;

    // probe support: every scene must instantiate every template
    let kb_index = PairIndex::from_graph(&kb);
    let mut kb_by_head: HashMap<String, Vec<SurfaceTriplet>> = HashMap::new();
    for f in &kb_facts {
        kb_by_head.entry(f.head.clone()).or_default().push(f.clone());
    }

    // --- scenes ---
    let kb_enabled = spec.kb_question_fraction > 0.0;
    let mut scenes = Vec::with_capacity(spec.n_images);
    let mut captions = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let image_id = format!("img{i:04}");
        let mut accepted: Option<(KnowledgeGraph, Vec<usize>)> = None;
        for _ in 0..80 {
            let mut fact_ids = build_scene(spec, &pool, &mut rng)?;
            // randomize ids: ties break by ascending id, so insertion order
            // must not mark the chain-relevant facts
            fact_ids.shuffle(&mut rng);
            let mut graph = KnowledgeGraph::new(Source::Sg);
            for &fi in &fact_ids {
                let f = &pool.facts[fi];
                graph.insert(&f.head, &f.relation, &f.tail);
            }
            let probe_scene = Scene {
                image_id: image_id.clone(),
                graph,
            };
            if scene_supports_all_templates(&probe_scene, kb_enabled, &kb_index, &kb_by_head)? {
                accepted = Some((probe_scene.graph, fact_ids));
                break;
            }
        }
        let Some((graph, fact_ids)) = accepted else {
            return Err(Error::Generation(format!(
                "could not assemble a scene supporting all question templates for {image_id}"
            )));
        };
        let mut caption_ids: Vec<usize> = (0..fact_ids.len()).collect();
        caption_ids.shuffle(&mut rng);
        caption_ids.truncate(fact_ids.len().div_ceil(2));
        caption_ids.sort_unstable();
        let caption = caption_ids
            .iter()
            .map(|&k| pool.facts[fact_ids[k]].verbalize())
            .collect::<Vec<_>>()
            .join(". ");
        scenes.push(Scene { image_id, graph });
        captions.push(caption);
    }

    Ok(World {
        spec: spec.clone(),
        kb,
        scenes,
        captions,
    })
}

/// A scene is usable when both hop classes and both flavors have enough
/// capacity. Individual templates may be thin in one scene; question
/// generation resamples types against capacity, and coverage of all seven
/// emerges across scenes.
fn scene_supports_all_templates(
    scene: &Scene,
    kb_enabled: bool,
    kb_index: &PairIndex,
    kb_by_head: &HashMap<String, Vec<SurfaceTriplet>>,
) -> Result<bool> {
    let candidates = enumerate_candidates(scene, kb_index, kb_by_head)?;
    let count = |pools: &[Vec<Vec<SurfaceTriplet>>; 7], range: std::ops::RangeInclusive<usize>| {
        range.map(|q| pools[q].len()).sum::<usize>()
    };
    let sg_one = count(&candidates.sg, 0..=2);
    let sg_two = count(&candidates.sg, 3..=6);
    let kb_one = count(&candidates.kb, 0..=2);
    let kb_two = count(&candidates.kb, 3..=6);
    if sg_one < 2 || sg_two < 2 {
        return Ok(false);
    }
    if kb_enabled && (kb_one < 2 || kb_two < 2) {
        return Ok(false);
    }
    Ok(true)
}

fn build_scene_pool(
    spec: &WorldSpec,
    bridges: &[String],
    names: &mut NameGen,
    rng: &mut ChaCha8Rng,
) -> Result<ScenePool> {
    // scene subjects: generic-named entities that root fans and carry chains
    let subjects = names.generic((2 * spec.sg_entities_per_image).max(20), rng)?;
    let dead_ends = names.dead_ends((3 * spec.sg_entities_per_image).max(30), rng)?;
    let n_sg_relations = (spec.sg_entities_per_image + 4).clamp(6, 18);
    let sg_relations = names.generic(n_sg_relations, rng)?;

    let mut facts: Vec<SurfaceTriplet> = Vec::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    let mut families: Vec<Vec<usize>> = Vec::new();
    let mut fans_by_root = BTreeMap::new();
    let mut bridge_fans = Vec::new();
    let mut chain_fans = Vec::new();
    let mut hubs_by_head = BTreeMap::new();

    let add_fact = |h: &str,
                    r: &str,
                    t: &str,
                    facts: &mut Vec<SurfaceTriplet>,
                    seen: &mut HashSet<(String, String, String)>|
     -> Option<usize> {
        if h == t {
            return None;
        }
        let key = (h.to_string(), r.to_string(), t.to_string());
        if !seen.insert(key) {
            return None;
        }
        facts.push(SurfaceTriplet::new(h, r, t));
        Some(facts.len() - 1)
    };

    // out-fan per subject: the chain-capable tail first (a bridge for about
    // half the fans, another subject otherwise), then dead-end tails that
    // tie with it lexically
    for (si, a) in subjects.iter().enumerate() {
        let rel = &sg_relations[rng.gen_range(0..sg_relations.len())];
        let to_bridge = !bridges.is_empty() && (si % 2 == 0 || subjects.len() == 1);
        let chain_tail = if to_bridge {
            bridges[rng.gen_range(0..bridges.len())].clone()
        } else {
            let mut pick = &subjects[rng.gen_range(0..subjects.len())];
            for _ in 0..20 {
                if pick != a {
                    break;
                }
                pick = &subjects[rng.gen_range(0..subjects.len())];
            }
            pick.clone()
        };
        let mut family = Vec::new();
        if chain_tail != *a {
            if let Some(id) = add_fact(a, rel, &chain_tail, &mut facts, &mut seen) {
                family.push(id);
            }
        }
        let n_tails = rng.gen_range(3..=4usize);
        let mut guard = 0;
        while family.len() < n_tails && guard < 200 {
            guard += 1;
            let t = &dead_ends[rng.gen_range(0..dead_ends.len())];
            if let Some(id) = add_fact(a, rel, t, &mut facts, &mut seen) {
                family.push(id);
            }
        }
        if !family.is_empty() {
            let fam_idx = families.len();
            fans_by_root.insert(a.clone(), fam_idx);
            if to_bridge && is_bridge_name(&facts[family[0]].tail) {
                bridge_fans.push(fam_idx);
            } else if !is_dead_end_name(&facts[family[0]].tail) {
                chain_fans.push(fam_idx);
            }
            families.push(family);
        }
    }

    // continuation hub per subject: a singleton-tail fact it heads (so
    // chains through it stay unambiguous), plus dead-end heads as ties
    for h in &subjects {
        let rel = &sg_relations[rng.gen_range(0..sg_relations.len())];
        let target = &dead_ends[rng.gen_range(0..dead_ends.len())];
        let mut family = Vec::new();
        if let Some(id) = add_fact(h, rel, target, &mut facts, &mut seen) {
            family.push(id);
        }
        let n_heads = rng.gen_range(2..=3usize);
        let mut guard = 0;
        while family.len() < n_heads && guard < 200 {
            guard += 1;
            let d = &dead_ends[rng.gen_range(0..dead_ends.len())];
            if d == target {
                continue;
            }
            if let Some(id) = add_fact(d, rel, target, &mut facts, &mut seen) {
                family.push(id);
            }
        }
        if !family.is_empty() {
            hubs_by_head.insert(h.clone(), families.len());
            families.push(family);
        }
    }

    if spec.kb_question_fraction > 0.0 && bridge_fans.is_empty() {
        return Err(Error::Generation(
            "scene pool has no fan pointing at a KB bridge".into(),
        ));
    }

    let mut families_by_entity: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (fi, family) in families.iter().enumerate() {
        let mut ents = BTreeSet::new();
        for &f in family {
            ents.insert(facts[f].head.clone());
            ents.insert(facts[f].tail.clone());
        }
        for e in ents {
            families_by_entity.entry(e).or_default().push(fi);
        }
    }

    Ok(ScenePool {
        facts,
        families,
        families_by_entity,
        fans_by_root,
        bridge_fans,
        chain_fans,
        hubs_by_head,
    })
}

/// Pick the fact set for one scene: a bridge-tailed fan (the KB doorway), a
/// subject-tailed fan plus that subject's continuation hub and fan (scene
/// chains), then adjacent families until the triplet budget is met.
fn build_scene(spec: &WorldSpec, pool: &ScenePool, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let m = spec.sg_triplets_per_image;
    'attempt: for _ in 0..300 {
        let mut chosen_facts: Vec<usize> = Vec::new();
        let mut chosen_set: BTreeSet<usize> = BTreeSet::new();
        let mut chosen_families: BTreeSet<usize> = BTreeSet::new();
        let mut entities: BTreeSet<String> = BTreeSet::new();

        let add_from_family = |fam: usize,
                               cap: usize,
                               chosen_facts: &mut Vec<usize>,
                               chosen_set: &mut BTreeSet<usize>,
                               entities: &mut BTreeSet<String>| {
            for &f in &pool.families[fam] {
                if chosen_facts.len() >= cap {
                    break;
                }
                if chosen_set.insert(f) {
                    chosen_facts.push(f);
                    entities.insert(pool.facts[f].head.clone());
                    entities.insert(pool.facts[f].tail.clone());
                }
            }
        };

        if !pool.bridge_fans.is_empty() {
            let fan = pool.bridge_fans[rng.gen_range(0..pool.bridge_fans.len())];
            chosen_families.insert(fan);
            add_from_family(
                fan,
                (m / 2).max(2),
                &mut chosen_facts,
                &mut chosen_set,
                &mut entities,
            );
        }
        if !pool.chain_fans.is_empty() {
            let fan = pool.chain_fans[rng.gen_range(0..pool.chain_fans.len())];
            if chosen_families.insert(fan) {
                add_from_family(
                    fan,
                    m.saturating_sub(2).max(2),
                    &mut chosen_facts,
                    &mut chosen_set,
                    &mut entities,
                );
                // the middle subject's continuation hub and fan keep scene
                // chains alive and unambiguous
                let middle = pool.families[fan]
                    .first()
                    .map(|&f| pool.facts[f].tail.clone());
                if let Some(middle) = middle {
                    if let Some(&hub) = pool.hubs_by_head.get(&middle) {
                        if chosen_families.insert(hub) {
                            add_from_family(
                                hub,
                                m,
                                &mut chosen_facts,
                                &mut chosen_set,
                                &mut entities,
                            );
                        }
                    }
                    if let Some(&mid_fan) = pool.fans_by_root.get(&middle) {
                        if chosen_families.insert(mid_fan) {
                            add_from_family(
                                mid_fan,
                                m,
                                &mut chosen_facts,
                                &mut chosen_set,
                                &mut entities,
                            );
                        }
                    }
                }
            }
        }

        // grow with families adjacent to the current entity set
        let mut stall = 0;
        while chosen_facts.len() < m && stall < 50 {
            let mut candidates: Vec<usize> = Vec::new();
            for e in &entities {
                if let Some(fams) = pool.families_by_entity.get(e) {
                    for &fi in fams {
                        if !chosen_families.contains(&fi) {
                            candidates.push(fi);
                        }
                    }
                }
            }
            candidates.sort_unstable();
            candidates.dedup();
            let pick = if candidates.is_empty() || rng.gen_bool(0.15) {
                rng.gen_range(0..pool.families.len())
            } else {
                candidates[rng.gen_range(0..candidates.len())]
            };
            if !chosen_families.insert(pick) {
                stall += 1;
                continue;
            }
            // respect the entity budget softly: skip families that would
            // blow well past it while alternatives remain
            let mut new_ents = BTreeSet::new();
            for &f in &pool.families[pick] {
                new_ents.insert(pool.facts[f].head.clone());
                new_ents.insert(pool.facts[f].tail.clone());
            }
            let fresh = new_ents.difference(&entities).count();
            if entities.len() + fresh > spec.sg_entities_per_image + 2 && stall < 25 {
                stall += 1;
                chosen_families.remove(&pick);
                continue;
            }
            add_from_family(pick, m, &mut chosen_facts, &mut chosen_set, &mut entities);
        }

        if chosen_facts.len() == m {
            return Ok(chosen_facts);
        }
        continue 'attempt;
    }
    Err(Error::Generation(
        "could not assemble a scene within the entity and triplet budget".into(),
    ))
}

// ---------------------------------------------------------------------------
// question generation
// ---------------------------------------------------------------------------

/// Surface-keyed lookup index for ambiguity checks.
#[derive(Default)]
struct PairIndex {
    tails: HashMap<(String, String), BTreeSet<String>>,
    heads: HashMap<(String, String), BTreeSet<String>>,
    rels: HashMap<(String, String), BTreeSet<String>>,
}

impl PairIndex {
    fn from_graph(g: &KnowledgeGraph) -> Self {
        let mut idx = PairIndex::default();
        for id in 0..g.len() {
            let f = g.surface(id).expect("own ids");
            idx.tails
                .entry((f.head.clone(), f.relation.clone()))
                .or_default()
                .insert(f.tail.clone());
            idx.heads
                .entry((f.relation.clone(), f.tail.clone()))
                .or_default()
                .insert(f.head.clone());
            idx.rels
                .entry((f.head.clone(), f.tail.clone()))
                .or_default()
                .insert(f.relation.clone());
        }
        idx
    }
}

/// Union view over the KB index and one scene index.
struct Scope<'a> {
    kb: &'a PairIndex,
    sg: &'a PairIndex,
}

impl Scope<'_> {
    fn union(a: Option<&BTreeSet<String>>, b: Option<&BTreeSet<String>>) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if let Some(s) = a {
            out.extend(s.iter().cloned());
        }
        if let Some(s) = b {
            out.extend(s.iter().cloned());
        }
        out
    }

    fn tails(&self, head: &str, rel: &str) -> BTreeSet<String> {
        let key = (head.to_string(), rel.to_string());
        Self::union(self.kb.tails.get(&key), self.sg.tails.get(&key))
    }

    fn heads(&self, rel: &str, tail: &str) -> BTreeSet<String> {
        let key = (rel.to_string(), tail.to_string());
        Self::union(self.kb.heads.get(&key), self.sg.heads.get(&key))
    }

    fn rels(&self, head: &str, tail: &str) -> BTreeSet<String> {
        let key = (head.to_string(), tail.to_string());
        Self::union(self.kb.rels.get(&key), self.sg.rels.get(&key))
    }

    /// The set of valid answers for a template instantiation; the candidate
    /// survives only when this is a singleton.
    fn answers(&self, qtype: u8, chain: &[SurfaceTriplet]) -> BTreeSet<String> {
        match qtype {
            0 => self.rels(&chain[0].head, &chain[0].tail),
            1 => self.tails(&chain[0].head, &chain[0].relation),
            2 => self.heads(&chain[0].relation, &chain[0].tail),
            3 => {
                // answer R2 given (A, R1, C)
                let (a, c) = (&chain[0], &chain[1]);
                let mut out = BTreeSet::new();
                for b in self.tails(&a.head, &a.relation) {
                    out.extend(self.rels(&b, &c.tail));
                }
                out
            }
            4 => {
                // answer R1 given (A, R2, C)
                let (a, c) = (&chain[0], &chain[1]);
                let mut out = BTreeSet::new();
                for b in self.heads(&c.relation, &c.tail) {
                    out.extend(self.rels(&a.head, &b));
                }
                out
            }
            5 => {
                // answer C given (A, R1, R2)
                let (a, c) = (&chain[0], &chain[1]);
                let mut out = BTreeSet::new();
                for b in self.tails(&a.head, &a.relation) {
                    out.extend(self.tails(&b, &c.relation));
                }
                out
            }
            6 => {
                // answer A given (R1, R2, C)
                let (a, c) = (&chain[0], &chain[1]);
                let mut out = BTreeSet::new();
                for b in self.heads(&c.relation, &c.tail) {
                    out.extend(self.heads(&a.relation, &b));
                }
                out
            }
            _ => BTreeSet::new(),
        }
    }
}

struct SceneView {
    facts: Vec<SurfaceTriplet>,
    index: PairIndex,
    /// (first, second) fact index pairs forming scene-internal chains whose
    /// first hop is a fan fact (its (head, relation) has at least two
    /// in-scene tails, so the question's exposed tokens tie across
    /// siblings) and which share no entity beyond the bridge
    chains: Vec<(usize, usize)>,
    /// fan facts whose tail heads KB facts
    bridge_facts: Vec<usize>,
    /// scene entities that head KB facts
    kb_anchors: Vec<String>,
}

fn scene_view(
    scene: &Scene,
    kb_by_head: &HashMap<String, Vec<SurfaceTriplet>>,
) -> Result<SceneView> {
    let facts: Vec<SurfaceTriplet> = (0..scene.graph.len())
        .map(|id| scene.graph.surface(id))
        .collect::<Result<_>>()?;
    let index = PairIndex::from_graph(&scene.graph);
    let fan_facts: Vec<usize> = facts
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            index
                .tails
                .get(&(f.head.clone(), f.relation.clone()))
                .map(|t| t.len() >= 2)
                .unwrap_or(false)
        })
        .map(|(i, _)| i)
        .collect();
    let mut chains = Vec::new();
    for &i in &fan_facts {
        let a = &facts[i];
        for (j, b) in facts.iter().enumerate() {
            if i != j && a.tail == b.head && b.tail != a.head {
                chains.push((i, j));
            }
        }
    }
    let bridge_facts: Vec<usize> = fan_facts
        .iter()
        .copied()
        .filter(|&i| kb_by_head.contains_key(&facts[i].tail))
        .collect();
    let mut kb_anchors: BTreeSet<String> = BTreeSet::new();
    for f in &facts {
        for e in [&f.head, &f.tail] {
            if kb_by_head.contains_key(e) {
                kb_anchors.insert(e.clone());
            }
        }
    }
    Ok(SceneView {
        facts,
        index,
        chains,
        bridge_facts,
        kb_anchors: kb_anchors.into_iter().collect(),
    })
}

/// Per-template unambiguous instantiations for one scene, split by KB
/// involvement. Chains are in `(first hop, second hop)` order.
struct CandidateSet {
    sg: [Vec<Vec<SurfaceTriplet>>; 7],
    kb: [Vec<Vec<SurfaceTriplet>>; 7],
}

/// Each reason (fact or chain) is asked about in exactly one way across
/// the whole world: its question type is a stable hash of its surface
/// form. Reused chains would otherwise demand different answers for the
/// same supporting facts, which no classifier over those facts can give.
fn qtype_for(chain: &[SurfaceTriplet]) -> usize {
    let text: String = chain
        .iter()
        .map(|t| t.verbalize())
        .collect::<Vec<_>>()
        .join("|");
    let h = crate::fnv1a64(text.as_bytes(), 0x71_7479) as usize;
    if chain.len() == 1 {
        h % 3
    } else {
        3 + (h % 4)
    }
}

fn enumerate_candidates(
    scene: &Scene,
    kb_index: &PairIndex,
    kb_by_head: &HashMap<String, Vec<SurfaceTriplet>>,
) -> Result<CandidateSet> {
    let view = scene_view(scene, kb_by_head)?;
    let scope = Scope {
        kb: kb_index,
        sg: &view.index,
    };
    let mut out = CandidateSet {
        sg: Default::default(),
        kb: Default::default(),
    };
    // distinct chains can render the same question (same slots, same
    // unique answer via different bridges); keep the first
    let mut seen_questions: BTreeSet<String> = BTreeSet::new();
    let mut push = |chain: Vec<SurfaceTriplet>, kb_flavor: bool| {
        let qtype = qtype_for(&chain);
        if scope.answers(qtype as u8, &chain).len() != 1 {
            return;
        }
        let Ok((question, _)) = render_template(qtype as u8, &chain) else {
            return;
        };
        if !seen_questions.insert(question) {
            return;
        }
        if kb_flavor {
            out.kb[qtype].push(chain);
        } else {
            out.sg[qtype].push(chain);
        }
    };

    // one-hop: any scene fact, and KB facts headed by a visible entity
    for fact in &view.facts {
        push(vec![fact.clone()], false);
    }
    for anchor in &view.kb_anchors {
        if let Some(facts) = kb_by_head.get(anchor) {
            for fact in facts {
                push(vec![fact.clone()], true);
            }
        }
    }

    // two-hop: scene-internal chains, and scene-fact-then-KB-fact chains
    for &(i, j) in &view.chains {
        push(vec![view.facts[i].clone(), view.facts[j].clone()], false);
    }
    for &fi in &view.bridge_facts {
        let first = &view.facts[fi];
        if let Some(kb_facts) = kb_by_head.get(&first.tail) {
            for second in kb_facts {
                // the chain must share exactly one entity, the bridge
                if second.tail == first.head {
                    continue;
                }
                push(vec![first.clone(), second.clone()], true);
            }
        }
    }
    Ok(out)
}

/// Generate `per_image` records for every scene, sampling question types
/// from `qtype_mix` and KB involvement from the world's
/// `kb_question_fraction`. Candidates are drawn from the enumerated set of
/// unambiguous instantiations, so a duplicate question is never emitted.
pub fn generate_questions(
    world: &World,
    per_image: usize,
    qtype_mix: &[f64; 7],
    seed: u64,
) -> Result<Vec<QARecord>> {
    if qtype_mix.iter().any(|w| *w < 0.0) || qtype_mix.iter().all(|w| *w == 0.0) {
        return Err(Error::Generation(
            "qtype mix must be nonnegative and not all zero".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kb_index = PairIndex::from_graph(&world.kb);

    // KB lookup by head, at the surface level
    let mut kb_by_head: HashMap<String, Vec<SurfaceTriplet>> = HashMap::new();
    for id in 0..world.kb.len() {
        let f = world.kb.surface(id)?;
        kb_by_head.entry(f.head.clone()).or_default().push(f);
    }

    let cumulative: Vec<f64> = {
        let total: f64 = qtype_mix.iter().sum();
        let mut acc = 0.0;
        qtype_mix
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect()
    };
    let sample_qtype = |rng: &mut ChaCha8Rng| -> u8 {
        let x: f64 = rng.gen();
        cumulative.iter().position(|c| x <= *c).unwrap_or(6) as u8
    };

    let mut records = Vec::with_capacity(world.scenes.len() * per_image);
    let mut next_id = 0usize;

    for (scene, caption) in world.scenes.iter().zip(&world.captions) {
        let mut candidates = enumerate_candidates(scene, &kb_index, &kb_by_head)?;

        for _ in 0..per_image {
            // resample the type (bounded) when a scene exhausts one type's
            // distinct instantiations; the KB flavor is held as drawn so
            // the realized KB fraction tracks the configured one
            let mut picked: Option<(usize, Vec<SurfaceTriplet>, bool)> = None;
            let mut last_qtype = 0usize;
            for _ in 0..400 {
                let qtype = sample_qtype(&mut rng) as usize;
                last_qtype = qtype;
                let kb_allowed = world.spec.kb_question_fraction > 0.0;
                let kb_flavor = kb_allowed && rng.gen_bool(world.spec.kb_question_fraction);
                let pool = if kb_flavor {
                    &mut candidates.kb[qtype]
                } else {
                    &mut candidates.sg[qtype]
                };
                if !pool.is_empty() {
                    let idx = rng.gen_range(0..pool.len());
                    picked = Some((qtype, pool.swap_remove(idx), kb_flavor));
                    break;
                }
            }
            if picked.is_none() {
                // capacity fallback: take anything that is left
                'fallback: for kb_flavor in [false, true] {
                    for qtype in 0..7usize {
                        let pool = if kb_flavor {
                            &mut candidates.kb[qtype]
                        } else {
                            &mut candidates.sg[qtype]
                        };
                        if !pool.is_empty() {
                            let idx = rng.gen_range(0..pool.len());
                            picked = Some((qtype, pool.swap_remove(idx), kb_flavor));
                            break 'fallback;
                        }
                    }
                }
            }
            let Some((qtype, chain, kb_flavor)) = picked else {
                return Err(Error::Generation(format!(
                    "scene {} ran out of distinct instantiations for question type {last_qtype}",
                    scene.image_id
                )));
            };
            let (question, answer) = render_template(qtype as u8, &chain)?;
            let (reason_sg, reason_kb) = match (kb_flavor, chain.len()) {
                (false, _) => (chain.clone(), vec![]),
                (true, 1) => (vec![], chain.clone()),
                (true, _) => (vec![chain[0].clone()], vec![chain[1].clone()]),
            };
            records.push(QARecord {
                id: format!("q{next_id:06}"),
                image_id: scene.image_id.clone(),
                question,
                answer,
                qtype: qtype as u8,
                hops: hops_for_qtype(qtype as u8),
                kb_related: !reason_kb.is_empty(),
                caption: caption.clone(),
                reason_sg,
                reason_kb,
            });
            next_id += 1;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_record;

    fn small_spec() -> WorldSpec {
        WorldSpec {
            seed: 7,
            n_images: 10,
            sg_entities_per_image: 8,
            sg_triplets_per_image: 8,
            kb_entities: 60,
            kb_relations: 8,
            kb_triplets: 300,
            kb_question_fraction: 0.5,
        }
    }

    fn world_fingerprint(w: &World) -> String {
        let mut out = String::new();
        for id in 0..w.kb.len() {
            out.push_str(&w.kb.verbalize(id).unwrap());
            out.push('\n');
        }
        for (scene, cap) in w.scenes.iter().zip(&w.captions) {
            out.push_str(&scene.image_id);
            out.push('|');
            for id in 0..scene.graph.len() {
                out.push_str(&scene.graph.verbalize(id).unwrap());
                out.push(';');
            }
            out.push_str(cap);
            out.push('\n');
        }
        out
    }

    #[test]
    fn world_generation_deterministic() {
        let spec = small_spec();
        let w1 = generate_world(&spec).unwrap();
        let w2 = generate_world(&spec).unwrap();
        assert_eq!(world_fingerprint(&w1), world_fingerprint(&w2));
    }

    #[test]
    fn world_scene_counts_match_spec() {
        let spec = small_spec();
        let w = generate_world(&spec).unwrap();
        assert_eq!(w.scenes.len(), 10);
        for scene in &w.scenes {
            assert_eq!(scene.graph.len(), 8, "scene {}", scene.image_id);
        }
        assert_eq!(w.kb.len(), 300);
    }

    #[test]
    fn infeasible_spec_errors() {
        let spec = WorldSpec {
            kb_triplets: 0,
            kb_question_fraction: 0.5,
            ..small_spec()
        };
        assert!(matches!(generate_world(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn world_without_kb_questions_is_feasible() {
        let spec = WorldSpec {
            kb_question_fraction: 0.0,
            ..small_spec()
        };
        let world = generate_world(&spec).unwrap();
        let records = generate_questions(&world, 4, &[1.0; 7], 3).unwrap();
        assert!(records.iter().all(|r| !r.kb_related));
    }

    #[test]
    fn questions_validate_and_invert() {
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        let records = generate_questions(&world, 6, &[1.0; 7], 99).unwrap();
        assert_eq!(records.len(), 60);
        for r in &records {
            validate_record(r).unwrap();
        }
    }

    #[test]
    fn questions_are_distinct_per_image() {
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        let records = generate_questions(&world, 8, &[1.0; 7], 31).unwrap();
        let mut seen = BTreeSet::new();
        for r in &records {
            assert!(
                seen.insert((r.image_id.clone(), r.question.clone())),
                "duplicate question {} for {}",
                r.question,
                r.image_id
            );
        }
    }

    #[test]
    fn question_generation_deterministic() {
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        let a = generate_questions(&world, 4, &[1.0; 7], 5).unwrap();
        let b = generate_questions(&world, 4, &[1.0; 7], 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_hop_reasons_share_bridge() {
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        let records =
            generate_questions(&world, 6, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0], 3).unwrap();
        for r in &records {
            let chain = crate::dataset::resolve_chain(r).unwrap();
            assert_eq!(chain.len(), 2);
            assert_eq!(chain[0].tail, chain[1].head);
            // the two reason triplets share exactly one entity: the bridge
            let first: BTreeSet<&String> = BTreeSet::from([&chain[0].head, &chain[0].tail]);
            let second: BTreeSet<&String> = BTreeSet::from([&chain[1].head, &chain[1].tail]);
            let shared: Vec<_> = first.intersection(&second).collect();
            assert_eq!(shared, vec![&&chain[0].tail], "{chain:?}");
        }
    }

    #[test]
    fn kb_reasons_are_bridge_headed() {
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        let records = generate_questions(&world, 6, &[1.0; 7], 13).unwrap();
        for r in &records {
            for t in &r.reason_kb {
                assert!(
                    is_bridge_name(&t.head),
                    "record {}: KB reason head {} is not bridge-class",
                    r.id,
                    t.head
                );
            }
        }
    }

    #[test]
    fn two_hop_first_hops_have_in_scene_ties() {
        // a frozen lexical matcher must face at least one sibling sharing
        // the first hop's (head, relation)
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        let records =
            generate_questions(&world, 6, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0], 19).unwrap();
        for r in &records {
            let chain = crate::dataset::resolve_chain(r).unwrap();
            let scene = world.scene_for(&r.image_id).unwrap();
            let siblings = (0..scene.graph.len())
                .map(|i| scene.graph.surface(i).unwrap())
                .filter(|f| f.head == chain[0].head && f.relation == chain[0].relation)
                .count();
            assert!(
                siblings >= 2,
                "record {}: first hop {:?} has no tie sibling",
                r.id,
                chain[0]
            );
        }
    }

    #[test]
    fn fan_families_mix_classes() {
        // fans must contain both a chain-capable tail and dead-end tails so
        // the lexical baseline ties while the class signal separates them
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        let mut fan_with_both = 0;
        for scene in &world.scenes {
            let mut by_head_rel: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
            for id in 0..scene.graph.len() {
                let f = scene.graph.surface(id).unwrap();
                by_head_rel
                    .entry((f.head.clone(), f.relation.clone()))
                    .or_default()
                    .push(f.tail.clone());
            }
            for tails in by_head_rel.values() {
                if tails.len() >= 2 {
                    let dead = tails.iter().filter(|t| is_dead_end_name(t)).count();
                    if dead >= 1 && dead < tails.len() {
                        fan_with_both += 1;
                    }
                }
            }
        }
        assert!(
            fan_with_both >= world.scenes.len(),
            "expected class-mixed fans, found {fan_with_both}"
        );
    }

    #[test]
    fn kb_fraction_within_five_points() {
        let spec = WorldSpec {
            n_images: 60,
            kb_question_fraction: 0.6,
            ..small_spec()
        };
        let world = generate_world(&spec).unwrap();
        let records = generate_questions(&world, 10, &[1.0; 7], 11).unwrap();
        let kb_frac = records.iter().filter(|r| r.kb_related).count() as f64 / records.len() as f64;
        assert!(
            (kb_frac - 0.6).abs() <= 0.05,
            "kb fraction {kb_frac} drifted from 0.6"
        );
    }

    #[test]
    fn kb_reasons_exist_in_kb_and_sg_reasons_in_scene() {
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        let records = generate_questions(&world, 5, &[1.0; 7], 21).unwrap();
        for r in &records {
            let scene = world.scene_for(&r.image_id).unwrap();
            for t in &r.reason_sg {
                assert!(scene.graph.find_triplet(t).is_some(), "{t:?} not in scene");
            }
            for t in &r.reason_kb {
                assert!(world.kb.find_triplet(t).is_some(), "{t:?} not in KB");
            }
        }
    }

    #[test]
    fn captions_mention_only_scene_entities() {
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        for (scene, caption) in world.scenes.iter().zip(&world.captions) {
            let scene_tokens: BTreeSet<String> = (0..scene.graph.len())
                .flat_map(|id| crate::text::tokenize(&scene.graph.verbalize(id).unwrap()))
                .collect();
            for tok in crate::text::tokenize(caption) {
                assert!(
                    scene_tokens.contains(&tok),
                    "caption token {tok} not from scene {}",
                    scene.image_id
                );
            }
        }
    }

    #[test]
    fn answers_unique_in_scope() {
        // re-derive the answer set independently for a sample of records:
        // enumerate all facts (scene + KB) and count valid instantiations
        let spec = small_spec();
        let world = generate_world(&spec).unwrap();
        let records = generate_questions(&world, 4, &[1.0; 7], 17).unwrap();
        for r in records.iter().take(60) {
            let scene = world.scene_for(&r.image_id).unwrap();
            let mut all_facts: Vec<SurfaceTriplet> = (0..scene.graph.len())
                .map(|i| scene.graph.surface(i).unwrap())
                .collect();
            all_facts.extend((0..world.kb.len()).map(|i| world.kb.surface(i).unwrap()));
            let chain = crate::dataset::resolve_chain(r).unwrap();
            let mut answers = BTreeSet::new();
            if r.hops == 1 {
                for f in &all_facts {
                    match r.qtype {
                        0 if f.head == chain[0].head && f.tail == chain[0].tail => {
                            answers.insert(f.relation.clone());
                        }
                        1 if f.head == chain[0].head && f.relation == chain[0].relation => {
                            answers.insert(f.tail.clone());
                        }
                        2 if f.relation == chain[0].relation && f.tail == chain[0].tail => {
                            answers.insert(f.head.clone());
                        }
                        _ => {}
                    }
                }
            } else {
                for f1 in &all_facts {
                    for f2 in &all_facts {
                        if f1.tail != f2.head {
                            continue;
                        }
                        match r.qtype {
                            3 if f1.head == chain[0].head
                                && f1.relation == chain[0].relation
                                && f2.tail == chain[1].tail =>
                            {
                                answers.insert(f2.relation.clone());
                            }
                            4 if f1.head == chain[0].head
                                && f2.relation == chain[1].relation
                                && f2.tail == chain[1].tail =>
                            {
                                answers.insert(f1.relation.clone());
                            }
                            5 if f1.head == chain[0].head
                                && f1.relation == chain[0].relation
                                && f2.relation == chain[1].relation =>
                            {
                                answers.insert(f2.tail.clone());
                            }
                            6 if f1.relation == chain[0].relation
                                && f2.relation == chain[1].relation
                                && f2.tail == chain[1].tail =>
                            {
                                answers.insert(f1.head.clone());
                            }
                            _ => {}
                        }
                    }
                }
            }
            assert_eq!(
                answers,
                BTreeSet::from([r.answer.clone()]),
                "record {} ({}) admits extra answers",
                r.id,
                r.question
            );
        }
    }
}
