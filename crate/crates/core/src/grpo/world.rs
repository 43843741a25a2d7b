//! Deterministic synthetic corpus of "entity attribute value" fact pages.
//!
//! Each page belongs to one entity and carries three stacked regions, one
//! fact per region. Every entity owns two pages with disjoint attributes, so
//! searching by entity alone returns a near-tie between the golden page and
//! its sibling. Pages are virtual: crops compute sizes only.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{EnvError, Environment, SessionConfig};
use crate::perception::LayoutProvider;
use crate::retrieval::{search, Corpus, ManifestRow, TfIndex, DEFAULT_DIMS};
use crate::types::{BBox, PageImage, Query};

pub const ATTRIBUTES: [&str; 8] = [
    "revenue",
    "height",
    "founded",
    "capacity",
    "population",
    "budget",
    "length",
    "weight",
];

pub const PAGE_WIDTH: u32 = 1000;
pub const PAGE_HEIGHT: u32 = 1400;
pub const REGIONS_PER_PAGE: usize = 3;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bbox: BBox,
    pub entity: String,
    pub attribute: String,
    pub value: String,
    pub text: String,
}

/// Per-query facts the toy agent uses to phrase searches and read pages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFacts {
    pub entity: String,
    pub attribute: String,
}

#[derive(Debug, Clone)]
pub struct MicroWorld {
    pub seed: u64,
    pub corpus: Arc<Corpus>,
    pub queries: Vec<Query>,
    pub facts: BTreeMap<String, QueryFacts>,
    pub regions: Arc<BTreeMap<String, Vec<Region>>>,
}

#[derive(Debug, Clone)]
struct RegionLayout(Arc<BTreeMap<String, Vec<Region>>>);

impl LayoutProvider for RegionLayout {
    fn propose(&self, page: &PageImage) -> Vec<BBox> {
        self.0
            .get(&page.doc_id)
            .map(|rs| rs.iter().map(|r| r.bbox).collect())
            .unwrap_or_default()
    }
}

impl MicroWorld {
    pub fn layout(&self) -> Arc<dyn LayoutProvider> {
        Arc::new(RegionLayout(self.regions.clone()))
    }

    /// Environment over this world with the hashed index and region proposals.
    pub fn environment(&self, cfg: SessionConfig) -> Result<Environment, EnvError> {
        let index = TfIndex::build(&self.corpus, DEFAULT_DIMS).expect("default dims are valid");
        Ok(Environment::new(self.corpus.clone(), Arc::new(index), cfg)?.with_layout(self.layout()))
    }

    pub fn regions_of(&self, doc_id: &str) -> &[Region] {
        self.regions.get(doc_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The value a reader finds for `attribute` on `doc_id`, if any.
    pub fn read(&self, doc_id: &str, attribute: &str) -> Option<&str> {
        self.regions_of(doc_id)
            .iter()
            .find(|r| r.attribute == attribute)
            .map(|r| r.value.as_str())
    }

    pub fn query(&self, id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.id == id)
    }

    /// Writes `corpus.jsonl` and `queries.jsonl` into `dir`.
    pub fn write_manifests(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut corpus = std::io::BufWriter::new(std::fs::File::create(dir.join("corpus.jsonl"))?);
        for p in self.corpus.pages() {
            let row = ManifestRow {
                doc_id: p.doc_id.clone(),
                image_path: None,
                width: p.width,
                height: p.height,
                text_proxy: p.text_proxy.clone(),
            };
            serde_json::to_writer(&mut corpus, &row)?;
            corpus.write_all(b"\n")?;
        }
        corpus.flush()?;
        let mut queries =
            std::io::BufWriter::new(std::fs::File::create(dir.join("queries.jsonl"))?);
        for q in &self.queries {
            serde_json::to_writer(&mut queries, q)?;
            queries.write_all(b"\n")?;
        }
        queries.flush()
    }
}

fn word(rng: &mut ChaCha8Rng, seen: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
        }
        if seen.insert(w.clone()) {
            return w;
        }
    }
}

fn region_box(r: usize) -> BBox {
    let top = 100 + 420 * r as i64;
    BBox::new(60, top, 940, top + 360).expect("region boxes are well formed")
}

/// Builds a world of `n_docs` pages (at least 5) and up to `n_queries`
/// queries. Queries are drawn without replacement from the facts, so the
/// count is capped at three per page.
pub fn generate_micro_world(seed: u64, n_docs: usize, n_queries: usize) -> MicroWorld {
    let n_docs = n_docs.max(5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let n_entities = n_docs.div_ceil(2);
    let entities: Vec<String> = (0..n_entities).map(|_| word(&mut rng, &mut seen)).collect();
    let fillers: Vec<String> = (0..40).map(|_| word(&mut rng, &mut seen)).collect();

    let mut pages = Vec::with_capacity(n_docs);
    let mut regions = BTreeMap::new();
    let mut attr_order: Vec<&str> = ATTRIBUTES.to_vec();
    for i in 0..n_docs {
        let entity = &entities[i / 2];
        if i % 2 == 0 {
            attr_order.shuffle(&mut rng);
        }
        // sibling pages take disjoint attribute triples
        let attrs = if i % 2 == 0 {
            &attr_order[0..3]
        } else {
            &attr_order[3..6]
        };
        let doc_id = format!("doc{i:03}");
        let mut page_regions = Vec::with_capacity(REGIONS_PER_PAGE);
        for (r, attr) in attrs.iter().enumerate() {
            let value = format!("{}{}", word(&mut rng, &mut seen), rng.random_range(10..100));
            let mut text = format!("{entity} {attr} {value}");
            for _ in 0..rng.random_range(2..=5) {
                text.push(' ');
                text.push_str(&fillers[rng.random_range(0..fillers.len())]);
            }
            page_regions.push(Region {
                bbox: region_box(r),
                entity: entity.clone(),
                attribute: attr.to_string(),
                value,
                text,
            });
        }
        let proxy: Vec<&str> = page_regions.iter().map(|r| r.text.as_str()).collect();
        pages.push(
            PageImage::new(doc_id.clone(), PAGE_WIDTH, PAGE_HEIGHT, proxy.join(" "))
                .expect("page dimensions are positive"),
        );
        regions.insert(doc_id, page_regions);
    }
    let corpus = Corpus::new(pages).expect("generated ids are unique");
    let index = TfIndex::build(&corpus, DEFAULT_DIMS).expect("default dims are valid");

    let mut slots: Vec<(String, usize)> = regions
        .iter()
        .flat_map(|(d, rs)| (0..rs.len()).map(move |r| (d.clone(), r)))
        .collect();
    slots.shuffle(&mut rng);

    let mut queries = Vec::new();
    let mut facts = BTreeMap::new();
    for (doc_id, r) in slots {
        if queries.len() == n_queries {
            break;
        }
        let region = &regions[&doc_id][r];
        let text = format!("what is the {} of {}", region.attribute, region.entity);
        // keep only facts a direct question can reach within the default k
        let found = search(&index, &corpus, &text, crate::retrieval::DEFAULT_K, 0)
            .map(|set| set.doc_ids().any(|d| d == doc_id))
            .unwrap_or(false);
        if !found {
            continue;
        }
        let id = format!("q{:03}", queries.len());
        facts.insert(
            id.clone(),
            QueryFacts {
                entity: region.entity.clone(),
                attribute: region.attribute.clone(),
            },
        );
        queries.push(Query {
            id,
            text,
            reference_answer: region.value.clone(),
            golden_doc_ids: BTreeSet::from([doc_id.clone()]),
            golden_boxes: BTreeMap::from([(doc_id, vec![region.bbox])]),
        });
    }

    MicroWorld {
        seed,
        corpus: Arc::new(corpus),
        queries,
        facts,
        regions: Arc::new(regions),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_micro_world(3, 12, 6);
        let b = generate_micro_world(3, 12, 6);
        assert_eq!(a.corpus.pages(), b.corpus.pages());
        assert_eq!(a.queries, b.queries);
        let c = generate_micro_world(4, 12, 6);
        assert_ne!(a.corpus.pages(), c.corpus.pages());
    }

    #[test]
    fn answers_are_unique_and_boxed() {
        for seed in 0..20 {
            let w = generate_micro_world(seed, 20, 10);
            assert_eq!(w.queries.len(), 10);
            for q in &w.queries {
                let holders: Vec<&str> = w
                    .corpus
                    .pages()
                    .iter()
                    .filter(|p| p.text_proxy.split(' ').any(|t| t == q.reference_answer))
                    .map(|p| p.doc_id.as_str())
                    .collect();
                assert_eq!(holders.len(), 1);
                assert!(q.golden_doc_ids.contains(holders[0]));
                let inside: Vec<&Region> = w
                    .regions_of(holders[0])
                    .iter()
                    .filter(|r| r.text.split(' ').any(|t| t == q.reference_answer))
                    .collect();
                assert_eq!(inside.len(), 1);
                assert_eq!(q.golden_boxes[holders[0]], vec![inside[0].bbox]);
            }
        }
    }

    #[test]
    fn query_count_is_capped_by_facts() {
        let w = generate_micro_world(1, 5, 100);
        assert!(w.queries.len() <= 15);
        assert!(!w.queries.is_empty());
    }
}
