//! Synthetic entity-relation world: a fact graph rendered one document per
//! fact, 1-hop and 2-hop questions with gold decompositions, and a
//! rule-based explicit teacher that produces correct trajectories for
//! distillation.
//!
//! The world is split into two parallel pools with no cross edges, so train
//! and test questions never share an answer entity and held-out evaluation
//! measures copying, not memorization.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::em_score;
use crate::retrieval::{retrieve, CorpusIndex, Document, RetrievedDoc};

/// Thought-template words that never appear in documents or questions.
const TEMPLATE_WORDS: [&str; 13] = [
    "i", "need", "to", "find", "will", "search", "for", "it", "found", "that", "now", "can",
    "answer",
];

const NAME_CONSONANTS: [char; 14] =
    ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const NAME_VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
const NAME_SYLLABLES: usize = 3;

// ── fact graph ─────────────────────────────────────────────────────────────

/// Relation kinds; each instance renders as exactly one document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "born-in")]
    BornIn,
    #[serde(rename = "father-of")]
    FatherOf,
    #[serde(rename = "located-in")]
    LocatedIn,
}

impl Relation {
    /// The noun phrase used in document and subquery templates.
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::BornIn => "birth place",
            Relation::FatherOf => "father",
            Relation::LocatedIn => "country",
        }
    }
}

/// One `(subject, relation, object)` triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub relation: Relation,
    pub subject: String,
    pub object: String,
}

impl Fact {
    /// Stable document id for the rendered fact.
    pub fn doc_id(&self) -> String {
        let tag = match self.relation {
            Relation::BornIn => "born",
            Relation::FatherOf => "father",
            Relation::LocatedIn => "loc",
        };
        format!("{tag}-{}", self.subject)
    }

    /// The one-sentence document text: `the <phrase> of <subject> is
    /// <object> .`
    pub fn sentence(&self) -> String {
        format!("the {} of {} is {} .", self.relation.phrase(), self.subject, self.object)
    }

    pub fn render(&self) -> Document {
        Document { id: self.doc_id(), title: self.subject.clone(), text: self.sentence() }
    }
}

/// All entities and facts, with lookup maps for the generators.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FactGraph {
    pub facts: Vec<Fact>,
    father_of: BTreeMap<String, String>,
    born_in: BTreeMap<String, String>,
    located_in: BTreeMap<String, String>,
}

impl FactGraph {
    fn add(&mut self, relation: Relation, subject: &str, object: &str) {
        let map = match relation {
            Relation::BornIn => &mut self.born_in,
            Relation::FatherOf => &mut self.father_of,
            Relation::LocatedIn => &mut self.located_in,
        };
        map.insert(subject.to_string(), object.to_string());
        self.facts.push(Fact {
            relation,
            subject: subject.to_string(),
            object: object.to_string(),
        });
    }

    pub fn father_of(&self, person: &str) -> Option<&str> {
        self.father_of.get(person).map(String::as_str)
    }

    pub fn born_in(&self, entity: &str) -> Option<&str> {
        self.born_in.get(entity).map(String::as_str)
    }

    pub fn located_in(&self, city: &str) -> Option<&str> {
        self.located_in.get(city).map(String::as_str)
    }
}

// ── questions ──────────────────────────────────────────────────────────────

/// One hop of a gold decomposition: the subquery to issue and the document
/// that answers it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldHop {
    pub subquery: String,
    pub support_doc_id: String,
}

/// A question with gold answers and its gold decomposition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub hops: usize,
    pub decomposition: Vec<GoldHop>,
}

impl QAItem {
    /// The question without its interrogative frame: `what is X ?` → `X`.
    pub fn core(&self) -> &str {
        self.question
            .strip_prefix("what is ")
            .and_then(|rest| rest.strip_suffix(" ?"))
            .unwrap_or(&self.question)
    }
}

// ── generation ─────────────────────────────────────────────────────────────

/// Entity pool sizes for the two disjoint splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSizes {
    pub persons_train: usize,
    pub persons_test: usize,
    pub fathers_train: usize,
    pub fathers_test: usize,
    pub cities_train: usize,
    pub cities_test: usize,
    pub countries_train: usize,
    pub countries_test: usize,
}

impl PoolSizes {
    pub fn from_run(cfg: &RunConfig) -> Result<PoolSizes> {
        Ok(PoolSizes {
            persons_train: cfg.get_usize("data.persons_train")?,
            persons_test: cfg.get_usize("data.persons_test")?,
            fathers_train: cfg.get_usize("data.fathers_train")?,
            fathers_test: cfg.get_usize("data.fathers_test")?,
            cities_train: cfg.get_usize("data.cities_train")?,
            cities_test: cfg.get_usize("data.cities_test")?,
            countries_train: cfg.get_usize("data.countries_train")?,
            countries_test: cfg.get_usize("data.countries_test")?,
        })
    }

    fn persons(&self) -> usize {
        self.persons_train + self.persons_test
    }

    /// Documents: born + father per person, born per father, located per
    /// city.
    fn documents(&self) -> usize {
        2 * self.persons()
            + self.fathers_train
            + self.fathers_test
            + self.cities_train
            + self.cities_test
    }

    /// Questions: one 1-hop and one 2-hop per person.
    fn questions(&self) -> usize {
        2 * self.persons()
    }

    pub fn validate(&self) -> Result<()> {
        let pools = [
            self.persons_train,
            self.persons_test,
            self.fathers_train,
            self.fathers_test,
            self.cities_train,
            self.cities_test,
            self.countries_train,
            self.countries_test,
        ];
        if pools.contains(&0) {
            return Err(Error::Data("every entity pool needs at least one member".into()));
        }
        if self.documents() < 100 || self.questions() < 200 {
            return Err(Error::Data(format!(
                "infeasible sizes: {} documents and {} questions (need ≥100 and ≥200)",
                self.documents(),
                self.questions()
            )));
        }
        Ok(())
    }
}

/// The generated world: graph, rendered corpus, and split question sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthWorld {
    pub graph: FactGraph,
    pub corpus: Vec<Document>,
    pub train: Vec<QAItem>,
    pub test: Vec<QAItem>,
}

impl SynthWorld {
    /// Every word needed to tokenize documents, questions, subqueries, and
    /// teacher thoughts.
    pub fn vocabulary_words(&self) -> Vec<String> {
        vocabulary_words_for(&self.corpus, &[&self.train, &self.test])
    }

    /// `(gold subquery, supporting document id)` pairs from both splits,
    /// deduplicated — the reference encoder's pretraining set.
    pub fn pretraining_pairs(&self) -> Vec<(String, String)> {
        pretraining_pairs_for(&[&self.train, &self.test])
    }
}

/// Every word needed to tokenize the given documents and questions, teacher
/// template words included.  Lets the word list be rebuilt from artifact
/// files without regenerating the world.
pub fn vocabulary_words_for(corpus: &[Document], question_sets: &[&[QAItem]]) -> Vec<String> {
    let mut words: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
    words.insert("what".into());
    words.insert("?".into());
    for doc in corpus {
        words.extend(doc.text.split_whitespace().map(String::from));
    }
    for item in question_sets.iter().copied().flatten() {
        words.extend(item.question.split_whitespace().map(String::from));
    }
    words.into_iter().collect()
}

/// `(gold subquery, supporting document id)` pairs across the given question
/// sets, deduplicated.
pub fn pretraining_pairs_for(question_sets: &[&[QAItem]]) -> Vec<(String, String)> {
    let mut pairs = BTreeSet::new();
    for item in question_sets.iter().copied().flatten() {
        for hop in &item.decomposition {
            pairs.insert((hop.subquery.clone(), hop.support_doc_id.clone()));
        }
    }
    pairs.into_iter().collect()
}

/// Pseudo-word entity names: alternating consonant/vowel syllables, unique
/// across the whole world.
fn fresh_name(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> Result<String> {
    for _ in 0..100_000 {
        let mut name = String::with_capacity(2 * NAME_SYLLABLES);
        for _ in 0..NAME_SYLLABLES {
            name.push(NAME_CONSONANTS[rng.gen_range(0..NAME_CONSONANTS.len())]);
            name.push(NAME_VOWELS[rng.gen_range(0..NAME_VOWELS.len())]);
        }
        if used.insert(name.clone()) {
            return Ok(name);
        }
    }
    Err(Error::Data("entity name space exhausted".into()))
}

fn name_pool(n: usize, rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> Result<Vec<String>> {
    (0..n).map(|_| fresh_name(rng, used)).collect()
}

fn pick<'a>(pool: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
    &pool[rng.gen_range(0..pool.len())]
}

/// Generate a deterministic world: entities, facts, documents, questions.
pub fn generate(sizes: &PoolSizes, seed: u64) -> Result<SynthWorld> {
    sizes.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
    used.extend(["what", "birth", "place", "of", "is", "the", "father", "country"].map(String::from));

    let persons_train = name_pool(sizes.persons_train, &mut rng, &mut used)?;
    let persons_test = name_pool(sizes.persons_test, &mut rng, &mut used)?;
    let fathers_train = name_pool(sizes.fathers_train, &mut rng, &mut used)?;
    let fathers_test = name_pool(sizes.fathers_test, &mut rng, &mut used)?;
    let cities_train = name_pool(sizes.cities_train, &mut rng, &mut used)?;
    let cities_test = name_pool(sizes.cities_test, &mut rng, &mut used)?;
    let countries_train = name_pool(sizes.countries_train, &mut rng, &mut used)?;
    let countries_test = name_pool(sizes.countries_test, &mut rng, &mut used)?;

    let mut graph = FactGraph::default();
    let splits = [
        (&persons_train, &fathers_train, &cities_train, &countries_train),
        (&persons_test, &fathers_test, &cities_test, &countries_test),
    ];
    for (persons, fathers, cities, countries) in splits {
        for person in persons.iter() {
            graph.add(Relation::BornIn, person, pick(cities, &mut rng));
            graph.add(Relation::FatherOf, person, pick(fathers, &mut rng));
        }
        for father in fathers.iter() {
            graph.add(Relation::BornIn, father, pick(cities, &mut rng));
        }
        for city in cities.iter() {
            graph.add(Relation::LocatedIn, city, pick(countries, &mut rng));
        }
    }
    let corpus: Vec<Document> = graph.facts.iter().map(Fact::render).collect();

    let questions_for = |persons: &[String], graph: &FactGraph| -> Vec<QAItem> {
        let mut items = Vec::with_capacity(2 * persons.len());
        for person in persons {
            let city = graph.born_in(person).expect("every person has a birth fact");
            items.push(QAItem {
                id: format!("q1-{person}"),
                question: format!("what is the birth place of {person} ?"),
                answers: vec![city.to_string()],
                hops: 1,
                decomposition: vec![GoldHop {
                    subquery: format!("the birth place of {person}"),
                    support_doc_id: format!("born-{person}"),
                }],
            });
            let father = graph.father_of(person).expect("every person has a father fact");
            let father_city = graph.born_in(father).expect("every father has a birth fact");
            items.push(QAItem {
                id: format!("q2-{person}"),
                question: format!("what is the birth place of the father of {person} ?"),
                answers: vec![father_city.to_string()],
                hops: 2,
                decomposition: vec![
                    GoldHop {
                        subquery: format!("the father of {person}"),
                        support_doc_id: format!("father-{person}"),
                    },
                    GoldHop {
                        subquery: format!("the birth place of {father}"),
                        support_doc_id: format!("born-{father}"),
                    },
                ],
            });
        }
        items
    };
    let train = questions_for(&persons_train, &graph);
    let test = questions_for(&persons_test, &graph);
    Ok(SynthWorld { graph, corpus, train, test })
}

// ── retrieval validation ───────────────────────────────────────────────────

/// Share of items whose every gold subquery retrieves its supporting
/// document in the top `k`, under `embed`.
pub fn retrieval_validation<F>(
    items: &[QAItem],
    index: &CorpusIndex,
    k: usize,
    mut embed: F,
) -> Result<f64>
where
    F: FnMut(&str) -> Result<Vec<f64>>,
{
    if items.is_empty() {
        return Err(Error::Parameter("validation over an empty item set".into()));
    }
    let mut good = 0usize;
    for item in items {
        let mut all_hops = true;
        for hop in &item.decomposition {
            let query = embed(&hop.subquery)?;
            let hits = retrieve(index, &query, k)?;
            if !hits.iter().any(|h| h.id == hop.support_doc_id) {
                all_hops = false;
                break;
            }
        }
        good += usize::from(all_hops);
    }
    Ok(good as f64 / items.len() as f64)
}

// ── explicit teacher ───────────────────────────────────────────────────────

/// One teacher step: a templated thought, then either a subquery with its
/// retrieved documents or (on the final step) neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherStep {
    pub thought: String,
    pub subquery: Option<String>,
    pub retrieved: Option<Vec<RetrievedDoc>>,
}

/// A full explicit trajectory with its correctness flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrajectory {
    pub item_id: String,
    pub question: String,
    pub steps: Vec<TeacherStep>,
    pub answer: String,
    pub correct: bool,
}

impl TeacherTrajectory {
    /// Number of retrieval steps (steps that issued a subquery).
    pub fn retrieval_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.subquery.is_some()).count()
    }
}

/// Read `the <...> of <subject> is <object> .` facts out of retrieved text:
/// the object named by the first document extending `subquery` with ` is `.
fn read_object(docs: &[RetrievedDoc], subquery: &str) -> Option<String> {
    let prefix = format!("{subquery} is ");
    docs.iter().find_map(|doc| {
        doc.text
            .strip_prefix(&prefix)
            .and_then(|rest| rest.strip_suffix(" ."))
            .map(String::from)
    })
}

/// The gold subquery template with its trailing entity swapped for the one
/// the teacher actually read.
fn with_read_entity(gold_subquery: &str, object: &str) -> String {
    match gold_subquery.rsplit_once(' ') {
        Some((head, _)) => format!("{head} {object}"),
        None => object.to_string(),
    }
}

/// Run the rule-based teacher on one item: templated thoughts, gold
/// subqueries, honest reads of whatever the retriever returned.  A step
/// whose supporting fact is missing from the retrieved documents leaves the
/// teacher unable to continue; the trajectory ends unanswered and is marked
/// incorrect.
pub fn teacher_run<F>(
    item: &QAItem,
    index: &CorpusIndex,
    k: usize,
    mut embed: F,
) -> Result<TeacherTrajectory>
where
    F: FnMut(&str) -> Result<Vec<f64>>,
{
    if item.decomposition.is_empty() {
        return Err(Error::Data(format!("item {} has no gold decomposition", item.id)));
    }
    let mut steps = Vec::new();
    let mut thought = format!("i need to find {} . i will search for it .", item.core());
    // Hop 0's subquery is a function of the question alone; later hops are
    // re-derived from whatever entity the teacher actually read, so a wrong
    // read propagates honestly instead of being silently corrected.
    let mut subquery = item.decomposition[0].subquery.clone();
    let mut answer = String::new();
    for hop_idx in 0..item.decomposition.len() {
        let docs = retrieve(index, &embed(&subquery)?, k)?;
        let object = read_object(&docs, &subquery);
        steps.push(TeacherStep {
            thought: thought.clone(),
            subquery: Some(subquery.clone()),
            retrieved: Some(docs),
        });
        match object {
            None => {
                // Retrieval miss: nothing to read, nothing to answer.
                return Ok(TeacherTrajectory {
                    item_id: item.id.clone(),
                    question: item.question.clone(),
                    steps,
                    answer: String::new(),
                    correct: false,
                });
            }
            Some(object) if hop_idx + 1 < item.decomposition.len() => {
                let next =
                    with_read_entity(&item.decomposition[hop_idx + 1].subquery, &object);
                thought =
                    format!("i found that {subquery} is {object} . now i need to find {next} .");
                subquery = next;
            }
            Some(object) => {
                thought = format!("i found that {subquery} is {object} . now i can answer .");
                answer = object;
            }
        }
    }
    steps.push(TeacherStep { thought, subquery: None, retrieved: None });
    let correct = em_score(&answer, &item.answers)? == 1;
    Ok(TeacherTrajectory {
        item_id: item.id.clone(),
        question: item.question.clone(),
        steps,
        answer,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Mat;
    use crate::vocab::Vocabulary;

    fn small_sizes() -> PoolSizes {
        PoolSizes {
            persons_train: 80,
            persons_test: 20,
            fathers_train: 20,
            fathers_test: 8,
            cities_train: 10,
            cities_test: 5,
            countries_train: 3,
            countries_test: 2,
        }
    }

    /// Index whose rows are one-hot per document, plus an oracle embedder
    /// mapping each gold subquery onto its supporting document's row.
    fn oracle_index(world: &SynthWorld) -> (CorpusIndex, BTreeMap<String, Vec<f64>>) {
        let n = world.corpus.len();
        let mut embeddings = Mat::zeros(n, n);
        for i in 0..n {
            embeddings.row_mut(i)[i] = 1.0;
        }
        let index = CorpusIndex {
            documents: world.corpus.clone(),
            embeddings,
            encoder_hash: "oracle".into(),
        };
        let mut map = BTreeMap::new();
        for item in world.train.iter().chain(&world.test) {
            for hop in &item.decomposition {
                let row = index.position_of(&hop.support_doc_id).expect("doc exists");
                let mut v = vec![0.0; n];
                v[row] = 1.0;
                map.insert(hop.subquery.clone(), v);
            }
        }
        (index, map)
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate(&small_sizes(), 7).unwrap();
        let b = generate(&small_sizes(), 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate(&small_sizes(), 8).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn world_structure_matches_the_size_formulas() {
        let sizes = small_sizes();
        let world = generate(&sizes, 3).unwrap();
        assert_eq!(world.corpus.len(), 2 * 100 + 28 + 15);
        assert_eq!(world.train.len(), 2 * 80);
        assert_eq!(world.test.len(), 2 * 20);
        // One document per fact, unique ids.
        assert_eq!(world.corpus.len(), world.graph.facts.len());
        let ids: BTreeSet<&str> = world.corpus.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids.len(), world.corpus.len());
    }

    #[test]
    fn every_question_has_a_complete_supporting_chain() {
        let world = generate(&small_sizes(), 11).unwrap();
        let by_id: BTreeMap<&str, &Document> =
            world.corpus.iter().map(|d| (d.id.as_str(), d)).collect();
        for item in world.train.iter().chain(&world.test) {
            assert_eq!(item.decomposition.len(), item.hops);
            for hop in &item.decomposition {
                let doc = by_id[hop.support_doc_id.as_str()];
                // The supporting document answers its subquery verbatim.
                assert!(
                    doc.text.starts_with(&format!("{} is ", hop.subquery)),
                    "{} does not answer '{}'",
                    doc.text,
                    hop.subquery
                );
            }
            // The last hop's document states the gold answer.
            let last = &item.decomposition[item.hops - 1];
            let doc = by_id[last.support_doc_id.as_str()];
            assert!(doc.text.ends_with(&format!("is {} .", item.answers[0])));
            // 2-hop bridge chain exists in the graph.
            if item.hops == 2 {
                let person = item.id.strip_prefix("q2-").unwrap();
                let father = world.graph.father_of(person).unwrap();
                assert_eq!(world.graph.born_in(father).unwrap(), item.answers[0]);
            }
        }
    }

    #[test]
    fn train_and_test_answers_are_entity_disjoint() {
        for seed in 0..10 {
            let world = generate(&small_sizes(), seed).unwrap();
            let train: BTreeSet<&str> =
                world.train.iter().flat_map(|i| i.answers.iter()).map(String::as_str).collect();
            let test: BTreeSet<&str> =
                world.test.iter().flat_map(|i| i.answers.iter()).map(String::as_str).collect();
            assert!(train.is_disjoint(&test), "seed {seed} leaks answer entities");
        }
    }

    #[test]
    fn infeasible_sizes_are_rejected() {
        let mut tiny = small_sizes();
        tiny.persons_train = 10;
        tiny.persons_test = 5;
        assert!(matches!(generate(&tiny, 0), Err(Error::Data(_))));
        let mut zero = small_sizes();
        zero.countries_test = 0;
        assert!(matches!(generate(&zero, 0), Err(Error::Data(_))));
    }

    #[test]
    fn vocabulary_covers_all_generated_text() {
        let world = generate(&small_sizes(), 5).unwrap();
        let vocab = Vocabulary::build(4, 16, world.vocabulary_words()).unwrap();
        let (index, embeddings) = oracle_index(&world);
        for doc in &world.corpus {
            vocab.tokenize(&doc.text).unwrap();
        }
        for item in world.train.iter().chain(&world.test) {
            vocab.tokenize(&item.question).unwrap();
            for hop in &item.decomposition {
                vocab.tokenize(&hop.subquery).unwrap();
            }
            let traj =
                teacher_run(item, &index, 3, |s| Ok(embeddings[s].clone())).unwrap();
            for step in &traj.steps {
                vocab.tokenize(&step.thought).unwrap();
            }
            vocab.tokenize(&traj.answer).unwrap();
        }
    }

    #[test]
    fn teacher_solves_one_hop_in_one_retrieval_step() {
        let world = generate(&small_sizes(), 21).unwrap();
        let (index, embeddings) = oracle_index(&world);
        let item = world.train.iter().find(|i| i.hops == 1).unwrap();
        let traj = teacher_run(item, &index, 3, |s| Ok(embeddings[s].clone())).unwrap();
        assert_eq!(traj.retrieval_steps(), 1);
        assert_eq!(traj.steps.len(), 2, "one retrieval step, then the answer step");
        assert!(traj.steps.last().unwrap().subquery.is_none());
        assert_eq!(traj.answer, item.answers[0]);
        assert!(traj.correct);
        assert_eq!(traj.steps[0].thought, format!("i need to find {} . i will search for it .", item.core()));
    }

    #[test]
    fn teacher_two_hop_thoughts_reference_the_bridge_entity() {
        let world = generate(&small_sizes(), 22).unwrap();
        let (index, embeddings) = oracle_index(&world);
        let item = world.train.iter().find(|i| i.hops == 2).unwrap();
        let person = item.id.strip_prefix("q2-").unwrap();
        let father = world.graph.father_of(person).unwrap();
        let traj = teacher_run(item, &index, 3, |s| Ok(embeddings[s].clone())).unwrap();
        assert_eq!(traj.retrieval_steps(), 2);
        assert_eq!(traj.steps.len(), 3);
        // The intermediate thought names the bridge entity it just read.
        assert!(traj.steps[1].thought.contains(father), "{}", traj.steps[1].thought);
        assert_eq!(
            traj.steps[1].subquery.as_deref(),
            Some(format!("the birth place of {father}").as_str())
        );
        assert_eq!(traj.answer, item.answers[0]);
        assert!(traj.correct);
        // Retrieved lists carry (id, score, text) in rank order.
        let docs = traj.steps[0].retrieved.as_ref().unwrap();
        assert_eq!(docs.len(), 3);
        assert_eq!(docs[0].id, item.decomposition[0].support_doc_id);
        assert!(docs[0].score >= docs[1].score);
    }

    #[test]
    fn teacher_em_is_perfect_under_oracle_retrieval() {
        let world = generate(&small_sizes(), 23).unwrap();
        let (index, embeddings) = oracle_index(&world);
        let mut correct = 0usize;
        let mut total = 0usize;
        for item in world.train.iter().chain(&world.test) {
            let traj = teacher_run(item, &index, 3, |s| Ok(embeddings[s].clone())).unwrap();
            assert_eq!(traj.correct, em_score(&traj.answer, &item.answers).unwrap() == 1);
            correct += usize::from(traj.correct);
            total += 1;
        }
        assert!(correct as f64 / total as f64 >= 0.95);
        assert_eq!(correct, total, "oracle retrieval leaves no misses");
    }

    #[test]
    fn retrieval_miss_marks_the_trajectory_incorrect() {
        let world = generate(&small_sizes(), 24).unwrap();
        let (index, embeddings) = oracle_index(&world);
        let item = world.train.iter().find(|i| i.hops == 2).unwrap();
        // Derail hop 2: every embedding points at an unrelated document.
        let wrong_row = index.position_of(&item.decomposition[0].support_doc_id).unwrap();
        let traj = teacher_run(item, &index, 3, |s: &str| {
            if s == item.decomposition[0].subquery {
                Ok(embeddings[s].clone())
            } else {
                let mut v = vec![0.0; index.len()];
                v[wrong_row] = 1.0;
                Ok(v)
            }
        })
        .unwrap();
        assert!(!traj.correct);
        assert_eq!(traj.answer, "");
        // The failed retrieval step is still recorded; no answer step follows.
        assert_eq!(traj.retrieval_steps(), traj.steps.len());
    }

    #[test]
    fn retrieval_validation_scores_items_under_an_embedder() {
        let world = generate(&small_sizes(), 25).unwrap();
        let (index, embeddings) = oracle_index(&world);
        let rate =
            retrieval_validation(&world.train, &index, 3, |s| Ok(embeddings[s].clone())).unwrap();
        assert_eq!(rate, 1.0);
        // A constant embedder retrieves the same 3 documents for everything.
        let mut constant = vec![0.0; index.len()];
        constant[0] = 1.0;
        let rate =
            retrieval_validation(&world.train, &index, 3, |_| Ok(constant.clone())).unwrap();
        assert!(rate < 0.2, "constant embedder should fail validation, got {rate}");
    }

    #[test]
    fn pretraining_pairs_cover_every_hop_without_duplicates() {
        let world = generate(&small_sizes(), 26).unwrap();
        let pairs = world.pretraining_pairs();
        let as_set: BTreeSet<&(String, String)> = pairs.iter().collect();
        assert_eq!(as_set.len(), pairs.len());
        let doc_ids: BTreeSet<&str> = world.corpus.iter().map(|d| d.id.as_str()).collect();
        for (subquery, doc_id) in &pairs {
            assert!(doc_ids.contains(doc_id.as_str()));
            assert!(!subquery.is_empty());
        }
        // Every hop of every item is represented.
        for item in world.train.iter().chain(&world.test) {
            for hop in &item.decomposition {
                assert!(as_set
                    .contains(&(hop.subquery.clone(), hop.support_doc_id.clone())));
            }
        }
    }
}
