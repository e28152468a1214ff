//! Templated synthetic corpus generator.
//!
//! Produces a small world of people, cities, years, animals, and foods, and
//! renders single-fact passages with one answerable question each. Dev
//! passages use fresh entity combinations; half of the dev questions are
//! distorted by the augmentation rules and marked unanswerable (with the
//! original span kept as the plausible answer). Reserved entities appear in
//! passage filler so the replacement pools stay inside the vocabulary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{AugmentLexicons, Augmenter, GazetteerAnnotator, OfflineBackTranslator};
use crate::corpus::{AnswerSpan, Corpus, Passage, QAExample};
use crate::error::Result;
use crate::seeds::rng_for;

const PERSONS: [&str; 20] = [
    "Ada", "Boris", "Chen", "Dara", "Elif", "Farid", "Greta", "Hugo", "Iris", "Jonas", "Kira",
    "Liam", "Mira", "Noor", "Omar", "Priya", "Quinn", "Rosa", "Sven", "Tara",
];
const POOL_PERSONS: [&str; 6] = ["Ulrik", "Vera", "Wale", "Xenia", "Yusuf", "Zelda"];

const CITIES: [&str; 16] = [
    "Arlon", "Bergen", "Cadiz", "Derry", "Espoo", "Fulda", "Gonda", "Haarlem", "Imola", "Jaen",
    "Kassel", "Leiden", "Modena", "Nantes", "Orense", "Pisa",
];
const POOL_CITIES: [&str; 5] = ["Quimper", "Rouen", "Siena", "Turku", "Utrecht"];

const ANIMALS: [&str; 8] = [
    "badger", "crane", "donkey", "ferret", "gecko", "heron", "lynx", "otter",
];
const POOL_ANIMALS: [&str; 4] = ["marmot", "pelican", "stoat", "wombat"];

const FOODS: [&str; 8] = [
    "dumplings", "flatbread", "goulash", "noodles", "paella", "porridge", "risotto", "stew",
];
const POOL_FOODS: [&str; 4] = ["chowder", "gnocchi", "polenta", "tagine"];

// adjective pairs double as the antonym table
const ADJ_PAIRS: [(&str, &str); 5] = [
    ("ancient", "modern"),
    ("bright", "dark"),
    ("wealthy", "poor"),
    ("crowded", "empty"),
    ("enormous", "small"),
];

// rotating third sentences that keep the paraphrase vocabulary in-corpus
const FILLERS: [&str; 8] = [
    "The town council recorded the journey in its files.",
    "A creature statue stood beside the crowded market.",
    "Every dish offered in the region was considered famous.",
    "The constructed halls were toured by students each spring.",
    "What remained of the old wall was kept by the town.",
    "A journal about the journey was offered to the library.",
    "The eatery near the square served one famous dish.",
    "Visitors toured the constructed gardens near the gate.",
];

/// Sizes and seed of the generated world.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub train_passages: usize,
    pub dev_questions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_passages: 500,
            dev_questions: 200,
            seed: 7,
        }
    }
}

/// Generated corpora plus the data files that drive augmentation over them.
pub struct SynthWorld {
    pub train: Corpus,
    pub dev: Corpus,
    pub lexicons_json: String,
    pub annotator_json: String,
    pub synonyms_json: String,
}

impl SynthWorld {
    /// Augmenter wired to the synthetic lexicons, with the entity pools
    /// restricted against the training questions.
    pub fn augmenter(&self, seed: u64) -> Result<Augmenter> {
        let mut lexicons = AugmentLexicons::from_json(&self.lexicons_json)?;
        lexicons.restrict_entity_pool(self.train.question_texts());
        Ok(Augmenter::new(
            lexicons,
            GazetteerAnnotator::from_json(&self.annotator_json)?,
            OfflineBackTranslator::from_json(&self.synonyms_json)?,
            None,
            seed,
        ))
    }
}

struct Instance {
    context: String,
    question: String,
    answer: String,
}

fn year(rng: &mut ChaCha8Rng) -> String {
    format!("{}", 1900 + rng.gen_range(0..90))
}

fn pick<'a>(list: &[&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    list[rng.gen_range(0..list.len())]
}

fn render(template: usize, persons: &[&str], cities: &[&str], rng: &mut ChaCha8Rng) -> Instance {
    let filler = FILLERS[rng.gen_range(0..FILLERS.len())];
    match template {
        0 => {
            let p1 = pick(persons, rng);
            let c1 = pick(cities, rng);
            let y = year(rng);
            let pr = pick(&POOL_PERSONS, rng);
            let ar = pick(&POOL_ANIMALS, rng);
            Instance {
                context: format!(
                    "{p1} traveled to {c1} in {y}. A {ar} slept while {pr} rested at home. {filler}"
                ),
                question: format!("Which city did {p1} travel to in {y}?"),
                answer: c1.to_string(),
            }
        }
        1 => {
            let p1 = pick(persons, rng);
            let c1 = pick(cities, rng);
            let (adj1, adj2) = ADJ_PAIRS[rng.gen_range(0..ADJ_PAIRS.len())];
            let ar = pick(&POOL_ANIMALS, rng);
            Instance {
                context: format!(
                    "The {adj1} tower in {c1} was built by {p1}. A {ar} nested nearby and the {adj2} gate stayed shut. {filler}"
                ),
                question: format!("Who built the {adj1} tower in {c1}?"),
                answer: p1.to_string(),
            }
        }
        2 => {
            let p1 = pick(persons, rng);
            let a1 = pick(&ANIMALS, rng);
            let y = year(rng);
            let (adj, _) = ADJ_PAIRS[rng.gen_range(0..ADJ_PAIRS.len())];
            let cr = pick(&POOL_CITIES, rng);
            Instance {
                context: format!(
                    "{p1} adopted a {a1} in {y}. The {a1} lived in a {adj} den near {cr}. {filler}"
                ),
                question: format!("What animal did {p1} adopt in {y}?"),
                answer: a1.to_string(),
            }
        }
        _ => {
            let p1 = pick(persons, rng);
            let c1 = pick(cities, rng);
            let f1 = pick(&FOODS, rng);
            let y = year(rng);
            let pr = pick(&POOL_PERSONS, rng);
            let fr = pick(&POOL_FOODS, rng);
            Instance {
                context: format!(
                    "In {y}, {p1} opened a restaurant in {c1}. The menu featured {f1} while {pr} preferred {fr}. {filler}"
                ),
                question: format!("What food did the restaurant of {p1} feature?"),
                answer: f1.to_string(),
            }
        }
    }
}

fn find_char_offset(haystack: &str, needle: &str) -> usize {
    // the generated text is ASCII, so byte and char offsets coincide
    haystack.find(needle).expect("answer embedded in context")
}

fn lexicons_json() -> String {
    let mut antonyms = serde_json::Map::new();
    for (a, b) in ADJ_PAIRS {
        antonyms.insert(a.to_string(), serde_json::json!(b));
        antonyms.insert(b.to_string(), serde_json::json!(a));
    }
    serde_json::json!({
        "antonyms": antonyms,
        "negation_forms": {
            "is": "isn't", "are": "aren't", "was": "wasn't", "were": "weren't",
            "did": "didn't", "does": "doesn't", "do": "don't"
        },
        "entity_pool": {
            "PERSON": POOL_PERSONS,
            "CITY": POOL_CITIES,
            "ANIMAL": POOL_ANIMALS,
            "FOOD": POOL_FOODS,
            "YEAR": ["2003", "2007", "2011", "2017"]
        }
    })
    .to_string()
}

fn annotator_json() -> String {
    let mut entities = serde_json::Map::new();
    for p in PERSONS.iter().chain(POOL_PERSONS.iter()) {
        entities.insert(p.to_string(), serde_json::json!("PERSON"));
    }
    for c in CITIES.iter().chain(POOL_CITIES.iter()) {
        entities.insert(c.to_string(), serde_json::json!("CITY"));
    }
    for a in ANIMALS.iter().chain(POOL_ANIMALS.iter()) {
        entities.insert(a.to_string(), serde_json::json!("ANIMAL"));
    }
    for f in FOODS.iter().chain(POOL_FOODS.iter()) {
        entities.insert(f.to_string(), serde_json::json!("FOOD"));
    }
    let adjs: Vec<&str> = ADJ_PAIRS.iter().flat_map(|(a, b)| [*a, *b]).collect();
    serde_json::json!({
        "pos": {
            "verb": ["traveled", "travel", "built", "build", "adopted", "adopt",
                      "opened", "open", "featured", "feature", "lived", "live",
                      "was", "did", "rested", "kept", "praised", "admired"],
            "noun": ["city", "tower", "bridge", "restaurant", "menu", "streets",
                      "animal", "food", "visitors", "reporters", "journey", "dish"],
            "adj": adjs,
            "adv": ["quietly"]
        },
        "entities": entities
    })
    .to_string()
}

fn synonyms_json() -> String {
    serde_json::json!({
        "which": ["what"],
        "city": ["town"],
        "travel": ["journey"],
        "traveled": ["journeyed"],
        "built": ["constructed"],
        "build": ["construct"],
        "animal": ["creature"],
        "adopt": ["take"],
        "adopted": ["took"],
        "food": ["dish"],
        "feature": ["offer"],
        "featured": ["offered"],
        "restaurant": ["eatery"],
        "visit": ["tour"],
        "visited": ["toured"]
    })
    .to_string()
}

/// Generate the synthetic world.
pub fn generate(config: &SynthConfig) -> Result<SynthWorld> {
    // disjoint entity halves keep dev facts unseen while sharing vocabulary
    let train_persons: Vec<&str> = PERSONS[..14].to_vec();
    let dev_persons: Vec<&str> = PERSONS[14..].to_vec();
    let train_cities: Vec<&str> = CITIES[..11].to_vec();
    let dev_cities: Vec<&str> = CITIES[11..].to_vec();

    let mut train = Corpus::default();
    let mut rng = rng_for(config.seed, "synth-train");
    for i in 0..config.train_passages {
        let inst = render(i % 4, &train_persons, &train_cities, &mut rng);
        let passage_id = format!("synth_train_{i:05}");
        let answer_start = find_char_offset(&inst.context, &inst.answer);
        train.passages.push(Passage {
            id: passage_id.clone(),
            title: "synthetic".into(),
            text: inst.context,
        });
        train.examples.push(QAExample {
            id: format!("train_q{i:05}"),
            passage_id,
            question: inst.question,
            answerable: true,
            answers: vec![AnswerSpan {
                text: inst.answer,
                answer_char_start: answer_start,
            }],
            plausible_answers: vec![],
        });
    }

    // distorter for the unanswerable half of dev
    let lexicons_str = lexicons_json();
    let annotator_str = annotator_json();
    let synonyms_str = synonyms_json();
    let distorter = Augmenter::new(
        AugmentLexicons::from_json(&lexicons_str)?,
        GazetteerAnnotator::from_json(&annotator_str)?,
        OfflineBackTranslator::from_json(&synonyms_str)?,
        None,
        crate::seeds::derive_seed(config.seed, "dev-distort"),
    );

    let mut dev = Corpus::default();
    let mut dev_rng = rng_for(config.seed, "synth-dev");
    for i in 0..config.dev_questions {
        let inst = render(i % 4, &dev_persons, &dev_cities, &mut dev_rng);
        let passage_id = format!("synth_dev_{i:05}");
        let answer_start = find_char_offset(&inst.context, &inst.answer);
        let qid = format!("dev_q{i:05}");
        let make_unanswerable = i % 2 == 1;

        let example = if make_unanswerable {
            let distorted = crate::corpus::TripleAugmenter::negative(
                &distorter,
                &inst.question,
                &qid,
            )
            .map(|(text, _)| text)
            .expect("every dev template admits a distortion");
            QAExample {
                id: qid,
                passage_id: passage_id.clone(),
                question: distorted,
                answerable: false,
                answers: vec![],
                plausible_answers: vec![AnswerSpan {
                    text: inst.answer,
                    answer_char_start: answer_start,
                }],
            }
        } else {
            QAExample {
                id: qid,
                passage_id: passage_id.clone(),
                question: inst.question,
                answerable: true,
                answers: vec![AnswerSpan {
                    text: inst.answer,
                    answer_char_start: answer_start,
                }],
                plausible_answers: vec![],
            }
        };
        dev.passages.push(Passage {
            id: passage_id,
            title: "synthetic".into(),
            text: inst.context,
        });
        dev.examples.push(example);
    }

    Ok(SynthWorld {
        train,
        dev,
        lexicons_json: lexicons_str,
        annotator_json: annotator_str,
        synonyms_json: synonyms_str,
    })
}
