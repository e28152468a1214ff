//! Dataset ingestion, validation, and contrastive-triple assembly.
//!
//! Input data follows the SQuAD 2.0 JSON layout. Triples pair an answerable
//! question with a paraphrase and with a question that invalidates the same
//! answer span, sourced either from the dataset's own unanswerable questions
//! or from rule-based generation.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textproc::{char_len, char_slice};

/// A context paragraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// One gold (or plausible) answer occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub text: String,
    pub answer_char_start: usize,
}

/// One question over a passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub passage_id: String,
    pub question: String,
    pub answerable: bool,
    pub answers: Vec<AnswerSpan>,
    /// Annotated wrong-but-type-consistent spans; present only when
    /// the question is unanswerable.
    pub plausible_answers: Vec<AnswerSpan>,
}

impl QAExample {
    /// The span used for training: the first listed gold answer.
    pub fn training_answer(&self) -> Option<&AnswerSpan> {
        self.answers.first()
    }

    pub fn first_plausible(&self) -> Option<&AnswerSpan> {
        self.plausible_answers.first()
    }
}

/// Validated passages plus questions.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub passages: Vec<Passage>,
    pub examples: Vec<QAExample>,
}

impl Corpus {
    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages.iter().find(|p| p.id == id)
    }

    pub fn example(&self, id: &str) -> Option<&QAExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn answerable_count(&self) -> usize {
        self.examples.iter().filter(|e| e.answerable).count()
    }

    pub fn unanswerable_count(&self) -> usize {
        self.examples.len() - self.answerable_count()
    }

    /// All question surface forms, used to restrict entity pools.
    pub fn question_texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.question.as_str())
    }
}

// ---------------------------------------------------------------------------
// SQuAD 2.0 wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SquadFile {
    #[serde(default)]
    version: Option<String>,
    data: Vec<SquadArticle>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadArticle {
    title: String,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQA>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadQA {
    id: String,
    question: String,
    #[serde(default)]
    is_impossible: bool,
    #[serde(default)]
    answers: Vec<SquadAnswer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    plausible_answers: Vec<SquadAnswer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// Parse and validate SQuAD 2.0 JSON text.
pub fn parse_squad(content: &str) -> Result<Corpus> {
    let file: SquadFile =
        serde_json::from_str(content).map_err(|e| Error::from_json(&e, content))?;

    let mut corpus = Corpus::default();
    let mut seen_ids: HashMap<String, ()> = HashMap::new();
    let mut para_counter = 0usize;

    for article in file.data {
        for para in article.paragraphs {
            let passage_id = format!("para_{para_counter:06}");
            para_counter += 1;
            if para.context.is_empty() {
                return Err(Error::Validation {
                    id: passage_id,
                    message: "passage text is empty".into(),
                });
            }
            for qa in para.qas {
                if seen_ids.insert(qa.id.clone(), ()).is_some() {
                    return Err(Error::Validation {
                        id: qa.id,
                        message: "duplicate question id".into(),
                    });
                }
                let answerable = !qa.is_impossible;
                let answers: Vec<AnswerSpan> = qa
                    .answers
                    .iter()
                    .map(|a| AnswerSpan {
                        text: a.text.clone(),
                        answer_char_start: a.answer_start,
                    })
                    .collect();
                let plausible: Vec<AnswerSpan> = qa
                    .plausible_answers
                    .iter()
                    .map(|a| AnswerSpan {
                        text: a.text.clone(),
                        answer_char_start: a.answer_start,
                    })
                    .collect();

                if answerable && answers.is_empty() {
                    return Err(Error::Validation {
                        id: qa.id,
                        message: "answerable question has no answers".into(),
                    });
                }
                if !answerable && !answers.is_empty() {
                    return Err(Error::Validation {
                        id: qa.id,
                        message: "unanswerable question lists gold answers".into(),
                    });
                }
                for a in answers.iter().chain(plausible.iter()) {
                    check_span(&para.context, a, &qa.id)?;
                }

                corpus.examples.push(QAExample {
                    id: qa.id,
                    passage_id: passage_id.clone(),
                    question: qa.question,
                    answerable,
                    answers,
                    plausible_answers: plausible,
                });
            }
            corpus.passages.push(Passage {
                id: passage_id,
                title: article.title.clone(),
                text: para.context,
            });
        }
    }
    Ok(corpus)
}

fn check_span(context: &str, a: &AnswerSpan, qid: &str) -> Result<()> {
    let end = a.answer_char_start + char_len(&a.text);
    let found = char_slice(context, a.answer_char_start, end);
    if found != a.text {
        return Err(Error::Validation {
            id: qid.to_string(),
            message: format!(
                "answer '{}' not found at char {} (passage has '{}')",
                a.text, a.answer_char_start, found
            ),
        });
    }
    Ok(())
}

/// Load a SQuAD 2.0 JSON file.
pub fn load_squad(path: &Path) -> Result<Corpus> {
    let content = std::fs::read_to_string(path)?;
    parse_squad(&content)
}

/// Serialize a corpus back to the SQuAD 2.0 layout (one article per passage).
pub fn save_squad(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut by_passage: BTreeMap<&str, Vec<&QAExample>> = BTreeMap::new();
    for ex in &corpus.examples {
        by_passage.entry(&ex.passage_id).or_default().push(ex);
    }
    let data: Vec<SquadArticle> = corpus
        .passages
        .iter()
        .map(|p| SquadArticle {
            title: p.title.clone(),
            paragraphs: vec![SquadParagraph {
                context: p.text.clone(),
                qas: by_passage
                    .get(p.id.as_str())
                    .map(|exs| {
                        exs.iter()
                            .map(|ex| SquadQA {
                                id: ex.id.clone(),
                                question: ex.question.clone(),
                                is_impossible: !ex.answerable,
                                answers: ex
                                    .answers
                                    .iter()
                                    .map(|a| SquadAnswer {
                                        text: a.text.clone(),
                                        answer_start: a.answer_char_start,
                                    })
                                    .collect(),
                                plausible_answers: ex
                                    .plausible_answers
                                    .iter()
                                    .map(|a| SquadAnswer {
                                        text: a.text.clone(),
                                        answer_start: a.answer_char_start,
                                    })
                                    .collect(),
                            })
                            .collect()
                    })
                    .unwrap_or_default(),
            }],
        })
        .collect();
    let file = SquadFile {
        version: Some("v2.0".into()),
        data,
    };
    let out = std::fs::File::create(path)?;
    let mut w = BufWriter::new(out);
    serde_json::to_writer(&mut w, &file).map_err(|e| Error::Input(e.to_string()))?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Contrastive triples
// ---------------------------------------------------------------------------

/// Where a triple's negative question came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegSource {
    Dataset,
    Negation,
    Antonym,
    Entity,
    External,
}

impl NegSource {
    pub fn as_str(self) -> &'static str {
        match self {
            NegSource::Dataset => "dataset",
            NegSource::Negation => "negation",
            NegSource::Antonym => "antonym",
            NegSource::Entity => "entity",
            NegSource::External => "external",
        }
    }
}

/// An anchor question with a paraphrase and a distortion sharing one
/// passage and one gold span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveTriple {
    pub passage_id: String,
    pub q_org: String,
    pub q_pos: String,
    pub q_neg: String,
    pub answer_text: String,
    pub answer_char_start: usize,
    pub neg_source: NegSource,
}

/// Supplies the paraphrase and distortion for one question. Implementations
/// must be deterministic in `(question, qid)` and safe to call in parallel.
pub trait TripleAugmenter: Sync {
    fn paraphrase(&self, question: &str, qid: &str) -> Option<String>;
    fn negative(&self, question: &str, qid: &str) -> Option<(String, NegSource)>;
}

/// Outcome of triple assembly, with per-source and skip accounting.
#[derive(Debug, Clone, Default)]
pub struct TripleBuild {
    pub triples: Vec<ContrastiveTriple>,
    pub skipped_paraphrase: usize,
    pub skipped_negative: usize,
    pub source_counts: BTreeMap<NegSource, usize>,
}

impl TripleBuild {
    pub fn skipped(&self) -> usize {
        self.skipped_paraphrase + self.skipped_negative
    }
}

/// Pair answerable questions with same-passage unanswerable questions whose
/// plausible span equals the gold span. One-to-one; unmatched answerable
/// questions are left for rule-based generation.
pub fn pair_dataset_negatives(corpus: &Corpus) -> BTreeMap<String, String> {
    let mut by_passage: HashMap<&str, (Vec<&QAExample>, Vec<&QAExample>)> = HashMap::new();
    for ex in &corpus.examples {
        let entry = by_passage.entry(&ex.passage_id).or_default();
        if ex.answerable {
            entry.0.push(ex);
        } else {
            entry.1.push(ex);
        }
    }

    let mut pairing = BTreeMap::new();
    for (answerable, unanswerable) in by_passage.values_mut() {
        answerable.sort_by(|a, b| a.id.cmp(&b.id));
        unanswerable.sort_by(|a, b| a.id.cmp(&b.id));
        let mut used = vec![false; unanswerable.len()];
        for ans in answerable.iter() {
            let gold = match ans.training_answer() {
                Some(g) => g,
                None => continue,
            };
            for (i, un) in unanswerable.iter().enumerate() {
                if used[i] {
                    continue;
                }
                if un.first_plausible() == Some(gold) {
                    used[i] = true;
                    pairing.insert(ans.id.clone(), un.id.clone());
                    break;
                }
            }
        }
    }
    pairing
}

/// Build one triple per answerable question; questions whose augmentation
/// fails are skipped and counted. Output is ordered by question id.
pub fn build_triples(
    corpus: &Corpus,
    augmenter: &dyn TripleAugmenter,
    pairing: &BTreeMap<String, String>,
) -> TripleBuild {
    let mut answerable: Vec<&QAExample> = corpus.examples.iter().filter(|e| e.answerable).collect();
    answerable.sort_by(|a, b| a.id.cmp(&b.id));

    enum Outcome {
        Triple(ContrastiveTriple),
        NoParaphrase,
        NoNegative,
    }

    let outcomes: Vec<Outcome> = answerable
        .par_iter()
        .map(|ex| {
            let gold = ex.training_answer().expect("answerable implies answers");
            let q_pos = match augmenter.paraphrase(&ex.question, &ex.id) {
                Some(p) if p != ex.question => p,
                _ => return Outcome::NoParaphrase,
            };
            let dataset_neg = pairing
                .get(&ex.id)
                .and_then(|nid| corpus.example(nid))
                .map(|n| n.question.clone())
                .filter(|q| q != &ex.question);
            let (q_neg, neg_source) = match dataset_neg {
                Some(q) => (q, NegSource::Dataset),
                None => match augmenter.negative(&ex.question, &ex.id) {
                    Some((q, src)) if q != ex.question => (q, src),
                    _ => return Outcome::NoNegative,
                },
            };
            Outcome::Triple(ContrastiveTriple {
                passage_id: ex.passage_id.clone(),
                q_org: ex.question.clone(),
                q_pos,
                q_neg,
                answer_text: gold.text.clone(),
                answer_char_start: gold.answer_char_start,
                neg_source,
            })
        })
        .collect();

    let mut build = TripleBuild::default();
    for outcome in outcomes {
        match outcome {
            Outcome::Triple(t) => {
                *build.source_counts.entry(t.neg_source).or_insert(0) += 1;
                build.triples.push(t);
            }
            Outcome::NoParaphrase => build.skipped_paraphrase += 1,
            Outcome::NoNegative => build.skipped_negative += 1,
        }
    }
    build
}

/// Check triples against a corpus: passage exists, span re-extracts, and
/// the three questions are pairwise usable.
pub fn validate_triples(corpus: &Corpus, triples: &[ContrastiveTriple]) -> Result<()> {
    for (i, t) in triples.iter().enumerate() {
        let passage = corpus.passage(&t.passage_id).ok_or_else(|| Error::Validation {
            id: format!("triple #{i}"),
            message: format!("unknown passage id '{}'", t.passage_id),
        })?;
        let span = AnswerSpan {
            text: t.answer_text.clone(),
            answer_char_start: t.answer_char_start,
        };
        check_span(&passage.text, &span, &format!("triple #{i}"))?;
        if t.q_org == t.q_pos || t.q_org == t.q_neg {
            return Err(Error::Validation {
                id: format!("triple #{i}"),
                message: "triple members must differ from the anchor".into(),
            });
        }
    }
    Ok(())
}

/// Write triples as JSONL, one object per line.
pub fn save_triples(triples: &[ContrastiveTriple], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for t in triples {
        let line = serde_json::to_string(t).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read triples from JSONL. Blank lines are ignored.
pub fn load_triples(path: &Path) -> Result<Vec<ContrastiveTriple>> {
    let content = std::fs::read_to_string(path)?;
    let mut triples = Vec::new();
    let mut offset = 0usize;
    for (lineno, line) in content.split('\n').enumerate() {
        if !line.trim().is_empty() {
            let t: ContrastiveTriple = serde_json::from_str(line).map_err(|e| Error::Parse {
                offset: offset + e.column().saturating_sub(1),
                line: lineno + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            triples.push(t);
        }
        offset += line.len() + 1;
    }
    Ok(triples)
}
