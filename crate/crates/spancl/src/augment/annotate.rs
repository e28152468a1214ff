//! Question annotation: coarse part-of-speech tags and entity mentions.
//!
//! Annotation is a pluggable interface; the built-in implementation is
//! driven by closed word lists and a surface-form gazetteer loaded from a
//! JSON data file, so it is fully deterministic.

use std::collections::{BTreeMap, HashMap};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::textproc::{split_tokens, TokenSequence, UNK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosTag {
    Verb,
    Noun,
    Adj,
    Adv,
    Other,
}

impl PosTag {
    pub fn is_content_word(self) -> bool {
        !matches!(self, PosTag::Other)
    }
}

/// One detected entity mention over a token range (inclusive bounds).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMention {
    pub first_token: usize,
    pub last_token: usize,
    pub entity_type: String,
}

/// Tokens of one question plus tags and entity mentions.
#[derive(Debug, Clone)]
pub struct AnnotatedQuestion {
    pub tokens: TokenSequence,
    pub pos_tags: Vec<PosTag>,
    pub entities: Vec<EntityMention>,
}

impl AnnotatedQuestion {
    /// Surface text of an entity in the original question.
    pub fn entity_surface<'q>(&self, question: &'q str, e: &EntityMention) -> String {
        let (start, _) = self.tokens.char_spans[e.first_token];
        let (_, end) = self.tokens.char_spans[e.last_token];
        crate::textproc::char_slice(question, start, end)
    }
}

pub trait Annotator: Sync {
    fn annotate(&self, question: &str) -> AnnotatedQuestion;
}

#[derive(Debug, Deserialize)]
struct AnnotatorData {
    pos: BTreeMap<String, Vec<String>>,
    entities: BTreeMap<String, String>,
}

/// Word-list tagger plus longest-match gazetteer lookup. Four-digit tokens
/// are additionally tagged as `YEAR` entities.
pub struct GazetteerAnnotator {
    pos: HashMap<String, PosTag>,
    /// first lowercased token -> candidate (token sequence, type), longest first
    gazetteer: HashMap<String, Vec<(Vec<String>, String)>>,
}

impl GazetteerAnnotator {
    pub fn from_json(json: &str) -> Result<GazetteerAnnotator> {
        let data: AnnotatorData =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("annotator data: {e}")))?;
        let mut pos = HashMap::new();
        for (tag_name, words) in &data.pos {
            let tag = match tag_name.as_str() {
                "verb" => PosTag::Verb,
                "noun" => PosTag::Noun,
                "adj" => PosTag::Adj,
                "adv" => PosTag::Adv,
                other => {
                    return Err(Error::Config(format!("unknown pos list '{other}'")));
                }
            };
            for w in words {
                pos.entry(w.to_lowercase()).or_insert(tag);
            }
        }
        let mut gazetteer: HashMap<String, Vec<(Vec<String>, String)>> = HashMap::new();
        for (surface, etype) in &data.entities {
            let (tokens, _) = split_tokens(surface);
            if tokens.is_empty() {
                continue;
            }
            gazetteer
                .entry(tokens[0].clone())
                .or_default()
                .push((tokens, etype.clone()));
        }
        for entries in gazetteer.values_mut() {
            entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Ok(GazetteerAnnotator { pos, gazetteer })
    }
}

fn is_year_token(t: &str) -> bool {
    t.len() == 4 && t.chars().all(|c| c.is_ascii_digit())
}

impl Annotator for GazetteerAnnotator {
    fn annotate(&self, question: &str) -> AnnotatedQuestion {
        let (tokens, char_spans) = split_tokens(question);
        let pos_tags = tokens
            .iter()
            .map(|t| self.pos.get(t).copied().unwrap_or(PosTag::Other))
            .collect();

        let mut entities = Vec::new();
        let mut i = 0usize;
        while i < tokens.len() {
            let mut matched = false;
            if let Some(candidates) = self.gazetteer.get(&tokens[i]) {
                for (seq, etype) in candidates {
                    if i + seq.len() <= tokens.len() && tokens[i..i + seq.len()] == seq[..] {
                        entities.push(EntityMention {
                            first_token: i,
                            last_token: i + seq.len() - 1,
                            entity_type: etype.clone(),
                        });
                        i += seq.len();
                        matched = true;
                        break;
                    }
                }
            }
            if !matched {
                if is_year_token(&tokens[i]) {
                    entities.push(EntityMention {
                        first_token: i,
                        last_token: i,
                        entity_type: "YEAR".to_string(),
                    });
                }
                i += 1;
            }
        }

        let vocab_ids = vec![UNK_ID; tokens.len()];
        AnnotatedQuestion {
            tokens: TokenSequence {
                tokens,
                char_spans,
                vocab_ids,
            },
            pos_tags,
            entities,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DATA: &str = r#"{
        "pos": {
            "verb": ["lived", "arrived", "was"],
            "noun": ["people", "area", "pinnacles"],
            "adj": ["native", "enormous"],
            "adv": ["often"]
        },
        "entities": {
            "Europeans": "GROUP",
            "San Diego": "CITY",
            "San": "NAME"
        }
    }"#;

    #[test]
    fn tags_follow_word_lists() {
        let ann = GazetteerAnnotator::from_json(DATA).unwrap();
        let a = ann.annotate("What native people lived there?");
        assert_eq!(a.pos_tags[0], PosTag::Other); // what
        assert_eq!(a.pos_tags[1], PosTag::Adj); // native
        assert_eq!(a.pos_tags[2], PosTag::Noun); // people
        assert_eq!(a.pos_tags[3], PosTag::Verb); // lived
    }

    #[test]
    fn longest_gazetteer_match_wins() {
        let ann = GazetteerAnnotator::from_json(DATA).unwrap();
        let a = ann.annotate("Was San Diego near the Europeans?");
        let kinds: Vec<(&str, usize, usize)> = a
            .entities
            .iter()
            .map(|e| (e.entity_type.as_str(), e.first_token, e.last_token))
            .collect();
        assert_eq!(kinds, vec![("CITY", 1, 2), ("GROUP", 5, 5)]);
        assert_eq!(a.entity_surface("Was San Diego near the Europeans?", &a.entities[0]), "San Diego");
    }

    #[test]
    fn four_digit_tokens_become_years() {
        let ann = GazetteerAnnotator::from_json(DATA).unwrap();
        let a = ann.annotate("In 1908 the games began; 42 did not.");
        assert_eq!(a.entities.len(), 1);
        assert_eq!(a.entities[0].entity_type, "YEAR");
        assert_eq!(a.entity_surface("In 1908 the games began; 42 did not.", &a.entities[0]), "1908");
    }
}
