//! Paraphrase candidates by back translation.
//!
//! A remote translator can be plugged in over HTTP; without one (or when it
//! fails) a deterministic offline emulation produces the three candidates via
//! seeded synonym substitution, prepositional-phrase fronting, and auxiliary
//! contraction.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::textproc::{char_slice, split_tokens};

/// Names sent as the `pivot` field of remote requests, one per candidate.
pub const PIVOTS: [&str; 3] = ["pivot-1", "pivot-2", "pivot-3"];

pub trait TranslatorClient: Sync {
    fn translate(&self, text: &str, pivot: &str) -> Result<String>;
}

/// HTTP client for the remote translator contract:
/// POST `{"text": ..., "pivot": ...}` -> `{"text": ...}`.
pub struct HttpTranslator {
    url: String,
    agent: ureq::Agent,
}

impl HttpTranslator {
    pub fn new(url: &str, timeout: Duration) -> HttpTranslator {
        let agent = ureq::AgentBuilder::new()
            .timeout_read(timeout)
            .timeout_write(timeout)
            .timeout_connect(timeout)
            .build();
        HttpTranslator {
            url: url.to_string(),
            agent,
        }
    }
}

#[derive(Deserialize)]
struct TranslateResponse {
    text: String,
}

impl TranslatorClient for HttpTranslator {
    fn translate(&self, text: &str, pivot: &str) -> Result<String> {
        let payload = serde_json::json!({ "text": text, "pivot": pivot }).to_string();
        let response = self
            .agent
            .post(&self.url)
            .set("content-type", "application/json")
            .send_string(&payload)
            .map_err(|e| Error::Input(format!("translator request failed: {e}")))?;
        let body: TranslateResponse = serde_json::from_reader(response.into_reader())
            .map_err(|e| Error::Input(format!("translator response: {e}")))?;
        Ok(body.text)
    }
}

/// Offline paraphrase emulation from a synonym table.
pub struct OfflineBackTranslator {
    synonyms: BTreeMap<String, Vec<String>>,
}

const FRONTABLE_PREPS: [&str; 6] = ["in", "at", "on", "during", "before", "after"];

const CONTRACTIONS: [(&str, &str); 7] = [
    ("what is", "what's"),
    ("who is", "who's"),
    ("where is", "where's"),
    ("when is", "when's"),
    ("how is", "how's"),
    ("did not", "didn't"),
    ("was not", "wasn't"),
];

impl OfflineBackTranslator {
    pub fn from_json(json: &str) -> Result<OfflineBackTranslator> {
        let synonyms: BTreeMap<String, Vec<String>> =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("synonym table: {e}")))?;
        Ok(OfflineBackTranslator { synonyms })
    }

    pub fn from_table(synonyms: BTreeMap<String, Vec<String>>) -> OfflineBackTranslator {
        OfflineBackTranslator { synonyms }
    }

    /// Replace every token that has a synonym entry; `variant` rotates the
    /// choice when a token has several synonyms.
    fn substitute(&self, question: &str, seed: u64, variant: usize) -> String {
        let (tokens, spans) = split_tokens(question);
        let mut out = String::new();
        let mut cursor = 0usize;
        for (tok, &(start, end)) in tokens.iter().zip(&spans) {
            out.push_str(&char_slice(question, cursor, start));
            let replaced = self.synonyms.get(tok).and_then(|options| {
                if options.is_empty() {
                    None
                } else {
                    let pick = (seed as usize).wrapping_add(variant) % options.len();
                    Some(options[pick].clone())
                }
            });
            match replaced {
                Some(syn) => out.push_str(&match_case(&char_slice(question, start, end), &syn)),
                None => out.push_str(&char_slice(question, start, end)),
            }
            cursor = end;
        }
        out.push_str(&char_slice(question, cursor, crate::textproc::char_len(question)));
        out
    }

    /// Move a short trailing prepositional phrase to the front:
    /// `"... in 1908?"` becomes `"In 1908, ...?"`.
    fn front_preposition(question: &str) -> Option<String> {
        let (tokens, spans) = split_tokens(question);
        if tokens.is_empty() {
            return None;
        }
        let has_qmark = tokens.last().map(|t| t == "?").unwrap_or(false);
        let body_end = if has_qmark { tokens.len() - 1 } else { tokens.len() };
        // last frontable preposition with a short, comma-free tail
        let prep_idx = (0..body_end)
            .rev()
            .find(|&i| i > 0 && FRONTABLE_PREPS.contains(&tokens[i].as_str()))?;
        let tail_tokens = body_end - prep_idx - 1;
        if tail_tokens == 0 || tail_tokens > 5 {
            return None;
        }
        if tokens[prep_idx + 1..body_end].iter().any(|t| t == ",") {
            return None;
        }

        let prep_start = spans[prep_idx].0;
        let tail_start = spans[prep_idx + 1].0;
        let tail_end = spans[body_end - 1].1;
        let head = char_slice(question, 0, prep_start);
        let head = head.trim_end();
        let prep = char_slice(question, prep_start, spans[prep_idx].1);
        let tail = char_slice(question, tail_start, tail_end);

        let mut fronted = String::new();
        fronted.push_str(&capitalize(&prep));
        fronted.push(' ');
        fronted.push_str(&tail);
        fronted.push_str(", ");
        fronted.push_str(&lowercase_first(head));
        if has_qmark {
            fronted.push('?');
        }
        Some(fronted)
    }

    fn contract(question: &str) -> Option<String> {
        let lower = question.to_lowercase();
        for (long, short) in CONTRACTIONS {
            if let Some(pos) = find_word_boundary(&lower, long) {
                let matched = char_slice(question, pos, pos + long.chars().count());
                let replacement = match_case(&matched, short);
                let mut out = char_slice(question, 0, pos);
                out.push_str(&replacement);
                out.push_str(&char_slice(
                    question,
                    pos + long.chars().count(),
                    crate::textproc::char_len(question),
                ));
                return Some(out);
            }
        }
        None
    }

    /// Exactly three candidates per question.
    pub fn candidates(&self, question: &str, seed: u64) -> Vec<String> {
        let substituted = self.substitute(question, seed, 0);
        let fronting_base = if substituted != question {
            substituted.clone()
        } else {
            question.to_string()
        };
        let fronted =
            Self::front_preposition(&fronting_base).unwrap_or_else(|| fronting_base.clone());
        let alt = self.substitute(question, seed, 1);
        let third = Self::contract(&alt).unwrap_or(alt);
        vec![substituted, fronted, third]
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn lowercase_first(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Mirror the leading capitalization of `original` onto `replacement`.
pub fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().next().is_some_and(|c| c.is_uppercase()) {
        capitalize(replacement)
    } else {
        replacement.to_string()
    }
}

/// Code-point index of `needle` in `haystack` at word boundaries, if any.
pub fn find_word_boundary(haystack: &str, needle: &str) -> Option<usize> {
    let hay: Vec<char> = haystack.chars().collect();
    let ned: Vec<char> = needle.chars().collect();
    if ned.is_empty() || ned.len() > hay.len() {
        return None;
    }
    for start in 0..=hay.len() - ned.len() {
        if hay[start..start + ned.len()] != ned[..] {
            continue;
        }
        let before_ok = start == 0 || !hay[start - 1].is_alphanumeric();
        let end = start + ned.len();
        let after_ok = end == hay.len() || !hay[end].is_alphanumeric();
        if before_ok && after_ok {
            return Some(start);
        }
    }
    None
}

/// Produce the three paraphrase candidates, preferring the remote client.
///
/// Any remote failure falls back to the offline emulation; the flag in the
/// result records that the provenance changed.
pub struct Candidates {
    pub texts: Vec<String>,
    pub used_offline_fallback: bool,
}

pub fn backtranslate_candidates(
    question: &str,
    remote: Option<&dyn TranslatorClient>,
    offline: &OfflineBackTranslator,
    seed: u64,
) -> Candidates {
    if let Some(client) = remote {
        let mut texts = Vec::with_capacity(PIVOTS.len());
        let mut ok = true;
        for pivot in PIVOTS {
            match client.translate(question, pivot) {
                Ok(text) => texts.push(text),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Candidates {
                texts,
                used_offline_fallback: false,
            };
        }
        return Candidates {
            texts: offline.candidates(question, seed),
            used_offline_fallback: true,
        };
    }
    Candidates {
        texts: offline.candidates(question, seed),
        used_offline_fallback: false,
    }
}
