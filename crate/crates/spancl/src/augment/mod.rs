//! Question augmentation: paraphrases (positives) and literal distortions
//! (negatives).
//!
//! Positives come from back translation (remote or offline emulation),
//! selecting the candidate with the most literal differences. Negatives come
//! from three strategies: negation insertion/removal, antonym substitution,
//! and entity replacement.

pub mod annotate;
pub mod backtranslate;

pub use annotate::{AnnotatedQuestion, Annotator, EntityMention, GazetteerAnnotator, PosTag};
pub use backtranslate::{
    backtranslate_candidates, Candidates, HttpTranslator, OfflineBackTranslator, TranslatorClient,
};

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::corpus::{NegSource, TripleAugmenter};
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, rng_for};
use crate::textproc::{char_len, char_slice, split_tokens};

use backtranslate::{find_word_boundary, match_case};

/// Built-in data files compiled into the library.
pub const BUILTIN_LEXICONS: &str = include_str!("../../data/lexicons.json");
pub const BUILTIN_ANNOTATOR: &str = include_str!("../../data/annotator.json");
pub const BUILTIN_SYNONYMS: &str = include_str!("../../data/synonyms.json");

/// Word lists backing the distortion strategies.
#[derive(Debug, Clone, Deserialize)]
pub struct AugmentLexicons {
    /// word -> antonym (never the word itself)
    pub antonyms: BTreeMap<String, String>,
    /// auxiliary -> negated surface form
    pub negation_forms: BTreeMap<String, String>,
    /// entity type -> replacement surface forms
    pub entity_pool: BTreeMap<String, Vec<String>>,
}

impl AugmentLexicons {
    pub fn from_json(json: &str) -> Result<AugmentLexicons> {
        let lex: AugmentLexicons =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("lexicons: {e}")))?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<AugmentLexicons> {
        let json = std::fs::read_to_string(path)?;
        AugmentLexicons::from_json(&json)
    }

    pub fn builtin() -> AugmentLexicons {
        AugmentLexicons::from_json(BUILTIN_LEXICONS).expect("builtin lexicons parse")
    }

    pub fn validate(&self) -> Result<()> {
        for (word, antonym) in &self.antonyms {
            if word == antonym {
                return Err(Error::Config(format!(
                    "antonym table maps '{word}' to itself"
                )));
            }
        }
        Ok(())
    }

    /// Drop every pool form whose token sequence occurs in any of the given
    /// questions, so replacements never collide with question vocabulary.
    pub fn restrict_entity_pool<'a>(&mut self, questions: impl Iterator<Item = &'a str>) {
        let question_tokens: Vec<Vec<String>> =
            questions.map(|q| split_tokens(q).0).collect();
        let occurs = |form: &str| -> bool {
            let (needle, _) = split_tokens(form);
            if needle.is_empty() {
                return true;
            }
            question_tokens.iter().any(|toks| {
                toks.windows(needle.len()).any(|w| w == needle.as_slice())
            })
        };
        for forms in self.entity_pool.values_mut() {
            forms.retain(|f| !occurs(f));
        }
    }
}

/// Levenshtein distance over token slices (unit insert/delete/substitute).
pub fn token_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut dist: Vec<usize> = (0..=b.len()).collect();
    for (i, ta) in a.iter().enumerate() {
        let mut diagonal = i;
        dist[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let next = (dist[j + 1] + 1)
                .min(dist[j] + 1)
                .min(diagonal + usize::from(ta != tb));
            diagonal = dist[j + 1];
            dist[j + 1] = next;
        }
    }
    dist[b.len()]
}

/// Pick the candidate with the most literal differences from the original;
/// ties break toward the earlier candidate. `None` when every candidate
/// matches the original token-for-token.
pub fn select_paraphrase(original: &str, candidates: &[String]) -> Option<String> {
    let (orig_tokens, _) = split_tokens(original);
    let mut best: Option<(usize, usize)> = None; // (distance, index)
    for (i, cand) in candidates.iter().enumerate() {
        let (cand_tokens, _) = split_tokens(cand);
        let d = token_edit_distance(&orig_tokens, &cand_tokens);
        if best.map_or(true, |(bd, _)| d > bd) {
            best = Some((d, i));
        }
    }
    match best {
        Some((d, i)) if d > 0 => Some(candidates[i].clone()),
        _ => None,
    }
}

fn splice(question: &str, start: usize, end: usize, replacement: &str) -> String {
    let mut out = char_slice(question, 0, start);
    out.push_str(replacement);
    out.push_str(&char_slice(question, end, char_len(question)));
    out
}

/// Insert or remove a negation: if a negated form (or a bare "not") is
/// present, restore the plain auxiliary; otherwise negate the first
/// auxiliary. Exactly one edit; `None` when no edit site exists.
pub fn negate(question: &str, annotated: &AnnotatedQuestion, lexicons: &AugmentLexicons) -> Option<String> {
    let lower = question.to_lowercase();

    // removal direction: earliest negated form in the text, longest first on ties
    let mut removal: Option<(usize, usize, String)> = None; // (pos, char_len, replacement)
    for (aux, negated) in &lexicons.negation_forms {
        if let Some(pos) = find_word_boundary(&lower, negated) {
            let len = negated.chars().count();
            let better = removal
                .as_ref()
                .map_or(true, |(p, l, _)| pos < *p || (pos == *p && len > *l));
            if better {
                removal = Some((pos, len, aux.clone()));
            }
        }
    }
    if let Some((pos, len, aux)) = removal {
        let matched = char_slice(question, pos, pos + len);
        return Some(splice(question, pos, pos + len, &match_case(&matched, &aux)));
    }
    if let Some(pos) = find_word_boundary(&lower, "not") {
        // drop the word plus its leading space when present
        let start = if pos > 0 && char_slice(question, pos - 1, pos) == " " {
            pos - 1
        } else {
            pos
        };
        return Some(splice(question, start, pos + 3, ""));
    }

    // insertion direction: first auxiliary token
    for (i, tok) in annotated.tokens.tokens.iter().enumerate() {
        if let Some(negated) = lexicons.negation_forms.get(tok) {
            let (s, e) = annotated.tokens.char_spans[i];
            let surface = char_slice(question, s, e);
            return Some(splice(question, s, e, &match_case(&surface, negated)));
        }
    }
    None
}

/// Replace one content word that has an antonym entry, chosen uniformly
/// under the seeded RNG.
pub fn antonym_swap(
    question: &str,
    annotated: &AnnotatedQuestion,
    lexicons: &AugmentLexicons,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let eligible: Vec<usize> = annotated
        .tokens
        .tokens
        .iter()
        .enumerate()
        .filter(|(i, tok)| {
            annotated.pos_tags[*i].is_content_word() && lexicons.antonyms.contains_key(*tok)
        })
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return None;
    }
    let idx = eligible[rng.gen_range(0..eligible.len())];
    let antonym = &lexicons.antonyms[&annotated.tokens.tokens[idx]];
    let (s, e) = annotated.tokens.char_spans[idx];
    let surface = char_slice(question, s, e);
    Some(splice(question, s, e, &match_case(&surface, antonym)))
}

/// Replace one detected entity with a same-type pool form, chosen uniformly
/// under the seeded RNG. The replacement never equals the original surface.
pub fn entity_replace(
    question: &str,
    annotated: &AnnotatedQuestion,
    lexicons: &AugmentLexicons,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let mut eligible: Vec<(&EntityMention, Vec<&String>)> = Vec::new();
    for mention in &annotated.entities {
        let surface = annotated.entity_surface(question, mention);
        let pool: Vec<&String> = lexicons
            .entity_pool
            .get(&mention.entity_type)
            .map(|forms| {
                forms
                    .iter()
                    .filter(|f| !f.eq_ignore_ascii_case(&surface))
                    .collect()
            })
            .unwrap_or_default();
        if !pool.is_empty() {
            eligible.push((mention, pool));
        }
    }
    if eligible.is_empty() {
        return None;
    }
    let (mention, pool) = &eligible[rng.gen_range(0..eligible.len())];
    let replacement = pool[rng.gen_range(0..pool.len())];
    let (s, _) = annotated.tokens.char_spans[mention.first_token];
    let (_, e) = annotated.tokens.char_spans[mention.last_token];
    Some(splice(question, s, e, replacement))
}

/// Try the three distortion strategies in seeded-random order until one
/// applies.
pub fn generate_negative(
    question: &str,
    annotated: &AnnotatedQuestion,
    lexicons: &AugmentLexicons,
    seed: u64,
) -> Option<(String, NegSource)> {
    let mut rng = rng_for(seed, "neg-strategy");
    let mut order = [NegSource::Negation, NegSource::Antonym, NegSource::Entity];
    order.shuffle(&mut rng);
    for strategy in order {
        let produced = match strategy {
            NegSource::Negation => negate(question, annotated, lexicons),
            NegSource::Antonym => antonym_swap(question, annotated, lexicons, &mut rng),
            NegSource::Entity => entity_replace(question, annotated, lexicons, &mut rng),
            _ => None,
        };
        if let Some(text) = produced {
            if text != question {
                return Some((text, strategy));
            }
        }
    }
    None
}

/// Full augmentation stack: annotation, lexicons, back translation, and the
/// per-question seeding that makes it all reproducible.
pub struct Augmenter {
    lexicons: AugmentLexicons,
    annotator: GazetteerAnnotator,
    offline: OfflineBackTranslator,
    remote: Option<Box<dyn TranslatorClient + Send>>,
    seed: u64,
    offline_fallbacks: AtomicUsize,
}

impl Augmenter {
    pub fn new(
        lexicons: AugmentLexicons,
        annotator: GazetteerAnnotator,
        offline: OfflineBackTranslator,
        remote: Option<Box<dyn TranslatorClient + Send>>,
        seed: u64,
    ) -> Augmenter {
        Augmenter {
            lexicons,
            annotator,
            offline,
            remote,
            seed,
            offline_fallbacks: AtomicUsize::new(0),
        }
    }

    /// Built-in lexicons and annotator, offline back translation only.
    pub fn builtin(seed: u64) -> Result<Augmenter> {
        Ok(Augmenter::new(
            AugmentLexicons::from_json(BUILTIN_LEXICONS)?,
            GazetteerAnnotator::from_json(BUILTIN_ANNOTATOR)?,
            OfflineBackTranslator::from_json(BUILTIN_SYNONYMS)?,
            None,
            seed,
        ))
    }

    pub fn lexicons(&self) -> &AugmentLexicons {
        &self.lexicons
    }

    pub fn lexicons_mut(&mut self) -> &mut AugmentLexicons {
        &mut self.lexicons
    }

    pub fn annotator(&self) -> &GazetteerAnnotator {
        &self.annotator
    }

    /// How many questions fell back from the remote translator to the
    /// offline path.
    pub fn offline_fallbacks(&self) -> usize {
        self.offline_fallbacks.load(Ordering::Relaxed)
    }

    fn question_seed(&self, qid: &str, stream: &str) -> u64 {
        derive_seed(self.seed, &format!("{stream}:{qid}"))
    }
}

impl TripleAugmenter for Augmenter {
    fn paraphrase(&self, question: &str, qid: &str) -> Option<String> {
        let seed = self.question_seed(qid, "paraphrase");
        let candidates = backtranslate_candidates(
            question,
            self.remote.as_ref().map(|c| c.as_ref() as &dyn TranslatorClient),
            &self.offline,
            seed,
        );
        if candidates.used_offline_fallback {
            self.offline_fallbacks.fetch_add(1, Ordering::Relaxed);
        }
        select_paraphrase(question, &candidates.texts)
    }

    fn negative(&self, question: &str, qid: &str) -> Option<(String, NegSource)> {
        let annotated = self.annotator.annotate(question);
        let seed = self.question_seed(qid, "negative");
        generate_negative(question, &annotated, &self.lexicons, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn builtin_annotated(question: &str) -> (AnnotatedQuestion, AugmentLexicons) {
        let annotator = GazetteerAnnotator::from_json(BUILTIN_ANNOTATOR).unwrap();
        (annotator.annotate(question), AugmentLexicons::builtin())
    }

    #[test]
    fn edit_distance_basics() {
        let a = ["what", "was", "x"].map(String::from);
        let b = ["what", "wasn't", "x"].map(String::from);
        assert_eq!(token_edit_distance(&a, &a), 0);
        assert_eq!(token_edit_distance(&a, &b), 1);
        assert_eq!(token_edit_distance::<String>(&[], &b), 3);
    }

    /// Exponential reference implementation for cross-checking.
    fn edit_distance_oracle(a: &[String], b: &[String]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = edit_distance_oracle(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = edit_distance_oracle(&a[1..], b) + 1;
        let ins = edit_distance_oracle(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn edit_distance_matches_recursive_oracle() {
        let mut rng = rng_for(12, "ed-oracle");
        let alphabet = ["a", "b", "c"];
        for _ in 0..60 {
            let mk = |rng: &mut ChaCha8Rng| -> Vec<String> {
                (0..rng.gen_range(0..6))
                    .map(|_| alphabet[rng.gen_range(0..3)].to_string())
                    .collect()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(token_edit_distance(&a, &b), edit_distance_oracle(&a, &b));
        }
    }

    #[test]
    fn paraphrase_selection_argmax_and_ties() {
        let original = "one two three";
        // distances [0, 2, 1] -> index 1
        let cands = vec![
            "one two three".to_string(),
            "one four five".to_string(),
            "one two four".to_string(),
        ];
        assert_eq!(select_paraphrase(original, &cands).as_deref(), Some("one four five"));
        // ties [2, 2] -> first
        let tied = vec!["four five three".to_string(), "one five six".to_string()];
        assert_eq!(
            select_paraphrase(original, &tied).as_deref(),
            Some("four five three")
        );
        // all identical -> failure
        let same = vec![original.to_string(), original.to_string()];
        assert_eq!(select_paraphrase(original, &same), None);
    }

    #[test]
    fn negation_insertion_matches_reference_example() {
        let q = "What was Beyonce's role in Destiny's Child?";
        let (annotated, lexicons) = builtin_annotated(q);
        assert_eq!(
            negate(q, &annotated, &lexicons).as_deref(),
            Some("What wasn't Beyonce's role in Destiny's Child?")
        );
    }

    #[test]
    fn negation_removal_direction() {
        let q = "What wasn't the plan?";
        let (annotated, lexicons) = builtin_annotated(q);
        assert_eq!(
            negate(q, &annotated, &lexicons).as_deref(),
            Some("What was the plan?")
        );
        let q2 = "Which cities did not grow?";
        let (a2, lex2) = builtin_annotated(q2);
        assert_eq!(negate(q2, &a2, &lex2).as_deref(), Some("Which cities did grow?"));
    }

    #[test]
    fn negation_inapplicable_without_auxiliary() {
        let q = "Which city?";
        let (annotated, lexicons) = builtin_annotated(q);
        assert_eq!(negate(q, &annotated, &lexicons), None);
    }

    #[test]
    fn antonym_swap_matches_reference_example() {
        let q = "What part of Gothic buildings are often found terminated with enormous pinnacles?";
        let (annotated, lexicons) = builtin_annotated(q);
        // "enormous" is the only eligible token, so any seed picks it
        for seed in [0u64, 1, 99] {
            let mut rng = rng_for(seed, "antonym-test");
            assert_eq!(
                antonym_swap(q, &annotated, &lexicons, &mut rng).as_deref(),
                Some(
                    "What part of Gothic buildings are often found terminated with small pinnacles?"
                )
            );
        }
    }

    #[test]
    fn antonym_inapplicable_without_entries() {
        let q = "Who wrote it?";
        let (annotated, lexicons) = builtin_annotated(q);
        let mut rng = rng_for(3, "antonym-test");
        assert_eq!(antonym_swap(q, &annotated, &lexicons, &mut rng), None);
    }

    #[test]
    fn entity_replacement_swaps_same_type() {
        let q = "What native people lived in the San Diego area before the Europeans arrived?";
        let (annotated, mut lexicons) = builtin_annotated(q);
        lexicons.restrict_entity_pool([q].into_iter());
        let mut seen_group_swap = false;
        for seed in 0..20u64 {
            let mut rng = rng_for(seed, "entity-test");
            let out = entity_replace(q, &annotated, &lexicons, &mut rng).unwrap();
            assert_ne!(out, q);
            if out == "What native people lived in the San Diego area before the Mexicans arrived?" {
                seen_group_swap = true;
            }
        }
        assert!(seen_group_swap, "GROUP pool should offer 'Mexicans'");
    }

    #[test]
    fn entity_replacement_inapplicable_cases() {
        let lexicons = AugmentLexicons::builtin();
        let annotator = GazetteerAnnotator::from_json(BUILTIN_ANNOTATOR).unwrap();
        // no entities at all
        let q = "Why did it happen?";
        let a = annotator.annotate(q);
        let mut rng = rng_for(5, "entity-test");
        assert_eq!(entity_replace(q, &a, &lexicons, &mut rng), None);
        // entity present but its type's pool is empty
        let mut empty_pool = lexicons.clone();
        empty_pool.entity_pool.clear();
        let q2 = "Did the Europeans arrive?";
        let a2 = annotator.annotate(q2);
        let mut rng2 = rng_for(5, "entity-test");
        assert_eq!(entity_replace(q2, &a2, &empty_pool, &mut rng2), None);
    }

    #[test]
    fn pool_restriction_removes_question_forms() {
        let mut lexicons = AugmentLexicons::builtin();
        lexicons.restrict_entity_pool(["Were the Mexicans in Oslo?"].into_iter());
        assert!(!lexicons.entity_pool["GROUP"].iter().any(|f| f == "Mexicans"));
        assert!(!lexicons.entity_pool["CITY"].iter().any(|f| f == "Oslo"));
        assert!(lexicons.entity_pool["GROUP"].iter().any(|f| f == "Canadians"));
    }

    #[test]
    fn generate_negative_is_deterministic_and_tagged() {
        let q = "What was Beyonce's role in Destiny's Child?";
        let (annotated, mut lexicons) = builtin_annotated(q);
        lexicons.restrict_entity_pool([q].into_iter());
        let a = generate_negative(q, &annotated, &lexicons, 11).unwrap();
        let b = generate_negative(q, &annotated, &lexicons, 11).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            a.1,
            NegSource::Negation | NegSource::Antonym | NegSource::Entity
        ));
    }

    #[test]
    fn generate_negative_fails_when_nothing_applies() {
        let q = "Why though?";
        let (annotated, lexicons) = builtin_annotated(q);
        assert_eq!(generate_negative(q, &annotated, &lexicons, 1), None);
    }

    #[test]
    fn negatives_share_most_tokens_with_original() {
        // subtle-change property over a batch of generated fixtures
        let questions = [
            "What was Beyonce's role in Destiny's Child?",
            "What part of Gothic buildings are often found terminated with enormous pinnacles?",
            "What native people lived in the San Diego area before the Europeans arrived?",
            "When did the Europeans arrive in London?",
            "Was the enormous tower in Paris built in 1908?",
        ];
        let annotator = GazetteerAnnotator::from_json(BUILTIN_ANNOTATOR).unwrap();
        let mut lexicons = AugmentLexicons::builtin();
        lexicons.restrict_entity_pool(questions.iter().copied());
        let mut produced = 0;
        for (i, q) in questions.iter().enumerate() {
            let annotated = annotator.annotate(q);
            if let Some((neg, _)) = generate_negative(q, &annotated, &lexicons, i as u64) {
                produced += 1;
                let (orig_tokens, _) = split_tokens(q);
                let (neg_tokens, _) = split_tokens(&neg);
                let d = token_edit_distance(&orig_tokens, &neg_tokens);
                assert!(d >= 1);
                let shared = orig_tokens.iter().filter(|t| neg_tokens.contains(t)).count();
                assert!(
                    shared * 2 >= orig_tokens.len(),
                    "negative '{neg}' shares too few tokens with '{q}'"
                );
            }
        }
        assert!(produced >= 4);
    }

    #[test]
    fn augmenter_paraphrase_is_deterministic_and_different() {
        let augmenter = Augmenter::builtin(7).unwrap();
        let q = "When did the film come out?";
        let a = augmenter.paraphrase(q, "q1");
        let b = augmenter.paraphrase(q, "q1");
        assert_eq!(a, b);
        let p = a.expect("builtin synonyms cover 'film'");
        assert_ne!(p, q);
        let (orig_tokens, _) = split_tokens(q);
        let (p_tokens, _) = split_tokens(&p);
        assert!(token_edit_distance(&orig_tokens, &p_tokens) >= 1);
    }
}
