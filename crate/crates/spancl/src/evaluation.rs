//! Official-style exact-match and token-F1 metrics with answerability slicing.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// EM/F1 percentages overall and per answerability slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact: f64,
    pub f1: f64,
    pub has_ans_exact: f64,
    pub has_ans_f1: f64,
    pub no_ans_exact: f64,
    pub no_ans_f1: f64,
    pub total: usize,
    pub has_ans_count: usize,
    pub no_ans_count: usize,
}

/// Lowercase, strip punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .map(|c| if is_punct(c) { ' ' } else { c })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

// ASCII punctuation set used by the reference SQuAD scorer.
fn is_punct(c: char) -> bool {
    matches!(c,
        '!' | '"' | '#' | '$' | '%' | '&' | '\'' | '(' | ')' | '*' | '+' | ',' | '-' | '.'
        | '/' | ':' | ';' | '<' | '=' | '>' | '?' | '@' | '[' | '\\' | ']' | '^' | '_' | '`'
        | '{' | '|' | '}' | '~')
}

/// 1 iff the normalized prediction equals any normalized gold answer.
/// An empty gold set means unanswerable: correct iff the prediction
/// normalizes to empty.
pub fn exact_match(prediction: &str, gold_answers: &[String]) -> u32 {
    let pred = normalize_answer(prediction);
    let golds = effective_golds(gold_answers);
    if golds.is_empty() {
        return u32::from(pred.is_empty());
    }
    u32::from(golds.iter().any(|g| *g == pred))
}

/// Token-level bag-overlap F1, maximized over gold answers.
pub fn f1_score(prediction: &str, gold_answers: &[String]) -> f64 {
    let pred = normalize_answer(prediction);
    let golds = effective_golds(gold_answers);
    if golds.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    golds
        .iter()
        .map(|g| pair_f1(&pred, g))
        .fold(0.0, f64::max)
}

// Golds that normalize to empty are treated as absent, mirroring the
// reference scorer; if none remain the question counts as unanswerable.
fn effective_golds(gold_answers: &[String]) -> Vec<String> {
    gold_answers
        .iter()
        .map(|g| normalize_answer(g))
        .filter(|g| !g.is_empty())
        .collect()
}

fn pair_f1(pred_norm: &str, gold_norm: &str) -> f64 {
    let pred_tokens: Vec<&str> = pred_norm.split_whitespace().collect();
    let gold_tokens: Vec<&str> = gold_norm.split_whitespace().collect();
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return f64::from(pred_tokens.is_empty() && gold_tokens.is_empty());
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in &gold_tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &pred_tokens {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_tokens.len() as f64;
    let recall = overlap as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Score a prediction map against a corpus, slicing by answerability.
///
/// Every question in the corpus must have a prediction; percentages are
/// rounded to two decimals.
pub fn evaluate(predictions: &BTreeMap<String, String>, corpus: &Corpus) -> Result<EvalReport> {
    let missing: Vec<String> = corpus
        .examples
        .iter()
        .filter(|ex| !predictions.contains_key(&ex.id))
        .map(|ex| ex.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }

    let mut sums = [(0.0f64, 0.0f64, 0usize); 2]; // [has_ans, no_ans] -> (em, f1, n)
    for ex in &corpus.examples {
        let pred = &predictions[&ex.id];
        let golds: Vec<String> = if ex.answerable {
            ex.answers.iter().map(|a| a.text.clone()).collect()
        } else {
            Vec::new()
        };
        let em = exact_match(pred, &golds) as f64;
        let f1 = f1_score(pred, &golds);
        let slot = if ex.answerable { 0 } else { 1 };
        sums[slot].0 += em;
        sums[slot].1 += f1;
        sums[slot].2 += 1;
    }

    let pct = |sum: f64, n: usize| if n == 0 { 0.0 } else { round2(100.0 * sum / n as f64) };
    let total = sums[0].2 + sums[1].2;
    let overall_em = sums[0].0 + sums[1].0;
    let overall_f1 = sums[0].1 + sums[1].1;
    Ok(EvalReport {
        exact: pct(overall_em, total),
        f1: pct(overall_f1, total),
        has_ans_exact: pct(sums[0].0, sums[0].2),
        has_ans_f1: pct(sums[0].1, sums[0].2),
        no_ans_exact: pct(sums[1].0, sums[1].2),
        no_ans_f1: pct(sums[1].1, sums[1].2),
        total,
        has_ans_count: sums[0].2,
        no_ans_count: sums[1].2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnswerSpan, Corpus, Passage, QAExample};
    use proptest::prelude::*;

    fn golds(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_drops_articles_and_punct() {
        assert_eq!(normalize_answer("The Twilight Saga"), "twilight saga");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("2005."), "2005");
        assert_eq!(normalize_answer("  a   An THE  "), "");
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match("2005", &golds(&["2005"])), 1);
        assert_eq!(exact_match("in 2005", &golds(&["2005"])), 0);
        assert_eq!(exact_match("", &[]), 1);
        assert_eq!(exact_match("anything", &[]), 0);
    }

    #[test]
    fn f1_partial_overlap() {
        let f1 = f1_score("in 2005", &golds(&["2005"]));
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_score("exact words", &golds(&["exact words"])), 1.0);
        assert_eq!(f1_score("alpha beta", &golds(&["gamma delta"])), 0.0);
        assert_eq!(f1_score("", &[]), 1.0);
    }

    #[test]
    fn f1_uses_multiset_overlap() {
        // prediction repeats a token; only one copy matches the gold bag
        let f1 = f1_score("year year", &golds(&["year 2005"]));
        // overlap 1, precision 1/2, recall 1/2
        assert!((f1 - 0.5).abs() < 1e-12);
    }

    fn mini_corpus(spec: &[(&str, bool, &[&str])]) -> Corpus {
        let passage = Passage {
            id: "p0".into(),
            title: "t".into(),
            text: "irrelevant context".into(),
        };
        let examples = spec
            .iter()
            .map(|(id, answerable, answers)| QAExample {
                id: id.to_string(),
                passage_id: "p0".into(),
                question: format!("q {id}"),
                answerable: *answerable,
                answers: answers
                    .iter()
                    .map(|a| AnswerSpan {
                        text: a.to_string(),
                        answer_char_start: 0,
                    })
                    .collect(),
                plausible_answers: vec![],
            })
            .collect();
        Corpus {
            passages: vec![passage],
            examples,
        }
    }

    #[test]
    fn evaluate_all_correct_is_100() {
        let corpus = mini_corpus(&[("q1", true, &["x"]), ("q2", false, &[])]);
        let mut preds = BTreeMap::new();
        preds.insert("q1".into(), "x".into());
        preds.insert("q2".into(), "".into());
        let r = evaluate(&preds, &corpus).unwrap();
        assert_eq!(r.exact, 100.0);
        assert_eq!(r.f1, 100.0);
        assert_eq!(r.has_ans_exact, 100.0);
        assert_eq!(r.no_ans_exact, 100.0);
    }

    #[test]
    fn evaluate_all_empty_on_half_unanswerable() {
        let corpus = mini_corpus(&[
            ("q1", true, &["x"]),
            ("q2", true, &["y"]),
            ("q3", false, &[]),
            ("q4", false, &[]),
        ]);
        let preds: BTreeMap<String, String> = ["q1", "q2", "q3", "q4"]
            .iter()
            .map(|id| (id.to_string(), String::new()))
            .collect();
        let r = evaluate(&preds, &corpus).unwrap();
        assert_eq!(r.exact, 50.0);
        assert_eq!(r.no_ans_exact, 100.0);
        assert_eq!(r.has_ans_exact, 0.0);
    }

    #[test]
    fn evaluate_rejects_missing_ids() {
        let corpus = mini_corpus(&[("q1", true, &["x"]), ("q2", false, &[])]);
        let mut preds = BTreeMap::new();
        preds.insert("q1".into(), "x".into());
        match evaluate(&preds, &corpus) {
            Err(Error::MissingPredictions(ids)) => assert_eq!(ids, vec!["q2".to_string()]),
            other => panic!("expected missing-prediction error, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_six_question_hand_scored_fixture() {
        // Hand scoring:
        //   q1 pred "2005"      gold "2005"          -> EM 1, F1 1
        //   q2 pred "in 2005"   gold "2005"          -> EM 0, F1 2/3
        //   q3 pred ""          unanswerable         -> EM 1, F1 1
        //   q4 pred "plausible" unanswerable         -> EM 0, F1 0
        //   q5 pred "the saga"  gold "Saga"          -> EM 1, F1 1 (articles drop)
        //   q6 pred "red fox"   gold "swift red fox" -> EM 0, F1 2*(1*(2/3))/(1+2/3) = 0.8
        // HasAns (q1,q2,q5,q6): EM 2/4 = 50.00, F1 (1 + 2/3 + 1 + 0.8)/4 = 86.67
        // NoAns  (q3,q4):       EM 1/2 = 50.00, F1 50.00
        // Overall: EM 3/6 = 50.00, F1 (1 + 2/3 + 1 + 0 + 1 + 0.8)/6 = 74.44
        let corpus = mini_corpus(&[
            ("q1", true, &["2005"]),
            ("q2", true, &["2005"]),
            ("q3", false, &[]),
            ("q4", false, &[]),
            ("q5", true, &["Saga"]),
            ("q6", true, &["swift red fox"]),
        ]);
        let preds: BTreeMap<String, String> = [
            ("q1", "2005"),
            ("q2", "in 2005"),
            ("q3", ""),
            ("q4", "plausible"),
            ("q5", "the saga"),
            ("q6", "red fox"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let r = evaluate(&preds, &corpus).unwrap();
        assert_eq!(r.exact, 50.0);
        assert_eq!(r.f1, 74.44);
        assert_eq!(r.has_ans_exact, 50.0);
        assert_eq!(r.has_ans_f1, 86.67);
        assert_eq!(r.no_ans_exact, 50.0);
        assert_eq!(r.no_ans_f1, 50.0);
        assert_eq!((r.total, r.has_ans_count, r.no_ans_count), (6, 4, 2));
    }

    #[test]
    fn overall_is_weighted_slice_mean() {
        let corpus = mini_corpus(&[
            ("q1", true, &["x"]),
            ("q2", true, &["y"]),
            ("q3", true, &["z"]),
            ("q4", false, &[]),
        ]);
        let preds: BTreeMap<String, String> = [("q1", "x"), ("q2", "wrong"), ("q3", "z"), ("q4", "")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let r = evaluate(&preds, &corpus).unwrap();
        let weighted = (r.has_ans_exact * r.has_ans_count as f64
            + r.no_ans_exact * r.no_ans_count as f64)
            / r.total as f64;
        assert!((r.exact - weighted).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn em_implies_perfect_f1(pred in "[ a-z0-9]{0,20}", gold in "[ a-z0-9]{1,20}") {
            let golds = vec![gold];
            let em = exact_match(&pred, &golds);
            let f1 = f1_score(&pred, &golds);
            prop_assert!(f1 >= em as f64 - 1e-12);
            if em == 1 {
                prop_assert!((f1 - 1.0).abs() < 1e-12);
            }
        }
    }
}
