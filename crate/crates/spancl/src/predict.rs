//! End-to-end answer prediction: windowing, encoding, decoding, and
//! multi-window aggregation, emitting the official id -> answer-string map
//! (empty string for no-answer).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::{encode, ModelParams};
use crate::error::{Error, Result};
use crate::spanhead::{resolve, start_end_logits, window_scores, SpanPrediction, WindowScores};
use crate::textproc::{char_slice, make_windows, TokenSequence, Vocab};

/// Windowing and decoding settings for inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictConfig {
    pub max_seq_len: usize,
    pub doc_stride: usize,
    pub max_query_len: usize,
    pub max_answer_len: usize,
    pub null_threshold: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            max_seq_len: 512,
            doc_stride: 128,
            max_query_len: 64,
            max_answer_len: 30,
            null_threshold: 0.0,
        }
    }
}

/// Predict the answer string for one question against its passage tokens.
pub fn predict_question(
    params: &ModelParams,
    question: &TokenSequence,
    passage: &TokenSequence,
    passage_text: &str,
    cfg: &PredictConfig,
) -> Result<String> {
    let max_seq_len = cfg.max_seq_len.min(params.config.max_seq_len);
    let max_query_len = cfg.max_query_len.min(max_seq_len.saturating_sub(4));
    let windows = make_windows(question, passage, None, max_seq_len, cfg.doc_stride, max_query_len)?;
    let w_start: Vec<f64> = params.tensor("span.ws").iter().cloned().collect();
    let w_end: Vec<f64> = params.tensor("span.we").iter().cloned().collect();

    let mut scored: Vec<WindowScores> = Vec::with_capacity(windows.len());
    for w in &windows {
        let out = encode(params, w)?;
        let (s, e) = start_end_logits(out.hidden.view(), &w_start, &w_end, out.valid_len);
        scored.push(window_scores(
            &s,
            &e,
            w.passage_token_offset,
            w.passage_end(),
            cfg.max_answer_len,
        ));
    }

    let (pred, score) = resolve(&scored, cfg.null_threshold);
    match pred {
        SpanPrediction::NoAnswer => Ok(String::new()),
        SpanPrediction::Span { start, end } => {
            let widx = crate::spanhead::winning_window(&scored, start, end, score);
            let w = &windows[widx];
            let t_start = w.to_passage_index(start).ok_or_else(|| {
                Error::Input(format!("decoded start {start} outside window slice"))
            })?;
            let t_end = w
                .to_passage_index(end)
                .ok_or_else(|| Error::Input(format!("decoded end {end} outside window slice")))?;
            let (cs, _) = passage.char_spans[t_start];
            let (_, ce) = passage.char_spans[t_end];
            Ok(char_slice(passage_text, cs, ce))
        }
    }
}

/// Predictions for every question in a corpus, keyed by question id.
pub fn predict_all(
    params: &ModelParams,
    vocab: &Vocab,
    corpus: &Corpus,
    cfg: &PredictConfig,
) -> Result<BTreeMap<String, String>> {
    let passages: HashMap<&str, TokenSequence> = corpus
        .passages
        .iter()
        .map(|p| (p.id.as_str(), vocab.tokenize(&p.text)))
        .collect();

    let entries: Vec<Result<(String, String)>> = corpus
        .examples
        .par_iter()
        .map(|ex| {
            let passage_tokens = passages.get(ex.passage_id.as_str()).ok_or_else(|| {
                Error::Input(format!("question {} references unknown passage", ex.id))
            })?;
            let passage_text = &corpus.passage(&ex.passage_id).expect("indexed above").text;
            let question = vocab.tokenize(&ex.question);
            let answer =
                predict_question(params, &question, passage_tokens, passage_text, cfg)?;
            Ok((ex.id.clone(), answer))
        })
        .collect();

    let mut out = BTreeMap::new();
    for entry in entries {
        let (id, answer) = entry?;
        out.insert(id, answer);
    }
    Ok(out)
}

/// Official prediction-file format: a JSON object mapping id to answer.
pub fn save_predictions(predictions: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(predictions)
        .map_err(|e| Error::Input(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<BTreeMap<String, String>> {
    let content = std::fs::read_to_string(path)?;
    serde_json::from_str(&content).map_err(|e| Error::from_json(&e, &content))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_squad;
    use crate::encoder::EncoderConfig;

    const SRC: &str = r#"{"data":[{"title":"T","paragraphs":[{"context":"Ada visited Oslo in 1908.","qas":[
        {"id":"q1","question":"Which city did Ada visit?","is_impossible":false,
         "answers":[{"text":"Oslo","answer_start":12}]},
        {"id":"q2","question":"Which city did Bob visit?","is_impossible":true,
         "answers":[]}
    ]}]}]}"#;

    fn setup() -> (ModelParams, Vocab, Corpus) {
        let corpus = parse_squad(SRC).unwrap();
        let vocab = Vocab::build(
            corpus
                .passages
                .iter()
                .map(|p| p.text.as_str())
                .chain(corpus.question_texts()),
            1,
        );
        let config = EncoderConfig {
            vocab_size: vocab.len(),
            hidden_size: 16,
            layers: 1,
            heads: 2,
            max_seq_len: 64,
        };
        let params = ModelParams::init(config, false, 5).unwrap();
        (params, vocab, corpus)
    }

    #[test]
    fn predictions_cover_every_question() {
        let (params, vocab, corpus) = setup();
        let preds = predict_all(&params, &vocab, &corpus, &PredictConfig::default()).unwrap();
        assert_eq!(preds.len(), 2);
        assert!(preds.contains_key("q1") && preds.contains_key("q2"));
        // any produced span must be a literal slice of the passage
        for answer in preds.values() {
            if !answer.is_empty() {
                assert!(corpus.passages[0].text.contains(answer.as_str()));
            }
        }
    }

    #[test]
    fn predictions_are_deterministic() {
        let (params, vocab, corpus) = setup();
        let cfg = PredictConfig::default();
        let a = predict_all(&params, &vocab, &corpus, &cfg).unwrap();
        let b = predict_all(&params, &vocab, &corpus, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_null_threshold_forces_abstention() {
        let (params, vocab, corpus) = setup();
        let cfg = PredictConfig {
            null_threshold: 1e9,
            ..PredictConfig::default()
        };
        let preds = predict_all(&params, &vocab, &corpus, &cfg).unwrap();
        assert!(preds.values().all(|a| a.is_empty()));
    }

    #[test]
    fn prediction_file_round_trip() {
        let (params, vocab, corpus) = setup();
        let preds = predict_all(&params, &vocab, &corpus, &PredictConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.json");
        save_predictions(&preds, &path).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), preds);
    }
}
