//! Optimization loop: triple batch semantics, the three training schemes,
//! Adam with linear warmup/decay, and reproducible step logging.
//!
//! Per step, each triple is run through the shared encoder three times
//! (anchor, paraphrase, distortion). The span loss averages the anchor (gold
//! label) and the distortion (null label); the paraphrase feeds only the
//! contrastive term.

use std::collections::{HashMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape};
use crate::contrastive::{
    answerability_logit_on_tape, cls_representation_on_tape, span_representation_on_tape,
    spancl_on_tape, LossWeights, RepresentationMode,
};
use crate::corpus::{ContrastiveTriple, Corpus, NegSource};
use crate::encoder::{
    accumulate_bound_grads, encode, encode_on_tape, zero_grads, EncoderConfig, ModelParams,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::predict::{predict_all, PredictConfig};
use crate::seeds::rng_for;
use crate::spanhead::{span_logits_on_tape, span_loss_on_tape};
use crate::textproc::{align_answer, make_windows, FeatureWindow, TokenSequence, Vocab};

/// How the span and contrastive losses are scheduled across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Joint,
    Alternate,
    PretrainFinetune,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Joint => "joint",
            Scheme::Alternate => "alternate",
            Scheme::PretrainFinetune => "pretrain_finetune",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Scheme::Joint),
            "alternate" => Ok(Scheme::Alternate),
            "pretrain_finetune" | "pretrain-finetune" => Ok(Scheme::PretrainFinetune),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}' (expected joint|alternate|pretrain_finetune)"
            ))),
        }
    }
}

/// Losses active at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveLosses {
    pub span: bool,
    pub spancl: bool,
}

/// Scheme schedule: joint runs both losses every step; alternate inserts one
/// contrastive-only step after each block of `m` span-only steps;
/// pretrain-finetune runs contrastive-only before `phase_boundary` and
/// span-only after.
pub fn select_active_losses(
    step_index: usize,
    scheme: Scheme,
    m: usize,
    phase_boundary: usize,
) -> ActiveLosses {
    match scheme {
        Scheme::Joint => ActiveLosses {
            span: true,
            spancl: true,
        },
        Scheme::Alternate => {
            let pos = step_index % (m + 1);
            if pos < m {
                ActiveLosses {
                    span: true,
                    spancl: false,
                }
            } else {
                ActiveLosses {
                    span: false,
                    spancl: true,
                }
            }
        }
        Scheme::PretrainFinetune => {
            if step_index < phase_boundary {
                ActiveLosses {
                    span: false,
                    spancl: true,
                }
            } else {
                ActiveLosses {
                    span: true,
                    spancl: false,
                }
            }
        }
    }
}

/// Full training configuration. Defaults follow the full-scale recipe
/// (learning rate 2e-5, batch 12, 2 epochs, warmup 0.1, temperature 0.05,
/// equal loss weights, 512/128/64/30 windowing); `toy()` switches to the
/// desk-scale recipe used with the built-in reference encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Items (triples or singles) per optimization step.
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub scheme: Scheme,
    /// Alternate-scheme interval M.
    pub m_interval: usize,
    /// Fraction of total steps spent in the contrastive pretraining phase.
    pub pretrain_fraction: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub rep_mode: RepresentationMode,
    /// Extend the contrastive denominator with the other in-batch negatives.
    pub in_batch_negatives: bool,
    pub max_seq_len: usize,
    pub doc_stride: usize,
    pub max_query_len: usize,
    pub max_answer_len: usize,
    pub null_threshold: f64,
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 12,
            epochs: 2,
            warmup_fraction: 0.1,
            scheme: Scheme::Joint,
            m_interval: 2,
            pretrain_fraction: 0.5,
            seed: 42,
            weights: LossWeights::default(),
            rep_mode: RepresentationMode::Span,
            in_batch_negatives: false,
            max_seq_len: 512,
            doc_stride: 128,
            max_query_len: 64,
            max_answer_len: 30,
            null_threshold: 0.0,
            hidden_size: 64,
            layers: 2,
            heads: 4,
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe: larger steps, more epochs, same objective.
    pub fn toy() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.m_interval == 0 {
            return Err(Error::Config("alternate interval M must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup fraction must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_query_len + 3 >= self.max_seq_len {
            return Err(Error::Config(format!(
                "max_query_len {} leaves no passage budget under max_seq_len {}",
                self.max_query_len, self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig {
            max_seq_len: self.max_seq_len,
            doc_stride: self.doc_stride,
            max_query_len: self.max_query_len,
            max_answer_len: self.max_answer_len,
            null_threshold: self.null_threshold,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden_size: self.hidden_size,
            layers: self.layers,
            heads: self.heads,
            max_seq_len: self.max_seq_len,
        }
    }
}

/// One encoded input of a triple, with the gold span mapped into its own
/// sequence coordinates.
#[derive(Debug, Clone)]
pub struct MemberInput {
    pub window: FeatureWindow,
    pub gold_seq: (usize, usize),
}

/// One contrastive training item.
#[derive(Debug, Clone)]
pub struct TripleItem {
    pub org: MemberInput,
    pub pos: MemberInput,
    pub neg: MemberInput,
}

/// A plain span-loss item (unanswerable question, or an answerable one that
/// has no triple).
#[derive(Debug, Clone)]
pub struct SingleItem {
    pub window: FeatureWindow,
    pub label: (usize, usize),
    pub answerable: bool,
}

#[derive(Debug, Clone)]
pub enum TrainItem {
    Triple(TripleItem),
    Single(SingleItem),
}

/// Prepared training stream plus preparation accounting.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub items: Vec<TrainItem>,
    /// Triples dropped because some member had no window fully containing
    /// the gold span.
    pub skipped_alignment: usize,
}

impl TrainData {
    pub fn triple_count(&self) -> usize {
        self.items
            .iter()
            .filter(|i| matches!(i, TrainItem::Triple(_)))
            .count()
    }
}

fn member_input(
    question: &TokenSequence,
    passage: &TokenSequence,
    gold: (usize, usize),
    config: &TrainConfig,
) -> Result<Option<MemberInput>> {
    let windows = make_windows(
        question,
        passage,
        Some(gold),
        config.max_seq_len,
        config.doc_stride,
        config.max_query_len,
    )?;
    Ok(windows.into_iter().find(|w| w.has_answer_label()).map(|w| {
        let gold_seq = w.label_span;
        MemberInput {
            window: w,
            gold_seq,
        }
    }))
}

/// Turn triples plus the remaining corpus questions into the training
/// stream: triples first (input order), then leftover singles ordered by
/// question id. A triple is usable only when all three members have a window
/// fully containing the gold span.
pub fn prepare_training_data(
    corpus: &Corpus,
    triples: &[ContrastiveTriple],
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<TrainData> {
    let mut passage_tokens: HashMap<&str, TokenSequence> = HashMap::new();
    for p in &corpus.passages {
        passage_tokens.insert(p.id.as_str(), vocab.tokenize(&p.text));
    }

    let mut data = TrainData::default();

    // questions consumed as dataset-native negatives
    let dataset_negatives: HashSet<(&str, &str)> = triples
        .iter()
        .filter(|t| t.neg_source == NegSource::Dataset)
        .map(|t| (t.passage_id.as_str(), t.q_neg.as_str()))
        .collect();
    // answerable questions covered by a triple
    let covered: HashSet<(&str, &str)> = triples
        .iter()
        .map(|t| (t.passage_id.as_str(), t.q_org.as_str()))
        .collect();

    for t in triples {
        let tokens = passage_tokens.get(t.passage_id.as_str()).ok_or_else(|| {
            Error::Validation {
                id: t.q_org.clone(),
                message: format!("triple references unknown passage '{}'", t.passage_id),
            }
        })?;
        let gold = align_answer(tokens, t.answer_char_start, &t.answer_text)?;
        let org = member_input(&vocab.tokenize(&t.q_org), tokens, gold, config)?;
        let pos = member_input(&vocab.tokenize(&t.q_pos), tokens, gold, config)?;
        let neg = member_input(&vocab.tokenize(&t.q_neg), tokens, gold, config)?;
        match (org, pos, neg) {
            (Some(org), Some(pos), Some(neg)) => {
                data.items.push(TrainItem::Triple(TripleItem { org, pos, neg }));
            }
            _ => data.skipped_alignment += 1,
        }
    }

    let mut leftovers: Vec<&crate::corpus::QAExample> = corpus
        .examples
        .iter()
        .filter(|ex| {
            let key = (ex.passage_id.as_str(), ex.question.as_str());
            if ex.answerable {
                !covered.contains(&key)
            } else {
                !dataset_negatives.contains(&key)
            }
        })
        .collect();
    leftovers.sort_by(|a, b| a.id.cmp(&b.id));

    for ex in leftovers {
        let tokens = match passage_tokens.get(ex.passage_id.as_str()) {
            Some(t) => t,
            None => continue,
        };
        let question = vocab.tokenize(&ex.question);
        if ex.answerable {
            let gold_answer = ex.training_answer().expect("answerable implies answers");
            let gold = align_answer(tokens, gold_answer.answer_char_start, &gold_answer.text)?;
            match member_input(&question, tokens, gold, config)? {
                Some(member) => data.items.push(TrainItem::Single(SingleItem {
                    label: member.gold_seq,
                    window: member.window,
                    answerable: true,
                })),
                None => data.skipped_alignment += 1,
            }
        } else {
            let mut windows = make_windows(
                &question,
                tokens,
                None,
                config.max_seq_len,
                config.doc_stride,
                config.max_query_len,
            )?;
            if windows.is_empty() {
                continue;
            }
            data.items.push(TrainItem::Single(SingleItem {
                window: windows.remove(0),
                label: (0, 0),
                answerable: false,
            }));
        }
    }

    Ok(data)
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: usize,
}

impl Adam {
    fn new(params: &ModelParams) -> Adam {
        Adam {
            m: zero_grads(params),
            v: zero_grads(params),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Matrix], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut deltas = Vec::with_capacity(grads.len());
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let mut delta = m.clone();
            delta.zip_mut_with(v, |d, &v| {
                let mhat = *d / bc1;
                let vhat = v / bc2;
                *d = lr * mhat / (vhat.sqrt() + ADAM_EPS);
            });
            deltas.push(delta);
        }
        params.apply_deltas(&deltas);
    }
}

/// Linear warmup to the base rate, then linear decay to zero.
pub fn learning_rate_at(step: usize, total_steps: usize, warmup_fraction: f64, base: f64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let warmup = (warmup_fraction * total_steps as f64).floor() as usize;
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else if total_steps > warmup {
        base * (total_steps - step) as f64 / (total_steps - warmup) as f64
    } else {
        base
    }
}

// ---------------------------------------------------------------------------
// Step computation
// ---------------------------------------------------------------------------

/// Scaling applied to each loss term inside one step.
#[derive(Debug, Clone, Copy)]
struct TermWeights {
    span: f64,
    spancl: f64,
    bce: f64,
}

#[derive(Debug, Default, Clone)]
struct ItemMetrics {
    span_sum: f64,
    span_units: usize,
    cl_sum: f64,
    cl_units: usize,
    bce_sum: f64,
    bce_units: usize,
    margin_sum: f64,
    margin_count: usize,
    cl_skipped: usize,
}

impl ItemMetrics {
    fn merge(&mut self, other: &ItemMetrics) {
        self.span_sum += other.span_sum;
        self.span_units += other.span_units;
        self.cl_sum += other.cl_sum;
        self.cl_units += other.cl_units;
        self.bce_sum += other.bce_sum;
        self.bce_units += other.bce_units;
        self.margin_sum += other.margin_sum;
        self.margin_count += other.margin_count;
        self.cl_skipped += other.cl_skipped;
    }
}

struct EncodedMember {
    hidden: crate::autodiff::NodeId,
    valid_len: usize,
}

fn encode_member(
    tape: &mut Tape,
    bound: &crate::encoder::BoundParams,
    config: &EncoderConfig,
    member: &MemberInput,
) -> Result<EncodedMember> {
    let valid_len = member.window.valid_len();
    let hidden = encode_on_tape(tape, bound, config, &member.window.input_ids, valid_len)?;
    Ok(EncodedMember { hidden, valid_len })
}

/// Representation pairs feeding the contrastive loss for one triple under a
/// mode: span reps, cls reps, or both.
fn contrastive_reps(
    tape: &mut Tape,
    mode: RepresentationMode,
    item: &TripleItem,
    org: &EncodedMember,
    pos: &EncodedMember,
    neg: &EncodedMember,
) -> Vec<[crate::autodiff::NodeId; 3]> {
    let mut sets = Vec::new();
    if matches!(mode, RepresentationMode::Span | RepresentationMode::Both) {
        sets.push([
            span_representation_on_tape(tape, org.hidden, item.org.gold_seq.0, item.org.gold_seq.1),
            span_representation_on_tape(tape, pos.hidden, item.pos.gold_seq.0, item.pos.gold_seq.1),
            span_representation_on_tape(tape, neg.hidden, item.neg.gold_seq.0, item.neg.gold_seq.1),
        ]);
    }
    if matches!(mode, RepresentationMode::Cls | RepresentationMode::Both) {
        sets.push([
            cls_representation_on_tape(tape, org.hidden),
            cls_representation_on_tape(tape, pos.hidden),
            cls_representation_on_tape(tape, neg.hidden),
        ]);
    }
    sets
}

/// Forward/backward for one item on its own tape. Returns the gradient
/// contribution (already scaled by the term weights) and raw metric sums.
fn item_grads(
    params: &ModelParams,
    item: &TrainItem,
    active: ActiveLosses,
    config: &TrainConfig,
    tw: TermWeights,
) -> Result<(Vec<Matrix>, ItemMetrics)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let enc_cfg = params.config.clone();
    let mut metrics = ItemMetrics::default();
    let mut terms: Vec<(crate::autodiff::NodeId, f64)> = Vec::new();
    let classifier_on = params.with_classifier && active.span;
    let cl_on = active.spancl && config.weights.lambda2 != 0.0;

    match item {
        TrainItem::Triple(t) => {
            if !active.span && !cl_on {
                return Ok((Vec::new(), metrics));
            }
            let org = encode_member(&mut tape, &bound, &enc_cfg, &t.org)?;
            let neg = encode_member(&mut tape, &bound, &enc_cfg, &t.neg)?;

            if active.span {
                let (s_org, e_org) = span_logits_on_tape(&mut tape, org.hidden, &bound);
                let ce_org =
                    span_loss_on_tape(&mut tape, s_org, e_org, org.valid_len, t.org.gold_seq)?;
                let (s_neg, e_neg) = span_logits_on_tape(&mut tape, neg.hidden, &bound);
                let ce_neg = span_loss_on_tape(&mut tape, s_neg, e_neg, neg.valid_len, (0, 0))?;
                let unit = tape.weighted_sum(&[(ce_org, 0.5), (ce_neg, 0.5)]);
                metrics.span_sum += tape.scalar(unit);
                metrics.span_units += 1;
                if tw.span != 0.0 {
                    terms.push((unit, tw.span));
                }
            }
            if classifier_on {
                let l_org = answerability_logit_on_tape(&mut tape, org.hidden, &bound);
                let b_org = tape.bce_with_logit(l_org, 1.0);
                let l_neg = answerability_logit_on_tape(&mut tape, neg.hidden, &bound);
                let b_neg = tape.bce_with_logit(l_neg, 0.0);
                let unit = tape.weighted_sum(&[(b_org, 0.5), (b_neg, 0.5)]);
                metrics.bce_sum += tape.scalar(unit);
                metrics.bce_units += 1;
                if tw.bce != 0.0 {
                    terms.push((unit, tw.bce));
                }
            }
            if cl_on {
                let pos = encode_member(&mut tape, &bound, &enc_cfg, &t.pos)?;
                let reps = contrastive_reps(&mut tape, config.rep_mode, t, &org, &pos, &neg);
                let mut cl_value = 0.0;
                let mut cl_nodes = Vec::new();
                let mut degenerate = false;
                for (i, [zo, zp, zn]) in reps.iter().enumerate() {
                    match spancl_on_tape(&mut tape, *zo, *zp, *zn, config.weights.tau) {
                        Ok(nodes) => {
                            cl_value += tape.scalar(nodes.loss);
                            if i == 0 {
                                metrics.margin_sum +=
                                    tape.scalar(nodes.phi_pos) - tape.scalar(nodes.phi_neg);
                                metrics.margin_count += 1;
                            }
                            cl_nodes.push(nodes.loss);
                        }
                        Err(Error::Degenerate(_)) => {
                            degenerate = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                if degenerate {
                    metrics.cl_skipped += 1;
                } else {
                    metrics.cl_sum += cl_value;
                    metrics.cl_units += 1;
                    if tw.spancl != 0.0 {
                        for node in cl_nodes {
                            terms.push((node, tw.spancl));
                        }
                    }
                }
            }
        }
        TrainItem::Single(s) => {
            if !active.span {
                return Ok((Vec::new(), metrics));
            }
            let enc = {
                let valid_len = s.window.valid_len();
                let hidden =
                    encode_on_tape(&mut tape, &bound, &enc_cfg, &s.window.input_ids, valid_len)?;
                EncodedMember { hidden, valid_len }
            };
            let (sl, el) = span_logits_on_tape(&mut tape, enc.hidden, &bound);
            let ce = span_loss_on_tape(&mut tape, sl, el, enc.valid_len, s.label)?;
            metrics.span_sum += tape.scalar(ce);
            metrics.span_units += 1;
            if tw.span != 0.0 {
                terms.push((ce, tw.span));
            }
            if classifier_on {
                let logit = answerability_logit_on_tape(&mut tape, enc.hidden, &bound);
                let bce = tape.bce_with_logit(logit, f64::from(s.answerable));
                metrics.bce_sum += tape.scalar(bce);
                metrics.bce_units += 1;
                if tw.bce != 0.0 {
                    terms.push((bce, tw.bce));
                }
            }
        }
    }

    if terms.is_empty() {
        return Ok((Vec::new(), metrics));
    }
    let total = tape.weighted_sum(&terms);
    let grads = tape.backward(total);
    let mut acc = zero_grads(params);
    accumulate_bound_grads(&mut acc, &grads, &bound);
    Ok((acc, metrics))
}

/// One optimization step over a batch. Returns the summed gradients and the
/// step metrics; gradient summation is ordered, so results are independent
/// of thread scheduling.
fn compute_step(
    params: &ModelParams,
    batch: &[TrainItem],
    active: ActiveLosses,
    config: &TrainConfig,
) -> Result<(Vec<Matrix>, ItemMetrics)> {
    let n_span = batch
        .iter()
        .filter(|i| match i {
            TrainItem::Triple(_) => true,
            TrainItem::Single(_) => true,
        })
        .count()
        .max(1);
    let n_triples = batch
        .iter()
        .filter(|i| matches!(i, TrainItem::Triple(_)))
        .count()
        .max(1);

    let tw = TermWeights {
        span: if active.span {
            config.weights.lambda1 / n_span as f64
        } else {
            0.0
        },
        spancl: if active.spancl {
            config.weights.lambda2 / n_triples as f64
        } else {
            0.0
        },
        bce: 1.0 / n_span as f64,
    };

    if config.in_batch_negatives && active.spancl && config.weights.lambda2 != 0.0 {
        return compute_step_shared_negatives(params, batch, active, config, tw);
    }

    let results: Vec<Result<(Vec<Matrix>, ItemMetrics)>> = batch
        .par_iter()
        .map(|item| item_grads(params, item, active, config, tw))
        .collect();

    let mut grads = zero_grads(params);
    let mut metrics = ItemMetrics::default();
    for r in results {
        let (g, m) = r?;
        metrics.merge(&m);
        for (acc, delta) in grads.iter_mut().zip(&g) {
            *acc += delta;
        }
    }
    Ok((grads, metrics))
}

/// In-batch-negative extension: one tape for the whole batch so each
/// anchor's denominator can include every other triple's distortion.
fn compute_step_shared_negatives(
    params: &ModelParams,
    batch: &[TrainItem],
    active: ActiveLosses,
    config: &TrainConfig,
    tw: TermWeights,
) -> Result<(Vec<Matrix>, ItemMetrics)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let enc_cfg = params.config.clone();
    let mut metrics = ItemMetrics::default();
    let mut terms = Vec::new();
    let classifier_on = params.with_classifier && active.span;

    struct TripleReps {
        z_org: crate::autodiff::NodeId,
        z_pos: crate::autodiff::NodeId,
        z_neg: crate::autodiff::NodeId,
    }
    let mut reps: Vec<TripleReps> = Vec::new();

    for item in batch {
        match item {
            TrainItem::Triple(t) => {
                let org = encode_member(&mut tape, &bound, &enc_cfg, &t.org)?;
                let neg = encode_member(&mut tape, &bound, &enc_cfg, &t.neg)?;
                let pos = encode_member(&mut tape, &bound, &enc_cfg, &t.pos)?;
                if active.span {
                    let (s_org, e_org) = span_logits_on_tape(&mut tape, org.hidden, &bound);
                    let ce_org =
                        span_loss_on_tape(&mut tape, s_org, e_org, org.valid_len, t.org.gold_seq)?;
                    let (s_neg, e_neg) = span_logits_on_tape(&mut tape, neg.hidden, &bound);
                    let ce_neg =
                        span_loss_on_tape(&mut tape, s_neg, e_neg, neg.valid_len, (0, 0))?;
                    let unit = tape.weighted_sum(&[(ce_org, 0.5), (ce_neg, 0.5)]);
                    metrics.span_sum += tape.scalar(unit);
                    metrics.span_units += 1;
                    if tw.span != 0.0 {
                        terms.push((unit, tw.span));
                    }
                }
                if classifier_on {
                    let l_org = answerability_logit_on_tape(&mut tape, org.hidden, &bound);
                    let b_org = tape.bce_with_logit(l_org, 1.0);
                    let l_neg = answerability_logit_on_tape(&mut tape, neg.hidden, &bound);
                    let b_neg = tape.bce_with_logit(l_neg, 0.0);
                    let unit = tape.weighted_sum(&[(b_org, 0.5), (b_neg, 0.5)]);
                    metrics.bce_sum += tape.scalar(unit);
                    metrics.bce_units += 1;
                    if tw.bce != 0.0 {
                        terms.push((unit, tw.bce));
                    }
                }
                reps.push(TripleReps {
                    z_org: span_representation_on_tape(
                        &mut tape,
                        org.hidden,
                        t.org.gold_seq.0,
                        t.org.gold_seq.1,
                    ),
                    z_pos: span_representation_on_tape(
                        &mut tape,
                        pos.hidden,
                        t.pos.gold_seq.0,
                        t.pos.gold_seq.1,
                    ),
                    z_neg: span_representation_on_tape(
                        &mut tape,
                        neg.hidden,
                        t.neg.gold_seq.0,
                        t.neg.gold_seq.1,
                    ),
                });
            }
            TrainItem::Single(s) => {
                if !active.span {
                    continue;
                }
                let valid_len = s.window.valid_len();
                let hidden =
                    encode_on_tape(&mut tape, &bound, &enc_cfg, &s.window.input_ids, valid_len)?;
                let (sl, el) = span_logits_on_tape(&mut tape, hidden, &bound);
                let ce = span_loss_on_tape(&mut tape, sl, el, valid_len, s.label)?;
                metrics.span_sum += tape.scalar(ce);
                metrics.span_units += 1;
                if tw.span != 0.0 {
                    terms.push((ce, tw.span));
                }
                if classifier_on {
                    let logit = answerability_logit_on_tape(&mut tape, hidden, &bound);
                    let bce = tape.bce_with_logit(logit, f64::from(s.answerable));
                    metrics.bce_sum += tape.scalar(bce);
                    metrics.bce_units += 1;
                    if tw.bce != 0.0 {
                        terms.push((bce, tw.bce));
                    }
                }
            }
        }
    }

    // each anchor scores its own paraphrase against every in-batch negative
    for (i, anchor) in reps.iter().enumerate() {
        let phi_pos = tape.cosine(anchor.z_org, anchor.z_pos);
        let phi_pos = match phi_pos {
            Ok(node) => node,
            Err(Error::Degenerate(_)) => {
                metrics.cl_skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut sims = vec![phi_pos];
        let mut degenerate = false;
        for other in &reps {
            match tape.cosine(anchor.z_org, other.z_neg) {
                Ok(node) => sims.push(node),
                Err(Error::Degenerate(_)) => {
                    degenerate = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if degenerate {
            metrics.cl_skipped += 1;
            continue;
        }
        let own_neg = sims[1 + i];
        let margin = tape.scalar(phi_pos) - tape.scalar(own_neg);
        metrics.margin_sum += margin;
        metrics.margin_count += 1;

        let row = tape.concat_cols(&sims);
        let col = tape.transpose(row);
        let scaled = tape.scale(col, 1.0 / config.weights.tau);
        let loss = tape.cross_entropy_logits(scaled, sims.len(), 0)?;
        metrics.cl_sum += tape.scalar(loss);
        metrics.cl_units += 1;
        if tw.spancl != 0.0 {
            terms.push((loss, tw.spancl));
        }
    }

    if terms.is_empty() {
        return Ok((zero_grads(params), metrics));
    }
    let total = tape.weighted_sum(&terms);
    let grads = tape.backward(total);
    let mut acc = zero_grads(params);
    accumulate_bound_grads(&mut acc, &grads, &bound);
    Ok((acc, metrics))
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

/// One optimization step's record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub active_span: bool,
    pub active_spancl: bool,
    pub span_loss: f64,
    pub spancl_loss: f64,
    pub bce_loss: f64,
    pub combined_loss: f64,
    /// Mean similarity margin over the batch's triples, when computed.
    pub margin: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
    pub cl_skipped: usize,
}

/// Per-epoch summary written alongside the step records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean probe margin at the END of this epoch (epoch 0 entry is the
    /// pre-training probe).
    pub probe_margin: f64,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// JSONL: one step record per line, then one epoch record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        for s in &self.steps {
            let line = serde_json::to_string(&serde_json::json!({"kind": "step", "record": s}))
                .map_err(|e| Error::Input(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        for e in &self.epochs {
            let line = serde_json::to_string(&serde_json::json!({"kind": "epoch", "record": e}))
                .map_err(|e| Error::Input(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Train loop
// ---------------------------------------------------------------------------

/// Everything `train` produces: the selected parameters (best dev EM when a
/// dev corpus is given, else the final state), the log, and per-epoch
/// reports.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub final_params: ModelParams,
    pub log: TrainLog,
    pub reports: Vec<EvalReport>,
    pub best_epoch: Option<usize>,
}

/// Mean span-representation margin `phi(z_org, z_pos) - phi(z_org, z_neg)`
/// over up to `limit` triples, under the current parameters.
pub fn probe_margin(params: &ModelParams, items: &[TrainItem], limit: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for item in items.iter() {
        if count >= limit {
            break;
        }
        let TrainItem::Triple(t) = item else { continue };
        let h_org = encode(params, &t.org.window)?;
        let h_pos = encode(params, &t.pos.window)?;
        let h_neg = encode(params, &t.neg.window)?;
        let z_org = crate::contrastive::span_representation(
            h_org.hidden.view(),
            t.org.gold_seq.0,
            t.org.gold_seq.1,
            h_org.valid_len,
        )?;
        let z_pos = crate::contrastive::span_representation(
            h_pos.hidden.view(),
            t.pos.gold_seq.0,
            t.pos.gold_seq.1,
            h_pos.valid_len,
        )?;
        let z_neg = crate::contrastive::span_representation(
            h_neg.hidden.view(),
            t.neg.gold_seq.0,
            t.neg.gold_seq.1,
            h_neg.valid_len,
        )?;
        let phi_pos = crate::contrastive::cosine_similarity(&z_org, &z_pos);
        let phi_neg = crate::contrastive::cosine_similarity(&z_org, &z_neg);
        if let (Ok(p), Ok(n)) = (phi_pos, phi_neg) {
            sum += p - n;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

const PROBE_LIMIT: usize = 128;

/// Run the full training loop over prepared data.
pub fn train_prepared(
    data: &TrainData,
    dev: Option<&Corpus>,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.triple_count() == 0 {
        return Err(Error::Config(
            "training requires at least one contrastive triple".into(),
        ));
    }

    let mut params = ModelParams::init(
        config.encoder_config(vocab.len()),
        config.rep_mode.needs_classifier(),
        config.seed,
    )?;
    let mut adam = Adam::new(&params);
    let mut log = TrainLog::default();
    let mut reports = Vec::new();

    let batches_per_epoch = data.items.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let phase_boundary = (config.pretrain_fraction * total_steps as f64).floor() as usize;

    log.epochs.push(EpochRecord {
        epoch: 0,
        probe_margin: probe_margin(&params, &data.items, PROBE_LIMIT)?,
        report: None,
    });

    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.items.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &format!("shuffle:{epoch}")));

        for chunk in order.chunks(config.batch_size) {
            let started = Instant::now();
            let batch: Vec<TrainItem> =
                chunk.iter().map(|&i| data.items[i].clone()).collect();
            let active =
                select_active_losses(global_step, config.scheme, config.m_interval, phase_boundary);
            let (grads, metrics) = compute_step(&params, &batch, active, config)?;

            let span_loss = if metrics.span_units > 0 {
                metrics.span_sum / metrics.span_units as f64
            } else {
                0.0
            };
            let spancl_loss = if metrics.cl_units > 0 {
                metrics.cl_sum / metrics.cl_units as f64
            } else {
                0.0
            };
            let bce_loss = if metrics.bce_units > 0 {
                metrics.bce_sum / metrics.bce_units as f64
            } else {
                0.0
            };
            let combined_loss = config.weights.lambda1 * if active.span { span_loss } else { 0.0 }
                + config.weights.lambda2 * if active.spancl { spancl_loss } else { 0.0 }
                + if params.with_classifier && active.span {
                    bce_loss
                } else {
                    0.0
                };
            if !combined_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    detail: format!(
                        "span {span_loss}, spancl {spancl_loss}, bce {bce_loss} at epoch {epoch}"
                    ),
                });
            }

            let lr = learning_rate_at(
                global_step,
                total_steps,
                config.warmup_fraction,
                config.learning_rate,
            );
            if !grads.is_empty() {
                adam.step(&mut params, &grads, lr);
            }

            log.steps.push(StepRecord {
                step: global_step,
                epoch,
                active_span: active.span,
                active_spancl: active.spancl,
                span_loss,
                spancl_loss,
                bce_loss,
                combined_loss,
                margin: if metrics.margin_count > 0 {
                    Some(metrics.margin_sum / metrics.margin_count as f64)
                } else {
                    None
                },
                lr,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                cl_skipped: metrics.cl_skipped,
            });
            global_step += 1;
        }

        let report = match dev {
            Some(dev_corpus) => {
                let preds = predict_all(&params, vocab, dev_corpus, &config.predict_config())?;
                let report = evaluate(&preds, dev_corpus)?;
                let is_better = best
                    .as_ref()
                    .map_or(true, |(_, em, _)| report.exact > *em);
                if is_better {
                    best = Some((epoch, report.exact, params.clone()));
                }
                reports.push(report.clone());
                Some(report)
            }
            None => None,
        };

        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            probe_margin: probe_margin(&params, &data.items, PROBE_LIMIT)?,
            report,
        });
    }

    let best_epoch = best.as_ref().map(|(e, _, _)| *e);
    let selected = best.map(|(_, _, p)| p).unwrap_or_else(|| params.clone());
    Ok(TrainOutcome {
        params: selected,
        final_params: params,
        log,
        reports,
        best_epoch,
    })
}

/// Convenience entry: prepare data from a corpus plus triples, then train.
pub fn train(
    corpus: &Corpus,
    triples: &[ContrastiveTriple],
    dev: Option<&Corpus>,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if triples.is_empty() {
        return Err(Error::Config("empty triple set".into()));
    }
    let data = prepare_training_data(corpus, triples, vocab, config)?;
    train_prepared(&data, dev, vocab, config)
}
