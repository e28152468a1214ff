//! Start/end span scoring, span cross-entropy, and answer decoding with the
//! null-span convention (position pair `(0, 0)` on `[CLS]` means no answer).

use ndarray::ArrayView2;

use crate::autodiff::{NodeId, Tape};
use crate::encoder::BoundParams;
use crate::error::{Error, Result};

/// Start/end probability vectors over valid positions.
#[derive(Debug, Clone)]
pub struct SpanDistribution {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

/// Span cross-entropy with an underflow flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanLossValue {
    pub value: f64,
    /// True when a label probability hit the 1e-12 floor.
    pub clamped: bool,
}

/// Decoded answer for one window or question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanPrediction {
    Span { start: usize, end: usize },
    NoAnswer,
}

/// Raw start/end scores `h_i . w` for the first `valid_len` positions.
pub fn start_end_logits(
    hidden: ArrayView2<f64>,
    w_start: &[f64],
    w_end: &[f64],
    valid_len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = valid_len.min(hidden.nrows());
    let mut s = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for row in hidden.rows().into_iter().take(n) {
        s.push(row.iter().zip(w_start).map(|(h, w)| h * w).sum());
        e.push(row.iter().zip(w_end).map(|(h, w)| h * w).sum());
    }
    (s, e)
}

fn stable_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / z).collect()
}

/// Independent max-subtracted softmaxes of the start and end scores.
pub fn span_probabilities(start_scores: &[f64], end_scores: &[f64]) -> SpanDistribution {
    assert!(!start_scores.is_empty(), "softmax over empty scores");
    SpanDistribution {
        p_start: stable_softmax(start_scores),
        p_end: stable_softmax(end_scores),
    }
}

/// `-log p_start[y_s] - log p_end[y_e]`; unanswerable windows carry the
/// `(0, 0)` label by convention.
pub fn span_loss(dist: &SpanDistribution, label: (usize, usize)) -> Result<SpanLossValue> {
    let (ys, ye) = label;
    if ys >= dist.p_start.len() || ye >= dist.p_end.len() {
        return Err(Error::Input(format!(
            "label ({ys}, {ye}) outside the valid range ({}, {})",
            dist.p_start.len(),
            dist.p_end.len()
        )));
    }
    const FLOOR: f64 = 1e-12;
    let ps = dist.p_start[ys];
    let pe = dist.p_end[ye];
    let clamped = ps < FLOOR || pe < FLOOR;
    Ok(SpanLossValue {
        value: -ps.max(FLOOR).ln() - pe.max(FLOOR).ln(),
        clamped,
    })
}

/// Best non-null span and the null score for one window.
#[derive(Debug, Clone, Copy)]
pub struct WindowScores {
    /// `(start, end, score)` of the best legal passage span, if any.
    pub best_span: Option<(usize, usize, f64)>,
    /// `s_0 + e_0`.
    pub null_score: f64,
}

/// Scan all pairs `i <= j` inside `[passage_start, passage_end)` with length
/// at most `max_answer_len`, maximizing `s_i + e_j`. Ties prefer the earlier
/// start, then the shorter span.
pub fn window_scores(
    start_scores: &[f64],
    end_scores: &[f64],
    passage_start: usize,
    passage_end: usize,
    max_answer_len: usize,
) -> WindowScores {
    let null_score = start_scores.first().copied().unwrap_or(0.0)
        + end_scores.first().copied().unwrap_or(0.0);
    let hi = passage_end.min(start_scores.len()).min(end_scores.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for i in passage_start..hi {
        let j_max = hi.min(i + max_answer_len);
        for j in i..j_max {
            let score = start_scores[i] + end_scores[j];
            if best.map_or(true, |(_, _, b)| score > b) {
                best = Some((i, j, score));
            }
        }
    }
    WindowScores {
        best_span: best,
        null_score,
    }
}

/// Decode one window: the best span wins unless the null score plus the
/// threshold reaches it.
pub fn decode_answer(
    start_scores: &[f64],
    end_scores: &[f64],
    valid_len: usize,
    passage_token_offset: usize,
    max_answer_len: usize,
    null_threshold: f64,
) -> (SpanPrediction, f64) {
    let scores = window_scores(
        &start_scores[..valid_len.min(start_scores.len())],
        &end_scores[..valid_len.min(end_scores.len())],
        passage_token_offset,
        valid_len,
        max_answer_len,
    );
    resolve(&[scores], null_threshold)
}

/// Combine per-window scores into one prediction: the best non-null span
/// across windows against the minimal null score across windows.
pub fn resolve(windows: &[WindowScores], null_threshold: f64) -> (SpanPrediction, f64) {
    let mut best: Option<(usize, usize, f64)> = None;
    let mut min_null = f64::INFINITY;
    for w in windows {
        min_null = min_null.min(w.null_score);
        if let Some((s, e, score)) = w.best_span {
            if best.map_or(true, |(_, _, b)| score > b) {
                best = Some((s, e, score));
            }
        }
    }
    if min_null.is_infinite() {
        min_null = 0.0;
    }
    match best {
        Some((s, e, score)) if min_null + null_threshold < score => {
            (SpanPrediction::Span { start: s, end: e }, score)
        }
        _ => (SpanPrediction::NoAnswer, min_null),
    }
}

/// Index of the winning window for a resolved span prediction.
pub fn winning_window(windows: &[WindowScores], start: usize, end: usize, score: f64) -> usize {
    windows
        .iter()
        .position(|w| w.best_span == Some((start, end, score)))
        .unwrap_or(0)
}

/// Start and end logit columns on a tape: `s = H w_s`, `e = H w_e`.
pub fn span_logits_on_tape(tape: &mut Tape, hidden: NodeId, bound: &BoundParams) -> (NodeId, NodeId) {
    let s = tape.matmul(hidden, bound.get("span.ws"));
    let e = tape.matmul(hidden, bound.get("span.we"));
    (s, e)
}

/// Differentiable span cross-entropy from logit columns.
pub fn span_loss_on_tape(
    tape: &mut Tape,
    start_logits: NodeId,
    end_logits: NodeId,
    valid_len: usize,
    label: (usize, usize),
) -> Result<NodeId> {
    let ls = tape.cross_entropy_logits(start_logits, valid_len, label.0)?;
    let le = tape.cross_entropy_logits(end_logits, valid_len, label.1)?;
    Ok(tape.add(ls, le))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Matrix;
    use rand::Rng;

    #[test]
    fn logits_zero_weights_are_zero() {
        let h = Matrix::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (s, e) = start_end_logits(h.view(), &[0.0, 0.0], &[1.0, 0.0], 3);
        assert_eq!(s, vec![0.0, 0.0, 0.0]);
        assert_eq!(e, vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn logits_unit_vector_picks_axis() {
        let mut h = Matrix::zeros((2, 4));
        h[(0, 2)] = 1.0;
        let mut w = vec![0.0; 4];
        w[2] = 1.0;
        let (s, _) = start_end_logits(h.view(), &w, &w, 2);
        assert_eq!(s, vec![1.0, 0.0]);
    }

    #[test]
    fn logits_match_matrix_vector_oracle() {
        let mut rng = crate::seeds::rng_for(8, "spanhead");
        let h = Matrix::from_shape_fn((3, 2), |_| rng.gen_range(-2.0..2.0));
        let ws: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let we: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (s, e) = start_end_logits(h.view(), &ws, &we, 3);
        for i in 0..3 {
            let expect_s = h[(i, 0)] * ws[0] + h[(i, 1)] * ws[1];
            let expect_e = h[(i, 0)] * we[0] + h[(i, 1)] * we[1];
            assert!((s[i] - expect_s).abs() < 1e-15);
            assert!((e[i] - expect_e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_symmetry_and_length_one() {
        let d = span_probabilities(&[0.0, 0.0], &[5.0]);
        assert!((d.p_start[0] - 0.5).abs() < 1e-15);
        assert!((d.p_start[1] - 0.5).abs() < 1e-15);
        assert_eq!(d.p_end, vec![1.0]);
    }

    #[test]
    fn softmax_matches_brute_force() {
        let scores = [1.0, 2.0, 0.0];
        let d = span_probabilities(&scores, &scores);
        let z: f64 = scores.iter().map(|x| x.exp()).sum();
        for (p, &x) in d.p_start.iter().zip(&scores) {
            assert!((p - x.exp() / z).abs() < 1e-15);
        }
        let sum: f64 = d.p_start.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn span_loss_analytic_points() {
        let sure = SpanDistribution {
            p_start: vec![1.0, 0.0],
            p_end: vec![1.0, 0.0],
        };
        assert_eq!(span_loss(&sure, (0, 0)).unwrap().value, 0.0);

        let half = SpanDistribution {
            p_start: vec![0.5, 0.5],
            p_end: vec![0.5, 0.5],
        };
        let l = span_loss(&half, (1, 0)).unwrap();
        assert!((l.value - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(!l.clamped);

        let uniform4 = SpanDistribution {
            p_start: vec![0.25; 4],
            p_end: vec![0.25; 4],
        };
        let l4 = span_loss(&uniform4, (2, 3)).unwrap();
        assert!((l4.value - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn span_loss_clamps_underflow() {
        let d = SpanDistribution {
            p_start: vec![0.0, 1.0],
            p_end: vec![1.0, 0.0],
        };
        let l = span_loss(&d, (0, 0)).unwrap();
        assert!(l.clamped);
        assert!(l.value.is_finite());
        assert!(span_loss(&d, (5, 0)).is_err());
    }

    #[test]
    fn decode_prefers_best_passage_pair() {
        let s = [1.0, 2.0, 0.0];
        let e = [1.0, 0.0, 3.0];
        let (pred, score) = decode_answer(&s, &e, 3, 1, 30, 0.0);
        assert_eq!(pred, SpanPrediction::Span { start: 1, end: 2 });
        assert_eq!(score, 5.0);
    }

    #[test]
    fn decode_null_dominates() {
        let s = [9.0, 0.0, 0.0];
        let e = [9.0, 0.0, 0.0];
        let (pred, score) = decode_answer(&s, &e, 3, 1, 30, 0.0);
        assert_eq!(pred, SpanPrediction::NoAnswer);
        assert_eq!(score, 18.0);
    }

    #[test]
    fn decode_single_token_constraint() {
        let s = [0.0, 1.0, 5.0, 0.0];
        let e = [0.0, 9.0, 0.0, 2.0];
        // with max_answer_len 1, only i == j pairs are legal
        let (pred, _) = decode_answer(&s, &e, 4, 1, 1, 0.0);
        assert_eq!(pred, SpanPrediction::Span { start: 1, end: 1 });
    }

    #[test]
    fn decode_empty_passage_is_no_answer() {
        let s = [1.0];
        let e = [1.0];
        let (pred, _) = decode_answer(&s, &e, 1, 1, 30, 0.0);
        assert_eq!(pred, SpanPrediction::NoAnswer);
    }

    /// Exhaustive oracle over all legal pairs plus null.
    fn brute_force(
        s: &[f64],
        e: &[f64],
        pstart: usize,
        pend: usize,
        max_len: usize,
        delta: f64,
    ) -> (SpanPrediction, f64) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in pstart..pend {
            for j in i..pend {
                if j - i + 1 > max_len {
                    continue;
                }
                let sc = s[i] + e[j];
                let better = match best {
                    None => true,
                    Some((bi, bj, bs)) => {
                        sc > bs || (sc == bs && (i < bi || (i == bi && j < bj)))
                    }
                };
                if better {
                    best = Some((i, j, sc));
                }
            }
        }
        let null = s[0] + e[0];
        match best {
            Some((i, j, sc)) if null + delta < sc => (SpanPrediction::Span { start: i, end: j }, sc),
            _ => (SpanPrediction::NoAnswer, null),
        }
    }

    #[test]
    fn decode_matches_enumeration_on_random_inputs() {
        let mut rng = crate::seeds::rng_for(31, "decode-oracle");
        for _ in 0..300 {
            let l = rng.gen_range(2..=32);
            let s: Vec<f64> = (0..l).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let e: Vec<f64> = (0..l).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let pstart = rng.gen_range(1..l);
            let max_len = rng.gen_range(1..=8);
            let delta = rng.gen_range(-1.0..1.0);
            let got = decode_answer(&s, &e, l, pstart, max_len, delta);
            let want = brute_force(&s, &e, pstart, l, max_len, delta);
            assert_eq!(got.0, want.0, "l={l} pstart={pstart} max_len={max_len}");
            assert!((got.1 - want.1).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_is_shift_invariant() {
        let s = [0.5, 2.0, -1.0, 0.3];
        let e = [0.1, 0.0, 3.0, -2.0];
        let (base, _) = decode_answer(&s, &e, 4, 1, 30, 0.0);
        for c in [-3.0, 0.7, 42.0] {
            let s2: Vec<f64> = s.iter().map(|x| x + c).collect();
            let (shifted, _) = decode_answer(&s2, &e, 4, 1, 30, 0.0);
            assert_eq!(base, shifted);
            let e2: Vec<f64> = e.iter().map(|x| x + c).collect();
            let (shifted_e, _) = decode_answer(&s, &e2, 4, 1, 30, 0.0);
            assert_eq!(base, shifted_e);
        }
    }

    #[test]
    fn resolve_takes_best_span_against_min_null() {
        let windows = [
            WindowScores {
                best_span: Some((2, 3, 4.0)),
                null_score: 1.0,
            },
            WindowScores {
                best_span: Some((5, 5, 6.0)),
                null_score: 3.0,
            },
        ];
        // best span 6.0 from window 1, min null 1.0 from window 0
        let (pred, score) = resolve(&windows, 0.0);
        assert_eq!(pred, SpanPrediction::Span { start: 5, end: 5 });
        assert_eq!(score, 6.0);
        assert_eq!(winning_window(&windows, 5, 5, 6.0), 1);
        // a large threshold flips the decision to no-answer
        let (pred, score) = resolve(&windows, 5.0);
        assert_eq!(pred, SpanPrediction::NoAnswer);
        assert_eq!(score, 1.0);
    }

    #[test]
    fn tape_span_loss_matches_pure_computation() {
        let mut rng = crate::seeds::rng_for(77, "tape-vs-pure");
        let l = 6;
        let s: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let e: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let dist = span_probabilities(&s, &e);
        let pure = span_loss(&dist, (2, 4)).unwrap().value;

        let mut tape = Tape::new();
        let sn = tape.param(Matrix::from_shape_vec((l, 1), s).unwrap());
        let en = tape.param(Matrix::from_shape_vec((l, 1), e).unwrap());
        let loss = span_loss_on_tape(&mut tape, sn, en, l, (2, 4)).unwrap();
        assert!((tape.scalar(loss) - pure).abs() < 1e-12);
    }
}
